"""Recover per-benchmark latency constants from simulated per-question timings.

Each question draws a decider-call count, then a time t0 + l0*r plus
Gaussian noise; the fit should land near the generating constants.

    python scripts/latency_fit_demo.py --questions 300 --noise 0.05
"""

import argparse

import numpy as np

from ecrd.latency import fit_latency_model

# seconds at zero calls, seconds per call
BENCHMARKS = {
    "OCRBench": (3.24, 1.12),
    "V*": (8.98, 1.32),
    "ChartQA": (9.76, 1.30),
    "HallusionBench": (11.67, 1.43),
    "MathVista": (12.92, 1.46),
}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--questions", type=int, default=300)
    ap.add_argument("--noise", type=float, default=0.05)
    ap.add_argument("--mean-calls", type=float, default=1.5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)
    print(f"{'benchmark':15} {'t0':>6} {'fit':>7} {'l0':>6} {'fit':>7} {'rmse':>6}")
    for name, (t0, l0) in BENCHMARKS.items():
        r = rng.poisson(args.mean_calls, args.questions)
        T = t0 + l0 * r + rng.normal(0, args.noise, args.questions)
        m = fit_latency_model(zip(r, T))
        print(f"{name:15} {t0:6.2f} {m.t0:7.3f} {l0:6.2f} {m.l0:7.3f} {m.residual:6.3f}")


if __name__ == "__main__":
    main()
