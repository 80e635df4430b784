"""Small hand-built tabular worlds that exercise the whole decode loop.

Each builder returns a ``Fixture`` holding a generation table, a separate
scoring table over the same vocabulary, a prompt, a global description and
a decider script. Tables are keyed by token surfaces here and converted to
ids on construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

from ecrd.backends import TabularModel
from ecrd.decider import ScriptedDecider
from ecrd.engine import DecodeConfig

EOS = "<eos>"

DRESS_SENTENCE = "The rightmost dress is blue and partially hidden behind a tree."
PRICE_SENTENCE = "A tag behind the box with the banana print shows 300 ."


@dataclass
class Fixture:
    generator: TabularModel
    scorer: TabularModel
    prompt: str
    global_description: str
    script: list[dict] = field(default_factory=list)

    @property
    def prompt_ids(self) -> list[int]:
        return self.generator.tokenize(self.prompt)

    @property
    def eos(self) -> int:
        return self.generator.token_id(EOS)

    def decider(self) -> ScriptedDecider:
        return ScriptedDecider(self.script)

    def config(self, **overrides) -> DecodeConfig:
        kw = dict(global_description=self.global_description, stop_tokens=(self.eos,), max_tokens=32)
        kw.update(overrides)
        return DecodeConfig(**kw)


def _table(vocab: Sequence[str], default: Mapping[str, float],
           entries: Mapping[tuple[str, ...], Mapping[str, float]]) -> TabularModel:
    ids = {s: i for i, s in enumerate(vocab)}
    dflt = [default.get(s, 0.0) for s in vocab]
    return TabularModel(
        vocab, dflt,
        {tuple(ids[s] for s in ctx): {ids[s]: p for s, p in probs.items()} for ctx, probs in entries.items()},
    )


def _uniform(vocab: Sequence[str]) -> dict[str, float]:
    return {s: 1.0 / len(vocab) for s in vocab}


def _vocab(*texts: str, extra: Sequence[str] = ()) -> list[str]:
    from ecrd.backends import _TOKEN_RE

    seen = ["<unk>", EOS]
    for piece in [p for t in texts for p in _TOKEN_RE.findall(t)] + list(extra):
        if piece not in seen:
            seen.append(piece)
    return seen


def dress_case() -> Fixture:
    """Mid-chain grounding: the colour step is ambiguous and the decider settles it.

    The base leans "red", the global description leans slightly "blue", and
    the mixture still leans "red" by a hair, so the trigger fires. After
    "blue" the decider's sentence later tips "hidden" over "visible".
    """
    prompt = "What color is the first dress from the right ?"
    desc = "Three dresses hang near a tree ; the right one looks blue or red ."
    vocab = _vocab(prompt, desc, DRESS_SENTENCE,
                   extra=["visible", "and", "bright", "green", "It", "by", "the", ","])
    gen = _table(vocab, {EOS: 1.0}, {
        ("right", "?"): {"It": 1.0},
        ("?", "It"): {"is": 1.0},
        ("It", "is"): {"red": 0.46, "blue": 0.44, "green": 0.10},
        ("blue",): {",": 1.0},
        (",",): {"partially": 1.0},
        ("partially",): {"visible": 0.50, "hidden": 0.45, "by": 0.05},
        ("hidden",): {"by": 1.0},
        ("visible",): {"by": 1.0},
        ("by",): {"the": 1.0},
        ("by", "the"): {"tree": 1.0},
        ("tree",): {".": 1.0},
        ("red",): {"and": 1.0},
        ("and",): {"bright": 1.0},
        ("bright",): {".": 1.0},
        (".",): {EOS: 1.0},
    })
    scorer = _table(vocab, _uniform(vocab), {
        ("looks",): {"blue": 0.26, "red": 0.25},
        ("partially",): {"hidden": 0.9},
    })
    script = [{"chosen": "blue", "sentence": DRESS_SENTENCE,
               "annotations": [{"bbox": [412, 96, 540, 388], "label": "dress"}]}]
    return Fixture(gen, scorer, prompt, desc, script)


def price_tag_case() -> Fixture:
    """Final-answer case: the decider commits "3"; its sentence then carries "0", "0"."""
    prompt = "What is the number behind the box ?"
    desc = "A cardboard box with a banana sits on a shelf ."
    vocab = _vocab(prompt, desc, PRICE_SENTENCE, extra=["5", "8", "It", "'", "The", "number", "is"])
    gen = _table(vocab, {EOS: 1.0}, {
        ("box", "?"): {"The": 1.0},
        ("?", "The"): {"number": 1.0},
        ("The", "number"): {"is": 1.0},
        ("number", "is"): {"5": 0.50, "3": 0.42, "8": 0.08},
        ("is", "3"): {"5": 0.45, "0": 0.40, "'": 0.10, ".": 0.05},
        ("3", "0"): {"5": 0.45, "0": 0.40, "'": 0.10, ".": 0.05},
        ("0", "0"): {".": 1.0},
        (".",): {EOS: 1.0},
    })
    scorer = _table(vocab, _uniform(vocab), {
        ("shelf",): {"3": 0.06, "5": 0.05},
        ("3",): {"0": 0.9},
        ("3", "0"): {"0": 0.9},
    })
    script = [{"chosen": "3", "sentence": PRICE_SENTENCE,
               "annotations": [{"bbox": [120, 210, 188, 250], "label": "price tag"}]}]
    return Fixture(gen, scorer, prompt, desc, script)


def peak_vs_sustained_case() -> Fixture:
    """Description with one sharp early peak for "a" and steady support for "b".

    Best-prefix scoring picks "a"; mean-over-prefix support picks "b".
    """
    prompt = "Q ?"
    desc = "one two three"
    vocab = _vocab(prompt, desc, extra=["a", "b", "c"])
    gen = _table(vocab, {EOS: 1.0}, {
        ("?",): {"a": 0.45, "b": 0.44, "c": 0.11},
        ("a",): {EOS: 1.0},
        ("b",): {EOS: 1.0},
    })
    scorer = _table(vocab, _uniform(vocab), {
        (): {"a": 0.96, "b": 0.03},
        ("one",): {"b": 0.9},
        ("one", "two"): {"b": 0.9},
    })
    return Fixture(gen, scorer, prompt, desc, [])
