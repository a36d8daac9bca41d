"""Quantity-oriented prompt construction and a tiny template tokenizer."""
from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

TEMPLATE_WORDS = ("a", "photo", "of")

PAD_ID = 0
OOV_ID = 1
NUM_ID = 2


@dataclass(frozen=True)
class DeltaPolicy:
    """Count-bin to step-size table used to space counterfactual counts.

    ``bins`` holds ``(lower, upper, delta)`` triples; ``upper`` may be ``math.inf``.
    """

    bins: tuple = (
        (0, 10, 1),
        (10, 20, 2),
        (20, 50, 3),
        (50, 100, 5),
        (100, 200, 10),
        (200, 500, 20),
        (500, 1000, 35),
        (1000, math.inf, 50),
    )

    def __post_init__(self):
        if not self.bins:
            raise ValueError("DeltaPolicy needs at least one bin")
        if self.bins[0][0] != 0 or self.bins[-1][1] != math.inf:
            raise ValueError("bins must cover [0, inf)")
        prev_upper, prev_delta = 0, 0
        for lo, hi, delta in self.bins:
            if lo != prev_upper or hi <= lo:
                raise ValueError(f"bins must be contiguous and non-empty, got [{lo}, {hi})")
            if delta <= 0 or delta < prev_delta:
                raise ValueError("deltas must be positive and non-decreasing")
            prev_upper, prev_delta = hi, delta

    @classmethod
    def fixed(cls, delta: int) -> "DeltaPolicy":
        return cls(bins=((0, math.inf, int(delta)),))

    def scaled(self, factor: float) -> "DeltaPolicy":
        return DeltaPolicy(
            bins=tuple((lo, hi, max(1, int(round(d * factor)))) for lo, hi, d in self.bins)
        )


DEFAULT_POLICY = DeltaPolicy()


def select_delta(count: int, policy: DeltaPolicy = DEFAULT_POLICY) -> int:
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    for lo, hi, delta in policy.bins:
        if lo <= count < hi:
            return delta
    raise AssertionError("unreachable: bins cover [0, inf)")


def render(count: Optional[int], class_name: str) -> str:
    if count is None:
        return f"a photo of {class_name}"
    return f"a photo of {count} {class_name}"


@dataclass(frozen=True)
class PromptSet:
    class_name: str
    factual_count: int
    counterfactual_counts: tuple
    delta: int
    texts: tuple

    @property
    def n_counterfactual(self) -> int:
        return len(self.counterfactual_counts)

    def to_json(self) -> dict:
        return {
            "class_name": self.class_name,
            "factual_count": self.factual_count,
            "counterfactual_counts": list(self.counterfactual_counts),
            "delta": self.delta,
            "texts": list(self.texts),
        }


def counterfactual_counts(count: int, n_counterfactual: int, delta: int) -> list[int]:
    """Counts ``count -/+ k*delta`` ordered farthest-first within each half.

    Candidates below one are reflected above the upper half, keeping the list
    length fixed and the per-half distance ordering strictly decreasing.
    """
    if n_counterfactual <= 0 or n_counterfactual % 2:
        raise ValueError(f"n_counterfactual must be a positive even integer, got {n_counterfactual}")
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    half = n_counterfactual // 2
    lower = [count - k * delta for k in range(half, 0, -1)]
    n_bad = sum(1 for c in lower if c < 1)
    # the invalid slots are the farthest ones, so the reflected values go there
    # largest first to keep distances descending
    reflected = [count + (half + j) * delta for j in range(n_bad, 0, -1)]
    lower = reflected + lower[n_bad:]
    upper = [count + k * delta for k in range(half, 0, -1)]
    return lower + upper


def generate_prompt_set(
    class_name: str,
    count: int,
    n_counterfactual: int = 8,
    policy: DeltaPolicy = DEFAULT_POLICY,
) -> PromptSet:
    delta = select_delta(count, policy)
    cf = counterfactual_counts(count, n_counterfactual, delta)
    texts = (render(count, class_name),) + tuple(render(c, class_name) for c in cf)
    return PromptSet(class_name, int(count), tuple(cf), delta, texts)


def category_negatives(class_name: str, classes: Sequence[str], n: int, rng: random.Random) -> list[str]:
    """Sample ``n`` class names different from ``class_name`` (with replacement if needed)."""
    others = [c for c in classes if c != class_name]
    if not others:
        raise ValueError("category negatives need at least two classes")
    if n <= len(others):
        return rng.sample(others, n)
    return [rng.choice(others) for _ in range(n)]


@dataclass
class TokenSeq:
    ids: list
    values: list  # integer value at the numeral slot, 0 elsewhere
    num_position: Optional[int] = None
    class_positions: list = field(default_factory=list)

    def __len__(self):
        return len(self.ids)


class Vocabulary:
    """Template words plus class words; numerals share a single token class."""

    def __init__(self, class_names: Iterable[str] = ()):
        self.words = ["<pad>", "<oov>", "<num>"] + list(TEMPLATE_WORDS)
        self.index = {w: i for i, w in enumerate(self.words)}
        self.classes = sorted(set(class_names))
        for name in self.classes:
            for w in name.lower().split():
                if w not in self.index:
                    self.index[w] = len(self.words)
                    self.words.append(w)

    def __len__(self):
        return len(self.words)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.words == other.words and self.classes == other.classes

    def lookup(self, word: str) -> int:
        return self.index.get(word.lower(), OOV_ID)

    def to_json(self) -> dict:
        return {"words": list(self.words), "classes": list(self.classes)}

    @classmethod
    def from_json(cls, doc: dict) -> "Vocabulary":
        vocab = cls(doc["classes"])
        if vocab.words != list(doc["words"]):
            raise ValueError("vocabulary words do not match its class list")
        return vocab


def tokenize(text: str, vocab: Vocabulary) -> TokenSeq:
    words = text.split()
    if not words:
        raise ValueError("cannot tokenize empty text")
    ids, values, class_positions = [], [], []
    num_position = None
    for i, w in enumerate(words):
        if w.isdigit():
            if num_position is not None:
                raise ValueError(f"more than one numeral in {text!r}")
            num_position = i
            ids.append(NUM_ID)
            values.append(int(w))
            continue
        ids.append(vocab.lookup(w))
        values.append(0)
        if i >= len(TEMPLATE_WORDS):
            class_positions.append(i)
    return TokenSeq(ids, values, num_position, class_positions)


def strip_numeral(seq: TokenSeq) -> TokenSeq:
    if seq.num_position is None:
        return TokenSeq(list(seq.ids), list(seq.values), None, list(seq.class_positions))
    p = seq.num_position
    keep = [i for i in range(len(seq.ids)) if i != p]
    return TokenSeq(
        [seq.ids[i] for i in keep],
        [seq.values[i] for i in keep],
        None,
        [i - (i > p) for i in seq.class_positions],
    )
