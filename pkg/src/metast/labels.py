"""BIO label schemes, span decoding and phrase-level scoring."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


class SchemeError(ValueError):
    """Raised for tags or ids that do not belong to a label scheme."""


@dataclass(frozen=True)
class LabelScheme:
    slot_types: tuple[str, ...]
    tags: tuple[str, ...] = field(init=False)
    tag_index: dict[str, int] = field(init=False, compare=False, repr=False)

    def __post_init__(self):
        slot_types = tuple(self.slot_types)
        if len(set(slot_types)) != len(slot_types):
            raise SchemeError(f"duplicate slot types in {slot_types}")
        tags = ["O"]
        for s in slot_types:
            tags += [f"B-{s}", f"I-{s}"]
        object.__setattr__(self, "slot_types", slot_types)
        object.__setattr__(self, "tags", tuple(tags))
        object.__setattr__(self, "tag_index", {t: i for i, t in enumerate(tags)})

    @classmethod
    def from_tags(cls, tags: Iterable[str]) -> "LabelScheme":
        """Infer a scheme from observed tag strings, keeping first-seen slot order."""
        seen: dict[str, None] = {}
        for t in tags:
            if t == "O":
                continue
            prefix, _, slot = t.partition("-")
            if prefix not in ("B", "I") or not slot:
                raise SchemeError(f"not a BIO tag: {t!r}")
            seen.setdefault(slot, None)
        return cls(tuple(seen))

    @property
    def n_tags(self) -> int:
        return len(self.tags)

    def id(self, tag: str) -> int:
        try:
            return self.tag_index[tag]
        except KeyError:
            raise SchemeError(f"tag {tag!r} not in scheme {self.tags}") from None

    def name(self, tag_id: int) -> str:
        if not 0 <= tag_id < len(self.tags):
            raise SchemeError(f"tag id {tag_id} out of range [0, {len(self.tags)})")
        return self.tags[tag_id]

    def begin_id(self, slot: str) -> int:
        return 1 + 2 * self.slot_types.index(slot)

    def inside_id(self, slot: str) -> int:
        return 2 + 2 * self.slot_types.index(slot)

    def slot_of(self, tag_id: int) -> str | None:
        """Slot type carried by a tag id, None for ``O``."""
        self.name(tag_id)
        return None if tag_id == 0 else self.slot_types[(tag_id - 1) // 2]


@dataclass(frozen=True, order=True)
class Span:
    start: int
    end: int
    slot_type: str


@dataclass
class TaggedSentence:
    """Tokens with gold or pseudo tags.

    ``soft_tags`` holds an N x n_tags row-stochastic matrix when the tags are
    soft pseudo-labels; ``token_weights`` carries per-token training weights.
    """

    tokens: list[str]
    tags: np.ndarray
    soft_tags: np.ndarray | None = None
    token_weights: np.ndarray | None = None

    def __post_init__(self):
        self.tokens = list(self.tokens)
        self.tags = np.asarray(self.tags, dtype=np.int64).reshape(-1)
        n = len(self.tokens)
        if len(self.tags) != n:
            raise ValueError(f"{n} tokens but {len(self.tags)} tags")
        if self.soft_tags is not None:
            soft = np.asarray(self.soft_tags, dtype=np.float64)
            if soft.ndim != 2 or soft.shape[0] != n:
                raise ValueError(f"soft_tags shape {soft.shape} does not match {n} tokens")
            if (soft < 0).any() or not np.allclose(soft.sum(axis=1), 1.0, atol=1e-6, rtol=0):
                raise ValueError("soft_tags rows must be non-negative and sum to 1")
            self.soft_tags = soft
        if self.token_weights is not None:
            w = np.asarray(self.token_weights, dtype=np.float64).reshape(-1)
            if len(w) != n:
                raise ValueError(f"{len(w)} token weights for {n} tokens")
            if (w < 0).any():
                raise ValueError("token weights must be non-negative")
            self.token_weights = w

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        if not isinstance(other, TaggedSentence):
            return NotImplemented

        def same(a, b):
            if a is None or b is None:
                return a is b
            return a.shape == b.shape and bool(np.array_equal(a, b))

        return (
            self.tokens == other.tokens
            and same(self.tags, other.tags)
            and same(self.soft_tags, other.soft_tags)
            and same(self.token_weights, other.token_weights)
        )


def bio_decode(tags: Sequence[int], scheme: LabelScheme) -> list[Span]:
    """Decode tag ids into spans.

    A dangling ``I-x`` (not preceded by ``B-x`` or ``I-x``) opens a new span.
    """
    spans = []
    open_slot, open_start = None, 0
    n = len(tags)
    for i, t in enumerate(tags):
        t = int(t)
        if not 0 <= t < scheme.n_tags:
            raise SchemeError(f"tag id {t} at position {i} out of range [0, {scheme.n_tags})")
        if t == 0:
            slot, begins = None, False
        else:
            slot = scheme.slot_types[(t - 1) // 2]
            begins = t % 2 == 1 or slot != open_slot
        if open_slot is not None and (slot is None or begins):
            spans.append(Span(open_start, i - 1, open_slot))
            open_slot = None
        if slot is not None and begins:
            open_slot, open_start = slot, i
    if open_slot is not None:
        spans.append(Span(open_start, n - 1, open_slot))
    return spans


def bio_encode(spans: Iterable[Span], length: int, scheme: LabelScheme) -> np.ndarray:
    tags = np.zeros(length, dtype=np.int64)
    covered = np.zeros(length, dtype=bool)
    for sp in spans:
        if not 0 <= sp.start <= sp.end < length:
            raise ValueError(f"span {sp} out of bounds for length {length}")
        if covered[sp.start:sp.end + 1].any():
            raise ValueError(f"span {sp} overlaps another span")
        covered[sp.start:sp.end + 1] = True
        tags[sp.start] = scheme.begin_id(sp.slot_type)
        tags[sp.start + 1:sp.end + 1] = scheme.inside_id(sp.slot_type)
    return tags


def is_valid_bio(tags: Sequence[int], scheme: LabelScheme) -> bool:
    """True when no ``I-x`` needs repair, i.e. every ``I-x`` continues an ``x`` span."""
    prev = 0
    for t in tags:
        t = int(t)
        if t != 0 and t % 2 == 0 and prev not in (t - 1, t):
            return False
        prev = t
    return True


def span_counts(pred: Sequence[Sequence[int]], gold: Sequence[Sequence[int]],
                scheme: LabelScheme) -> tuple[int, int, int]:
    """(correct, predicted, gold) span counts, micro-summed over sentences."""
    if len(pred) != len(gold):
        raise ValueError(f"{len(pred)} predicted sentences vs {len(gold)} gold")
    correct = n_pred = n_gold = 0
    for i, (p, g) in enumerate(zip(pred, gold)):
        if len(p) != len(g):
            raise ValueError(f"sentence {i}: {len(p)} predicted tags vs {len(g)} gold")
        ps, gs = set(bio_decode(p, scheme)), set(bio_decode(g, scheme))
        correct += len(ps & gs)
        n_pred += len(ps)
        n_gold += len(gs)
    return correct, n_pred, n_gold


def prf(correct: int, n_pred: int, n_gold: int) -> dict[str, float]:
    precision = correct / n_pred if n_pred else 0.0
    recall = correct / n_gold if n_gold else 0.0
    # harmonic mean of P and R, written in counts so it is correctly rounded
    f1 = 2 * correct / (n_pred + n_gold) if correct else 0.0
    return {"precision": precision, "recall": recall, "f1": f1}


def phrase_f1(pred: Sequence[Sequence[int]], gold: Sequence[Sequence[int]],
              scheme: LabelScheme) -> dict[str, float]:
    """Micro-averaged exact-match span precision / recall / F1."""
    return prf(*span_counts(pred, gold, scheme))
