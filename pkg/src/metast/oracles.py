"""Brute-force and hand-worked references used by ``metast oracle`` and the tests."""
from __future__ import annotations

import numpy as np

from .acquisition import AcquisitionState, refresh_weights
from .labels import LabelScheme, phrase_f1


def brute_spans(tags, scheme: LabelScheme) -> set[tuple[int, int, str]]:
    """Every (start, end, type) satisfying the span definition, by enumeration.

    [i, j] is an x-span when tag i is B-x, or I-x not continuing an x tag;
    tags i+1..j are all I-x; and tag j+1 is not I-x.
    """
    tags = [int(t) for t in tags]
    n = len(tags)

    def typ(t):
        return None if t == 0 else scheme.slot_types[(t - 1) // 2]

    def inside(t, x):
        return t != 0 and t % 2 == 0 and typ(t) == x

    out = set()
    for i in range(n):
        x = typ(tags[i])
        if x is None:
            continue
        if inside(tags[i], x) and i > 0 and typ(tags[i - 1]) == x:
            continue
        for j in range(i, n):
            if all(inside(tags[k], x) for k in range(i + 1, j + 1)) and \
                    (j + 1 == n or not inside(tags[j + 1], x)):
                out.add((i, j, x))
    return out


def brute_f1(pred, gold, scheme: LabelScheme) -> float:
    ps = {(k, *s) for k, p in enumerate(pred) for s in brute_spans(p, scheme)}
    gs = {(k, *s) for k, g in enumerate(gold) for s in brute_spans(g, scheme)}
    c = len(ps & gs)
    return 2 * c / (len(ps) + len(gs)) if c else 0.0


def random_pair(rng: np.random.Generator, scheme: LabelScheme, max_len: int = 12):
    n = int(rng.integers(0, max_len + 1))
    gold = rng.integers(0, scheme.n_tags, size=n)
    # predictions near the gold sequence so that matches actually happen
    pred = np.where(rng.random(n) < 0.3, rng.integers(0, scheme.n_tags, size=n), gold)
    return pred, gold


def span_oracle_agreement(n_pairs: int = 1000, seed: int = 0) -> int:
    """Number of sentence pairs where phrase_f1 and the brute-force oracle differ."""
    rng = np.random.default_rng(seed)
    scheme = LabelScheme(("A", "B", "C"))
    bad = 0
    for _ in range(n_pairs):
        pred, gold = random_pair(rng, scheme)
        if phrase_f1([pred], [gold], scheme)["f1"] != brute_f1([pred], [gold], scheme):
            bad += 1
    return bad


def acquisition_worked_example() -> tuple[np.ndarray, np.ndarray]:
    """Weights for decays {0.2, 0} and for a history where nothing decays."""
    st = AcquisitionState(2, R=2)
    # example 0: buffer {0.6, 0.2}, mean 0.4, current 0.2 -> decay 0.2; example 1 flat
    st.push([0.6, 0.5]).push([0.2, 0.5])
    refresh_weights(st)
    flat = AcquisitionState(3, R=3)
    for _ in range(3):
        flat.push([0.7, 0.2, 1.1])
    refresh_weights(flat)
    return st.weights, flat.weights
