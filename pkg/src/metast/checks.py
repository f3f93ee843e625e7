"""Finite-difference oracles for the hand-written gradients and meta scores."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .model import (TaggerParams, TaggerShape, backward, pack, per_token_grads, targets_matrix,
                    token_losses)
from .reweight import meta_token_scores

GRAD_TOL = 1e-4
META_TOL = 1e-3
GRAD_H = 1e-4
META_H = 1e-3
FLOOR = 1e-8


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = FLOOR) -> float:
    """Largest entrywise |a - n| / max(|a|, |n|, floor)."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    if a.size == 0:
        return 0.0
    return float((np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)).max())


def central_diff(f, x: np.ndarray, h: float) -> np.ndarray:
    g = np.zeros_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def random_shape(rng: np.random.Generator, max_params: int) -> TaggerShape:
    while True:
        shape = TaggerShape(vocab_size=int(rng.integers(3, 8)), n_tags=int(rng.choice([3, 5])),
                            d_emb=int(rng.integers(2, 5)), window=int(rng.integers(0, 2)),
                            hidden=int(rng.integers(2, 7)))
        if shape.n_params <= max_params:
            return shape


def random_params(shape: TaggerShape, rng: np.random.Generator, scale: float = 0.7) -> TaggerParams:
    return TaggerParams.from_flat(rng.normal(0, scale, shape.n_params), shape)


def random_targets(rng: np.random.Generator, n: int, n_tags: int) -> np.ndarray:
    if rng.random() < 0.5:
        return rng.integers(0, n_tags, size=n)
    soft = rng.random((n, n_tags)) + 0.05
    return soft / soft.sum(axis=1, keepdims=True)


@dataclass
class CheckResult:
    name: str
    instances: int
    max_error: float
    tolerance: float
    seconds: float
    errors: list = field(default_factory=list, repr=False)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def line(self, timing: bool = True) -> str:
        status = "PASS" if self.passed else "FAIL"
        text = f"{status} {self.name}: max rel err {self.max_error:.3e} (tol {self.tolerance:g}) over {self.instances} instances"
        return text + (f" in {self.seconds:.2f}s" if timing else "")


def check_backward(instances: int = 100, seed: int = 0, max_params: int = 500) -> CheckResult:
    """Weighted-loss gradient vs central differences on random tiny taggers."""
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    errs = []
    for _ in range(instances):
        shape = random_shape(rng, max_params)
        params = random_params(shape, rng)
        n = int(rng.integers(1, 7))
        toks = rng.integers(0, shape.vocab_size, size=n)
        tgt = random_targets(rng, n, shape.n_tags)
        w = rng.random(n) * 2

        def loss(v):
            return float(w @ token_losses(TaggerParams.from_flat(v, shape), toks, tgt)) / n

        fd = central_diff(loss, params.flat(), GRAD_H)
        errs.append(rel_error(backward(params, toks, tgt, w).flat(), fd))
    return CheckResult("backward", instances, max(errs), GRAD_TOL, time.perf_counter() - t0, errs)


def check_per_token(instances: int = 100, seed: int = 1, max_params: int = 500) -> CheckResult:
    """Each token's own gradient vs central differences of that token's loss."""
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    errs = []
    for _ in range(instances):
        shape = random_shape(rng, max_params)
        params = random_params(shape, rng)
        n = int(rng.integers(1, 5))
        toks = rng.integers(0, shape.vocab_size, size=n)
        tgt = random_targets(rng, n, shape.n_tags)
        grads = per_token_grads(params, toks, tgt)
        for k in range(n):
            fd = central_diff(lambda v: float(token_losses(TaggerParams.from_flat(v, shape), toks, tgt)[k]),
                              params.flat(), GRAD_H)
            errs.append(rel_error(grads[k], fd))
    return CheckResult("per_token_grads", instances, max(errs), GRAD_TOL, time.perf_counter() - t0, errs)


def fd_meta_scores(params: TaggerParams, batch, targets: np.ndarray, val_batches, lr: float,
                   h: float = META_H) -> np.ndarray:
    """Meta scores by differentiating the validation loss through an explicit perturbed SGD step.

    For each token n the perturbed step is theta - lr * grad((1/N) * sum_m eps_m * loss_m)
    with eps = +-h at n and 0 elsewhere.
    """
    n = batch.n_tokens

    def val_loss(p):
        return sum(float(token_losses(p, vb, vt).mean()) for vb, vt in val_batches)

    out = np.zeros(n)
    for k in range(n):
        onehot = np.zeros(n)
        onehot[k] = 1.0
        g_k = backward(params, batch, targets, onehot)          # (1/N) grad loss_k
        up = val_loss(params + g_k.scaled(-lr * h))
        down = val_loss(params + g_k.scaled(lr * h))
        out[k] = -(up - down) / (2 * h)
    return out


def meta_instance(rng: np.random.Generator, max_params: int = 300, S: int | None = None):
    shape = random_shape(rng, max_params)
    params = random_params(shape, rng)

    def sentences(k):
        return [rng.integers(0, shape.vocab_size, size=int(rng.integers(1, 5))) for _ in range(k)]

    seqs = sentences(int(rng.integers(1, 4)))
    batch = pack(seqs, shape.window)
    q = targets_matrix(rng.integers(0, shape.n_tags, size=batch.n_tokens), batch.n_tokens, shape.n_tags)
    val = []
    for _ in range(S or int(rng.integers(1, 4))):
        vb = pack(sentences(int(rng.integers(1, 4))), shape.window)
        val.append((vb, rng.integers(0, shape.n_tags, size=vb.n_tokens)))
    lr = float(rng.uniform(0.05, 1.0))
    return params, batch, q, val, lr


def check_meta(instances: int = 50, seed: int = 2, max_params: int = 300) -> CheckResult:
    """Inner-product meta scores vs finite differences through the perturbed step.

    Error per instance is max |analytic - fd| / max |fd| over the batch tokens.
    """
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    errs = []
    for _ in range(instances):
        params, batch, q, val, lr = meta_instance(rng, max_params)
        analytic = meta_token_scores(params, batch, q, val, lr)
        fd = fd_meta_scores(params, batch, q, val, lr)
        scale = max(np.abs(fd).max(), FLOOR)
        errs.append(float(np.abs(analytic - fd).max() / scale))
    return CheckResult("meta_token_scores", instances, max(errs), META_TOL, time.perf_counter() - t0, errs)


def gradcheck(instances: int = 100, seed: int = 0) -> list[CheckResult]:
    return [check_backward(instances, seed), check_per_token(instances, seed + 1),
            check_meta(instances, seed + 2)]
