"""Window tagger: embeddings, context-window concatenation, tanh layer, softmax.

All gradients are written out by hand; ``gradcheck`` in :mod:`metast.checks`
compares them against central finite differences.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Iterable, Sequence

import numpy as np

from . import _kernels as K


class NumericalError(FloatingPointError):
    """Non-finite values appeared in a gradient or parameter update."""


@dataclass
class Vocab:
    token_index: dict[str, int]
    unk_id: int = 0

    @classmethod
    def build(cls, sentences: Iterable[Sequence[str]], unk: str = "<unk>") -> "Vocab":
        index = {unk: 0}
        for toks in sentences:
            for t in toks:
                if t not in index:
                    index[t] = len(index)
        return cls(index)

    @property
    def size(self) -> int:
        return len(self.token_index)

    def encode(self, tokens: Sequence[str]) -> np.ndarray:
        get = self.token_index.get
        return np.array([get(t, self.unk_id) for t in tokens], dtype=np.int64)


@dataclass(frozen=True)
class TaggerShape:
    vocab_size: int
    n_tags: int
    d_emb: int = 32
    window: int = 1
    hidden: int = 64

    @property
    def n_inputs(self) -> int:
        return (2 * self.window + 1) * self.d_emb

    @property
    def n_params(self) -> int:
        return (self.vocab_size * self.d_emb + self.n_inputs * self.hidden + self.hidden
                + self.hidden * self.n_tags + self.n_tags)


@dataclass
class TaggerParams:
    """Parameter (or gradient) arrays. Canonical flat order: E, W1, b1, W2, b2."""

    E: np.ndarray
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    @property
    def arrays(self) -> tuple[np.ndarray, ...]:
        return tuple(getattr(self, f.name) for f in fields(self))

    @property
    def shape(self) -> TaggerShape:
        vocab_size, d_emb = self.E.shape
        hidden, n_tags = self.W2.shape
        window = (self.W1.shape[0] // d_emb - 1) // 2
        return TaggerShape(vocab_size, n_tags, d_emb, window, hidden)

    def flat(self) -> np.ndarray:
        return np.concatenate([a.reshape(-1) for a in self.arrays])

    @classmethod
    def from_flat(cls, vec: np.ndarray, shape: TaggerShape) -> "TaggerParams":
        sizes = [(shape.vocab_size, shape.d_emb), (shape.n_inputs, shape.hidden), (shape.hidden,),
                 (shape.hidden, shape.n_tags), (shape.n_tags,)]
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != shape.n_params:
            raise ValueError(f"flat vector has {vec.size} entries, expected {shape.n_params}")
        out, pos = [], 0
        for s in sizes:
            n = int(np.prod(s))
            out.append(vec[pos:pos + n].reshape(s).copy())
            pos += n
        return cls(*out)

    @classmethod
    def zeros(cls, shape: TaggerShape) -> "TaggerParams":
        return cls.from_flat(np.zeros(shape.n_params), shape)

    def copy(self) -> "TaggerParams":
        return TaggerParams(*(a.copy() for a in self.arrays))

    def scaled(self, c: float) -> "TaggerParams":
        return TaggerParams(*(c * a for a in self.arrays))

    def __add__(self, other: "TaggerParams") -> "TaggerParams":
        return TaggerParams(*(a + b for a, b in zip(self.arrays, other.arrays)))

    def dot(self, other: "TaggerParams") -> float:
        return float(sum(np.vdot(a, b) for a, b in zip(self.arrays, other.arrays)))

    def is_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays)

    def identical(self, other: "TaggerParams") -> bool:
        return all(np.array_equal(a, b) for a, b in zip(self.arrays, other.arrays))


GradBuffer = TaggerParams


def init_params(shape: TaggerShape, rng: np.random.Generator, scale: float = 0.1) -> TaggerParams:
    """Uniform(-scale, scale) matrices, zero biases."""
    E = rng.uniform(-scale, scale, (shape.vocab_size, shape.d_emb))
    W1 = rng.uniform(-scale, scale, (shape.n_inputs, shape.hidden))
    W2 = rng.uniform(-scale, scale, (shape.hidden, shape.n_tags))
    return TaggerParams(E, W1, np.zeros(shape.hidden), W2, np.zeros(shape.n_tags))


# ------------------------------------------------------------------ batching

@dataclass
class Batch:
    """Several sentences packed into one token stream.

    ``ctx`` holds each token's window of ids (-1 = padding); ``offsets`` has
    len(sentences)+1 entries delimiting sentences in the stream.
    """

    ctx: np.ndarray
    offsets: np.ndarray

    @property
    def n_tokens(self) -> int:
        return self.ctx.shape[0]

    @property
    def lengths(self) -> np.ndarray:
        return np.diff(self.offsets)

    def split(self, arr: np.ndarray) -> list[np.ndarray]:
        return [arr[a:b] for a, b in zip(self.offsets[:-1], self.offsets[1:])]


def pack(seqs: Sequence[np.ndarray], window: int) -> Batch:
    offsets = np.zeros(len(seqs) + 1, dtype=np.int64)
    np.cumsum([len(s) for s in seqs], out=offsets[1:])
    ctx = np.full((int(offsets[-1]), 2 * window + 1), -1, dtype=np.int64)
    for s, start in zip(seqs, offsets[:-1]):
        s = np.asarray(s, dtype=np.int64)
        n = len(s)
        for j, shift in enumerate(range(-window, window + 1)):
            lo, hi = max(0, -shift), min(n, n - shift)
            if lo < hi:
                ctx[start + lo:start + hi, j] = s[lo + shift:hi + shift]
    return Batch(ctx, offsets)


def _as_batch(tokens, params: TaggerParams) -> Batch:
    if isinstance(tokens, Batch):
        batch = tokens
    else:
        batch = pack([np.asarray(tokens, dtype=np.int64)], params.shape.window)
    ids = batch.ctx
    if ids.size and (ids.max() >= params.E.shape[0] or ids.min() < -1):
        raise ValueError(f"token id out of range [0, {params.E.shape[0]})")
    return batch


def targets_matrix(targets, n_tokens: int, n_tags: int) -> np.ndarray:
    """Hard tag ids (N,) or soft rows (N, C) -> (N, C) target distribution."""
    t = np.asarray(targets)
    if t.ndim == 1:
        if len(t) != n_tokens:
            raise ValueError(f"{len(t)} targets for {n_tokens} tokens")
        if len(t) and (t.min() < 0 or t.max() >= n_tags):
            raise ValueError("target tag id out of range")
        q = np.zeros((n_tokens, n_tags))
        q[np.arange(n_tokens), t.astype(np.int64)] = 1.0
        return q
    if t.shape != (n_tokens, n_tags):
        raise ValueError(f"soft targets shape {t.shape}, expected {(n_tokens, n_tags)}")
    return t.astype(np.float64)


def dropout_mask(rng: np.random.Generator, n_tokens: int, hidden: int, rate: float) -> np.ndarray | None:
    """Inverted-dropout mask for the hidden layer, or None when rate is 0."""
    if rate <= 0:
        return None
    keep = rng.random((n_tokens, hidden)) >= rate
    return keep / (1.0 - rate)


# ------------------------------------------------------------ forward/backward

@dataclass
class _Cache:
    X: np.ndarray
    h: np.ndarray
    hd: np.ndarray
    logp: np.ndarray


def _forward(params: TaggerParams, batch: Batch, mask) -> _Cache:
    X = K.gather_windows(params.E, batch.ctx)
    h = np.tanh(X @ params.W1 + params.b1)
    hd = h if mask is None else h * mask
    z = hd @ params.W2 + params.b2
    zmax = z.max(axis=1, keepdims=True) if len(z) else z
    shifted = z - zmax
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return _Cache(X, h, hd, logp)


def forward(params: TaggerParams, tokens, dropout_mask=None) -> np.ndarray:
    """Per-token class probabilities, shape (N, n_tags)."""
    batch = _as_batch(tokens, params)
    return np.exp(_forward(params, batch, dropout_mask).logp)


def _xent(logp: np.ndarray, q: np.ndarray) -> np.ndarray:
    # q == 0 entries must not touch logp (keeps 0 * -inf out)
    return -np.where(q > 0, q * logp, 0.0).sum(axis=1)


def token_losses(params: TaggerParams, tokens, targets, dropout_mask=None) -> np.ndarray:
    batch = _as_batch(tokens, params)
    cache = _forward(params, batch, dropout_mask)
    q = targets_matrix(targets, batch.n_tokens, params.W2.shape[1])
    return _xent(cache.logp, q)


def _check(g: TaggerParams) -> TaggerParams:
    if not g.is_finite():
        raise NumericalError("non-finite gradient")
    return g


def value_and_grad(params: TaggerParams, tokens, targets, weights=None,
                   dropout_mask=None) -> tuple[float, GradBuffer]:
    """Weighted mean token loss (1/N) * sum_n weights[n] * loss_n and its gradient."""
    batch = _as_batch(tokens, params)
    n = batch.n_tokens
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (n,):
        raise ValueError(f"{w.shape[0] if w.ndim else 0} weights for {n} tokens")
    if (w < 0).any():
        raise ValueError("token weights must be non-negative")
    cache = _forward(params, batch, dropout_mask)
    q = targets_matrix(targets, n, params.W2.shape[1])
    scale = w / max(n, 1)
    loss = float(scale @ _xent(cache.logp, q))
    dz = (np.exp(cache.logp) - q) * scale[:, None]
    dW2 = cache.hd.T @ dz
    db2 = dz.sum(axis=0)
    dh = dz @ params.W2.T
    if dropout_mask is not None:
        dh *= dropout_mask
    da = dh * (1.0 - cache.h ** 2)
    dW1 = cache.X.T @ da
    db1 = da.sum(axis=0)
    dE = K.scatter_windows(da @ params.W1.T, batch.ctx, params.E.shape[0])
    return loss, _check(TaggerParams(dE, dW1, db1, dW2, db2))


def backward(params: TaggerParams, tokens, targets, weights=None, dropout_mask=None) -> GradBuffer:
    """Gradient of (1/N) * sum_n weights[n] * loss_n over all N tokens."""
    return value_and_grad(params, tokens, targets, weights, dropout_mask)[1]


def token_signals(params: TaggerParams, batch: Batch, q: np.ndarray):
    """Per-token backprop signals at unit weight and no dropout.

    Returns (X, h, d2, da): window inputs, hidden activations, softmax minus
    target, and hidden pre-activation gradient for each token's own loss.
    """
    cache = _forward(params, batch, None)
    d2 = np.exp(cache.logp) - q
    da = (d2 @ params.W2.T) * (1.0 - cache.h ** 2)
    return cache.X, cache.h, d2, da


def per_token_grads(params: TaggerParams, tokens, targets) -> list[np.ndarray]:
    """Flat gradient of each token's own (unscaled) loss, built from outer products."""
    batch = _as_batch(tokens, params)
    shape = params.shape
    q = targets_matrix(targets, batch.n_tokens, shape.n_tags)
    X, h, d2, da = token_signals(params, batch, q)
    dX = da @ params.W1.T
    d = shape.d_emb
    out = []
    for i in range(batch.n_tokens):
        dE = np.zeros_like(params.E)
        for j, tok in enumerate(batch.ctx[i]):
            if tok >= 0:
                dE[tok] += dX[i, j * d:(j + 1) * d]
        g = TaggerParams(dE, np.outer(X[i], da[i]), da[i].copy(), np.outer(h[i], d2[i]), d2[i].copy())
        out.append(_check(g).flat())
    return out


def sgd_step(params: TaggerParams, grads: GradBuffer, lr: float, weight_decay: float = 0.0) -> TaggerParams:
    """theta <- theta - lr * (g + weight_decay * theta), returned as new params."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    new = TaggerParams(*(p - lr * (g + weight_decay * p) for p, g in zip(params.arrays, grads.arrays)))
    if not new.is_finite():
        raise NumericalError("non-finite parameters after SGD step")
    return new


def predict(params: TaggerParams, batch: Batch) -> np.ndarray:
    """Argmax tag per token; ties go to the lowest tag id."""
    return forward(params, batch).argmax(axis=1)


# ------------------------------------------------------------- serialization

_MAGIC = "metast-params"


def dumps_params(params: TaggerParams) -> bytes:
    s = params.shape
    header = (f"{_MAGIC} vocab_size={s.vocab_size} n_tags={s.n_tags} d_emb={s.d_emb} "
              f"window={s.window} hidden={s.hidden}\n")
    return header.encode("ascii") + params.flat().astype("<f8").tobytes()


def loads_params(blob: bytes) -> TaggerParams:
    head, sep, body = blob.partition(b"\n")
    parts = head.decode("ascii").split()
    if not sep or not parts or parts[0] != _MAGIC:
        raise ValueError("not a parameter snapshot")
    kv = dict(p.split("=") for p in parts[1:])
    shape = TaggerShape(**{k: int(v) for k, v in kv.items()})
    return TaggerParams.from_flat(np.frombuffer(body, dtype="<f8"), shape)


def save_params(params: TaggerParams, path) -> None:
    with open(path, "wb") as f:
        f.write(dumps_params(params))


def load_params(path) -> TaggerParams:
    with open(path, "rb") as f:
        return loads_params(f.read())
