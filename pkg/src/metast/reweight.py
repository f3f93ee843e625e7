"""Token-level meta-gradient weights for pseudo-labeled batches.

Perturbing token n's loss weight by eps in a single SGD step of size lr moves
the parameters by -lr * eps * g_n / N, where g_n is that token's loss
gradient and N the token count of the batch. At eps = 0 the step is the
identity, so the derivative of the validation loss L_val with respect to
eps_n is exactly -lr/N * <g_n, grad L_val>. The score of a token is the
negative of that derivative, summed over the S validation batches.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .model import Batch, TaggerParams, backward, token_signals

MODES = ("meta", "none", "easy", "difficult")
SCOPES = ("all", "classifier")


class ConfigError(ValueError):
    pass


def validation_gradient(params: TaggerParams, val_batches) -> TaggerParams:
    """Sum over batches of the gradient of each batch's mean token loss."""
    total = None
    for batch, tags in val_batches:
        g = backward(params, batch, tags)
        total = g if total is None else total + g
    return total


def meta_token_scores(params: TaggerParams, batch: Batch, targets: np.ndarray, val_batches,
                      lr: float, scope: str = "all") -> np.ndarray:
    """Raw meta score per token: lr/N * <g_n, sum_s grad L_val_s>.

    ``targets`` is the (N, n_tags) pseudo-label distribution of ``batch``;
    ``val_batches`` is a non-empty sequence of (Batch, hard tags) pairs.
    ``scope="classifier"`` restricts the inner product to the output layer.
    """
    if scope not in SCOPES:
        raise ConfigError(f"unknown scope {scope!r}; expected one of {SCOPES}")
    if not len(val_batches):
        raise ValueError("need at least one validation batch")
    G = validation_gradient(params, val_batches)
    X, h, d2, da = token_signals(params, batch, targets)
    if scope == "classifier":
        dots = (d2 * (h @ G.W2 + G.b2)).sum(axis=1)
    else:
        dots = K.meta_dots(h, d2, X, da, params.W1, batch.ctx, G.E, G.W1, G.b1, G.W2, G.b2)
    return lr / max(batch.n_tokens, 1) * dots


def _mean_one(x: np.ndarray) -> np.ndarray:
    total = x.sum()
    return x * (len(x) / total) if total > 0 else np.zeros_like(x)


def finalize_weights(raw: np.ndarray | None, mode: str, confidence: np.ndarray | None = None) -> np.ndarray:
    """Turn raw scores (or teacher confidences) into token weights with mean 1.

    An all-zero result means the batch carries no usable signal and the
    caller should skip its update.
    """
    if mode == "meta":
        return _mean_one(np.maximum(np.asarray(raw, dtype=np.float64), 0.0))
    if mode == "none":
        n = len(raw) if raw is not None else len(confidence)
        return np.ones(n)
    if mode in ("easy", "difficult"):
        if confidence is None:
            raise ConfigError(f"mode {mode!r} needs teacher confidences")
        c = np.asarray(confidence, dtype=np.float64)
        return _mean_one(c if mode == "easy" else 1.0 - c)
    raise ConfigError(f"unknown reweight mode {mode!r}; expected one of {MODES}")


@dataclass
class WeightedBatch:
    sentence_ids: np.ndarray      # index of each sentence in the pseudo-labeled pool
    batch: Batch
    targets: np.ndarray           # (N, n_tags)
    weights: np.ndarray           # (N,)
    confidence: np.ndarray        # teacher probability of the pseudo-label
    raw: np.ndarray | None = None

    @property
    def skipped(self) -> bool:
        return not self.weights.any()

    def token_weights(self) -> list[np.ndarray]:
        return self.batch.split(self.weights)


DIAGNOSTIC_HEADER = ["step", "sentence_id", "token_index", "token", "pseudo_tag",
                     "teacher_confidence", "raw_score", "final_weight", "is_corrupt"]


def diagnostic_rows(wb: WeightedBatch, step: int, tokens, pseudo_tags, tag_names,
                    corrupt=None) -> list[list]:
    """Rows for the weight-vs-confidence dump; ``tokens``/``pseudo_tags``/``corrupt`` are per pool sentence."""
    rows = []
    flat = 0
    for sid, n in zip(wb.sentence_ids, wb.batch.lengths):
        for k in range(n):
            raw = "" if wb.raw is None else float(wb.raw[flat])
            flag = "" if corrupt is None else int(corrupt[sid][k])
            rows.append([step, int(sid), k, tokens[sid][k], tag_names[int(pseudo_tags[sid][k])],
                         float(wb.confidence[flat]), raw, float(wb.weights[flat]), flag])
            flat += 1
    return rows
