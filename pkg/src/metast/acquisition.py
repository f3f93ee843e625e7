"""Loss-decay acquisition of labeled validation mini-batches.

Each labeled example keeps a ring buffer of its latest R mean-token losses
under the student. Its sampling weight is the clipped drop of the current
loss below the buffer mean, plus a smoothing term equal to the largest drop
in the set, so examples whose loss stopped moving still get drawn.
"""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .model import Batch, TaggerParams, token_losses

log = logging.getLogger(__name__)


DECAY_EPS = 1e-12


class AcquisitionError(RuntimeError):
    pass


@dataclass
class AcquisitionState:
    n_examples: int
    R: int = 5
    refresh_period: int = 50
    history: list[deque] = field(init=False)
    current_loss: np.ndarray = field(init=False)
    weights: np.ndarray = field(init=False)
    baseline: np.ndarray = field(init=False)
    decay: np.ndarray = field(init=False)
    smoothing: float = field(init=False, default=1.0)

    def __post_init__(self):
        if self.n_examples < 1:
            raise ValueError("acquisition needs at least one labeled example")
        if self.R < 1:
            raise ValueError("R must be >= 1")
        self.history = [deque(maxlen=self.R) for _ in range(self.n_examples)]
        self.current_loss = np.full(self.n_examples, np.nan)
        self.weights = np.full(self.n_examples, 1.0 / self.n_examples)
        self.baseline = np.full(self.n_examples, np.nan)
        self.decay = np.zeros(self.n_examples)

    def push(self, losses) -> "AcquisitionState":
        losses = np.asarray(losses, dtype=np.float64)
        if losses.shape != (self.n_examples,):
            raise ValueError(f"expected {self.n_examples} losses, got shape {losses.shape}")
        for buf, x in zip(self.history, losses):
            buf.append(float(x))
        self.current_loss = losses.copy()
        return self


def example_losses(params: TaggerParams, batch: Batch, tags: np.ndarray) -> np.ndarray:
    """Mean token loss of every sentence in a packed batch (no dropout)."""
    losses = token_losses(params, batch, tags)
    sums = np.add.reduceat(losses, batch.offsets[:-1]) if len(losses) else np.zeros(0)
    return sums / np.maximum(batch.lengths, 1)


def record_losses(state: AcquisitionState, student: TaggerParams, batch: Batch,
                  tags: np.ndarray) -> AcquisitionState:
    """Evaluate the student on every labeled example and push into the buffers."""
    return state.push(example_losses(student, batch, tags))


def refresh_weights(state: AcquisitionState) -> AcquisitionState:
    if any(len(b) == 0 for b in state.history):
        raise AcquisitionError("refresh_weights called before any losses were recorded")
    state.baseline = np.array([np.mean(b) for b in state.history])
    decay = state.baseline - state.current_loss
    # a flat history can leave rounding residue in the mean; that is not a decay
    decay[decay <= DECAY_EPS * np.maximum(np.abs(state.baseline), 1.0)] = 0.0
    state.decay = decay
    delta = float(state.decay.max())
    # every decay is zero: fall back to uniform sampling
    state.smoothing = delta if delta > 0 else 1.0
    raw = state.decay + state.smoothing
    state.weights = raw / raw.sum()
    return state


def sample_validation_batches(state: AcquisitionState, S: int, batch_size: int,
                              rng: np.random.Generator) -> list[np.ndarray]:
    """S index batches, weighted draws without replacement inside each batch."""
    n = state.n_examples
    if batch_size > n:
        log.warning("validation batch size %d exceeds %d labeled examples; clamped", batch_size, n)
        batch_size = n
    return [np.sort(rng.choice(n, size=batch_size, replace=False, p=state.weights)) for _ in range(S)]


ACQUISITION_HEADER = ["step", "example_id", "baseline", "current_loss", "decay", "weight"]


def acquisition_rows(state: AcquisitionState, step: int) -> list[list]:
    """Rows for the per-refresh CSV dump, one per labeled example."""
    return [[step, i, float(state.baseline[i]), float(state.current_loss[i]),
             float(state.decay[i]), float(state.weights[i])] for i in range(state.n_examples)]
