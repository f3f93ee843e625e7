"""Teacher/student self-training with acquisition and token re-weighting."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import acquisition as acq
from .data import Dataset, FewShotSplit, corrupt_labels
from .labels import TaggedSentence, phrase_f1
from .model import (Batch, TaggerParams, TaggerShape, dropout_mask, dumps_params, forward,
                    init_params, pack, sgd_step, value_and_grad)
from .reweight import (MODES, SCOPES, ConfigError, WeightedBatch, diagnostic_rows, finalize_weights,
                       meta_token_scores)

log = logging.getLogger(__name__)

# RNG stream ids; each (seed, stream, round) triple seeds its own generator
INIT, FINETUNE, NOISE, STUDENT, ACQUIRE, DEV = range(6)


def stream(seed: int, name: int, round_: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, name, round_])


@dataclass
class TrainConfig:
    K: int = 10
    R: int = 5
    S: int = 5
    T: int = 300
    outer_rounds: int = 3
    lr: float = 0.3
    weight_decay: float = 5e-6
    dropout: float = 0.3
    labeled_batch: int = 8
    unlabeled_batch: int = 32
    refresh_period: int = 50
    pseudo_label_type: str = "hard"
    reweight_mode: str = "meta"
    acquisition_mode: str = "adaptive"
    meta_scope: str = "all"
    teacher_finetune: bool = True
    teacher_finetune_steps: int = 200
    reinit_student: bool = True
    # fraction of pseudo-labels replaced by random wrong tags (simulated noisy teacher)
    pseudo_noise: float = 0.0
    early_stop_patience: int = 0
    dev_fraction: float = 0.0
    d_emb: int = 32
    window: int = 1
    hidden: int = 64
    init_scale: float = 0.1
    # 0 disables; otherwise the inner step whose batch weights are dumped each round
    dump_weights_step: int = 0
    dump_acquisition: bool = False
    seed: int = 0

    def validate(self) -> "TrainConfig":
        for name in ("K", "R", "S", "outer_rounds", "labeled_batch", "unlabeled_batch",
                     "refresh_period", "d_emb", "hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("T", "teacher_finetune_steps", "early_stop_patience", "window", "dump_weights_step"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.weight_decay < 0 or not 0 <= self.dropout < 1:
            raise ConfigError("weight_decay must be >= 0 and dropout in [0, 1)")
        if not 0 <= self.pseudo_noise <= 1 or not 0 <= self.dev_fraction < 1:
            raise ConfigError("pseudo_noise must be in [0, 1] and dev_fraction in [0, 1)")
        if self.pseudo_label_type not in ("hard", "soft"):
            raise ConfigError(f"pseudo_label_type must be hard or soft, not {self.pseudo_label_type!r}")
        if self.reweight_mode not in MODES:
            raise ConfigError(f"reweight_mode must be one of {MODES}")
        if self.acquisition_mode not in ("adaptive", "random"):
            raise ConfigError("acquisition_mode must be adaptive or random")
        if self.meta_scope not in SCOPES:
            raise ConfigError(f"meta_scope must be one of {SCOPES}")
        return self

    @classmethod
    def field_types(cls) -> dict[str, type]:
        return {f.name: type(getattr(cls(), f.name)) for f in fields(cls)}


@dataclass
class RunRecord:
    config: dict
    rounds: list[dict] = field(default_factory=list)
    initial_f1: float = 0.0
    final_f1: float = 0.0
    stopped_early: bool = False
    aborted: str = ""
    # data source and split sizes, filled in by the CLI
    experiment: dict = field(default_factory=dict)
    dumps: dict[str, str] = field(default_factory=dict)
    # CSV rows kept in memory; the CLI writes them and records paths in ``dumps``
    tables: dict[str, list] = field(default_factory=dict, repr=False)
    final_params: TaggerParams | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name not in ("tables", "final_params")}
        return json.loads(json.dumps(d))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"


def digest(params: TaggerParams) -> str:
    return hashlib.sha256(dumps_params(params)).hexdigest()


# ------------------------------------------------------------------ encoding

@dataclass
class Pool:
    """A dataset packed once into a single token stream, plus per-token targets."""

    batch: Batch
    tags: np.ndarray            # (N,) flat tag ids
    targets: np.ndarray | None = None    # (N, n_tags) distribution, when differing from one-hot tags
    confidence: np.ndarray | None = None

    @property
    def n_sentences(self) -> int:
        return len(self.batch.offsets) - 1

    def rows(self, idx) -> np.ndarray:
        off = self.batch.offsets
        return np.concatenate([np.arange(off[i], off[i + 1]) for i in idx]) if len(idx) else np.zeros(0, int)

    def take(self, idx) -> tuple[Batch, np.ndarray]:
        rows = self.rows(idx)
        lengths = self.batch.lengths[idx]
        offsets = np.zeros(len(idx) + 1, dtype=np.int64)
        np.cumsum(lengths, out=offsets[1:])
        return Batch(self.batch.ctx[rows], offsets), rows


def encode(data: Dataset, window: int) -> Pool:
    vocab = data.vocab
    seqs = [vocab.encode(s.tokens) for s in data.sentences]
    tags = np.concatenate([s.tags for s in data.sentences]) if len(data) else np.zeros(0, np.int64)
    return Pool(pack(seqs, window), tags.astype(np.int64))


def evaluate(params: TaggerParams, pool: Pool, data: Dataset) -> dict[str, float]:
    if not len(data):
        return {"precision": 0.0, "recall": 0.0, "f1": 0.0}
    pred = forward(params, pool.batch).argmax(axis=1)
    return phrase_f1(pool.batch.split(pred), data.tag_lists(), data.scheme)


# ------------------------------------------------------------------ stages

def fine_tune_teacher(teacher: TaggerParams, labeled: Pool, cfg: TrainConfig,
                      rng: np.random.Generator) -> TaggerParams:
    """Supervised SGD on shuffled labeled mini-batches, reshuffling each epoch."""
    if labeled.n_sentences < 1:
        raise ValueError("fine-tuning needs labeled data")
    n = labeled.n_sentences
    order, pos = rng.permutation(n), 0
    for _ in range(cfg.teacher_finetune_steps):
        if pos >= n:
            order, pos = rng.permutation(n), 0
        idx = order[pos:pos + cfg.labeled_batch]
        pos += cfg.labeled_batch
        batch, rows = labeled.take(idx)
        mask = dropout_mask(rng, batch.n_tokens, teacher.shape.hidden, cfg.dropout)
        _, g = value_and_grad(teacher, batch, labeled.tags[rows], None, mask)
        teacher = sgd_step(teacher, g, cfg.lr, cfg.weight_decay)
    return teacher


def pseudo_label(teacher: TaggerParams, unlabeled: Dataset, kind: str = "hard",
                 pool: Pool | None = None) -> tuple[Dataset, list[np.ndarray]]:
    """Label the pool with the teacher's argmax (ties -> lowest id) or full distribution.

    Returns the pseudo-labeled dataset and the teacher's max probability per token.
    """
    if kind not in ("hard", "soft"):
        raise ConfigError(f"pseudo-label type must be hard or soft, not {kind!r}")
    pool = pool or encode(unlabeled, teacher.shape.window)
    probs = forward(teacher, pool.batch)
    hard = probs.argmax(axis=1)
    conf = probs.max(axis=1)
    out = []
    for s, h, p in zip(unlabeled.sentences, pool.batch.split(hard), pool.batch.split(probs)):
        out.append(TaggedSentence(s.tokens, h, soft_tags=p if kind == "soft" else None))
    return Dataset(out, unlabeled.scheme, unlabeled.vocab), pool.batch.split(conf)


@dataclass
class InnerStats:
    losses: list = field(default_factory=list)
    skipped: int = 0
    updates: dict = field(default_factory=lambda: {"pseudo": 0, "labeled": 0})
    weight_sums: np.ndarray = field(default_factory=lambda: np.zeros(4))  # corrupt, clean, wrong, right
    weight_counts: np.ndarray = field(default_factory=lambda: np.zeros(4))


def _apply_update(params, grads, cfg, stats: InnerStats, source: str) -> TaggerParams:
    stats.updates[source] += 1
    return sgd_step(params, grads, cfg.lr, cfg.weight_decay)


def student_inner_loop(student: TaggerParams, pseudo: Pool, labeled: Pool, cfg: TrainConfig,
                       round_: int = 0, corrupt: np.ndarray | None = None, wrong: np.ndarray | None = None,
                       record: RunRecord | None = None, diag_context=None, on_step=None):
    """T weighted SGD steps of the student on pseudo-labeled batches.

    ``labeled`` is only used as a validation signal for meta re-weighting.
    ``corrupt``/``wrong`` are optional flat per-token flags used for weight
    statistics. ``on_step(t, params)`` is called after every step.
    """
    rng = stream(cfg.seed, STUDENT, round_)
    acq_rng = stream(cfg.seed, ACQUIRE, round_)
    stats = InnerStats()
    n_pool = pseudo.n_sentences
    if n_pool < 1:
        raise ValueError("empty pseudo-labeled pool")
    needs_val = cfg.reweight_mode == "meta"
    state = None
    if needs_val:
        state = acq.AcquisitionState(labeled.n_sentences, cfg.R, cfg.refresh_period)
    targets_all = pseudo.targets
    ub = min(cfg.unlabeled_batch, n_pool)

    for t in range(1, cfg.T + 1):
        val_batches = []
        if needs_val:
            if cfg.acquisition_mode == "adaptive":
                acq.record_losses(state, student, labeled.batch, labeled.tags)
                if (t - 1) % cfg.refresh_period == 0:
                    acq.refresh_weights(state)
                    if cfg.dump_acquisition and record is not None:
                        record.tables.setdefault("acquisition", []).extend(
                            [round_, *row] for row in acq.acquisition_rows(state, t))
            for idx in acq.sample_validation_batches(state, cfg.S, cfg.labeled_batch, acq_rng):
                vb, vrows = labeled.take(idx)
                val_batches.append((vb, labeled.tags[vrows]))

        idx = np.sort(rng.choice(n_pool, size=ub, replace=False))
        batch, rows = pseudo.take(idx)
        q = targets_all[rows]
        mask = dropout_mask(rng, batch.n_tokens, student.shape.hidden, cfg.dropout)
        conf = pseudo.confidence[rows]
        raw = meta_token_scores(student, batch, q, val_batches, cfg.lr, cfg.meta_scope) if needs_val else None
        weights = finalize_weights(raw, cfg.reweight_mode, conf)
        wb = WeightedBatch(idx, batch, q, weights, conf, raw)

        for k, flags in enumerate((corrupt, wrong)):
            if flags is not None:
                f = flags[rows]
                stats.weight_sums[2 * k:2 * k + 2] += [weights[f].sum(), weights[~f].sum()]
                stats.weight_counts[2 * k:2 * k + 2] += [f.sum(), (~f).sum()]
        if diag_context is not None and t == cfg.dump_weights_step and record is not None:
            record.tables.setdefault("weights", []).extend(
                [round_, *row] for row in diagnostic_rows(wb, t, *diag_context))

        if wb.skipped:
            stats.skipped += 1
            stats.losses.append(None)
        else:
            loss, g = value_and_grad(student, batch, q, weights, mask)
            student = _apply_update(student, g, cfg, stats, "pseudo")
            stats.losses.append(loss)
        if on_step is not None:
            on_step(t, student)
    return student, stats


def _flag_means(stats: InnerStats) -> dict:
    names = ("corrupt", "clean", "wrong", "right")
    return {f"mean_weight_{n}": (float(s / c) if c else None)
            for n, s, c in zip(names, stats.weight_sums, stats.weight_counts)}


def run_metast(cfg: TrainConfig, split: FewShotSplit, on_step=None) -> RunRecord:
    """Full procedure: per round fine-tune teacher, pseudo-label, train student, hand off."""
    cfg.validate()
    record = RunRecord(config=asdict(cfg))
    vocab = split.labeled.vocab
    scheme = split.labeled.scheme
    if vocab is None or not len(split.labeled) or not len(split.unlabeled):
        raise ValueError("split needs a vocabulary, labeled data and unlabeled data")

    labeled_data, dev_data = split.labeled, None
    if cfg.dev_fraction > 0 and len(labeled_data) > 1:
        perm = stream(cfg.seed, DEV).permutation(len(labeled_data))
        n_dev = max(1, int(round(cfg.dev_fraction * len(labeled_data))))
        dev_data = labeled_data.subset(np.sort(perm[:n_dev]))
        labeled_data = labeled_data.subset(np.sort(perm[n_dev:]))
    labeled = encode(labeled_data, cfg.window)
    test = encode(split.test, cfg.window)
    dev = encode(dev_data, cfg.window) if dev_data is not None else None
    pool = encode(split.unlabeled, cfg.window)
    gold = np.concatenate(split.unlabeled_gold) if split.unlabeled_gold else None

    shape = TaggerShape(vocab.size, scheme.n_tags, cfg.d_emb, cfg.window, cfg.hidden)
    theta0 = init_params(shape, stream(cfg.seed, INIT), cfg.init_scale)
    teacher = theta0
    record.initial_f1 = evaluate(theta0, test, split.test)["f1"]
    best_dev, stale = -1.0, 0

    try:
        for r in range(cfg.outer_rounds):
            info: dict = {"round": r}
            if cfg.teacher_finetune:
                teacher = fine_tune_teacher(teacher, labeled, cfg, stream(cfg.seed, FINETUNE, r))
            info["teacher"] = evaluate(teacher, test, split.test)

            pseudo_ds, _ = pseudo_label(teacher, split.unlabeled, cfg.pseudo_label_type, pool)
            corrupt_flags = None
            if cfg.pseudo_noise > 0:
                noisy, masks = corrupt_labels(pseudo_ds, cfg.pseudo_noise, stream(cfg.seed, NOISE, r).integers(2**32))
                corrupt_flags = np.concatenate(masks)
                pseudo_ds = noisy
            hard = np.concatenate(pseudo_ds.tag_lists())
            probs = forward(teacher, pool.batch)
            if cfg.pseudo_label_type == "soft":
                targets = probs.copy()
                if corrupt_flags is not None:
                    targets[corrupt_flags] = np.eye(scheme.n_tags)[hard[corrupt_flags]]
            else:
                targets = np.eye(scheme.n_tags)[hard]
            pseudo = Pool(pool.batch, hard, targets, probs[np.arange(len(hard)), hard])
            wrong = hard != gold if gold is not None else None
            if wrong is not None:
                info["pseudo_label_accuracy"] = float(1.0 - wrong.mean())

            student = theta0 if cfg.reinit_student else teacher
            tok_lists = [s.tokens for s in split.unlabeled.sentences]
            diag = None
            if cfg.dump_weights_step:
                diag = (tok_lists, pseudo_ds.tag_lists(), scheme.tags,
                        pool.batch.split(corrupt_flags) if corrupt_flags is not None else None)
            student, stats = student_inner_loop(
                student, pseudo, labeled, cfg, r, corrupt_flags, wrong, record, diag,
                None if on_step is None else (lambda t, p, r=r: on_step(r, t, p)))
            teacher = student
            info["student"] = evaluate(student, test, split.test)
            info["skipped_steps"] = stats.skipped
            info["updates"] = dict(stats.updates)
            info["step_losses"] = stats.losses
            info["params_sha256"] = digest(student)
            info.update(_flag_means(stats))
            if dev is not None:
                info["dev_f1"] = evaluate(student, dev, dev_data)["f1"]
            record.rounds.append(info)
            record.final_f1 = info["student"]["f1"]
            log.info("round %d teacher f1 %.4f student f1 %.4f", r, info["teacher"]["f1"], record.final_f1)

            if cfg.early_stop_patience and dev is not None:
                if info["dev_f1"] > best_dev:
                    best_dev, stale = info["dev_f1"], 0
                else:
                    stale += 1
                    if stale >= cfg.early_stop_patience:
                        record.stopped_early = True
                        break
    except (FloatingPointError, ValueError) as e:
        record.aborted = f"{type(e).__name__}: {e}"
        e.record = record
        raise
    record.final_params = teacher
    return record
