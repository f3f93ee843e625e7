from dataclasses import replace

import numpy as np
import pytest

from metast.data import SynthSpec, generate_synthetic, kshot_sample
from metast.model import (TaggerParams, TaggerShape, dropout_mask, forward, init_params, pack, sgd_step,
                          value_and_grad)
from metast.reweight import ConfigError
from metast.selftrain import (FINETUNE, INIT, STUDENT, TrainConfig, digest, encode, fine_tune_teacher,
                              pseudo_label, run_metast, stream)

FAST = dict(T=12, teacher_finetune_steps=15, d_emb=8, hidden=12, unlabeled_batch=16, outer_rounds=2)


@pytest.fixture(scope="module")
def split():
    ds = generate_synthetic(SynthSpec(n_sentences=200, vocab_size=80, slot_lexicon_size=10, seed=0))
    return kshot_sample(ds.subset(range(160)), 5, 0, ds.subset(range(160, 200)))


def classic_self_training(cfg, split):
    """Plain teacher/student self-training written straight from the model primitives."""
    vocab, scheme = split.labeled.vocab, split.labeled.scheme
    lab_seqs = [vocab.encode(s.tokens) for s in split.labeled]
    lab_tags = [s.tags for s in split.labeled]
    pool_seqs = [vocab.encode(s.tokens) for s in split.unlabeled]
    shape = TaggerShape(vocab.size, scheme.n_tags, cfg.d_emb, cfg.window, cfg.hidden)
    theta0 = init_params(shape, np.random.default_rng([cfg.seed, INIT, 0]), cfg.init_scale)
    teacher, trajectory = theta0, []
    for r in range(cfg.outer_rounds):
        rng = np.random.default_rng([cfg.seed, FINETUNE, r])
        n = len(lab_seqs)
        order, pos = rng.permutation(n), 0
        for _ in range(cfg.teacher_finetune_steps):
            if pos >= n:
                order, pos = rng.permutation(n), 0
            idx = order[pos:pos + cfg.labeled_batch]
            pos += cfg.labeled_batch
            b = pack([lab_seqs[i] for i in idx], cfg.window)
            mask = dropout_mask(rng, b.n_tokens, cfg.hidden, cfg.dropout)
            _, g = value_and_grad(teacher, b, np.concatenate([lab_tags[i] for i in idx]), None, mask)
            teacher = sgd_step(teacher, g, cfg.lr, cfg.weight_decay)
        labels = [forward(teacher, pack([s], cfg.window)).argmax(axis=1) for s in pool_seqs]
        student = theta0 if cfg.reinit_student else teacher
        rng = np.random.default_rng([cfg.seed, STUDENT, r])
        m = min(cfg.unlabeled_batch, len(pool_seqs))
        for _ in range(cfg.T):
            idx = np.sort(rng.choice(len(pool_seqs), size=m, replace=False))
            b = pack([pool_seqs[i] for i in idx], cfg.window)
            mask = dropout_mask(rng, b.n_tokens, cfg.hidden, cfg.dropout)
            _, g = value_and_grad(student, b, np.concatenate([labels[i] for i in idx]), None, mask)
            student = sgd_step(student, g, cfg.lr, cfg.weight_decay)
            trajectory.append(student)
        teacher = student
    return teacher, trajectory


@pytest.mark.parametrize("reinit", [True, False])
def test_reduces_to_classic_self_training(split, reinit):
    cfg = TrainConfig(reweight_mode="none", acquisition_mode="random", pseudo_label_type="hard",
                      reinit_student=reinit, seed=3, **FAST)
    seen = []
    rec = run_metast(cfg, split, on_step=lambda r, t, p: seen.append(p))
    final, trajectory = classic_self_training(cfg, split)
    assert len(seen) == len(trajectory) == cfg.T * cfg.outer_rounds
    for a, b in zip(seen, trajectory):
        assert a.identical(b)
    assert rec.final_params.identical(final)
    assert rec.rounds[-1]["params_sha256"] == digest(final)


def test_zero_steps_student_is_theta0_and_hands_off(split):
    cfg = TrainConfig(T=0, outer_rounds=1, reweight_mode="none", **{k: v for k, v in FAST.items()
                                                                    if k not in ("T", "outer_rounds")})
    rec = run_metast(cfg, split)
    shape = TaggerShape(split.labeled.vocab.size, split.labeled.scheme.n_tags, cfg.d_emb, cfg.window, cfg.hidden)
    theta0 = init_params(shape, stream(cfg.seed, INIT), cfg.init_scale)
    assert rec.final_params.identical(theta0)
    assert rec.rounds[0]["student"]["f1"] == rec.initial_f1


def test_labeled_data_never_updates_student(split):
    rec = run_metast(TrainConfig(**FAST), split)
    for info in rec.rounds:
        assert info["updates"]["labeled"] == 0
        assert info["updates"]["pseudo"] + info["skipped_steps"] == FAST["T"]


def test_pseudo_label_ties_go_to_lowest_id(split):
    shape = TaggerShape(split.labeled.vocab.size, split.labeled.scheme.n_tags, 4, 1, 3)
    ds, conf = pseudo_label(TaggerParams.zeros(shape), split.unlabeled)
    assert all(not s.tags.any() for s in ds)
    assert np.allclose(np.concatenate(conf), 1 / shape.n_tags)
    soft, _ = pseudo_label(TaggerParams.zeros(shape), split.unlabeled, "soft")
    assert np.allclose(soft.sentences[0].soft_tags, 1 / shape.n_tags)
    with pytest.raises(ConfigError):
        pseudo_label(TaggerParams.zeros(shape), split.unlabeled, "fuzzy")


def test_fine_tune(split):
    cfg = TrainConfig(d_emb=8, hidden=12, teacher_finetune_steps=0)
    shape = TaggerShape(split.labeled.vocab.size, split.labeled.scheme.n_tags, 8, 1, 12)
    p = init_params(shape, np.random.default_rng(0))
    lab = encode(split.labeled, 1)
    assert fine_tune_teacher(p, lab, cfg, np.random.default_rng(0)).identical(p)
    tuned = fine_tune_teacher(p, lab, replace(cfg, teacher_finetune_steps=60, dropout=0.0),
                              np.random.default_rng(0))
    assert value_and_grad(tuned, lab.batch, lab.tags)[0] < value_and_grad(p, lab.batch, lab.tags)[0]
    empty = encode(split.labeled.subset([]), 1)
    with pytest.raises(ValueError):
        fine_tune_teacher(p, empty, replace(cfg, teacher_finetune_steps=1), np.random.default_rng(0))


@pytest.mark.parametrize("mode", ["meta", "easy", "difficult"])
def test_runs_deterministic(split, mode):
    cfg = TrainConfig(reweight_mode=mode, pseudo_noise=0.2, pseudo_label_type="soft",
                      dump_weights_step=3, dump_acquisition=True, **FAST)
    a, b = run_metast(cfg, split), run_metast(cfg, split)
    assert a.to_json() == b.to_json()
    assert a.tables == b.tables
    assert a.final_params.identical(b.final_params)
    assert a.rounds[0]["mean_weight_corrupt"] is not None
    assert len(a.tables["weights"]) > 0
    if mode == "meta":
        assert len(a.tables["acquisition"]) == len(split.labeled) * FAST["outer_rounds"]


def test_seed_changes_run(split):
    a = run_metast(TrainConfig(seed=0, **FAST), split)
    b = run_metast(TrainConfig(seed=1, **FAST), split)
    assert a.rounds[-1]["params_sha256"] != b.rounds[-1]["params_sha256"]


def test_early_stopping(split):
    cfg = TrainConfig(dev_fraction=0.3, early_stop_patience=1, **{**FAST, "outer_rounds": 6, "T": 3})
    rec = run_metast(cfg, split)
    assert all("dev_f1" in r for r in rec.rounds)
    assert rec.stopped_early == (len(rec.rounds) < 6)


def test_config_validation(split):
    for bad in (dict(lr=0), dict(K=0), dict(reweight_mode="x"), dict(dropout=1.0), dict(meta_scope="x")):
        with pytest.raises(ConfigError):
            TrainConfig(**bad).validate()
    types = TrainConfig.field_types()
    assert types["lr"] is float and types["reinit_student"] is bool and types["T"] is int


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_abort_attaches_partial_record(split):
    cfg = TrainConfig(lr=1e200, **{k: v for k, v in FAST.items()})
    with pytest.raises(FloatingPointError) as e:
        run_metast(cfg, split)
    assert e.value.record.aborted
