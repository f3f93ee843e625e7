import numpy as np
import pytest
from hypothesis import given, strategies as st

from metast.acquisition import (AcquisitionError, AcquisitionState, acquisition_rows, example_losses,
                                record_losses, refresh_weights, sample_validation_batches)
from metast.checks import random_params
from metast.model import TaggerShape, pack, token_losses
from metast.oracles import acquisition_worked_example


def test_worked_example_exact():
    w, uniform = acquisition_worked_example()
    assert w[0] == 2 / 3 and w[1] == 1 / 3
    assert np.all(uniform == 1 / 3)


def test_decay_and_smoothing_by_hand():
    st_ = AcquisitionState(3, R=3)
    st_.push([1.0, 2.0, 0.5]).push([0.5, 2.0, 0.5]).push([0.0, 2.5, 0.5])
    refresh_weights(st_)
    assert st_.baseline.tolist() == pytest.approx([0.5, 13 / 6, 0.5])
    assert st_.decay.tolist() == pytest.approx([0.5, 0.0, 0.0])
    assert st_.smoothing == pytest.approx(0.5)
    assert st_.weights.tolist() == pytest.approx([0.5, 0.25, 0.25])


def test_ring_buffer_keeps_last_R():
    st_ = AcquisitionState(1, R=2)
    for x in (5.0, 4.0, 3.0):
        st_.push([x])
    assert list(st_.history[0]) == [4.0, 3.0]
    assert st_.current_loss[0] == 3.0


def test_refresh_before_any_loss():
    with pytest.raises(AcquisitionError):
        refresh_weights(AcquisitionState(2))
    with pytest.raises(ValueError):
        AcquisitionState(0)
    with pytest.raises(ValueError):
        AcquisitionState(2).push([1.0])


def test_initial_weights_uniform():
    assert np.all(AcquisitionState(4).weights == 0.25)


def test_recorded_loss_is_mean_token_loss():
    shape = TaggerShape(8, 3, 3, 1, 4)
    p = random_params(shape, np.random.default_rng(0))
    seqs = [np.array([1, 2, 3]), np.array([4]), np.array([5, 6])]
    tags = [np.array([0, 1, 2]), np.array([1]), np.array([2, 2])]
    batch = pack(seqs, 1)
    oracle = [token_losses(p, pack([s], 1), t).mean() for s, t in zip(seqs, tags)]
    got = example_losses(p, batch, np.concatenate(tags))
    assert np.allclose(got, oracle, rtol=1e-13)
    st_ = record_losses(AcquisitionState(3, R=2), p, batch, np.concatenate(tags))
    assert np.allclose(st_.current_loss, oracle)


@given(st.lists(st.floats(0.0, 5.0), min_size=2, max_size=6), st.integers(0, 1000))
def test_weights_monotone_in_decay(current, seed):
    rng = np.random.default_rng(seed)
    n = len(current)
    st_ = AcquisitionState(n, R=3)
    for _ in range(2):
        st_.push(rng.uniform(0, 5, n))
    st_.push(current)
    refresh_weights(st_)
    assert st_.weights.sum() == pytest.approx(1.0)
    assert (st_.weights > 0).all()
    order = np.argsort(st_.decay, kind="stable")
    assert np.all(np.diff(st_.weights[order]) >= -1e-15)


def test_sampling_frequency_follows_weights():
    st_ = AcquisitionState(3)
    st_.weights = np.array([0.6, 0.3, 0.1])
    rng = np.random.default_rng(0)
    draws = np.concatenate(sample_validation_batches(st_, 20_000, 1, rng))
    freq = np.bincount(draws, minlength=3) / len(draws)
    assert np.allclose(freq, st_.weights, atol=0.015)


def test_batches_without_replacement_and_clamped(caplog):
    st_ = AcquisitionState(4)
    batches = sample_validation_batches(st_, 5, 3, np.random.default_rng(1))
    assert len(batches) == 5
    assert all(len(set(b.tolist())) == 3 for b in batches)
    with caplog.at_level("WARNING"):
        big = sample_validation_batches(st_, 1, 10, np.random.default_rng(1))
    assert sorted(big[0].tolist()) == [0, 1, 2, 3]
    assert "clamped" in caplog.text


def test_dump_rows():
    st_ = AcquisitionState(2, R=2)
    st_.push([0.6, 0.5]).push([0.2, 0.5])
    refresh_weights(st_)
    rows = acquisition_rows(st_, 7)
    assert rows[0][:2] == [7, 0] and rows[0][-1] == 2 / 3
