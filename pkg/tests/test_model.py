import numpy as np
import pytest
from hypothesis import given, strategies as st

from metast.checks import central_diff, check_backward, check_per_token, random_params, rel_error
from metast.model import (NumericalError, TaggerParams, TaggerShape, Vocab, backward, dropout_mask,
                          dumps_params, forward, init_params, load_params, loads_params, pack,
                          per_token_grads, save_params, sgd_step, token_losses, value_and_grad)

SMALL = TaggerShape(vocab_size=6, n_tags=5, d_emb=3, window=1, hidden=4)


def params(seed=0, shape=SMALL, scale=0.7):
    return random_params(shape, np.random.default_rng(seed), scale)


def test_vocab_unknown_maps_to_zero():
    v = Vocab.build([["a", "b"], ["b", "c"]])
    assert v.size == 4
    assert v.encode(["c", "zzz", "a"]).tolist() == [3, 0, 1]


def test_pack_windows():
    b = pack([np.array([1, 2, 3]), np.array([4])], window=1)
    assert b.offsets.tolist() == [0, 3, 4]
    assert b.ctx.tolist() == [[-1, 1, 2], [1, 2, 3], [2, 3, -1], [-1, 4, -1]]


def test_zero_params_give_uniform():
    p = TaggerParams.zeros(SMALL)
    probs = forward(p, [1, 2, 3])
    assert np.allclose(probs, 0.2)
    assert np.allclose(token_losses(p, [1, 2, 3], [0, 4, 2]), np.log(5))


def test_soft_target_loss_is_cross_entropy():
    p = TaggerParams.zeros(SMALL)
    q = np.array([[0.5, 0.5, 0, 0, 0]])
    assert token_losses(p, [1], q)[0] == pytest.approx(np.log(5))
    p2 = params(3)
    probs = forward(p2, [2])
    assert token_losses(p2, [2], q)[0] == pytest.approx(-(q[0] * np.log(probs[0])).sum())


def test_probabilities_normalized():
    probs = forward(params(1, scale=5.0), pack([np.arange(6)], 1))
    assert np.allclose(probs.sum(axis=1), 1.0)
    assert np.isfinite(probs).all()


def test_backward_matches_finite_differences():
    res = check_backward(instances=25, seed=7)
    assert res.passed, res.line()


def test_per_token_grads_match_finite_differences():
    res = check_per_token(instances=15, seed=8)
    assert res.passed, res.line()


def test_dropout_gradient_matches_finite_differences(rng):
    p = params(2)
    toks = np.array([1, 5, 0, 2])
    tgt = np.array([0, 1, 2, 3])
    mask = dropout_mask(rng, 4, SMALL.hidden, 0.4)
    f = lambda v: value_and_grad(TaggerParams.from_flat(v, SMALL), toks, tgt, None, mask)[0]
    fd = central_diff(f, p.flat(), 1e-5)
    assert rel_error(backward(p, toks, tgt, None, mask).flat(), fd) < 1e-4


def test_per_token_sum_equals_batch_gradient():
    p = params(4)
    toks = np.array([0, 3, 3, 5, 1])
    tgt = np.array([4, 0, 1, 2, 2])
    w = np.array([0.5, 2.0, 0.0, 1.0, 1.5])
    summed = sum(wk * g for wk, g in zip(w, per_token_grads(p, toks, tgt))) / len(toks)
    assert np.allclose(summed, backward(p, toks, tgt, w).flat(), rtol=1e-12, atol=1e-14)


@given(st.floats(0.1, 10), st.integers(0, 50))
def test_gradient_linear_in_weights(c, seed):
    p = params(seed % 5)
    rng = np.random.default_rng(seed)
    toks = rng.integers(0, 6, size=4)
    tgt = rng.integers(0, 5, size=4)
    w = rng.random(4)
    assert np.allclose(backward(p, toks, tgt, c * w).flat(), c * backward(p, toks, tgt, w).flat())


def test_zero_weights_zero_gradient():
    g = backward(params(0), [1, 2], [0, 1], np.zeros(2))
    assert not g.flat().any()


def test_weight_validation():
    p = params(0)
    with pytest.raises(ValueError):
        backward(p, [1, 2], [0, 1], [1.0, -0.1])
    with pytest.raises(ValueError):
        backward(p, [1, 2], [0, 1], [1.0])
    with pytest.raises(ValueError):
        forward(p, [1, 9])


def test_sgd_step():
    p = params(0)
    g = backward(p, [1, 2], [0, 1])
    new = sgd_step(p, g, 0.5)
    assert np.allclose(new.flat(), p.flat() - 0.5 * g.flat())
    decayed = sgd_step(p, TaggerParams.zeros(SMALL), 0.1, weight_decay=0.5)
    assert np.allclose(decayed.flat(), 0.95 * p.flat())
    with pytest.raises(ValueError):
        sgd_step(p, g, 0.0)
    bad = TaggerParams.from_flat(np.full(SMALL.n_params, np.inf), SMALL)
    with pytest.raises(NumericalError):
        sgd_step(p, bad, 0.1)


def test_sgd_reduces_loss():
    p = params(1)
    toks, tgt = np.array([1, 2, 3]), np.array([1, 2, 0])
    before = value_and_grad(p, toks, tgt)[0]
    p2 = sgd_step(p, backward(p, toks, tgt), 0.05)
    assert value_and_grad(p2, toks, tgt)[0] < before


def test_serialization_roundtrip(tmp_path):
    p = params(5)
    assert loads_params(dumps_params(p)).identical(p)
    save_params(p, tmp_path / "p.bin")
    q = load_params(tmp_path / "p.bin")
    assert q.identical(p) and q.shape == SMALL
    with pytest.raises(ValueError):
        loads_params(b"garbage\n1234")


def test_init_deterministic():
    a = init_params(SMALL, np.random.default_rng(3))
    b = init_params(SMALL, np.random.default_rng(3))
    assert a.identical(b)
    assert not a.b1.any() and not a.b2.any()
    assert np.abs(a.W1).max() <= 0.1


def test_flat_roundtrip():
    p = params(6)
    assert TaggerParams.from_flat(p.flat(), SMALL).identical(p)
    assert p.flat().size == SMALL.n_params
    with pytest.raises(ValueError):
        TaggerParams.from_flat(np.zeros(3), SMALL)
