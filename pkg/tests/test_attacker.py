import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import central_diff, rel_error
from fedldi.attacker import (AttackTrainConfig, AttackerModel, attacker_forward, attend,
                             evaluate_loss, infer_distribution, init_attacker, load_checkpoint,
                             loss_and_grad, predict_batch, save_checkpoint, train_attacker)
from fedldi.datasets import LabelDistribution
from fedldi.errors import FormatError, ShapeError, ValidationError
from fedldi.metrics import l1
from fedldi.numerics import backend


# -- attention ----------------------------------------------------------------------------

def _att_params(H, seed):
    gen = np.random.default_rng(seed)
    return gen.normal(size=(H, H)), gen.normal(size=H), gen.normal(size=H)


def test_attend_identical_states_uniform():
    h = np.array([0.3, -0.2, 0.9])
    ctx, w = attend(np.tile(h, (4, 1)), *_att_params(3, 0))
    np.testing.assert_allclose(w, 0.25, rtol=0, atol=1e-15)
    np.testing.assert_allclose(ctx, h, rtol=0, atol=1e-15)


def test_attend_hand_softmax():
    # one hidden unit, W = 1, b = 0, v = 1: the scores are tanh(h) = [0, ln 2, 0]
    h = np.array([[0.0], [math.atanh(math.log(2))], [0.0]])
    _, w = attend(h, np.eye(1), np.zeros(1), np.ones(1))
    np.testing.assert_allclose(w, [0.25, 0.5, 0.25], atol=1e-15)


def test_attend_single_step():
    h = np.array([[0.4, -0.1]])
    ctx, w = attend(h, *_att_params(2, 1))
    assert w.tolist() == [1.0]
    np.testing.assert_array_equal(ctx, h[0])


@settings(max_examples=100)
@given(st.integers(1, 8), st.integers(1, 5), st.floats(-30, 30), st.integers(0, 2 ** 32 - 1))
def test_attention_weights_simplex_and_shift_invariant(E, H, shift, seed):
    gen = np.random.default_rng(seed)
    Hs = gen.normal(size=(E, H))
    W, b, v = _att_params(H, seed)
    _, w = attend(Hs, W, b, v)
    assert np.all(w >= 0) and abs(w.sum() - 1) < 1e-12
    # adding a constant to every score: v . tanh(.) + shift is the same as appending
    # a constant hidden unit; compare against softmax of shifted raw scores directly
    from fedldi.numerics.mlp import softmax
    scores = np.tanh(Hs @ W.T + b) @ v
    np.testing.assert_allclose(softmax(scores + shift), w, rtol=1e-12, atol=1e-15)


# -- forward ----------------------------------------------------------------------------

def test_zero_model_uniform():
    out = attacker_forward(AttackerModel(5, 4), np.random.default_rng(0).uniform(size=(6, 5)))
    np.testing.assert_allclose(out.p, 0.2, atol=1e-15)


def test_outputs_are_distributions():
    gen = np.random.default_rng(1)
    model = init_attacker(4, 8, 0)
    X = gen.uniform(size=(1000, 5, 4))
    P = predict_batch(model, X)
    assert np.all(P >= 0)
    np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-12)


def test_row_order_matters():
    gen = np.random.default_rng(2)
    model = init_attacker(4, 8, 3)
    found = False
    for _ in range(20):
        R = gen.uniform(size=(6, 4))
        perm = gen.permutation(6)
        if np.max(np.abs(attacker_forward(model, R).p - attacker_forward(model, R[perm]).p)) > 1e-6:
            found = True
            break
    assert found


def test_width_mismatch():
    with pytest.raises(ShapeError):
        attacker_forward(init_attacker(4, 8, 0), np.zeros((3, 5)))


@pytest.mark.parametrize("loss", ["kl", "mse"])
@pytest.mark.parametrize("seed", range(4))
def test_full_attacker_gradient(loss, seed):
    gen = np.random.default_rng(seed)
    model = init_attacker(3, 4, seed)
    model.params.values[:] += 0.2 * gen.normal(size=len(model.params))
    X = gen.uniform(size=(2, 3, 3))
    T = gen.dirichlet(np.ones(3), size=2)
    T[0] = [0.0, 0.3, 0.7]  # zero target entries are allowed
    _, g = loss_and_grad(model, X, T, loss)

    def f(v):
        return loss_and_grad(AttackerModel(3, 4, model.params.with_values(v)), X, T, loss)[0]

    assert rel_error(g.values, central_diff(f, model.params.values)) < 1e-4


def test_kl_loss_zero_at_target():
    model = AttackerModel(3, 2)
    T = np.full((1, 3), 1 / 3)
    assert abs(evaluate_loss(model, np.zeros((1, 2, 3)), T)) < 1e-15


@pytest.mark.skipif("cython" not in backend.available(), reason="compiled kernels not built")
def test_backends_agree_on_attacker():
    gen = np.random.default_rng(5)
    model = init_attacker(10, 16, 1)
    X, T = gen.uniform(size=(4, 30, 10)), gen.dirichlet(np.ones(10), size=4)
    lc, gc = loss_and_grad(model, X, T, kernels=backend.get("cython"))
    lp, gp = loss_and_grad(model, X, T, kernels=backend.get("python"))
    assert lc == pytest.approx(lp, rel=1e-12)
    np.testing.assert_allclose(gc.values, gp.values, rtol=1e-9, atol=1e-13)


# -- training ------------------------------------------------------------------------------

def _pairs(n, C=3, E=4, seed=0):
    """Records whose rows are noisy copies of the target distribution."""
    gen = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        p = gen.dirichlet(np.ones(C))
        R = np.clip(p + 0.05 * gen.normal(size=(E, C)), 0, 1)
        out.append((R, LabelDistribution(p)))
    return out


def test_training_curve_best_so_far_monotone():
    res = train_attacker(_pairs(30), AttackTrainConfig(epochs=40, hidden=8, lr=3e-3))
    best = [c["best_val_loss"] for c in res.curve]
    assert all(b2 <= b1 for b1, b2 in zip(best, best[1:]))
    assert len(res.curve) == 40
    assert 1 <= res.best_epoch <= 40
    assert not set(res.train_ids) & set(res.val_ids)


def test_memorizes_small_set():
    pairs = _pairs(10, seed=1)
    cfg = AttackTrainConfig(epochs=500, hidden=16, lr=1e-2, batch_size=4, select="last",
                            val_fraction=0.1)
    res = train_attacker(pairs, cfg)
    for i in res.train_ids:
        R, p = pairs[i]
        assert l1(infer_distribution(res.model, R), p) < 0.05


def test_training_deterministic():
    cfg = AttackTrainConfig(epochs=5, hidden=8, input_noise=0.01, weight_decay=0.5)
    a = train_attacker(_pairs(12), cfg)
    b = train_attacker(_pairs(12), cfg)
    assert a.model.params == b.model.params and a.curve == b.curve


def test_training_input_errors():
    with pytest.raises(ValidationError):
        train_attacker([], AttackTrainConfig())
    with pytest.raises(ValidationError):
        train_attacker(_pairs(4), AttackTrainConfig(epochs=1))  # fewer than 2C pairs
    bad = _pairs(8) + [(np.zeros((5, 3)), LabelDistribution([1, 0, 0]))]
    with pytest.raises(ShapeError):
        train_attacker(bad, AttackTrainConfig(epochs=1))
    with pytest.raises(ValidationError):
        AttackTrainConfig(loss="hinge")


def test_train_member_beats_held_out():
    pairs = _pairs(60, seed=3)
    held = _pairs(20, seed=4)
    res = train_attacker(pairs, AttackTrainConfig(epochs=150, hidden=16, lr=3e-3, batch_size=8))
    train_l1 = np.mean([l1(infer_distribution(res.model, pairs[i][0]), pairs[i][1])
                        for i in res.train_ids])
    held_l1 = np.mean([l1(infer_distribution(res.model, R), p) for R, p in held])
    assert train_l1 < held_l1


# -- checkpoints ----------------------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path):
    model = init_attacker(5, 6, 2)
    save_checkpoint(model, tmp_path / "a.ckpt", extra={"note": "x"})
    back = load_checkpoint(tmp_path / "a.ckpt")
    assert back.params == model.params and back.n_classes == 5 and back.hidden == 6


def test_checkpoint_corruption(tmp_path):
    model = init_attacker(5, 6, 2)
    path = tmp_path / "a.ckpt"
    save_checkpoint(model, path)
    raw = path.read_bytes()
    for broken in (b"NOTACKPT" + raw[8:], raw[:-8], raw[:10]):
        path.write_bytes(broken)
        with pytest.raises(FormatError):
            load_checkpoint(path)
