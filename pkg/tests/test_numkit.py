import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcbm.losses import batch_loss_and_grad
from dcbm.numkit import (
    MLPSpec,
    OptimizerState,
    ParamSet,
    as_matrix,
    finite_diff_check,
    leaky_relu,
    mlp_backward,
    mlp_forward,
    mlp_init,
    optimizer_step,
)


def scalar_params(value: float) -> ParamSet:
    spec = MLPSpec((1, 1))
    return ParamSet(spec, [np.array([[value]])], [np.zeros(1)])


def test_spec_validation():
    with pytest.raises(ValueError):
        MLPSpec((3,))
    with pytest.raises(ValueError):
        MLPSpec((3, 0, 2))
    spec = MLPSpec((4, 8, 3))
    assert spec.n_layers == 2 and spec.input_width == 4 and spec.output_width == 3
    assert MLPSpec.from_dict(spec.to_dict()) == spec


def test_as_matrix_rejects_nan():
    with pytest.raises(ValueError):
        as_matrix([[1.0, np.nan]])
    assert as_matrix([1.0, 2.0]).shape == (1, 2)


def test_init_shapes_and_bound():
    spec = MLPSpec((5, 7, 2))
    p = mlp_init(spec, 0)
    assert [W.shape for W in p.weights] == [(7, 5), (2, 7)]
    assert all(np.all(b == 0) for b in p.biases)
    assert np.all(np.abs(p.weights[0]) <= math.sqrt(6 / 5))
    assert p.equals(mlp_init(spec, 0))
    assert not p.equals(mlp_init(spec, 1))


def test_forward_hand_computed():
    spec = MLPSpec((2, 2, 1))
    p = ParamSet(spec, [np.array([[1.0, -1.0], [2.0, 0.0]]), np.array([[1.0, 1.0]])], [np.zeros(2), np.array([0.5])])
    out, _ = mlp_forward(p, np.array([[1.0, 2.0]]))
    # hidden preacts (-1, 2) -> (-0.01, 2); output 0.5 - 0.01 + 2
    assert out[0, 0] == pytest.approx(2.49, abs=1e-15)


def test_forward_is_pure():
    p = mlp_init(MLPSpec((3, 6, 6, 4)), 1)
    X = np.random.default_rng(0).normal(size=(10, 3))
    a, _ = mlp_forward(p, X)
    b, _ = mlp_forward(p, X)
    assert np.array_equal(a, b)


def test_leaky_relu():
    assert np.array_equal(leaky_relu(np.array([-2.0, 0.0, 3.0])), np.array([-0.02, 0.0, 3.0]))


def test_fd_quadratic_exact():
    p = mlp_init(MLPSpec((3, 4, 2)), 3)

    def quad(ps):
        return 0.5 * sum(float(np.sum(a * a)) for a in ps.arrays()), ps.copy()

    assert finite_diff_check(quad, p) < 1e-9


def test_fd_constant_loss_zero():
    p = mlp_init(MLPSpec((2, 2)), 0)
    assert finite_diff_check(lambda ps: (1.5, ps.zeros_like()), p) == 0.0


def test_fd_rejects_bad_input():
    p = mlp_init(MLPSpec((2, 2)), 0)
    with pytest.raises(ValueError):
        finite_diff_check(lambda ps: (0.0, ps.zeros_like()), p, eps=0.0)
    with pytest.raises(ValueError):
        finite_diff_check(lambda ps: (math.nan, ps.zeros_like()), p)


def test_fd_random_mlp_ce_defer_loss():
    rng = np.random.default_rng(5)
    p = mlp_init(MLPSpec((4, 6, 5, 3)), rng)
    X = rng.normal(size=(6, 4))
    labels = rng.integers(0, 2, 6)
    hc = rng.integers(0, 2, 6).astype(bool)

    def f(ps):
        q, cache = mlp_forward(ps, X)
        v, dq = batch_loss_and_grad("ce", q, labels, hc, 0.3)
        return v, mlp_backward(ps, cache, dq)

    assert finite_diff_check(f, p) < 1e-4


def test_input_gradient_matches_fd():
    rng = np.random.default_rng(2)
    p = mlp_init(MLPSpec((3, 5, 2)), rng)
    X = rng.normal(size=(1, 3))
    w = rng.normal(size=(1, 2))
    _, cache = mlp_forward(p, X)
    _, dX = mlp_backward(p, cache, w, return_input_grad=True)
    eps = 1e-6
    for i in range(3):
        e = np.zeros_like(X)
        e[0, i] = eps
        num = (np.sum(mlp_forward(p, X + e)[0] * w) - np.sum(mlp_forward(p, X - e)[0] * w)) / (2 * eps)
        assert dX[0, i] == pytest.approx(num, rel=1e-6, abs=1e-9)


def test_backward_shape_check():
    p = mlp_init(MLPSpec((2, 3)), 0)
    _, cache = mlp_forward(p, np.zeros((4, 2)))
    with pytest.raises(ValueError):
        mlp_backward(p, cache, np.zeros((4, 2)))


def test_adam_zero_gradient_is_identity():
    p = mlp_init(MLPSpec((3, 4, 2)), 0)
    state = OptimizerState("adam", lr=0.1)
    new = optimizer_step(state, p, p.zeros_like())
    assert new.equals(p)


def test_adam_first_step_moves_by_lr():
    p = scalar_params(1.0)
    grads = ParamSet(p.spec, [np.array([[1.0]])], [np.zeros(1)])
    new = optimizer_step(OptimizerState("adam", lr=0.1), p, grads)
    # bias-corrected m/sqrt(v) = 1, so the step is lr * 1 / (1 + eps)
    assert new.weights[0][0, 0] == pytest.approx(1.0 - 0.1 / (1 + 1e-8), abs=1e-15)


def test_adamw_without_decay_matches_adam():
    rng = np.random.default_rng(0)
    p = mlp_init(MLPSpec((3, 4, 2)), rng)
    g = ParamSet(p.spec, [rng.normal(size=W.shape) for W in p.weights], [rng.normal(size=b.shape) for b in p.biases])
    a = optimizer_step(OptimizerState("adam", lr=0.01), p, g)
    b = optimizer_step(OptimizerState("adamw", lr=0.01, weight_decay=0.0), p, g)
    assert a.equals(b)


def test_adamw_decay_is_decoupled():
    p = scalar_params(2.0)
    new = optimizer_step(OptimizerState("adamw", lr=0.1, weight_decay=0.5), p, p.zeros_like())
    assert new.weights[0][0, 0] == pytest.approx(2.0 * (1 - 0.05))


def test_optimizer_validation():
    with pytest.raises(ValueError):
        OptimizerState("sgd")
    with pytest.raises(ValueError):
        OptimizerState("adam", weight_decay=0.1)


def test_paramset_json_roundtrip_lossless():
    rng = np.random.default_rng(9)
    p = mlp_init(MLPSpec((3, 5, 2)), rng)
    p.weights[0][0, 0] = 0.1 + 0.2  # a value with a long repr
    doc = json.loads(json.dumps(p.to_dict()))
    assert set(doc) == {"spec", "layers"} and set(doc["layers"][0]) == {"w", "b"}
    back = ParamSet.from_dict(doc)
    assert back.equals(p)


def test_paramset_shape_validation():
    with pytest.raises(ValueError):
        ParamSet(MLPSpec((2, 3)), [np.zeros((2, 3))], [np.zeros(3)])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4), st.integers(1, 5))
def test_fd_agrees_for_random_networks(seed, width, batch):
    rng = np.random.default_rng(seed)
    p = mlp_init(MLPSpec((2, width, 3)), rng)
    X = rng.normal(size=(batch, 2))
    T = rng.normal(size=(batch, 3))

    def f(ps):
        q, cache = mlp_forward(ps, X)
        r = q - T
        return 0.5 * float(np.sum(r * r)), mlp_backward(ps, cache, r)

    # the squared loss is smooth except at rectifier hinges; skip those draws
    _, cache = mlp_forward(p, X)
    if np.min(np.abs(cache.preacts[0])) < 1e-3:
        return
    assert finite_diff_check(f, p) < 1e-5
