import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dcbm.losses import (
    LossTarget,
    PsiKind,
    asm_defer_probability,
    batch_loss_and_grad,
    check_lambda,
    class_loss_and_grad,
    loss_coefficients,
    penalized_loss,
    penalized_loss_ls,
    psi,
    psi_grad,
    psi_matrix,
    readout,
    surrogate_loss,
)

mp.mp.dps = 40
LN2 = math.log(2.0)


def psi_reference(kind: str, q, k: int) -> float:
    """High-precision evaluation of the psi formulas, written independently."""
    q = [mp.mpf(float(v)) for v in q]
    K = len(q) - 1
    e = [mp.e**v for v in q]
    if kind == "ce":
        return float(-mp.log(e[k] / mp.fsum(e)))
    if kind == "ova":
        phi = lambda z: mp.log(1 + mp.e ** (-z))  # noqa: E731
        return float(phi(q[k]) + mp.fsum(phi(-q[j]) for j in range(K + 1) if j != k))
    top = max(e[:K])
    if k == K:
        return float(-mp.log(e[K] / (mp.fsum(e) - top)))
    rest = mp.fsum(e[:K]) - top
    return float(-mp.log(e[k] / mp.fsum(e[:K])) - mp.log(rest / (mp.fsum(e) - top)))


logit_vectors = arrays(np.float64, st.integers(3, 6), elements=st.floats(-8, 8))


def test_parse_psi_kind():
    assert PsiKind.parse("CE") is PsiKind.CE
    assert PsiKind.parse(PsiKind.ASM) is PsiKind.ASM
    with pytest.raises(ValueError, match="ce, ova, asm"):
        PsiKind.parse("hinge")


def test_check_lambda():
    assert check_lambda(0) == 0.0
    for bad in (-0.1, 1.01):
        with pytest.raises(ValueError):
            check_lambda(bad)


def test_psi_examples():
    assert psi("ce", [0, 0], 0) == pytest.approx(LN2, abs=1e-15)
    assert psi("asm", [0, 0, 0], 2) == pytest.approx(LN2, abs=1e-15)
    assert psi("ova", [0, 0], 0) == pytest.approx(2 * LN2, abs=1e-15)
    with pytest.raises(ValueError):
        psi("ce", [0, 0], 2)


def test_psi_grad_examples():
    assert np.allclose(psi_grad("ce", [0, 0], 0), [-0.5, 0.5], atol=1e-15)


def test_asm_needs_two_classes():
    with pytest.raises(ValueError):
        psi("asm", [0.0, 1.0], 0)


@settings(max_examples=60, deadline=None)
@given(logit_vectors, st.data())
def test_psi_matches_high_precision_reference(q, data):
    k = data.draw(st.integers(0, q.size - 1))
    for kind in ("ce", "ova", "asm"):
        assert psi(kind, q, k) == pytest.approx(psi_reference(kind, q, k), rel=1e-9, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(logit_vectors, st.data())
def test_psi_grad_matches_finite_differences(q, data):
    k = data.draw(st.integers(0, q.size - 1))
    K = q.size - 1
    for kind in ("ce", "ova", "asm"):
        if kind == "asm":
            top2 = np.sort(q[:K])[-2:]
            if top2[1] - top2[0] < 1e-3:
                continue  # argmax tie: the asymmetric normalizer has a kink here
        g = psi_grad(kind, q, k)
        eps = 1e-6
        for i in range(q.size):
            e = np.zeros_like(q)
            e[i] = eps
            num = (psi(kind, q + e, k) - psi(kind, q - e, k)) / (2 * eps)
            assert g[i] == pytest.approx(num, rel=1e-4, abs=1e-7)


@settings(max_examples=100, deadline=None)
@given(logit_vectors, st.data())
def test_ce_gradient_sums_to_zero(q, data):
    k = data.draw(st.integers(0, q.size - 1))
    assert abs(psi_grad("ce", q, k).sum()) < 1e-12


def test_ce_probabilities_normalize():
    rng = np.random.default_rng(0)
    Q = rng.normal(scale=5, size=(1000, 4))
    assert np.allclose(np.exp(-psi_matrix("ce", Q)).sum(axis=1), 1.0, atol=1e-12)


def test_psi_nonnegative():
    rng = np.random.default_rng(1)
    Q = rng.normal(scale=6, size=(2000, 5))
    for kind in PsiKind:
        assert np.all(psi_matrix(kind, Q) >= 0)


def test_surrogate_examples():
    q = np.array([0.3, -1.2, 0.8])
    assert surrogate_loss("ce", q, LossTarget(1, False)) == psi("ce", q, 1)
    assert surrogate_loss("ce", [0, 0], LossTarget(0, True)) == pytest.approx(2 * LN2, abs=1e-15)
    ref = psi_reference("ce", [1, 0, 0], 0) + psi_reference("ce", [1, 0, 0], 2)
    assert surrogate_loss("ce", [1, 0, 0], LossTarget(0, True)) == pytest.approx(ref, rel=1e-14)
    with pytest.raises(ValueError):
        surrogate_loss("ce", q, LossTarget(2, True))  # ground truth is never the defer index


def test_penalized_examples():
    q = np.array([0.4, 1.1, -0.3])
    assert penalized_loss("ce", q, LossTarget(0, True), 1.0) == pytest.approx(psi("ce", q, 0), abs=1e-15)
    assert penalized_loss("ce", [0, 0], LossTarget(0, False), 0.5) == pytest.approx(1.5 * LN2, abs=1e-15)
    with pytest.raises(ValueError):
        penalized_loss("ce", q, LossTarget(0, True), 1.5)


def test_loss_identities_over_random_inputs():
    rng = np.random.default_rng(2)
    for i in range(10_000):
        kind = ("ce", "ova", "asm")[i % 3]
        q = rng.normal(scale=3, size=int(rng.integers(3, 6)))
        t = LossTarget(int(rng.integers(0, q.size - 1)), bool(rng.integers(0, 2)))
        assert abs(penalized_loss(kind, q, t, 0.0) - surrogate_loss(kind, q, t)) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(logit_vectors, st.floats(-50, 50), st.data())
def test_ce_translation_invariance(q, c, data):
    k = data.draw(st.integers(0, q.size - 1))
    assert abs(psi("ce", q + c, k) - psi("ce", q, k)) < 1e-10


def test_asm_defer_probability_in_unit_interval():
    rng = np.random.default_rng(3)
    Q = rng.normal(scale=10, size=(10_000, 4))
    d = asm_defer_probability(Q)
    assert np.all(d > 0) and np.all(d <= 1)


@settings(max_examples=100, deadline=None)
@given(logit_vectors, st.floats(0, 1), st.data())
def test_label_smoothing_properties(q, lam, data):
    y = data.draw(st.integers(0, q.size - 2))
    for kind in ("ce", "ova", "asm"):
        right = LossTarget(y, True)
        wrong = LossTarget(y, False)
        assert penalized_loss_ls(kind, q, right, lam) == penalized_loss(kind, q, right, lam)
        assert penalized_loss_ls(kind, q, wrong, 0.0) == pytest.approx(surrogate_loss(kind, q, wrong), abs=1e-12)
        # a min of nonnegative terms never exceeds their sum
        assert penalized_loss_ls(kind, q, wrong, lam) <= penalized_loss(kind, q, wrong, lam) + 1e-12


def test_label_smoothing_single_class_collapses():
    rng = np.random.default_rng(4)
    for _ in range(200):
        q = rng.normal(size=2)
        t = LossTarget(0, bool(rng.integers(0, 2)))
        lam = float(rng.uniform())
        for kind in ("ce", "ova"):
            assert penalized_loss_ls(kind, q, t, lam) == pytest.approx(penalized_loss(kind, q, t, lam), abs=1e-14)


def test_coefficients_reproduce_penalized_loss():
    rng = np.random.default_rng(5)
    Q = rng.normal(size=(50, 4))
    labels = rng.integers(0, 3, 50)
    hc = rng.integers(0, 2, 50).astype(bool)
    C = loss_coefficients(labels, hc, 0.3, 3)
    P = psi_matrix("ova", Q)
    for i in range(50):
        ref = penalized_loss("ova", Q[i], LossTarget(int(labels[i]), bool(hc[i])), 0.3)
        assert (C[i] * P[i]).sum() == pytest.approx(ref, rel=1e-13)


def test_batch_mean_and_weights():
    rng = np.random.default_rng(6)
    Q = rng.normal(size=(5, 3))
    labels = rng.integers(0, 2, 5)
    hc = rng.integers(0, 2, 5).astype(bool)
    loss, _ = batch_loss_and_grad("ce", Q, labels, hc, 0.2, np.ones(5))
    plain = np.mean([penalized_loss("ce", Q[i], LossTarget(int(labels[i]), bool(hc[i])), 0.2) for i in range(5)])
    assert loss == pytest.approx(plain, rel=1e-13)

    # duplicating a row equals giving it weight 2
    w = np.array([2.0, 1, 1, 1, 1])
    a, ga = batch_loss_and_grad("asm", Q, labels, hc, 0.2, w)
    Qd = np.vstack([Q[:1], Q])
    b, gb = batch_loss_and_grad("asm", Qd, np.r_[labels[:1], labels], np.r_[hc[:1], hc], 0.2)
    assert a == pytest.approx(b, rel=1e-13)
    assert np.allclose(ga[0], gb[0] + gb[1]) and np.allclose(ga[1:], gb[2:])

    with pytest.raises(ValueError):
        batch_loss_and_grad("ce", Q, labels, hc, 0.2, np.array([0.0, 1, 1, 1, 1]))
    with pytest.raises(ValueError):
        batch_loss_and_grad("ce", Q, labels[:4], hc, 0.2)


@pytest.mark.parametrize("kind", ["ce", "ova", "asm"])
@pytest.mark.parametrize("smooth", [False, True])
def test_batch_gradient_matches_finite_differences(kind, smooth):
    rng = np.random.default_rng(7)
    Q = rng.normal(size=(4, 4))
    labels = rng.integers(0, 3, 4)
    hc = np.array([True, False, False, True])
    w = rng.uniform(0.5, 2, 4)
    _, g = batch_loss_and_grad(kind, Q, labels, hc, 0.4, w, label_smoothing=smooth)
    eps = 1e-6
    for idx in np.ndindex(Q.shape):
        E = np.zeros_like(Q)
        E[idx] = eps
        up = batch_loss_and_grad(kind, Q + E, labels, hc, 0.4, w, label_smoothing=smooth)[0]
        down = batch_loss_and_grad(kind, Q - E, labels, hc, 0.4, w, label_smoothing=smooth)[0]
        assert g[idx] == pytest.approx((up - down) / (2 * eps), rel=1e-5, abs=1e-8)


def test_class_loss_is_plain_cross_entropy():
    Q = np.array([[0.0, 0.0], [2.0, 0.0]])
    loss, g = class_loss_and_grad(Q, np.array([0, 1]))
    expected = (LN2 + (math.log(math.exp(2) + 1) - 0.0)) / 2
    assert loss == pytest.approx(expected, rel=1e-14)
    assert np.allclose(g.sum(axis=1), 0.0)


@pytest.mark.parametrize("kind", ["ce", "ova", "asm"])
def test_readout_is_a_distribution(kind):
    rng = np.random.default_rng(8)
    Q = rng.normal(scale=3, size=(100, 3))
    probs, d = readout(kind, Q)
    assert np.allclose(probs.sum(axis=1), 1.0)
    assert np.all((d > 0) & (d <= 1))
    probs, d = readout(kind, Q[:, :2], defer=False)
    assert np.allclose(probs.sum(axis=1), 1.0) and np.all(d == 0)
