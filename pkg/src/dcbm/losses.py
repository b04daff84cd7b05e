"""Learning-to-defer surrogate losses over K classes plus a defer output.

A head emits K + 1 logits; index K is the defer action. Every loss here is a
non-negative combination ``sum_k C[k] * psi(q, k)`` of the per-class negative
log-probabilities, which is how gradients are assembled for all three
parameterizations (CE, OVA, ASM).
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np


class PsiKind(str, enum.Enum):
    CE = "ce"
    OVA = "ova"
    ASM = "asm"

    @classmethod
    def parse(cls, name: "str | PsiKind") -> "PsiKind":
        if isinstance(name, PsiKind):
            return name
        try:
            return cls(str(name).lower())
        except ValueError:
            valid = ", ".join(k.value for k in cls)
            raise ValueError(f"unknown psi {name!r}; valid options: {valid}") from None


@dataclass(frozen=True)
class LossTarget:
    true_class: int
    human_correct: bool


def check_lambda(lam: float) -> float:
    lam = float(lam)
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"defer cost lambda must lie in [0, 1], got {lam}")
    return lam


def _lse(a: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Row-wise log-sum-exp, optionally over masked entries only."""
    if mask is not None:
        a = np.where(mask, a, -np.inf)
    m = np.max(a, axis=1, keepdims=True)
    out = m[:, 0] + np.log(np.sum(np.exp(a - m), axis=1))
    return out


def _softmax(a: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    if mask is not None:
        a = np.where(mask, a, -np.inf)
    e = np.exp(a - np.max(a, axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _softplus(z: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, z)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -z))


def _asm_parts(Q: np.ndarray):
    """Log-normalizers of the asymmetric softmax.

    Returns (lse over classes, lse over classes minus the argmax class,
    lse over classes minus the argmax class plus defer, argmax index).
    """
    n, width = Q.shape
    K = width - 1
    if K < 2:
        raise ValueError("ASM needs at least two classes besides the defer output")
    cls = Q[:, :K]
    top = np.argmax(cls, axis=1)
    rest = np.ones_like(cls, dtype=bool)
    rest[np.arange(n), top] = False
    lse_all = _lse(cls)
    lse_rest = _lse(cls, rest)
    lse_t = np.logaddexp(lse_rest, Q[:, K])
    return lse_all, lse_rest, lse_t, top, rest


def psi_matrix(kind: PsiKind | str, Q) -> np.ndarray:
    """psi(q_i, k) for every row i and every k in [0, K]; shape (n, K+1)."""
    kind = PsiKind.parse(kind)
    Q = np.asarray(Q, dtype=np.float64)
    if Q.ndim != 2 or Q.shape[1] < 2:
        raise ValueError("defer logits need at least one class plus the defer output")
    K = Q.shape[1] - 1
    if kind is PsiKind.CE:
        return _lse(Q)[:, None] - Q
    if kind is PsiKind.OVA:
        # phi(q_k) + sum_{j != k} phi(-q_j) == sum_j softplus(q_j) - q_k
        return _softplus(Q).sum(axis=1, keepdims=True) - Q
    lse_all, lse_rest, lse_t, _, _ = _asm_parts(Q)
    out = np.empty_like(Q)
    out[:, K] = lse_t - Q[:, K]
    out[:, :K] = (lse_all - lse_rest + lse_t)[:, None] - Q[:, :K]
    return out


def weighted_psi_grad(kind: PsiKind | str, Q, C) -> np.ndarray:
    """Gradient w.r.t. Q of sum_k C[i, k] * psi(Q[i], k), row by row."""
    kind = PsiKind.parse(kind)
    Q = np.asarray(Q, dtype=np.float64)
    C = np.asarray(C, dtype=np.float64)
    K = Q.shape[1] - 1
    total = C.sum(axis=1, keepdims=True)
    if kind is PsiKind.CE:
        return total * _softmax(Q) - C
    if kind is PsiKind.OVA:
        return total * _sigmoid(Q) - C
    lse_all, lse_rest, lse_t, _, rest = _asm_parts(Q)
    g_t = np.zeros_like(Q)
    g_t[:, :K] = np.where(rest, np.exp(Q[:, :K] - lse_t[:, None]), 0.0)
    g_t[:, K] = np.exp(Q[:, K] - lse_t)
    g_cls = np.zeros_like(Q)
    g_cls[:, :K] = np.exp(Q[:, :K] - lse_all[:, None])
    g_cls[:, :K] -= np.where(rest, np.exp(Q[:, :K] - lse_rest[:, None]), 0.0)
    class_total = C[:, :K].sum(axis=1, keepdims=True)
    return total * g_t + class_total * g_cls - C


def psi(kind: PsiKind | str, q, k: int) -> float:
    q = np.asarray(q, dtype=np.float64)
    if not 0 <= k < q.size:
        raise ValueError(f"class index {k} outside [0, {q.size - 1}]")
    return float(psi_matrix(kind, q[None, :])[0, k])


def psi_grad(kind: PsiKind | str, q, k: int) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if not 0 <= k < q.size:
        raise ValueError(f"class index {k} outside [0, {q.size - 1}]")
    C = np.zeros((1, q.size))
    C[0, k] = 1.0
    return weighted_psi_grad(kind, q[None, :], C)[0]


def _check_target(q: np.ndarray, t: LossTarget) -> None:
    if not 0 <= t.true_class < q.size - 1:
        raise ValueError(f"true class {t.true_class} outside [0, {q.size - 2}]")


def surrogate_loss(kind: PsiKind | str, q, t: LossTarget) -> float:
    q = np.asarray(q, dtype=np.float64)
    _check_target(q, t)
    p = psi_matrix(kind, q[None, :])[0]
    return float(p[t.true_class] + float(bool(t.human_correct)) * p[-1])


def penalized_loss(kind: PsiKind | str, q, t: LossTarget, lam: float) -> float:
    lam = check_lambda(lam)
    q = np.asarray(q, dtype=np.float64)
    _check_target(q, t)
    p = psi_matrix(kind, q[None, :])[0]
    hc = float(bool(t.human_correct))
    return float(
        p[t.true_class] + (1.0 - lam) * hc * p[-1] + lam * (1.0 - hc) * p[:-1].sum()
    )


def penalized_loss_ls(kind: PsiKind | str, q, t: LossTarget, lam: float) -> float:
    """Penalized loss whose human-wrong term uses the smallest class psi."""
    lam = check_lambda(lam)
    q = np.asarray(q, dtype=np.float64)
    _check_target(q, t)
    p = psi_matrix(kind, q[None, :])[0]
    hc = float(bool(t.human_correct))
    return float(
        p[t.true_class] + (1.0 - lam) * hc * p[-1] + lam * (1.0 - hc) * p[:-1].min()
    )


def loss_coefficients(
    labels, human_correct, lam: float, n_classes: int, psi_values: np.ndarray | None = None
) -> np.ndarray:
    """Per-row coefficients C such that the penalized loss is sum_k C[k] psi(q, k).

    Passing ``psi_values`` switches the human-wrong term to the label-smoothing
    form (weight on the arg-min class only).
    """
    labels = np.asarray(labels, dtype=np.int64)
    hc = np.asarray(human_correct, dtype=np.float64)
    n = labels.shape[0]
    C = np.zeros((n, n_classes + 1))
    C[np.arange(n), labels] = 1.0
    C[:, n_classes] += (1.0 - lam) * hc
    wrong = lam * (1.0 - hc)
    if psi_values is None:
        C[:, :n_classes] += wrong[:, None]
    else:
        C[np.arange(n), np.argmin(psi_values[:, :n_classes], axis=1)] += wrong
    return C


def batch_loss_and_grad(
    kind: PsiKind | str,
    logits,
    labels,
    human_correct,
    lam: float,
    sample_weights=None,
    *,
    label_smoothing: bool = False,
) -> tuple[float, np.ndarray]:
    """Weighted mean penalized loss over rows and its gradient w.r.t. the logits."""
    lam = check_lambda(lam)
    Q = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    human_correct = np.asarray(human_correct, dtype=bool)
    n, width = Q.shape
    K = width - 1
    if labels.shape != (n,) or human_correct.shape != (n,):
        raise ValueError(f"expected {n} labels and human-correct flags")
    if np.any(labels < 0) or np.any(labels >= K):
        raise ValueError("true labels must lie in [0, K)")
    w = _weights(sample_weights, n)
    P = psi_matrix(kind, Q)
    C = loss_coefficients(labels, human_correct, lam, K, P if label_smoothing else None)
    per_row = (C * P).sum(axis=1)
    scale = w / w.sum()
    loss = float(per_row @ scale)
    grad = weighted_psi_grad(kind, Q, C) * scale[:, None]
    return loss, grad


def class_loss_and_grad(logits, labels, sample_weights=None) -> tuple[float, np.ndarray]:
    """Plain softmax cross-entropy for heads that cannot defer."""
    Q = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, K = Q.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels")
    if np.any(labels < 0) or np.any(labels >= K):
        raise ValueError("labels out of range")
    w = _weights(sample_weights, n)
    scale = w / w.sum()
    lse = _lse(Q)
    loss = float((lse - Q[np.arange(n), labels]) @ scale)
    grad = _softmax(Q)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad * scale[:, None]


def _weights(sample_weights, n: int) -> np.ndarray:
    if sample_weights is None:
        return np.ones(n)
    w = np.asarray(sample_weights, dtype=np.float64)
    if w.shape != (n,):
        raise ValueError(f"expected {n} sample weights, got shape {w.shape}")
    if np.any(~(w > 0)) or not np.all(np.isfinite(w)):
        raise ValueError("sample weights must be positive and finite")
    return w


def asm_defer_probability(Q) -> np.ndarray:
    Q = np.atleast_2d(np.asarray(Q, dtype=np.float64))
    _, _, lse_t, _, _ = _asm_parts(Q)
    return np.exp(Q[:, -1] - lse_t)


def readout(kind: PsiKind | str, logits, defer: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Reporting probabilities for a batch of head logits.

    Returns (class distribution over the K classes, defer probability). The
    class distribution always sums to one; decisions never use it.
    """
    Q = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    if not defer:
        return _softmax(Q), np.zeros(Q.shape[0])
    kind = PsiKind.parse(kind)
    K = Q.shape[1] - 1
    if kind is PsiKind.CE:
        s = _softmax(Q)
        return _softmax(Q[:, :K]), s[:, K]
    if kind is PsiKind.OVA:
        sig = _sigmoid(Q)
        return sig[:, :K] / sig[:, :K].sum(axis=1, keepdims=True), sig[:, K]
    return _softmax(Q[:, :K]), asm_defer_probability(Q)
