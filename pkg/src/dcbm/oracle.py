"""Brute-force Bayes-optimal deferral on finite domains, and a harness that
checks surrogate-loss minimizers against it.

On a finite input domain a free table of per-cell logits can represent every
measurable predictor, so minimizing the exact expected surrogate over that
table and reading off argmax decisions is a direct test of consistency.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .losses import (
    LossTarget,
    PsiKind,
    batch_loss_and_grad,
    check_lambda,
    penalized_loss,
    penalized_loss_ls,
)
from .model import DEFER, head_decide


@dataclass(frozen=True)
class DiscreteJoint:
    p_x: np.ndarray  # (n_cells,)
    p_y_given_x: np.ndarray  # (n_cells, K)
    p_h_correct_given_x: np.ndarray  # (n_cells,)

    def __post_init__(self):
        px = np.asarray(self.p_x, dtype=np.float64)
        py = np.asarray(self.p_y_given_x, dtype=np.float64)
        ph = np.asarray(self.p_h_correct_given_x, dtype=np.float64)
        if px.ndim != 1 or py.shape[0] != px.shape[0] or ph.shape != px.shape:
            raise ValueError("joint arrays disagree on the number of cells")
        if np.any(px < 0) or abs(px.sum() - 1.0) > 1e-12:
            raise ValueError("p_x must be a probability vector")
        if np.any(py < 0) or np.any(np.abs(py.sum(axis=1) - 1.0) > 1e-12):
            raise ValueError("each row of p_y_given_x must be a probability vector")
        if np.any((ph < 0) | (ph > 1)):
            raise ValueError("p_h_correct_given_x must lie in [0, 1]")
        object.__setattr__(self, "p_x", px)
        object.__setattr__(self, "p_y_given_x", py)
        object.__setattr__(self, "p_h_correct_given_x", ph)

    @property
    def n_cells(self) -> int:
        return self.p_x.shape[0]

    @property
    def K(self) -> int:
        return self.p_y_given_x.shape[1]

    def permuted(self, perm) -> "DiscreteJoint":
        perm = np.asarray(perm)
        return DiscreteJoint(self.p_x[perm], self.p_y_given_x[perm], self.p_h_correct_given_x[perm])


def random_joint(n_cells: int, K: int, seed: int) -> DiscreteJoint:
    rng = np.random.default_rng(seed)
    px = rng.dirichlet(np.ones(n_cells))
    py = rng.dirichlet(np.ones(K), size=n_cells)
    # renormalize so sums are exact to within rounding
    px = px / px.sum()
    py = py / py.sum(axis=1, keepdims=True)
    ph = rng.uniform(0.0, 1.0, size=n_cells)
    return DiscreteJoint(px, py, ph)


def expected_costs(joint: DiscreteJoint, lam: float) -> np.ndarray:
    """Expected zero-one cost per cell of each action; shape (n_cells, K+1)."""
    lam = check_lambda(lam)
    costs = np.empty((joint.n_cells, joint.K + 1))
    costs[:, : joint.K] = 1.0 - joint.p_y_given_x
    costs[:, joint.K] = lam + (1.0 - joint.p_h_correct_given_x)
    return costs


def bayes_decision(joint: DiscreteJoint, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Bayes-optimal action per cell (class index or DEFER) and its margin.

    The margin is the gap between the two cheapest actions. Exact ties between
    deferring and the best class resolve to the class.
    """
    costs = expected_costs(joint, lam)
    best_class = np.argmax(joint.p_y_given_x, axis=1)
    class_cost = costs[np.arange(joint.n_cells), best_class]
    defer = costs[:, joint.K] < class_cost
    decision = np.where(defer, DEFER, best_class)
    ordered = np.sort(costs, axis=1)
    return decision, ordered[:, 1] - ordered[:, 0]


def _expanded_rows(joint: DiscreteJoint):
    """One row per (cell, y, human correct) with positive probability."""
    cells, ys, hs, ws = [], [], [], []
    for i in range(joint.n_cells):
        a = joint.p_h_correct_given_x[i]
        for y in range(joint.K):
            for h, ph in ((True, a), (False, 1.0 - a)):
                w = joint.p_x[i] * joint.p_y_given_x[i, y] * ph
                if w > 0:
                    cells.append(i)
                    ys.append(y)
                    hs.append(h)
                    ws.append(w)
    return np.array(cells), np.array(ys), np.array(hs), np.array(ws)


def expected_surrogate(
    joint: DiscreteJoint, logit_table, kind: PsiKind | str, lam: float, *, label_smoothing: bool = False
) -> float:
    """Exact expectation of the penalized loss, summed term by term."""
    table = np.asarray(logit_table, dtype=np.float64)
    if table.shape != (joint.n_cells, joint.K + 1):
        raise ValueError(f"logit table must have shape {(joint.n_cells, joint.K + 1)}")
    loss = penalized_loss_ls if label_smoothing else penalized_loss
    total = 0.0
    for i in range(joint.n_cells):
        a = joint.p_h_correct_given_x[i]
        for y in range(joint.K):
            for h, ph in ((True, a), (False, 1.0 - a)):
                w = joint.p_x[i] * joint.p_y_given_x[i, y] * ph
                if w > 0:
                    total += w * loss(kind, table[i], LossTarget(y, h), lam)
    return total


def expected_surrogate_and_grad(
    joint: DiscreteJoint,
    logit_table,
    kind: PsiKind | str,
    lam: float,
    *,
    label_smoothing: bool = False,
    rows=None,
) -> tuple[float, np.ndarray]:
    table = np.asarray(logit_table, dtype=np.float64)
    cells, ys, hs, ws = _expanded_rows(joint) if rows is None else rows
    value, g_rows = batch_loss_and_grad(
        kind, table[cells], ys, hs, lam, ws, label_smoothing=label_smoothing
    )
    # batch_loss_and_grad normalizes by sum(ws); undo it so this is the plain expectation
    scale = ws.sum()
    grad = np.zeros_like(table)
    np.add.at(grad, cells, g_rows * scale)
    return value * scale, grad


@dataclass
class DescentConfig:
    lr: float = 1.0
    max_steps: int = 200_000
    tol: float = 1e-8
    margin_threshold: float = 0.05
    init_scale: float = 0.0
    seed: int = 0
    label_smoothing: bool = False


@dataclass
class ConsistencyReport:
    kind: str
    lam: float
    bayes: list[int]
    learned: list[int]
    margins: list[float]
    converged: bool
    steps: int
    grad_norm: float
    margin_threshold: float
    table: np.ndarray = field(repr=False, default=None)

    @property
    def decided_cells(self) -> list[int]:
        return [i for i, m in enumerate(self.margins) if m > self.margin_threshold]

    @property
    def disagreements(self) -> list[int]:
        return [i for i in self.decided_cells if self.bayes[i] != self.learned[i]]

    @property
    def agreement_rate(self) -> float:
        decided = self.decided_cells
        if not decided:
            return 1.0
        return 1.0 - len(self.disagreements) / len(decided)

    def to_dict(self) -> dict:
        def label(d):
            return "defer" if d == DEFER else str(d)

        return {
            "psi": self.kind,
            "lambda": self.lam,
            "cells": [
                {"cell": i, "bayes": label(b), "learned": label(l), "margin": m}
                for i, (b, l, m) in enumerate(zip(self.bayes, self.learned, self.margins))
            ],
            "agreement_rate": self.agreement_rate,
            "margin_threshold": self.margin_threshold,
            "disagreements": self.disagreements,
            "converged": self.converged,
            "steps": self.steps,
            "grad_norm": self.grad_norm,
        }


def consistency_check(
    joint: DiscreteJoint, kind: PsiKind | str, lam: float, cfg: DescentConfig | None = None
) -> ConsistencyReport:
    """Minimize the expected surrogate over a free per-cell logit table by
    full-batch gradient descent and compare argmax decisions with Bayes.

    Each cell's gradient is divided by its mass p_x: cells are decoupled, so
    this leaves the minimizer set unchanged and equalizes convergence speed.
    """
    cfg = cfg or DescentConfig()
    kind = PsiKind.parse(kind)
    lam = check_lambda(lam)
    rng = np.random.default_rng(cfg.seed)
    table = cfg.init_scale * rng.standard_normal((joint.n_cells, joint.K + 1))
    inv_mass = np.where(joint.p_x > 0, 1.0 / np.maximum(joint.p_x, 1e-300), 0.0)[:, None]
    converged = False
    gnorm = np.inf
    step = 0
    rows = _expanded_rows(joint)
    for step in range(1, cfg.max_steps + 1):
        _, grad = expected_surrogate_and_grad(
            joint, table, kind, lam, label_smoothing=cfg.label_smoothing, rows=rows
        )
        gnorm = float(np.linalg.norm(grad))
        if gnorm < cfg.tol:
            converged = True
            break
        table -= cfg.lr * grad * inv_mass
    bayes, margins = bayes_decision(joint, lam)
    learned = head_decide(table, True)
    return ConsistencyReport(
        kind=kind.value,
        lam=lam,
        bayes=[int(b) for b in bayes],
        learned=[int(v) for v in learned],
        margins=[float(m) for m in margins],
        converged=converged,
        steps=step,
        grad_norm=gnorm,
        margin_threshold=cfg.margin_threshold,
        table=table,
    )


def likelihood_inequality_check(n_trials: int, seed: int = 0, slack: float = 1e-12) -> int:
    """Count violations of log(p1 + I p2) >= log p1 + I log p2 over random draws."""
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    rng = np.random.default_rng(seed)
    p1 = 1.0 - rng.random(n_trials)  # (0, 1]
    p2 = 1.0 - rng.random(n_trials)
    ind = rng.integers(0, 2, n_trials).astype(np.float64)
    lhs = np.log(p1 + ind * p2)
    rhs = np.log(p1) + ind * np.log(p2)
    return int(np.sum(lhs < rhs - slack))
