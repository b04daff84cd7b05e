"""Verification suites run by ``dcbm verify``.

Each suite returns a plain dict with a ``status`` of "pass" or "fail" plus the
numbers behind it. Outputs carry no timings so repeated runs are identical.
"""
from __future__ import annotations

import numpy as np

from .losses import PsiKind, batch_loss_and_grad, psi_matrix
from .metrics import evaluate
from .model import DEFER, SystemPrediction
from .numkit import MLPSpec, finite_diff_check, mlp_backward, mlp_forward, mlp_init
from .oracle import DescentConfig, consistency_check, likelihood_inequality_check, random_joint

GRADCHECK_CONFIGS = 100  # per psi kind
GRADCHECK_TOL = 1e-4
LOSS_FORMS = ("surrogate", "penalized", "label_smoothing")
CONSISTENCY_SEEDS = (0, 1, 2, 3, 4)
CONSISTENCY_LAMBDAS = (0.0, 0.1, 0.3)
LIKELIHOOD_TRIALS = 100_000
KINK_GAP = 1e-3


def _mlp_loss(kind, form, X, labels, hc, lam):
    lam = 0.0 if form == "surrogate" else lam
    smooth = form == "label_smoothing"

    def fn(params):
        q, cache = mlp_forward(params, X)
        value, dq = batch_loss_and_grad(kind, q, labels, hc, lam, label_smoothing=smooth)
        return value, mlp_backward(params, cache, dq)

    return fn


def _near_kink(kind, form, params, X) -> bool:
    """True when a parameter perturbation could cross a non-differentiable
    point: a leaky-ReLU hinge, the ASM top-two class tie, or (label smoothing)
    the tie between the two smallest class psi values."""
    q, cache = mlp_forward(params, X)
    if any(np.min(np.abs(z)) < KINK_GAP for z in cache.preacts[:-1]):
        return True
    top2 = np.sort(q[:, :-1], axis=1)[:, -2:]
    if kind is PsiKind.ASM and np.min(top2[:, 1] - top2[:, 0]) < KINK_GAP:
        return True
    if form == "label_smoothing":
        low2 = np.sort(psi_matrix(kind, q)[:, :-1], axis=1)[:, :2]
        if np.min(low2[:, 1] - low2[:, 0]) < KINK_GAP:
            return True
    return False


def random_gradcheck_case(kind, form, rng):
    """Draw a random two-hidden-layer net and batch away from kinks."""
    while True:
        K = int(rng.integers(2, 5))
        d = int(rng.integers(2, 5))
        spec = MLPSpec((d, int(rng.integers(2, 5)), int(rng.integers(2, 5)), K + 1))
        params = mlp_init(spec, rng)
        n = int(rng.integers(3, 7))
        X = rng.normal(size=(n, d))
        if not _near_kink(kind, form, params, X):
            break
    labels = rng.integers(0, K, size=n)
    hc = rng.integers(0, 2, size=n).astype(bool)
    lam = float(rng.uniform(0.0, 1.0))
    return params, _mlp_loss(kind, form, X, labels, hc, lam)


def gradcheck_suite(n_configs: int = GRADCHECK_CONFIGS, seed: int = 0) -> dict:
    """Finite differences through a random two-hidden-layer MLP and each loss."""
    rng = np.random.default_rng(seed)
    cases = []
    worst_all = 0.0
    for kind in PsiKind:
        worst = 0.0
        for i in range(n_configs):
            params, fn = random_gradcheck_case(kind, LOSS_FORMS[i % len(LOSS_FORMS)], rng)
            worst = max(worst, finite_diff_check(fn, params, eps=1e-5))
        cases.append({"psi": kind.value, "configs": n_configs, "max_rel_err": worst})
        worst_all = max(worst_all, worst)
    return {
        "status": "pass" if worst_all < GRADCHECK_TOL else "fail",
        "tolerance": GRADCHECK_TOL,
        "max_rel_err": worst_all,
        "cases": cases,
    }


def consistency_suite(
    seeds=CONSISTENCY_SEEDS, lambdas=CONSISTENCY_LAMBDAS, n_cells: int = 8, K: int = 3,
    cfg: DescentConfig | None = None,
) -> dict:
    """CE must match the Bayes rule on every decided cell. OVA and ASM go
    through the same harness; their disagreements are reported as findings."""
    cfg = cfg or DescentConfig()
    runs = []
    required_ok = True
    for kind in PsiKind:
        for lam in lambdas:
            for s in seeds:
                rep = consistency_check(random_joint(n_cells, K, s), kind, lam, cfg)
                entry = {
                    "psi": kind.value,
                    "lambda": lam,
                    "seed": s,
                    "agreement_rate": rep.agreement_rate,
                    "decided_cells": len(rep.decided_cells),
                    "disagreements": rep.disagreements,
                    "converged": rep.converged,
                }
                if kind is PsiKind.CE and (rep.agreement_rate < 1.0 or not rep.converged):
                    required_ok = False
                runs.append(entry)
    findings = [
        r for r in runs if r["psi"] != PsiKind.CE.value and (r["disagreements"] or not r["converged"])
    ]
    return {
        "status": "pass" if required_ok else "fail",
        "required": PsiKind.CE.value,
        "margin_threshold": cfg.margin_threshold,
        "runs": runs,
        "findings": findings,
    }


def likelihood_suite(n_trials: int = LIKELIHOOD_TRIALS, seed: int = 0) -> dict:
    violations = likelihood_inequality_check(n_trials, seed)
    return {"status": "pass" if violations == 0 else "fail", "trials": n_trials, "violations": violations}


def metrics_fixture() -> tuple[SystemPrediction, np.ndarray, np.ndarray]:
    """Four samples, two binary concepts, binary task.

    row 0: both concepts predicted correctly, task predicted correctly
    row 1: concept 0 deferred to a correct human, concept 1 predicted wrong, task correct
    row 2: concepts predicted correctly, task deferred to a correct human
    row 3: concept 1 deferred to a wrong human, task predicted wrong
    """
    c = np.array([[1, 0], [0, 1], [1, 1], [0, 0]])
    y = np.array([1, 0, 1, 0])
    c_out = np.array([[1, 0], [DEFER, 0], [1, 1], [0, DEFER]])
    c_res = np.array([[1, 0], [0, 0], [1, 1], [0, 1]])
    t_out = np.array([1, 0, DEFER, 1])
    t_res = np.array([1, 0, 1, 1])
    pred = SystemPrediction(
        concept_outcome=c_out,
        concept_resolved=c_res,
        concept_probs=np.full((4, 2, 2), 0.5),
        concept_defer_prob=np.zeros((4, 2)),
        task_outcome=t_out,
        task_resolved=t_res,
        task_probs=np.full((4, 2), 0.5),
        task_defer_prob=np.zeros(4),
    )
    return pred, c, y


# values worked out by hand from the rows above
FIXTURE_EXPECTED = {
    "acc_task": 0.75,  # row 3 wrong
    "acc_conc": 0.75,  # (1,1) and (3,1) wrong out of 8
    "cov_task": 0.75,  # row 2 deferred
    "cov_conc": 0.75,  # 2 of 8 concept decisions deferred
}
FIXTURE_LAMBDA = 0.1
# per row: 0; lam + 1 (wrong concept); lam; (lam + 1) + 1 (wrong human, wrong task)
FIXTURE_ZERO_ONE = (0.0 + 1.1 + 0.1 + 2.1) / 4


def single_defer_fixture() -> tuple[SystemPrediction, np.ndarray, np.ndarray]:
    """One sample, one concept predicted correctly, task deferred to a correct human."""
    pred = SystemPrediction(
        concept_outcome=np.array([[1]]),
        concept_resolved=np.array([[1]]),
        concept_probs=np.array([[[0.2, 0.8]]]),
        concept_defer_prob=np.array([[0.1]]),
        task_outcome=np.array([DEFER]),
        task_resolved=np.array([0]),
        task_probs=np.array([[0.5, 0.5]]),
        task_defer_prob=np.array([0.9]),
    )
    return pred, np.array([[1]]), np.array([0])


def metrics_fixture_suite() -> dict:
    pred, c, y = metrics_fixture()
    rep = evaluate(pred, c, y, FIXTURE_LAMBDA).to_dict()
    checks = {k: {"expected": v, "got": rep[k], "ok": rep[k] == v} for k, v in FIXTURE_EXPECTED.items()}
    checks["zero_one"] = {
        "expected": FIXTURE_ZERO_ONE,
        "got": rep["zero_one"],
        "ok": abs(rep["zero_one"] - FIXTURE_ZERO_ONE) < 1e-12,
    }
    spred, sc, sy = single_defer_fixture()
    single = evaluate(spred, sc, sy, 0.1).zero_one
    checks["single_defer_zero_one"] = {"expected": 0.1, "got": single, "ok": abs(single - 0.1) < 1e-12}
    ok = all(v["ok"] for v in checks.values())
    return {"status": "pass" if ok else "fail", "checks": checks}


SUITES = {
    "gradcheck": gradcheck_suite,
    "consistency": consistency_suite,
    "likelihood": likelihood_suite,
    "metrics-fixture": metrics_fixture_suite,
}


def run_suites(names=None) -> dict:
    names = list(SUITES) if not names else list(names)
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise ValueError(f"unknown suite {unknown[0]!r}; valid suites: {', '.join(SUITES)}")
    results = {n: SUITES[n]() for n in names}
    return {
        "status": "pass" if all(r["status"] == "pass" for r in results.values()) else "fail",
        "suites": results,
    }
