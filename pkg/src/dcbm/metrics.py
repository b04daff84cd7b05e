"""Accuracy, coverage and the multivariate zero-one objective."""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass

import numpy as np

from .losses import check_lambda
from .model import SystemPrediction

SWEEP_COLUMNS = ["variant", "psi", "lambda", "seed", "acc_task", "acc_conc", "cov_task", "cov_conc", "zero_one"]
METRICS = ["acc_task", "acc_conc", "cov_task", "cov_conc", "zero_one"]


@dataclass(frozen=True)
class EvalReport:
    acc_task: float
    acc_conc: float | None
    cov_task: float
    cov_conc: float | None
    zero_one: float
    n: int
    lam: float

    def to_dict(self) -> dict:
        return asdict(self)


def _head_zero_one(outcome_deferred, model_label, resolved, truth, lam) -> np.ndarray:
    wrong_model = (~outcome_deferred) & (model_label != truth)
    defer_cost = outcome_deferred * (lam + (resolved != truth))
    return wrong_model + defer_cost


def zero_one_per_sample(pred: SystemPrediction, c, y, lam: float) -> np.ndarray:
    """Sum over heads of [m != defer][m != k] + [m == defer](lam + [h != k])."""
    total = _head_zero_one(pred.task_deferred, pred.task_outcome, pred.task_resolved, y, lam).astype(float)
    if pred.has_concepts:
        per = _head_zero_one(pred.concept_deferred, pred.concept_outcome, pred.concept_resolved, c, lam)
        total = total + per.sum(axis=1)
    return total


def evaluate(pred: SystemPrediction, c, y, lam: float) -> EvalReport:
    lam = check_lambda(lam)
    y = np.asarray(y, dtype=np.int64)
    n = len(pred)
    if n < 1:
        raise ValueError("cannot evaluate an empty prediction set")
    if y.shape != (n,):
        raise ValueError(f"expected {n} task labels, got {y.shape[0] if y.ndim else 0}")
    acc_conc = cov_conc = None
    if pred.has_concepts:
        c = np.asarray(c, dtype=np.int64)
        if c.shape != pred.concept_resolved.shape:
            raise ValueError(f"concept labels shape {c.shape} does not match predictions {pred.concept_resolved.shape}")
        acc_conc = float(np.mean(pred.concept_resolved == c))
        cov_conc = float(np.mean(np.mean(~pred.concept_deferred, axis=0)))
    return EvalReport(
        acc_task=float(np.mean(pred.task_resolved == y)),
        acc_conc=acc_conc,
        cov_task=float(np.mean(~pred.task_deferred)),
        cov_conc=cov_conc,
        zero_one=float(np.mean(zero_one_per_sample(pred, c, y, lam))),
        n=n,
        lam=lam,
    )


def merge_reports(reports: list[EvalReport]) -> EvalReport:
    """Sample-weighted merge of reports computed on disjoint shards."""
    if not reports:
        raise ValueError("nothing to merge")
    lams = {r.lam for r in reports}
    if len(lams) != 1:
        raise ValueError("reports were computed with different lambdas")
    n = sum(r.n for r in reports)

    def avg(name):
        vals = [getattr(r, name) for r in reports]
        if any(v is None for v in vals):
            return None
        return sum(v * r.n for v, r in zip(vals, reports)) / n

    return EvalReport(
        avg("acc_task"), avg("acc_conc"), avg("cov_task"), avg("cov_conc"), avg("zero_one"), n, lams.pop()
    )


def fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return str(int(value))
    return f"{float(value):.9g}"


def _write_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def sweep_table(results: list[dict]) -> str:
    """CSV text, one row per result dict with keys variant, psi, lambda, seed, report."""
    ordered = sorted(results, key=lambda r: (r["lambda"], r["variant"], r["psi"], r["seed"]))
    rows = []
    for r in ordered:
        rep = r["report"]
        rep = rep if isinstance(rep, dict) else rep.to_dict()
        rows.append([r["variant"], r["psi"], fmt(r["lambda"]), fmt(int(r["seed"]))] + [fmt(rep[m]) for m in METRICS])
    return _write_csv(SWEEP_COLUMNS, rows)


def aggregate_table(results: list[dict]) -> str:
    """Mean and population std over seeds per (variant, psi, lambda)."""
    groups: dict[tuple, list[dict]] = {}
    for r in results:
        rep = r["report"] if isinstance(r["report"], dict) else r["report"].to_dict()
        groups.setdefault((r["lambda"], r["variant"], r["psi"]), []).append(rep)
    header = ["variant", "psi", "lambda", "n_seeds"]
    for m in METRICS:
        header += [f"{m}_mean", f"{m}_std"]
    rows = []
    for (lam, variant, psi), reps in sorted(groups.items()):
        row = [variant, psi, fmt(lam), str(len(reps))]
        for m in METRICS:
            vals = [rep[m] for rep in reps]
            if any(v is None for v in vals):
                row += ["", ""]
            else:
                arr = np.asarray(vals, dtype=np.float64)
                if np.all(arr == arr[0]):
                    row += [fmt(arr[0]), fmt(0.0)]
                else:
                    row += [fmt(arr.mean()), fmt(arr.std())]
        rows.append(row)
    return _write_csv(header, rows)
