import csv
import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcbm.metrics import SWEEP_COLUMNS, EvalReport, aggregate_table, evaluate, fmt, merge_reports, sweep_table, zero_one_per_sample
from dcbm.model import DEFER, SystemPrediction, predict_batch
from dcbm.suites import metrics_fixture, single_defer_fixture


def test_fixture_counts():
    pred, c, y = metrics_fixture()
    rep = evaluate(pred, c, y, 0.1)
    assert (rep.acc_task, rep.acc_conc, rep.cov_task, rep.cov_conc) == (0.75, 0.75, 0.75, 0.75)
    assert np.allclose(zero_one_per_sample(pred, c, y, 0.1), [0.0, 1.1, 0.1, 2.1])


def test_single_defer_with_correct_human():
    pred, c, y = single_defer_fixture()
    assert evaluate(pred, c, y, 0.1).zero_one == pytest.approx(0.1, abs=1e-15)


def perfect_prediction(c, y) -> SystemPrediction:
    n, k = c.shape
    return SystemPrediction(c, c, np.zeros((n, k, 2)), np.zeros((n, k)), y, y, np.zeros((n, 2)), np.zeros(n))


def test_all_correct_no_deferral():
    c = np.array([[0, 1], [1, 1]])
    y = np.array([1, 0])
    rep = evaluate(perfect_prediction(c, y), c, y, 0.4)
    assert (rep.acc_task, rep.acc_conc, rep.cov_task, rep.cov_conc, rep.zero_one) == (1, 1, 1, 1, 0)


def test_no_concept_variants_report_absent_fields():
    pred, c, y = single_defer_fixture()
    bare = SystemPrediction(
        np.zeros((1, 0), dtype=int), np.zeros((1, 0), dtype=int), np.zeros((1, 0, 0)), np.zeros((1, 0)),
        pred.task_outcome, pred.task_resolved, pred.task_probs, pred.task_defer_prob,
    )
    rep = evaluate(bare, np.zeros((1, 0)), y, 0.1)
    assert rep.acc_conc is None and rep.cov_conc is None


def test_length_mismatch():
    pred, c, y = metrics_fixture()
    with pytest.raises(ValueError):
        evaluate(pred, c, y[:3], 0.1)
    with pytest.raises(ValueError):
        evaluate(pred, c[:, :1], y, 0.1)


def test_cbm_full_coverage(small_data, small_dcbm):
    from dcbm.train import TrainConfig, train_dcbm_independent

    train, test = small_data
    cbm, _ = train_dcbm_independent("cbm", train, TrainConfig(epochs=3, hidden=(8,)))
    rep = evaluate(predict_batch(cbm, test.x), test.c, test.y, 0.2)
    assert rep.cov_task == 1 and rep.cov_conc == 1


def test_oracle_deferrals_cost_exactly_lambda(small_data, small_dcbm):
    _, test = small_data
    pred = predict_batch(small_dcbm, test.x, test.hc, test.hy)
    lam = 0.1
    per = zero_one_per_sample(pred, test.c, test.y, lam)
    wrong = (~pred.concept_deferred & (pred.concept_outcome != test.c)).sum(axis=1)
    wrong = wrong + (~pred.task_deferred & (pred.task_outcome != test.y))
    n_def = pred.concept_deferred.sum(axis=1) + pred.task_deferred
    assert np.allclose(per, wrong + lam * n_def)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    n = 12
    c = rng.integers(0, 2, (n, 3))
    y = rng.integers(0, 2, n)
    co = np.where(rng.random((n, 3)) < 0.3, DEFER, rng.integers(0, 2, (n, 3)))
    cr = np.where(co == DEFER, rng.integers(0, 2, (n, 3)), co)
    to = np.where(rng.random(n) < 0.3, DEFER, rng.integers(0, 2, n))
    tr = np.where(to == DEFER, rng.integers(0, 2, n), to)
    pred = SystemPrediction(co, cr, np.zeros((n, 3, 2)), np.zeros((n, 3)), to, tr, np.zeros((n, 2)), np.zeros(n))
    perm = rng.permutation(n)
    a = evaluate(pred, c, y, 0.3)
    b = evaluate(pred.take(perm), c[perm], y[perm], 0.3)
    for f in ("acc_task", "acc_conc", "cov_task", "cov_conc", "zero_one"):
        assert getattr(a, f) == pytest.approx(getattr(b, f), abs=1e-12)
    halves = merge_reports([evaluate(pred.take(np.arange(5)), c[:5], y[:5], 0.3),
                            evaluate(pred.take(np.arange(5, n)), c[5:], y[5:], 0.3)])
    for f in ("acc_task", "acc_conc", "cov_task", "cov_conc", "zero_one"):
        assert getattr(halves, f) == pytest.approx(getattr(a, f), abs=1e-12)


def test_merge_rejects_mixed_lambdas():
    r = EvalReport(1, 1, 1, 1, 0, 1, 0.1)
    with pytest.raises(ValueError):
        merge_reports([r, EvalReport(1, 1, 1, 1, 0, 1, 0.2)])


def row(variant, lam, seed, acc=0.5):
    return {"variant": variant, "psi": "ce", "lambda": lam, "seed": seed,
            "report": EvalReport(acc, 0.9, 1.0, 0.5, 0.25, 10, lam)}


def test_sweep_table_sorted_and_formatted():
    text = sweep_table([row("dcbm", 0.3, 0), row("dcbm", 0.05, 1), row("cbm", 0.05, 0)])
    rows = list(csv.reader(io.StringIO(text)))
    assert rows[0] == SWEEP_COLUMNS
    assert [(r[0], r[2]) for r in rows[1:]] == [("cbm", "0.05"), ("dcbm", "0.05"), ("dcbm", "0.3")]
    single = list(csv.reader(io.StringIO(sweep_table([row("cbm", 0.1, 0, acc=2 / 3)]))))
    assert len(single) == 2 and single[1][4] == "0.666666667"


def test_aggregate_identical_rows_have_zero_std():
    text = aggregate_table([row("dcbm", 0.1, s, acc=0.1 + 0.2) for s in range(3)])
    rows = list(csv.DictReader(io.StringIO(text)))
    assert rows[0]["acc_task_std"] == "0" and rows[0]["n_seeds"] == "3"


def test_aggregate_population_std():
    text = aggregate_table([row("dcbm", 0.1, 0, acc=0.4), row("dcbm", 0.1, 1, acc=0.6)])
    r = next(csv.DictReader(io.StringIO(text)))
    assert float(r["acc_task_mean"]) == pytest.approx(0.5) and float(r["acc_task_std"]) == pytest.approx(0.1)


def test_fmt():
    assert fmt(None) == "" and fmt(3) == "3" and fmt(np.int64(2)) == "2"
    assert fmt(1 / 3) == "0.333333333"
