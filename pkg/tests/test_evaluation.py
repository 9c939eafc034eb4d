import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pulseform.errors import EmptyInput, InvalidPercentages, LengthMismatch, TooFewSamples, ZeroVarianceTargets
from pulseform.evaluation import (
    BHS_THRESHOLDS,
    EvalReport,
    aami_check,
    bhs_grade,
    bland_altman,
    cumulative_error_pct,
    emit_report,
    error_histogram,
    metrics,
    read_predictions_csv,
    write_predictions_csv,
)

# ---------------------------------------------------------------- metrics


def test_perfect_prediction():
    t = [100.0, 120.0, 110.0]
    assert metrics(t, t) == (1.0, 0.0, 0.0, 0.0, 0.0)


def test_hand_computed_metrics():
    r2, me, mae, rmse, std = metrics([100, 120, 110], [102, 118, 111])
    assert me == pytest.approx(-1 / 3, abs=1e-15)
    assert mae == pytest.approx(5 / 3, abs=1e-15)
    assert rmse == pytest.approx(math.sqrt(3), abs=1e-15)
    assert r2 == pytest.approx(1 - 9 / 200, abs=1e-15)
    assert std == pytest.approx(math.sqrt(3 - 1 / 9), abs=1e-15)


def test_metric_errors():
    with pytest.raises(ZeroVarianceTargets):
        metrics([5, 5, 5], [1, 2, 3])
    with pytest.raises(EmptyInput):
        metrics([], [])
    with pytest.raises(LengthMismatch):
        metrics([1, 2], [1, 2, 3])


def test_metric_identities_on_random_vectors():
    rng = np.random.default_rng(0)
    for _ in range(10_000):
        n = int(rng.integers(2, 30))
        t = rng.normal(120, 15, size=n)
        p = t + rng.normal(rng.normal(0, 3), rng.uniform(0.1, 10), size=n)
        r2, me, mae, rmse, std = metrics(t, p)
        assert rmse >= mae * (1 - 1e-12) and mae >= abs(me) * (1 - 1e-12)
        assert abs(rmse**2 - (me**2 + std**2)) <= 1e-9 * rmse**2
        assert r2 < 1.0


# ---------------------------------------------------------------- cumulative / standards


def test_cumulative_examples():
    assert cumulative_error_pct([1, 2, 3], [1, 2, 3]) == (100.0, 100.0, 100.0)
    t = np.zeros(4)
    assert cumulative_error_pct(t, [1, -6, 12, -20]) == (25.0, 50.0, 75.0)
    assert cumulative_error_pct([0.0], [5.0]) == (0.0, 100.0, 100.0)
    with pytest.raises(EmptyInput):
        cumulative_error_pct([], [])


@pytest.mark.parametrize(
    "args,ok,reasons",
    [
        ((360, 0.138, 1.93), True, []),
        ((360, -0.166, 1.58), True, []),
        ((50, 1, 1), False, ["records"]),
        ((100, 6, 2), False, ["me"]),
        ((100, -1, 8.0), False, ["std"]),
        ((85, 5.0, 9), False, ["records", "me", "std"]),
    ],
)
def test_aami(args, ok, reasons):
    out = aami_check(*args)
    assert out["pass"] is ok and out["reasons"] == reasons


@pytest.mark.parametrize(
    "triple,grade",
    [((96.68, 99.53, 99.93), "A"), ((97.40, 99.54, 99.88), "A"), ((45, 70, 86), "C"), ((30, 50, 70), "Fail"), ((55, 80, 92), "B")],
)
def test_bhs_examples(triple, grade):
    assert bhs_grade(*triple) == grade


def test_bhs_boundaries():
    grades = [g for g, *_ in BHS_THRESHOLDS]
    for i, (g, a, b, c) in enumerate(BHS_THRESHOLDS):
        assert bhs_grade(a, b, c) == g
        below = grades[i + 1] if i + 1 < len(grades) else "Fail"
        assert bhs_grade(np.nextafter(a, 0), b, c) == below
        assert bhs_grade(a, np.nextafter(b, 0), c) == below
        assert bhs_grade(a, b, np.nextafter(c, 0)) == below


def test_bhs_rejects_bad_percentages():
    for bad in ((101, 101, 101), (-1, 50, 60), (70, 60, 90)):
        with pytest.raises(InvalidPercentages):
            bhs_grade(*bad)


_RANK = {"A": 3, "B": 2, "C": 1, "Fail": 0}


@given(st.lists(st.floats(0, 100), min_size=3, max_size=3), st.integers(0, 2), st.floats(0, 30))
def test_bhs_monotone(vals, which, bump):
    base = sorted(vals)
    raised = list(base)
    raised[which] = min(100.0, raised[which] + bump)
    raised = [raised[0], max(raised[0], raised[1]), max(raised[0], raised[1], raised[2])]
    assert _RANK[bhs_grade(*raised)] >= _RANK[bhs_grade(*base)]


# ---------------------------------------------------------------- Bland-Altman


def test_bland_altman_examples():
    t = np.array([10.0, 20.0, 30.0, 40.0])
    ba = bland_altman(t, t)
    assert (ba["mean_diff"], ba["loa_low"], ba["loa_high"]) == (0.0, 0.0, 0.0)
    ba = bland_altman(t, t + [1, -1, 0, 0])
    sd = math.sqrt(2 / 3)
    assert ba["mean_diff"] == 0.0
    assert ba["loa_high"] == pytest.approx(1.96 * sd, abs=1e-12)
    assert ba["loa_high"] == pytest.approx(1.6003, abs=1e-4)
    assert ba["loa_low"] == pytest.approx(-1.6003, abs=1e-4)
    with pytest.raises(TooFewSamples):
        bland_altman([1.0], [2.0])


@given(c=st.floats(-50, 50))
def test_bland_altman_translation(c):
    rng = np.random.default_rng(1)
    t = rng.normal(120, 10, 50)
    p = t + rng.normal(0, 2, 50)
    a, b = bland_altman(t, p), bland_altman(t, p + c)
    for k in ("mean_diff", "loa_low", "loa_high"):
        assert b[k] == pytest.approx(a[k] + c, abs=1e-9)


def test_bland_altman_coverage():
    rng = np.random.default_rng(2)
    t = rng.normal(120, 15, 10_000)
    p = t + rng.normal(0.26, 1.97, 10_000)
    ba = bland_altman(t, p)
    d = p - t
    inside = np.mean((d >= ba["loa_low"]) & (d <= ba["loa_high"]))
    assert abs(inside - 0.95) <= 0.01


# ---------------------------------------------------------------- reports and files


def _report(n=40, seed=3):
    rng = np.random.default_rng(seed)
    t = np.column_stack([rng.uniform(90, 160, n), rng.uniform(60, 100, n)])
    p = t + rng.normal(0, 3, size=t.shape)
    return EvalReport.build(t, p, records=12, sample_ids=np.arange(n))


def test_emit_report_round_trip(tmp_path):
    rep = _report()
    emit_report(rep, tmp_path)
    doc = json.loads((tmp_path / "report.json").read_text())
    assert doc["schema"] == "pf-report-v1"
    for ch in ("sbp", "dbp"):
        assert doc["channels"][ch] == rep.channels[ch].to_json()
        hist = list(csv.DictReader(open(tmp_path / f"error_hist_{ch}.csv")))
        assert sum(int(r["count"]) for r in hist) == rep.n
        assert all(float(r["bin_high"]) - float(r["bin_low"]) == pytest.approx(0.5) for r in hist)
        for name in ("scatter", "residuals", "bland_altman"):
            rows = list(csv.reader(open(tmp_path / f"{name}_{ch}.csv")))
            assert len(rows) == rep.n + 1


def test_empty_report_writes_nothing(tmp_path):
    with pytest.raises(EmptyInput):
        emit_report(EvalReport.build(np.empty((0, 2)), np.empty((0, 2)), 0), tmp_path / "out")
    assert not (tmp_path / "out").exists()


def test_histogram_bins_cover_all_errors():
    e = np.random.default_rng(4).normal(0, 4, 1000)
    rows = error_histogram(e)
    assert sum(c for _, _, c in rows) == 1000
    assert rows[0][0] <= e.min() and rows[-1][1] > e.max()


def test_predictions_csv_round_trip(tmp_path):
    rep = _report(10)
    write_predictions_csv(tmp_path / "p.csv", rep.sample_ids, rep.targets, rep.predictions)
    ids, t, p = read_predictions_csv(tmp_path / "p.csv")
    assert np.array_equal(ids, rep.sample_ids)
    assert np.array_equal(t, rep.targets) and np.array_equal(p, rep.predictions)
