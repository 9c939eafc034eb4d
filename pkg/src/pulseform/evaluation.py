"""Accuracy metrics, AAMI / BHS standards checks and Bland-Altman agreement.

Sign conventions: errors are ``T - P`` (target minus prediction) for ME and
the cumulative percentages; Bland-Altman differences are ``P - T``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    EmptyInput,
    InvalidPercentages,
    IoFailure,
    LengthMismatch,
    MalformedFile,
    TooFewSamples,
    ZeroVarianceTargets,
)

REPORT_SCHEMA = "pf-report-v1"
CHANNELS = ("sbp", "dbp")
HIST_BIN_MMHG = 0.5

# (grade, cum5, cum10, cum15) minimum percentages, best grade first
BHS_THRESHOLDS = (
    ("A", 60.0, 85.0, 95.0),
    ("B", 50.0, 75.0, 90.0),
    ("C", 40.0, 65.0, 85.0),
)


def _pair(targets, predictions):
    t = np.asarray(targets, dtype=np.float64).ravel()
    p = np.asarray(predictions, dtype=np.float64).ravel()
    if t.shape != p.shape:
        raise LengthMismatch(f"{t.size} targets vs {p.size} predictions")
    if t.size == 0:
        raise EmptyInput("no target/prediction pairs")
    return t, p


def metrics(targets, predictions):
    """Return ``(r2, me, mae, rmse, std)`` in mmHg (r2 dimensionless).

    ``std`` is the population standard deviation of ``T - P``, so
    ``rmse**2 == me**2 + std**2``.
    """
    t, p = _pair(targets, predictions)
    err = t - p
    spread = np.sum((t - t.mean()) ** 2)
    if spread == 0:
        raise ZeroVarianceTargets("R^2 is undefined for constant targets")
    me = float(np.mean(err))
    mae = float(np.mean(np.abs(err)))
    rmse = float(math.sqrt(np.mean(err * err)))
    std = float(np.std(err))
    r2 = float(1.0 - np.sum(err * err) / spread)
    return r2, me, mae, rmse, std


def cumulative_error_pct(targets, predictions, thresholds=(5.0, 10.0, 15.0)):
    """Percent of absolute errors strictly below each threshold."""
    t, p = _pair(targets, predictions)
    abs_err = np.abs(t - p)
    return tuple(float(100.0 * np.count_nonzero(abs_err < th) / abs_err.size) for th in thresholds)


def aami_check(records, me, std):
    """AAMI pass/fail: more than 85 records, |ME| < 5 mmHg and SD < 8 mmHg."""
    reasons = []
    if not records > 85:
        reasons.append("records")
    if not abs(me) < 5.0:
        reasons.append("me")
    if not std < 8.0:
        reasons.append("std")
    return {"records": int(records), "pass": not reasons, "reasons": reasons}


def bhs_grade(cum5, cum10, cum15):
    """Best BHS grade whose three minimum percentages are all met."""
    vals = (cum5, cum10, cum15)
    if any(not 0.0 <= v <= 100.0 for v in vals):
        raise InvalidPercentages(f"percentages must lie in [0, 100], got {vals}")
    if not cum5 <= cum10 <= cum15:
        raise InvalidPercentages(f"cumulative percentages must not decrease, got {vals}")
    for grade, a, b, c in BHS_THRESHOLDS:
        if cum5 >= a and cum10 >= b and cum15 >= c:
            return grade
    return "Fail"


def bland_altman(targets, predictions):
    """Mean difference and 95% limits of agreement of ``d = P - T`` (sample SD)."""
    t, p = _pair(targets, predictions)
    if t.size < 2:
        raise TooFewSamples("Bland-Altman needs at least 2 pairs")
    d = p - t
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    return {
        "mean_diff": mean,
        "loa_low": mean - 1.96 * sd,
        "loa_high": mean + 1.96 * sd,
        "pairs": np.column_stack([(t + p) / 2.0, d]),
    }


def error_histogram(errors, width=HIST_BIN_MMHG):
    """``(bin_low, bin_high, count)`` rows of fixed ``width`` covering every error."""
    e = np.asarray(errors, dtype=np.float64).ravel()
    if e.size == 0:
        raise EmptyInput("no errors to bin")
    lo = math.floor(e.min() / width)
    idx = np.floor(e / width).astype(np.int64) - lo
    counts = np.bincount(idx)
    return [((lo + i) * width, (lo + i + 1) * width, int(c)) for i, c in enumerate(counts)]


@dataclass
class ChannelReport:
    r2: float
    me_mmHg: float
    mae_mmHg: float
    rmse_mmHg: float
    std_mmHg: float
    cum_pct_5: float
    cum_pct_10: float
    cum_pct_15: float
    aami: dict
    bhs_grade: str
    bland_altman: dict

    def to_json(self):
        return {
            "r2": self.r2,
            "me_mmHg": self.me_mmHg,
            "mae_mmHg": self.mae_mmHg,
            "rmse_mmHg": self.rmse_mmHg,
            "std_mmHg": self.std_mmHg,
            "cum_pct_5": self.cum_pct_5,
            "cum_pct_10": self.cum_pct_10,
            "cum_pct_15": self.cum_pct_15,
            "aami": dict(self.aami),
            "bhs_grade": self.bhs_grade,
            "bland_altman": dict(self.bland_altman),
        }


def channel_report(targets, predictions, records):
    t, p = _pair(targets, predictions)
    r2, me, mae, rmse, std = metrics(t, p)
    c5, c10, c15 = cumulative_error_pct(t, p)
    ba = bland_altman(t, p)
    return ChannelReport(
        r2=r2,
        me_mmHg=me,
        mae_mmHg=mae,
        rmse_mmHg=rmse,
        std_mmHg=std,
        cum_pct_5=c5,
        cum_pct_10=c10,
        cum_pct_15=c15,
        aami=aami_check(records, me, std),
        bhs_grade=bhs_grade(c5, c10, c15),
        bland_altman={k: ba[k] for k in ("mean_diff", "loa_low", "loa_high")},
    )


@dataclass
class EvalReport:
    """Per-channel accuracy report plus the raw pairs needed for plots."""

    targets: np.ndarray  # (n, 2) true (SBP, DBP)
    predictions: np.ndarray  # (n, 2)
    records: int
    channels: dict = field(default_factory=dict)
    sample_ids: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    @classmethod
    def build(cls, targets, predictions, records, sample_ids=None, extra=None):
        t = np.asarray(targets, dtype=np.float64).reshape(-1, 2)
        p = np.asarray(predictions, dtype=np.float64).reshape(-1, 2)
        if t.shape != p.shape:
            raise LengthMismatch(f"{t.shape[0]} targets vs {p.shape[0]} predictions")
        if t.shape[0] == 0:
            raise EmptyInput("no predictions to evaluate")
        chans = {ch: channel_report(t[:, i], p[:, i], records) for i, ch in enumerate(CHANNELS)}
        ids = None if sample_ids is None else np.asarray(sample_ids, dtype=np.int64)
        return cls(t, p, int(records), chans, ids, dict(extra or {}))

    @property
    def n(self):
        return int(self.targets.shape[0])

    def to_json(self):
        doc = {
            "schema": REPORT_SCHEMA,
            "n": self.n,
            "records": self.records,
            "channels": {ch: rep.to_json() for ch, rep in self.channels.items()},
        }
        if self.extra:
            doc["extra"] = self.extra
        return doc


def _write_csv(path, header, rows):
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(v if isinstance(v, str) else repr(float(v)) if isinstance(v, float) else str(v)
                              for v in row) + "\n")


def emit_report(report, out_dir):
    """Write report.json and the per-channel plot-data CSVs into ``out_dir``."""
    if report is None or report.n == 0:
        raise EmptyInput("empty report")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "report.json", "w", newline="\n") as fh:
            json.dump(report.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        for i, ch in enumerate(CHANNELS):
            t = report.targets[:, i]
            p = report.predictions[:, i]
            err = t - p
            _write_csv(out / f"error_hist_{ch}.csv", ("bin_low", "bin_high", "count"), error_histogram(err))
            _write_csv(out / f"scatter_{ch}.csv", ("true", "predicted"), zip(t.tolist(), p.tolist()))
            _write_csv(
                out / f"residuals_{ch}.csv", ("true", "predicted", "residual"), zip(t.tolist(), p.tolist(), err.tolist())
            )
            pairs = bland_altman(t, p)["pairs"]
            _write_csv(out / f"bland_altman_{ch}.csv", ("mean", "diff"), pairs.tolist())
    except OSError as exc:
        raise IoFailure(str(exc), path=str(out)) from exc


def read_predictions_csv(path):
    """Parse ``sample_id,true_sbp,true_dbp,pred_sbp,pred_dbp`` into arrays."""
    path = Path(path)
    if not path.exists():
        raise IoFailure(f"no such predictions file: {path}", path=str(path))
    lines = path.read_text().splitlines()
    expected = "sample_id,true_sbp,true_dbp,pred_sbp,pred_dbp"
    if not lines or lines[0].strip() != expected:
        raise MalformedFile(f"predictions header must be {expected!r}", path=str(path))
    ids, t, p = [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 5:
            raise MalformedFile(f"line {lineno}: expected 5 columns", path=str(path))
        try:
            ids.append(int(parts[0]))
            vals = [float(v) for v in parts[1:]]
        except ValueError as exc:
            raise MalformedFile(f"line {lineno}: {exc}", path=str(path)) from exc
        t.append(vals[:2])
        p.append(vals[2:])
    return np.array(ids, dtype=np.int64), np.array(t).reshape(-1, 2), np.array(p).reshape(-1, 2)


def write_predictions_csv(path, sample_ids, targets, predictions):
    rows = (
        (str(int(i)), *(float(v) for v in tt), *(float(v) for v in pp))
        for i, tt, pp in zip(sample_ids, np.asarray(targets), np.asarray(predictions))
    )
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        _write_csv(path, ("sample_id", "true_sbp", "true_dbp", "pred_sbp", "pred_dbp"), rows)
    except OSError as exc:
        raise IoFailure(str(exc), path=str(path)) from exc
