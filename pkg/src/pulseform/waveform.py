"""Waveform records: data model, CSV + JSON sidecar storage, synthetic PPG/ABP.

A record ``r`` on disk is two files in one directory::

    <record_id>.csv        header ``t,ppg[,abp]``
    <record_id>.meta.json  {record_id, subject_id, fs, start_time[, segments]}

``segments`` is only present on preprocessed records; it lists the
``[start, end)`` sample ranges of the concatenated clean segments so later
stages never treat a cleaning gap as continuous signal.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import (
    InvalidConfig,
    IoFailure,
    LengthMismatch,
    MalformedFile,
    NonFiniteSample,
    ValidationError,
)

DEFAULT_FS = 62.4

# pulse geometry, as fractions of one cardiac period
SYSTOLIC_CENTER = 0.30
DICROTIC_CENTER = 0.65
SYSTOLIC_WIDTH = 0.10
DICROTIC_WIDTH = 0.08


@dataclass(frozen=True, eq=False)
class Record:
    record_id: str
    subject_id: str
    ppg: np.ndarray
    fs: float = DEFAULT_FS
    abp: Optional[np.ndarray] = None
    start_time: Optional[str] = None
    segments: Optional[tuple] = None

    def __post_init__(self):
        ppg = np.array(self.ppg, dtype=np.float64)
        ppg.setflags(write=False)
        object.__setattr__(self, "ppg", ppg)
        if self.abp is not None:
            abp = np.array(self.abp, dtype=np.float64)
            abp.setflags(write=False)
            object.__setattr__(self, "abp", abp)
        if self.segments is not None:
            object.__setattr__(self, "segments", tuple((int(s), int(e)) for s, e in self.segments))
        validate_record(self)

    def __len__(self):
        return self.ppg.shape[0]

    def __eq__(self, other):
        if not isinstance(other, Record):
            return NotImplemented
        same_abp = (self.abp is None and other.abp is None) or (
            self.abp is not None and other.abp is not None and np.array_equal(self.abp, other.abp)
        )
        return (
            self.record_id == other.record_id
            and self.subject_id == other.subject_id
            and self.fs == other.fs
            and self.start_time == other.start_time
            and self.segments == other.segments
            and np.array_equal(self.ppg, other.ppg)
            and same_abp
        )

    @property
    def duration_s(self):
        return len(self) / self.fs

    def segment_bounds(self):
        """Clean segments as ``[(start, end), ...]``; the whole record if unset."""
        if self.segments is None:
            return [(0, len(self))]
        return list(self.segments)


def validate_record(record):
    if not (record.fs > 0 and math.isfinite(record.fs)):
        raise ValidationError(f"fs must be positive, got {record.fs}")
    if record.ppg.ndim != 1 or record.ppg.size == 0:
        raise ValidationError("ppg must be a non-empty 1-D sequence")
    if not np.all(np.isfinite(record.ppg)):
        raise NonFiniteSample("ppg contains NaN/Inf", record_id=record.record_id)
    if record.abp is not None:
        if record.abp.shape != record.ppg.shape:
            raise LengthMismatch(
                f"abp has {record.abp.size} samples, ppg has {record.ppg.size}",
                record_id=record.record_id,
            )
        if not np.all(np.isfinite(record.abp)):
            raise NonFiniteSample("abp contains NaN/Inf", record_id=record.record_id)
    if record.segments is not None:
        prev = 0
        for s, e in record.segments:
            if not (prev <= s < e <= record.ppg.size):
                raise ValidationError(f"bad segment bounds {record.segments}")
            prev = e


# ---------------------------------------------------------------- file format


def record_paths(path):
    """Return ``(csv_path, meta_path)`` for a record path.

    ``path`` may name the CSV, the sidecar, or the bare ``<dir>/<record_id>`` stem.
    """
    p = Path(path)
    name = p.name
    if name.endswith(".meta.json"):
        stem = name[: -len(".meta.json")]
    elif name.endswith(".csv"):
        stem = name[: -len(".csv")]
    else:
        stem = name
    return p.with_name(stem + ".csv"), p.with_name(stem + ".meta.json")


def write_record(record, path):
    validate_record(record)
    csv_path, meta_path = record_paths(path)
    n = len(record)
    t = np.arange(n, dtype=np.float64) / record.fs
    cols = [t, record.ppg] if record.abp is None else [t, record.ppg, record.abp]
    header = "t,ppg" if record.abp is None else "t,ppg,abp"
    # repr() round-trips float64 exactly
    lines = [header]
    lines.extend(",".join(repr(float(v)) for v in row) for row in zip(*cols))
    meta = {
        "record_id": record.record_id,
        "subject_id": record.subject_id,
        "fs": record.fs,
        "start_time": record.start_time,
    }
    if record.segments is not None:
        meta["segments"] = [list(s) for s in record.segments]
    try:
        csv_path.parent.mkdir(parents=True, exist_ok=True)
        with open(csv_path, "w", newline="\n") as fh:
            fh.write("\n".join(lines))
            fh.write("\n")
        with open(meta_path, "w", newline="\n") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise IoFailure(str(exc), path=str(csv_path)) from exc


def read_record(path):
    csv_path, meta_path = record_paths(path)
    if not csv_path.exists():
        raise IoFailure(f"no such record file: {csv_path}", path=str(csv_path))
    if not meta_path.exists():
        raise MalformedFile(f"missing sidecar {meta_path}", path=str(meta_path))
    try:
        with open(meta_path) as fh:
            meta = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise MalformedFile(f"unreadable sidecar: {exc}", path=str(meta_path)) from exc
    for key in ("record_id", "subject_id", "fs"):
        if key not in meta:
            raise MalformedFile(f"sidecar lacks '{key}'", path=str(meta_path))
    fs = float(meta["fs"])

    with open(csv_path) as fh:
        header = fh.readline().strip()
        body = fh.read()
    if header not in ("t,ppg", "t,ppg,abp"):
        raise MalformedFile(f"unexpected header {header!r}", path=str(csv_path))
    ncol = header.count(",") + 1
    t, ppg, abp = [], [], []
    for lineno, line in enumerate(body.split("\n"), start=2):
        if not line:
            continue
        parts = line.split(",")
        if len(parts) == ncol - 1 and ncol == 3:
            raise LengthMismatch(f"line {lineno}: abp column missing", path=str(csv_path))
        if len(parts) != ncol:
            raise MalformedFile(f"line {lineno}: expected {ncol} columns, got {len(parts)}", path=str(csv_path))
        try:
            vals = [float(v) for v in parts]
        except ValueError as exc:
            raise MalformedFile(f"line {lineno}: {exc}", path=str(csv_path)) from exc
        t.append(vals[0])
        ppg.append(vals[1])
        if ncol == 3:
            abp.append(vals[2])
    if not ppg:
        raise MalformedFile("record has no samples", path=str(csv_path))
    t = np.asarray(t)
    ppg = np.asarray(ppg)
    if not (np.all(np.isfinite(ppg)) and np.all(np.isfinite(t)) and np.all(np.isfinite(abp))):
        raise NonFiniteSample("non-finite sample", path=str(csv_path))
    if t.size > 1:
        step = np.diff(t)
        if np.any(np.abs(step - 1.0 / fs) > 1e-9):
            raise MalformedFile("time column is not uniform at 1/fs", path=str(csv_path))

    return Record(
        record_id=meta["record_id"],
        subject_id=meta["subject_id"],
        fs=fs,
        ppg=ppg,
        abp=np.asarray(abp) if ncol == 3 else None,
        start_time=meta.get("start_time"),
        segments=meta.get("segments"),
    )


# ---------------------------------------------------------------- synthesis


@dataclass(frozen=True)
class SynthConfig:
    duration_s: float = 60.0
    heart_rate_bpm: float = 60.0
    sbp_mmHg: float = 120.0
    dbp_mmHg: float = 80.0
    notch_depth: float = 0.4
    noise_std: float = 0.0
    baseline_drift_amp: float = 0.0
    seed: int = 0
    fs: float = DEFAULT_FS
    drift_freq_hz: float = 0.15
    record_id: str = "synth"
    subject_id: str = "synth"

    def validate(self):
        if not 30.0 <= self.heart_rate_bpm <= 200.0:
            raise InvalidConfig(f"heart_rate_bpm {self.heart_rate_bpm} outside [30, 200]")
        if not self.sbp_mmHg > self.dbp_mmHg > 0:
            raise InvalidConfig("need sbp_mmHg > dbp_mmHg > 0")
        if not 0.0 <= self.notch_depth <= 1.0:
            raise InvalidConfig("notch_depth must lie in [0, 1]")
        if self.noise_std < 0 or self.baseline_drift_amp < 0:
            raise InvalidConfig("noise_std and baseline_drift_amp must be >= 0")
        if self.fs <= 0:
            raise InvalidConfig("fs must be positive")
        period = 60.0 / self.heart_rate_bpm
        if self.duration_s < 2 * period or int(self.duration_s * self.fs) < 2 * period * self.fs:
            raise InvalidConfig("duration must cover at least two cardiac cycles")

    @property
    def period_s(self):
        return 60.0 / self.heart_rate_bpm


def pulse_shape(t, period, notch_depth):
    """Noiseless periodic two-lobe pulse train evaluated at times ``t`` (seconds).

    Lobes of neighbouring periods are included so the train is smooth across
    period boundaries.
    """
    t = np.asarray(t, dtype=np.float64)
    phase = t / period
    k = np.floor(phase)
    out = np.zeros_like(phase)
    for shift in (-1.0, 0.0, 1.0):
        u = phase - (k + shift)
        out += np.exp(-0.5 * ((u - SYSTOLIC_CENTER) / SYSTOLIC_WIDTH) ** 2)
        out += notch_depth * np.exp(-0.5 * ((u - DICROTIC_CENTER) / DICROTIC_WIDTH) ** 2)
    return out


def pulse_extremes(period, notch_depth, grid=20001):
    """Max and min of the continuous pulse over one period (dense evaluation)."""
    t = np.linspace(0.0, period, grid)
    v = pulse_shape(t, period, notch_depth)
    i_max = int(np.argmax(v))
    i_min = int(np.argmin(v))
    vmax = _refine_extremum(t[i_max], period, notch_depth, sign=1.0, step=t[1] - t[0])
    vmin = _refine_extremum(t[i_min], period, notch_depth, sign=-1.0, step=t[1] - t[0])
    return vmax, vmin


def _refine_extremum(t0, period, notch_depth, sign, step):
    # golden-section polish around a grid extremum
    lo, hi = t0 - step, t0 + step
    g = (math.sqrt(5) - 1) / 2
    for _ in range(60):
        c = hi - g * (hi - lo)
        d = lo + g * (hi - lo)
        fc = sign * pulse_shape(np.array([c]), period, notch_depth)[0]
        fd = sign * pulse_shape(np.array([d]), period, notch_depth)[0]
        if fc > fd:
            hi = d
        else:
            lo = c
    return float(pulse_shape(np.array([(lo + hi) / 2]), period, notch_depth)[0])


def synthesize(config):
    """Generate a synthetic PPG + ABP record. Deterministic in ``config.seed``."""
    config.validate()
    fs = config.fs
    n = int(round(config.duration_s * fs))
    t = np.arange(n, dtype=np.float64) / fs
    period = config.period_s
    clean = pulse_shape(t, period, config.notch_depth)

    rng = np.random.default_rng(config.seed)
    drift_phase = rng.uniform(0.0, 2.0 * np.pi)
    noise = rng.normal(0.0, config.noise_std, size=n) if config.noise_std > 0 else np.zeros(n)
    drift = config.baseline_drift_amp * np.sin(2.0 * np.pi * config.drift_freq_hz * t + drift_phase)
    ppg = clean + noise + drift

    vmax, vmin = pulse_extremes(period, config.notch_depth)
    scale = (config.sbp_mmHg - config.dbp_mmHg) / (vmax - vmin)
    abp = config.dbp_mmHg + scale * (clean - vmin)
    return Record(
        record_id=config.record_id,
        subject_id=config.subject_id,
        fs=fs,
        ppg=ppg,
        abp=abp,
        start_time=None,
    )


def cohort_configs(n_records, seed, duration_s=960.0, noise_std=0.02, drift=0.05, fs=DEFAULT_FS, hr_jitter_bpm=1.0):
    """Configs for a synthetic cohort whose pulse morphology tracks blood pressure.

    SBP is drawn from [90, 160] and DBP from [60, 100] (kept at least 20 mmHg
    below SBP). Heart rate rises with SBP and the dicrotic wave deepens with
    DBP, so the cohort carries a learnable PPG-to-BP relation. ``hr_jitter_bpm``
    is the spread of heart rate around that trend.
    """
    rng = np.random.default_rng(seed)
    configs = []
    for i in range(n_records):
        sbp = float(rng.uniform(90.0, 160.0))
        dbp = float(rng.uniform(60.0, min(100.0, sbp - 20.0)))
        hr = 55.0 + 0.5 * (sbp - 90.0) + float(rng.normal(0.0, hr_jitter_bpm))
        notch = 0.25 + 0.5 * (dbp - 60.0) / 40.0
        configs.append(
            SynthConfig(
                duration_s=duration_s,
                heart_rate_bpm=float(np.clip(hr, 40.0, 150.0)),
                sbp_mmHg=sbp,
                dbp_mmHg=dbp,
                notch_depth=float(np.clip(notch, 0.0, 1.0)),
                noise_std=noise_std,
                baseline_drift_amp=drift,
                seed=int(rng.integers(0, 2**63 - 1)),
                fs=fs,
                record_id=f"synth{i:03d}",
                subject_id=f"S{i:03d}",
            )
        )
    return configs
