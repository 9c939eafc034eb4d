"""Cycle isolation on the preprocessed PPG and per-cycle ABP labelling."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import kernels
from .errors import DegenerateCycle, InvalidConfig, LengthMismatch, SignalTooShort

MIN_CYCLE_S = 0.3
MAX_CYCLE_S = 2.0


@dataclass(frozen=True)
class Cycle:
    start_idx: int
    peak_idx: int
    end_idx: int
    sd_peak_idx: int
    sd_foot_idx: int
    notch_idx: Optional[int] = None
    frame_id: int = 0

    def __post_init__(self):
        if not self.start_idx < self.peak_idx < self.end_idx:
            raise ValueError(f"bad cycle ordering {self}")
        if self.notch_idx is not None and not self.peak_idx < self.notch_idx < self.end_idx:
            raise ValueError(f"notch outside (peak, end): {self}")

    def shifted(self, offset):
        return Cycle(
            start_idx=self.start_idx + offset,
            peak_idx=self.peak_idx + offset,
            end_idx=self.end_idx + offset,
            sd_peak_idx=self.sd_peak_idx + offset,
            sd_foot_idx=self.sd_foot_idx + offset,
            notch_idx=None if self.notch_idx is None else self.notch_idx + offset,
            frame_id=self.frame_id,
        )


@dataclass(frozen=True)
class FrameQualityPolicy:
    """Mean-|amplitude| band per frame.

    Leaving a bound as ``None`` makes it relative to the median frame level of
    the signal: ``[rel_low * median, rel_high * median]``.
    """

    frame_len_s: float = 10.0
    amp_mean_low: Optional[float] = None
    amp_mean_high: Optional[float] = None
    rel_low: float = 0.2
    rel_high: float = 5.0

    def validate(self):
        if not self.frame_len_s > 0:
            raise InvalidConfig("frame_len_s must be positive")
        if (
            self.amp_mean_low is not None
            and self.amp_mean_high is not None
            and not self.amp_mean_low < self.amp_mean_high
        ):
            raise InvalidConfig("amp_mean_low must be below amp_mean_high")
        if not 0 <= self.rel_low < self.rel_high:
            raise InvalidConfig("rel_low must be below rel_high")


def second_derivative(x, fs):
    """Second derivative in amplitude/s^2; central differences, 4-point one-sided at the ends."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size < 5:
        raise SignalTooShort("second_derivative needs at least 5 samples")
    d = np.empty_like(x)
    d[1:-1] = x[2:] - 2.0 * x[1:-1] + x[:-2]
    d[0] = 2.0 * x[0] - 5.0 * x[1] + 4.0 * x[2] - x[3]
    d[-1] = 2.0 * x[-1] - 5.0 * x[-2] + 4.0 * x[-3] - x[-4]
    return d * fs * fs


def detect_peaks(x, fs, min_distance_s=0.3, min_prominence=None):
    """Indices of local maxima with at least ``min_prominence``, thinned to ``min_distance_s``.

    When two peaks sit closer than the distance, the higher one survives; equal
    heights keep the earlier index. ``min_prominence=None`` means 10% of the
    signal's peak-to-peak range.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    if min_distance_s <= 0:
        raise InvalidConfig("min_distance_s must be positive")
    if x.size < 3:
        return np.empty(0, dtype=np.int64)
    if min_prominence is None:
        min_prominence = 0.1 * float(np.ptp(x))
    peaks = kernels.local_maxima(x)
    if peaks.size == 0:
        return peaks
    prom = kernels.prominences(x, peaks)
    peaks = peaks[prom >= min_prominence]
    if peaks.size > 1:
        keep = kernels.select_by_distance(peaks, x[peaks], min_distance_s * fs)
        peaks = peaks[keep]
    return peaks.astype(np.int64)


def _interior_argmin(x, lo, hi):
    """argmin of x[lo:hi] if it is a strict interior local minimum of x, else None."""
    if hi - lo < 1:
        return None
    i = lo + int(np.argmin(x[lo:hi]))
    if i <= 0 or i >= x.size - 1:
        return None
    if not (x[i] < x[i - 1] or x[i] < x[i + 1]):
        return None
    return i


def systolic_peaks(x, fs, min_distance_s=0.3, min_prominence=None, rise_fraction=0.6):
    """Systolic peaks: detected peaks whose rise from the preceding trough is large.

    A dicrotic wave rises only from the notch, so its rise is a fraction of the
    full pulse amplitude. The reference amplitude is the 90th percentile of the
    rises, which tolerates a few artefact spikes.
    """
    peaks = detect_peaks(x, fs, min_distance_s, min_prominence)
    if peaks.size == 0:
        return peaks
    bounds = np.concatenate(([0], peaks))
    rises = np.array([x[p] - x[lo : p + 1].min() for lo, p in zip(bounds[:-1], peaks)])
    ref = np.percentile(rises, 90)
    if ref <= 0:
        return peaks[:0]
    return peaks[rises >= rise_fraction * ref]


def extract_cycles(ppg, sdppg, fs, min_distance_s=0.3, min_prominence=None, rise_fraction=0.6):
    """Foot-to-foot cycles of one contiguous PPG stretch.

    Feet are the deepest points between consecutive systolic peaks; the leading
    and trailing feet only count when they are true interior minima, so partial
    cycles at the edges are dropped.
    """
    ppg = np.asarray(ppg, dtype=np.float64)
    sdppg = np.asarray(sdppg, dtype=np.float64)
    if ppg.shape != sdppg.shape:
        raise LengthMismatch("ppg and sdppg differ in length")
    peaks = systolic_peaks(ppg, fs, min_distance_s, min_prominence, rise_fraction)
    if peaks.size == 0:
        return []

    inner = [int(p0) + int(np.argmin(ppg[p0:p1])) for p0, p1 in zip(peaks[:-1], peaks[1:])]
    lead = trail = None
    if inner:
        # an edge trough only counts as a foot if it sits about as far from its
        # peak as interior feet do; otherwise it is a notch or a cut-off slope
        rise = np.median([peaks[k + 1] - f for k, f in enumerate(inner)])
        fall = np.median([f - peaks[k] for k, f in enumerate(inner)])
        lead = _interior_argmin(ppg, 0, int(peaks[0]))
        if lead is not None and peaks[0] - lead < 0.8 * rise:
            lead = None
        trail = _interior_argmin(ppg, int(peaks[-1]) + 1, ppg.size)
        if trail is not None and trail - peaks[-1] < 0.8 * fall:
            trail = None
    feet = [lead, *inner, trail]

    cycles = []
    for k, peak in enumerate(peaks):
        start, end = feet[k], feet[k + 1]
        if start is None or end is None or not start < peak < end:
            continue
        duration = (end - start) / fs
        if not MIN_CYCLE_S <= duration <= MAX_CYCLE_S:
            continue
        cycles.append(_landmarks(ppg, sdppg, int(start), int(peak), int(end)))
    return cycles


def _landmarks(ppg, sdppg, start, peak, end):
    notch = None
    inner = ppg[peak + 1 : end]
    if inner.size >= 3:
        mins = kernels.local_maxima(np.ascontiguousarray(-inner)) + peak + 1
        if mins.size:
            notch = int(mins[np.argmin(ppg[mins])])
    sd_peak = start + int(np.argmax(sdppg[start : end + 1]))
    sd_foot = start + int(np.argmin(sdppg[start : sd_peak + 1]))
    return Cycle(start, peak, end, sd_peak, sd_foot, notch)


def frame_quality_gate(ppg, fs, policy=FrameQualityPolicy()):
    """``[(frame_id, keep), ...]`` over consecutive ``frame_len_s`` windows."""
    policy.validate()
    ppg = np.asarray(ppg, dtype=np.float64)
    n = max(1, int(round(policy.frame_len_s * fs)))
    starts = range(0, max(ppg.size, 1), n)
    levels = np.array([np.mean(np.abs(ppg[s : s + n])) for s in starts])
    ref = float(np.median(levels))
    lo = policy.amp_mean_low if policy.amp_mean_low is not None else policy.rel_low * ref
    hi = policy.amp_mean_high if policy.amp_mean_high is not None else policy.rel_high * ref
    return [(i, bool(lo <= v <= hi)) for i, v in enumerate(levels)]


def label_targets(abp, cycles):
    """Per-cycle ``(sbp, dbp)`` as the ABP max and min over ``[start, end]``."""
    abp = np.asarray(abp, dtype=np.float64)
    out = []
    for c in cycles:
        span = abp[c.start_idx : c.end_idx + 1]
        sbp, dbp = float(span.max()), float(span.min())
        if not sbp > dbp:
            raise DegenerateCycle(f"flat ABP over cycle starting at {c.start_idx}")
        out.append((sbp, dbp))
    return out


@dataclass
class SegmentedRecord:
    """Cycles of a whole record with labels and the per-frame gate outcome."""

    cycles: list
    targets: list
    frames: list
    frame_len: int

    def cycles_per_frame(self):
        counts = {}
        for c in self.cycles:
            counts[c.frame_id] = counts.get(c.frame_id, 0) + 1
        return counts


def _kept_runs(frames, frame_len, start, end):
    """Sub-ranges of ``[start, end)`` covered by consecutive kept frames."""
    runs, run_start = [], None
    for fid, ok in frames:
        f0, f1 = max(fid * frame_len, start), min((fid + 1) * frame_len, end)
        if f0 >= f1:
            continue
        if ok and run_start is None:
            run_start = f0
        elif not ok and run_start is not None:
            runs.append((run_start, f0))
            run_start = None
    if run_start is not None:
        runs.append((run_start, end))
    return runs


def segment_record(record, min_distance_s=0.3, frame_policy=FrameQualityPolicy(), min_prominence=None):
    """Run the quality gate, cycle extraction and labelling over every clean segment.

    Peaks are searched only inside runs of kept frames, so an artefact frame
    neither yields cycles nor inflates the prominence threshold of its
    neighbours. The hole it leaves breaks cycle contiguity, which sample
    assembly relies on.
    """
    fs = record.fs
    frames = frame_quality_gate(record.ppg, fs, frame_policy)
    frame_len = max(1, int(round(frame_policy.frame_len_s * fs)))
    cycles = []
    for seg_start, seg_end in record.segment_bounds():
        for s, e in _kept_runs(frames, frame_len, seg_start, seg_end):
            seg = record.ppg[s:e]
            if seg.size < 5:
                continue
            sd = second_derivative(seg, fs)
            for c in extract_cycles(seg, sd, fs, min_distance_s, min_prominence):
                c = c.shifted(s)
                cycles.append(Cycle(**{**asdict(c), "frame_id": int(c.start_idx // frame_len)}))
    targets = label_targets(record.abp, cycles) if record.abp is not None else []
    return SegmentedRecord(cycles=cycles, targets=targets, frames=frames, frame_len=frame_len)


def cycles_to_json(cycles, targets=None):
    rows = []
    for i, c in enumerate(cycles):
        row = {
            "frame_id": c.frame_id,
            "start": c.start_idx,
            "peak": c.peak_idx,
            "notch": c.notch_idx,
            "end": c.end_idx,
            "sd_peak": c.sd_peak_idx,
            "sd_foot": c.sd_foot_idx,
            "sbp": None,
            "dbp": None,
        }
        if targets:
            row["sbp"], row["dbp"] = targets[i]
        rows.append(row)
    return rows


def cycles_from_json(rows):
    cycles, targets = [], []
    for r in rows:
        cycles.append(
            Cycle(
                start_idx=int(r["start"]),
                peak_idx=int(r["peak"]),
                end_idx=int(r["end"]),
                sd_peak_idx=int(r["sd_peak"]),
                sd_foot_idx=int(r["sd_foot"]),
                notch_idx=None if r.get("notch") is None else int(r["notch"]),
                frame_id=int(r["frame_id"]),
            )
        )
        if r.get("sbp") is not None:
            targets.append((float(r["sbp"]), float(r["dbp"])))
    return cycles, targets
