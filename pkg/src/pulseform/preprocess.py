"""Record cleaning and the Butterworth band-pass + moving-average filter chain."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import kernels
from .errors import InvalidConfig, InvalidSpec, SignalTooShort, WindowTooLarge
from .waveform import Record


@dataclass(frozen=True)
class CleaningPolicy:
    min_duration_s: float = 900.0
    amp_low: Optional[float] = None  # None -> mean - 5 sd of the record
    amp_high: Optional[float] = None  # None -> mean + 5 sd of the record
    flatline_var_threshold: float = 1e-6
    flatline_window_s: float = 10.0
    max_outrange_fraction: float = 0.05

    def validate(self):
        if not self.min_duration_s > 0:
            raise InvalidConfig("min_duration_s must be positive")
        if self.amp_low is not None and self.amp_high is not None and not self.amp_low < self.amp_high:
            raise InvalidConfig("amp_low must be below amp_high")
        if self.flatline_var_threshold < 0 or self.flatline_window_s <= 0:
            raise InvalidConfig("flat-line thresholds must be non-negative, window positive")
        if not 0.0 <= self.max_outrange_fraction <= 1.0:
            raise InvalidConfig("max_outrange_fraction must lie in [0, 1]")


@dataclass(frozen=True)
class BandpassSpec:
    fs: float = 62.4
    order: int = 5
    f_low: float = 0.7
    f_high: float = 10.0

    def validate(self):
        if int(self.order) != self.order or self.order < 1:
            raise InvalidSpec(f"order must be a positive integer, got {self.order}")
        if not 0.0 < self.f_low < self.f_high < self.fs / 2.0:
            raise InvalidSpec(f"need 0 < f_low < f_high < fs/2, got {self.f_low}, {self.f_high}, fs={self.fs}")


@dataclass(frozen=True, eq=False)
class IirFilter:
    """Transfer-function coefficients, plus an equivalent second-order-section form.

    ``sos`` rows are ``[b0, b1, b2, 1, a1, a2]``. Filters built by hand from
    ``(b, a)`` leave it as ``None`` and are applied in direct form.
    """

    b: np.ndarray
    a: np.ndarray
    sos: Optional[np.ndarray] = None

    def __post_init__(self):
        b = np.atleast_1d(np.asarray(self.b, dtype=np.float64))
        a = np.atleast_1d(np.asarray(self.a, dtype=np.float64))
        if a[0] == 0:
            raise InvalidSpec("a[0] must be non-zero")
        if not (np.all(np.isfinite(b)) and np.all(np.isfinite(a))):
            raise InvalidSpec("coefficients must be finite")
        b, a = b / a[0], a / a[0]
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "a", a)

    def poles(self):
        if self.sos is not None:
            return np.concatenate([np.roots(row[3:]) for row in self.sos])
        return np.roots(self.a)

    def is_stable(self):
        return bool(np.all(np.abs(self.poles()) < 1.0))

    def response(self, freqs, fs):
        """Complex frequency response at ``freqs`` (Hz)."""
        z = np.exp(1j * 2.0 * np.pi * np.asarray(freqs, dtype=np.float64) / fs)
        if self.sos is not None:
            h = np.ones_like(z)
            for row in self.sos:
                h *= np.polyval(row[2::-1], 1 / z) / np.polyval(row[:2:-1], 1 / z)
            return h
        return np.polyval(self.b[::-1], 1 / z) / np.polyval(self.a[::-1], 1 / z)


@dataclass(frozen=True)
class Rejection:
    reason: str
    detail: str = ""

    def __bool__(self):
        return False


# ---------------------------------------------------------------- cleaning


def clean_record(record, policy=CleaningPolicy()):
    """Return kept ``(start, end)`` sample ranges, or a :class:`Rejection`.

    Windows of ``flatline_window_s`` are dropped when their variance falls
    under ``flatline_var_threshold`` or when more than
    ``max_outrange_fraction`` of their samples leave ``[amp_low, amp_high]``.
    Surviving adjacent windows merge into maximal segments.
    """
    policy.validate()
    if record.duration_s < policy.min_duration_s:
        return Rejection("TooShort", f"{record.duration_s:.1f} s < {policy.min_duration_s} s")

    x = record.ppg
    if policy.amp_low is None or policy.amp_high is None:
        mu, sd = float(np.mean(x)), float(np.std(x))
    lo = policy.amp_low if policy.amp_low is not None else mu - 5.0 * sd
    hi = policy.amp_high if policy.amp_high is not None else mu + 5.0 * sd

    win = max(1, int(round(policy.flatline_window_s * record.fs)))
    kept = []
    for seg_start, seg_end in record.segment_bounds():
        run_start = None
        for w0 in range(seg_start, seg_end, win):
            w1 = min(w0 + win, seg_end)
            chunk = x[w0:w1]
            flat = np.var(chunk) < policy.flatline_var_threshold
            outrange = np.mean((chunk < lo) | (chunk > hi)) > policy.max_outrange_fraction
            if flat or outrange:
                if run_start is not None:
                    kept.append((run_start, w0))
                    run_start = None
            elif run_start is None:
                run_start = w0
        if run_start is not None:
            kept.append((run_start, seg_end))
    if not kept:
        return Rejection("NoCleanSegment", "every window failed the flat-line or amplitude rule")
    return kept


# ---------------------------------------------------------------- filter design


def butterworth_prototype(order):
    """Poles of the unit-cutoff analog Butterworth low-pass prototype."""
    k = np.arange(1, order + 1)
    return np.exp(1j * np.pi * (2 * k + order - 1) / (2 * order))


def _lowpass_to_bandpass(poles, gain, w0, bw):
    half = poles * bw / 2.0
    disc = np.sqrt(half.astype(complex) ** 2 - w0**2)
    bp_poles = np.concatenate((half + disc, half - disc))
    bp_zeros = np.zeros(len(poles))  # N zeros at s = 0, N more at infinity
    return bp_zeros, bp_poles, gain * bw ** len(poles)


def _bilinear(zeros, poles, gain, fs):
    fs2 = 2.0 * fs
    zd = (fs2 + zeros) / (fs2 - zeros)
    pd = (fs2 + poles) / (fs2 - poles)
    # zeros at infinity land on z = -1
    zd = np.concatenate((zd, -np.ones(len(poles) - len(zeros))))
    kd = gain * np.real(np.prod(fs2 - zeros) / np.prod(fs2 - poles))
    return zd, pd, kd


def _pair_sections(zd, pd, kd):
    # conjugate pole pairs first, then the leftover real poles two at a time
    tol = 1e-10
    cplx = sorted((p for p in pd if p.imag > tol * max(1.0, abs(p))), key=lambda p: abs(p))
    real = sorted((p.real for p in pd if abs(p.imag) <= tol * max(1.0, abs(p))), key=abs)
    pole_pairs = [(p, np.conj(p)) for p in cplx]
    pole_pairs += [(real[i], real[i + 1]) for i in range(0, len(real) - 1, 2)]
    if len(real) % 2:
        pole_pairs.append((real[-1], None))

    zr = sorted(np.real(zd).tolist())
    zero_pairs = []
    # band-pass zeros sit at +1 and -1; one of each per section
    plus = [z for z in zr if z > 0]
    minus = [z for z in zr if z <= 0]
    for _ in range(len(pole_pairs)):
        pair = []
        if plus:
            pair.append(plus.pop())
        if minus:
            pair.append(minus.pop())
        zero_pairs.append(pair)

    sos = np.zeros((len(pole_pairs), 6))
    for i, (pp, zz) in enumerate(zip(pole_pairs, zero_pairs)):
        b = np.real(np.poly(zz)) if zz else np.array([1.0])
        a = np.real(np.poly([p for p in pp if p is not None]))
        # poly() is highest power first, which is also the z^-1 coefficient order
        sos[i, : len(b)] = b
        sos[i, 3 : 3 + len(a)] = a
    sos[0, :3] *= kd
    return sos


def design_butterworth_bandpass(spec):
    """Band-pass Butterworth via analog prototype, band transform and pre-warped bilinear map."""
    spec.validate()
    fs = float(spec.fs)
    w_low = 2.0 * fs * math.tan(math.pi * spec.f_low / fs)
    w_high = 2.0 * fs * math.tan(math.pi * spec.f_high / fs)
    bw = w_high - w_low
    w0 = math.sqrt(w_low * w_high)

    z, p, k = _lowpass_to_bandpass(butterworth_prototype(int(spec.order)), 1.0, w0, bw)
    zd, pd, kd = _bilinear(z, p, k, fs)
    b = kd * np.real(np.poly(zd))
    a = np.real(np.poly(pd))
    flt = IirFilter(b=b, a=a, sos=_pair_sections(zd, pd, kd))
    if not flt.is_stable():  # pragma: no cover - Butterworth designs are stable by construction
        raise InvalidSpec("designed filter is unstable")
    return flt


# ---------------------------------------------------------------- filtering


def _lfilter_zi(b, a):
    n = max(len(a), len(b))
    b = np.pad(b, (0, n - len(b)))
    a = np.pad(a, (0, n - len(a)))
    companion = np.zeros((n - 1, n - 1))
    companion[0, :] = -a[1:]
    companion[1:, :-1] += np.eye(n - 2)
    lhs = np.eye(n - 1) - companion.T
    rhs = b[1:] - a[1:] * b[0]
    return np.linalg.solve(lhs, rhs)


def _sos_zi(sos):
    zi = np.empty((sos.shape[0], 2))
    scale = 1.0
    for i, row in enumerate(sos):
        zi[i] = scale * _lfilter_zi(row[:3], row[3:])
        scale *= row[:3].sum() / row[3:].sum()
    return zi


def _odd_extend(x, n):
    left = 2.0 * x[0] - x[n:0:-1]
    right = 2.0 * x[-1] - x[-2 : -n - 2 : -1]
    return np.concatenate((left, x, right))


def filtfilt(flt, x):
    """Zero-phase forward-backward application of ``flt`` to ``x``."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    padlen = 3 * max(len(flt.a), len(flt.b))
    if x.ndim != 1 or x.size <= padlen:
        raise SignalTooShort(f"need more than {padlen} samples, got {x.size}")
    ext = _odd_extend(x, padlen)
    if flt.sos is not None:
        sos = np.ascontiguousarray(flt.sos)
        zi = _sos_zi(sos)
        y, _ = kernels.sosfilt(sos, ext, zi * ext[0])
        y = np.ascontiguousarray(y[::-1])
        y, _ = kernels.sosfilt(sos, y, zi * y[0])
    else:
        n = max(len(flt.a), len(flt.b))
        b = np.pad(flt.b, (0, n - len(flt.b)))
        a = np.pad(flt.a, (0, n - len(flt.a)))
        zi = _lfilter_zi(b, a)
        y, _ = kernels.lfilter(b, a, ext, zi * ext[0])
        y = np.ascontiguousarray(y[::-1])
        y, _ = kernels.lfilter(b, a, y, zi * y[0])
    return np.ascontiguousarray(y[::-1][padlen:-padlen])


def moving_average(x, window=5, passes=1):
    """Centred moving average with symmetric (edge-repeating) padding."""
    x = np.asarray(x, dtype=np.float64)
    window = int(window)
    if window < 1 or passes < 1:
        raise InvalidConfig("window and passes must be positive")
    if window > x.size:
        raise WindowTooLarge(f"window {window} exceeds signal length {x.size}")
    left = (window - 1) // 2
    right = window - 1 - left
    y = x
    for _ in range(int(passes)):
        y = kernels.running_mean(np.pad(y, (left, right), mode="symmetric"), window)
    return np.asarray(y)


def preprocess_chain(record, policy=CleaningPolicy(), spec=None, maf_window=5, maf_passes=1):
    """Clean, band-pass and smooth ``record``; returns a new Record or a Rejection.

    ABP is cropped to the same segments but never filtered, since targets are
    absolute pressures.
    """
    if spec is None:
        spec = BandpassSpec(fs=record.fs)
    elif spec.fs != record.fs:
        raise InvalidSpec(f"band-pass spec fs={spec.fs} does not match record fs={record.fs}")
    kept = clean_record(record, policy)
    if isinstance(kept, Rejection):
        return kept
    flt = design_butterworth_bandpass(spec)
    padlen = 3 * max(len(flt.a), len(flt.b))

    ppg_parts, abp_parts, bounds = [], [], []
    pos = 0
    for s, e in kept:
        if e - s <= max(padlen, maf_window):
            continue
        smooth = moving_average(filtfilt(flt, record.ppg[s:e]), maf_window, maf_passes)
        ppg_parts.append(smooth)
        if record.abp is not None:
            abp_parts.append(record.abp[s:e])
        bounds.append((pos, pos + (e - s)))
        pos += e - s
    if not ppg_parts:
        return Rejection("NoCleanSegment", "kept segments too short to filter")
    return Record(
        record_id=record.record_id,
        subject_id=record.subject_id,
        fs=record.fs,
        ppg=np.concatenate(ppg_parts),
        abp=np.concatenate(abp_parts) if abp_parts else None,
        start_time=record.start_time,
        segments=bounds,
    )


def cleaning_report(record_id, result):
    if isinstance(result, Rejection):
        return {"record_id": record_id, "kept_segments": [], "rejected": True, "reason": result.reason}
    return {
        "record_id": record_id,
        "kept_segments": [[int(s), int(e)] for s, e in result],
        "rejected": False,
        "reason": None,
    }
