"""Closed-form references for the synthetic two-lobe pulse.

Everything here works on the continuous pulse model (Gaussian lobes and their
analytic second derivative) with scipy root finding and quadrature. None of it
touches the sampled-signal code paths under test.
"""
import numpy as np
from scipy import integrate, optimize

from pulseform.waveform import DICROTIC_CENTER, DICROTIC_WIDTH, SYSTOLIC_CENTER, SYSTOLIC_WIDTH


class AnalyticPulse:
    def __init__(self, period, notch_depth, phase_offset=0.0):
        self.period = period
        self.nd = notch_depth

    def _lobes(self):
        T = self.period
        return [
            (SYSTOLIC_CENTER * T, SYSTOLIC_WIDTH * T, 1.0),
            (DICROTIC_CENTER * T, DICROTIC_WIDTH * T, self.nd),
        ]

    def f(self, t):
        t = np.asarray(t, dtype=float)
        k = np.floor(t / self.period)
        out = np.zeros_like(t)
        for shift in (-1, 0, 1):
            base = (k + shift) * self.period
            for c, s, a in self._lobes():
                out += a * np.exp(-0.5 * ((t - base - c) / s) ** 2)
        return out

    def d2(self, t):
        t = np.asarray(t, dtype=float)
        k = np.floor(t / self.period)
        out = np.zeros_like(t)
        for shift in (-1, 0, 1):
            base = (k + shift) * self.period
            for c, s, a in self._lobes():
                u = (t - base - c) / s
                out += a * (u * u - 1.0) / (s * s) * np.exp(-0.5 * u * u)
        return out

    # -- landmarks of the cycle whose systolic lobe is in period k

    def _extremum(self, fn, lo, hi, sign):
        grid = np.linspace(lo, hi, 4001)
        i = int(np.argmax(sign * fn(grid)))
        a, b = grid[max(i - 1, 0)], grid[min(i + 1, grid.size - 1)]
        res = optimize.minimize_scalar(lambda t: -sign * fn(np.array([t]))[0], bounds=(a, b), method="bounded",
                                       options={"xatol": 1e-12})
        return float(res.x)

    def foot(self, k):
        T = self.period
        return self._extremum(self.f, (k - 1 + DICROTIC_CENTER) * T, (k + SYSTOLIC_CENTER) * T, -1)

    def peak(self, k):
        T = self.period
        return self._extremum(self.f, (k + SYSTOLIC_CENTER - 0.1) * T, (k + SYSTOLIC_CENTER + 0.1) * T, 1)

    def notch(self, k):
        T = self.period
        return self._extremum(self.f, (k + SYSTOLIC_CENTER) * T, (k + DICROTIC_CENTER) * T, -1)

    def features(self, k, cycles_in_frame):
        f = lambda t: float(self.f(np.array([t]))[0])
        d2 = lambda t: float(self.d2(np.array([t]))[0])
        t0, tp, t1 = self.foot(k), self.peak(k), self.foot(k + 1)
        tn = self.notch(k) if self.nd > 0 else None
        level = f(t0) + 0.5 * (f(tp) - f(t0))
        t_rise = optimize.brentq(lambda t: f(t) - level, t0, tp, xtol=1e-13)
        fall_hi = tn if tn is not None else t1
        t_fall = optimize.brentq(lambda t: f(t) - level, tp, fall_hi, xtol=1e-13)

        sd_peak = self._extremum(self.d2, t0, t1, 1)
        sd_foot = self._extremum(self.d2, t0, sd_peak, -1)
        sd_level = 0.5 * d2(sd_peak)
        # first descent through half the SDPPG peak after the peak
        grid = np.linspace(sd_peak, t1, 20001)
        vals = self.d2(grid) - sd_level
        j = int(np.flatnonzero(vals <= 0)[0])
        t_sd_fall = optimize.brentq(lambda t: d2(t) - sd_level, grid[j - 1], grid[j], xtol=1e-13)

        base = f(t0)
        ppgi = integrate.quad(lambda t: f(t) - base, t0, t1, limit=200, epsabs=1e-12)[0]
        sdppgi = integrate.quad(lambda t: max(d2(t), 0.0), t0, t1, limit=400, epsabs=1e-10)[0]
        return {
            "td1": t1 - t0,
            "trhp": t_rise - t0,
            "td2": 0.0 if tn is None else tn - tp,
            "tp": tp - t0,
            "tfh": t_fall - tp,
            "td3": t1 - tp,
            "pbf": float(cycles_in_frame),
            "ppgi": ppgi,
            "sd_tfhf": t_sd_fall - t0,
            "sd_amp": d2(sd_peak),
            "sdppgi": sdppgi,
            "td4": sd_peak - sd_foot,
        }


def triangle_pulse(fs, rise_s=0.25, fall_s=0.75, pad_s=0.2):
    """Sampled triangle 0 -> 1 -> 0 with flat zero padding either side.

    Returns (signal, start_idx, peak_idx, end_idx); the pulse starts exactly
    on a sample when fs * pad_s is an integer.
    """
    n_pad = int(round(pad_s * fs))
    t = np.arange(int(round((2 * pad_s + rise_s + fall_s) * fs)) + 1) / fs - n_pad / fs
    x = np.where(t < 0, 0.0, np.where(t <= rise_s, t / rise_s, np.maximum(0.0, 1.0 - (t - rise_s) / fall_s)))
    start = n_pad
    peak = n_pad + int(round(rise_s * fs))
    end = n_pad + int(round((rise_s + fall_s) * fs))
    return x, start, peak, end


def naive_matmul(a, b):
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for q in range(k):
                s += a[i, q] * b[q, j]
            out[i, j] = s
    return out


def central_difference(fn, x, idx, h=1e-5):
    """d fn / d x[idx] by central differences; x is perturbed in place and restored."""
    orig = x[idx]
    x[idx] = orig + h
    fp = fn()
    x[idx] = orig - h
    fm = fn()
    x[idx] = orig
    return (fp - fm) / (2 * h)
