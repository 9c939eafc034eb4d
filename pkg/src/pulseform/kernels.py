"""Hot signal-processing loops.

Each kernel exists twice: a loop version compiled with numba ``@njit`` and a
pure-numpy/Python fallback. The module-level names (``lfilter``,
``sosfilt``, ...) point at the compiled versions unless numba is missing or
``PULSEFORM_DISABLE_NUMBA`` is set to a truthy value before import.

Both variants are always importable (``*_jit`` / ``*_np``) so the benchmark and
the equivalence tests can run them side by side.
"""
import os

import numpy as np

try:
    import numba

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False


def _env_disabled():
    return os.environ.get("PULSEFORM_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes", "on")


NUMBA_ENABLED = _HAVE_NUMBA and not _env_disabled()


def _njit(func):
    if _HAVE_NUMBA:
        return numba.njit(cache=True, nogil=True)(func)
    return func


# ---------------------------------------------------------------- IIR filters


def _lfilter_loop(b, a, x, zi):
    # direct form II transposed; a[0] == 1
    n_state = zi.shape[0]
    z = zi.copy()
    y = np.empty_like(x)
    for n in range(x.shape[0]):
        xn = x[n]
        yn = b[0] * xn + z[0]
        for k in range(1, n_state):
            z[k - 1] = b[k] * xn + z[k] - a[k] * yn
        z[n_state - 1] = b[n_state] * xn - a[n_state] * yn
        y[n] = yn
    return y, z


def _sosfilt_loop(sos, x, zi):
    n_sec = sos.shape[0]
    z = zi.copy()
    y = x.copy()
    for n in range(y.shape[0]):
        v = y[n]
        for s in range(n_sec):
            out = sos[s, 0] * v + z[s, 0]
            z[s, 0] = sos[s, 1] * v - sos[s, 4] * out + z[s, 1]
            z[s, 1] = sos[s, 2] * v - sos[s, 5] * out
            v = out
        y[n] = v
    return y, z


lfilter_jit = _njit(_lfilter_loop)
sosfilt_jit = _njit(_sosfilt_loop)


def lfilter_np(b, a, x, zi):
    """Interpreted fallback; recursion cannot be vectorized across samples."""
    b = np.asarray(b, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    z = np.array(zi, dtype=np.float64)
    y = np.empty_like(x)
    bl, al = b.tolist(), a.tolist()
    n_state = len(z)
    zl = z.tolist()
    for n, xn in enumerate(x.tolist()):
        yn = bl[0] * xn + zl[0]
        for k in range(1, n_state):
            zl[k - 1] = bl[k] * xn + zl[k] - al[k] * yn
        zl[n_state - 1] = bl[n_state] * xn - al[n_state] * yn
        y[n] = yn
    return y, np.array(zl)


def sosfilt_np(sos, x, zi):
    # section-at-a-time keeps the inner loop to scalars
    y = np.array(x, dtype=np.float64)
    zf = np.empty_like(zi)
    for s in range(sos.shape[0]):
        b = sos[s, :3]
        a = sos[s, 3:]
        y, zf[s] = lfilter_np(b, a, y, zi[s])
    return y, zf


# ---------------------------------------------------------------- peaks


def _local_maxima_loop(x):
    # plateau maxima report their midpoint (rounded down)
    n = x.shape[0]
    out = np.empty(n, dtype=np.int64)
    m = 0
    i = 1
    while i < n - 1:
        if x[i - 1] < x[i]:
            ahead = i + 1
            while ahead < n - 1 and x[ahead] == x[i]:
                ahead += 1
            if x[ahead] < x[i]:
                out[m] = (i + ahead - 1) // 2
                m += 1
                i = ahead
        i += 1
    return out[:m]


def _prominences_loop(x, peaks):
    prom = np.empty(peaks.shape[0], dtype=np.float64)
    n = x.shape[0]
    for k in range(peaks.shape[0]):
        p = peaks[k]
        h = x[p]
        left_min = h
        i = p
        while i >= 0 and x[i] <= h:
            if x[i] < left_min:
                left_min = x[i]
            i -= 1
        right_min = h
        i = p
        while i < n and x[i] <= h:
            if x[i] < right_min:
                right_min = x[i]
            i += 1
        prom[k] = h - max(left_min, right_min)
    return prom


def _select_by_distance_loop(peaks, heights, distance):
    # visit highest first; equal heights resolve toward the earlier index
    n = peaks.shape[0]
    keep = np.ones(n, dtype=np.bool_)
    order = np.argsort(-heights, kind="mergesort")
    for j in range(n):
        i = order[j]
        if not keep[i]:
            continue
        k = i - 1
        while k >= 0 and peaks[i] - peaks[k] < distance:
            keep[k] = False
            k -= 1
        k = i + 1
        while k < n and peaks[k] - peaks[i] < distance:
            keep[k] = False
            k += 1
    return keep


local_maxima_jit = _njit(_local_maxima_loop)
prominences_jit = _njit(_prominences_loop)
_select_by_distance_jit = _njit(_select_by_distance_loop)


def select_by_distance_jit(peaks, heights, distance):
    return _select_by_distance_jit(peaks, heights, float(distance))


def local_maxima_np(x):
    x = np.asarray(x, dtype=np.float64)
    if x.size < 3:
        return np.empty(0, dtype=np.int64)
    # collapse plateaus into runs, then compare each run with its neighbours
    change = np.flatnonzero(np.diff(x)) + 1
    starts = np.concatenate(([0], change))
    ends = np.concatenate((change, [x.size])) - 1
    vals = x[starts]
    if vals.size < 3:
        return np.empty(0, dtype=np.int64)
    inner = np.arange(1, vals.size - 1)
    is_max = (vals[inner] > vals[inner - 1]) & (vals[inner] > vals[inner + 1])
    idx = inner[is_max]
    return ((starts[idx] + ends[idx]) // 2).astype(np.int64)


def prominences_np(x, peaks):
    x = np.asarray(x, dtype=np.float64)
    prom = np.empty(len(peaks), dtype=np.float64)
    for k, p in enumerate(peaks):
        h = x[p]
        higher_left = np.flatnonzero(x[:p] > h)
        lo = higher_left[-1] + 1 if higher_left.size else 0
        higher_right = np.flatnonzero(x[p + 1 :] > h)
        hi = p + 1 + higher_right[0] if higher_right.size else x.size
        prom[k] = h - max(x[lo : p + 1].min(), x[p:hi].min())
    return prom


def select_by_distance_np(peaks, heights, distance):
    peaks = np.asarray(peaks)
    keep = np.ones(peaks.size, dtype=bool)
    order = np.argsort(-np.asarray(heights), kind="mergesort")
    for i in order:
        if not keep[i]:
            continue
        close = np.abs(peaks - peaks[i]) < distance
        close[i] = False
        keep[close] = False
    return keep


# ---------------------------------------------------------------- smoothing


def _running_mean_loop(padded, window):
    # direct per-window sums: no running-sum drift over long records
    n = padded.shape[0] - window + 1
    out = np.empty(n, dtype=np.float64)
    for i in range(n):
        acc = 0.0
        for j in range(window):
            acc += padded[i + j]
        out[i] = acc / window
    return out


running_mean_jit = _njit(_running_mean_loop)


def running_mean_np(padded, window):
    view = np.lib.stride_tricks.sliding_window_view(padded, window)
    acc = np.zeros(view.shape[0])
    for j in range(window):
        acc += view[:, j]
    return acc / window


if NUMBA_ENABLED:
    lfilter = lfilter_jit
    sosfilt = sosfilt_jit
    local_maxima = local_maxima_jit
    prominences = prominences_jit
    select_by_distance = select_by_distance_jit
    running_mean = running_mean_jit
else:
    lfilter = lfilter_np
    sosfilt = sosfilt_np
    local_maxima = local_maxima_np
    prominences = prominences_np
    select_by_distance = select_by_distance_np
    running_mean = running_mean_np
