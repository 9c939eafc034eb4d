"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--seconds 960] [--repeat 5]

Inputs are a synthetic PPG record of the given length at 62.4 Hz. Each
kernel is called once before timing so JIT compilation is not counted.
The last column checks that both paths agree.
"""
import argparse
import time

import numpy as np

from pulseform import kernels
from pulseform.preprocess import BandpassSpec, _sos_zi, design_butterworth_bandpass
from pulseform.waveform import SynthConfig, synthesize


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(x):
    flt = design_butterworth_bandpass(BandpassSpec())
    zi = np.zeros(max(len(flt.a), len(flt.b)) - 1)
    szi = _sos_zi(flt.sos) * x[0]
    peaks = kernels.local_maxima_np(x)
    heights = x[peaks]
    padded = np.pad(x, 2, mode="symmetric")
    dist = 0.3 * 62.4
    return {
        "lfilter": (lambda k: k.lfilter_jit(flt.b, flt.a, x, zi)[0], lambda k: k.lfilter_np(flt.b, flt.a, x, zi)[0]),
        "sosfilt": (lambda k: k.sosfilt_jit(flt.sos, x, szi)[0], lambda k: k.sosfilt_np(flt.sos, x, szi)[0]),
        "local_maxima": (lambda k: k.local_maxima_jit(x), lambda k: k.local_maxima_np(x)),
        "prominences": (lambda k: k.prominences_jit(x, peaks), lambda k: k.prominences_np(x, peaks)),
        "select_by_distance": (
            lambda k: k.select_by_distance_jit(peaks, heights, dist),
            lambda k: k.select_by_distance_np(peaks, heights, dist),
        ),
        "running_mean": (lambda k: k.running_mean_jit(padded, 5), lambda k: k.running_mean_np(padded, 5)),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seconds", type=float, default=960.0, help="record length")
    ap.add_argument("--repeat", type=int, default=5, help="timed runs per kernel (best is reported)")
    args = ap.parse_args(argv)

    x = synthesize(SynthConfig(duration_s=args.seconds, noise_std=0.02, baseline_drift_amp=0.05, seed=1)).ppg
    x = np.ascontiguousarray(x)
    print(f"n = {x.size} samples, numba available: {kernels._HAVE_NUMBA}, default path: "
          f"{'numba' if kernels.NUMBA_ENABLED else 'numpy'}")
    print(f"{'kernel':<20}{'numba ms':>12}{'numpy ms':>12}{'speedup':>10}  agree")
    for name, (fj, fn) in cases(x).items():
        tj = best_of(lambda: fj(kernels), args.repeat)
        tn = best_of(lambda: fn(kernels), args.repeat)
        a, b = np.asarray(fj(kernels), dtype=float), np.asarray(fn(kernels), dtype=float)
        agree = a.shape == b.shape and np.allclose(a, b, rtol=1e-12, atol=1e-12)
        print(f"{name:<20}{tj * 1e3:>12.3f}{tn * 1e3:>12.3f}{tn / tj:>10.1f}  {agree}")


if __name__ == "__main__":
    main()
