import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import minimize_scalar

from pulseform.errors import DegenerateCycle, InvalidConfig, SignalTooShort
from pulseform.segmentation import (
    MAX_CYCLE_S,
    MIN_CYCLE_S,
    Cycle,
    FrameQualityPolicy,
    cycles_from_json,
    cycles_to_json,
    detect_peaks,
    extract_cycles,
    frame_quality_gate,
    label_targets,
    second_derivative,
    segment_record,
    systolic_peaks,
)
from pulseform.waveform import DICROTIC_CENTER, SYSTOLIC_CENTER, Record, SynthConfig, pulse_shape, synthesize

FS = 62.4


def _cycles(rec, **kw):
    return extract_cycles(rec.ppg, second_derivative(rec.ppg, rec.fs), rec.fs, **kw)


# ---------------------------------------------------------------- derivative


def test_second_derivative_of_parabola():
    fs = 1000.0
    t = np.arange(2000) / fs
    np.testing.assert_allclose(second_derivative(t**2, fs)[1:-1], 2.0, atol=1e-6)
    # the 4-point edge stencil is exact for quadratics as well
    np.testing.assert_allclose(second_derivative(t**2, fs)[[0, -1]], 2.0, atol=1e-6)


def test_second_derivative_of_sine():
    t = np.arange(int(5 * FS)) / FS
    x = np.sin(2 * np.pi * t)
    expected = -((2 * np.pi) ** 2) * x
    d = second_derivative(x, FS)
    interior = slice(1, -1)
    amp = (2 * np.pi) ** 2
    assert np.max(np.abs(d[interior] - expected[interior])) <= 0.01 * amp


def test_second_derivative_of_ramp():
    x = 3.0 * np.arange(100) - 7.0
    assert np.max(np.abs(second_derivative(x, FS)[1:-1])) < 1e-9


def test_second_derivative_needs_five_samples():
    with pytest.raises(SignalTooShort):
        second_derivative(np.ones(4), FS)


# ---------------------------------------------------------------- peaks


def test_constant_signal_has_no_peaks():
    assert detect_peaks(np.full(100, 2.0), FS).size == 0


def test_ten_peaks_at_lobe_centres():
    rec = synthesize(SynthConfig(duration_s=10.0, heart_rate_bpm=60.0))
    peaks = detect_peaks(rec.ppg, FS, min_distance_s=0.4)
    centres = (np.arange(10) + SYSTOLIC_CENTER) * FS
    assert peaks.size == 10
    assert np.max(np.abs(peaks - centres)) <= 1


def test_equal_peaks_tie_keeps_earlier():
    x = np.zeros(200)
    i, j = 80, 80 + int(round(0.2 * FS))
    x[i] = x[j] = 1.0
    np.testing.assert_array_equal(detect_peaks(x, FS, min_distance_s=0.4), [i])


def test_higher_peak_wins_distance_conflict():
    x = np.zeros(200)
    x[80], x[90] = 0.8, 1.0
    np.testing.assert_array_equal(detect_peaks(x, FS, min_distance_s=0.4), [90])


def test_invalid_min_distance():
    with pytest.raises(InvalidConfig):
        detect_peaks(np.ones(10), FS, min_distance_s=0.0)


@given(shift=st.integers(0, 200), seed=st.integers(0, 1000))
def test_detection_is_shift_equivariant(shift, seed):
    rec = synthesize(SynthConfig(duration_s=15.0, noise_std=0.02, seed=seed))
    x = rec.ppg
    base = detect_peaks(x, FS, min_prominence=0.2)
    # pad with the first sample so no new extremum is created at the seam
    shifted = detect_peaks(np.concatenate((np.full(shift, x[0] - 10.0), x)), FS, min_prominence=0.2)
    # the padded prefix is a deep plateau, so the first edge peak may gain prominence; compare the rest
    np.testing.assert_array_equal(shifted[shifted >= shift + base[0]] - shift, base)


@given(c=st.floats(1e-3, 1e3), seed=st.integers(0, 1000))
def test_detection_indices_are_scale_invariant(c, seed):
    x = synthesize(SynthConfig(duration_s=15.0, noise_std=0.02, seed=seed)).ppg
    np.testing.assert_array_equal(detect_peaks(c * x, FS), detect_peaks(x, FS))
    np.testing.assert_array_equal(systolic_peaks(c * x, FS), systolic_peaks(x, FS))


# ---------------------------------------------------------------- cycles


def test_thirty_seconds_gives_29_cycles():
    cycles = _cycles(synthesize(SynthConfig(duration_s=30.0, heart_rate_bpm=60.0)))
    assert len(cycles) == 29


def _analytic_notch_phase(notch_depth):
    res = minimize_scalar(
        lambda u: pulse_shape(np.array([u]), 1.0, notch_depth)[0],
        bounds=(SYSTOLIC_CENTER, DICROTIC_CENTER),
        method="bounded",
        options={"xatol": 1e-10},
    )
    return res.x


@pytest.mark.parametrize("hr", [60.0, 80.0])
def test_notch_between_lobes(hr):
    rec = synthesize(SynthConfig(duration_s=30.0, heart_rate_bpm=hr, notch_depth=0.4))
    period = 60.0 / hr
    u = _analytic_notch_phase(0.4)
    cycles = _cycles(rec)
    assert cycles
    for c in cycles:
        assert c.notch_idx is not None
        k = np.floor(c.peak_idx / FS / period)
        assert abs(c.notch_idx - (k + u) * period * FS) <= 2


def test_no_peaks_no_cycles():
    z = np.zeros(300)
    assert extract_cycles(z, z, FS) == []


@pytest.mark.parametrize("hr,depth,seed", [(50.0, 0.2, 0), (72.0, 0.5, 1), (110.0, 0.7, 2), (150.0, 0.3, 3)])
def test_cycle_invariants(hr, depth, seed):
    rec = synthesize(SynthConfig(duration_s=40.0, heart_rate_bpm=hr, notch_depth=depth, noise_std=0.01, seed=seed))
    cycles = _cycles(rec)
    assert len(cycles) >= int(40 * hr / 60) - 3
    x = rec.ppg
    for c in cycles:
        assert c.start_idx < c.peak_idx < c.end_idx
        assert MIN_CYCLE_S <= (c.end_idx - c.start_idx) / FS <= MAX_CYCLE_S
        assert x[c.peak_idx] >= x[c.start_idx : c.end_idx + 1].max()
        assert c.start_idx <= c.sd_foot_idx <= c.sd_peak_idx <= c.end_idx
    for a, b in zip(cycles, cycles[1:]):
        assert a.end_idx <= b.start_idx + 1


def test_cycle_rejects_bad_ordering():
    with pytest.raises(ValueError):
        Cycle(5, 3, 10, 4, 4)
    with pytest.raises(ValueError):
        Cycle(1, 3, 10, 4, 4, notch_idx=2)


# ---------------------------------------------------------------- frame gate


def test_clean_record_keeps_every_frame():
    rec = synthesize(SynthConfig(duration_s=60.0, noise_std=0.02, seed=1))
    gate = frame_quality_gate(rec.ppg, FS)
    assert [fid for fid, _ in gate] == list(range(6))
    assert all(keep for _, keep in gate)


def test_scaled_frame_is_dropped():
    rec = synthesize(SynthConfig(duration_s=60.0, noise_std=0.02, seed=1))
    x = rec.ppg.copy()
    n = int(round(10 * FS))
    x[3 * n : 4 * n] *= 100.0
    gate = frame_quality_gate(x, FS)
    assert [keep for _, keep in gate] == [True, True, True, False, True, True]


def test_short_record_is_one_frame():
    gate = frame_quality_gate(np.ones(100), FS)
    assert gate == [(0, True)]


def test_absolute_frame_bounds():
    x = np.concatenate((np.full(624, 0.5), np.full(624, 3.0)))
    gate = frame_quality_gate(x, FS, FrameQualityPolicy(amp_mean_low=0.1, amp_mean_high=1.0))
    assert gate == [(0, True), (1, False)]
    with pytest.raises(InvalidConfig):
        frame_quality_gate(x, FS, FrameQualityPolicy(amp_mean_low=2.0, amp_mean_high=1.0))


def test_segment_record_skips_cycles_in_dropped_frames():
    rec = synthesize(SynthConfig(duration_s=60.0, seed=2))
    n = int(round(10 * FS))
    ppg = rec.ppg.copy()
    ppg[2 * n : 3 * n] *= 100.0
    seg = segment_record(Record("r", "s", ppg, abp=rec.abp, fs=FS))
    assert seg.cycles
    assert 2 not in seg.cycles_per_frame()
    for c in seg.cycles:
        assert c.end_idx < 2 * n or c.start_idx >= 3 * n


# ---------------------------------------------------------------- labels


def test_labels_match_generator():
    rec = synthesize(SynthConfig(duration_s=30.0, sbp_mmHg=120.0, dbp_mmHg=80.0))
    seg = segment_record(rec)
    t = np.array(seg.targets)
    assert len(t) == len(seg.cycles) > 20
    assert np.max(np.abs(t[:, 0] - 120.0)) < 0.5
    assert np.max(np.abs(t[:, 1] - 80.0)) < 0.5


def test_flat_abp_is_degenerate():
    with pytest.raises(DegenerateCycle):
        label_targets(np.full(100, 90.0), [Cycle(10, 20, 60, 30, 12)])


def test_step_abp_labels_are_bounded():
    abp = np.concatenate((np.linspace(80, 120, 50), np.linspace(90, 140, 50)))
    (sbp, dbp), = label_targets(abp, [Cycle(10, 40, 90, 50, 20)])
    assert 80 <= dbp < sbp <= 140


def test_cycles_json_round_trip():
    seg = segment_record(synthesize(SynthConfig(duration_s=30.0, notch_depth=0.4)))
    rows = json.loads(json.dumps(cycles_to_json(seg.cycles, seg.targets)))
    cycles, targets = cycles_from_json(rows)
    assert cycles == seg.cycles
    assert targets == seg.targets
