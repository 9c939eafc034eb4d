"""Record -> samples glue shared by the CLI and the test-suite."""
from __future__ import annotations

import logging

import numpy as np

from .errors import DegenerateCycle, LengthMismatch
from .features import N_FEATURES, SEQ_LEN, assemble_samples, compute_features, second_derivative
from .preprocess import CleaningPolicy, Rejection, preprocess_chain
from .segmentation import FrameQualityPolicy, segment_record
from .waveform import cohort_configs, synthesize

log = logging.getLogger(__name__)


def cycle_features(record, cycles):
    """Per-cycle feature rows plus a mask of cycles whose features failed."""
    per_frame = {}
    for c in cycles:
        per_frame[c.frame_id] = per_frame.get(c.frame_id, 0) + 1
    sd = np.zeros(len(record))
    for s, e in record.segment_bounds():
        if e - s >= 5:
            sd[s:e] = second_derivative(record.ppg[s:e], record.fs)
    rows, rejected = [], []
    for c in cycles:
        if c.end_idx >= len(record):
            raise LengthMismatch(f"cycle ending at {c.end_idx} lies outside the {len(record)}-sample record")
        try:
            rows.append(compute_features(c, record.ppg, sd, record.fs, per_frame[c.frame_id]).as_array())
            rejected.append(False)
        except DegenerateCycle as exc:
            log.debug("%s: %s", record.record_id, exc)
            rows.append(np.zeros(N_FEATURES))
            rejected.append(True)
    return np.array(rows).reshape(-1, N_FEATURES), np.array(rejected, dtype=bool)


def samples_from_cycles(record, cycles, targets, seq_len=SEQ_LEN, first_id=0):
    feats, rejected = cycle_features(record, cycles)
    return assemble_samples(
        cycles,
        feats,
        targets,
        seq_len,
        rejected,
        source_record=record.record_id,
        subject_id=record.subject_id,
        first_id=first_id,
    )


def record_to_samples(
    record,
    policy=CleaningPolicy(),
    spec=None,
    frame_policy=FrameQualityPolicy(),
    min_distance_s=0.3,
    seq_len=SEQ_LEN,
    first_id=0,
    maf_window=5,
    maf_passes=1,
):
    """Clean, filter, segment and window one raw record.

    Returns ``(samples, info)``; ``info`` carries the rejection or cycle counts.
    """
    clean = preprocess_chain(record, policy, spec, maf_window, maf_passes)
    if isinstance(clean, Rejection):
        return [], {"record_id": record.record_id, "rejected": clean.reason, "detail": clean.detail}
    seg = segment_record(clean, min_distance_s, frame_policy)
    samples = samples_from_cycles(clean, seg.cycles, seg.targets, seq_len, first_id)
    return samples, {"record_id": record.record_id, "cycles": len(seg.cycles), "samples": len(samples)}


def synthetic_cohort_samples(n_records, seed, duration_s=960.0, policy=CleaningPolicy(), hr_jitter_bpm=1.0, **kwargs):
    """Synthesize a cohort and run every record through ``record_to_samples``."""
    samples, infos = [], []
    for cfg in cohort_configs(n_records, seed, duration_s=duration_s, hr_jitter_bpm=hr_jitter_bpm):
        s, info = record_to_samples(synthesize(cfg), policy, first_id=len(samples), **kwargs)
        samples.extend(s)
        infos.append(info)
    return samples, infos
