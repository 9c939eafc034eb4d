"""Per-cycle morphology features and stacked 48-cycle model samples."""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .segmentation import second_derivative
from .errors import (
    CorruptFile,
    DegenerateCycle,
    InvalidConfig,
    IoFailure,
    MalformedFile,
    ShapeMismatch,
    TooFewSamples,
    VersionMismatch,
)

log = logging.getLogger(__name__)

_trapezoid = getattr(np, "trapezoid", None) or np.trapz  # renamed in numpy 2.0

SEQ_LEN = 48
N_FEATURES = 12

FEATURE_NAMES = (
    "td1",
    "trhp",
    "td2",
    "tp",
    "tfh",
    "td3",
    "pbf",
    "ppgi",
    "sd_tfhf",
    "sd_amp",
    "sdppgi",
    "td4",
)


@dataclass(frozen=True)
class FeatureVector:
    td1: float  # cycle duration, s
    trhp: float  # start -> half amplitude on the rise, s
    td2: float  # peak -> dicrotic notch, s (0 when no notch)
    tp: float  # start -> peak, s
    tfh: float  # peak -> half amplitude on the fall, s
    td3: float  # peak -> end foot, s
    pbf: float  # cycles in the frame
    ppgi: float  # area above the start foot, amplitude*s
    sd_tfhf: float  # start -> SDPPG main wave falling through half its peak, s
    sd_amp: float  # SDPPG maximum, amplitude/s^2
    sdppgi: float  # area of the positive SDPPG, amplitude/s
    td4: float  # SDPPG foot -> SDPPG peak, s

    def as_array(self):
        return np.array([getattr(self, n) for n in FEATURE_NAMES], dtype=np.float64)


def _rising_crossing(x, lo, hi, level):
    # first sub-sample position in [lo, hi] where x climbs through level
    for i in range(lo, hi):
        if x[i] < level <= x[i + 1]:
            return i + (level - x[i]) / (x[i + 1] - x[i])
    return float(lo)


def _falling_crossing(x, lo, hi, level):
    for i in range(lo, hi):
        if x[i] > level >= x[i + 1]:
            return i + (x[i] - level) / (x[i] - x[i + 1])
    return float(hi)


def compute_features(cycle, ppg, sdppg, fs, cycles_in_frame):
    s, p, e = cycle.start_idx, cycle.peak_idx, cycle.end_idx
    ppg = np.asarray(ppg, dtype=np.float64)
    sdppg = np.asarray(sdppg, dtype=np.float64)
    amp = ppg[p] - ppg[s]
    if not amp > 0:
        raise DegenerateCycle(f"peak does not rise above the foot in cycle at {s}")
    half = ppg[s] + 0.5 * amp

    t_rise = _rising_crossing(ppg, s, p, half)
    t_fall = _falling_crossing(ppg, p, e, half)

    sd_span = sdppg[s : e + 1]
    sd_peak = cycle.sd_peak_idx
    t_sd_fall = _falling_crossing(sdppg, sd_peak, e, 0.5 * sdppg[sd_peak])

    return FeatureVector(
        td1=(e - s) / fs,
        trhp=(t_rise - s) / fs,
        td2=0.0 if cycle.notch_idx is None else (cycle.notch_idx - p) / fs,
        tp=(p - s) / fs,
        tfh=(t_fall - p) / fs,
        td3=(e - p) / fs,
        pbf=float(cycles_in_frame),
        ppgi=float(_trapezoid(ppg[s : e + 1] - ppg[s]) / fs),
        sd_tfhf=(t_sd_fall - s) / fs,
        sd_amp=float(sd_span.max()),
        sdppgi=float(_trapezoid(np.maximum(sd_span, 0.0)) / fs),
        td4=(sd_peak - cycle.sd_foot_idx) / fs,
    )


def record_features(record, segmented):
    """Feature matrix (n_cycles x 12) for a segmented record."""
    per_frame = segmented.cycles_per_frame()
    # SDPPG is taken per clean segment, exactly as during cycle extraction
    sd = np.zeros(len(record))
    for s, e in record.segment_bounds():
        if e - s >= 5:
            sd[s:e] = second_derivative(record.ppg[s:e], record.fs)
    out = np.empty((len(segmented.cycles), N_FEATURES))
    for i, c in enumerate(segmented.cycles):
        out[i] = compute_features(c, record.ppg, sd, record.fs, per_frame[c.frame_id]).as_array()
    return out


# ---------------------------------------------------------------- samples


@dataclass(eq=False)
class FrameSample:
    features: np.ndarray
    sbp: float
    dbp: float
    sample_id: int = 0
    source_record: str = ""
    subject_id: str = ""
    missing_notch: int = 0

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[1] != N_FEATURES:
            raise ShapeMismatch(f"features must be (T, {N_FEATURES}), got {self.features.shape}")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("non-finite feature value")
        if not self.sbp > self.dbp > 0:
            raise ValueError(f"need sbp > dbp > 0, got {self.sbp}, {self.dbp}")


def contiguous_runs(cycles, rejected=None):
    """Split cycle indices into runs where each cycle starts at the previous one's end."""
    runs, cur = [], []
    for i, c in enumerate(cycles):
        if rejected is not None and rejected[i]:
            if cur:
                runs.append(cur)
            cur = []
            continue
        if cur and cycles[cur[-1]].end_idx != c.start_idx:
            runs.append(cur)
            cur = []
        cur.append(i)
    if cur:
        runs.append(cur)
    return runs


def assemble_samples(
    cycles, feature_vectors, targets, seq_len=SEQ_LEN, rejected=None, source_record="", subject_id="", first_id=0
):
    """Non-overlapping windows of ``seq_len`` contiguous cycles.

    Windows never straddle a gap (a rejected cycle, a dropped cycle, or a
    cleaning boundary); leftovers shorter than ``seq_len`` are discarded.
    Targets are the mean per-cycle SBP and DBP over the window.
    """
    if not len(cycles) == len(feature_vectors) == len(targets):
        raise ShapeMismatch("cycles, features and targets must align")
    fv = np.asarray(
        [f.as_array() if isinstance(f, FeatureVector) else f for f in feature_vectors], dtype=np.float64
    ).reshape(len(cycles), N_FEATURES)
    tg = np.asarray(targets, dtype=np.float64).reshape(len(cycles), 2)
    samples = []
    sid = first_id
    for run in contiguous_runs(cycles, rejected):
        for w in range(len(run) // seq_len):
            idx = run[w * seq_len : (w + 1) * seq_len]
            sbp, dbp = tg[idx].mean(axis=0)
            samples.append(
                FrameSample(
                    features=fv[idx].copy(),
                    sbp=float(sbp),
                    dbp=float(dbp),
                    sample_id=sid,
                    source_record=source_record,
                    subject_id=subject_id,
                    missing_notch=int(sum(cycles[i].notch_idx is None for i in idx)),
                )
            )
            sid += 1
    return samples


@dataclass
class NormStats:
    means: np.ndarray
    stds: np.ndarray
    flagged: list = field(default_factory=list)

    def apply(self, samples):
        out = []
        for s in samples:
            f = (s.features - self.means) / self.stds
            out.append(
                FrameSample(f, s.sbp, s.dbp, s.sample_id, s.source_record, s.subject_id, s.missing_notch)
            )
        return out

    def apply_array(self, x):
        return (np.asarray(x) - self.means) / self.stds

    def to_json(self):
        return {"means": self.means.tolist(), "stds": self.stds.tolist(), "flagged": list(self.flagged)}

    @classmethod
    def from_json(cls, obj):
        return cls(np.asarray(obj["means"], dtype=np.float64), np.asarray(obj["stds"], dtype=np.float64), list(obj["flagged"]))


def fit_norm_stats(samples):
    if len(samples) < 2:
        raise TooFewSamples("normalization needs at least 2 samples")
    stacked = np.concatenate([s.features for s in samples], axis=0)
    means = stacked.mean(axis=0)
    stds = stacked.std(axis=0)
    flagged = [int(i) for i in np.flatnonzero(stds == 0)]
    if flagged:
        log.warning("zero-variance feature columns %s; std set to 1", [FEATURE_NAMES[i] for i in flagged])
        stds = np.where(stds == 0, 1.0, stds)
    return NormStats(means, stds, flagged)


def normalize_dataset(samples):
    stats = fit_norm_stats(samples)
    return stats.apply(samples), stats


def stack(samples):
    """``(X, y)`` arrays of shape (N, T, 12) and (N, 2)."""
    x = np.stack([s.features for s in samples]) if samples else np.empty((0, SEQ_LEN, N_FEATURES))
    y = np.array([[s.sbp, s.dbp] for s in samples], dtype=np.float64).reshape(-1, 2)
    return x, y


# ---------------------------------------------------------------- dataset file

DATASET_MAGIC = b"PFDS"
DATASET_VERSION = 1
_HEADER = struct.Struct("<4sIQII")


def write_dataset(samples, path, fmt="bin"):
    """Write samples as the binary dataset format or, with ``fmt="csv"``, a flat table."""
    if fmt not in ("bin", "csv"):
        raise InvalidConfig(f"unknown dataset format {fmt!r}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    seq_len = samples[0].features.shape[0] if samples else SEQ_LEN
    if fmt == "csv":
        cols = [f"f{t}_{n}" for t in range(seq_len) for n in FEATURE_NAMES]
        with open(path, "w", newline="\n") as fh:
            fh.write(",".join([*cols, "sbp", "dbp"]) + "\n")
            for s in samples:
                vals = [repr(float(v)) for v in s.features.ravel()]
                fh.write(",".join([*vals, repr(s.sbp), repr(s.dbp)]) + "\n")
        return
    try:
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, len(samples), seq_len, N_FEATURES))
            for s in samples:
                if s.features.shape != (seq_len, N_FEATURES):
                    raise ShapeMismatch("all samples must share one sequence length")
                fh.write(np.ascontiguousarray(s.features, dtype="<f8").tobytes())
                fh.write(struct.pack("<ddQ", s.sbp, s.dbp, s.sample_id))
    except OSError as exc:
        raise IoFailure(str(exc), path=str(path)) from exc
    sources = {str(s.sample_id): [s.source_record, s.subject_id] for s in samples}
    with open(_sources_path(path), "w", newline="\n") as fh:
        json.dump(sources, fh, sort_keys=True)
        fh.write("\n")


def _sources_path(path):
    path = Path(path)
    return path.with_name(path.name + ".sources.json")


def read_dataset(path):
    path = Path(path)
    if not path.exists():
        raise IoFailure(f"no such dataset: {path}", path=str(path))
    blob = path.read_bytes()
    if len(blob) < _HEADER.size:
        raise CorruptFile("dataset shorter than its header", path=str(path))
    magic, version, n, seq_len, n_feat = _HEADER.unpack_from(blob, 0)
    if magic != DATASET_MAGIC:
        raise MalformedFile(f"bad magic {magic!r}", path=str(path))
    if version != DATASET_VERSION:
        raise VersionMismatch(f"dataset version {version}, expected {DATASET_VERSION}", path=str(path))
    if n_feat != N_FEATURES:
        raise ShapeMismatch(f"dataset has L={n_feat}, expected {N_FEATURES}")
    per = seq_len * n_feat * 8 + 24
    if len(blob) != _HEADER.size + n * per:
        raise CorruptFile(f"expected {_HEADER.size + n * per} bytes, found {len(blob)}", path=str(path))
    sources = {}
    sp = _sources_path(path)
    if sp.exists():
        sources = json.loads(sp.read_text())
    samples = []
    off = _HEADER.size
    for _ in range(n):
        feats = np.frombuffer(blob, dtype="<f8", count=seq_len * n_feat, offset=off).reshape(seq_len, n_feat)
        off += seq_len * n_feat * 8
        sbp, dbp, sid = struct.unpack_from("<ddQ", blob, off)
        off += 24
        rec, subj = sources.get(str(sid), ["", ""])
        samples.append(FrameSample(feats.astype(np.float64), sbp, dbp, sid, rec, subj))
    return samples
