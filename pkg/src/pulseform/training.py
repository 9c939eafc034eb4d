"""k-fold cross-validation and the mini-batch Adam training loop."""
from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import model as M
from . import tensorgrad as tg
from .errors import InvalidConfig, IoFailure, NonFiniteDetected, NonFiniteGradient, NonFiniteLoss, TooFewSamples
from .evaluation import CHANNELS, EvalReport, write_predictions_csv
from .features import fit_norm_stats, stack

log = logging.getLogger(__name__)

DIVERGENCE_FACTOR = 10.0
DIVERGENCE_EPOCHS = 20


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    epochs: int = 400
    lr: float = 1e-4
    dropout_p: float = 0.15
    seed: int = 0
    folds: int = 5
    wd_max: float = 1e-4
    early_stop_patience: Optional[int] = None
    group_by: Optional[str] = None  # None (per sample) or "subject"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.folds < 2:
            raise InvalidConfig("folds must be at least 2")
        if self.batch_size < 1 or self.epochs < 1:
            raise InvalidConfig("batch_size and epochs must be at least 1")
        if not self.lr >= 0 or not self.wd_max >= 0:
            raise InvalidConfig("lr and wd_max must be non-negative")
        if not 0 <= self.dropout_p < 1:
            raise InvalidConfig("dropout_p must lie in [0, 1)")
        if self.seed < 0:
            raise InvalidConfig("seed must be a non-negative integer")
        if self.early_stop_patience is not None and self.early_stop_patience < 1:
            raise InvalidConfig("early_stop_patience must be positive")
        if self.group_by not in (None, "subject"):
            raise InvalidConfig(f"group_by must be None or 'subject', got {self.group_by!r}")

    @classmethod
    def from_json(cls, obj):
        unknown = set(obj) - {f.name for f in fields(cls)}
        if unknown:
            raise InvalidConfig(f"unknown train config keys {sorted(unknown)}")
        return cls(**obj)


@dataclass
class FoldResult:
    fold_id: int
    train_indices: np.ndarray
    test_indices: np.ndarray
    metrics: Optional[EvalReport]
    final_params_path: Optional[str]
    loss_curve: list  # [(epoch, train_mse, test_mse), ...]
    params: M.ModelParams = field(repr=False, default=None)
    norm_stats: object = field(repr=False, default=None)
    test_predictions: np.ndarray = field(repr=False, default=None)


def make_folds(n, k, seed):
    """Shuffle ``range(n)`` once and cut it into ``k`` contiguous test chunks.

    Chunk sizes differ by at most one; the remainder goes to the earliest folds.
    """
    if k < 2:
        raise InvalidConfig("k must be at least 2")
    if n < k:
        raise TooFewSamples(f"{n} samples cannot fill {k} folds")
    order = np.random.default_rng(seed).permutation(n)
    chunks = np.array_split(order, k)
    out = []
    for i, test in enumerate(chunks):
        train = np.concatenate([c for j, c in enumerate(chunks) if j != i])
        out.append((np.sort(train), np.sort(test)))
    return out


def make_group_folds(groups, k, seed):
    """Folds whose test sets hold whole groups (e.g. subjects)."""
    groups = np.asarray(groups)
    uniq = np.unique(groups)
    group_folds = make_folds(len(uniq), k, seed)
    out = []
    for _, test_g in group_folds:
        mask = np.isin(groups, uniq[test_g])
        out.append((np.flatnonzero(~mask), np.flatnonzero(mask)))
    return out


def fold_rngs(seed, fold_id):
    """Independent (init, shuffle, dropout) generators for one fold."""
    children = np.random.SeedSequence([int(seed), int(fold_id)]).spawn(3)
    return [np.random.default_rng(c) for c in children]


def _mse(params, x, y):
    if x.shape[0] == 0:
        return float("nan")
    pred = M.predict(x, params)
    return float(np.mean((pred - y) ** 2))


def train_fold(samples, fold, model_config, train_config, out_dir=None, fold_id=0):
    """Train one fold; ``fold`` is a ``(train_indices, test_indices)`` pair."""
    train_idx, test_idx = (np.asarray(a, dtype=np.int64) for a in fold)
    if np.intersect1d(train_idx, test_idx).size:
        raise InvalidConfig("train and test indices overlap")
    if train_idx.size < 2:
        raise TooFewSamples("a fold needs at least 2 training samples")
    train_s = [samples[i] for i in train_idx]
    test_s = [samples[i] for i in test_idx]

    # normalisation and output scaling come from the training split only
    stats = fit_norm_stats(train_s)
    x_tr, y_tr = stack(stats.apply(train_s))
    x_te, y_te = stack(stats.apply(test_s))
    cfg = replace(
        model_config,
        dropout_p=train_config.dropout_p,
        target_mean=tuple(y_tr.mean(axis=0)),
        target_std=tuple(np.maximum(y_tr.std(axis=0), 1e-6)),
    )

    init_rng, shuffle_rng, drop_rng = fold_rngs(train_config.seed, fold_id)
    params = M.init_params(cfg, init_rng)
    plist = list(params)
    opt = tg.AdamState(lr=train_config.lr)
    n = x_tr.shape[0]
    bs = train_config.batch_size

    curve = []
    initial = None
    over = 0
    best, stale = np.inf, 0
    for epoch in range(train_config.epochs):
        opt.weight_decay = tg.cosine_decay(train_config.wd_max, epoch, train_config.epochs)
        order = shuffle_rng.permutation(n)
        for lo in range(0, n, bs):
            idx = order[lo : lo + bs]
            params.zero_grad()
            try:
                pred = M.forward(x_tr[idx], params, cfg, mode="train", rng=drop_rng)
                loss = tg.mse_loss(pred, y_tr[idx])
                tg.backward(loss)
            except (NonFiniteDetected, NonFiniteGradient) as exc:
                raise NonFiniteLoss(f"fold {fold_id} diverged at epoch {epoch + 1}: {exc}",
                                    fold=fold_id, epoch=epoch + 1) from exc
            tg.adam_step(opt, plist)

        train_mse = _mse(params, x_tr, y_tr)
        test_mse = _mse(params, x_te, y_te)
        curve.append((epoch + 1, train_mse, test_mse))
        if not np.isfinite(train_mse):
            raise NonFiniteLoss(f"fold {fold_id}: non-finite training loss at epoch {epoch + 1}",
                                fold=fold_id, epoch=epoch + 1)
        if initial is None:
            initial = train_mse
        over = over + 1 if train_mse > DIVERGENCE_FACTOR * initial else 0
        if over >= DIVERGENCE_EPOCHS:
            raise NonFiniteLoss(
                f"fold {fold_id}: training loss above {DIVERGENCE_FACTOR}x its initial value "
                f"for {DIVERGENCE_EPOCHS} epochs",
                fold=fold_id, epoch=epoch + 1, initial=initial, current=train_mse,
            )
        if train_config.early_stop_patience is not None:
            if train_mse < best:
                best, stale = train_mse, 0
            else:
                stale += 1
                if stale >= train_config.early_stop_patience:
                    log.info("fold %d: early stop at epoch %d", fold_id, epoch + 1)
                    break
        log.debug("fold %d epoch %d train %.4f test %.4f", fold_id, epoch + 1, train_mse, test_mse)

    test_pred = M.predict(x_te, params) if x_te.shape[0] else np.empty((0, 2))
    report = None
    if x_te.shape[0] >= 2 and np.all(np.ptp(y_te, axis=0) > 0):
        records = len({s.source_record for s in test_s})
        report = EvalReport.build(y_te, test_pred, records, [s.sample_id for s in test_s])

    ckpt_path = None
    if out_dir is not None:
        ckpt_path = _persist_fold(out_dir, fold_id, params, stats, curve, report, train_idx, test_idx, train_config)
    return FoldResult(
        fold_id=fold_id,
        train_indices=train_idx,
        test_indices=test_idx,
        metrics=report,
        final_params_path=ckpt_path,
        loss_curve=curve,
        params=params,
        norm_stats=stats,
        test_predictions=test_pred,
    )


def _persist_fold(out_dir, fold_id, params, stats, curve, report, train_idx, test_idx, train_config):
    fold_dir = Path(out_dir) / f"fold_{fold_id}"
    try:
        fold_dir.mkdir(parents=True, exist_ok=True)
        ckpt = fold_dir / "checkpoint.pfck"
        M.save_params(params, ckpt, extra={"norm_stats": stats.to_json(), "seed": train_config.seed, "fold": fold_id})
        with open(fold_dir / "loss_curve.csv", "w", newline="\n") as fh:
            fh.write("epoch,train_mse,test_mse\n")
            for epoch, tr, te in curve:
                fh.write(f"{epoch},{tr!r},{te!r}\n")
        doc = {
            "fold_id": fold_id,
            "seed": train_config.seed,
            "train_config": asdict(train_config),
            "train_indices": train_idx.tolist(),
            "test_indices": test_idx.tolist(),
            "checkpoint": ckpt.name,
            "metrics": None if report is None else report.to_json(),
        }
        with open(fold_dir / "fold_report.json", "w", newline="\n") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise IoFailure(str(exc), path=str(fold_dir)) from exc
    return str(ckpt)


def _fold_job(args):
    samples, fold, model_config, train_config, out_dir, fold_id = args
    return train_fold(samples, fold, model_config, train_config, out_dir, fold_id)


def cross_validate(samples, model_config, train_config, out_dir=None, parallel_folds=1):
    """Train every fold and aggregate test metrics as the mean over folds.

    Returns ``(fold_results, aggregate)``. ``aggregate`` holds per-fold and
    mean per-channel metrics plus a pooled report over all test predictions.
    """
    n = len(samples)
    if n < train_config.folds:
        raise TooFewSamples(f"{n} samples cannot fill {train_config.folds} folds")
    if train_config.group_by == "subject":
        folds = make_group_folds([s.subject_id for s in samples], train_config.folds, train_config.seed)
    else:
        folds = make_folds(n, train_config.folds, train_config.seed)

    jobs = [(samples, f, model_config, train_config, out_dir, i) for i, f in enumerate(folds)]
    if parallel_folds > 1:
        with ProcessPoolExecutor(max_workers=parallel_folds) as pool:
            results = list(pool.map(_fold_job, jobs))
    else:
        results = [_fold_job(j) for j in jobs]

    aggregate = aggregate_results(samples, results, train_config)
    if out_dir is not None:
        out = Path(out_dir)
        ids = np.concatenate([[samples[i].sample_id for i in r.test_indices] for r in results]).astype(np.int64)
        y = np.concatenate([stack([samples[i] for i in r.test_indices])[1] for r in results])
        p = np.concatenate([r.test_predictions for r in results])
        order = np.argsort(ids, kind="mergesort")
        write_predictions_csv(out / "predictions.csv", ids[order], y[order], p[order])
        with open(out / "cv_report.json", "w", newline="\n") as fh:
            json.dump(aggregate, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return results, aggregate


_METRIC_KEYS = ("r2", "me_mmHg", "mae_mmHg", "rmse_mmHg", "std_mmHg")


def aggregate_results(samples, results, train_config):
    per_fold = []
    for r in results:
        entry = {"fold_id": r.fold_id, "n_train": int(r.train_indices.size), "n_test": int(r.test_indices.size)}
        if r.metrics is not None:
            entry["channels"] = {
                ch: {k: r.metrics.channels[ch].to_json()[k] for k in _METRIC_KEYS} for ch in CHANNELS
            }
        per_fold.append(entry)
    scored = [e for e in per_fold if "channels" in e]
    mean = {
        ch: {k: float(np.mean([e["channels"][ch][k] for e in scored])) for k in _METRIC_KEYS} for ch in CHANNELS
    } if scored else None
    return {
        "seed": train_config.seed,
        "folds": train_config.folds,
        "n_samples": len(samples),
        "per_fold": per_fold,
        "mean": mean,
    }


def mean_predictor_mae(samples, results):
    """Per-channel MAE of predicting each fold's training-target mean on its test split."""
    errs = []
    for r in results:
        _, y_tr = stack([samples[i] for i in r.train_indices])
        _, y_te = stack([samples[i] for i in r.test_indices])
        errs.append(np.abs(y_te - y_tr.mean(axis=0)))
    return np.concatenate(errs).mean(axis=0)
