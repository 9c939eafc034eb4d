"""``pulseform`` command-line entry point.

Every subcommand runs one stage; ``pipeline`` chains them all. Failures print
a JSON object on stderr and exit with 2 (usage), 3 (validation), 4 (data) or
5 (numeric).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import model as M
from .config import load_config
from .errors import IoFailure, MalformedFile, NumericError, PulseformError, RecordRejected, ValidationError
from .evaluation import EvalReport, emit_report, read_predictions_csv, write_predictions_csv
from .features import NormStats, read_dataset, stack, write_dataset
from .pipeline import record_to_samples, samples_from_cycles
from .preprocess import BandpassSpec, Rejection, cleaning_report, preprocess_chain
from .segmentation import cycles_from_json, cycles_to_json, segment_record
from .training import cross_validate, train_fold
from .waveform import SynthConfig, cohort_configs, read_record, synthesize, write_record

log = logging.getLogger("pulseform")

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4, 5


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _write_json(path, doc):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="\n") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise IoFailure(str(exc), path=str(path)) from exc


# ---------------------------------------------------------------- stages


def cmd_synth(args, cfg):
    sc = SynthConfig(
        duration_s=args.duration,
        heart_rate_bpm=args.hr,
        sbp_mmHg=args.sbp,
        dbp_mmHg=args.dbp,
        notch_depth=args.notch_depth,
        noise_std=args.noise,
        baseline_drift_amp=args.drift,
        seed=cfg.seed,
        record_id=args.record_id or Path(args.out).name.removesuffix(".csv"),
        subject_id=args.subject_id or "synth",
    )
    write_record(synthesize(sc), args.out)


def _bandpass_from(args, cfg, fs):
    bp = cfg.bandpass
    return BandpassSpec(
        fs=fs,
        order=args.order if args.order is not None else bp.order,
        f_low=args.f_low if args.f_low is not None else bp.f_low,
        f_high=args.f_high if args.f_high is not None else bp.f_high,
    )


def cmd_preprocess(args, cfg):
    rec = read_record(args.inp)
    policy = cfg.cleaning
    if args.min_duration is not None:
        policy = replace(policy, min_duration_s=args.min_duration)
    policy.validate()
    spec = _bandpass_from(args, cfg, rec.fs)
    spec.validate()
    maf = args.maf_window if args.maf_window is not None else cfg.preprocess.maf_window
    out = preprocess_chain(rec, policy, spec, maf, cfg.preprocess.maf_passes)
    report = cleaning_report(rec.record_id, out if isinstance(out, Rejection) else list(out.segment_bounds()))
    if args.report:
        _write_json(args.report, report)
    if isinstance(out, Rejection):
        raise RecordRejected(f"record {rec.record_id} rejected: {out.reason}", path=args.inp, reason=out.reason)
    write_record(out, args.out)


def cmd_segment(args, cfg):
    rec = read_record(args.inp)
    seg_cfg = cfg.segmentation
    if args.frame_len is not None:
        seg_cfg = replace(seg_cfg, frame_len_s=args.frame_len)
    seg_cfg.validate()
    min_dist = args.min_distance if args.min_distance is not None else seg_cfg.min_distance_s
    seg = segment_record(rec, min_dist, seg_cfg.frame_policy())
    _write_json(args.out, cycles_to_json(seg.cycles, seg.targets))


def cmd_features(args, cfg):
    rec = read_record(args.record)
    try:
        rows = json.loads(Path(args.cycles).read_text())
    except OSError as exc:
        raise IoFailure(f"cannot read cycles: {exc}", path=args.cycles) from exc
    except json.JSONDecodeError as exc:
        raise MalformedFile(f"cycles file is not valid JSON: {exc}", path=args.cycles) from exc
    cycles, targets = cycles_from_json(rows)
    samples = samples_from_cycles(rec, cycles, targets, seq_len=cfg.model.T, first_id=args.first_id)
    write_dataset(samples, args.out, fmt=args.format)
    log.info("%d samples written to %s", len(samples), args.out)


def _train_config(args, cfg):
    tc = cfg.train
    over = {}
    for flag, key in (("epochs", "epochs"), ("batch_size", "batch_size"), ("lr", "lr"), ("folds", "folds")):
        v = getattr(args, flag, None)
        if v is not None:
            over[key] = v
    if getattr(args, "group_by", None) is not None:
        over["group_by"] = None if args.group_by == "none" else args.group_by
    return replace(tc, **over) if over else tc


def cmd_train(args, cfg):
    samples = read_dataset(args.dataset)
    tc = _train_config(args, cfg)
    idx = np.arange(len(samples))
    res = train_fold(samples, (idx, np.empty(0, dtype=np.int64)), cfg.model, tc, out_dir=None, fold_id=0)
    out = Path(args.out_dir)
    M.save_params(res.params, out / "checkpoint.pfck", extra={"norm_stats": res.norm_stats.to_json(), "seed": tc.seed})
    with open(out / "loss_curve.csv", "w", newline="\n") as fh:
        fh.write("epoch,train_mse,test_mse\n")
        for epoch, tr, te in res.loss_curve:
            fh.write(f"{epoch},{tr!r},{te!r}\n")
    _write_json(out / "train_report.json", {"seed": tc.seed, "n_samples": len(samples), "epochs": len(res.loss_curve),
                                            "final_train_mse": res.loss_curve[-1][1]})


def cmd_cv(args, cfg):
    samples = read_dataset(args.dataset)
    tc = _train_config(args, cfg)
    _, aggregate = cross_validate(samples, cfg.model, tc, out_dir=args.out_dir, parallel_folds=args.parallel_folds)
    print(json.dumps(aggregate["mean"], sort_keys=True))


def cmd_predict(args, cfg):
    params, extra = M.read_checkpoint(args.checkpoint)
    samples = read_dataset(args.dataset)
    stats = NormStats.from_json(extra["norm_stats"]) if extra and "norm_stats" in extra else None
    if stats is not None:
        samples = stats.apply(samples)
    x, y = stack(samples)
    pred = M.predict(x, params) if len(samples) else np.empty((0, 2))
    write_predictions_csv(args.out, [s.sample_id for s in samples], y, pred)


def cmd_evaluate(args, cfg):
    ids, t, p = read_predictions_csv(args.predictions)
    records = args.records if args.records is not None else len(ids)
    report = EvalReport.build(t, p, records, ids, extra={"seed": cfg.seed})
    emit_report(report, args.out_dir)


def cmd_pipeline(args, cfg):
    out = Path(args.out_dir or cfg.paths.out_dir)
    tc = _train_config(args, cfg)
    if args.synthetic:
        syn = cfg.synthetic
        raws = [
            synthesize(c)
            for c in cohort_configs(
                args.n_records or syn.n_records, cfg.seed, syn.duration_s, syn.noise_std, syn.drift,
                hr_jitter_bpm=syn.hr_jitter_bpm,
            )
        ]
    else:
        src = args.records_dir or cfg.paths.records_dir
        if src is None:
            raise UsageError("pipeline needs --synthetic or --records-dir")
        paths = sorted(Path(src).glob("*.csv"))
        if not paths:
            raise IoFailure(f"no records found in {src}", path=str(src))
        raws = [read_record(p) for p in paths]

    samples, summary = [], []
    seg = cfg.segmentation
    for rec in raws:
        spec = replace(cfg.bandpass, fs=rec.fs)
        s, info = record_to_samples(
            rec, cfg.cleaning, spec, seg.frame_policy(), seg.min_distance_s, cfg.model.T, len(samples),
            cfg.preprocess.maf_window, cfg.preprocess.maf_passes,
        )
        samples.extend(s)
        summary.append(info)
    write_dataset(samples, out / "dataset.bin")
    _, aggregate = cross_validate(samples, cfg.model, tc, out_dir=out / "cv", parallel_folds=args.parallel_folds)
    ids, t, p = read_predictions_csv(out / "cv" / "predictions.csv")
    n_records = len({s.source_record for s in samples})
    report = EvalReport.build(t, p, n_records, ids, extra={"seed": cfg.seed, "cv_mean": aggregate["mean"]})
    emit_report(report, out / "report")
    _write_json(out / "pipeline_summary.json", {"seed": cfg.seed, "config": cfg.to_json(), "records": summary,
                                                "n_samples": len(samples)})


# ---------------------------------------------------------------- parser


def _global_flags(top=True):
    # subcommands repeat the global flags; SUPPRESS keeps them from
    # overwriting values given before the subcommand name
    d = (lambda v: v) if top else (lambda v: argparse.SUPPRESS)
    g = argparse.ArgumentParser(add_help=False)
    g.add_argument("--config", default=d(None), help="pipeline config JSON (default: built-in defaults)")
    g.add_argument("--seed", type=int, default=d(None), help="global RNG seed, overrides the config (default: config seed, 0)")
    g.add_argument("--verbose", "-v", action="count", default=d(0), help="more logging; repeat for debug (default: 0)")
    return g


def _train_flags(p):
    p.add_argument("--epochs", type=int, default=None, help="training epochs (default: config, 400)")
    p.add_argument("--batch-size", type=int, default=None, help="mini-batch size (default: config, 128)")
    p.add_argument("--lr", type=float, default=None, help="Adam learning rate (default: config, 1e-4)")


class _HelpFormatter(argparse.HelpFormatter):
    """Append each flag's default unless its help already states one."""

    def _get_help_string(self, action):
        text = action.help or ""
        if "(default" in text or action.default is argparse.SUPPRESS or not action.option_strings:
            return text
        if action.required:
            return text + " (required)"
        if isinstance(action, (argparse._HelpAction, argparse._VersionAction)):
            return text
        return text + " (default: %(default)s)"


def build_parser():
    ap = _Parser(prog="pulseform", description="Cuff-less blood pressure estimation from PPG, one stage per subcommand.", parents=[_global_flags()],
                 formatter_class=_HelpFormatter)
    ap.add_argument("--version", action="version", version=f"pulseform {__version__}")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)
    g = _global_flags(top=False)
    fmt = _HelpFormatter

    p = sub.add_parser("synth", parents=[g], formatter_class=fmt, help="write a synthetic PPG/ABP record")
    p.add_argument("--duration", type=float, default=60.0, help="record length in seconds")
    p.add_argument("--hr", type=float, default=60.0, help="heart rate in bpm")
    p.add_argument("--sbp", type=float, default=120.0, help="systolic pressure in mmHg")
    p.add_argument("--dbp", type=float, default=80.0, help="diastolic pressure in mmHg")
    p.add_argument("--notch-depth", type=float, default=0.4, help="dicrotic lobe amplitude relative to systolic")
    p.add_argument("--noise", type=float, default=0.0, help="PPG Gaussian noise standard deviation")
    p.add_argument("--drift", type=float, default=0.0, help="baseline drift amplitude")
    p.add_argument("--record-id", default=None, help="record id (default: output file stem)")
    p.add_argument("--subject-id", default=None, help="subject id (default: synth)")
    p.add_argument("--out", required=True, help="output record path (<dir>/<id> or <dir>/<id>.csv)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", parents=[g], formatter_class=fmt, help="clean, band-pass and smooth a record")
    p.add_argument("--in", dest="inp", required=True, help="input record path")
    p.add_argument("--out", required=True, help="output record path")
    p.add_argument("--min-duration", type=float, default=None, help="minimum record length in s (default: config, 900)")
    p.add_argument("--f-low", type=float, default=None, help="pass-band low edge in Hz (default: config, 0.7)")
    p.add_argument("--f-high", type=float, default=None, help="pass-band high edge in Hz (default: config, 10)")
    p.add_argument("--order", type=int, default=None, help="Butterworth order (default: config, 5)")
    p.add_argument("--maf-window", type=int, default=None, help="moving-average window (default: config, 5)")
    p.add_argument("--report", default=None, help="write the cleaning report JSON here")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("segment", parents=[g], formatter_class=fmt, help="isolate and label cardiac cycles")
    p.add_argument("--in", dest="inp", required=True, help="preprocessed record path")
    p.add_argument("--out", required=True, help="cycles JSON output")
    p.add_argument("--min-distance", type=float, default=None, help="minimum peak spacing in s (default: config, 0.3)")
    p.add_argument("--frame-len", type=float, default=None, help="quality-gate frame in s (default: config, 10)")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("features", parents=[g], formatter_class=fmt, help="cycle features -> 48-cycle samples")
    p.add_argument("--cycles", required=True, help="cycles JSON from `segment`")
    p.add_argument("--record", required=True, help="the preprocessed record the cycles index into")
    p.add_argument("--out", required=True, help="dataset output path")
    p.add_argument("--format", choices=("bin", "csv"), default="bin", help="dataset format")
    p.add_argument("--first-id", type=int, default=0, help="sample id of the first window")
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("train", parents=[g], formatter_class=fmt, help="train one model on a whole dataset")
    p.add_argument("--dataset", required=True, help="dataset.bin")
    p.add_argument("--out-dir", required=True, help="output directory")
    _train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("cv", parents=[g], formatter_class=fmt, help="k-fold cross-validation")
    p.add_argument("--dataset", required=True, help="dataset.bin")
    p.add_argument("--out-dir", required=True, help="output directory")
    p.add_argument("--folds", type=int, default=None, help="number of folds (default: config, 5)")
    p.add_argument("--group-by", choices=("none", "subject"), default=None, help="fold unit (default: config, per sample)")
    p.add_argument("--parallel-folds", type=int, default=1, help="worker processes for folds")
    _train_flags(p)
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("predict", parents=[g], formatter_class=fmt, help="predict (SBP, DBP) for a dataset")
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--dataset", required=True, help="dataset.bin")
    p.add_argument("--out", required=True, help="predictions CSV")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", parents=[g], formatter_class=fmt, help="metrics, standards and plot data")
    p.add_argument("--predictions", required=True, help="predictions CSV")
    p.add_argument("--out-dir", required=True, help="output directory")
    p.add_argument("--records", type=int, default=None, help="record count for AAMI (default: number of rows)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("pipeline", parents=[g], formatter_class=fmt, help="synth/ingest -> ... -> evaluate")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--synthetic", action="store_true", help="generate a synthetic cohort")
    src.add_argument("--records-dir", default=None, help="directory of raw records")
    p.add_argument("--n-records", type=int, default=None, help="synthetic cohort size (default: config, 20)")
    p.add_argument("--out-dir", default=None, help="output directory (default: config paths.out_dir)")
    p.add_argument("--folds", type=int, default=None, help="number of folds (default: config, 5)")
    p.add_argument("--group-by", choices=("none", "subject"), default=None, help="fold unit (default: config)")
    p.add_argument("--parallel-folds", type=int, default=1, help="worker processes for folds")
    _train_flags(p)
    p.set_defaults(func=cmd_pipeline)
    return ap


def _exit_code(exc):
    if isinstance(exc, ValidationError):
        return EXIT_VALIDATION
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    return EXIT_DATA


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("pulseform: a subcommand is required (see --help)")
        logging.basicConfig(
            level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s"
        )
        cfg = load_config(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise UsageError("--seed must be non-negative")
            cfg = cfg.with_seed(args.seed)
        args.func(args, cfg)
    except UsageError as exc:
        print(json.dumps({"error": "usage", "message": str(exc)}), file=sys.stderr)
        return EXIT_USAGE
    except PulseformError as exc:
        print(json.dumps(exc.to_dict(), sort_keys=True), file=sys.stderr)
        return _exit_code(exc)
    except OSError as exc:
        print(json.dumps({"error": "data", "message": str(exc), "path": str(exc.filename)}), file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
