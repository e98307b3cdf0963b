"""Batch command-line front end.

Subcommands: ingest, train, eval, profile, export.  Every run writes a
manifest JSON next to its outputs.  Exit codes: 0 success, 1 internal
error, 2 usage/input error.  SPKF_LOG={error|info|debug} controls logging.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    Dataset,
    balance,
    extract_phases,
    kfold_split,
    load_dataset,
    parse_edf,
    read_annotations_csv,
    save_dataset,
    segment_interval,
    standardize_recording,
)
from .model import (
    SpikingConformer,
    build_model,
    count_parameters,
    detection_config,
    load_checkpoint,
    prediction_config,
    read_config,
    save_checkpoint,
)
from .profiling import (
    count_ann_ops,
    count_snn_ops,
    efficiency_ratio,
    format_op_table,
    run_outcome,
    skip_report,
    write_op_report_csv,
)
from .training import TrainConfig, evaluate, metrics, train

log = logging.getLogger("spiking_conformer.cli")


class UsageError(Exception):
    """Input/usage problems that should exit with code 2."""


def _setup_logging():
    level = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}.get(
        os.environ.get("SPKF_LOG", "info").lower(), logging.INFO
    )
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _write_manifest(out_dir: Path, command: str, args: argparse.Namespace, started: float):
    manifest = {
        "command": command,
        "config": getattr(args, "config", None),
        "seed": getattr(args, "seed", None),
        "inputs": {
            key: getattr(args, key)
            for key in ("edf_dir", "annotations", "dataset", "checkpoint")
            if getattr(args, key, None)
        },
        "out_dir": str(out_dir),
        "engine_version": __version__,
        "duration_s": round(time.time() - started, 3),
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "run_manifest.json", "w") as fp:
        json.dump(manifest, fp, indent=2, sort_keys=True)


def _model_config(args) -> tuple:
    if getattr(args, "config", None):
        cfg, seed = read_config(args.config)
        if getattr(args, "seed", None) is not None:
            seed = args.seed
        return cfg, seed
    preset = detection_config if args.task == "detection" else prediction_config
    cfg = preset(t_th=getattr(args, "t_th", 2))
    return cfg, args.seed if args.seed is not None else 0


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_ingest(args) -> int:
    out_dir = Path(args.out)
    started = time.time()
    edf_dir = Path(args.edf_dir)
    if not edf_dir.is_dir():
        raise UsageError(f"EDF directory not found: {edf_dir}")
    ann_path = Path(args.annotations)
    if not ann_path.is_file():
        raise UsageError(f"annotation file not found: {ann_path}")
    annotations = read_annotations_csv(ann_path)
    edf_files = sorted(edf_dir.glob("*.edf"))
    if not edf_files:
        raise UsageError(f"no .edf files in {edf_dir}")

    def ingest_one(path: Path):
        try:
            rec = standardize_recording(parse_edf(path))
        except Exception as exc:
            raise UsageError(f"failed to parse {path.name}: {exc}") from exc
        anns = [a for a in annotations if a.file_id == path.stem]
        phases = extract_phases(rec, anns, guard_s=args.guard)
        pos, neg = [], []
        counts = {"ictal": 0, "pre_ictal": 0, "inter_ictal": 0}
        for iv in phases:
            stride = args.stride_inter if iv.phase == "inter_ictal" else args.stride_ictal
            segs = segment_interval(iv, rec, stride_s=stride)
            counts[iv.phase] += len(segs)
            (neg if iv.phase == "inter_ictal" else pos).extend(segs)
        return path.stem, pos, neg, counts

    all_pos, all_neg = [], []
    totals = {"ictal": 0, "pre_ictal": 0, "inter_ictal": 0}
    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        for stem, pos, neg, counts in pool.map(ingest_one, edf_files):
            all_pos.extend(pos)
            all_neg.extend(neg)
            for key, val in counts.items():
                totals[key] += val
            log.info("%s: %s", stem, counts)
    for phase, count in totals.items():
        print(f"{phase}_segments={count}")
        if count == 0:
            log.warning("phase %s produced no segments", phase)
    if not all_pos or not all_neg:
        raise UsageError("need at least one positive and one negative segment")
    dataset = balance(all_pos, all_neg, target_ratio=args.ratio, seed=args.seed or 0)
    dataset.folds = kfold_split(len(dataset), k=args.folds, seed=args.seed or 0)
    save_dataset(dataset, out_dir)
    with open(out_dir / "ingest_flags.json", "w") as fp:
        json.dump({"stride_ictal": args.stride_ictal, "stride_inter": args.stride_inter,
                   "guard": args.guard, "ratio": args.ratio, "folds": args.folds}, fp)
    print(f"dataset_segments={len(dataset)}")
    _write_manifest(out_dir, "ingest", args, started)
    return 0


def cmd_train(args) -> int:
    out_dir = Path(args.out)
    started = time.time()
    dataset = _load_dataset_arg(args.dataset)
    cfg, seed = _model_config(args)
    problems = []
    if dataset.X.shape[1] != cfg.ch or dataset.X.shape[2] != cfg.sample_len:
        problems.append(
            f"dataset segments {dataset.X.shape[1:]} do not match model "
            f"({cfg.ch}, {cfg.sample_len})"
        )
    if args.epochs < 1:
        problems.append("--epochs must be >= 1")
    if problems:
        raise UsageError("; ".join(problems))
    folds = dataset.folds or kfold_split(len(dataset), k=args.folds, seed=seed)
    tcfg = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        optimizer=args.optimizer,
        seed=seed,
        early_stop_train_acc=args.early_stop,
    )
    model = build_model(cfg, seed)
    log.info("model parameters: %d", count_parameters(cfg))
    out_dir.mkdir(parents=True, exist_ok=True)
    results = _train_folds(model, dataset, folds, tcfg, args.jobs, out_dir)
    _write_metrics_csv(out_dir / "metrics.csv", results)
    sens = [r.sens for r in results if r.sens is not None]
    spec = [r.spec for r in results if r.spec is not None]
    accs = [r.acc for r in results]
    print(f"mean_sens={np.mean(sens):.2f}" if sens else "mean_sens=undefined")
    print(f"mean_spec={np.mean(spec):.2f}" if spec else "mean_spec=undefined")
    print(f"mean_acc={np.mean(accs):.2f}")
    _write_manifest(out_dir, "train", args, started)
    return 0


def _train_folds(model, dataset, folds, tcfg, jobs, out_dir):
    if jobs <= 1 or len(folds) == 1:
        return train(model, dataset.X, dataset.y, folds, tcfg, checkpoint_dir=out_dir)

    def one(fold_id):
        res = train(model, dataset.X, dataset.y, [folds[fold_id]], tcfg)
        r = res[0]
        r.fold = fold_id
        save_checkpoint(r.model, out_dir / f"fold{fold_id}.ckpt")
        return r

    with ThreadPoolExecutor(max_workers=jobs) as pool:
        results = list(pool.map(one, range(len(folds))))
    return sorted(results, key=lambda r: r.fold)


def _write_metrics_csv(path, results):
    with open(path, "w", newline="") as fp:
        w = csv.writer(fp)
        w.writerow(["fold", "sens", "spec", "acc", "skip_reduction_percent",
                    "add_ops", "mul_ops"])
        for r in results:
            skip_pct = ""
            if r.skip is not None:
                total = r.skip.updates_performed + r.skip.updates_skipped
                skip_pct = f"{100.0 * r.skip.updates_skipped / total:.4f}" if total else "0"
            w.writerow([
                r.fold,
                "" if r.sens is None else f"{r.sens:.4f}",
                "" if r.spec is None else f"{r.spec:.4f}",
                f"{r.acc:.4f}",
                skip_pct, "", "",
            ])


def _load_dataset_arg(path_str: str) -> Dataset:
    path = Path(path_str)
    if not path.exists():
        raise UsageError(f"dataset not found: {path}")
    if path.is_file():
        path = path.parent
    try:
        return load_dataset(path)
    except FileNotFoundError as exc:
        raise UsageError(f"not a dataset directory (missing {exc.filename})") from exc


def cmd_eval(args) -> int:
    started = time.time()
    out_dir = Path(args.out)
    model = _load_checkpoint_arg(args.checkpoint)
    dataset = _load_dataset_arg(args.dataset)
    cm, _, skip = evaluate(model, dataset.X, dataset.y, approx_enabled=args.approx)
    sens, spec, acc = metrics(cm)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "eval.csv", "w", newline="") as fp:
        w = csv.writer(fp)
        w.writerow(["tp", "fp", "tn", "fn", "sens", "spec", "acc"])
        w.writerow([cm.tp, cm.fp, cm.tn, cm.fn, sens, spec, acc])
    print(f"sens={sens} spec={spec} acc={acc}")
    if skip is not None:
        for line in skip.report_lines():
            print(line)
    _write_manifest(out_dir, "eval", args, started)
    return 0


def _load_checkpoint_arg(path_str: str) -> SpikingConformer:
    path = Path(path_str)
    if not path.is_file():
        raise UsageError(f"checkpoint not found: {path}")
    try:
        return load_checkpoint(path)
    except Exception as exc:
        raise UsageError(f"cannot load checkpoint {path.name}: {exc}") from exc


def cmd_profile(args) -> int:
    started = time.time()
    out_dir = Path(args.out)
    model = _load_checkpoint_arg(args.checkpoint)
    dataset = _load_dataset_arg(args.dataset)
    X, y = dataset.X, dataset.y
    if args.max_segments and X.shape[0] > args.max_segments:
        X, y = X[: args.max_segments], y[: args.max_segments]
    out_dir.mkdir(parents=True, exist_ok=True)

    exact = run_outcome(model, X, y, approx_enabled=False, max_op_segments=args.op_segments)
    n_counted = min(args.op_segments, X.shape[0])
    ann = count_ann_ops(model.cfg)
    mean_adds = exact.tally.adds / n_counted
    mean_muls = exact.tally.muls / n_counted
    from .profiling import OpTally

    ratio = efficiency_ratio(
        OpTally.from_totals(int(mean_adds), max(1, int(mean_muls))), ann
    )
    print(f"snn_mean_adds={mean_adds:.0f}")
    print(f"snn_mean_core_muls={mean_muls:.0f}")
    print(f"ann_total_ops={ann.grand_total}")
    print(f"efficiency_ratio={ratio:.2f}")

    sweep = range(0, model.cfg.T + 1) if args.tth_sweep else [model.cfg.t_th]
    rows = []
    for t_th in sweep:
        from dataclasses import replace

        m = SpikingConformer(
            replace(model.cfg, t_th=t_th), model.params, model.bn_running, model.seed
        )
        approx = run_outcome(m, X, y, approx_enabled=True, max_op_segments=args.op_segments)
        rep = skip_report(exact, approx)
        rows.append((t_th, rep))
        print(
            f"t_th={t_th} reduction={rep.reduction_percent:.2f}% "
            f"adds={approx.tally.adds / n_counted:.0f} "
            f"divergent={rep.divergent_predictions} acc_delta={rep.acc_delta}"
        )
        write_op_report_csv(
            out_dir / f"ops_tth{t_th}.csv", approx.tally, approx.layer_skip, ratio
        )
    write_op_report_csv(out_dir / "ops_exact.csv", exact.tally, None, ratio)
    with open(out_dir / "tth_sweep.csv", "w", newline="") as fp:
        w = csv.writer(fp)
        w.writerow(["t_th", "reduction_percent", "divergent_predictions", "acc_delta",
                    "adds_approx"])
        for t_th, rep in rows:
            w.writerow([t_th, f"{rep.reduction_percent:.4f}", rep.divergent_predictions,
                        rep.acc_delta, rep.adds_approx])
    print(format_op_table(exact.tally))
    _write_manifest(out_dir, "profile", args, started)
    return 0


def cmd_export(args) -> int:
    """Merge per-run metrics CSVs into one plot-ready table."""
    started = time.time()
    out_dir = Path(args.out)
    rows = []
    for run_dir in args.runs:
        path = Path(run_dir) / "metrics.csv"
        if not path.is_file():
            raise UsageError(f"no metrics.csv in {run_dir}")
        with open(path, newline="") as fp:
            for row in csv.DictReader(fp):
                row["run"] = Path(run_dir).name
                rows.append(row)
    if not rows:
        raise UsageError("nothing to export")
    out_dir.mkdir(parents=True, exist_ok=True)
    fields = ["run", "fold", "sens", "spec", "acc", "skip_reduction_percent",
              "add_ops", "mul_ops"]
    with open(out_dir / "export.csv", "w", newline="") as fp:
        w = csv.DictWriter(fp, fieldnames=fields, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
    print(f"exported_rows={len(rows)}")
    _write_manifest(out_dir, "export", args, started)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spiking-conformer",
        description="Spiking convolutional transformer pipeline for EEG seizure tasks",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=str, default=None, help="key=value config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--jobs", type=int, default=1)
        p.add_argument("--out", type=str, required=True, help="output directory")

    p = sub.add_parser("ingest", help="EDF -> labeled, balanced 5 s segments")
    common(p)
    p.add_argument("--edf-dir", required=True)
    p.add_argument("--annotations", required=True, help="CSV: file_id,onset_s,offset_s")
    p.add_argument("--stride-ictal", type=float, default=1.0, dest="stride_ictal")
    p.add_argument("--stride-inter", type=float, default=5.0, dest="stride_inter")
    p.add_argument("--guard", type=float, default=1800.0)
    p.add_argument("--ratio", type=float, default=1.0)
    p.add_argument("--folds", type=int, default=10)

    p = sub.add_parser("train", help="cross-validated surrogate-gradient training")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--task", choices=["detection", "prediction"], default="detection")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=16, dest="batch_size")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--optimizer", choices=["adam", "sgd-momentum"], default="adam")
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--early-stop", type=float, default=None, dest="early_stop",
                   help="stop a fold once train accuracy reaches this fraction")
    p.add_argument("--t-th", type=int, default=2, dest="t_th")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--approx", action="store_true")

    p = sub.add_parser("profile", help="operation counts, ratio, and skip report")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--tth-sweep", action="store_true", dest="tth_sweep")
    p.add_argument("--max-segments", type=int, default=64, dest="max_segments")
    p.add_argument("--op-segments", type=int, default=8, dest="op_segments",
                   help="segments to run the op counter on")

    p = sub.add_parser("export", help="merge metrics CSVs into a plot-ready table")
    common(p)
    p.add_argument("--runs", nargs="+", required=True)
    return parser


COMMANDS = {
    "ingest": cmd_ingest,
    "train": cmd_train,
    "eval": cmd_eval,
    "profile": cmd_profile,
    "export": cmd_export,
}


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse uses 2 for usage errors already
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        log.error("%s", exc)
        return 2
    except (FileNotFoundError, PermissionError) as exc:
        log.error("%s", exc)
        return 2
    except Exception:
        log.exception("internal error")
        return 1


if __name__ == "__main__":
    sys.exit(main())
