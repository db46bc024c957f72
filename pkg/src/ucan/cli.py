"""Command-line entry point: ``ucan {phantom,train,infer,eval,report}``.

Exit codes: 0 success, 1 validation error, 2 runtime error, 3 IO error.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path


from ucan import __version__
from ucan.core import (
    TASKS,
    TRACERS,
    ConfigError,
    MissingModalityError,
    NormRecord,
    TrainConfig,
    TracerId,
    TrainingDivergenceError,
    UCANError,
    ValidationError,
    task_name,
)
from ucan.data import (
    MR_FILE,
    SIDECAR,
    load_studies,
    load_volume,
    pet_filename,
    phantom_cohort,
    save_study,
    save_volume,
    split_folds,
)

log = logging.getLogger("ucan")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_IO = 0, 1, 2, 3
MANIFEST = "manifest.json"


class OutputExistsError(OSError):
    pass


def pred_filename(source: TracerId, target: TracerId) -> str:
    return f"pred_{source.value}_to_{target.value}.nii"


def _prepare_out(path: Path, force: bool, allow_existing: bool = False) -> Path:
    """Create ``path``; refuse a nonempty directory unless ``force`` (which clears it)."""
    if path.exists() and not path.is_dir():
        raise OutputExistsError(f"{path} exists and is not a directory")
    if path.is_dir() and any(path.iterdir()) and not allow_existing:
        if not force:
            raise OutputExistsError(f"{path} is not empty; pass --force to overwrite")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_manifest(out_dir: Path, command: str, params: dict, cfg: TrainConfig | None = None, **extra) -> Path:
    manifest = {
        "command": command,
        "code_version": __version__,
        "params": params,
        "seed": cfg.seed if cfg is not None else params.get("seed"),
        "config_hash": cfg.hash() if cfg is not None else None,
        **extra,
    }
    path = out_dir / MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return path


# -- phantom ---------------------------------------------------------------------


def cmd_phantom(args) -> int:
    if args.n < 0:
        raise ValidationError("--n must be >= 0")
    out = _prepare_out(Path(args.out), args.force)
    for study in phantom_cohort(args.n, args.shape, args.seed):
        save_study(study, out / study.id)
    write_manifest(out, "phantom", {"n": args.n, "shape": list(args.shape), "seed": args.seed})
    print(f"wrote {args.n} phantom studies to {out}")
    return EXIT_OK


# -- train -----------------------------------------------------------------------

# flag name -> config key
_TRAIN_FLAGS = {
    "data": "data_dir",
    "run_dir": "run_dir",
    "epochs": "epochs",
    "seed": "seed",
    "fold": "fold_index",
    "folds": "num_folds",
    "patch": "patch_shape",
    "batch_size": "batch_size",
    "base_width": "base_width",
    "depth": "depth",
    "steps_per_epoch": "steps_per_epoch",
}


def resolve_train_config(args) -> TrainConfig:
    """Flags first, then the config file on top of them."""
    values: dict = {}
    for flag, key in _TRAIN_FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[key] = list(v) if isinstance(v, (list, tuple)) else v
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise FileNotFoundError(f"config file {path} does not exist")
        try:
            file_values = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError({"<file>": f"not valid JSON: {exc}"}) from None
        if not isinstance(file_values, dict):
            raise ConfigError({"<file>": "top level must be an object"})
        values.update(file_values)
    cfg = TrainConfig.from_dict(values)
    errors = {}
    if not cfg.data_dir:
        errors["data_dir"] = "required (set in the config file or with --data)"
    elif not Path(cfg.data_dir).is_dir():
        errors["data_dir"] = f"directory {cfg.data_dir} does not exist"
    if not cfg.run_dir:
        errors["run_dir"] = "required (set in the config file or with --run-dir)"
    if errors:
        raise ConfigError(errors)
    return cfg


def cmd_train(args) -> int:
    from ucan.evaluate import emit_plots, emit_report
    from ucan.train import LAST, Trainer, run_cross_validation, train_loop

    cfg = resolve_train_config(args)
    studies = load_studies(cfg.data_dir)
    if not studies:
        raise ConfigError({"data_dir": f"no studies found in {cfg.data_dir}"})
    run_dir = Path(cfg.run_dir)

    if args.cv:
        run_dir = _prepare_out(run_dir, args.force)
        cfg.save(run_dir / "config.json")
        checkpoints, report = run_cross_validation(cfg, studies, run_dir)
        report_dir = run_dir / "report"
        emit_report(report, report_dir)
        emit_plots(report, report_dir / "roi_bias.png")
        write_manifest(
            run_dir, "train", {"cv": True}, cfg, checkpoints=[str(Path(p).relative_to(run_dir)) for p in checkpoints]
        )
        print(f"cross-validation finished; report in {report_dir}")
        return EXIT_OK

    by_id = {s.id: s for s in studies}
    if len(by_id) >= cfg.num_folds:
        train_ids, val_ids = split_folds(list(by_id), cfg.num_folds, cfg.seed)[cfg.fold_index]
    else:
        log.warning("fewer studies than folds; training on all %d studies without validation", len(by_id))
        train_ids, val_ids = list(by_id), []
    trainer = None
    if args.resume:
        ckpt = run_dir / "checkpoints" / LAST
        if not ckpt.is_file():
            raise FileNotFoundError(f"cannot resume: {ckpt} does not exist")
        trainer = Trainer.from_checkpoint(ckpt, cfg)
        log.info("resuming from step %d, epoch %d", trainer.step, trainer.epoch)
    else:
        _prepare_out(run_dir, args.force)
    cfg.save(run_dir / "config.json")
    t = train_loop(cfg, [by_id[k] for k in train_ids], [by_id[k] for k in val_ids], run_dir, trainer=trainer)
    if not (run_dir / "checkpoints" / LAST).exists() and cfg.epochs > 0:
        t.save(run_dir / "checkpoints" / LAST)
    write_manifest(run_dir, "train", {"cv": False, "train_ids": train_ids, "val_ids": val_ids}, cfg, final_step=t.step)
    print(f"training finished at step {t.step}; run directory {run_dir}")
    return EXIT_OK


# -- infer -----------------------------------------------------------------------


def cmd_infer(args) -> int:
    from ucan.evaluate import infer_whole_volume
    from ucan.nets import generator_from_checkpoint, load_checkpoint

    source = TracerId.parse(args.source)
    targets = [TracerId.parse(t) for t in args.targets] if args.targets else [t for t in TRACERS if t is not source]
    bad = [t.value for t in targets if t is source]
    if bad:
        raise ValidationError(f"target {bad[0]} equals the source tracer; only cross-tracer translation is supported")
    study_dir = Path(args.study)
    pet_path = study_dir / pet_filename(source)
    if not pet_path.is_file():
        raise MissingModalityError(f"{study_dir} has no tracer {source.value} volume ({pet_path.name})")
    if not (study_dir / MR_FILE).is_file():
        raise MissingModalityError(f"{study_dir} has no MR volume ({MR_FILE})")
    pet, mr = load_volume(pet_path), load_volume(study_dir / MR_FILE)
    records: dict = {}
    if (study_dir / SIDECAR).is_file():
        meta = json.loads((study_dir / SIDECAR).read_text())
        records = {TracerId(k): NormRecord.from_dict(v) for k, v in meta.get("norm_records", {}).items()}

    blob = load_checkpoint(args.checkpoint)
    g = generator_from_checkpoint(blob)
    patch = tuple(args.patch) if args.patch else tuple(blob["config"]["patch_shape"])
    out = _prepare_out(Path(args.out), args.force)
    written = {}
    for target in targets:
        rec = None if args.normalized else records.get(target)
        pred = infer_whole_volume(g, pet, mr, target, patch, args.overlap, rec)
        name = pred_filename(source, target)
        save_volume(pred, out / name)
        written[task_name(source, target)] = {"file": name, "denormalized": rec is not None}
        log.info("%s -> %s written (%s)", source, target, "denormalized" if rec else "normalized")
    write_manifest(
        out,
        "infer",
        {"source": source.value, "targets": [t.value for t in targets], "patch": list(patch), "overlap": args.overlap},
        TrainConfig.from_dict(blob["config"]),
        outputs=written,
    )
    print(f"wrote {len(written)} volume(s) to {out}")
    return EXIT_OK


# -- eval / report -----------------------------------------------------------------


def cmd_eval(args) -> int:
    from ucan.evaluate import BASELINE, METHOD, MetricReport, copy_input_baseline, emit_plots, emit_report, evaluate_prediction

    studies = load_studies(args.studies)
    if not studies:
        raise ValidationError(f"no studies found in {args.studies}")
    pred_root = Path(args.predictions)
    if not pred_root.is_dir():
        raise FileNotFoundError(f"prediction directory {pred_root} does not exist")
    out = _prepare_out(Path(args.out), args.force)
    report = MetricReport()
    n_found = 0
    for study in studies:
        for source, target in TASKS:
            path = pred_root / study.id / pred_filename(source, target)
            pred = load_volume(path) if path.is_file() else None
            if pred is not None and pred.shape != study.shape:
                raise ValidationError(f"{path}: shape {pred.shape} != study shape {study.shape}")
            n_found += pred is not None
            report.extend(evaluate_prediction(pred, study, source, target, METHOD, args.fold, args.full_fov))
            if args.baseline:
                base = copy_input_baseline(study, source, target)
                report.extend(evaluate_prediction(base, study, source, target, BASELINE, args.fold, args.full_fov))
    emit_report(report, out)
    emit_plots(report, out / "roi_bias.png")
    write_manifest(out, "eval", {"full_fov": args.full_fov, "baseline": args.baseline, "fold": args.fold}, predictions_found=n_found)
    print(f"evaluated {n_found} prediction volume(s); report in {out}")
    return EXIT_OK


def cmd_report(args) -> int:
    from ucan.evaluate import emit_plots, emit_report, read_report

    src = Path(args.metrics)
    if not (src / "metrics.csv").is_file():
        raise FileNotFoundError(f"{src} has no metrics.csv")
    report = read_report(src)
    out = _prepare_out(Path(args.out), args.force)
    emit_report(report, out)
    emit_plots(report, out / "roi_bias.png", method=args.method)
    write_manifest(out, "report", {"method": args.method})
    print(f"report written to {out}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ucan", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("phantom", help="generate synthetic three-tracer studies")
    sp.add_argument("--n", type=int, default=5, help="number of studies (default 5)")
    sp.add_argument("--shape", type=int, nargs=3, default=(32, 40, 40), metavar=("D", "H", "W"))
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True, help="output directory, one subdirectory per study")
    sp.add_argument("--force", action="store_true", help="overwrite a nonempty output directory")
    sp.set_defaults(func=cmd_phantom)

    sp = sub.add_parser("train", help="train one fold, or run k-fold cross-validation with --cv")
    sp.add_argument("--config", help="JSON config; its keys override the flags below")
    sp.add_argument("--data", help="directory of study directories (config key data_dir)")
    sp.add_argument("--run-dir", dest="run_dir", help="output run directory (config key run_dir)")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--fold", type=int, help="fold index held out for validation (config key fold_index)")
    sp.add_argument("--folds", type=int, help="number of folds (config key num_folds)")
    sp.add_argument("--patch", type=int, nargs=3, metavar=("D", "H", "W"))
    sp.add_argument("--batch-size", dest="batch_size", type=int)
    sp.add_argument("--base-width", dest="base_width", type=int)
    sp.add_argument("--depth", type=int)
    sp.add_argument("--steps-per-epoch", dest="steps_per_epoch", type=int)
    sp.add_argument("--cv", action="store_true", help="train and evaluate every fold, then emit the report")
    sp.add_argument("--resume", action="store_true", help="continue from <run-dir>/checkpoints/last.pt")
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("infer", help="synthesize target tracers from one source tracer")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--study", required=True, help="study directory with the source PET and MR")
    sp.add_argument("--source", required=True, choices=[t.value for t in TRACERS])
    sp.add_argument("--targets", nargs="+", help="target tracers (default: the other two)")
    sp.add_argument("--out", required=True)
    sp.add_argument("--patch", type=int, nargs=3, metavar=("D", "H", "W"), help="sliding-window patch (default: training patch)")
    sp.add_argument("--overlap", type=float, default=0.5)
    sp.add_argument("--normalized", action="store_true", help="write [-1, 1] outputs instead of denormalizing")
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("eval", help="score predictions against ground truth")
    sp.add_argument("--predictions", required=True, help="directory with <study_id>/pred_<S>_to_<T>.nii files")
    sp.add_argument("--studies", required=True, help="directory of ground-truth study directories")
    sp.add_argument("--out", required=True)
    sp.add_argument("--fold", type=int, default=0)
    sp.add_argument("--full-fov", action="store_true", help="score the whole field of view instead of the brain mask")
    sp.add_argument("--baseline", action="store_true", help="also score the copy-input baseline")
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("report", help="rebuild tables, summary and plot from metrics.csv/bias.csv")
    sp.add_argument("--metrics", required=True, help="directory holding metrics.csv and bias.csv")
    sp.add_argument("--out", required=True)
    sp.add_argument("--method", default="UCAN", help="method whose ROI bias is plotted")
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except TrainingDivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (UCANError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME

if __name__ == "__main__":
    sys.exit(main())
