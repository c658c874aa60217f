"""Command-line entry point: ``vox2seg {synth,train,cv,ensemble,predict,evaluate}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import data_io
from .config import RunConfig, apply_overrides, load_config
from .ensemble import (Ensembler, build_ensembler, ensemble_dataset, ensemble_predict,
                       split_subjects, train_ensembler)
from .metrics import aggregate, evaluate, write_report
from .model import load_checkpoint, save_checkpoint
from .postprocess import relabel_small_et, remove_small_clusters
from .train import cross_validate, make_folds, predict, train

log = logging.getLogger("vox2seg")


class CLIError(Exception):
    pass


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config)
    return apply_overrides(cfg, seed=args.seed, alpha=getattr(args, "alpha", None),
                           epochs=getattr(args, "epochs", None), device=args.device,
                           out_dir=args.out, data_dir=getattr(args, "data", None))


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _fold_dirs(run: Path) -> list[Path]:
    dirs = sorted((d for d in run.glob("fold_*") if (d / "generator.pt").exists()),
                  key=lambda d: int(d.name.split("_")[1]))
    if not dirs:
        raise CLIError(f"missing generator checkpoints under {run}")
    return dirs


def _require_data(cfg: RunConfig) -> str:
    if not cfg.data_dir:
        raise CLIError("no dataset given (use --data or data_dir in the config)")
    return cfg.data_dir


# ----------------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------------


def cmd_synth(args) -> None:
    cfg = _resolve(args)
    n = args.n if args.n is not None else cfg.synth.n_subjects
    size = tuple(args.size) if args.size else cfg.synth.size
    if len(size) == 1:
        size = size * 3
    out = _out_dir(cfg)
    ids = data_io.write_phantom_dataset(out, n, size, cfg.synth.seed)
    cfg.dump(out / "config.yaml")
    log.info("wrote %d phantoms to %s", len(ids), out)


def cmd_train(args) -> None:
    cfg = _resolve(args)
    subjects = data_io.load_dataset(_require_data(cfg))
    out = _out_dir(cfg)
    cfg.dump(out / "config.yaml")
    if args.fold is None:
        train(subjects, cfg.train, cfg.generator, cfg.discriminator, cfg.augmentation,
              out_dir=out / "full")
        return
    splits = make_folds([s.id for s in subjects], cfg.train.folds, cfg.train.seed)
    if not 0 <= args.fold < len(splits):
        raise CLIError(f"fold {args.fold} out of range for {len(splits)} folds")
    cross_validate(subjects, cfg.train, cfg.generator, cfg.discriminator, cfg.augmentation,
                   out_dir=out, folds=[args.fold])


def cmd_cv(args) -> None:
    cfg = _resolve(args)
    subjects = data_io.load_dataset(_require_data(cfg))
    out = _out_dir(cfg)
    cfg.dump(out / "config.yaml")
    cross_validate(subjects, cfg.train, cfg.generator, cfg.discriminator, cfg.augmentation,
                   out_dir=out)


def cmd_ensemble(args) -> None:
    cfg = _resolve(args)
    subjects = data_io.load_dataset(_require_data(cfg))
    run = Path(args.run) if args.run else Path(cfg.out_dir)
    device = cfg.train.device
    models = [load_checkpoint(d / "generator.pt", device) for d in _fold_dirs(run)]
    ens_cfg = cfg.ensembler
    if ens_cfg.models != len(models):
        ens_cfg = type(ens_cfg)(**{**asdict(ens_cfg), "models": len(models)})
    pairs = dict(zip([s.id for s in subjects],
                     ensemble_dataset(models, subjects, ens_cfg.offset, device)))
    tr, va = split_subjects(list(pairs), ens_cfg.val_fraction, ens_cfg.seed)
    out = _out_dir(cfg) / "ensembler"
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "config.yaml")
    (out / "split.json").write_text(json.dumps({"train_ids": tr, "val_ids": va}, indent=2) + "\n")
    result = train_ensembler(build_ensembler(ens_cfg), [pairs[i] for i in tr],
                             [pairs[i] for i in va], ens_cfg, device, log_path=out / "log.jsonl")
    save_checkpoint(out / "ensembler.pt", result.ensembler, "ensembler", asdict(ens_cfg),
                    seed=ens_cfg.seed, epoch=result.best_epoch)
    log.info("ensembler stopped at epoch %d (best %d)", result.stopped_epoch, result.best_epoch)


def _postprocess(labels: np.ndarray, cfg: RunConfig) -> np.ndarray:
    pp = cfg.postprocess
    if pp.min_cluster > 0:
        labels = remove_small_clusters(labels, pp.cluster_label, pp.min_cluster,
                                       pp.cluster_replacement, pp.connectivity)
    return relabel_small_et(labels, pp.et_threshold)


def cmd_predict(args) -> None:
    cfg = _resolve(args)
    if args.et_threshold is not None:
        cfg.postprocess.et_threshold = args.et_threshold
    if args.min_cluster is not None:
        cfg.postprocess.min_cluster = args.min_cluster
    if args.connectivity is not None:
        cfg.postprocess.connectivity = args.connectivity
    device = cfg.train.device
    run = Path(args.run)
    folds = _fold_dirs(run)
    models = [load_checkpoint(d / "generator.pt", device) for d in folds]
    ens_path = run / "ensembler" / "ensembler.pt"
    ensembler: Ensembler | None = None
    if ens_path.exists():
        ensembler = load_checkpoint(ens_path, device)
    elif len(models) > 1:
        raise CLIError(f"missing ensembler checkpoint {ens_path} for {len(models)} fold models")

    source = Path(args.input)
    subject_dirs = [source] if any(source.glob("*_flair.nii*")) else data_io.list_subjects(source)
    out = _out_dir(cfg)
    cfg.dump(out / "config.yaml")
    shape = tuple(args.shape) if args.shape else None
    for sdir in subject_dirs:
        image = data_io.normalize(data_io.load_volume(sdir))
        if ensembler is not None:
            if shape is not None:
                raise CLIError("--shape is only supported for single-model prediction")
            probs = ensemble_predict(models, ensembler, image, device, mode=args.mode)
        else:
            probs = predict(models[0], image, mode=args.mode, shape=shape, device=device)
        labels = _postprocess(data_io.from_categorical(probs), cfg)
        data_io.save_label_map(out / f"{sdir.name}_pred.nii.gz", labels, data_io.load_affine(sdir))
        log.info("predicted %s", sdir.name)


def cmd_evaluate(args) -> None:
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    records = []
    for sdir in data_io.list_subjects(gt_dir):
        pred_path = pred_dir / f"{sdir.name}_pred.nii.gz"
        if not pred_path.exists():
            raise CLIError(f"missing prediction for {sdir.name}: {pred_path}")
        pred = data_io.load_label_map(pred_path)
        gt = data_io.load_label_map(sdir)
        if pred.shape != gt.shape:
            raise CLIError(f"shape mismatch for {sdir.name}: prediction {pred.shape} "
                           f"vs ground truth {gt.shape}")
        records.append(evaluate(pred, gt, tuple(args.spacing), subject=sdir.name))
    report = aggregate(records)
    out = Path(args.out) if args.out else pred_dir
    out.mkdir(parents=True, exist_ok=True)
    write_report(out / "report.json", report)
    print(report.table())


# ----------------------------------------------------------------------------
# argument parsing
# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="YAML run configuration")
    shared.add_argument("--seed", type=int)
    shared.add_argument("--device", help="torch device (falls back to $VOX2SEG_DEVICE)")
    shared.add_argument("--out", help="output directory")

    parser = argparse.ArgumentParser(prog="vox2seg", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[shared], help="write a phantom dataset")
    p.add_argument("--n", type=int, help="number of subjects")
    p.add_argument("--size", type=int, nargs="+", help="grid size (one value or three)")
    p.set_defaults(func=cmd_synth)

    for name, func, text in (("train", cmd_train, "train one model"),
                             ("cv", cmd_cv, "cross-validate M models")):
        p = sub.add_parser(name, parents=[shared], help=text)
        p.add_argument("--data", help="dataset directory")
        p.add_argument("--alpha", type=float)
        p.add_argument("--epochs", type=int)
        if name == "train":
            p.add_argument("--fold", type=int, help="train this fold; omit to train on all subjects")
        p.set_defaults(func=func)

    p = sub.add_parser("ensemble", parents=[shared], help="train the ensembler on fold outputs")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--run", help="cross-validation run directory (default: --out)")
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("predict", parents=[shared], help="segment volumes")
    p.add_argument("--run", required=True, help="run directory with fold models")
    p.add_argument("--input", required=True, help="subject directory or dataset directory")
    p.add_argument("--mode", choices=("crop", "pad"), default="crop")
    p.add_argument("--shape", type=int, nargs=3, help="explicit network input shape")
    p.add_argument("--et-threshold", type=int)
    p.add_argument("--min-cluster", type=int)
    p.add_argument("--connectivity", type=int, choices=(6, 18, 26))
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", parents=[shared], help="score predictions against labels")
    p.add_argument("--pred", required=True, help="directory of <id>_pred.nii.gz files")
    p.add_argument("--gt", required=True, help="dataset directory with ground truth")
    p.add_argument("--spacing", type=float, nargs=3, default=(1.0, 1.0, 1.0))
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        args.func(args)
    except (CLIError, ValueError, FileNotFoundError, PermissionError) as err:
        print(f"vox2seg {args.command}: error: {err}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
