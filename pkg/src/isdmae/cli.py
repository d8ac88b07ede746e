"""Command-line driver: ``isdmae <subcommand> [options]``.

Exit status: 0 success, 1 usage error, 2 data or format error, 3 numeric
failure (NaN/Inf or a domain violation during computation).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as C
from .data import PhantomSpec, gen_phantoms, load_dataset
from .errors import DegenerateInputError, DomainError, FormatError, NumericError, ShapeError
from .isdt import read_isdt, write_isdt
from .masking import IntensityMaskSpec, SpatialMaskSpec, intensity_mask, make_masked_pair, mask_stats, spatial_mask
from .preprocess import HuVolume, resample_volume, slice_and_synth, synth_rgb, write_channel_previews
from .training import RunConfig, load_checkpoint, run_eval, run_finetune, run_pretrain

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("isdmae")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--seed", type=int, default=0, help="base random seed (default 0)")
    shared.add_argument("--config", type=Path, help="key = value configuration file")
    shared.add_argument("--out", type=Path, default=Path("."), help="output directory (default .)")
    shared.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    p = _Parser(prog="isdmae", description="Dual-masked autoencoder pipeline on synthetic CT phantoms.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-phantoms", parents=[shared], help="write a synthetic phantom dataset")
    g.add_argument("--count", type=int, help="number of phantoms (default 64)")
    g.add_argument("--size", type=int, help="image extent in pixels (default 32)")
    g.add_argument("--dims", type=int, choices=(2, 3), help="2-D slices or 3-D volumes")
    g.add_argument("--task", choices=("seg", "cls"), help="lesion masks or presence labels")

    pp = sub.add_parser("preprocess", parents=[shared], help="window + edge channels for one HU file")
    pp.add_argument("--input", type=Path, required=True, help="HU tensor (.isdt), 2-D or 3-D")
    pp.add_argument("--spacing", type=float, nargs="+", help="voxel spacing in mm (3-D only)")

    m = sub.add_parser("mask-preview", parents=[shared], help="dump masked views of one image")
    m.add_argument("--input", type=Path, required=True, help="HU slice or preprocessed 3×H×W tensor (.isdt)")
    m.add_argument("--mode", choices=("intensity", "spatial", "dual"), default="dual")
    m.add_argument("--k", type=int, default=16, help="intensity bins")
    m.add_argument("--patch", type=int, default=4, help="spatial patch size")
    m.add_argument("--ratio", type=float, default=0.5, help="masking ratio for both strategies")

    pt = sub.add_parser("pretrain", parents=[shared], help="self-supervised dual-branch pretraining")
    pt.add_argument("--data", type=Path, required=True, help="dataset directory with manifest.isdm")
    pt.add_argument("--epochs", type=int)
    pt.add_argument("--mask-mode", choices=("dual", "intensity_only", "spatial_only"))
    pt.add_argument("--resume", type=Path, help="continue from a pretrain checkpoint")

    f = sub.add_parser("finetune", parents=[shared], help="supervised fine-tuning and test evaluation")
    f.add_argument("--task", choices=("seg", "cls"), required=True)
    f.add_argument("--init", type=Path, help="pretrained checkpoint (default: random init)")
    f.add_argument("--data", type=Path, required=True)
    f.add_argument("--epochs", type=int)

    e = sub.add_parser("eval", parents=[shared], help="evaluate a fine-tuned checkpoint")
    e.add_argument("--ckpt", type=Path, required=True)
    e.add_argument("--report", type=Path, required=True, help="CSV output path")
    e.add_argument("--data", type=Path, required=True)
    return p


def _parsed_config(args) -> dict:
    return C.load_config(args.config) if args.config else {s: {} for s in C.SECTIONS}


def _run_config(args, phase: str) -> RunConfig:
    cfg = C.apply_to_run(RunConfig.for_phase(phase), _parsed_config(args))
    if getattr(args, "epochs", None) is not None:
        if args.epochs < 0:
            raise UsageError("--epochs must be >= 0")
        cfg.train.epochs = args.epochs
    if getattr(args, "mask_mode", None):
        cfg.train.mask_mode = args.mask_mode
    return cfg


def cmd_gen_phantoms(args) -> dict:
    spec = C.apply_to_phantom(PhantomSpec(seed=args.seed), _parsed_config(args))
    overrides = {k: getattr(args, k) for k in ("count", "size", "dims", "task") if getattr(args, k) is not None}
    if overrides.get("task") == "cls" and "allow_empty" not in _parsed_config(args)["phantom"]:
        # presence labels need both classes
        overrides["allow_empty"] = True
    spec = C._replace(spec, overrides, "phantom")
    manifest = gen_phantoms(spec, args.out)
    splits = [r.split for r in manifest.records]
    return {"out": str(args.out), "count": len(splits), "train": splits.count("train"),
            "test": splits.count("test"), "task": manifest.task}


def _stem(path: Path) -> str:
    return path.name[:-len(".isdt")] if path.name.endswith(".isdt") else path.stem


def cmd_preprocess(args) -> dict:
    hu = read_isdt(args.input)
    args.out.mkdir(parents=True, exist_ok=True)
    stem = _stem(args.input)
    if hu.ndim == 2:
        rgb = synth_rgb(hu)
        write_isdt(args.out / f"{stem}_rgb.isdt", rgb.astype(np.float32))
        previews = write_channel_previews(str(args.out / stem), rgb)
        return {"rgb": str(args.out / f"{stem}_rgb.isdt"), "previews": previews}
    if hu.ndim == 3:
        spacing = tuple(args.spacing) if args.spacing else (1.0, 1.0, 1.0)
        if len(spacing) != 3:
            raise UsageError("--spacing needs three values for a volume")
        vol = resample_volume(HuVolume(hu, spacing))
        stack = slice_and_synth(vol)
        write_isdt(args.out / f"{stem}_rgb.isdt", stack.astype(np.float32))
        mid = stack.shape[-1] // 2
        previews = write_channel_previews(str(args.out / f"{stem}_d{mid:03d}"), stack[..., mid])
        return {"rgb": str(args.out / f"{stem}_rgb.isdt"), "shape": list(stack.shape), "previews": previews}
    raise ShapeError(f"{args.input}: expected a 2-D or 3-D HU tensor, got shape {hu.shape}")


def cmd_mask_preview(args) -> dict:
    arr = read_isdt(args.input)
    img = synth_rgb(arr) if arr.ndim == 2 else arr
    if img.ndim != 3 or img.shape[0] != 3:
        raise ShapeError(f"{args.input}: expected an HU slice or a 3×H×W image, got {arr.shape}")
    try:
        i_spec = IntensityMaskSpec(args.k, args.ratio, args.seed)
        s_spec = SpatialMaskSpec(args.patch, args.ratio, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    args.out.mkdir(parents=True, exist_ok=True)
    stem = _stem(args.input)
    views = {}
    if args.mode == "dual":
        pair = make_masked_pair(img, i_spec, s_spec, "dual")
        views = {"intensity": (pair.intensity_view, pair.intensity_selection),
                 "spatial": (pair.spatial_view, pair.spatial_selection)}
    elif args.mode == "intensity":
        views = {"intensity": intensity_mask(img, i_spec)}
    else:
        views = {"spatial": spatial_mask(img, s_spec)}
    summary = {}
    for name, (view, sel) in views.items():
        write_isdt(args.out / f"{stem}_{name}.isdt", view.astype(np.float32))
        previews = write_channel_previews(str(args.out / f"{stem}_{name}"), view)
        stats = mask_stats(view, img)
        summary[name] = {"selection": sorted(sel), "masked_fraction": stats["masked_fraction"],
                         "previews": previews}
    return summary


def _dataset(path: Path):
    if not path.is_dir():
        raise FormatError(f"dataset directory {path} does not exist")
    return load_dataset(path)


def cmd_pretrain(args) -> dict:
    cfg = _run_config(args, "pretrain")
    ds = _dataset(args.data)
    resume = None
    if args.resume:
        resume = load_checkpoint(args.resume)
        if resume.phase != "pretrain":
            raise FormatError(f"{args.resume}: not a pretrain checkpoint")
        cfg.model = resume.config.model
    res = run_pretrain(ds, args.out, cfg, args.seed, resume=resume)
    steps = -(-len(ds.subset("train")) // cfg.train.batch_size)
    means = res.epoch_means(steps)
    return {"checkpoint": str(res.checkpoint_path), "curve": str(res.curve_path),
            "first_epoch_total": means[0] if means else None, "last_epoch_total": means[-1] if means else None}


def cmd_finetune(args) -> dict:
    cfg = _run_config(args, "finetune")
    ds = _dataset(args.data)
    init = load_checkpoint(args.init) if args.init else None
    res = run_finetune(ds, args.out, cfg, args.seed, args.task, init=init)
    return {"checkpoint": str(res.checkpoint_path), "curve": str(res.curve_path),
            "report": str(res.report_path), **res.evaluation.summary}


def cmd_eval(args) -> dict:
    ckpt = load_checkpoint(args.ckpt)
    result = run_eval(ckpt, _dataset(args.data), args.report)
    return {"report": str(args.report), **result.summary}


COMMANDS = {
    "gen-phantoms": cmd_gen_phantoms,
    "preprocess": cmd_preprocess,
    "mask-preview": cmd_mask_preview,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # --help exits 0, usage errors exit 1
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        summary = COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"isdmae: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, DomainError) as exc:
        print(f"isdmae: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, ShapeError, DegenerateInputError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"isdmae: {exc}", file=sys.stderr)
        return EXIT_DATA
    print(json.dumps(summary, default=float, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
