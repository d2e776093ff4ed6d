"""Command-line entry point: gen-phantom, preprocess, train, predict, evaluate.

Exit codes: 0 success, 1 invalid input (bad flags, malformed files, contract
violations), 2 runtime failure. Hyperparameter flags mirror TrainConfig fields
and override values from --config; every default is shown in --help.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields
from pathlib import Path

from . import metrics, perfusion
from .config import MODES, WIRINGS, TrainConfig
from .errors import InputValidationError, PipelineError
from .phantom import PhantomSpec, generate_corpus
from .trainer import (
    build_dataset,
    load_checkpoint,
    predict,
    preprocess_case,
    train,
    write_preprocessed,
)
from .volume_io import VolumeHeader, load_case, read_volume, volume_exists, write_volume


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad flags; the CLI contract wants 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _dims(text: str) -> tuple[int, ...]:
    try:
        parts = tuple(int(p) for p in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected ZxYxX integers, got {text!r}")
    if len(parts) != 3 or any(p < 1 for p in parts):
        raise argparse.ArgumentTypeError(f"expected 3 positive dims, got {text!r}")
    return parts


def _pair(text: str) -> tuple[float, float]:
    try:
        parts = tuple(float(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected lo,hi numbers, got {text!r}")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected two values, got {text!r}")
    return parts


def _int_pair(text: str) -> tuple[int, int]:
    try:
        parts = tuple(int(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected H,W integers, got {text!r}")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected two values, got {text!r}")
    return parts


def _triple(text: str) -> tuple[float, float, float]:
    try:
        parts = tuple(float(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected Z,Y,X numbers, got {text!r}")
    if len(parts) != 3 or any(p <= 0 for p in parts):
        raise argparse.ArgumentTypeError(f"expected 3 positive values, got {text!r}")
    return parts


def _add_config_flags(parser: argparse.ArgumentParser) -> list[str]:
    """One flag per TrainConfig field, defaulting to None so --config can fill in."""
    names = []
    defaults = TrainConfig()
    for f in fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        default = getattr(defaults, f.name)
        kwargs: dict = {"default": None, "help": f"(default: {default})"}
        if f.name == "crop_size":
            kwargs["type"] = _int_pair
            kwargs["help"] = f"H,W slice size (default: {default[0]},{default[1]})"
        elif f.name == "wiring":
            kwargs["choices"] = WIRINGS
        elif f.name == "mode":
            kwargs["choices"] = MODES
        elif f.type == "int":
            kwargs["type"] = int
        elif f.type == "float":
            kwargs["type"] = float
        parser.add_argument(flag, dest=f.name, **kwargs)
        names.append(f.name)
    return names


def build_parser() -> _Parser:
    parser = _Parser(prog="ctpseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser(
        "gen-phantom",
        help="generate a synthetic perfusion corpus",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    p.add_argument("--cases", type=int, required=True, help="number of cases (>= 3)")
    p.add_argument("--seed", type=int, default=0, help="corpus seed")
    p.add_argument("--out", required=True, help="dataset root to create")
    p.add_argument("--dims", type=_dims, default=(4, 64, 64), help="volume dims ZxYxX")
    p.add_argument("--timepoints", type=int, default=48, help="CTA frames per case")
    p.add_argument("--spacing", type=_triple, default=(8.0, 1.0, 1.0), help="Z,Y,X mm")
    p.add_argument("--lesion-radius", type=_pair, default=(5.0, 11.0), help="lo,hi voxels")
    p.add_argument("--noise-sigma", type=float, default=0.02, help="CTA noise sigma")
    p.set_defaults(func=_cmd_gen_phantom)

    p = sub.add_parser("preprocess", help="derive MIP and frame-stack bundles for a case")
    p.add_argument("--case", required=True, help="case directory with a cta4d bundle")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n-frames", type=int, default=TrainConfig().n_frames, help="frames to keep")
    p.add_argument("--rise-run", type=int, default=TrainConfig().rise_run, help="rise run length")
    p.set_defaults(func=_cmd_preprocess)

    p = sub.add_parser("train", help="train the pipeline on a dataset")
    p.add_argument("--data", required=True, help="dataset root")
    p.add_argument("--split", default=None, help="split file (default: <data>/split.txt)")
    p.add_argument("--out", required=True, help="output directory for checkpoints and logs")
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--max-steps", type=int, default=None, help="stop after this many steps")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("predict", help="run inference on one case")
    p.add_argument("--model", required=True, help="checkpoint base path (no suffix)")
    p.add_argument("--case", required=True, help="case directory")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("evaluate", help="score predictions against ground truth")
    p.add_argument("--pred", required=True, help="root of per-case prediction directories")
    p.add_argument("--gt", required=True, help="ground-truth dataset root")
    p.add_argument("--out", required=True, help="report output directory")
    p.set_defaults(func=_cmd_evaluate)
    return parser


def _cmd_gen_phantom(args) -> int:
    spec = PhantomSpec(
        dims=args.dims,
        spacing_mm=args.spacing,
        n_frames=args.timepoints,
        lesion_radius=args.lesion_radius,
        noise_sigma=args.noise_sigma,
    )
    case_ids = generate_corpus(args.out, args.cases, args.seed, spec)
    print(f"wrote {len(case_ids)} cases to {args.out}")
    return 0


def _cmd_preprocess(args) -> int:
    record = load_case(args.case)
    if record.cta is None:
        raise InputValidationError(f"{args.case}: no cta4d bundle to preprocess")
    cfg = TrainConfig(n_frames=args.n_frames, rise_run=args.rise_run)
    pre = preprocess_case(record, cfg)
    write_preprocessed(args.out, pre)
    window = pre.window
    print(
        f"{record.case_id}: window [{window.start}, {window.end}] "
        f"of {window.n_frames} frames -> {args.out}"
    )
    return 0


def _cmd_train(args) -> int:
    overrides = {
        f.name: getattr(args, f.name)
        for f in fields(TrainConfig)
        if getattr(args, f.name) is not None
    }
    if args.config is not None:
        cfg = TrainConfig.load(args.config, **overrides)
    else:
        cfg = TrainConfig(**overrides)
    split = args.split or str(Path(args.data) / "split.txt")
    train_samples = build_dataset(args.data, split, cfg, "train")
    val_samples = build_dataset(args.data, split, cfg, "val")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(cfg.dump(), encoding="utf-8")
    result = train(cfg, train_samples, val_samples, out_dir, max_steps=args.max_steps)
    last = result.breakdowns[-1]
    print(f"trained {result.steps} steps; final loss {last.total:.6f}")
    if result.best_val_dice is not None:
        print(f"best validation dice {result.best_val_dice:.4f} -> {result.best_checkpoint}")
    print(f"last checkpoint -> {result.last_checkpoint}")
    return 0


def _cmd_predict(args) -> int:
    bundle, _ = load_checkpoint(args.model)
    record = load_case(args.case)
    pseudo, seg = predict(bundle, record)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    header = VolumeHeader(tuple(seg.shape), record.spacing_mm)
    write_volume(out_dir / "seg", header, seg)
    written = ["seg"]
    if pseudo is not None:
        write_volume(out_dir / "pseudo_dwi", header, pseudo)
        written.append("pseudo_dwi")
    print(f"{record.case_id}: wrote {', '.join(written)} to {out_dir}")
    return 0


def _cmd_evaluate(args) -> int:
    pred_root = Path(args.pred)
    gt_root = Path(args.gt)
    if not pred_root.is_dir():
        raise InputValidationError(f"prediction root {pred_root} does not exist")
    report = metrics.MetricsReport()
    case_dirs = [p for p in sorted(pred_root.iterdir()) if p.is_dir()]
    for case_dir in case_dirs:
        if not volume_exists(case_dir / "seg"):
            continue
        _, seg = read_volume(case_dir / "seg")
        gt = load_case(gt_root / case_dir.name)
        if gt.mask is None:
            raise InputValidationError(f"{case_dir.name}: ground-truth case has no mask")
        pseudo = None
        dwi = None
        if volume_exists(case_dir / "pseudo_dwi") and gt.dwi is not None:
            _, pseudo = read_volume(case_dir / "pseudo_dwi")
            dwi = perfusion.normalize_intensity(gt.dwi)
        row = metrics.evaluate_case(seg, gt.mask, gt.spacing_mm, pseudo, dwi)
        report.add(case_dir.name, row)
    if not report.rows:
        raise InputValidationError(f"no predictions with seg volumes under {pred_root}")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    report.write_csv(out_dir / "report.csv")
    report.write_json(out_dir / "report.json")
    overall = report.aggregate()["overall"]
    dice = overall.get("dice")
    if dice is not None:
        print(f"evaluated {len(report.rows)} cases; mean dice {dice['mean']:.4f}")
    else:
        print(f"evaluated {len(report.rows)} cases")
    print(f"report -> {out_dir / 'report.csv'}, {out_dir / 'report.json'}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except InputValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except PipelineError as exc:
        print(f"failure: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
