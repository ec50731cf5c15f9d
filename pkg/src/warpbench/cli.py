"""Command-line entry point: ``warpbench <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import config as config_io
from .errors import WarpBenchError
from .experiment import DEFENSES, REPORT_FILE, load_report, run_defense_only, run_evaluation, run_experiment

log = logging.getLogger("warpbench")

DEFENSE_ALIASES = {"nc": "neural_cleanse", "fp": "fine_pruning", "strip": "strip", "spectral": "spectral"}


def _parse_override(text: str):
    key, sep, raw = text.partition("=")
    if not sep or not key.strip():
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    try:
        value = config_io.tomllib.loads(f"v = {raw.strip()}")["v"]
    except config_io.tomllib.TOMLDecodeError:
        value = raw.strip()  # bare strings need no quotes on the command line
    return key.strip(), value


def _defense_list(text: str) -> List[str]:
    names = []
    for part in filter(None, (p.strip() for p in text.split(","))):
        name = DEFENSE_ALIASES.get(part, part)
        if name not in DEFENSES:
            raise argparse.ArgumentTypeError(f"unknown defense {part!r}; choose from {', '.join(DEFENSES)}")
        names.append(name)
    return names


def _load_config(args) -> config_io.ExperimentConfig:
    cfg = config_io.load(args.config) if args.config else config_io.ExperimentConfig()
    overrides: Dict[str, object] = dict(args.set or [])
    if getattr(args, "output", None):
        overrides["output_dir"] = str(args.output)
    if getattr(args, "data_dir", None):
        overrides["data_dir"] = str(args.data_dir)
    return config_io.with_overrides(cfg, overrides) if overrides else cfg


def _add_config_args(p: argparse.ArgumentParser, output: bool = True) -> None:
    p.add_argument("--config", type=Path, help="experiment config file")
    p.add_argument("--set", action="append", type=_parse_override, metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--data-dir", type=Path, help="dataset directory (overrides config)")
    if output:
        p.add_argument("--output", type=Path, help="output directory (overrides config)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="warpbench", description="Warping-based backdoor test bench.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("train", help="train a model and write the run directory")
    _add_config_args(p)

    p = sub.add_parser("evaluate", help="recompute clean/attack/noise accuracy from a checkpoint")
    _add_config_args(p, output=False)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--field", type=Path, help="warp field file (default: next to the checkpoint)")
    p.add_argument("--json", action="store_true", help="print JSON instead of text")

    p = sub.add_parser("defend", help="run defenses against an existing checkpoint")
    _add_config_args(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--field", type=Path, help="warp field file (default: next to the checkpoint)")
    p.add_argument("--defenses", type=_defense_list, help="comma list: nc, fp, strip, spectral")

    p = sub.add_parser("warp-preview", help="write clean/warped/residual image triples")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--image", type=Path, action="append", help="input PNG/PGM/PPM image (repeatable)")
    src.add_argument("--data-dir", type=Path, help="take test images from this MNIST directory")
    p.add_argument("--dataset", choices=("mnist", "cifar10"), default="mnist")
    p.add_argument("--count", type=int, default=4, help="images taken from the dataset")
    p.add_argument("--field", type=Path, help="use this warp field instead of drawing one")
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--s", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=("png", "pgm"), default="png")
    p.add_argument("--output", type=Path, required=True)

    p = sub.add_parser("report", help="print a run report as text and render its figures")
    p.add_argument("run_dir", type=Path)
    p.add_argument("--no-figures", action="store_true")
    return parser


def _field_path(args) -> Path:
    return args.field or args.checkpoint.parent / "warp_field.wanf"


def _fmt_metrics(metrics: Dict[str, float]) -> str:
    return "  ".join(f"{k}={v:.2f}%" for k, v in metrics.items())


def cmd_train(args) -> int:
    cfg = _load_config(args)
    report = run_experiment(cfg)
    print(f"{cfg.output_dir}/{REPORT_FILE}: {_fmt_metrics(report['metrics']['final'])}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    metrics = run_evaluation(cfg, args.checkpoint, _field_path(args))
    print(json.dumps(metrics, indent=2) if args.json else _fmt_metrics(metrics))
    return 0


def cmd_defend(args) -> int:
    if args.output is None:  # keep the training run's own report intact
        args.output = args.checkpoint.parent / "defend"
    cfg = _load_config(args)
    report = run_defense_only(cfg, args.checkpoint, _field_path(args), args.defenses)
    print(render_text(report))
    return 0


def _read_image(path: Path) -> np.ndarray:
    from PIL import Image

    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L" if im.mode in ("L", "1", "I", "P") else "RGB"))
    except OSError as exc:
        raise WarpBenchError(f"cannot read image {path}: {exc}") from None
    arr = arr.astype(np.float32) / np.float32(255.0)
    return arr[None] if arr.ndim == 2 else np.moveaxis(arr, -1, 0)


def _write_image(arr: np.ndarray, path: Path) -> None:
    from PIL import Image

    pixels = np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    if pixels.shape[0] == 1:
        img = Image.fromarray(pixels[0], mode="L")
    else:
        img = Image.fromarray(np.moveaxis(pixels, 0, -1), mode="RGB")
    img.save(path)


def cmd_warp_preview(args) -> int:
    from .datasets import load_dataset
    from .poison import derive_rng
    from .warp import WarpField, build_warp_field, warp_image

    if args.image:
        images = [_read_image(p) for p in args.image]
        names = [p.stem for p in args.image]
    else:
        _, test = load_dataset(args.dataset, args.data_dir)
        images = list(test.images[: args.count])
        names = [f"test{i:05d}" for i in range(len(images))]
    args.output.mkdir(parents=True, exist_ok=True)
    ext = args.format if images[0].shape[0] == 1 or args.format == "png" else "ppm"
    fields: Dict[tuple, WarpField] = {}
    for name, img in zip(names, images):
        shape = img.shape[1:]
        if shape not in fields:
            if args.field:
                fields[shape] = WarpField.load(args.field)
            else:
                fields[shape] = build_warp_field(args.k, args.s, shape[0], shape[1], derive_rng(args.seed))
        warped = warp_image(img, fields[shape])
        residual = np.clip(np.abs(warped - img) * 2.0, 0.0, 1.0)
        _write_image(img, args.output / f"{name}_clean.{ext}")
        _write_image(warped, args.output / f"{name}_warped.{ext}")
        _write_image(residual, args.output / f"{name}_residual.{ext}")
    written = 3 * len(images)
    if args.format == "png" and len(fields) == 1:
        from .plotting import plot_warp_preview

        plot_warp_preview(np.stack(images), next(iter(fields.values())), args.output / "preview.png")
        written += 1
    print(f"wrote {written} images to {args.output}")
    return 0


def render_text(report: dict) -> str:
    cfg = report.get("config", {})
    lines = [f"run {cfg.get('name', '?')} ({report.get('kind', '?')})"
             + ("" if report.get("complete") else "  [INCOMPLETE]")]
    if cfg:
        lines.append(f"  dataset {cfg.get('dataset')}  k={cfg.get('warp.k')} s={cfg.get('warp.s')}  "
                     f"rho_a={cfg.get('poison.rho_a')} rho_n={cfg.get('poison.rho_n')}  "
                     f"rule={cfg.get('poison.target_rule')} target={cfg.get('poison.target_class')}")
    metrics = report.get("metrics")
    if metrics:
        lines.append(f"  epochs run: {metrics['epochs_run']}")
        lines.append(f"  final: {_fmt_metrics(metrics['final'])}")
    defenses = report.get("defenses", {})
    nc = defenses.get("neural_cleanse")
    if nc:
        norms = ", ".join(f"{v:.1f}" for v in nc["l1_norms"])
        lines.append(f"  neural cleanse: max anomaly index {nc['max_anomaly_index']:.3f}, "
                     f"min L1 {nc['min_l1_norm']:.2f}, {'FLAGGED' if nc['flagged'] else 'passed'}")
        lines.append(f"    L1 norms by class: {norms}")
    fp = defenses.get("fine_pruning")
    if fp:
        gaps = [c - a for c, a in zip(fp["clean_acc"], fp["attack_acc"]) if c >= 90.0]
        lines.append(f"  fine-pruning: {len(fp['num_pruned']) - 1} channels, "
                     f"largest clean-attack gap while clean>=90%: {max(gaps) if gaps else float('nan'):.2f}")
    st = defenses.get("strip")
    if st:
        lines.append(f"  strip: mean entropy clean {st['clean_mean']:.4f}, backdoor {st['backdoor_mean']:.4f}, "
                     f"backdoor p01 {st['backdoor_p01']:.4f}")
    sp = defenses.get("spectral")
    if sp:
        lines.append(f"  spectral signature: AUC {sp['auc']:.4f} (separability {sp['separability']:.4f}) "
                     f"on {sp['n_clean']} clean / {sp['n_backdoor']} backdoor")
    timing = report.get("timing")
    if timing:
        lines.append("  timing: " + ", ".join(f"{k} {v:.1f}s" for k, v in timing.items()))
    return "\n".join(lines)


def cmd_report(args) -> int:
    report = load_report(args.run_dir)
    print(render_text(report))
    if not args.no_figures:
        from .plotting import render_report_figures

        figures = render_report_figures(args.run_dir, report)
        for name, file in figures.items():
            print(f"  figure {name}: {args.run_dir / file}")
    return 0


COMMANDS = {"train": cmd_train, "evaluate": cmd_evaluate, "defend": cmd_defend,
            "warp-preview": cmd_warp_preview, "report": cmd_report}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except (WarpBenchError, ValueError, ArithmeticError, OSError) as exc:
        print(f"warpbench {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
