"""Command-line front end: ``flankid <subcommand> ...``.

Subcommands: ingest, split, detect-eval, run-reid, identify, report.
Configuration comes from a YAML preset file (``--config``, default the
bundled one) and is overridden by flags. ``FLANKID_WORKERS`` sets the
feature-extraction thread count.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .annotations import (AnnotationError, LabeledBox, build_manifest, load_manifest,
                          make_detection_split, make_reid_splits, save_manifest, save_splits)
from .config import DETECTOR, GROUND_TRUTH, ConfigError, load_config
from .detection import load_raw_detections
from .evaluation import emit_report, nms_sweep, read_report, write_report_data
from .imaging import load_image
from .pipeline import load_model, run_reid

log = logging.getLogger("flankid")


class CLIError(Exception):
    pass


def _size(text: str) -> tuple[int, int]:
    try:
        w, h = text.lower().split("x")
        return int(w), int(h)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WIDTHxHEIGHT, got {text!r}") from None


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _box(text: str) -> LabeledBox:
    vals = _floats(text)
    if len(vals) != 4:
        raise argparse.ArgumentTypeError("box needs x_min,y_min,x_max,y_max")
    return LabeledBox("flank", *vals)


def _add_config_flags(p: argparse.ArgumentParser, seed_required: bool = False) -> None:
    g = p.add_argument_group("configuration (flags override the config file)")
    g.add_argument("--config", type=Path, help="YAML preset file (default: bundled presets)")
    g.add_argument("--species", default="tiger", help="preset section to use (default: tiger)")
    g.add_argument("--flank-resize", type=_size, help="flank crop size WIDTHxHEIGHT")
    g.add_argument("--net-spec", help="network spec YAML")
    g.add_argument("--weights", help="named-tensor weight file")
    g.add_argument("--pca-energy", type=float)
    g.add_argument("--C", dest="C", type=float, help="fixed inverse regularisation strength")
    g.add_argument("--C-grid", dest="C_grid", type=_floats, help="comma-separated C grid (used when C is unset)")
    g.add_argument("--grid-search", action="store_true", help="ignore the preset C and search C_grid")
    g.add_argument("--nms-threshold", type=float)
    g.add_argument("--min-score", type=float)
    g.add_argument("--sweep-thresholds", type=_floats)
    g.add_argument("--n-splits", type=int)
    g.add_argument("--train-fraction", type=float)
    g.add_argument("--max-rank", type=int)
    g.add_argument("--crop-source", choices=[GROUND_TRUTH, DETECTOR])
    g.add_argument("--seed", type=int, required=seed_required)


def _config(args):
    overrides = {k: getattr(args, k, None) for k in (
        "flank_resize", "net_spec", "weights", "pca_energy", "C", "C_grid", "nms_threshold", "min_score",
        "sweep_thresholds", "n_splits", "train_fraction", "max_rank", "crop_source", "seed")}
    config = load_config(args.config, args.species, overrides)
    if getattr(args, "grid_search", False) and args.C is None:
        config = replace(config, C=None)
    return config


def cmd_ingest(args) -> int:
    annotations = Path(args.annotations_dir)
    if not annotations.is_dir():
        raise CLIError(f"annotation directory not found: {annotations}")
    exclude = []
    if args.exclude:
        exclude = [l.split("#", 1)[0].strip() for l in Path(args.exclude).read_text(encoding="utf-8").splitlines()]
    manifest = build_manifest(annotations, args.identity_table, args.species, [e for e in exclude if e])
    if not manifest.records:
        log.warning("no annotation files in %s; writing an empty manifest", annotations)
    save_manifest(manifest, args.out)
    print(f"{len(manifest.records)} records, {len(manifest.individuals)} individuals -> {args.out}")
    return 0


def cmd_split(args) -> int:
    manifest = load_manifest(args.manifest)
    if args.mode == "detection":
        splits = [make_detection_split(manifest, args.train_fraction, args.seed)]
    else:
        splits = make_reid_splits(manifest, args.n_splits, args.train_fraction, args.seed)
    save_splits(splits, args.out)
    for i, s in enumerate(splits):
        print(f"split {i}: seed {s.seed}, {len(s.train_ids)} train / {len(s.test_ids)} test")
    return 0


def cmd_detect_eval(args) -> int:
    config = _config(args)
    manifest = load_manifest(args.manifest)
    raw = load_raw_detections(args.raw_detections)
    table = nms_sweep(raw, manifest.records, config.sweep_thresholds, config.min_score,
                      match_iou=config.match_iou)
    emit_report(table, args.out, args.format, params={"species": config.species})
    print(Path(args.out).read_text(encoding="utf-8") if args.format == "tsv" else f"wrote {args.out}", end="")
    return 0


def cmd_run_reid(args) -> int:
    config = _config(args)
    manifest = load_manifest(args.manifest)
    raw = load_raw_detections(args.raw_detections) if args.raw_detections else None
    result = run_reid(manifest, config, args.out_dir, raw)
    for s in result.splits:
        print(f"split {s.index}: rank-1 {s.rank1:.4f} (C={s.C:g}, {s.k} PCA components)")
    print(f"rank-1 mean {result.rank1_mean:.4f} +/- {result.rank1_std:.4f}; "
          f"{len(result.expert_queue)} images queued for expert review")
    return 0


def cmd_identify(args) -> int:
    model = load_model(args.model_dir)
    img = load_image(args.image)
    pred = model.identify(img, args.box)
    top = args.top or 5
    if top > len(pred.ranking):
        raise CLIError(f"--top {top} exceeds the {len(pred.ranking)} known identities")
    for rank, (ident, score) in enumerate(pred.ranking[:top], 1):
        print(f"{rank}\t{ident}\t{score:.6f}")
    return 0


def cmd_report(args) -> int:
    data = read_report(args.input)
    if args.out:
        write_report_data(data, args.out, args.format)
    else:
        cols = data["columns"]
        print("\t".join(cols))
        for row in data["rows"]:
            print("\t".join(row))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flankid", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"flankid {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="build a manifest from labelImg XML files")
    p.add_argument("annotations_dir")
    p.add_argument("identity_table", nargs="?", help="image_id<TAB>individual_id table")
    p.add_argument("--out", required=True, help="manifest JSON to write")
    p.add_argument("--species", default="")
    p.add_argument("--exclude", help="file of image ids to leave out")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("split", help="generate train/test splits")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=["reid", "detection"], default="reid")
    p.add_argument("--n-splits", type=int, default=5)
    p.add_argument("--train-fraction", type=float, default=0.75)
    p.add_argument("--seed", type=int, required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("detect-eval", help="AP/mAP over an NMS threshold sweep")
    p.add_argument("manifest")
    p.add_argument("raw_detections")
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=["tsv", "json"], default="tsv")
    _add_config_flags(p)
    p.set_defaults(func=cmd_detect_eval)

    p = sub.add_parser("run-reid", help="full recognition protocol over repeated splits")
    p.add_argument("manifest")
    p.add_argument("--raw-detections", help="detector proposals; routing uses ground truth if omitted")
    p.add_argument("--out-dir", required=True)
    _add_config_flags(p, seed_required=True)
    p.set_defaults(func=cmd_run_reid)

    p = sub.add_parser("identify", help="rank identities for one image or flank crop")
    p.add_argument("model_dir")
    p.add_argument("image")
    p.add_argument("--box", type=_box, help="flank box x_min,y_min,x_max,y_max to crop first")
    p.add_argument("--top", type=int, help="number of identities to print (default 5)")
    p.set_defaults(func=cmd_identify)

    p = sub.add_parser("report", help="print or convert a report file")
    p.add_argument("input")
    p.add_argument("--out")
    p.add_argument("--format", choices=["tsv", "json"], default="tsv")
    p.set_defaults(func=cmd_report)
    return parser


def _configure_logging(verbose: bool) -> logging.Handler:
    # a handler of our own on the package logger, so warnings reach stderr
    # even when the host process has already configured the root logger
    logger = logging.getLogger("flankid")
    logger.handlers = [h for h in logger.handlers if not getattr(h, "flankid_cli", False)]
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s: %(message)s"))
    handler.flankid_cli = True
    logger.addHandler(handler)
    logger.setLevel(logging.INFO if verbose else logging.WARNING)
    return handler


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handler = _configure_logging(args.verbose)
    try:
        return args.func(args)
    except (CLIError, AnnotationError, ConfigError, ValueError, OSError, KeyError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    finally:
        logging.getLogger("flankid").removeHandler(handler)


if __name__ == "__main__":
    sys.exit(main())
