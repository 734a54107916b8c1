"""``ddnkit`` command line: receptive-field analysis, Obj estimation, ADS placement, training and inference.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import os
import sys

# BLAS reads its thread count when numpy loads, so this must run first
if os.environ.get("DDNKIT_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[_var] = os.environ["DDNKIT_THREADS"]

import argparse
import math

import numpy as np

from . import __version__
from .ads import (
    AdsPlacement,
    attach_aux_branch,
    auto_place,
    default_probe_size,
    extended_probe,
    parse_directive,
    place_ads,
    placement_from_directive,
)
from .data_io import (
    PgmError,
    SyntheticConfig,
    atomic_write,
    csv_text,
    generate_synthetic,
    list_rasters,
    load_dataset,
    read_mask_dir,
    read_raster,
    reflect_pad,
    save_dataset,
    write_csv,
    write_pgm,
)
from .erf_probe import GAUSSIAN_2SIGMA_MASS, DEFAULT_TRIALS, ProbeError, analyze_rf, linearized, report_from_csv, write_heatmaps
from .netspec import SpecError, build_graph, parse_spec
from .objsize import EmptyDatasetError, MaskImage, estimate_obj, object_sizes
from .training import (
    CheckpointError,
    MetricsRecord,
    TrainConfig,
    TrainingDiverged,
    evaluate,
    init_rng,
    load_checkpoint,
    parse_config,
    predict_labels,
    train,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad usage; this CLI reserves 2 for data errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _read_text(path: str) -> str:
    try:
        with open(path) as fh:
            return fh.read()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None


def _emit(text: str, out):
    if out:
        atomic_write(out, text.encode())
    else:
        sys.stdout.write(text)


# ----------------------------------------------------------------- commands


def cmd_analyze_rf(args) -> int:
    spec = parse_spec(_read_text(args.spec))
    graph = build_graph(spec, init_rng(args.seed))
    target = linearized(graph, args.seed) if args.linear else graph
    size = args.input_size or default_probe_size(target)
    result = analyze_rf(target, size, args.trials, args.mass, args.seed, keep_maps=bool(args.heatmaps))
    report, maps = result if args.heatmaps else (result, None)
    _emit(report.to_csv(), args.out)
    if args.heatmaps:
        write_heatmaps(maps, args.heatmaps)
    return EXIT_OK


def cmd_estimate_obj(args) -> int:
    paths = list_rasters(args.masks)
    masks = [MaskImage(read_raster(p)) for p in paths]
    est = estimate_obj(masks, args.connectivity, args.min_area)
    rows = []
    for path, mask in zip(paths, masks):
        sizes = object_sizes(mask, args.connectivity, args.min_area)
        mean = repr(float(np.mean(sizes))) if sizes else ""
        rows.append([os.path.splitext(os.path.basename(path))[0], len(sizes), mean])
    if args.out:
        write_csv(rows, args.out, ("image", "objects", "mean_size"))
    print(est.summary())
    return EXIT_OK


def _obj_from(args) -> float:
    if args.obj is not None:
        return args.obj
    return estimate_obj(read_mask_dir(args.masks), args.connectivity, args.min_area).obj


def _placement_text(p: AdsPlacement) -> str:
    return csv_text([p.csv_row()], AdsPlacement.CSV_HEADER)


def cmd_place_ads(args) -> int:
    report = report_from_csv(_read_text(args.report))
    obj = _obj_from(args)
    graph = None
    probe = None
    if args.spec:
        graph = build_graph(parse_spec(_read_text(args.spec)), init_rng(args.seed))
        size = args.input_size or default_probe_size(graph)
        probe = extended_probe(graph, args.trials, args.mass, args.seed, size)
    if report.network_lerf < obj and probe is None:
        raise UsageError("Obj exceeds the network LERF (Case-2): pass --spec so the extended encoder can be probed")
    placement = place_ads(report, obj, probe, graph)
    _emit(_placement_text(placement), args.out)
    print(placement.rationale(), file=sys.stderr)
    return EXIT_OK


def _train_setup(args) -> tuple:
    spec = None
    config = TrainConfig()
    ads = None
    if args.config:
        spec, config, ads = parse_config(_read_text(args.config))
    if args.spec:
        spec = parse_spec(_read_text(args.spec))
    if spec is None:
        raise UsageError("no network: pass --spec or put stage directives in --config")
    overrides = {k: getattr(args, k) for k in ("seed", "epochs", "lr", "batch_size", "main_loss") if getattr(args, k) is not None}
    if overrides:
        merged = dict(config.__dict__)
        merged.update(overrides)
        config = TrainConfig(**merged)
    ads = args.ads or ads or "off"
    return spec, config, ads


def cmd_train(args) -> int:
    spec, config, ads = _train_setup(args)
    try:
        directive = parse_directive(ads)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    dataset = load_dataset(args.data, spec.size_multiple)
    if not dataset:
        raise DataError(f"no samples under {args.data}")
    graph = build_graph(spec, init_rng(config.seed))
    os.makedirs(args.out, exist_ok=True)
    placement = None
    if directive == ("auto",):
        obj = estimate_obj(read_mask_dir(os.path.join(args.data, "masks"))).obj
        placement, report = auto_place(graph, obj, args.trials, args.mass, config.seed)
        atomic_write(os.path.join(args.out, "lerf.csv"), report.to_csv().encode())
    elif directive is not None:
        placement = placement_from_directive(graph, *directive)
    if placement is not None:
        attach_aux_branch(graph, placement, np.random.default_rng([config.seed, 5]))
        atomic_write(os.path.join(args.out, "placement.csv"), _placement_text(placement).encode())
        if not math.isnan(placement.obj):
            print(placement.rationale(), file=sys.stderr)
    label = "off" if placement is None else placement.directive()
    result = train(
        graph,
        dataset,
        config,
        log_path=os.path.join(args.out, "log.csv"),
        checkpoint_path=os.path.join(args.out, "checkpoint.ddnk"),
        ads=label,
        on_epoch=(lambda row: print(f"epoch {row['epoch']}: loss {row['train_loss']:.4f} val dice {row['val_dice']:.4f}", file=sys.stderr))
        if args.verbose
        else None,
    )
    print(f"best validation dice {result.best_dice:.4f} at epoch {result.best_epoch}; ads {label}")
    return EXIT_OK


METRIC_HEADER = ("image",) + MetricsRecord.NAMES


def cmd_eval(args) -> int:
    graph, _ = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data, graph.spec.size_multiple)
    if not dataset:
        raise DataError(f"no samples under {args.data}")
    for s in dataset:
        if s.image.shape[1] != graph.spec.input_channels:
            raise DataError(f"{s.id}: {s.image.shape[1]} channels, network expects {graph.spec.input_channels}")
    record = evaluate(graph, dataset, args.threshold)
    rows = [[s.id] + [repr(v) for v in r.values()] for s, r in zip(dataset, record.per_image)]
    rows.append(["mean"] + [repr(v) for v in record.values()])
    _emit(csv_text(rows, METRIC_HEADER), args.out)
    return EXIT_OK


def cmd_predict(args) -> int:
    graph, _ = load_checkpoint(args.checkpoint)
    raster = read_raster(args.image)
    h, w = raster.shape
    img = reflect_pad(raster.astype(np.float64) / 255.0, graph.spec.size_multiple)
    labels = predict_labels(graph, img[None, None], args.threshold)[0, :h, :w]
    write_pgm(args.out, labels)
    return EXIT_OK


def cmd_generate(args) -> int:
    config = SyntheticConfig(
        count=args.count,
        size=args.size,
        kinds=tuple(args.kinds.split(",")),
        min_radius=args.min_radius,
        max_radius=args.max_radius,
        min_objects=args.min_objects,
        max_objects=args.max_objects,
        noise=args.noise,
        seed=args.seed,
    )
    samples = generate_synthetic(config)
    save_dataset(samples, args.out)
    print(f"wrote {len(samples)} samples to {args.out}")
    return EXIT_OK


# ------------------------------------------------------------------- parser


def _probe_flags(p, input_size_help: str):
    p.add_argument("--input-size", type=int, default=None, help=input_size_help)
    p.add_argument("--trials", type=int, default=DEFAULT_TRIALS, help="random re-initialisations averaged per layer (default %(default)s)")
    p.add_argument("--mass", type=float, default=GAUSSIAN_2SIGMA_MASS, help="gradient mass kept by the threshold (default %(default)s)")


def _obj_flags(p):
    p.add_argument("--connectivity", type=int, choices=(4, 8), default=8, help="pixel connectivity of objects (default 8)")
    p.add_argument("--min-area", type=int, default=4, help="ignore components smaller than this many pixels (default 4)")


def build_parser() -> argparse.ArgumentParser:
    parser = Parser(prog="ddnkit", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"ddnkit {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=Parser)
    sub.required = True

    p = sub.add_parser("analyze-rf", help="measure the layer-wise effective receptive field of every encoder layer")
    p.add_argument("--spec", required=True, help="network spec file")
    _probe_flags(p, "probe input side (default: smallest size that keeps the deepest RF unclipped)")
    p.add_argument("--linear", action="store_true", help="probe the linearized encoder (positive weights, no ReLU, average pooling)")
    p.add_argument("--seed", type=int, default=0, help="probe seed (default 0)")
    p.add_argument("--out", help="CSV output path (default stdout)")
    p.add_argument("--heatmaps", metavar="DIR", help="also write per-layer, per-trial gradient heatmaps (PGM + CSV)")
    p.set_defaults(func=cmd_analyze_rf)

    p = sub.add_parser("estimate-obj", help="estimate the dataset object size Obj from a directory of masks")
    p.add_argument("--masks", required=True, help="directory of mask PGM (or raw + .dims) files")
    _obj_flags(p)
    p.add_argument("--out", help="per-image CSV output path")
    p.set_defaults(func=cmd_estimate_obj)

    p = sub.add_parser("place-ads", help="choose the auxiliary-supervision placement from a LERF report and Obj")
    p.add_argument("--report", required=True, help="LERF report CSV written by analyze-rf")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--obj", type=float, help="object size")
    src.add_argument("--masks", help="estimate Obj from this mask directory instead")
    _obj_flags(p)
    p.add_argument("--spec", help="network spec; needed to probe extended encoders when Obj exceeds the network LERF")
    _probe_flags(p, "probe input side for extended encoders (default: automatic)")
    p.add_argument("--seed", type=int, default=0, help="probe seed (default 0)")
    p.add_argument("--out", help="placement CSV output path (default stdout)")
    p.set_defaults(func=cmd_place_ads)

    p = sub.add_parser("train", help="train a network, optionally with adaptive deep supervision")
    p.add_argument("--spec", help="network spec file (may instead be embedded in --config)")
    p.add_argument("--data", required=True, help="dataset directory with images/ and masks/")
    p.add_argument("--config", help="training config file: 'key value' lines, optionally with spec directives")
    p.add_argument("--ads", help="auto | off | case1:<layer> | case2:<k> (default: config value, else off)")
    p.add_argument("--out", required=True, help="output directory for checkpoint.ddnk, log.csv and placement files")
    p.add_argument("--seed", type=int, default=None, help="seed for init, shuffling, augmentation, dropout and probes")
    p.add_argument("--epochs", type=int, default=None, help="override the config epoch count")
    p.add_argument("--lr", type=float, default=None, help="override the config learning rate")
    p.add_argument("--batch-size", type=int, default=None, help="override the config batch size")
    p.add_argument("--main-loss", choices=("ce", "dice", "jaccard"), default=None, help="override the config loss")
    p.add_argument("--trials", type=int, default=DEFAULT_TRIALS, help="LERF trials for --ads auto (default %(default)s)")
    p.add_argument("--mass", type=float, default=GAUSSIAN_2SIGMA_MASS, help="LERF mass for --ads auto (default %(default)s)")
    p.add_argument("--verbose", action="store_true", help="print per-epoch progress to stderr")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset; writes per-image and mean metrics CSV")
    p.add_argument("--checkpoint", required=True, help="checkpoint file written by train")
    p.add_argument("--data", required=True, help="dataset directory with images/ and masks/")
    p.add_argument("--threshold", type=float, default=0.5, help="foreground probability threshold (default 0.5)")
    p.add_argument("--out", help="CSV output path (default stdout)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="segment one image into a label mask PGM of the same size")
    p.add_argument("--checkpoint", required=True, help="checkpoint file written by train")
    p.add_argument("--image", required=True, help="input PGM (or raw + .dims)")
    p.add_argument("--out", required=True, help="output mask PGM")
    p.add_argument("--threshold", type=float, default=0.5, help="foreground probability threshold (default 0.5)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("generate", help="write a synthetic segmentation dataset")
    p.add_argument("--out", required=True, help="output directory (images/ and masks/ are created)")
    p.add_argument("--count", type=int, default=200, help="number of samples (default 200)")
    p.add_argument("--size", type=int, default=64, help="image side (default 64)")
    p.add_argument("--kinds", default="blob", help="comma list of disc, ellipse, blob (default blob)")
    p.add_argument("--min-radius", type=float, default=6.0, help="smallest object radius (default 6)")
    p.add_argument("--max-radius", type=float, default=12.0, help="largest object radius (default 12)")
    p.add_argument("--min-objects", type=int, default=1, help="fewest objects per image (default 1)")
    p.add_argument("--max-objects", type=int, default=3, help="most objects per image (default 3)")
    p.add_argument("--noise", type=float, default=0.05, help="Gaussian noise sigma (default 0.05)")
    p.add_argument("--seed", type=int, default=0, help="generator seed (default 0)")
    p.set_defaults(func=cmd_generate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"ddnkit {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, ProbeError, FloatingPointError) as exc:
        print(f"ddnkit {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except EmptyDatasetError as exc:
        print(f"ddnkit {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DataError, SpecError, PgmError, CheckpointError, OSError, ValueError, KeyError) as exc:
        print(f"ddnkit {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
