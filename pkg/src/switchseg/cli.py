"""Command-line front end: synth, train, infer, eval, sweep-lambda, gradcheck, bench.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import bench, config, experiments, fcn, gradsuite, metrics, pipeline, synth
from .groundtruth import InstanceSet, build_label_map, read_instances, write_instances

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# scene directories: images/<id>.png, instances/<id>.jsonl, optional rgb/<id>.png
# ---------------------------------------------------------------------------

def _scene_ids(data: Path) -> list[str]:
    if not data.is_dir():
        raise DataError(f"data directory {data} does not exist")
    images = data / "images"
    ids = sorted(p.stem for p in images.glob("*.png")) if images.is_dir() else []
    if not ids:
        raise DataError(f"{data}: no images/*.png found")
    return ids


def _read_gt(data: Path, sid: str, shape=None) -> InstanceSet:
    path = data / "instances" / f"{sid}.jsonl"
    if not path.exists():
        raise DataError(f"missing ground truth {path}")
    if shape is None:
        img = data / "images" / f"{sid}.png"
        if img.exists():
            shape = pipeline.read_image(img).shape[:2]
    return read_instances(path, shape)


def load_training_pairs(data: Path, shrink_fraction: float) -> list[tuple[np.ndarray, np.ndarray]]:
    pairs = []
    for sid in _scene_ids(data):
        img = pipeline.read_image(data / "images" / f"{sid}.png")
        if img.ndim == 3:
            img = img.mean(axis=-1)
        gt = _read_gt(data, sid, img.shape)
        if gt.shape != img.shape:
            raise DataError(f"{sid}: image {img.shape} but instances on a {gt.shape} canvas")
        pairs.append(((img / 255.0).astype(np.float32), build_label_map(gt, shrink_fraction).astype(np.uint8)))
    return pairs


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    try:
        raw = json.loads(Path(args.spec).read_text())
    except FileNotFoundError:
        raise DataError(f"spec file {args.spec} not found")
    except json.JSONDecodeError as exc:
        raise UsageError(f"{args.spec}: not valid JSON ({exc})")
    if not isinstance(raw, dict):
        raise UsageError(f"{args.spec}: expected a JSON object")
    raw = dict(raw)
    count = raw.pop("count", 10)
    rgb = raw.pop("rgb", False)
    if not isinstance(count, int) or count < 0:
        raise UsageError(f"count must be a non-negative integer, got {count!r}")
    try:
        spec = synth.SceneSpec.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid scene spec: {exc}")

    out = _out_dir(args.out)
    for sub in ("images", "instances") + (("rgb",) if rgb else ()):
        (out / sub).mkdir(exist_ok=True)
    for k, scene in enumerate(synth.generate_scenes(spec, count)):
        sid = f"scene_{k:04d}"
        pipeline.write_png(out / "images" / f"{sid}.png", synth.to_uint8(scene.image))
        write_instances(out / "instances" / f"{sid}.jsonl", scene.instances)
        if rgb:
            img = synth.colorize_two_stain(scene, seed=spec.seed + k).rgb
            pipeline.write_png(out / "rgb" / f"{sid}.png", img)
    echo = {**asdict(spec), "count": count, "rgb": rgb}
    (out / "spec.json").write_text(json.dumps(echo, indent=2, sort_keys=True) + "\n")
    print(f"wrote {count} scenes to {out}")
    return EXIT_OK


def _effective_config(args) -> config.RunConfig:
    cfg = config.load(args.config)
    overrides = {}
    if getattr(args, "loss", None):
        overrides["loss_name"] = args.loss
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        overrides["train"] = replace(cfg.train, epochs=args.epochs)
    return replace(cfg, **overrides) if overrides else cfg


def cmd_train(args) -> int:
    cfg = _effective_config(args)
    data = load_training_pairs(Path(args.data), cfg.shrink_fraction)
    out = _out_dir(args.out)
    (out / "config.json").write_text(config.echo(cfg) + "\n")

    model = fcn.build(cfg.model, seed=cfg.seed)
    tcfg = replace(cfg.train, seed=cfg.seed)
    model, history = fcn.train(model, data, cfg.loss_name, tcfg, cfg.augment, cfg.loss)
    for r in history.records:
        print(f"epoch {r.epoch} lr={r.lr:.3g} loss={r.loss:.5f} branch_fraction={r.branch_fraction:.3f}",
              file=sys.stderr)
    fcn.save_weights(model, out / "weights.bin")
    history.write_csv(out / "history.csv")
    print(f"trained {cfg.loss_name} on {len(data)} images, final loss {history.losses[-1]:.5f}")
    return EXIT_OK


def cmd_infer(args) -> int:
    cfg = config.load(args.config)
    if args.threads is not None:
        os.environ[pipeline.THREADS_ENV] = str(args.threads)
    model = fcn.load_weights(args.weights)
    source = Path(args.image)
    if not source.exists():
        raise DataError(f"image {source} does not exist")
    image = pipeline.read_source(source)
    slide = cfg.slide_config()
    stain = args.stain or cfg.stain.mode
    if stain not in ("fit", "none") and not Path(stain).exists():
        raise DataError(f"stain model file {stain} does not exist")
    slide = replace(slide, stain=stain)

    result = pipeline.run_slide(image, lambda p: fcn.predict(model, p), slide, image_id=source.stem)
    out = _out_dir(args.out)
    pipeline.write_centroids(out / "centroids.csv", result.centroids)
    pipeline.write_png(out / "mask.png", result.mask)
    timing = {k: v for k, v in result.timing.items()}
    timing["stain"] = stain if image.ndim == 3 else "none"
    (out / "timing.json").write_text(json.dumps(timing, indent=2) + "\n")
    (out / "config.json").write_text(config.echo(replace(cfg, stain=replace(cfg.stain, mode=stain))) + "\n")
    print(f"{len(result.centroids)} nuclei detected in {result.timing['total']:.2f}s")
    return EXIT_OK


def _collect_predictions(pred: Path) -> dict[str, Path]:
    """``<id>.csv`` files, or ``<id>/centroids.csv`` as written by ``infer``."""
    if not pred.is_dir():
        raise DataError(f"prediction directory {pred} does not exist")
    found = {p.stem: p for p in pred.glob("*.csv")}
    for p in pred.glob("*/centroids.csv"):
        found.setdefault(p.parent.name, p)
    if not found:
        raise DataError(f"{pred}: no centroid CSV files found")
    return found


def cmd_eval(args) -> int:
    try:
        crit = metrics.MatchCriterion.parse(args.criterion)
    except ValueError as exc:
        raise UsageError(str(exc))
    preds = _collect_predictions(Path(args.pred))
    gt_dir = Path(args.gt)
    if not gt_dir.is_dir():
        raise DataError(f"ground-truth directory {gt_dir} does not exist")
    if not (gt_dir / "instances").is_dir():
        raise DataError(f"{gt_dir}: no instances/ directory")
    ids = sorted(preds)
    missing = [i for i in ids if not (gt_dir / "instances" / f"{i}.jsonl").exists()]
    if missing:
        raise DataError(f"no ground truth for: {', '.join(missing[:5])}")
    gts = [_read_gt(gt_dir, i) for i in ids]
    report = metrics.evaluate_run([pipeline.read_centroids(preds[i]) for i in ids], gts, crit, ids)
    out = _out_dir(args.out)
    report.write_csv(out / "metrics.csv")
    report.write_json(out / "metrics.json")
    p = report.pooled
    print(f"{len(ids)} images: precision {p.precision:.4f} recall {p.recall:.4f} F1 {p.f1:.4f}")
    return EXIT_OK


def write_sweep(out: Path, results) -> None:
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lambda", "f1", "precision", "recall", "train_dice", "seconds"])
        for r in results:
            w.writerow([r.lam, f"{r.f1:.6f}", f"{r.precision:.6f}", f"{r.recall:.6f}",
                        f"{r.train_dice:.6f}", f"{r.seconds:.2f}"])

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot([r.lam for r in results], [r.f1 for r in results], "o-")
    ax.set_xlabel("lambda")
    ax.set_ylabel("detection F1")
    fig.tight_layout()
    fig.savefig(out / "sweep.svg", format="svg")
    plt.close(fig)


def cmd_sweep(args) -> int:
    cfg = _effective_config(args)
    values = args.values
    if not values or any(not 0 <= v <= 1 for v in values):
        raise UsageError(f"lambda values must lie in [0, 1], got {values}")
    out = _out_dir(args.out)
    (out / "config.json").write_text(config.echo(cfg) + "\n")
    protocol = cfg.protocol()
    data = experiments.make_data(protocol, cfg.seed)
    results = experiments.sweep_lambda(protocol, values, cfg.seed, cfg.loss.tau, data)
    write_sweep(out, results)
    best = max(results, key=lambda r: r.f1)
    print(f"best lambda {best.lam} with F1 {best.f1:.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    entries, seconds = gradsuite.timed_suite(seeds=range(args.seeds), network=not args.no_network)
    ok, text = gradsuite.summarize(entries)
    print(text)
    print(f"{'all checks passed' if ok else 'GRADIENT CHECK FAILED'} in {seconds:.1f}s")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_bench(args) -> int:
    if not args.sizes or any(s <= 0 for s in args.sizes):
        raise UsageError("sizes must be positive megapixel counts")
    if args.threads is not None:
        os.environ[pipeline.THREADS_ENV] = str(args.threads)
    model = fcn.load_weights(args.weights) if args.weights else fcn.build(experiments.Protocol().unet, 0)
    slide = pipeline.SlideConfig(stain=args.stain)
    rows, fit = bench.run_bench(args.sizes, lambda p: fcn.predict(model, p), slide, args.seed, tile=args.tile)
    out = _out_dir(args.out)
    bench.write_csv(out / "bench.csv", rows)
    bench.plot_svg(out / "bench.svg", rows, fit)
    for r in rows:
        print(f"{r.megapixels:8.3f} Mpx  {r.seconds:8.2f} s")
    print(f"linear fit R^2 = {fit.r2:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="switchseg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate synthetic scenes with instance ground truth")
    p.add_argument("--spec", required=True, help="JSON scene spec (SceneSpec fields plus count, rgb)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the U-Net on a scene directory")
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--data", required=True, help="directory with images/ and instances/")
    p.add_argument("--loss", choices=config.LOSS_NAMES)
    p.add_argument("--epochs", type=int, help="override train.epochs")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="detect nuclei in one image or tile directory")
    p.add_argument("--weights", required=True)
    p.add_argument("--image", required=True, help="PNG file or tile directory")
    p.add_argument("--stain", help="fit, none, or a stain-model file (default from config)")
    p.add_argument("--config")
    p.add_argument("--threads", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score centroid predictions against instance ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--criterion", default="inside_mask", help="inside_mask or radius:<px>")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-lambda", help="train one switching-loss model per lambda")
    p.add_argument("--config")
    p.add_argument("--values", type=_float_list, default=[0, 0.25, 0.5, 0.75, 0.8, 1.0])
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck", help="finite-difference checks of every op, loss and the network")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--no-network", action="store_true")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="time whole-image inference across image sizes")
    p.add_argument("--sizes", type=_float_list, default=[1, 4, 16], help="megapixels, comma-separated")
    p.add_argument("--weights")
    p.add_argument("--stain", default="fit")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tile", type=int, default=bench.TILE, help="side of the synthetic tiles the images are built from")
    p.add_argument("--threads", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)
    return parser


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, pipeline.StageError) and exc.__cause__ is not None:
        return _exit_code(exc.__cause__)
    if isinstance(exc, (fcn.NonFiniteLossError, FloatingPointError)):
        return EXIT_NUMERIC
    if isinstance(exc, (UsageError, config.ConfigError)):
        return EXIT_USAGE
    return EXIT_DATA


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, config.ConfigError, DataError, fcn.WeightFileError, fcn.NonFiniteLossError,
            pipeline.StageError, FloatingPointError, OSError, ValueError) as exc:
        print(f"switchseg {args.command}: error: {exc}", file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
