"""Whole-image runtime versus image size, with a least-squares line through the timings."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import pipeline, synth

TILE = 512


@dataclass
class BenchRow:
    megapixels: float
    height: int
    width: int
    seconds: float
    timing: dict


@dataclass
class LinearFit:
    slope: float        # seconds per pixel
    intercept: float
    r2: float


def synthetic_slide(megapixels: float, seed: int = 0, rgb: bool = True, tile: int = TILE) -> np.ndarray:
    """Square slide of about ``megapixels`` built from a few distinct two-stain tiles.

    The side is rounded to a multiple of the tile size so content density is
    the same at every scale.
    """
    side = max(tile, int(round(math.sqrt(megapixels * 1e6) / tile)) * tile)
    # about one nucleus per 1300 px^2, whatever the tile size
    n = max(1, tile * tile // 1300)
    spec = synth.SceneSpec(tile, tile, count_range=(int(0.75 * n), int(1.25 * n) + 1),
                           radius_range=(4.0, 7.0), min_separation=9.0)
    tiles = []
    for k in range(4):
        scene = synth.generate_scene(synth.SceneSpec(**{**spec.__dict__, "seed": seed + k}))
        tiles.append(synth.colorize_two_stain(scene, seed=seed + k).rgb if rgb else synth.to_uint8(scene.image))
    n = side // tile
    rows = [np.concatenate([tiles[(i + j) % 4] for j in range(n)], axis=1) for i in range(n)]
    return np.concatenate(rows, axis=0)


def linear_fit(x, y) -> LinearFit:
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else 1.0
    return LinearFit(float(slope), float(intercept), r2)


def run_bench(sizes, model_fn, config: pipeline.SlideConfig | None = None, seed: int = 0,
              rgb: bool = True, tile: int = TILE) -> tuple[list[BenchRow], LinearFit]:
    config = config or pipeline.SlideConfig()
    rows = []
    for mp in sizes:
        image = synthetic_slide(mp, seed, rgb, tile)
        res = pipeline.run_slide(image, model_fn, config, image_id=f"{mp}Mpx")
        h, w = image.shape[:2]
        rows.append(BenchRow(h * w / 1e6, h, w, res.timing["total"], res.timing))
        del image, res
    fit = linear_fit([r.megapixels for r in rows], [r.seconds for r in rows]) if len(rows) >= 2 \
        else LinearFit(float("nan"), float("nan"), float("nan"))
    return rows, fit


def write_csv(path, rows) -> None:
    stages = ["stain_separation", "predict", "stitch", "postprocess"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["megapixels", "height", "width", "seconds", *stages, "patches"])
        for r in rows:
            w.writerow([f"{r.megapixels:.4f}", r.height, r.width, f"{r.seconds:.4f}",
                        *(f"{r.timing.get(s, 0.0):.4f}" for s in stages), r.timing.get("patches", "")])


def plot_svg(path, rows, fit: LinearFit) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    x = np.array([r.megapixels for r in rows])
    y = np.array([r.seconds for r in rows])
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(x, y, "o", label="measured")
    if np.isfinite(fit.slope):
        xs = np.linspace(0, x.max() * 1.05, 50)
        ax.plot(xs, fit.slope * xs + fit.intercept, "-", label=f"linear fit, R$^2$={fit.r2:.3f}")
    ax.set_xlabel("image size (megapixels)")
    ax.set_ylabel("seconds")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
