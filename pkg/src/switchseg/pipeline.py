"""Whole-image inference: tiling, tissue filtering, patch prediction, stitching, centroids."""

from __future__ import annotations

import csv
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np
from PIL import Image
from scipy import ndimage

from . import stainsep

logger = logging.getLogger(__name__)

THREADS_ENV = "SWITCHSEG_THREADS"
EIGHT = np.ones((3, 3), dtype=bool)


class StageError(RuntimeError):
    def __init__(self, stage: str, exc: Exception):
        super().__init__(f"stage '{stage}' failed: {exc}")
        self.stage = stage


@dataclass(frozen=True)
class PatchGrid:
    size: int = 256
    stride: int = 192

    def __post_init__(self):
        if self.size < 1 or not 1 <= self.stride <= self.size:
            raise ValueError(f"need size >= 1 and 1 <= stride <= size, got {self.size}, {self.stride}")

    def offsets(self, length: int) -> list[int]:
        """Raster offsets along one axis; the last patch sits flush with the border."""
        if length <= self.size:
            return [0]
        offs = list(range(0, length - self.size + 1, self.stride))
        if offs[-1] != length - self.size:
            offs.append(length - self.size)
        return offs

    def origins(self, height: int, width: int) -> list[tuple[int, int]]:
        return [(r, c) for r in self.offsets(height) for c in self.offsets(width)]


@dataclass(frozen=True)
class PostprocessConfig:
    threshold: float = 0.35
    min_area: int = 2


@dataclass
class DetectionResult:
    centroids: np.ndarray          # (K, 2) row, col
    mask: np.ndarray               # bool
    probability: np.ndarray | None = None
    image_id: str = ""
    timing: dict = field(default_factory=dict)

    def write_csv(self, path):
        write_centroids(path, self.centroids)


def extract_patches(image: np.ndarray, grid: PatchGrid) -> Iterator[tuple[tuple[int, int], np.ndarray]]:
    """Yield ``((row, col), patch)`` in raster order; patches are views."""
    h, w = image.shape[:2]
    for r, c in grid.origins(h, w):
        yield (r, c), image[r:r + grid.size, c:c + grid.size]


def tissue_filter(patch: np.ndarray, white_level: int = 220, max_white_fraction: float = 0.60) -> bool:
    """Keep unless more than 60% of pixels are white (min channel above ``white_level``)."""
    p = np.asarray(patch)
    lum = p.min(axis=-1) if p.ndim == 3 else p
    return bool(np.mean(lum > white_level) <= max_white_fraction)


def stitch(predictions, canvas_shape) -> np.ndarray:
    """Per-pixel mean of all covering patch predictions.

    Patches are reduced in sorted origin order with a running mean, so the
    result does not depend on the order they arrive in and a pixel covered
    only by equal values gets exactly that value.
    """
    out = np.zeros(canvas_shape, dtype=np.float64)
    count = np.zeros(canvas_shape, dtype=np.int32)
    for (r, c), pred in sorted(predictions, key=lambda item: item[0]):
        ph, pw = pred.shape
        region = out[r:r + ph, c:c + pw]
        cnt = count[r:r + ph, c:c + pw]
        cnt += 1
        region += (pred - region) / cnt
    if np.any(count == 0):
        raise ValueError("patch grid leaves pixels uncovered")
    return out


def postprocess(prob: np.ndarray, threshold: float = 0.35, min_area: int = 2,
                image_id: str = "") -> DetectionResult:
    """Threshold (strictly above), 8-connected components, drop small ones, centroids."""
    binary = np.asarray(prob) > threshold
    labels, n = ndimage.label(binary, structure=EIGHT)
    if n == 0:
        return DetectionResult(np.zeros((0, 2)), np.zeros_like(binary), prob, image_id)
    areas = np.bincount(labels.ravel(), minlength=n + 1)
    keep = np.flatnonzero(areas >= min_area)
    keep = keep[keep > 0]
    mask = np.isin(labels, keep)
    if len(keep) == 0:
        return DetectionResult(np.zeros((0, 2)), mask, prob, image_id)
    rr, cc = np.indices(labels.shape)
    flat = labels.ravel()
    sum_r = np.bincount(flat, weights=rr.ravel(), minlength=n + 1)
    sum_c = np.bincount(flat, weights=cc.ravel(), minlength=n + 1)
    cents = np.stack([sum_r[keep] / areas[keep], sum_c[keep] / areas[keep]], axis=1)
    return DetectionResult(cents, mask, prob, image_id)


def _thread_count() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def predict_patches(model_fn: Callable[[np.ndarray], np.ndarray], net_input: np.ndarray,
                    filter_source: np.ndarray | None, grid: PatchGrid, use_filter: bool = True):
    """Run ``model_fn`` on every kept patch; rejected patches predict zero."""
    jobs, rejected = [], []
    for origin, patch in extract_patches(net_input, grid):
        r, c = origin
        if use_filter and filter_source is not None and \
                not tissue_filter(filter_source[r:r + grid.size, c:c + grid.size]):
            rejected.append((origin, np.zeros(patch.shape[:2])))
        else:
            jobs.append((origin, patch))
    threads = _thread_count()
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            preds = list(pool.map(lambda job: model_fn(job[1]), jobs))
    else:
        preds = [model_fn(patch) for _, patch in jobs]
    return [(o, np.asarray(p, dtype=np.float64)) for (o, _), p in zip(jobs, preds)] + rejected, len(rejected)


@dataclass
class SlideConfig:
    grid: PatchGrid = field(default_factory=PatchGrid)
    post: PostprocessConfig = field(default_factory=PostprocessConfig)
    stain: str = "fit"            # "fit", "none", or a stain-model path
    use_tissue_filter: bool = True
    stain_seed: int = 0
    sparsity_weight: float = 0.1
    stain_iters: int = 300


def _pad_to(arr: np.ndarray, size: int, value) -> np.ndarray:
    h, w = arr.shape[:2]
    ph, pw = max(size - h, 0), max(size - w, 0)
    if not ph and not pw:
        return arr
    pad = ((0, ph), (0, pw)) + ((0, 0),) * (arr.ndim - 2)
    return np.pad(arr, pad, constant_values=value)


def prepare_input(image: np.ndarray, config: SlideConfig, stain_model: stainsep.StainModel | None = None):
    """Network input in [0, 1] and the stain model used (if any)."""
    img = np.asarray(image)
    if config.stain == "none" or img.ndim == 2:
        if img.ndim == 3:
            img = img.mean(axis=-1)
        scale = 255.0 if img.dtype == np.uint8 else 1.0
        return img.astype(np.float64) / scale, None
    if stain_model is None:
        if config.stain == "fit":
            stain_model = stainsep.fit_stain_model(stainsep.rgb_to_od(img), config.sparsity_weight,
                                                   config.stain_iters, seed=config.stain_seed)
        else:
            stain_model = stainsep.StainModel.load(config.stain)
    return stainsep.h_channel(img, stain_model), stain_model


def run_slide(image: np.ndarray, model_fn: Callable[[np.ndarray], np.ndarray],
              config: SlideConfig | None = None, stain_model: stainsep.StainModel | None = None,
              image_id: str = "") -> DetectionResult:
    """Stain separation, patching, tissue filter, prediction, stitching and post-processing.

    ``model_fn`` maps a 2-d input patch to a probability map of the same
    size.  Wall-clock seconds per stage land in ``result.timing``.
    """
    config = config or SlideConfig()
    image = np.asarray(image)
    h, w = image.shape[:2]
    timing = {}

    def stage(name, fn):
        t0 = time.perf_counter()
        try:
            return fn()
        except Exception as exc:  # re-raised with the stage name attached
            raise StageError(name, exc) from exc
        finally:
            timing[name] = time.perf_counter() - t0

    net_input, _ = stage("stain_separation", lambda: prepare_input(image, config, stain_model))
    size = config.grid.size
    net_input = _pad_to(net_input, size, 0.0)
    white = 255 if image.dtype == np.uint8 else 1.0
    filter_src = _pad_to(image, size, white) if image.ndim == 3 else None
    preds, n_rejected = stage("predict", lambda: predict_patches(
        model_fn, net_input, filter_src, config.grid, config.use_tissue_filter))
    prob = stage("stitch", lambda: stitch(preds, net_input.shape)[:h, :w])
    result = stage("postprocess", lambda: postprocess(prob, config.post.threshold,
                                                      config.post.min_area, image_id))
    timing["total"] = sum(timing.values())
    timing["patches"] = len(preds)
    timing["patches_rejected"] = n_rejected
    timing["pixels"] = h * w
    result.timing = timing
    return result


# ---------------------------------------------------------------------------
# raster and tile-directory I/O
# ---------------------------------------------------------------------------

def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        return np.asarray(im).copy()


def write_png(path, array: np.ndarray) -> None:
    arr = np.asarray(array)
    if arr.dtype == bool:
        arr = arr.astype(np.uint8) * 255
    Image.fromarray(arr).save(path, format="PNG")


def write_tile_directory(path, image: np.ndarray, tile: int = 256) -> None:
    """Tiles named ``{row}_{col}.png`` (tile indices) plus ``manifest.json``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    h, w = image.shape[:2]
    rows, cols = -(-h // tile), -(-w // tile)
    for i in range(rows):
        for j in range(cols):
            write_png(path / f"{i}_{j}.png", image[i * tile:(i + 1) * tile, j * tile:(j + 1) * tile])
    manifest = {"height": h, "width": w, "tile_size": tile, "rows": rows, "cols": cols,
                "channels": 1 if image.ndim == 2 else image.shape[2]}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2))


def read_tile_directory(path) -> np.ndarray:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    h, w, t = manifest["height"], manifest["width"], manifest["tile_size"]
    shape = (h, w) if manifest.get("channels", 3) == 1 else (h, w, manifest["channels"])
    out = np.zeros(shape, dtype=np.uint8)
    for i in range(manifest["rows"]):
        for j in range(manifest["cols"]):
            tile = read_image(path / f"{i}_{j}.png")
            th, tw = min(t, h - i * t), min(t, w - j * t)
            if tile.shape[:2] != (th, tw):
                raise ValueError(f"tile {i}_{j} has shape {tile.shape[:2]}, expected {(th, tw)}")
            out[i * t:i * t + th, j * t:j * t + tw] = tile
    return out


def read_source(path) -> np.ndarray:
    path = Path(path)
    return read_tile_directory(path) if path.is_dir() else read_image(path)


def write_centroids(path, centroids) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "row", "col"])
        for k, (r, c) in enumerate(np.asarray(centroids).reshape(-1, 2), start=1):
            w.writerow([k, f"{r:.3f}", f"{c:.3f}"])


def read_centroids(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return np.array([[float(r["row"]), float(r["col"])] for r in rows], dtype=float).reshape(-1, 2)
