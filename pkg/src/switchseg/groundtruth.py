"""Instance annotations and the shrunken weak labels used for training.

Shrinking ranks every pixel of an instance by
``(chessboard depth desc, distance to centroid asc, row, col)`` and keeps
the first ``round(fraction * area)`` of them.  Taking a prefix of one fixed
ranking is the same as thresholding the chessboard distance transform at
the deepest level that still fits the budget and topping up from the next
level, and it makes the result nested in ``fraction`` by construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage


@dataclass
class Instance:
    """One nucleus: a cropped mask placed at ``(top, left)`` on the canvas."""

    id: int
    top: int
    left: int
    crop: np.ndarray

    def __post_init__(self):
        self.crop = np.asarray(self.crop, dtype=bool)
        if not self.crop.any():
            raise ValueError(f"instance {self.id} has an empty mask")

    @property
    def area(self) -> int:
        return int(self.crop.sum())

    @property
    def centroid(self) -> tuple[float, float]:
        rr, cc = np.nonzero(self.crop)
        return float(rr.mean() + self.top), float(cc.mean() + self.left)

    def full_mask(self, shape) -> np.ndarray:
        out = np.zeros(shape, dtype=bool)
        h, w = self.crop.shape
        out[self.top:self.top + h, self.left:self.left + w] = self.crop
        return out

    def contains(self, row: float, col: float) -> bool:
        r, c = int(round(row)) - self.top, int(round(col)) - self.left
        h, w = self.crop.shape
        return 0 <= r < h and 0 <= c < w and bool(self.crop[r, c])

    @classmethod
    def from_mask(cls, id: int, mask: np.ndarray) -> "Instance":
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            raise ValueError(f"instance {id} has an empty mask")
        rows = np.flatnonzero(mask.any(axis=1))
        cols = np.flatnonzero(mask.any(axis=0))
        r0, r1, c0, c1 = rows[0], rows[-1] + 1, cols[0], cols[-1] + 1
        return cls(id, int(r0), int(c0), mask[r0:r1, c0:c1].copy())


@dataclass
class InstanceSet:
    height: int
    width: int
    instances: list = field(default_factory=list)

    def __post_init__(self):
        for inst in self.instances:
            h, w = inst.crop.shape
            if inst.top < 0 or inst.left < 0 or inst.top + h > self.height or inst.left + w > self.width:
                raise ValueError(f"instance {inst.id} extends beyond the {self.height}x{self.width} canvas")

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    def __len__(self):
        return len(self.instances)

    def __iter__(self):
        return iter(self.instances)

    @property
    def centroids(self) -> np.ndarray:
        return np.array([i.centroid for i in self.instances], dtype=float).reshape(-1, 2)

    def union_mask(self) -> np.ndarray:
        out = np.zeros(self.shape, dtype=bool)
        for inst in self.instances:
            h, w = inst.crop.shape
            out[inst.top:inst.top + h, inst.left:inst.left + w] |= inst.crop
        return out

    @classmethod
    def from_label_raster(cls, labels: np.ndarray) -> "InstanceSet":
        """Convert an integer raster (0 = background, k > 0 = instance k)."""
        labels = np.asarray(labels)
        if labels.ndim != 2 or labels.dtype.kind not in "iu":
            raise ValueError("label raster must be a 2-d integer array")
        out = cls(*labels.shape)
        for k, sl in enumerate(ndimage.find_objects(labels), start=1):
            if sl is None:
                continue
            crop = labels[sl] == k
            out.instances.append(Instance(k, sl[0].start, sl[1].start, crop))
        return out


# ---------------------------------------------------------------------------
# shrinking
# ---------------------------------------------------------------------------

def _ranking(mask: np.ndarray) -> np.ndarray:
    """Flat indices of ``mask`` pixels, best-first."""
    depth = ndimage.distance_transform_cdt(np.pad(mask, 1), metric="chessboard")[1:-1, 1:-1]
    rr, cc = np.nonzero(mask)
    cr, ccol = rr.mean(), cc.mean()
    dist = (rr - cr) ** 2 + (cc - ccol) ** 2
    order = np.lexsort((cc, rr, dist, -depth[rr, cc]))
    return rr[order] * mask.shape[1] + cc[order], depth[rr[order], cc[order]]


def _target_area(area: int, fraction: float) -> int:
    return max(1, int(round(fraction * area)))


def shrink_instance(mask, fraction: float = 0.25) -> np.ndarray:
    """Keep the central ``fraction`` of a binary mask's area (at least one pixel)."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("cannot shrink an empty mask")
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    flat, _ = _ranking(mask)
    out = np.zeros(mask.size, dtype=bool)
    out[flat[:_target_area(len(flat), fraction)]] = True
    return out.reshape(mask.shape)


def _adjacent_pairs(owner: np.ndarray) -> set:
    """Pairs of distinct owners that are 8-neighbours somewhere on the canvas."""
    h, w = owner.shape
    padded = np.pad(owner, 1, constant_values=-1)
    pairs = set()
    for dr, dc in ((0, 1), (1, -1), (1, 0), (1, 1)):
        nb = padded[1 + dr:1 + dr + h, 1 + dc:1 + dc + w]
        hit = (owner >= 0) & (nb >= 0) & (owner != nb)
        for x, y in zip(owner[hit], nb[hit]):
            pairs.add((int(min(x, y)), int(max(x, y))))
    return pairs


def build_label_map(instances: InstanceSet, fraction: float = 0.25) -> np.ndarray:
    """Union of shrunken instances, eroding any that still touch one another.

    Two shrunken instances touch when they overlap or are 8-adjacent.  Each
    member of a touching pair loses its shallowest remaining depth level
    (never its last pixel) until no contact remains.
    """
    shape = instances.shape
    kept = []
    for inst in instances:
        flat, depth = _ranking(inst.crop)
        n = _target_area(len(flat), fraction)
        kept.append([flat, depth, n])

    def canvas_pixels(i):
        inst = instances.instances[i]
        flat, _, n = kept[i]
        w = inst.crop.shape[1]
        rr, cc = np.divmod(flat[:n], w)
        return rr + inst.top, cc + inst.left

    while True:
        owner = np.full(shape, -1, dtype=np.int64)
        touching = set()
        for i in range(len(kept)):
            rr, cc = canvas_pixels(i)
            hits = owner[rr, cc]
            touching.update((int(j), i) for j in np.unique(hits[hits >= 0]))
            owner[rr, cc] = i
        touching.update(_adjacent_pairs(owner))
        shrinkable = {k for pair in touching for k in pair if kept[k][2] > 1}
        if not shrinkable:
            break
        for k in shrinkable:
            flat, depth, n = kept[k]
            shallowest = depth[n - 1]
            n_new = int(np.searchsorted(-depth[:n], -shallowest, side="left"))
            kept[k][2] = max(1, n_new)

    out = np.zeros(shape, dtype=bool)
    for rr, cc in (canvas_pixels(i) for i in range(len(kept))):
        out[rr, cc] = True
    return out


# ---------------------------------------------------------------------------
# JSON-lines instance files
# ---------------------------------------------------------------------------

def rle_encode(mask: np.ndarray) -> list[list[int]]:
    """Row-major ``[start, length]`` runs of true pixels."""
    flat = np.concatenate([[0], np.asarray(mask, dtype=np.int8).ravel(), [0]])
    edges = np.flatnonzero(np.diff(flat))
    starts, ends = edges[::2], edges[1::2]
    return [[int(s), int(e - s)] for s, e in zip(starts, ends)]


def rle_decode(runs, height: int, width: int) -> np.ndarray:
    out = np.zeros(height * width, dtype=bool)
    for start, length in runs:
        if start < 0 or length < 0 or start + length > out.size:
            raise ValueError(f"run ({start}, {length}) outside a {height}x{width} canvas")
        out[start:start + length] = True
    return out.reshape(height, width)


def write_instances(path, instances: InstanceSet) -> None:
    """One JSON object per line: ``{"id", "height", "width", "rle"}``.

    ``rle`` holds ``[start, length]`` runs over the row-major canvas.
    """
    with open(path, "w") as fh:
        for inst in instances:
            rec = {"id": inst.id, "height": instances.height, "width": instances.width,
                   "rle": rle_encode(inst.full_mask(instances.shape))}
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def read_instances(path, shape=None) -> InstanceSet:
    """Read a JSON-lines instance file; ``shape`` is needed only when it is empty."""
    records = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
    if not records:
        if shape is None:
            raise ValueError(f"{path}: no instances and no canvas shape given")
        return InstanceSet(*shape)
    h, w = records[0]["height"], records[0]["width"]
    out = InstanceSet(h, w)
    for rec in records:
        if (rec["height"], rec["width"]) != (h, w):
            raise ValueError(f"{path}: instance {rec['id']} has canvas "
                             f"{rec['height']}x{rec['width']}, expected {h}x{w}")
        out.instances.append(Instance.from_mask(int(rec["id"]), rle_decode(rec["rle"], h, w)))
    return out
