"""Detection F1 under one-to-one centroid matching, and mask Dice scores."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass

import numpy as np

from .groundtruth import InstanceSet

REPORT_COLUMNS = ("image_id", "tp", "fp", "fn", "precision", "recall", "f1", "dice")


@dataclass(frozen=True)
class MatchCriterion:
    mode: str = "inside_mask"
    radius: float = 6.0

    def __post_init__(self):
        if self.mode not in ("inside_mask", "radius"):
            raise ValueError(f"match mode must be 'inside_mask' or 'radius', got {self.mode!r}")
        if self.mode == "radius" and not self.radius > 0:
            raise ValueError(f"radius must be > 0, got {self.radius}")

    @classmethod
    def parse(cls, text: str) -> "MatchCriterion":
        """``inside_mask`` or ``radius:<px>``."""
        text = text.strip()
        if text == "inside_mask":
            return cls("inside_mask")
        if text.startswith("radius"):
            _, _, value = text.partition(":")
            return cls("radius", float(value) if value else 6.0)
        raise ValueError(f"cannot parse match criterion {text!r}")


@dataclass(frozen=True)
class DetectionScore:
    f1: float
    precision: float
    recall: float
    tp: int
    fp: int
    fn: int

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int) -> "DetectionScore":
        if tp + fp + fn == 0:
            return cls(1.0, 1.0, 1.0, 0, 0, 0)
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        return cls(2 * tp / (2 * tp + fp + fn), precision, recall, tp, fp, fn)


def candidate_pairs(pred: np.ndarray, gt: InstanceSet, crit: MatchCriterion) -> list[tuple]:
    """All ``(distance, pred_index, gt_index)`` pairs allowed by the criterion."""
    pred = np.asarray(pred, dtype=float).reshape(-1, 2)
    centers = gt.centroids
    if len(pred) == 0 or len(centers) == 0:
        return []
    dist = np.hypot(pred[:, None, 0] - centers[None, :, 0], pred[:, None, 1] - centers[None, :, 1])
    pairs = []
    if crit.mode == "radius":
        for i, j in zip(*np.nonzero(dist <= crit.radius)):
            pairs.append((float(dist[i, j]), int(i), int(j)))
    else:
        for j, inst in enumerate(gt.instances):
            for i, (r, c) in enumerate(pred):
                if inst.contains(r, c):
                    pairs.append((float(dist[i, j]), i, j))
    return pairs


def greedy_match(pairs: list[tuple]) -> list[tuple[int, int]]:
    """Accept pairs by ascending (distance, pred index, gt index) while both ends are free."""
    used_p, used_g, matches = set(), set(), []
    for _, i, j in sorted(pairs):
        if i not in used_p and j not in used_g:
            used_p.add(i)
            used_g.add(j)
            matches.append((i, j))
    return matches


def detection_f1(pred, gt: InstanceSet, crit: MatchCriterion | None = None) -> DetectionScore:
    crit = crit or MatchCriterion()
    pred = np.asarray(pred, dtype=float).reshape(-1, 2)
    tp = len(greedy_match(candidate_pairs(pred, gt, crit)))
    return DetectionScore.from_counts(tp, len(pred) - tp, len(gt) - tp)


def dice_score(pred_mask, gt_mask) -> float:
    p = np.asarray(pred_mask, dtype=bool)
    g = np.asarray(gt_mask, dtype=bool)
    if p.shape != g.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {g.shape}")
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / total


@dataclass
class RunReport:
    rows: list
    pooled: DetectionScore
    mean_dice: float | None

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(REPORT_COLUMNS)
            for r in self.rows:
                w.writerow([r[c] if r[c] is not None else "" for c in REPORT_COLUMNS])
            p = self.pooled
            w.writerow(["ALL", p.tp, p.fp, p.fn, p.precision, p.recall, p.f1,
                        self.mean_dice if self.mean_dice is not None else ""])

    def to_json(self) -> dict:
        return {"images": self.rows, "pooled": asdict(self.pooled), "mean_dice": self.mean_dice}

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2)


def evaluate_run(results, gts, crit: MatchCriterion | None = None, image_ids=None) -> RunReport:
    """Per-image scores plus micro-averaged (pooled TP/FP/FN) detection scores.

    ``results`` items may be :class:`~switchseg.pipeline.DetectionResult`
    objects or plain centroid arrays; Dice is reported when a mask is present.
    """
    results, gts = list(results), list(gts)
    if not results:
        raise ValueError("evaluate_run needs at least one result")
    if len(results) != len(gts):
        raise ValueError(f"{len(results)} results but {len(gts)} ground-truth sets")
    crit = crit or MatchCriterion()
    rows, tp, fp, fn, dices = [], 0, 0, 0, []
    for k, (res, gt) in enumerate(zip(results, gts)):
        centroids = getattr(res, "centroids", res)
        score = detection_f1(centroids, gt, crit)
        mask = getattr(res, "mask", None)
        d = dice_score(mask, gt.union_mask()) if mask is not None else None
        if d is not None:
            dices.append(d)
        image_id = image_ids[k] if image_ids is not None else getattr(res, "image_id", None) or str(k)
        rows.append({"image_id": image_id, "tp": score.tp, "fp": score.fp, "fn": score.fn,
                     "precision": score.precision, "recall": score.recall, "f1": score.f1, "dice": d})
        tp, fp, fn = tp + score.tp, fp + score.fp, fn + score.fn
    return RunReport(rows, DetectionScore.from_counts(tp, fp, fn),
                     float(np.mean(dices)) if dices else None)
