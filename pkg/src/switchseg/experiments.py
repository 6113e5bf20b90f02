"""Synthetic train/evaluate protocol behind the loss comparisons and the lambda sweep."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import fcn, metrics, pipeline, synth
from .groundtruth import build_label_map
from .losses import LossConfig

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Protocol:
    scene: synth.SceneSpec = field(default_factory=lambda: synth.SceneSpec(
        height=64, width=64, count_range=(1, 12), radius_range=(3.0, 5.0),
        min_separation=6.0, foreground_fraction=0.03))
    n_train: int = 200
    n_test: int = 50
    shrink_fraction: float = 0.25
    unet: fcn.UNetSpec = field(default_factory=lambda: fcn.UNetSpec(depth=3, base_channels=4))
    train: fcn.TrainConfig = field(default_factory=lambda: fcn.TrainConfig(
        epochs=15, batch_size=4, initial_lr=1e-3, lr_decay=0.3, decay_every=6))
    augment: fcn.AugmentationConfig | None = field(default_factory=lambda: fcn.AugmentationConfig(
        rotations=(0, 90, 180, 270), flips=("horizontal", "vertical"), max_downscale=1))
    post: pipeline.PostprocessConfig = field(default_factory=pipeline.PostprocessConfig)
    criterion: metrics.MatchCriterion = field(default_factory=metrics.MatchCriterion)


@dataclass
class SyntheticData:
    train: list          # (image, label) pairs
    test_scenes: list    # synth.Scene

    @property
    def label_fraction(self) -> float:
        return float(np.mean([lb.mean() for _, lb in self.train]))


# test scenes use a disjoint seed range from training scenes
TEST_SEED_OFFSET = 100_000


def make_data(protocol: Protocol, seed: int = 0) -> SyntheticData:
    spec = replace(protocol.scene, seed=protocol.scene.seed + seed * 1_000_000)
    train_scenes = synth.generate_scenes(spec, protocol.n_train)
    test_scenes = synth.generate_scenes(spec, protocol.n_test, seed_offset=TEST_SEED_OFFSET)
    pairs = [(s.image.astype(np.float32), build_label_map(s.instances, protocol.shrink_fraction).astype(np.uint8))
             for s in train_scenes]
    return SyntheticData(pairs, test_scenes)


@dataclass
class RunResult:
    loss: str
    lam: float
    seed: int
    f1: float
    precision: float
    recall: float
    train_dice: float
    seconds: float
    history: fcn.TrainHistory
    model: fcn.UNet = None


def detect(model: fcn.UNet, scenes, post: pipeline.PostprocessConfig) -> list[pipeline.DetectionResult]:
    batch = np.stack([s.image for s in scenes])[:, None]
    probs = fcn.predict(model, batch)[:, 0]
    return [pipeline.postprocess(p, post.threshold, post.min_area, str(k)) for k, p in enumerate(probs)]


def training_dice(model: fcn.UNet, data: SyntheticData, threshold: float = 0.5) -> float:
    """Pooled Dice score of thresholded predictions against the training labels."""
    images = np.stack([im for im, _ in data.train])[:, None]
    labels = np.stack([lb for _, lb in data.train]).astype(bool)
    probs = np.concatenate([fcn.predict(model, images[i:i + 50])[:, 0] for i in range(0, len(images), 50)])
    return metrics.dice_score(probs > threshold, labels)


def run(protocol: Protocol, loss: str, seed: int = 0, lam: float = 0.8, tau: float = 0.2,
        gamma: float = 5.0, data: SyntheticData | None = None, keep_model: bool = False) -> RunResult:
    """Train one model on the synthetic training split and score the held-out split."""
    data = data or make_data(protocol, seed)
    t0 = time.perf_counter()
    model = fcn.build(protocol.unet, seed=seed)
    tcfg = replace(protocol.train, seed=seed)
    model, history = fcn.train(model, data.train, loss, tcfg, protocol.augment,
                               LossConfig(lam=lam, tau=tau, gamma=gamma))
    results = detect(model, data.test_scenes, protocol.post)
    report = metrics.evaluate_run([r.centroids for r in results],
                                  [s.instances for s in data.test_scenes], protocol.criterion)
    seconds = time.perf_counter() - t0
    p = report.pooled
    out = RunResult(loss, lam, seed, p.f1, p.precision, p.recall, training_dice(model, data),
                    seconds, history, model if keep_model else None)
    logger.info("%s lam=%.2f seed=%d F1=%.4f (P=%.3f R=%.3f) in %.1fs",
                loss, lam, seed, p.f1, p.precision, p.recall, seconds)
    return out


def sweep_lambda(protocol: Protocol, values, seed: int = 0, tau: float = 0.2,
                 data: SyntheticData | None = None) -> list[RunResult]:
    data = data or make_data(protocol, seed)
    return [run(protocol, "switching", seed, lam=float(v), tau=tau, data=data) for v in values]
