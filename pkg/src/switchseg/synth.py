"""Seeded synthetic nucleus scenes with exact instance ground truth."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .groundtruth import Instance, InstanceSet

# unit optical-density directions (R, G, B)
HEMATOXYLIN_OD = np.array([0.650, 0.704, 0.286])
EOSIN_OD = np.array([0.072, 0.990, 0.105])
DAB_OD = np.array([0.268, 0.570, 0.776])


@dataclass(frozen=True)
class SceneSpec:
    height: int = 64
    width: int = 64
    count_range: tuple = (2, 6)
    radius_range: tuple = (3.0, 5.0)
    min_separation: float = 6.0
    foreground_fraction: float | None = None
    noise_sigma: float = 0.03
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.count_range
        rlo, rhi = self.radius_range
        if self.height < 1 or self.width < 1:
            raise ValueError("canvas dims must be positive")
        if not 0 <= lo <= hi:
            raise ValueError(f"bad count range {self.count_range}")
        if not 0.5 <= rlo <= rhi:
            raise ValueError(f"bad radius range {self.radius_range}")
        if self.min_separation < 0:
            raise ValueError("min_separation must be >= 0")
        if self.foreground_fraction is not None and not 0 <= self.foreground_fraction < 1:
            raise ValueError("foreground_fraction must be in [0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scene spec keys: {sorted(unknown)}")
        d = dict(d)
        for k in ("count_range", "radius_range"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class Scene:
    image: np.ndarray            # float in [0, 1], nuclei bright
    instances: InstanceSet
    peaks: list = field(default_factory=list)   # per-nucleus peak intensity

    @property
    def foreground_fraction(self) -> float:
        return float(self.instances.union_mask().mean())


def _mean_ellipse_area(spec: SceneSpec) -> float:
    rlo, rhi = spec.radius_range
    # semi-major uniform on [rlo, rhi], minor = major * U[0.5, 1]
    mean_a2 = (rhi ** 3 - rlo ** 3) / (3 * (rhi - rlo)) if rhi > rlo else rlo ** 2
    return math.pi * mean_a2 * 0.75


def _nucleus_count(spec: SceneSpec, rng) -> int:
    lo, hi = spec.count_range
    if spec.foreground_fraction is None:
        return int(rng.integers(lo, hi + 1))
    n = int(round(spec.foreground_fraction * spec.height * spec.width / _mean_ellipse_area(spec)))
    return min(max(n, lo), hi)


def _background(spec: SceneSpec, rng) -> np.ndarray:
    texture = ndimage.gaussian_filter(rng.standard_normal((spec.height, spec.width)), 3.0, mode="wrap")
    texture /= max(texture.std(), 1e-12)
    return 0.15 + 0.04 * texture


def generate_scene(spec: SceneSpec) -> Scene:
    """Elliptical nuclei (axis ratio at most 2) on a textured, noisy background."""
    rng = np.random.default_rng(spec.seed)
    h, w = spec.height, spec.width
    image = _background(spec, rng)
    target = _nucleus_count(spec, rng)
    rlo, rhi = spec.radius_range

    centers, instances, peaks = [], [], []
    attempts = 0
    while len(instances) < target and attempts < 200 * max(target, 1):
        attempts += 1
        a = rng.uniform(rlo, rhi)
        b = max(a * rng.uniform(0.5, 1.0), 1.0)
        theta = rng.uniform(0, math.pi)
        margin = math.ceil(a) + 1
        if h <= 2 * margin or w <= 2 * margin:
            break
        cy = rng.uniform(margin, h - margin)
        cx = rng.uniform(margin, w - margin)
        if any(math.hypot(cy - y, cx - x) < spec.min_separation for y, x in centers):
            continue
        top, left = max(0, int(math.floor(cy - a - 1))), max(0, int(math.floor(cx - a - 1)))
        bottom, right = min(h, int(math.ceil(cy + a + 2))), min(w, int(math.ceil(cx + a + 2)))
        yy, xx = np.mgrid[top:bottom, left:right]
        dy, dx = yy - cy, xx - cx
        u = dx * math.cos(theta) + dy * math.sin(theta)
        v = -dx * math.sin(theta) + dy * math.cos(theta)
        rho2 = (u / a) ** 2 + (v / b) ** 2
        crop = rho2 <= 1.0
        if not crop.any():
            continue
        peak = rng.uniform(0.6, 0.9)
        profile = peak * (1.0 - 0.4 * rho2)
        region = image[top:bottom, left:right]
        region[crop] = np.maximum(region[crop], profile[crop])
        centers.append((cy, cx))
        peaks.append(peak)
        inst = Instance.from_mask(len(instances) + 1, crop)
        inst.top += top
        inst.left += left
        instances.append(inst)

    image = image + spec.noise_sigma * rng.standard_normal((h, w))
    return Scene(np.clip(image, 0.0, 1.0), InstanceSet(h, w, instances), peaks)


def generate_scenes(spec: SceneSpec, count: int, seed_offset: int = 0) -> list[Scene]:
    """``count`` scenes with seeds ``spec.seed + seed_offset + i``."""
    return [generate_scene(replace(spec, seed=spec.seed + seed_offset + i)) for i in range(count)]


@dataclass
class TwoStainImage:
    rgb: np.ndarray          # uint8 (H, W, 3)
    basis: np.ndarray        # (3, 2) unit columns, [stain 1, stain 2]
    densities: np.ndarray    # (2, H*W)


def two_stain_densities(scene: Scene, nuclear_density: float = 1.2, stroma_density: float = 0.5,
                        seed: int = 0) -> np.ndarray:
    """Stain 1 follows nuclear intensity, stain 2 a smooth stromal texture with pale gaps."""
    rng = np.random.default_rng(seed)
    h, w = scene.image.shape
    mask = scene.instances.union_mask()
    nuc = np.where(mask, scene.image, 0.0) * nuclear_density
    tex = ndimage.gaussian_filter(rng.standard_normal((h, w)), 4.0, mode="wrap")
    tex = (tex - tex.min()) / max(np.ptp(tex), 1e-12)
    stroma = np.where(mask, 0.05, stroma_density * np.clip(1.6 * tex - 0.3, 0.0, 1.0))
    return np.stack([nuc.ravel(), stroma.ravel()])


def colorize_two_stain(scene: Scene, basis=None, densities=None, seed: int = 0) -> TwoStainImage:
    """Render ``basis @ densities`` through Beer-Lambert to 8-bit RGB."""
    from .stainsep import od_to_rgb

    if basis is None:
        basis = np.stack([HEMATOXYLIN_OD, EOSIN_OD], axis=1)
    basis = np.asarray(basis, dtype=float)
    basis = basis / np.linalg.norm(basis, axis=0, keepdims=True)
    if densities is None:
        densities = two_stain_densities(scene, seed=seed)
    h, w = scene.image.shape
    od = (basis @ densities).T.reshape(h, w, 3)
    return TwoStainImage(od_to_rgb(od), basis, np.asarray(densities, dtype=float))


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
