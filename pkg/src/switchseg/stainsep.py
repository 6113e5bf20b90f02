"""Two-stain separation by sparse non-negative matrix factorisation of optical densities.

The factorisation minimises ``||V - W H||_F^2 + alpha * sum(H)`` with
``W, H >= 0`` and unit-norm columns of ``W``.  ``H`` takes multiplicative
updates (monotone for fixed ``W``); ``W`` takes projected-gradient steps
retracted onto non-negative unit columns, accepted only when the objective
does not rise (step halving otherwise).  The objective is therefore
non-increasing per iteration.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

OD_REFERENCE = 255.0
OD_GUARD = 1.0
BACKGROUND_OD = 0.15
MIN_FIT_PIXELS = 1000
MAX_FIT_PIXELS = 100_000


class InsufficientPixelsError(ValueError):
    pass


def rgb_to_od(image) -> np.ndarray:
    """``-ln((I + 1) / 256)``: white maps to exactly zero, black stays finite."""
    img = np.asarray(image, dtype=np.float64)
    return np.maximum(-np.log((img + OD_GUARD) / (OD_REFERENCE + OD_GUARD)), 0.0)


def od_to_rgb(od) -> np.ndarray:
    rgb = (OD_REFERENCE + OD_GUARD) * np.exp(-np.asarray(od, dtype=np.float64)) - OD_GUARD
    return np.clip(np.round(rgb), 0, 255).astype(np.uint8)


@dataclass
class StainModel:
    """Basis ``W`` (3x2, unit columns) ordered ``[hematoxylin, other]``.

    ``max_density`` holds the 99th-percentile density of each stain on the
    fitting pixels and drives rescaling.  After :func:`swap_basis` the first
    column is the other stain and ``first_is_hematoxylin`` is False.
    """

    basis: np.ndarray
    max_density: np.ndarray
    first_is_hematoxylin: bool = True
    objective: list = field(default_factory=list)
    residual: float = float("nan")
    densities: np.ndarray | None = None   # fitted H on the sampled pixels

    def save(self, path) -> None:
        w = np.asarray(self.basis, dtype=float).tolist()
        md = np.asarray(self.max_density, dtype=float).tolist()
        lines = [
            "# switchseg stain model v1",
            f"first_is_hematoxylin {str(self.first_is_hematoxylin).lower()}",
            f"basis_r {w[0][0]!r} {w[0][1]!r}",
            f"basis_g {w[1][0]!r} {w[1][1]!r}",
            f"basis_b {w[2][0]!r} {w[2][1]!r}",
            f"max_density {md[0]!r} {md[1]!r}",
            f"residual {float(self.residual)!r}",
        ]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "StainModel":
        fields = {}
        for line in Path(path).read_text().splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, *vals = line.split()
            fields[key] = vals
        try:
            basis = np.array([[float(v) for v in fields[f"basis_{c}"]] for c in "rgb"])
            maxd = np.array([float(v) for v in fields["max_density"]])
            first_h = fields["first_is_hematoxylin"][0] == "true"
        except (KeyError, ValueError, IndexError) as exc:
            raise ValueError(f"{path}: malformed stain model ({exc})") from exc
        if basis.shape != (3, 2) or maxd.shape != (2,):
            raise ValueError(f"{path}: malformed stain model shapes")
        residual = float(fields.get("residual", ["nan"])[0])
        return cls(basis, maxd, first_h, residual=residual)


def _objective(v, w, h, alpha):
    r = v - w @ h
    return float(np.sum(r * r) + alpha * np.sum(h))


def _normalize_columns(w, fallback):
    norms = np.linalg.norm(w, axis=0)
    out = w / np.where(norms > 0, norms, 1.0)
    dead = norms <= 1e-12
    if dead.any():
        out[:, dead] = fallback[:, dead]
    return out


def _initial_basis(v: np.ndarray) -> np.ndarray:
    """Angular extremes of the OD cloud in its principal plane."""
    _, _, vt = np.linalg.svd(v.T, full_matrices=False)
    plane = vt[:2]
    if plane[0].sum() < 0:
        plane[0] = -plane[0]
    if plane[1, 0] - plane[1, 2] < 0:
        plane[1] = -plane[1]
    proj = plane @ v
    angles = np.arctan2(proj[1], proj[0])
    lo, hi = np.percentile(angles, [1, 99])
    cols = [plane.T @ np.array([np.cos(a), np.sin(a)]) for a in (lo, hi)]
    w = np.maximum(np.stack(cols, axis=1), 1e-3)
    return w / np.linalg.norm(w, axis=0)


def _hematoxylin_first(w: np.ndarray) -> bool:
    """Hematoxylin absorbs red relative to blue more strongly than eosin or DAB."""
    ratio = w[0] / np.maximum(w[2], 1e-12)
    return bool(ratio[0] >= ratio[1])


def foreground_od(od: np.ndarray, threshold: float = BACKGROUND_OD) -> np.ndarray:
    """(3, N) OD columns of pixels whose OD L1 norm reaches ``threshold``."""
    v = np.asarray(od, dtype=np.float64).reshape(-1, 3).T
    return v[:, v.sum(axis=0) >= threshold]


def fit_stain_model(od, sparsity_weight: float = 0.1, iters: int = 300, tol: float = 1e-7,
                    seed: int = 0, background_threshold: float = BACKGROUND_OD,
                    max_pixels: int = MAX_FIT_PIXELS) -> StainModel:
    """Sparse NMF on the non-background OD pixels of ``od`` (shape ``(..., 3)``)."""
    v = foreground_od(od, background_threshold)
    if v.shape[1] < MIN_FIT_PIXELS:
        raise InsufficientPixelsError(
            f"only {v.shape[1]} non-background pixels (OD L1 >= {background_threshold}); "
            f"need at least {MIN_FIT_PIXELS}, sample a larger or more tissue-rich region")
    rng = np.random.default_rng(seed)
    if v.shape[1] > max_pixels:
        v = v[:, np.sort(rng.choice(v.shape[1], size=max_pixels, replace=False))]

    alpha = float(sparsity_weight)
    w = _initial_basis(v)
    h = np.maximum(np.linalg.lstsq(w, v, rcond=None)[0], 1e-3)
    f = _objective(v, w, h, alpha)
    history = [f]
    for _ in range(iters):
        # H: multiplicative update
        h *= (w.T @ v) / np.maximum(w.T @ w @ h + alpha / 2.0, 1e-300)
        f_h = _objective(v, w, h, alpha)

        # W: projected gradient on non-negative unit columns with step halving
        hht = h @ h.T
        grad = 2.0 * (w @ hht - v @ h.T)
        step = 1.0 / max(2.0 * np.linalg.norm(hht, 2), 1e-12)
        f_new = f_h
        for _ in range(30):
            cand = _normalize_columns(np.maximum(w - step * grad, 0.0), w)
            f_cand = _objective(v, cand, h, alpha)
            if f_cand <= f_h:
                w, f_new = cand, f_cand
                break
            step *= 0.5
        history.append(f_new)
        if abs(f - f_new) <= tol * max(abs(f), 1e-300):
            f = f_new
            break
        f = f_new

    if not _hematoxylin_first(w):
        w, h = w[:, ::-1].copy(), h[::-1].copy()
    dens = nnls_densities(v.T, w)
    max_density = np.maximum(np.percentile(dens, 99, axis=0), 1e-6)
    residual = float(np.linalg.norm(v - w @ h))
    return StainModel(w, max_density, True, history, residual, h)


def nnls_densities(od, basis) -> np.ndarray:
    """Exact non-negative least squares of each OD row onto the two basis columns.

    ``od`` is ``(..., 3)``; the result is ``(..., 2)``.
    """
    od = np.asarray(od, dtype=np.float64)
    shape = od.shape[:-1]
    y = od.reshape(-1, 3)
    w = np.asarray(basis, dtype=np.float64)
    gram = w.T @ w
    det = gram[0, 0] * gram[1, 1] - gram[0, 1] ** 2
    b = y @ w                      # (N, 2)
    x0 = (gram[1, 1] * b[:, 0] - gram[0, 1] * b[:, 1]) / det
    x1 = (gram[0, 0] * b[:, 1] - gram[0, 1] * b[:, 0]) / det
    out = np.stack([x0, x1], axis=1)
    bad = (x0 < 0) | (x1 < 0)
    if bad.any():
        # best single-stain fit among the two faces of the cone (or zero)
        s0 = np.maximum(b[bad, 0] / gram[0, 0], 0.0)
        s1 = np.maximum(b[bad, 1] / gram[1, 1], 0.0)
        yb = y[bad]
        e0 = np.sum((yb - s0[:, None] * w[:, 0]) ** 2, axis=1)
        e1 = np.sum((yb - s1[:, None] * w[:, 1]) ** 2, axis=1)
        use0 = e0 <= e1
        out[bad] = np.stack([np.where(use0, s0, 0.0), np.where(use0, 0.0, s1)], axis=1)
    return out.reshape(*shape, 2)


def stain_densities(image, model: StainModel) -> np.ndarray:
    """(H, W, 2) raw densities of an 8-bit RGB image."""
    return nnls_densities(rgb_to_od(image), model.basis)


def h_channel(image, model: StainModel, scale: float | None = None, from_od: bool = False) -> np.ndarray:
    """First-stain density rescaled to [0, 1].

    ``scale`` defaults to the model's 99th-percentile density; pass
    ``scale="image"`` to use the image's own 99th percentile instead.
    """
    od = np.asarray(image, dtype=np.float64) if from_od else rgb_to_od(image)
    d = nnls_densities(od, model.basis)[..., 0]
    if isinstance(scale, str):
        if scale != "image":
            raise ValueError(f"unknown scale {scale!r}")
        positive = d[d > 0]
        scale = float(np.percentile(positive, 99)) if positive.size else 1.0
    elif scale is None:
        scale = float(model.max_density[0])
    return np.clip(d / max(scale, 1e-12), 0.0, 1.0)


def swap_basis(model: StainModel) -> StainModel:
    """Exchange the two stains, e.g. to read a DAB channel through the detector."""
    return replace(model,
                   basis=model.basis[:, ::-1].copy(),
                   max_density=model.max_density[::-1].copy(),
                   first_is_hematoxylin=not model.first_is_hematoxylin,
                   densities=None if model.densities is None else model.densities[::-1].copy())


def normalize_to_target(source, target: StainModel, source_model: StainModel | None = None,
                        **fit_kwargs) -> np.ndarray:
    """Re-render the source's stain densities through the target basis.

    Each stain's density is rescaled by the ratio of target to source
    99th-percentile densities.
    """
    source = np.asarray(source)
    od = rgb_to_od(source)
    if source_model is None:
        source_model = fit_stain_model(od, **fit_kwargs)
    dens = nnls_densities(od, source_model.basis)
    dens = dens * (target.max_density / source_model.max_density)
    return od_to_rgb(dens @ target.basis.T)
