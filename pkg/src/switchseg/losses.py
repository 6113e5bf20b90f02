"""Segmentation losses for imbalanced binary maps, including the switching loss.

Every loss comes in two flavours:

* a graph version (``bce``, ``dice``, ...) that takes a probability
  :class:`~switchseg.diffcore.Tensor` and returns a scalar tensor, and
* a plain numpy evaluator (``bce_value``, ``dice_value``, ...) used as an
  independent oracle in tests.

BCE and focal losses are pixel means; the Dice family sums over the whole
mini-batch before forming the ratio.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc

PROB_EPS = 1e-7

DENSE = "dense"
SPARSE = "sparse"

LOSS_NAMES = ("switching", "dice", "bce_dice", "bce_dice_inv", "focal", "bce")


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.8
    tau: float = 0.2
    gamma: float = 5.0
    epsilon: float = 1.0
    one_sided_focal: bool = False

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must lie in [0, 1], got {self.tau}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")


@dataclass(frozen=True)
class BatchStats:
    foreground_count: int
    total_count: int

    @property
    def ratio(self) -> float:
        return self.foreground_count / self.total_count


def default_lambda(mean_foreground_fraction: float) -> float:
    """Weight the under-represented class: 20% foreground gives lambda 0.8."""
    if not 0.0 <= mean_foreground_fraction <= 1.0:
        raise ValueError(f"foreground fraction must be in [0, 1], got {mean_foreground_fraction}")
    return 1.0 - mean_foreground_fraction


def _check_target(p_shape, g) -> np.ndarray:
    g = np.asarray(g)
    if tuple(p_shape) != g.shape:
        raise dc.ShapeError(f"prediction shape {tuple(p_shape)} != ground truth shape {g.shape}")
    if g.size and not np.all((g == 0) | (g == 1)):
        raise ValueError("ground truth must be binary (0/1)")
    return g


def foreground_ratio(g) -> BatchStats:
    """Foreground pixel count over the entire mini-batch."""
    g = np.asarray(g)
    if g.size == 0:
        raise ValueError("empty batch: cannot compute a foreground ratio")
    if not np.all((g == 0) | (g == 1)):
        raise ValueError("ground truth must be binary (0/1)")
    return BatchStats(int(np.count_nonzero(g)), int(g.size))


def select_branch(stats: BatchStats, tau: float) -> str:
    # equality is undefined in the formula; it falls to the sparse-foreground branch
    return DENSE if stats.ratio > tau else SPARSE


def branch_weights(branch: str, lam: float) -> tuple[float, float]:
    """(Dice weight, inverted-Dice weight) for a branch."""
    return (lam, 1.0 - lam) if branch == DENSE else (1.0 - lam, lam)


# ---------------------------------------------------------------------------
# graph versions
# ---------------------------------------------------------------------------

def _prob(p) -> dc.Tensor:
    return dc.clamp(dc.as_tensor(p), PROB_EPS, 1.0 - PROB_EPS)


def _const(g, like: dc.Tensor) -> dc.Tensor:
    return dc.Tensor(np.asarray(g, dtype=like.dtype))


def _log_terms(p: dc.Tensor) -> tuple[dc.Tensor, dc.Tensor]:
    """``log p`` and ``log(1 - p)`` with ``p`` clamped to ``[eps, 1 - eps]``.

    When ``p`` is a sigmoid output the logs are taken from its logit, which
    keeps the same values but does not zero the gradient of pixels whose
    probability sits beyond the clamp.
    """
    if p.op == "sigmoid" and p._parents:
        z = p._parents[0]
        return dc.log_sigmoid(z, PROB_EPS), dc.log_sigmoid(z, PROB_EPS, complement=True)
    pc = _prob(p)
    return dc.log(pc), dc.log(dc.one_minus(pc))


def bce(p, g) -> dc.Tensor:
    """Mean binary cross-entropy."""
    p = dc.as_tensor(p)
    g = _const(_check_target(p.shape, g), p)
    log_p, log_q = _log_terms(p)
    per_pixel = g * log_p + dc.one_minus(g) * log_q
    return -dc.tensor_mean(per_pixel)


def dice(p, g, epsilon: float = 1.0) -> dc.Tensor:
    """``1 - (2 sum(pg) + eps) / (sum(p) + sum(g) + eps)`` over the whole batch."""
    p = dc.as_tensor(p)
    g = _const(_check_target(p.shape, g), p)
    inter = dc.tensor_sum(p * g)
    num = inter * 2.0 + epsilon
    den = dc.tensor_sum(p) + float(g.data.sum()) + epsilon
    return dc.one_minus(num / den)


def inverted_dice(p, g, epsilon: float = 1.0) -> dc.Tensor:
    """Dice loss of the background: ``dice(1 - p, 1 - g)``."""
    p = dc.as_tensor(p)
    g = _check_target(p.shape, g)
    return dice(dc.one_minus(p), 1 - g, epsilon)


def focal(p, g, gamma: float = 5.0, one_sided: bool = False) -> dc.Tensor:
    """Mean binary focal loss.

    The default is the two-class form; ``one_sided=True`` keeps only the
    foreground term ``-g (1-p)^gamma log p``.
    """
    p = dc.as_tensor(p)
    g = _const(_check_target(p.shape, g), p)
    pc = _prob(p)
    qc = dc.one_minus(pc)
    log_p, log_q = _log_terms(p)
    pos = g * (dc.power(qc, gamma) * log_p)
    if one_sided:
        return -dc.tensor_mean(pos)
    neg = dc.one_minus(g) * (dc.power(pc, gamma) * log_q)
    return -dc.tensor_mean(pos + neg)


def switching_loss(p, g, cfg: LossConfig) -> tuple[dc.Tensor, str]:
    """BCE plus a Dice/inverted-Dice blend whose weights follow the batch's foreground ratio."""
    p = dc.as_tensor(p)
    g = _check_target(p.shape, g)
    branch = select_branch(foreground_ratio(g), cfg.tau)
    wd, wi = branch_weights(branch, cfg.lam)
    loss = bce(p, g) + dice(p, g, cfg.epsilon) * wd + inverted_dice(p, g, cfg.epsilon) * wi
    return loss, branch


def make_loss(name: str, cfg: LossConfig):
    """Training loss by name; returns ``f(p, g) -> (tensor, branch or None)``.

    ``dice`` is plain Dice, ``bce_dice`` is BCE + Dice, ``bce_dice_inv`` is
    BCE + equal-weight Dice and inverted Dice.
    """
    if name == "switching":
        return lambda p, g: switching_loss(p, g, cfg)
    if name == "dice":
        return lambda p, g: (dice(p, g, cfg.epsilon), None)
    if name == "bce_dice":
        return lambda p, g: (bce(p, g) + dice(p, g, cfg.epsilon), None)
    if name == "bce_dice_inv":
        return lambda p, g: (bce(p, g) + (dice(p, g, cfg.epsilon) + inverted_dice(p, g, cfg.epsilon)) * 0.5,
                             None)
    if name == "focal":
        return lambda p, g: (focal(p, g, cfg.gamma, cfg.one_sided_focal), None)
    if name == "bce":
        return lambda p, g: (bce(p, g), None)
    raise ValueError(f"unknown loss {name!r}; choose from {', '.join(LOSS_NAMES)}")


# ---------------------------------------------------------------------------
# numpy evaluators
# ---------------------------------------------------------------------------

def bce_value(p, g) -> float:
    p = np.clip(np.asarray(p, dtype=np.float64), PROB_EPS, 1 - PROB_EPS)
    g = _check_target(p.shape, g).astype(np.float64)
    return float(-np.mean(g * np.log(p) + (1 - g) * np.log(1 - p)))


def dice_value(p, g, epsilon: float = 1.0) -> float:
    p = np.asarray(p, dtype=np.float64)
    g = _check_target(p.shape, g).astype(np.float64)
    return float(1.0 - (2.0 * np.sum(p * g) + epsilon) / (np.sum(p) + np.sum(g) + epsilon))


def inverted_dice_value(p, g, epsilon: float = 1.0) -> float:
    p = np.asarray(p, dtype=np.float64)
    g = _check_target(p.shape, g)
    return dice_value(1.0 - p, 1 - g, epsilon)


def focal_value(p, g, gamma: float = 5.0, one_sided: bool = False) -> float:
    p = np.clip(np.asarray(p, dtype=np.float64), PROB_EPS, 1 - PROB_EPS)
    g = _check_target(p.shape, g).astype(np.float64)
    pos = g * (1 - p) ** gamma * np.log(p)
    if one_sided:
        return float(-np.mean(pos))
    return float(-np.mean(pos + (1 - g) * p ** gamma * np.log(1 - p)))


def switching_value(p, g, cfg: LossConfig) -> tuple[float, str]:
    branch = select_branch(foreground_ratio(g), cfg.tau)
    wd, wi = branch_weights(branch, cfg.lam)
    total = bce_value(p, g) + wd * dice_value(p, g, cfg.epsilon) + wi * inverted_dice_value(p, g, cfg.epsilon)
    return total, branch
