"""The finite-difference gradient suite: every graph op, every loss, and the toy network."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import fcn, losses
from .losses import LossConfig

OP_TOLERANCE = 1e-5
LOSS_TOLERANCE = 1e-5
NETWORK_TOLERANCE = 1e-4


@dataclass
class SuiteEntry:
    group: str        # op | loss | network
    name: str
    seed: int
    report: dc.GradCheckReport

    @property
    def passed(self) -> bool:
        return self.report.passed


def _op_cases(rng):
    x4 = rng.standard_normal((1, 2, 4, 4))
    k = rng.standard_normal((3, 2, 3, 3))
    w_conv = rng.standard_normal((1, 3, 4, 4))
    y = rng.standard_normal((1, 2, 2, 2))
    kt = rng.standard_normal((2, 3, 2, 2))
    w_t = rng.standard_normal((1, 3, 4, 4))
    pos = rng.uniform(0.2, 2.0, (3, 4))
    mixed = rng.uniform(0.2, 1.0, (3, 4)) * rng.choice([-1.0, 1.0], (3, 4))
    a, b = rng.standard_normal((2, 3)), rng.standard_normal((2, 3))
    c1, c2 = rng.standard_normal((1, 2, 3, 3)), rng.standard_normal((1, 1, 3, 3))
    w_cat = rng.standard_normal((1, 3, 3, 3))
    sq = lambda t: dc.tensor_sum(t * t)  # noqa: E731
    return [
        ("conv2d", lambda s, t: dc.tensor_sum(dc.conv2d(s, t, 1, 1) * w_conv), [x4, k]),
        ("transposed_conv2d", lambda s, t: dc.tensor_sum(dc.transposed_conv2d(s, t, 2) * w_t), [y, kt]),
        ("maxpool2d", lambda s: sq(dc.maxpool2d(s, 2)), [x4]),
        ("relu", lambda s: sq(dc.relu(s)), [mixed]),
        ("sigmoid", lambda s: sq(dc.sigmoid(s)), [mixed]),
        ("log", lambda s: sq(dc.log(s)), [pos]),
        ("one_minus", lambda s: sq(dc.one_minus(s)), [mixed]),
        ("pow", lambda s: dc.tensor_sum(dc.power(s, 5.0)), [pos]),
        ("mul", lambda s, t: sq(s * t), [a, b]),
        ("add", lambda s, t: sq(s + t), [a, b]),
        ("concat_channels", lambda s, t: dc.tensor_sum(dc.concat_channels(s, t) * w_cat), [c1, c2]),
        ("log_sigmoid", lambda s: sq(dc.log_sigmoid(s) + dc.log_sigmoid(s, complement=True)), [mixed]),
    ]


def _loss_cases(rng):
    shape = (2, 1, 4, 4)
    p = rng.uniform(0.05, 0.95, shape)
    g = (rng.random(shape) < 0.3).astype(np.uint8)
    z = rng.normal(0.0, 1.5, shape)
    sparse = np.zeros(shape, dtype=np.uint8)
    sparse.flat[rng.choice(sparse.size, 2, replace=False)] = 1
    dense = np.zeros(shape, dtype=np.uint8)
    dense.flat[rng.choice(dense.size, 16, replace=False)] = 1
    cfg = LossConfig(lam=float(rng.uniform(0.0, 1.0)), tau=0.2)
    return [
        ("bce", lambda t: losses.bce(t, g), [p]),
        ("dice", lambda t: losses.dice(t, g), [p]),
        ("inverted_dice", lambda t: losses.inverted_dice(t, g), [p]),
        ("focal", lambda t: losses.focal(t, g, 5.0), [p]),
        ("focal_one_sided", lambda t: losses.focal(t, g, 5.0, one_sided=True), [p]),
        ("switching_sparse", lambda t: losses.switching_loss(t, sparse, cfg)[0], [p]),
        ("switching_dense", lambda t: losses.switching_loss(t, dense, cfg)[0], [p]),
        ("switching_sparse_logits", lambda t: losses.switching_loss(dc.sigmoid(t), sparse, cfg)[0], [z]),
        ("switching_dense_logits", lambda t: losses.switching_loss(dc.sigmoid(t), dense, cfg)[0], [z]),
    ]


def _network_case(seed: int, max_coords: int):
    spec = fcn.UNetSpec(depth=2, base_channels=2)
    model = fcn.build(spec, seed, dtype=np.float64)
    rng = np.random.default_rng(seed)
    names = [n for n, _ in fcn.layer_shapes(spec)]
    for n in names:
        if n.endswith(".b"):
            # small positive biases keep ReLU inputs off their kink
            model.params[n].data[:] = rng.uniform(0.05, 0.1, model.params[n].shape)
    x = rng.random((1, 1, 16, 16))
    g = (rng.random((1, 1, 16, 16)) < 0.1).astype(np.uint8)

    def f(*ts):
        m = fcn.UNet(spec, dict(zip(names, ts)))
        return losses.switching_loss(m.forward(dc.Tensor(x)), g, LossConfig())[0]

    points = [model.params[n].data.copy() for n in names]
    return dc.gradient_check(f, points, tolerance=NETWORK_TOLERANCE, max_coords=max_coords, seed=seed)


def run_suite(seeds=range(10), network: bool = True, network_coords: int = 12) -> list[SuiteEntry]:
    entries = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        for name, f, pts in _op_cases(rng):
            entries.append(SuiteEntry("op", name, seed, dc.gradient_check(f, pts, tolerance=OP_TOLERANCE)))
        for name, f, pts in _loss_cases(rng):
            entries.append(SuiteEntry("loss", name, seed, dc.gradient_check(f, pts, tolerance=LOSS_TOLERANCE)))
        if network:
            entries.append(SuiteEntry("network", "unet+switching", seed, _network_case(seed, network_coords)))
    return entries


def summarize(entries) -> tuple[bool, str]:
    lines, ok = [], True
    groups = {}
    for e in entries:
        groups.setdefault((e.group, e.name), []).append(e)
    for (group, name), es in groups.items():
        worst = max(e.report.max_rel_error for e in es)
        passed = all(e.passed for e in es)
        ok &= passed
        lines.append(f"{'PASS' if passed else 'FAIL'} {group:8s} {name:26s} seeds={len(es):3d} "
                     f"max_rel_err={worst:.2e} tol={es[0].report.tolerance:.0e}")
    return ok, "\n".join(lines)


def timed_suite(**kwargs):
    t0 = time.perf_counter()
    entries = run_suite(**kwargs)
    return entries, time.perf_counter() - t0
