"""A small U-Net and its deterministic trainer.

Layer order (also the order of arrays in a weight file)::

    enc{d}.conv1.{w,b}, enc{d}.conv2.{w,b}      d = 0 .. depth-1
    mid.conv1.{w,b}, mid.conv2.{w,b}
    dec{d}.up.{w,b}, dec{d}.conv1.{w,b}, dec{d}.conv2.{w,b}   d = depth-1 .. 0
    head.{w,b}

Level ``d`` has ``base_channels * 2**d`` channels.  Convolutions are 3x3
with padding 1, upsampling is a 2x2 stride-2 transposed convolution, and
the head is a 1x1 convolution followed by a sigmoid.
"""

from __future__ import annotations

import csv
import logging
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .losses import DENSE, LossConfig, make_loss

logger = logging.getLogger(__name__)

WEIGHT_MAGIC = b"SWSGUNET"
WEIGHT_VERSION = 1
_HEADER = struct.Struct("<8sIIIII")


class WeightFileError(ValueError):
    """A weight file is truncated, foreign, or built for another architecture."""


class NonFiniteLossError(FloatingPointError):
    def __init__(self, epoch: int, batch_index: int, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, batch {batch_index}")
        self.epoch = epoch
        self.batch_index = batch_index


@dataclass(frozen=True)
class UNetSpec:
    depth: int = 3
    base_channels: int = 8
    input_channels: int = 1

    def __post_init__(self):
        if self.depth < 1 or self.base_channels < 1 or self.input_channels < 1:
            raise ValueError(f"invalid UNetSpec {self}: all fields must be >= 1")

    @property
    def multiple(self) -> int:
        return 2 ** self.depth

    def check_input(self, h: int, w: int):
        if h % self.multiple or w % self.multiple:
            raise ValueError(f"input spatial dims {(h, w)} must be divisible by {self.multiple} "
                             f"for depth {self.depth}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 4
    initial_lr: float = 1e-4
    lr_decay: float = 0.3
    decay_every: int = 25
    optimizer: str = "adam"
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.epochs < 1 or self.batch_size < 1 or self.decay_every < 1:
            raise ValueError("epochs, batch_size and decay_every must be >= 1")
        if self.initial_lr <= 0 or not 0 < self.lr_decay <= 1:
            raise ValueError("initial_lr must be > 0 and lr_decay in (0, 1]")


@dataclass(frozen=True)
class AugmentationConfig:
    rotations: tuple = (0, 90, 180, 270)
    flips: tuple = ("horizontal", "vertical")
    max_downscale: int = 4

    def __post_init__(self):
        if any(r not in (0, 90, 180, 270) for r in self.rotations) or not self.rotations:
            raise ValueError(f"rotations must be a non-empty subset of 0/90/180/270, got {self.rotations}")
        if any(f not in ("horizontal", "vertical") for f in self.flips):
            raise ValueError(f"flips must be among horizontal/vertical, got {self.flips}")
        if self.max_downscale < 1:
            raise ValueError("max_downscale must be >= 1")


def learning_rate(tcfg: TrainConfig, epoch: int) -> float:
    """Step schedule: ``initial_lr * lr_decay ** (epoch // decay_every)``."""
    return tcfg.initial_lr * tcfg.lr_decay ** (epoch // tcfg.decay_every)


class UNet:
    def __init__(self, spec: UNetSpec, params: dict[str, dc.Tensor]):
        self.spec = spec
        self.params = params

    def parameters(self) -> list[dc.Tensor]:
        return list(self.params.values())

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def astype(self, dtype) -> "UNet":
        return UNet(self.spec, {k: dc.Tensor(v.data.astype(dtype), requires_grad=True)
                                for k, v in self.params.items()})

    def copy(self) -> "UNet":
        return self.astype(self.dtype)

    def _conv(self, x, name, padding=1):
        p = self.params
        return dc.add_channel_bias(dc.conv2d(x, p[name + ".w"], 1, padding), p[name + ".b"])

    def _block(self, x, prefix):
        x = dc.relu(self._conv(x, prefix + ".conv1"))
        return dc.relu(self._conv(x, prefix + ".conv2"))

    def forward(self, x) -> dc.Tensor:
        x = dc.as_tensor(x)
        if x.ndim != 4 or x.shape[1] != self.spec.input_channels:
            raise dc.ShapeError(f"expected input [N, {self.spec.input_channels}, H, W], got {x.shape}")
        self.spec.check_input(*x.shape[2:])
        skips = []
        for d in range(self.spec.depth):
            x = self._block(x, f"enc{d}")
            skips.append(x)
            x = dc.maxpool2d(x, 2, 2)
        x = self._block(x, "mid")
        for d in reversed(range(self.spec.depth)):
            p = self.params
            x = dc.add_channel_bias(dc.transposed_conv2d(x, p[f"dec{d}.up.w"], 2), p[f"dec{d}.up.b"])
            x = dc.concat_channels(skips[d], x)
            x = self._block(x, f"dec{d}")
        return dc.sigmoid(self._conv(x, "head", padding=0))

    __call__ = forward


def layer_shapes(spec: UNetSpec) -> list[tuple[str, tuple]]:
    """Parameter names and shapes in canonical order."""
    ch = [spec.base_channels * 2 ** d for d in range(spec.depth + 1)]
    shapes = []

    def conv(name, cin, cout, k=3):
        shapes.append((name + ".w", (cout, cin, k, k)))
        shapes.append((name + ".b", (cout,)))

    cin = spec.input_channels
    for d in range(spec.depth):
        conv(f"enc{d}.conv1", cin, ch[d])
        conv(f"enc{d}.conv2", ch[d], ch[d])
        cin = ch[d]
    conv("mid.conv1", ch[spec.depth - 1], ch[spec.depth])
    conv("mid.conv2", ch[spec.depth], ch[spec.depth])
    for d in reversed(range(spec.depth)):
        shapes.append((f"dec{d}.up.w", (ch[d + 1], ch[d], 2, 2)))
        shapes.append((f"dec{d}.up.b", (ch[d],)))
        conv(f"dec{d}.conv1", 2 * ch[d], ch[d])
        conv(f"dec{d}.conv2", ch[d], ch[d])
    conv("head", ch[0], 1, k=1)
    return shapes


def build(spec: UNetSpec, seed: int = 0, dtype=np.float32) -> UNet:
    """He-uniform weights (bound ``sqrt(6 / fan_in)``) drawn from ``seed``; zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in layer_shapes(spec):
        if name.endswith(".b"):
            arr = np.zeros(shape)
        else:
            # transposed 2x2/stride-2 kernels: each output sees shape[0] inputs
            fan_in = shape[0] if ".up." in name else int(np.prod(shape[1:]))
            bound = math.sqrt(6.0 / fan_in)
            arr = rng.uniform(-bound, bound, size=shape)
        params[name] = dc.Tensor(arr.astype(dtype), requires_grad=True)
    return UNet(spec, params)


def predict(model: UNet, image) -> np.ndarray:
    """Probability map for an ``(H, W)``, ``(C, H, W)`` or ``(N, C, H, W)`` image."""
    img = np.asarray(image, dtype=model.dtype)
    ndim = img.ndim
    if ndim == 2:
        img = img[None, None]
    elif ndim == 3:
        img = img[None]
    elif ndim != 4:
        raise dc.ShapeError(f"predict expects a 2-, 3- or 4-d image, got shape {img.shape}")
    x = dc.Tensor(img)  # no requires_grad: the graph is not retained
    out = model.forward(x).data
    if ndim == 2:
        return out[0, 0]
    if ndim == 3:
        return out[0]
    return out


# ---------------------------------------------------------------------------
# weight files
# ---------------------------------------------------------------------------

def save_weights(model: UNet, path) -> None:
    """Magic, version, depth, base_channels, input_channels, array count, then float32 LE arrays."""
    shapes = layer_shapes(model.spec)
    s = model.spec
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(WEIGHT_MAGIC, WEIGHT_VERSION, s.depth, s.base_channels,
                              s.input_channels, len(shapes)))
        for name, _ in shapes:
            fh.write(model.params[name].data.astype("<f4").tobytes())


def load_weights(path, spec: UNetSpec | None = None) -> UNet:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise WeightFileError(f"{path}: truncated header, expected {_HEADER.size} bytes, got {len(raw)}")
    magic, version, depth, base, cin, count = _HEADER.unpack_from(raw)
    if magic != WEIGHT_MAGIC:
        raise WeightFileError(f"{path}: bad magic {magic!r}, not a weight file")
    if version != WEIGHT_VERSION:
        raise WeightFileError(f"{path}: unsupported version {version}")
    file_spec = UNetSpec(depth, base, cin)
    if spec is not None and spec != file_spec:
        raise WeightFileError(f"{path}: spec mismatch, file holds {file_spec} but {spec} was requested")
    shapes = layer_shapes(file_spec)
    if count != len(shapes):
        raise WeightFileError(f"{path}: {count} arrays recorded, architecture needs {len(shapes)}")
    expected = _HEADER.size + 4 * sum(int(np.prod(sh)) for _, sh in shapes)
    if len(raw) != expected:
        raise WeightFileError(f"{path}: expected {expected} bytes, got {len(raw)}")
    params, offset = {}, _HEADER.size
    for name, shape in shapes:
        n = int(np.prod(shape))
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=offset).reshape(shape)
        params[name] = dc.Tensor(arr.astype(np.float32), requires_grad=True)
        offset += 4 * n
    return UNet(file_spec, params)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def box_downsample(image: np.ndarray, factor: int) -> np.ndarray:
    h, w = image.shape
    return image.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))


def max_downsample(mask: np.ndarray, factor: int) -> np.ndarray:
    h, w = mask.shape
    return mask.reshape(h // factor, factor, w // factor, factor).max(axis=(1, 3))


def augment(image: np.ndarray, mask: np.ndarray, rng: np.random.Generator,
            acfg: AugmentationConfig) -> tuple[np.ndarray, np.ndarray]:
    """Random rotation, flips and integer downscaling applied identically to image and mask.

    A downscaled pair is tiled back to the original size so batches stay
    rectangular.
    """
    k = int(rng.choice(acfg.rotations)) // 90
    image, mask = np.rot90(image, k), np.rot90(mask, k)
    if "horizontal" in acfg.flips and rng.random() < 0.5:
        image, mask = image[:, ::-1], mask[:, ::-1]
    if "vertical" in acfg.flips and rng.random() < 0.5:
        image, mask = image[::-1], mask[::-1]
    h, w = image.shape
    factors = [f for f in range(1, acfg.max_downscale + 1) if h % f == 0 and w % f == 0]
    f = int(rng.choice(factors))
    if f > 1:
        image = np.tile(box_downsample(image, f), (f, f))
        mask = np.tile(max_downsample(mask, f), (f, f))
    return np.ascontiguousarray(image), np.ascontiguousarray(mask)


# ---------------------------------------------------------------------------
# optimisers
# ---------------------------------------------------------------------------

class Adam:
    def __init__(self, params: Sequence[dc.Tensor], beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= (lr / c1) * m / (np.sqrt(v / c2) + self.eps)


class SGD:
    def __init__(self, params: Sequence[dc.Tensor], momentum: float = 0.9):
        self.params = list(params)
        self.momentum = momentum
        self.buf = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float):
        for p, b in zip(self.params, self.buf):
            if p.grad is None:
                continue
            b *= self.momentum
            b += p.grad
            p.data -= lr * b


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss: float
    branch_fraction: float


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.records]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "lr", "loss", "branch_fraction"])
            for r in self.records:
                w.writerow([r.epoch, repr(r.lr), repr(r.loss), repr(r.branch_fraction)])


def train(model: UNet, dataset, loss: str = "switching", tcfg: TrainConfig | None = None,
          acfg: AugmentationConfig | None = None, loss_cfg: LossConfig | None = None,
          ) -> tuple[UNet, TrainHistory]:
    """Train ``model`` in place on ``(image, label)`` pairs of equal size.

    Batches come from a seeded shuffle each epoch; with ``acfg=None`` no
    augmentation is applied.  ``branch_fraction`` in the history is the
    share of mini-batches whose switching loss took the dense branch.
    """
    tcfg = tcfg or TrainConfig()
    loss_cfg = loss_cfg or LossConfig()
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    images = np.stack([np.asarray(im, dtype=model.dtype) for im, _ in dataset])
    labels = np.stack([np.asarray(lb, dtype=np.uint8) for _, lb in dataset])
    if images.ndim != 3:
        raise ValueError(f"expected single-channel (H, W) images, got stacked shape {images.shape}")
    model.spec.check_input(*images.shape[1:])

    loss_fn = make_loss(loss, loss_cfg)
    params = model.parameters()
    opt = Adam(params) if tcfg.optimizer == "adam" else SGD(params)
    rng = np.random.default_rng(tcfg.seed)
    history = TrainHistory()
    n = len(images)

    for epoch in range(tcfg.epochs):
        lr = learning_rate(tcfg, epoch)
        order = rng.permutation(n)
        total, batches, dense = 0.0, 0, 0
        for bi, start in enumerate(range(0, n, tcfg.batch_size)):
            idx = order[start:start + tcfg.batch_size]
            xb, yb = images[idx], labels[idx]
            if acfg is not None:
                pairs = [augment(x, y, rng, acfg) for x, y in zip(xb, yb)]
                xb = np.stack([p[0] for p in pairs])
                yb = np.stack([p[1] for p in pairs])
            for p in params:
                p.zero_grad()
            prob = model.forward(dc.Tensor(xb[:, None]))
            value, branch = loss_fn(prob, yb[:, None])
            v = float(value.data)
            if not math.isfinite(v):
                raise NonFiniteLossError(epoch, bi, v)
            value.backward()
            opt.step(lr)
            total += v
            batches += 1
            dense += branch == DENSE
        rec = EpochRecord(epoch, lr, total / batches, dense / batches)
        history.records.append(rec)
        logger.debug("epoch %d lr %.3g loss %.5f dense %.2f", epoch, lr, rec.loss, rec.branch_fraction)
    return model, history


def with_epochs(tcfg: TrainConfig, epochs: int) -> TrainConfig:
    return replace(tcfg, epochs=epochs)
