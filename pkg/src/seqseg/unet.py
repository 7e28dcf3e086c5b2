"""Small U-Net: spatial feature extractor and per-frame baseline segmenter."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as tc
from .errors import ConfigError, DegenerateError, ShapeError
from .tensor import Graph, Tensor

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class UNetConfig:
    depth: int = 3
    base_channels: int = 16
    input_channels: int = 1
    num_classes: int = 3
    feature_channels: int = 16

    def __post_init__(self):
        if self.depth < 2:
            raise ConfigError("U-Net depth must be >= 2")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")

    @property
    def channel_ladder(self) -> list[int]:
        return [self.base_channels * 2 ** i for i in range(self.depth)]

    @property
    def divisor(self) -> int:
        return 2 ** (self.depth - 1)

    def manifest(self) -> list[tuple[str, tuple[int, ...]]]:
        """Ordered (name, shape) list of every parameter tensor."""
        ch = self.channel_ladder
        out: list[tuple[str, tuple[int, ...]]] = []

        def conv(name, cin, cout, k=3):
            out.append((f"{name}.w", (cout, cin, k, k)))
            out.append((f"{name}.b", (cout,)))

        cin = self.input_channels
        for lvl, c in enumerate(ch):
            conv(f"enc{lvl}.conv1", cin, c)
            conv(f"enc{lvl}.conv2", c, c)
            cin = c
        for lvl in reversed(range(self.depth - 1)):
            c = ch[lvl]
            conv(f"dec{lvl}.up", ch[lvl + 1], c)
            conv(f"dec{lvl}.conv1", 2 * c, c)
            conv(f"dec{lvl}.conv2", c, self.feature_channels if lvl == 0 else c)
        conv("classifier", self.feature_channels, self.num_classes, k=1)
        return out


@dataclass
class UNetParams:
    config: UNetConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    @property
    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def copy(self) -> "UNetParams":
        return UNetParams(self.config, {k: Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k)
                                        for k, v in self.tensors.items()})


def build_unet(config: UNetConfig, seed: int = 0, dtype=tc.DEFAULT_DTYPE) -> UNetParams:
    """Glorot-uniform kernels, zero biases; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in config.manifest():
        if name.endswith(".b"):
            data = np.zeros(shape, dtype=dtype)
        else:
            cout, cin, kh, kw = shape
            data = tc.glorot_uniform(rng, shape, cin * kh * kw, cout * kh * kw, dtype)
        tensors[name] = Tensor(data, requires_grad=True, name=name)
    params = UNetParams(config, tensors)
    logger.debug("built U-Net with %d parameters", params.num_parameters)
    return params


def _conv_relu(p: UNetParams, name: str, x: Tensor) -> Tensor:
    return tc.relu(tc.conv2d(x, p[f"{name}.w"], p[f"{name}.b"]))


def unet_forward(params: UNetParams, image: Tensor) -> tuple[Tensor, Tensor]:
    """Return ``(features, logits)`` for an ``[N,1,H,W]`` batch.

    ``features`` is the post-ReLU activation feeding the 1x1 classifier.
    """
    cfg = params.config
    if image.data.ndim != 4 or image.shape[1] != cfg.input_channels:
        raise ShapeError(f"U-Net input must be [N,{cfg.input_channels},H,W]", image.shape)
    h, w = image.shape[2:]
    if h % cfg.divisor or w % cfg.divisor:
        raise ShapeError(f"spatial extents must be divisible by {cfg.divisor}", image.shape)

    skips = []
    x = image
    for lvl in range(cfg.depth):
        if lvl:
            x = tc.maxpool2(x)
        x = _conv_relu(params, f"enc{lvl}.conv1", x)
        x = _conv_relu(params, f"enc{lvl}.conv2", x)
        skips.append(x)
    for lvl in reversed(range(cfg.depth - 1)):
        x = _conv_relu(params, f"dec{lvl}.up", tc.upsample2(x))
        x = tc.concat_channels(skips[lvl], x)
        x = _conv_relu(params, f"dec{lvl}.conv1", x)
        x = _conv_relu(params, f"dec{lvl}.conv2", x)
    features = x
    logits = tc.conv2d(features, params["classifier.w"], params["classifier.b"])
    return features, logits


def one_hot(labels: np.ndarray, num_classes: int, dtype=tc.DEFAULT_DTYPE) -> np.ndarray:
    """``[N,H,W]`` integer map -> ``[N,C,H,W]`` one-hot."""
    labels = np.asarray(labels)
    return (np.arange(num_classes)[None, :, None, None] == labels[:, None]).astype(dtype)


@dataclass
class Schedule:
    iterations: int = 500
    base_lr: float = 1e-3
    decay_fraction: float = 0.25
    batch_size: int = 4

    def lr(self, it: int) -> float:
        return tc.step_decay_lr(it, self.iterations, self.base_lr, self.decay_fraction)


def train_unet_static(params: UNetParams, images: np.ndarray, labels: np.ndarray,
                      schedule: Schedule, seed: int = 0, augment=None) -> tuple[UNetParams, list[dict]]:
    """Fit the U-Net on annotated single frames.

    ``images`` is ``[M,H,W]`` (or ``[M,1,H,W]``), ``labels`` ``[M,H,W]``.
    ``augment(image_seq, label_seq, rng)`` may transform each drawn sample.
    Returns the trained params (updated in place) and per-iteration log records.
    """
    images = np.asarray(images, dtype=np.float32)
    if images.ndim == 4:
        images = images[:, 0]
    labels = np.asarray(labels)
    if len(images) == 0:
        raise DegenerateError("train_unet_static needs at least one annotated frame")
    if images.shape != labels.shape:
        raise ShapeError("images and labels must align", images.shape, labels.shape)
    rng = np.random.default_rng(seed)
    plist = params.parameters()
    state = tc.AdamState.fresh(plist)
    log = []
    ncls = params.config.num_classes
    for it in range(schedule.iterations):
        idx = rng.choice(len(images), size=min(schedule.batch_size, len(images)), replace=False)
        xb, yb = images[idx], labels[idx]
        if augment is not None:
            pairs = [augment(x[None], y[None], rng) for x, y in zip(xb, yb)]
            xb = np.stack([p[0][0] for p in pairs])
            yb = np.stack([p[1][0] for p in pairs])
        lr = schedule.lr(it)
        for p in plist:
            p.zero_grad()
        with Graph() as g:
            _, logits = unet_forward(params, Tensor(xb[:, None]))
            loss = tc.softmax_cross_entropy(logits, one_hot(yb, ncls))
        tc.backward(loss, g)
        tc.adam_step(plist, state, lr)
        log.append({"iteration": it, "lr": lr, "loss": loss.item()})
    return params, log


def predict_frames(params: UNetParams, images: np.ndarray, batch: int = 8) -> np.ndarray:
    """Per-frame class probabilities ``[T,C,H,W]`` (the spatial-only baseline)."""
    images = np.asarray(images, dtype=np.float32)
    out = []
    for i in range(0, len(images), batch):
        _, logits = unet_forward(params, Tensor(images[i:i + batch, None]))
        out.append(tc.softmax(logits))
    return np.concatenate(out)


def config_dict(config: UNetConfig) -> dict:
    return asdict(config)
