"""Sparse-annotation label propagation and the distance-weighted sequence loss."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tc
from .errors import ConfigError, DegenerateError, ShapeError, WindowError
from .registration import RegConfig, compose, register_pair, warp_label_map
from .tensor import Tensor
from .unet import one_hot

logger = logging.getLogger(__name__)


@dataclass
class SparseAnnotations:
    labels: dict[int, np.ndarray]
    n_frames: int
    cyclic: bool = True

    def __post_init__(self):
        if not self.labels:
            raise DegenerateError("at least one annotated frame is required")
        bad = [t for t in self.labels if not 0 <= t < self.n_frames]
        if bad:
            raise ConfigError(f"annotated frames {bad} outside 0..{self.n_frames - 1}")

    @property
    def frames(self) -> list[int]:
        return sorted(self.labels)


@dataclass
class PropagatedLabels:
    labels: np.ndarray  # (T, H, W) uint8
    source: np.ndarray  # nearest annotated frame per t
    distance: np.ndarray  # frame distance to source
    human: np.ndarray  # True where the label is a human annotation
    warnings: list[str] = field(default_factory=list)


@dataclass(frozen=True)
class WeightConfig:
    R: int = 4
    r: float = 0.1

    def __post_init__(self):
        if self.R < 1:
            raise ConfigError("window radius R must be >= 1")
        if self.r < 0:
            raise ConfigError("exponent r must be >= 0")

    @property
    def T(self) -> int:
        return 2 * self.R + 1

    @classmethod
    def from_window(cls, T: int, r: float) -> "WeightConfig":
        if T < 3 or T % 2 == 0:
            raise ConfigError(f"window length T must be odd and >= 3, got {T}")
        return cls((T - 1) // 2, r)


def frame_distance(t: int, s: int, n_frames: int, cyclic: bool = True) -> int:
    d = abs(t - s)
    return min(d, n_frames - d) if cyclic else d


def nearest_annotation(t: int, annotations: SparseAnnotations) -> int:
    """Closest annotated frame; equidistant candidates resolve to the smaller index."""
    if not annotations.labels:
        raise DegenerateError("no annotated frames")
    if not 0 <= t < annotations.n_frames:
        raise ConfigError(f"frame {t} outside 0..{annotations.n_frames - 1}")
    return min(annotations.frames,
               key=lambda s: (frame_distance(t, s, annotations.n_frames, annotations.cyclic), s))


def _path(s: int, t: int, n: int, cyclic: bool) -> list[int]:
    """Frames visited walking from s to t (inclusive) the short way round."""
    if not cyclic:
        step = 1 if t >= s else -1
        return list(range(s, t + step, step))
    fwd = (t - s) % n
    bwd = (s - t) % n
    step = 1 if fwd <= bwd else -1
    return [(s + step * k) % n for k in range((fwd if step == 1 else bwd) + 1)]


def propagate(images: np.ndarray, annotations: SparseAnnotations, reg: RegConfig | None = None,
              num_classes: int = 3) -> PropagatedLabels:
    """Pull each annotated label map onto the frames it is nearest to.

    For a path ``s -> s+1 -> ... -> t`` the successive-pair fields are
    composed (newest outermost) and the labels at ``s`` are resampled once.
    """
    reg = reg or RegConfig()
    images = np.asarray(images)
    n = len(images)
    if n != annotations.n_frames:
        raise ShapeError("annotation frame count does not match the sequence", (n,), (annotations.n_frames,))
    h, w = images.shape[1:]
    labels = np.zeros((n, h, w), dtype=np.uint8)
    source = np.zeros(n, dtype=int)
    distance = np.zeros(n, dtype=int)
    human = np.zeros(n, dtype=bool)
    warnings = []
    pair_cache: dict[tuple[int, int], np.ndarray] = {}

    def pair_field(dst: int, src: int) -> np.ndarray:
        if (dst, src) not in pair_cache:
            res = register_pair(images[dst], images[src], reg)
            if res.warning:
                warnings.append(f"frames {src}->{dst}: {res.warning}")
            pair_cache[dst, src] = res.field
        return pair_cache[dst, src]

    for t in range(n):
        s = nearest_annotation(t, annotations)
        source[t] = s
        distance[t] = frame_distance(t, s, n, annotations.cyclic)
        if t in annotations.labels:
            labels[t] = annotations.labels[t]
            human[t] = True
            continue
        path = _path(s, t, n, annotations.cyclic)
        total = None
        for a, b in zip(path[-2::-1], path[:0:-1]):
            f = pair_field(b, a)
            total = f if total is None else compose(total, f)
        labels[t] = warp_label_map(annotations.labels[s], total, num_classes)
    return PropagatedLabels(labels, source, distance, human, warnings)


def weight_from_distance(d: int | float, cfg: WeightConfig) -> float:
    d = abs(d)
    if d > cfg.R:
        raise WindowError(f"frame distance {d} exceeds window radius R={cfg.R}")
    base = 1.0 - d / cfg.R
    if cfg.r == 0:
        return 1.0
    return float(base ** cfg.r)


def weight(t: int, s: int, cfg: WeightConfig) -> float:
    """``(1 - |t - s| / R) ** r``."""
    return weight_from_distance(t - s, cfg)


@dataclass
class Window:
    frames: np.ndarray  # sequence indices, length T
    images: np.ndarray  # (T, H, W)
    labels: np.ndarray  # (T, H, W)
    distance: np.ndarray  # (T,)
    center: int


def extract_window(images: np.ndarray, prop: PropagatedLabels, center: int, R: int,
                   cyclic: bool = True) -> Window:
    """Frames ``center-R .. center+R`` (wrapping when cyclic, truncated otherwise).

    Each frame keeps its distance to its own nearest annotation.
    """
    n = len(images)
    offsets = np.arange(-R, R + 1)
    idx = center + offsets
    if cyclic:
        idx = idx % n
    else:
        idx = idx[(idx >= 0) & (idx < n)]
    return Window(idx, images[idx], prop.labels[idx], prop.distance[idx], center)


def window_weights(distance: np.ndarray, cfg: WeightConfig) -> np.ndarray:
    return np.array([weight_from_distance(d, cfg) for d in distance])


def weighted_sequence_loss(logits: Tensor, labels: np.ndarray, distance: np.ndarray, cfg: WeightConfig) -> Tensor:
    """``sum_t w_t CE_t / sum_t w_t`` with ``CE_t`` the pixel-mean cross-entropy of frame t."""
    tn, c, h, w = logits.shape
    if labels.shape != (tn, h, w):
        raise ShapeError("labels must be (T, H, W) matching logits", labels.shape, logits.shape)
    wts = window_weights(distance, cfg).astype(logits.dtype)
    pix = np.broadcast_to(wts[:, None, None, None], (tn, 1, h, w))
    return tc.softmax_cross_entropy(logits, one_hot(labels, c, logits.dtype), pix)
