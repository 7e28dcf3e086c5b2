"""Synthetic pulsating-aorta image sequences with dense ground truth.

Each sample shows two bright vessel cross-sections, an ascending aorta (class
1, larger) and a descending aorta (class 2, smaller), whose radii follow a
raised-cosine waveform over one cyclic heartbeat. A non-pulsating distractor
vessel of similar brightness sits next to the ascending aorta. The whole
frame drifts slightly, and Gaussian noise is added.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DegenerateError

BACKGROUND, AAO, DAO = 0, 1, 2
STRUCTURES = {"AAo": AAO, "DAo": DAO}


@dataclass(frozen=True)
class PhantomConfig:
    size: tuple[int, int] = (64, 64)
    frames: int = 20
    spacing: float = 1.6  # mm per pixel, both axes
    aao_radius: tuple[float, float] = (8.0, 10.0)  # sampled uniformly per subject
    aao_amplitude: tuple[float, float] = (1.5, 2.5)
    dao_radius: tuple[float, float] = (5.5, 7.0)
    dao_amplitude: tuple[float, float] = (0.8, 1.4)
    distractor: bool = True
    distractor_radius: tuple[float, float] = (4.5, 6.0)
    distractor_gap: tuple[float, float] = (1.5, 3.0)  # px between AAo rim and distractor rim
    boundary_perturbation: float = 0.06  # relative amplitude of angular harmonics
    drift: float = 1.0  # px, peak whole-frame translation
    noise_sigma: float = 0.08
    background_level: float = 0.15
    vessel_level: float = 0.8
    distractor_level: float = 0.75
    margin: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if self.frames < 3:
            raise ConfigError("a phantom needs at least 3 frames")

    def replace(self, **kw) -> "PhantomConfig":
        return PhantomConfig(**{**asdict(self), **kw})

    def scaled(self, size: tuple[int, int]) -> "PhantomConfig":
        """Same anatomy at a different matrix size: lengths in px scale, the field of view is kept."""
        f = min(size) / min(self.size)
        px = {k: tuple(v * f for v in getattr(self, k)) for k in
              ("aao_radius", "aao_amplitude", "dao_radius", "dao_amplitude", "distractor_radius", "distractor_gap")}
        return self.replace(size=tuple(size), spacing=self.spacing / f, drift=self.drift * f,
                            margin=self.margin * f, **px)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomConfig":
        d = dict(d)
        for k, v in d.items():
            if isinstance(v, list):
                d[k] = tuple(v)
        return cls(**d)


@dataclass
class Vessel:
    """Analytic cross-section: centre, radius waveform and angular harmonics."""

    cy: float
    cx: float
    r0: float
    amplitude: float
    harmonics: list[tuple[int, float, float]]  # (order, relative amplitude, phase)
    label: int
    level: float

    def radius(self, t: float, n_frames: int) -> float:
        return self.r0 + self.amplitude * pulse(t, n_frames)

    def boundary(self, theta: np.ndarray, t: float, n_frames: int) -> np.ndarray:
        mod = np.ones_like(theta)
        for k, a, ph in self.harmonics:
            mod = mod + a * np.cos(k * theta + ph)
        return self.radius(t, n_frames) * mod

    def area(self, t: float, n_frames: int) -> float:
        """Exact area in px^2 of the polar curve (harmonic orders distinct, >= 1)."""
        r = self.radius(t, n_frames)
        return float(np.pi * r * r * (1 + 0.5 * sum(a * a for _, a, _ in self.harmonics)))

    def max_extent(self) -> float:
        return (self.r0 + self.amplitude) * (1 + sum(abs(a) for _, a, _ in self.harmonics))


def pulse(t: float, n_frames: int) -> float:
    """Raised cosine on one cycle: 0 at frame 0, 1 at mid-cycle."""
    return 0.5 * (1.0 - np.cos(2 * np.pi * t / n_frames))


@dataclass
class PhantomSample:
    images: np.ndarray  # (T, H, W) float32 in [0, 1]
    labels: np.ndarray  # (T, H, W) uint8, dense truth
    ed: int
    es: int
    spacing: float
    vessels: list[Vessel] = field(default_factory=list)
    offsets: np.ndarray | None = None  # (T, 2) drift per frame

    @property
    def annotated(self) -> dict[int, np.ndarray]:
        return {self.ed: self.labels[self.ed], self.es: self.labels[self.es]}

    def analytic_area(self, label: int) -> np.ndarray:
        v = next(v for v in self.vessels if v.label == label)
        t_n = len(self.images)
        return np.array([v.area(t, t_n) for t in range(t_n)])


def _polar(h: int, w: int, cy: float, cx: float) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    return np.hypot(dy, dx), np.arctan2(dy, dx)


def rasterize(vessel: Vessel, t: int, n_frames: int, shape: tuple[int, int],
              offset: tuple[float, float] = (0.0, 0.0)) -> np.ndarray:
    """Pixel centres strictly inside the analytic boundary."""
    dist, theta = _polar(shape[0], shape[1], vessel.cy + offset[0], vessel.cx + offset[1])
    return dist < vessel.boundary(theta, t, n_frames)


def _soft(vessel: Vessel, t: int, n_frames: int, shape, offset) -> np.ndarray:
    dist, theta = _polar(shape[0], shape[1], vessel.cy + offset[0], vessel.cx + offset[1])
    return np.clip(vessel.boundary(theta, t, n_frames) - dist + 0.5, 0.0, 1.0)


def _harmonics(rng: np.random.Generator, strength: float) -> list[tuple[int, float, float]]:
    return [(k, float(rng.uniform(0.3, 1.0) * strength / k), float(rng.uniform(0, 2 * np.pi))) for k in (2, 3)]


def generate(config: PhantomConfig) -> PhantomSample:
    """Render one cyclic sequence with its dense labels; deterministic in ``config.seed``."""
    rng = np.random.default_rng(config.seed)
    h, w = config.size
    n = config.frames
    hp = config.boundary_perturbation

    aao = Vessel(0, 0, rng.uniform(*config.aao_radius), rng.uniform(*config.aao_amplitude),
                 _harmonics(rng, hp), AAO, config.vessel_level)
    dao = Vessel(0, 0, rng.uniform(*config.dao_radius), rng.uniform(*config.dao_amplitude),
                 _harmonics(rng, hp), DAO, config.vessel_level)
    # AAo upper-left quadrant, DAo lower-right, with jitter
    aao.cy = h * 0.36 + rng.uniform(-2, 2)
    aao.cx = w * 0.36 + rng.uniform(-2, 2)
    dao.cy = h * 0.68 + rng.uniform(-2, 2)
    dao.cx = w * 0.64 + rng.uniform(-2, 2)
    vessels = [aao, dao]
    if config.distractor:
        rd = rng.uniform(*config.distractor_radius)
        gap = rng.uniform(*config.distractor_gap)
        # to the right of the AAo, slightly above, so it never touches the DAo
        d = aao.max_extent() + rd * (1 + 0.5 * hp) + gap
        ext = rd * (1 + hp) + config.drift + config.margin
        for _ in range(32):
            ang = rng.uniform(-0.6, 0.1)
            cy, cx = aao.cy + d * np.sin(ang), aao.cx + d * np.cos(ang)
            if ext <= cy <= h - 1 - ext and ext <= cx <= w - 1 - ext:
                break
        dist_v = Vessel(cy, cx, rd, 0.0, _harmonics(rng, hp * 0.5), BACKGROUND, config.distractor_level)
        vessels.append(dist_v)

    phase = rng.uniform(0, 2 * np.pi, size=2)
    tt = np.arange(n)
    offsets = config.drift * np.stack([np.sin(2 * np.pi * tt / n + phase[0]),
                                       np.sin(2 * np.pi * tt / n + phase[1])], axis=1)

    for v in vessels:
        ext = v.max_extent() + config.drift + config.margin
        if v.cy - ext < 0 or v.cx - ext < 0 or v.cy + ext > h - 1 or v.cx + ext > w - 1:
            raise ConfigError(f"vessel (label {v.label}) leaves the frame; enlarge the image or shrink radii")

    images = np.empty((n, h, w), dtype=np.float32)
    labels = np.zeros((n, h, w), dtype=np.uint8)
    for t in range(n):
        off = tuple(offsets[t])
        img = np.full((h, w), config.background_level)
        # paint lowest priority first: distractor, DAo, AAo
        for v in reversed(vessels):
            s = _soft(v, t, n, (h, w), off)
            img = img * (1 - s) + v.level * s
            if v.label != BACKGROUND:
                labels[t][rasterize(v, t, n, (h, w), off)] = v.label
        img = ndimage.gaussian_filter(img, 0.6)
        if config.noise_sigma > 0:
            img = img + rng.normal(0.0, config.noise_sigma, size=img.shape)
        images[t] = np.clip(img, 0.0, 1.0)

    areas = [aao.area(t, n) for t in range(n)]
    es = int(np.argmax(areas)) if aao.amplitude > 0 else n // 2
    return PhantomSample(images, labels, ed=0, es=es, spacing=config.spacing, vessels=vessels, offsets=offsets)


# ---------------------------------------------------------------- datasets

def subject_seeds(master_seed: int, n: int) -> list[int]:
    children = np.random.SeedSequence(master_seed).spawn(n)
    return [int(c.generate_state(1)[0]) for c in children]


def split_indices(n: int, train_fraction: float, seed: int) -> tuple[list[int], list[int]]:
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(train_fraction * n))
    return sorted(int(i) for i in perm[:n_train]), sorted(int(i) for i in perm[n_train:])


def generate_dataset(n: int, out_dir, config: PhantomConfig | None = None, seed: int = 0,
                     train_fraction: float = 0.8) -> dict:
    """Write ``n`` subjects plus ``manifest.json`` under ``out_dir``; returns the manifest."""
    from . import io

    if n < 2:
        raise DegenerateError(f"a dataset needs at least 2 subjects, got {n}")
    config = config or PhantomConfig()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train, test = split_indices(n, train_fraction, seed)
    train_set = set(train)
    subjects = []
    for i, s in enumerate(subject_seeds(seed, n)):
        sample = generate(config.replace(seed=s))
        sid = f"subject_{i:03d}"
        sdir = out_dir / sid
        sdir.mkdir(exist_ok=True)
        io.write_sequence(sdir / "images.aosq", sample.images, (sample.spacing, sample.spacing))
        io.write_labels(sdir / "truth.aolb", sample.labels, np.ones(config.frames, bool))
        sparse = np.zeros_like(sample.labels)
        human = np.zeros(config.frames, bool)
        for t, lab in sample.annotated.items():
            sparse[t] = lab
            human[t] = True
        io.write_labels(sdir / "annotations.aolb", sparse, human)
        subjects.append({
            "id": sid,
            "seed": s,
            "split": "train" if i in train_set else "test",
            "ed": sample.ed,
            "es": sample.es,
            "images": f"{sid}/images.aosq",
            "annotations": f"{sid}/annotations.aolb",
            "truth": f"{sid}/truth.aolb",
        })
    manifest = {
        "format": "seqseg-dataset",
        "version": 1,
        "master_seed": seed,
        "train_fraction": train_fraction,
        "phantom": json.loads(json.dumps(asdict(config))),
        "subjects": subjects,
    }
    io.write_json(out_dir / "manifest.json", manifest)
    return manifest


# ---------------------------------------------------------------- augmentation

@dataclass(frozen=True)
class AugmentParams:
    translation: tuple[float, float] = (0.0, 0.0)  # (dy, dx) px
    rotation: float = 0.0  # degrees
    scale: float = 1.0

    def inverse(self) -> "AugmentParams":
        # forward map: q = c + s R (p - c) + t; the inverse is another similarity
        s = 1.0 / self.scale
        th = -np.deg2rad(self.rotation)
        rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
        t = -s * rot @ np.asarray(self.translation)
        return AugmentParams((float(t[0]), float(t[1])), -self.rotation, s)


@dataclass(frozen=True)
class AugmentRanges:
    translation: float = 4.0
    rotation: float = 15.0
    scale: tuple[float, float] = (0.9, 1.1)

    def sample(self, rng: np.random.Generator) -> AugmentParams:
        return AugmentParams(
            (float(rng.uniform(-self.translation, self.translation)),
             float(rng.uniform(-self.translation, self.translation))),
            float(rng.uniform(-self.rotation, self.rotation)),
            float(rng.uniform(*self.scale)),
        )


def _affine(frame: np.ndarray, p: AugmentParams, order: int) -> np.ndarray:
    h, w = frame.shape
    c = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    th = np.deg2rad(p.rotation)
    rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    fwd = p.scale * rot
    inv = np.linalg.inv(fwd)
    # output pixel q reads input at inv @ (q - c - t) + c
    offset = c - inv @ (c + np.asarray(p.translation))
    return ndimage.affine_transform(frame, inv, offset=offset, order=order, mode="nearest")


def augment(images: np.ndarray, labels: np.ndarray, params: AugmentParams) -> tuple[np.ndarray, np.ndarray]:
    """Apply one similarity transform to every frame (bilinear) and label map (nearest)."""
    if params == AugmentParams():
        return images.copy(), labels.copy()
    imgs = np.stack([_affine(f.astype(np.float64), params, 1) for f in images]).astype(images.dtype)
    labs = np.stack([_affine(l, params, 0) for l in labels]).astype(labels.dtype)
    return imgs, labs


def random_augment(images, labels, rng: np.random.Generator, ranges: AugmentRanges | None = None):
    return augment(images, labels, (ranges or AugmentRanges()).sample(rng))
