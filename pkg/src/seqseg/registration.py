"""Free-form deformation registration and dense displacement-field utilities.

Fields are ``(H, W, 2)`` float arrays holding ``(dy, dx)`` in pixels with
pull-back semantics: the value at target pixel ``p`` is read from the source
at ``p + d(p)``. Samples outside the grid clamp to the border.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigError, ShapeError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RegConfig:
    spacing: int = 8  # control-point spacing, full-resolution pixels
    levels: int = 3
    iterations: int = 50  # per level
    step: float = 0.5  # initial max control-point move per iteration, pixels
    bending_weight: float = 0.01
    smoothing_sigma: float = 1.0  # pre-smoothing of both frames
    cap_fraction: float = 0.25  # |d| <= cap_fraction * min(H, W)

    def __post_init__(self):
        if self.spacing < 2:
            raise ConfigError("control-point spacing must be >= 2")
        if self.levels < 1:
            raise ConfigError("pyramid needs at least one level")


@dataclass
class RegistrationResult:
    field: np.ndarray
    ssd_initial: float
    ssd_final: float
    warning: str | None = None

    @property
    def ssd_ratio(self) -> float:
        return self.ssd_final / self.ssd_initial if self.ssd_initial > 0 else 0.0


# ---------------------------------------------------------------- sampling

def _grid(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    return np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")


def _sample(image: np.ndarray, yy: np.ndarray, xx: np.ndarray, order: int = 1) -> np.ndarray:
    return ndimage.map_coordinates(image, [yy, xx], order=order, mode="nearest")


def warp_image(image: np.ndarray, field: np.ndarray) -> np.ndarray:
    """Bilinear pull-back warp of a 2-D image."""
    image = np.asarray(image)
    if field.shape != image.shape + (2,):
        raise ShapeError("field must be (H, W, 2) on the image grid", image.shape, field.shape)
    yy, xx = _grid(*image.shape)
    out = _sample(image.astype(np.float64), yy + field[..., 0], xx + field[..., 1])
    return out.astype(image.dtype if image.dtype.kind == "f" else np.float64)


def warp_labels(onehot: np.ndarray, field: np.ndarray) -> np.ndarray:
    """Warp each class channel of a ``(C, H, W)`` one-hot stack, then argmax.

    ``np.argmax`` returns the first maximum, so ties go to the lowest class.
    """
    onehot = np.asarray(onehot, dtype=np.float64)
    warped = np.stack([warp_image(ch, field) for ch in onehot])
    return warped.argmax(axis=0).astype(np.uint8)


def warp_label_map(labels: np.ndarray, field: np.ndarray, num_classes: int | None = None) -> np.ndarray:
    labels = np.asarray(labels)
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    onehot = np.arange(num_classes)[:, None, None] == labels[None]
    return warp_labels(onehot, field)


def compose(outer: np.ndarray, inner: np.ndarray) -> np.ndarray:
    """Field equivalent to warping by ``inner`` and then by ``outer``.

    ``(outer o inner)(p) = inner(p + outer(p)) + outer(p)``; pulling an image
    through the result equals ``warp(warp(img, inner), outer)`` up to
    interpolation error.
    """
    if outer.shape != inner.shape:
        raise ShapeError("compose: fields must share a grid", outer.shape, inner.shape)
    h, w = outer.shape[:2]
    yy, xx = _grid(h, w)
    py, px = yy + outer[..., 0], xx + outer[..., 1]
    resampled = np.stack([_sample(inner[..., c], py, px) for c in range(2)], axis=-1)
    return resampled + outer


def bending_energy(field: np.ndarray) -> float:
    """Mean thin-plate bending energy of a dense field (finite differences)."""
    total = 0.0
    for c in range(2):
        dy, dx = np.gradient(field[..., c])
        dyy, dyx = np.gradient(dy)
        _, dxx = np.gradient(dx)
        total += np.mean(dyy ** 2 + 2 * dyx ** 2 + dxx ** 2)
    return float(total)


def ssd(a: np.ndarray, b: np.ndarray) -> float:
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return float(np.sum(d * d))


# ---------------------------------------------------------------- B-spline basis

def _bspline(u: np.ndarray, deriv: int = 0) -> np.ndarray:
    """Centred cubic B-spline (support [-2, 2]) or its first/second derivative."""
    a = np.abs(u)
    inner = a < 1
    outer = (a >= 1) & (a < 2)
    out = np.zeros_like(u)
    if deriv == 0:
        out[inner] = 2.0 / 3.0 - a[inner] ** 2 + 0.5 * a[inner] ** 3
        out[outer] = (2 - a[outer]) ** 3 / 6.0
    elif deriv == 1:
        s = np.sign(u)
        out[inner] = -2 * u[inner] + 1.5 * u[inner] * a[inner]
        out[outer] = -s[outer] * (2 - a[outer]) ** 2 / 2.0
    elif deriv == 2:
        out[inner] = -2 + 3 * a[inner]
        out[outer] = 2 - a[outer]
    else:
        raise ValueError("deriv must be 0, 1 or 2")
    return out


def control_count(extent: int, spacing: int) -> int:
    return (extent - 1) // spacing + 4


def basis_matrix(positions: np.ndarray, extent: int, spacing: int, deriv: int = 0) -> np.ndarray:
    """``(len(positions), n_ctrl)`` matrix; control point ``k`` sits at ``(k-1)*spacing``."""
    k = np.arange(control_count(extent, spacing))
    u = positions[:, None] / spacing - (k[None, :] - 1)
    return _bspline(u, deriv) / float(spacing) ** deriv


class FFDTransform:
    """Cubic B-spline free-form deformation on a fixed control lattice.

    ``coeffs`` has shape ``(2, ny, nx)`` and is expressed in full-resolution
    pixels.
    """

    def __init__(self, shape: tuple[int, int], spacing: int):
        self.shape = tuple(shape)
        self.spacing = spacing
        h, w = self.shape
        ys, xs = np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64)
        self.by = [basis_matrix(ys, h, spacing, d) for d in range(3)]
        self.bx = [basis_matrix(xs, w, spacing, d) for d in range(3)]
        self.coeffs = np.zeros((2, control_count(h, spacing), control_count(w, spacing)))

    def dense(self, coeffs: np.ndarray | None = None) -> np.ndarray:
        c = self.coeffs if coeffs is None else coeffs
        by, bx = self.by[0], self.bx[0]
        return np.stack([by @ c[i] @ bx.T for i in range(2)], axis=-1)

    def bending(self, coeffs: np.ndarray | None = None) -> tuple[float, np.ndarray]:
        """Mean bending energy of the dense field and its gradient w.r.t. coefficients."""
        c = self.coeffs if coeffs is None else coeffs
        n = self.shape[0] * self.shape[1]
        energy = 0.0
        grad = np.zeros_like(c)
        terms = ((self.by[2], self.bx[0], 1.0), (self.by[1], self.bx[1], 2.0), (self.by[0], self.bx[2], 1.0))
        for i in range(2):
            for by, bx, wt in terms:
                d = by @ c[i] @ bx.T
                energy += wt * np.sum(d * d) / n
                grad[i] += 2 * wt * (by.T @ d @ bx) / n
        return float(energy), grad

    def fit(self, field: np.ndarray) -> None:
        """Least-squares coefficients reproducing a dense field."""
        py, px = np.linalg.pinv(self.by[0]), np.linalg.pinv(self.bx[0])
        self.coeffs = np.stack([py @ field[..., i] @ px.T for i in range(2)])


# ---------------------------------------------------------------- optimisation

def _level_images(image: np.ndarray, factor: int, sigma: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Smoothed image sampled at block centres; returns (image, y_pos, x_pos) in full-res coords."""
    h, w = image.shape
    sm = ndimage.gaussian_filter(image, sigma=max(sigma, 0.5 * factor) if factor > 1 else sigma, mode="nearest") \
        if (sigma > 0 or factor > 1) else image
    ny, nx = max(h // factor, 2), max(w // factor, 2)
    ypos = factor * np.arange(ny, dtype=np.float64) + (factor - 1) / 2.0
    xpos = factor * np.arange(nx, dtype=np.float64) + (factor - 1) / 2.0
    if factor == 1:
        return sm, ypos, xpos
    yy, xx = np.meshgrid(ypos, xpos, indexing="ij")
    return _sample(sm, yy, xx), ypos, xpos


def register_pair(fixed: np.ndarray, moving: np.ndarray, config: RegConfig | None = None) -> RegistrationResult:
    """Estimate the field ``d`` such that ``moving(p + d(p)) ~ fixed(p)``.

    Minimises mean SSD + ``bending_weight`` * bending energy over a cubic
    B-spline lattice, coarse to fine, by normalised gradient descent with
    backtracking (each accepted step lowers the objective).
    """
    config = config or RegConfig()
    fixed = np.asarray(fixed, dtype=np.float64)
    moving = np.asarray(moving, dtype=np.float64)
    if fixed.shape != moving.shape or fixed.ndim != 2:
        raise ShapeError("register_pair needs two 2-D frames of equal size", fixed.shape, moving.shape)
    h, w = fixed.shape
    ffd = FFDTransform((h, w), config.spacing)
    cap = config.cap_fraction * min(h, w)
    warning = None

    for level in reversed(range(config.levels)):
        f = 2 ** level
        fl, ypos, xpos = _level_images(fixed, f, config.smoothing_sigma)
        ml, _, _ = _level_images(moving, f, config.smoothing_sigma)
        gy_img, gx_img = np.gradient(ml)
        by = basis_matrix(ypos, h, config.spacing)
        bx = basis_matrix(xpos, w, config.spacing)
        yy, xx = np.meshgrid(np.arange(len(ypos), dtype=np.float64),
                             np.arange(len(xpos), dtype=np.float64), indexing="ij")
        npx = fl.size

        def objective(coeffs, with_grad=True):
            dy = by @ coeffs[0] @ bx.T / f
            dx = by @ coeffs[1] @ bx.T / f
            sy, sx = yy + dy, xx + dx
            resid = _sample(ml, sy, sx) - fl
            cost = np.sum(resid * resid) / npx
            be, be_grad = ffd.bending(coeffs)
            cost += config.bending_weight * be
            if not with_grad:
                return cost, None
            gy = 2 * resid * _sample(gy_img, sy, sx) / npx
            gx = 2 * resid * _sample(gx_img, sy, sx) / npx
            grad = np.stack([by.T @ gy @ bx, by.T @ gx @ bx]) / f
            return cost, grad + config.bending_weight * be_grad

        coeffs = ffd.coeffs
        cost, grad = objective(coeffs)
        level_start = cost
        step = config.step
        for _ in range(config.iterations):
            gmax = np.max(np.abs(grad))
            if gmax == 0 or step < 1e-3:
                break
            while step >= 1e-3:
                trial = coeffs - step * grad / gmax
                tcost, _ = objective(trial, with_grad=False)
                if tcost < cost:
                    coeffs = trial
                    cost, grad = objective(coeffs)
                    step *= 1.2
                    break
                step *= 0.5
        if cost > level_start:
            warning = f"objective increased at pyramid level {level}"
        ffd.coeffs = coeffs

    field = ffd.dense()
    norm = np.linalg.norm(field, axis=-1, keepdims=True)
    field = np.where(norm > cap, field * cap / np.maximum(norm, 1e-12), field)

    ssd0 = ssd(fixed, moving)
    ssd1 = ssd(fixed, warp_image(moving, field))
    if ssd1 > ssd0:
        warning = "registration worse than identity; returning zero field"
        logger.warning(warning)
        field = np.zeros_like(field)
        ssd1 = ssd0
    return RegistrationResult(field, ssd0, ssd1, warning)
