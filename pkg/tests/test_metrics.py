import math

import numpy as np
import pytest

from seqseg.errors import DegenerateError
from seqseg.metrics import (area_series, contour, curvature_series, dice, evaluate_method,
                            mean_contour_distance)


# ---------------------------------------------------------------- brute-force oracles

def bf_dice(a, b):
    inter = sa = sb = 0
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            inter += a[i, j] and b[i, j]
            sa += a[i, j]
            sb += b[i, j]
    return 1.0 if sa + sb == 0 else 2 * inter / (sa + sb)


def bf_contour(m):
    h, w = m.shape
    pts = []
    for i in range(h):
        for j in range(w):
            if not m[i, j]:
                continue
            for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                y, x = i + di, j + dj
                if not (0 <= y < h and 0 <= x < w) or not m[y, x]:
                    pts.append((i, j))
                    break
    return pts


def bf_mcd(a, b, sy, sx):
    pa, pb = bf_contour(a), bf_contour(b)

    def one_way(src, dst):
        total = 0.0
        for p in src:
            total += min(math.hypot((p[0] - q[0]) * sy, (p[1] - q[1]) * sx) for q in dst)
        return total / len(src)

    return 0.5 * (one_way(pa, pb) + one_way(pb, pa))


def bf_curvature(a):
    out = []
    for t in range(1, len(a) - 1):
        d1 = (a[t + 1] - a[t - 1]) / 2
        d2 = a[t + 1] - 2 * a[t] + a[t - 1]
        out.append(abs(d2) / (1 + d1 * d1) ** 1.5)
    return out


def _pairs():
    rng = np.random.default_rng(0)
    for _ in range(10):
        a = rng.uniform(size=(16, 16)) < rng.uniform(0.2, 0.7)
        b = rng.uniform(size=(16, 16)) < rng.uniform(0.2, 0.7)
        yield a, b


def test_dice_matches_brute_force():
    for a, b in _pairs():
        assert dice(a, b) == bf_dice(a, b)


def test_contour_matches_brute_force():
    for a, _ in _pairs():
        assert sorted(map(tuple, np.argwhere(contour(a)))) == bf_contour(a)


def test_mcd_matches_brute_force():
    for a, b in _pairs():
        assert mean_contour_distance(a, b, (1.6, 1.2)) == pytest.approx(bf_mcd(a, b, 1.6, 1.2), rel=1e-12)


def test_area_and_curvature_match_brute_force():
    rng = np.random.default_rng(1)
    seq = rng.integers(0, 3, size=(10, 16, 16))
    areas = area_series(seq, 2, 1.5)
    for t in range(10):
        assert areas[t] == sum(1 for v in seq[t].ravel() if v == 2) * 2.25
    kappa, mean = curvature_series(areas)
    np.testing.assert_allclose(kappa, bf_curvature(list(areas)), rtol=1e-12)
    assert mean == pytest.approx(np.mean(bf_curvature(list(areas))), rel=1e-12)


def test_dice_spec_examples():
    a = np.zeros((4, 4), bool)
    a[:2] = True
    assert dice(a, a) == 1.0
    assert dice(a, ~a) == 0.0
    assert dice(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0


def test_mcd_identical_and_shifted_square():
    a = np.zeros((12, 12), bool)
    a[3:7, 3:7] = True
    assert mean_contour_distance(a, a) == 0.0
    b = np.roll(a, 2, axis=1)
    # shifted by 2 columns: left/right edges are 2 px apart, top/bottom rows overlap partially
    assert mean_contour_distance(a, b, 1.0) == pytest.approx(bf_mcd(a, b, 1, 1))
    with pytest.raises(DegenerateError, match="second"):
        mean_contour_distance(a, np.zeros_like(a))
    with pytest.raises(DegenerateError, match="first"):
        mean_contour_distance(np.zeros_like(a), a)


def test_curvature_analytic_cases():
    t = np.arange(-5, 6, dtype=float)
    assert curvature_series(np.full(11, 7.0))[1] == 0.0
    assert curvature_series(3 * t + 1)[1] == 0.0
    kappa, _ = curvature_series(t ** 2)
    assert kappa[4] == 2.0  # vertex of t^2: A' = 0, A'' = 2
    with pytest.raises(DegenerateError):
        curvature_series([1.0, 2.0])


def test_cyclic_curvature_keeps_all_frames():
    a = np.cos(2 * np.pi * np.arange(12) / 12)
    k, _ = curvature_series(a, cyclic=True)
    assert len(k) == 12
    np.testing.assert_allclose(k[1:-1], curvature_series(a)[0], rtol=1e-12)


def test_evaluate_method_reports_both_structures():
    truth = np.zeros((5, 12, 12), np.uint8)
    truth[:, 2:6, 2:6] = 1
    truth[:, 7:10, 7:10] = 2
    pred = truth.copy()
    pred[1, 2:6, 6] = 1  # one extra AAo column at an annotated frame
    rep = evaluate_method(pred, {0: truth[0], 1: truth[1]}, 2.0)
    aao = rep.row("AAo")
    assert aao["dice"] == pytest.approx(0.5 * (1.0 + 2 * 16 / 36))
    assert aao["area_err_mm2"] == pytest.approx(0.5 * 4 * 4.0)
    assert rep.row("DAo")["dice"] == 1.0 and rep.row("DAo")["mcd_mm"] == 0.0
    assert rep.frames == [0, 1]


def test_evaluate_method_empty_prediction_gives_nan_distance():
    truth = np.zeros((3, 8, 8), np.uint8)
    truth[:, 2:5, 2:5] = 1
    pred = truth.copy()
    pred[0] = 0
    rep = evaluate_method(pred, {0: truth[0]}, 1.0, structures={"AAo": 1})
    assert math.isnan(rep.row("AAo")["mcd_mm"])
    assert rep.row("AAo")["dice"] == 0.0
