import numpy as np
import pytest

from seqseg.errors import ConfigError, DegenerateError, ShapeError
from seqseg.tensor import Tensor
from seqseg.unet import (Schedule, UNetConfig, build_unet, one_hot, predict_frames, train_unet_static,
                         unet_forward)


def test_default_parameter_count():
    # hand tally of (9*cin + 1)*cout over the 15 convolutions plus the 1x1 classifier
    assert build_unet(UNetConfig()).num_parameters == 129587


def test_forward_shapes():
    cfg = UNetConfig(depth=3, base_channels=4, feature_channels=5)
    feats, logits = unet_forward(build_unet(cfg), Tensor(np.zeros((2, 1, 16, 12))))
    assert feats.shape == (2, 5, 16, 12)
    assert logits.shape == (2, 3, 16, 12)
    assert (feats.data >= 0).all()


def test_extent_must_divide():
    p = build_unet(UNetConfig(depth=3, base_channels=4))
    with pytest.raises(ShapeError):
        unet_forward(p, Tensor(np.zeros((1, 1, 10, 16))))
    with pytest.raises(ShapeError):
        unet_forward(p, Tensor(np.zeros((1, 2, 16, 16))))


def test_config_validation():
    with pytest.raises(ConfigError):
        UNetConfig(depth=1)


def test_build_is_seeded():
    a = build_unet(UNetConfig(base_channels=4), seed=3)
    b = build_unet(UNetConfig(base_channels=4), seed=3)
    c = build_unet(UNetConfig(base_channels=4), seed=4)
    assert all(np.array_equal(a[k].data, b[k].data) for k in a.tensors)
    assert not np.array_equal(a["enc0.conv1.w"].data, c["enc0.conv1.w"].data)
    assert not any(a[k].data.any() for k in a.tensors if k.endswith(".b"))


def test_one_hot():
    oh = one_hot(np.array([[[0, 2], [1, 1]]]), 3)
    assert oh.shape == (1, 3, 2, 2)
    np.testing.assert_array_equal(oh.sum(axis=1), 1)
    assert oh[0, 2, 0, 1] == 1 and oh[0, 1, 1, 0] == 1


def test_schedule_drops_tenfold_after_quarter():
    s = Schedule(iterations=40, base_lr=1e-3)
    assert s.lr(9) == 1e-3 and s.lr(10) == pytest.approx(1e-4)


def test_training_fits_a_small_problem():
    rng = np.random.default_rng(0)
    imgs = np.zeros((4, 16, 16), np.float32)
    labs = np.zeros((4, 16, 16), np.uint8)
    for i in range(4):
        cy, cx = rng.integers(4, 12, size=2)
        yy, xx = np.mgrid[:16, :16]
        m = (yy - cy) ** 2 + (xx - cx) ** 2 < 9
        imgs[i][m] = 1.0
        labs[i][m] = 1
    p = build_unet(UNetConfig(depth=2, base_channels=8, num_classes=2, feature_channels=8), seed=0)
    p, log = train_unet_static(p, imgs, labs, Schedule(iterations=100, base_lr=1e-2, batch_size=4), seed=0)
    assert log[-1]["loss"] < 0.5 * log[0]["loss"]
    pred = predict_frames(p, imgs).argmax(axis=1)
    assert (pred == labs).mean() > 0.95


def test_training_is_deterministic():
    rng = np.random.default_rng(1)
    imgs = rng.uniform(size=(3, 8, 8)).astype(np.float32)
    labs = rng.integers(0, 3, size=(3, 8, 8))
    cfg = UNetConfig(depth=2, base_channels=2, feature_channels=2)
    runs = [train_unet_static(build_unet(cfg, seed=0), imgs, labs, Schedule(5, batch_size=2), seed=7)[0]
            for _ in range(2)]
    for k in runs[0].tensors:
        assert runs[0][k].data.tobytes() == runs[1][k].data.tobytes()


def test_training_rejects_empty_set():
    p = build_unet(UNetConfig(depth=2, base_channels=2, feature_channels=2))
    with pytest.raises(DegenerateError):
        train_unet_static(p, np.zeros((0, 8, 8)), np.zeros((0, 8, 8)), Schedule(1))
