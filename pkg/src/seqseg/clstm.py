"""Convolutional LSTM, bidirectional unrolling and the fused prediction head.

Gate equations (``*`` is same-padded convolution, no peephole terms)::

    i = sigmoid(x*W_xi + h*W_hi + b_i)
    f = sigmoid(x*W_xf + h*W_hf + b_f)
    c' = c . f + i . tanh(x*W_xc + h*W_hc + b_c)
    o = sigmoid(x*W_xo + h*W_ho + b_o)
    h' = o . tanh(c')

The four x-kernels (and the four h-kernels) are stacked along the output
channel axis so each step costs one convolution per input; the stacking is
itself a taped op, so gradients still land on the individual kernels.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as tc
from .errors import DegenerateError, ShapeError
from .tensor import Tensor
from .unet import UNetParams, unet_forward

GATES = ("i", "f", "c", "o")


@dataclass
class CLSTMParams:
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    @property
    def hidden(self) -> int:
        return self.tensors["W_hi"].shape[0]

    @property
    def in_channels(self) -> int:
        return self.tensors["W_xi"].shape[1]

    @property
    def kernel_size(self) -> int:
        return self.tensors["W_xi"].shape[2]

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())


@dataclass
class CLSTMState:
    h: Tensor
    c: Tensor

    def __post_init__(self):
        if self.h.shape != self.c.shape:
            raise ShapeError("C-LSTM state: h and c must have identical shapes", self.h.shape, self.c.shape)


@dataclass
class HeadParams:
    w: Tensor
    b: Tensor

    def parameters(self) -> list[Tensor]:
        return [self.w, self.b]


def clstm_manifest(in_channels: int, hidden: int, k: int = 3) -> list[tuple[str, tuple[int, ...]]]:
    out = []
    for g in GATES:
        out.append((f"W_x{g}", (hidden, in_channels, k, k)))
        out.append((f"W_h{g}", (hidden, hidden, k, k)))
    for g in GATES:
        out.append((f"b_{g}", (hidden,)))
    return out


def build_clstm(in_channels: int, hidden: int = 16, k: int = 3, seed: int = 0,
                dtype=tc.DEFAULT_DTYPE, forget_bias: float = 1.0) -> CLSTMParams:
    if k % 2 == 0:
        raise ShapeError("C-LSTM kernel size must be odd", (k, k))
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in clstm_manifest(in_channels, hidden, k):
        if name.startswith("b_"):
            data = np.full(shape, forget_bias if name == "b_f" else 0.0, dtype=dtype)
        else:
            cout, cin = shape[:2]
            data = tc.glorot_uniform(rng, shape, cin * k * k, cout * k * k, dtype)
        tensors[name] = Tensor(data, requires_grad=True, name=name)
    return CLSTMParams(tensors)


def build_head(hidden: int, num_classes: int = 3, seed: int = 0, dtype=tc.DEFAULT_DTYPE) -> HeadParams:
    rng = np.random.default_rng(seed)
    w = tc.glorot_uniform(rng, (num_classes, 2 * hidden, 1, 1), 2 * hidden, num_classes, dtype)
    return HeadParams(Tensor(w, requires_grad=True, name="head.w"),
                      Tensor(np.zeros(num_classes, dtype=dtype), requires_grad=True, name="head.b"))


def _stacked(params: CLSTMParams) -> tuple[Tensor, Tensor, Tensor]:
    wx = tc.concat([params[f"W_x{g}"] for g in GATES], axis=0)
    wh = tc.concat([params[f"W_h{g}"] for g in GATES], axis=0)
    b = tc.concat([params[f"b_{g}"] for g in GATES], axis=0)
    return wx, wh, b


def _gates(pre: Tensor, prev_c: Tensor | None, hidden: int) -> CLSTMState:
    i = tc.sigmoid(tc.slice_axis(pre, 0, hidden))
    f = tc.sigmoid(tc.slice_axis(pre, hidden, 2 * hidden))
    g = tc.tanh_act(tc.slice_axis(pre, 2 * hidden, 3 * hidden))
    o = tc.sigmoid(tc.slice_axis(pre, 3 * hidden, 4 * hidden))
    c = tc.mul(i, g) if prev_c is None else tc.add(tc.mul(prev_c, f), tc.mul(i, g))
    h = tc.mul(o, tc.tanh_act(c))
    return CLSTMState(h, c)


def zero_state(batch: int, hidden: int, height: int, width: int, dtype=tc.DEFAULT_DTYPE) -> CLSTMState:
    z = np.zeros((batch, hidden, height, width), dtype=dtype)
    return CLSTMState(Tensor(z), Tensor(z.copy()))


def clstm_cell(x_t: Tensor, prev: CLSTMState, params: CLSTMParams) -> CLSTMState:
    """One C-LSTM step."""
    if x_t.data.ndim != 4 or x_t.shape[1] != params.in_channels:
        raise ShapeError(f"C-LSTM input must be [N,{params.in_channels},H,W]", x_t.shape)
    if prev.h.shape != (x_t.shape[0], params.hidden) + x_t.shape[2:]:
        raise ShapeError("C-LSTM state does not match input", x_t.shape, prev.h.shape)
    wx, wh, b = _stacked(params)
    pre = tc.add(tc.conv2d(x_t, wx, b), tc.conv2d(prev.h, wh))
    return _gates(pre, prev.c, params.hidden)


def _unroll(frames: Sequence[Tensor], params: CLSTMParams) -> list[Tensor]:
    """Hidden states for one direction starting from a zero state."""
    wx, wh, b = _stacked(params)
    n = frames[0].shape[0]
    # x-contributions for every frame in one batched convolution
    xs = tc.conv2d(tc.concat(frames, axis=0), wx, b)
    hidden = params.hidden
    state = None
    out = []
    for t in range(len(frames)):
        pre = tc.slice_axis(xs, t * n, (t + 1) * n, axis=0)
        if state is not None:
            pre = tc.add(pre, tc.conv2d(state.h, wh))
        # zero initial c: the c.f term vanishes at the first step
        state = _gates(pre, None if state is None else state.c, hidden)
        out.append(state.h)
    return out


def bidirectional_unroll(features: Sequence[Tensor], fwd: CLSTMParams, bwd: CLSTMParams) -> list[Tensor]:
    """Per-frame ``concat(h_fwd[t], h_bwd[t])``; both streams start from zero state."""
    features = list(features)
    if not features:
        raise DegenerateError("bidirectional_unroll needs at least one frame")
    for f in features[1:]:
        if f.shape != features[0].shape:
            raise ShapeError("all frames must share one shape", features[0].shape, f.shape)
    hf = _unroll(features, fwd)
    hb = _unroll(features[::-1], bwd)[::-1]
    return [tc.concat_channels(a, b) for a, b in zip(hf, hb)]


@dataclass
class SequenceModel:
    """U-Net feature extractor + bidirectional C-LSTM + 1x1 head."""

    unet: UNetParams
    fwd: CLSTMParams
    bwd: CLSTMParams
    head: HeadParams

    def named_tensors(self) -> dict[str, Tensor]:
        out = {f"unet.{k}": v for k, v in self.unet.tensors.items()}
        out.update({f"fwd.{k}": v for k, v in self.fwd.tensors.items()})
        out.update({f"bwd.{k}": v for k, v in self.bwd.tensors.items()})
        out["head.w"] = self.head.w
        out["head.b"] = self.head.b
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_tensors().values())


def build_sequence_model(unet: UNetParams, hidden: int | None = None, k: int = 3, seed: int = 0) -> SequenceModel:
    """Attach freshly initialised recurrent parts to an (already trained) U-Net."""
    feat = unet.config.feature_channels
    hidden = feat if hidden is None else hidden
    dtype = unet["classifier.w"].dtype
    return SequenceModel(
        unet,
        build_clstm(feat, hidden, k, seed=seed + 1, dtype=dtype),
        build_clstm(feat, hidden, k, seed=seed + 2, dtype=dtype),
        build_head(hidden, unet.config.num_classes, seed=seed + 3, dtype=dtype),
    )


def sequence_logits(model: SequenceModel, images: Tensor) -> Tensor:
    """``[T,1,H,W]`` frames of one sequence -> ``[T,C,H,W]`` logits (taped)."""
    feats, _ = unet_forward(model.unet, images)
    t = images.shape[0]
    frames = [tc.slice_axis(feats, i, i + 1, axis=0) for i in range(t)]
    fused = bidirectional_unroll(frames, model.fwd, model.bwd)
    return tc.conv2d(tc.concat(fused, axis=0), model.head.w, model.head.b)


def predict_sequence(images: np.ndarray, model: SequenceModel) -> np.ndarray:
    """Class probabilities ``[T,C,H,W]`` for a whole ``[T,H,W]`` sequence."""
    images = np.asarray(images, dtype=model.unet["classifier.w"].dtype)
    if images.ndim != 3:
        raise ShapeError("predict_sequence expects [T,H,W] frames", images.shape)
    logits = sequence_logits(model, Tensor(images[:, None]))
    return tc.softmax(logits)


def predict_windowed(images: np.ndarray, model: SequenceModel, R: int, cyclic: bool = True) -> np.ndarray:
    """Class probabilities where frame t is read off a window ``t-R .. t+R``.

    This matches the windows seen in training, so the recurrent state never runs
    longer than ``2R+1`` steps. U-Net features are computed once per frame.
    """
    images = np.asarray(images, dtype=model.unet["classifier.w"].dtype)
    if images.ndim != 3:
        raise ShapeError("predict_windowed expects [T,H,W] frames", images.shape)
    if R < 1:
        raise ShapeError("window radius must be >= 1", (R,))
    n = len(images)
    feats, _ = unet_forward(model.unet, Tensor(images[:, None]))
    frames = [tc.slice_axis(feats, i, i + 1, axis=0) for i in range(n)]
    out = []
    for t in range(n):
        idx = np.arange(t - R, t + R + 1)
        if cyclic:
            idx = idx % n
        else:
            idx = idx[(idx >= 0) & (idx < n)]
        fused = bidirectional_unroll([frames[i] for i in idx], model.fwd, model.bwd)
        centre = R if cyclic else int(t - idx[0])
        out.append(tc.conv2d(fused[centre], model.head.w, model.head.b).data[0])
    return tc.softmax(np.stack(out))
