"""Dense NCHW tensors with tape-based reverse-mode differentiation.

Only the operations the segmentation network needs are provided. Every
operation executed while a :class:`Graph` is active is appended to that
graph's tape; :func:`backward` replays the adjoints in exact reverse order.

    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Graph() as g:
    ...     loss = tensor_sum(mul(x, x))
    >>> backward(loss, g)
    >>> x.grad.tolist()
    [2.0, 4.0]
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DegenerateError, GraphError, ShapeError

DEFAULT_DTYPE = np.float32


class Tensor:
    """N-dimensional float array with an optional gradient slot.

    Image data uses the ``(batch, channels, height, width)`` layout.
    """

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype, order="C")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def check_finite(self) -> None:
        """Raise ``FloatingPointError`` if any value (or gradient) is NaN/Inf."""
        if not np.all(np.isfinite(self.data)):
            raise FloatingPointError(f"non-finite values in tensor {self.name or ''}".strip())
        if self.grad is not None and not np.all(np.isfinite(self.grad)):
            raise FloatingPointError(f"non-finite gradient in tensor {self.name or ''}".strip())

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.dtype)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


@dataclass
class _Node:
    name: str
    out: Tensor
    inputs: tuple[Tensor, ...]
    adjoint: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Graph:
    """Ordered tape of executed operations.

    Use as a context manager; operations run inside the ``with`` block whose
    inputs require gradients are recorded.
    """

    nodes: list[_Node] = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "Graph":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def record(self, name, out, inputs, adjoint) -> None:
        if self.consumed:
            raise GraphError("graph already replayed; call reset() before recording again")
        self.nodes.append(_Node(name, out, tuple(inputs), adjoint))

    def reset(self) -> None:
        self.nodes.clear()
        self.consumed = False

    def leaves(self) -> list[Tensor]:
        produced = {id(n.out) for n in self.nodes}
        seen: dict[int, Tensor] = {}
        for n in self.nodes:
            for t in n.inputs:
                if t.requires_grad and id(t) not in produced:
                    seen.setdefault(id(t), t)
        return list(seen.values())

    def op_names(self) -> list[str]:
        return [n.name for n in self.nodes]


_ACTIVE: list[Graph] = []


def _track(name: str, out_data: np.ndarray, inputs: Sequence[Tensor], adjoint) -> Tensor:
    out = Tensor(out_data, dtype=out_data.dtype)
    if _ACTIVE and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _ACTIVE[-1].record(name, out, inputs, adjoint)
    return out


def backward(loss: Tensor, graph: Graph) -> None:
    """Replay ``graph`` in reverse, accumulating gradients into tracked leaves.

    Intermediate adjoints are discarded afterwards; every leaf reachable from
    the tape receives a ``grad`` (zeros if it did not influence ``loss``).
    """
    if graph.consumed:
        raise GraphError("backward() called twice on the same graph without reset()")
    if loss.size != 1:
        raise ShapeError("backward() needs a scalar loss", loss.shape)
    graph.consumed = True
    leaves = graph.leaves()
    adj: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = adj.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.adjoint(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in adj:
                adj[key] = adj[key] + gi
            else:
                adj[key] = gi
    for leaf in leaves:
        g = adj.get(id(leaf))
        if g is None:
            g = np.zeros_like(leaf.data)
        leaf.grad = g.astype(leaf.dtype, copy=False) if leaf.grad is None else leaf.grad + g


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operands must have identical shapes", a.shape, b.shape)


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _track("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _track("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product."""
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _track("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


mul_hadamard = mul


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _track("scale", a.data * c, (a,), lambda g: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _track("add_scalar", a.data + a.dtype.type(c), (a,), lambda g: (g,))


def tensor_sum(a: Tensor) -> Tensor:
    shape = a.shape
    return _track("sum", np.asarray(a.data.sum(), dtype=a.dtype), (a,),
                  lambda g: (np.broadcast_to(g, shape).copy(),))


def sigmoid(t: Tensor) -> Tensor:
    x = t.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(t.dtype, copy=False)
    return _track("sigmoid", y, (t,), lambda g: (g * y * (1 - y),))


def tanh_act(t: Tensor) -> Tensor:
    y = np.tanh(t.data)
    return _track("tanh", y, (t,), lambda g: (g * (1 - y * y),))


def relu(t: Tensor) -> Tensor:
    mask = t.data > 0
    return _track("relu", t.data * mask, (t,), lambda g: (g * mask,))


# ---------------------------------------------------------------- structural

def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)
        ):
            raise ShapeError(f"concat: extents must agree except on axis {axis}", ref, t.shape)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def adjoint(g):
        return [np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:])]

    return _track("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, adjoint)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack ``a`` then ``b`` along the channel axis."""
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeError("concat_channels expects NCHW tensors", a.shape, b.shape)
    return concat([a, b], axis=1)


def slice_axis(t: Tensor, start: int, stop: int, axis: int = 1) -> Tensor:
    index = [slice(None)] * t.data.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    shape, dtype = t.shape, t.dtype

    def adjoint(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g
        return (full,)

    return _track("slice", np.ascontiguousarray(t.data[index]), (t,), adjoint)


def reshape(t: Tensor, shape) -> Tensor:
    old = t.shape
    return _track("reshape", t.data.reshape(shape), (t,), lambda g: (g.reshape(old),))


# ---------------------------------------------------------------- convolution

def _im2col(x: np.ndarray, kh: int, kw: int, pad: int) -> tuple[np.ndarray, int, int]:
    """``[N,C,H,W]`` -> ``[N, C*kh*kw, Ho*Wo]`` patch matrix."""
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))  # n, c, ho, wo, kh, kw
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho * wo)
    return cols, ho, wo


def conv2d(input: Tensor, kernel: Tensor, bias: Tensor | None = None, padding: int | None = None) -> Tensor:
    """2-D cross-correlation, stride 1.

    ``padding=None`` selects "same" padding ``(k - 1) // 2`` (odd kernels only).
    """
    if input.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError("conv2d expects input [N,Cin,H,W] and kernel [Cout,Cin,kH,kW]",
                         input.shape, kernel.shape)
    n, cin, h, w = input.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels but kernel expects {kcin}",
                         input.shape, kernel.shape)
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("conv2d: kernel extents must be odd", kernel.shape)
    if bias is not None and bias.shape != (cout,):
        raise ShapeError("conv2d: bias must have shape [Cout]", bias.shape, kernel.shape)
    pad = (kh - 1) // 2 if padding is None else int(padding)

    cols, ho, wo = _im2col(input.data, kh, kw, pad)
    kmat = kernel.data.reshape(cout, -1)
    out = np.matmul(kmat, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(n, cout, ho, wo)

    def adjoint(g):
        g3 = g.reshape(n, cout, ho * wo)
        gk = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape)
        gcols = np.matmul(kmat.T, g3).reshape(n, cin, kh, kw, ho, wo)
        gx = np.zeros((n, cin, h + 2 * pad, w + 2 * pad), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gx[:, :, i:i + ho, j:j + wo] += gcols[:, :, i, j]
        if pad:
            gx = np.ascontiguousarray(gx[:, :, pad:pad + h, pad:pad + w])
        grads = [gx, gk]
        if bias is not None:
            grads.append(g3.sum(axis=(0, 2)))
        return grads

    inputs = (input, kernel) if bias is None else (input, kernel, bias)
    return _track("conv2d", out, inputs, adjoint)


# ---------------------------------------------------------------- resampling

def maxpool2(t: Tensor) -> Tensor:
    """2x2 max pooling, stride 2. Gradient goes to the first maximum in raster order."""
    n, c, h, w = t.shape
    if h % 2 or w % 2:
        raise ShapeError("maxpool2 needs even spatial extents", t.shape)
    blocks = t.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1)  # argmax returns the first occurrence on ties
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def adjoint(g):
        gb = np.zeros((n, c, h // 2, w // 2, 4), dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gx = gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return _track("maxpool2", np.ascontiguousarray(out), (t,), adjoint)


def upsample2(t: Tensor) -> Tensor:
    """Nearest-neighbour x2 upsampling."""
    n, c, h, w = t.shape
    out = np.repeat(np.repeat(t.data, 2, axis=2), 2, axis=3)
    return _track("upsample2", out, (t,),
                  lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),))


# ---------------------------------------------------------------- loss

def softmax(logits: np.ndarray | Tensor, axis: int = 1) -> np.ndarray:
    """Channel softmax on raw arrays (not recorded on the tape)."""
    x = logits.data if isinstance(logits, Tensor) else logits
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax_cross_entropy(logits: Tensor, target: Tensor | np.ndarray,
                          pixel_weights: Tensor | np.ndarray | None = None) -> Tensor:
    """Weighted mean pixel cross-entropy between softmax(logits) and one-hot ``target``.

    The weighted sum is divided by the sum of ``pixel_weights`` ([N,1,H,W]);
    ``None`` means unit weights.
    """
    x = logits.data
    tgt = target.data if isinstance(target, Tensor) else np.asarray(target)
    if tgt.shape != x.shape:
        raise ShapeError("softmax_cross_entropy: target must match logits", x.shape, tgt.shape)
    n, c, h, w = x.shape
    if pixel_weights is None:
        wts = np.ones((n, 1, h, w), dtype=x.dtype)
    else:
        wts = pixel_weights.data if isinstance(pixel_weights, Tensor) else np.asarray(pixel_weights)
        if wts.shape != (n, 1, h, w):
            raise ShapeError("pixel_weights must be [N,1,H,W]", wts.shape, x.shape)
        if np.any(wts < 0):
            raise DegenerateError("pixel weights must be non-negative")
    wsum = float(wts.sum(dtype=np.float64))
    if wsum <= 0:
        raise DegenerateError("sum of pixel weights is zero (degenerate batch)")
    shifted = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    nll = -(tgt * logp).sum(axis=1, keepdims=True)
    loss = np.asarray((wts * nll).sum(dtype=np.float64) / wsum, dtype=x.dtype)

    def adjoint(g):
        p = np.exp(logp)
        d = (p * tgt.sum(axis=1, keepdims=True) - tgt) * (wts / wsum)
        return ((g * d).astype(x.dtype, copy=False),)

    return _track("softmax_cross_entropy", loss, (logits,), adjoint)


# ---------------------------------------------------------------- gradient check

def finite_difference_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-4) -> float:
    """Max over elements of ``|analytic - central difference| / max(1, |analytic|)``.

    ``f`` maps a tensor to a scalar tensor; it is evaluated in the dtype of ``x``.
    """
    probe = Tensor(x.data.copy(), requires_grad=True)
    with Graph() as g:
        out = f(probe)
    backward(out, g)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(probe.data)

    base = x.data.copy()
    flat = base.reshape(-1)
    numeric = np.empty(flat.size, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(Tensor(base, dtype=base.dtype)).data)
        flat[i] = orig - eps
        fm = float(f(Tensor(base, dtype=base.dtype)).data)
        flat[i] = orig
        numeric[i] = (fp - fm) / (2 * eps)
    a = analytic.reshape(-1).astype(np.float64)
    return float(np.max(np.abs(a - numeric) / np.maximum(1.0, np.abs(a)))) if a.size else 0.0


# ---------------------------------------------------------------- optimiser

@dataclass
class AdamState:
    """First/second moment buffers keyed by parameter position."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def fresh(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params: Sequence[Tensor], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps_hat: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update, in place, using each parameter's ``grad``."""
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if len(state.m) != len(params):
        raise ShapeError("Adam state does not match parameter list", (len(state.m),), (len(params),))
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for p, m, v in zip(params, state.m, state.v):
        if m.shape != p.shape:
            raise ShapeError("Adam moment shape mismatch", m.shape, p.shape)
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * (g * g)
        mhat = m / c1
        vhat = v / c2
        p.data -= (lr * mhat / (np.sqrt(vhat) + eps_hat)).astype(p.dtype, copy=False)
    return state


def step_decay_lr(iteration: int, total: int, base_lr: float = 1e-3,
                  decay_fraction: float = 0.25, factor: float = 0.1) -> float:
    """Learning rate at ``iteration`` (0-based): ``base_lr`` then ``base_lr*factor``."""
    return base_lr * factor if iteration >= int(round(decay_fraction * total)) else base_lr


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype=DEFAULT_DTYPE) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)
