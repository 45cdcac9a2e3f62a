"""Dense tensors with tape-based reverse-mode differentiation.

Only the handful of primitives the IMPACTX sub-networks need are provided:
dense layers, 3x3 same-padded convolutions, 2x2 max pooling, nearest
neighbour upsampling, relu/sigmoid, softmax, cross entropy and mean squared
error, plus the glue (reshape, concat, add, scale) to combine them.

Operations only record onto a tape while one is active::

    with Tape() as tape:
        loss = cross_entropy(dense(x, w, b), labels)
    backward(loss)

Outside a tape every op is a plain numpy forward pass, which is what the
explainer and evaluation code rely on for cheap batched inference.
"""
from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import ConfigError, DimensionError, LabelError, StaleTapeError

DEFAULT_DTYPE = np.float32

_uid = itertools.count()
_tape_stack: list["Tape"] = []


def make_rng(seed: int) -> np.random.Generator:
    """Seeded generator; PCG64 gives identical streams on every platform."""
    return np.random.Generator(np.random.PCG64(int(seed)))


class Tensor:
    __slots__ = ("data", "requires_grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"{type(self).__name__}(shape={self.shape}, dtype={self.data.dtype})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("only scalar multiplication is supported")
        return scale(self, float(other))

    __rmul__ = __mul__

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def sum(self) -> "Tensor":
        return total(self)


class Parameter(Tensor):
    """Trainable tensor with an accumulated gradient buffer."""

    __slots__ = ("grad", "uid")

    def __init__(self, data, requires_grad: bool = True):
        super().__init__(data, requires_grad=requires_grad)
        self.grad = np.zeros_like(self.data)
        self.uid = next(_uid)

    def zero_grad(self) -> None:
        self.grad[...] = 0


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of primitive applications, replayed once in reverse."""

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], rule: Callable) -> None:
        if self.consumed:
            raise StaleTapeError("cannot record onto a tape that was already replayed")
        out._tape = self
        self.records.append((out, inputs, rule))

    def backward(self, loss: Tensor) -> None:
        if self.consumed:
            raise StaleTapeError("backward already ran on this tape; re-run the forward pass")
        if loss.data.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        self.consumed = True
        grads = {id(loss): np.ones_like(loss.data)}
        for out, inputs, rule in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, rule(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if isinstance(inp, Parameter):
                    inp.grad += gi.astype(inp.grad.dtype, copy=False)
                elif id(inp) in grads:
                    grads[id(inp)] = grads[id(inp)] + gi
                else:
                    grads[id(inp)] = gi
        self.records.clear()


def backward(loss: Tensor) -> None:
    """Populate the gradient of every Parameter reachable from ``loss``."""
    if loss._tape is None:
        raise StaleTapeError("loss was not produced under a recording tape")
    loss._tape.backward(loss)


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], rule: Callable) -> Tensor:
    out = Tensor(data)
    if _tape_stack and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _tape_stack[-1].record(out, inputs, rule)
    return out


# -- glue ---------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    return _emit(a.data + b.data, (a, b), lambda g: (g, g))


def scale(a: Tensor, c: float) -> Tensor:
    return _emit(a.data * a.data.dtype.type(c), (a,), lambda g: (g * c,))


def total(a: Tensor) -> Tensor:
    return _emit(a.data.sum(), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _emit(a.data.reshape(tuple(shape)), (a,), lambda g: (g.reshape(old),))


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.shape[0], -1))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from exc
    return _emit(data, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


# -- layers -------------------------------------------------------------------


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise DimensionError(
            f"dense: input {x.shape} incompatible with weight {w.shape} / bias {b.shape}"
        )
    xd, wd = x.data, w.data

    def rule(g):
        gx = g @ wd.T if x.requires_grad else None
        return gx, xd.T @ g, g.sum(axis=0)

    return _emit(xd @ wd + b.data, (x, w, b), rule)


def conv2d(x: Tensor, k: Tensor, b: Tensor) -> Tensor:
    """3x3 cross-correlation, stride 1, zero padding 1."""
    x = as_tensor(x)
    if x.ndim != 4 or k.ndim != 4 or k.shape[2:] != (3, 3):
        raise DimensionError(f"conv2d: input {x.shape} / kernel {k.shape} must be NCHW / FC33")
    if x.shape[1] != k.shape[1] or b.shape != (k.shape[0],):
        raise DimensionError(
            f"conv2d: input channels {x.shape[1]} vs kernel {k.shape}, bias {b.shape}"
        )
    xd, kd = x.data, k.data
    cols = sliding_window_view(np.pad(xd, ((0, 0), (0, 0), (1, 1), (1, 1))), (3, 3), axis=(2, 3))
    # cols: (n, c, h, w, 3, 3)
    out = np.tensordot(cols, kd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out += b.data[None, :, None, None]

    def rule(g):
        gk = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        if not x.requires_grad:
            return None, gk, g.sum(axis=(0, 2, 3))
        gcols = sliding_window_view(np.pad(g, ((0, 0), (0, 0), (1, 1), (1, 1))), (3, 3), axis=(2, 3))
        gx = np.tensordot(gcols, kd[:, :, ::-1, ::-1], axes=([1, 4, 5], [0, 2, 3]))
        return gx.transpose(0, 3, 1, 2), gk, g.sum(axis=(0, 2, 3))

    return _emit(np.ascontiguousarray(out), (x, k, b), rule)


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 non-overlapping max pooling; ties route gradient to the first cell."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d: expected NCHW, got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2d: spatial size {h}x{w} must be even")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def rule(g):
        gw = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gw = gw.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gw.reshape(n, c, h, w),)

    return _emit(out, (x,), rule)


def upsample2x(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"upsample2x: expected NCHW, got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def rule(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _emit(out, (x,), rule)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _emit(np.where(mask, x.data, 0).astype(x.data.dtype), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    s = expit(x.data)
    if s.dtype.kind == "f":
        # keep the open interval under saturation: expit rounds to 0 or 1 past about |x| > 17 in float32
        info = np.finfo(s.dtype)
        s = np.clip(s, info.tiny, 1 - info.epsneg)
    return _emit(s, (x,), lambda g: (g * s * (1 - s),))


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ConfigError(f"unknown activation {kind!r}")


def softmax_array(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2 or x.shape[1] < 1:
        raise DimensionError(f"softmax: expected (n, K), got {x.shape}")
    s = softmax_array(x.data)

    def rule(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _emit(s, (x,), rule)


def cross_entropy(logits: Tensor, labels: Iterable[int]) -> Tensor:
    """Batch mean of -log softmax(logits)[label], via a fused log-sum-exp."""
    logits = as_tensor(logits)
    labels = np.asarray(list(labels) if not isinstance(labels, np.ndarray) else labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n, k = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise LabelError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    labels = labels.astype(np.int64)
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = (lse - shifted[rows, labels]).mean()

    def rule(g):
        grad = softmax_array(z)
        grad[rows, labels] -= 1
        return (grad * (g / n),)

    return _emit(np.asarray(loss, dtype=z.dtype), (logits,), rule)


def mse(a: Tensor, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mse: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    n = diff.size

    def rule(g):
        ga = diff * (2.0 * g / n)
        return ga, -ga

    return _emit(np.asarray((diff * diff).mean(), dtype=a.data.dtype), (a, b), rule)


# -- initialisation and optimisers --------------------------------------------


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Parameter:
    bound = np.sqrt(6.0 / fan_in)
    return Parameter(rng.uniform(-bound, bound, size=shape).astype(DEFAULT_DTYPE))


def zeros(shape: tuple[int, ...]) -> Parameter:
    return Parameter(np.zeros(shape, dtype=DEFAULT_DTYPE))


class SGD:
    def __init__(self, params: Sequence[Parameter], lr: float):
        if not lr > 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        for p in self.params:
            p.data -= p.data.dtype.type(self.lr) * p.grad


class Adam(SGD):
    def __init__(self, params: Sequence[Parameter], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        super().__init__(params, lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            m *= b1
            m += (1 - b1) * p.grad
            v *= b2
            v += (1 - b2) * p.grad * p.grad
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.data.dtype, copy=False)


def make_optimizer(kind: str, params: Sequence[Parameter], lr: float) -> SGD:
    if kind == "sgd":
        return SGD(params, lr)
    if kind == "adam":
        return Adam(params, lr)
    raise ConfigError(f"unknown optimizer {kind!r}")


def optimizer_step(params: Sequence[Parameter], lr: float, kind: str = "sgd") -> None:
    """One stateless update. Adam here is its bias-corrected first step."""
    make_optimizer(kind, params, lr).step()
