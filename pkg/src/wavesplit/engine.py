"""A small reverse-mode autodiff engine on float64 numpy arrays.

Only what the separator/localizer networks need: elementwise arithmetic,
reductions, slicing, and the seven layer kinds (conv1d, tconv1d, conv2d,
linear, layernorm, relu, maxpool1d), plus Adam.

Graphs are recorded only when at least one operand has ``requires_grad``;
inference on frozen inputs builds no graph.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor", "Parameter", "LayerSpec", "ShapeError", "GraphError", "MissingGradientError",
    "forward", "init_layer", "no_grad", "adam_step", "zero_grad",
    "conv1d", "conv_transpose1d", "conv2d", "linear", "layer_norm", "relu", "max_pool1d",
    "cat", "stack", "minimum", "tsum", "tmean", "tmax", "tsqrt",
]

LAYER_KINDS = ("conv1d", "tconv1d", "conv2d", "linear", "layernorm", "relu", "maxpool1d")


class ShapeError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


class MissingGradientError(RuntimeError):
    pass


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        """Backpropagate from this scalar into every tensor that requires grad.

        Leaves accumulate into ``.grad``; intermediate nodes are released.
        """
        if self.data.size != 1:
            raise GraphError(f"backward needs a scalar, got shape {self.shape}")
        if not self.requires_grad:
            raise GraphError("no recorded graph: run a forward pass on tensors that require grad first")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        for node in order:
            if node._parents:
                node.grad = None
                node._parents = ()
                node._backward = None

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable[[np.ndarray], None]) -> Tensor:
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward)
    return Tensor(data)


# elementwise / structural ops ---------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)

    def back(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), back)


def neg(a: Tensor) -> Tensor:
    def back(g):
        a._accumulate(-g)

    return _make(-a.data, (a,), back)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)

    def back(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), back)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data / b.data

    def back(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), back)


def power(a: Tensor, exponent: float) -> Tensor:
    def back(g):
        a._accumulate(g * exponent * a.data ** (exponent - 1))

    return _make(a.data ** exponent, (a,), back)


def tsqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def back(g):
        a._accumulate(g * 0.5 / out)

    return _make(out, (a,), back)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), back)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def tmax(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Max along one axis; the gradient goes to the first maximizer."""
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(idx, axis), g, axis)
        a._accumulate(full)

    return _make(out if keepdims else np.squeeze(out, axis), (a,), back)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise minimum; on ties the gradient goes to ``a``."""
    a, b = _wrap(a), _wrap(b)
    pick_a = a.data <= b.data

    def back(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(np.where(pick_a, g, 0.0), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.where(pick_a, 0.0, g), b.shape))

    return _make(np.where(pick_a, a.data, b.data), (a, b), back)


def reshape(a: Tensor, shape) -> Tensor:
    def back(g):
        a._accumulate(g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), back)


def getitem(a: Tensor, index) -> Tensor:
    parts = index if isinstance(index, tuple) else (index,)
    fancy = any(isinstance(i, (list, np.ndarray)) for i in parts)

    def back(g):
        full = np.zeros_like(a.data)
        if fancy:
            np.add.at(full, index, g)
        else:
            full[index] += g
        a._accumulate(full)

    return _make(a.data[index], (a,), back)


def cat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, back)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = []
    for t in tensors:
        t = _wrap(t)
        shape = list(t.shape)
        shape.insert(axis if axis >= 0 else t.ndim + 1 + axis, 1)
        parts.append(reshape(t, tuple(shape)))
    return cat(parts, axis)


# layer primitives ---------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def back(g):
        x._accumulate(g * mask)

    return _make(np.where(mask, x.data, 0.0), (x,), back)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` of shape (out, in)."""
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear expects (batch, {weight.shape[1]}), got {x.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        if x.requires_grad:
            x._accumulate(g @ weight.data)
        if weight.requires_grad:
            weight._accumulate(g.T @ x.data)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=0))

    return _make(out, parents, back)


def conv_output_size(length: int, kernel: int, stride: int, padding: int) -> int:
    return (length + 2 * padding - kernel) // stride + 1


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation over the last axis; ``weight`` is (out, in, kernel)."""
    if x.ndim != 3 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv1d expects (batch, {weight.shape[1]}, L), got {x.shape}")
    B, C, L = x.shape
    O, _, K = weight.shape
    Lo = conv_output_size(L, K, stride, padding)
    if Lo < 1:
        raise ShapeError(f"conv1d input length {L} too short for kernel {K}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding)))
    win = sliding_window_view(xp, K, axis=2)[:, :, : stride * (Lo - 1) + 1 : stride]
    out = np.tensordot(win, weight.data, axes=([1, 3], [1, 2])).transpose(0, 2, 1)
    if bias is not None:
        out = out + bias.data[None, :, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        if weight.requires_grad:
            weight._accumulate(np.tensordot(g, win, axes=([0, 2], [0, 2])))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2)))
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for k in range(K):
                dxp[:, :, k : k + stride * (Lo - 1) + 1 : stride] += np.einsum("bol,oc->bcl", g, weight.data[:, :, k])
            x._accumulate(dxp[:, :, padding : padding + L])

    return _make(np.ascontiguousarray(out), parents, back)


def conv_transpose1d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    output_padding: int = 0,
) -> Tensor:
    """Transposed 1D convolution; ``weight`` is (in, out, kernel).

    Output length is ``(L - 1) * stride - 2 * padding + kernel + output_padding``.
    """
    if x.ndim != 3 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"tconv1d expects (batch, {weight.shape[0]}, L), got {x.shape}")
    B, C, L = x.shape
    _, O, K = weight.shape
    Lout = (L - 1) * stride - 2 * padding + K + output_padding
    if Lout < 1:
        raise ShapeError("tconv1d output would be empty")
    full_len = max((L - 1) * stride + K, padding + Lout)
    span = stride * (L - 1) + 1
    full = np.zeros((B, O, full_len))
    for k in range(K):
        full[:, :, k : k + span : stride] += np.einsum("bcl,co->bol", x.data, weight.data[:, :, k])
    out = full[:, :, padding : padding + Lout]
    if bias is not None:
        out = out + bias.data[None, :, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        gf = np.zeros((B, O, full_len))
        gf[:, :, padding : padding + Lout] = g
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2)))
        if weight.requires_grad:
            dw = np.empty_like(weight.data)
            for k in range(K):
                dw[:, :, k] = np.einsum("bcl,bol->co", x.data, gf[:, :, k : k + span : stride])
            weight._accumulate(dw)
        if x.requires_grad:
            dx = np.zeros_like(x.data)
            for k in range(K):
                dx += np.einsum("bol,co->bcl", gf[:, :, k : k + span : stride], weight.data[:, :, k])
            x._accumulate(dx)

    return _make(np.ascontiguousarray(out), parents, back)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation; ``weight`` is (out, in, kh, kw)."""
    if x.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d expects (batch, {weight.shape[1]}, H, W), got {x.shape}")
    B, C, H, W = x.shape
    O, _, KH, KW = weight.shape
    Ho = conv_output_size(H, KH, stride, padding)
    Wo = conv_output_size(W, KW, stride, padding)
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d input {H}x{W} too small for kernel {KH}x{KW}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (KH, KW), axis=(2, 3))
    win = win[:, :, : stride * (Ho - 1) + 1 : stride, : stride * (Wo - 1) + 1 : stride]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, C * KH * KW)
    wmat = weight.data.reshape(O, C * KH * KW)
    out = (cols @ wmat.T).reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        gm = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
        if weight.requires_grad:
            weight._accumulate((gm.T @ cols).reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dcols = (gm @ wmat).reshape(B, Ho, Wo, C, KH, KW)
            dxp = np.zeros_like(xp)
            for i in range(KH):
                for j in range(KW):
                    dxp[:, :, i : i + stride * (Ho - 1) + 1 : stride, j : j + stride * (Wo - 1) + 1 : stride] += (
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            x._accumulate(dxp[:, :, padding : padding + H, padding : padding + W])

    return _make(np.ascontiguousarray(out), parents, back)


def layer_norm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Normalize each sample over all non-batch axes, then apply an elementwise affine map."""
    axes = tuple(range(1, x.ndim))
    n = int(np.prod(x.shape[1:]))
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat
    if gain is not None:
        out = out * gain.data
    if bias is not None:
        out = out + bias.data
    parents = tuple(t for t in (x, gain, bias) if t is not None)

    def back(g):
        if gain is not None and gain.requires_grad:
            gain._accumulate((g * xhat).sum(axis=0))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=0))
        if x.requires_grad:
            dxhat = g * gain.data if gain is not None else g
            s1 = dxhat.sum(axis=axes, keepdims=True)
            s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
            x._accumulate(inv / n * (n * dxhat - s1 - xhat * s2))

    return _make(out, parents, back)


def max_pool1d(x: Tensor, kernel: int = 2, stride: int = 2) -> Tensor:
    if x.ndim != 3:
        raise ShapeError(f"maxpool1d expects (batch, C, L), got {x.shape}")
    L = x.shape[2]
    Lo = (L - kernel) // stride + 1
    if Lo < 1:
        raise ShapeError(f"maxpool1d input length {L} shorter than kernel {kernel}")
    win = sliding_window_view(x.data, kernel, axis=2)[:, :, : stride * (Lo - 1) + 1 : stride]
    idx = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, idx[..., None], -1)[..., 0]

    def back(g):
        dx = np.zeros_like(x.data)
        for k in range(kernel):
            dx[:, :, k : k + stride * (Lo - 1) + 1 : stride] += np.where(idx == k, g, 0.0)
        x._accumulate(dx)

    return _make(out, (x,), back)


# layers and parameters ----------------------------------------------------

@dataclass
class Parameter:
    name: str
    tensor: Tensor
    adam_m: np.ndarray = None
    adam_v: np.ndarray = None
    step_count: int = 0

    def __post_init__(self):
        self.tensor.requires_grad = True
        if self.adam_m is None:
            self.adam_m = np.zeros_like(self.tensor.data)
        if self.adam_v is None:
            self.adam_v = np.zeros_like(self.tensor.data)

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> np.ndarray | None:
        return self.tensor.grad


@dataclass(frozen=True)
class LayerSpec:
    """One layer.  ``features`` is the normalized shape for ``layernorm``."""

    kind: str
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    output_padding: int = 0
    features: tuple = ()
    bias: bool = True

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("conv1d", "tconv1d", "conv2d", "linear"):
            if self.in_channels < 1 or self.out_channels < 1:
                raise ValueError(f"{self.kind}: channel counts must be positive")
        if self.kind in ("conv1d", "tconv1d", "conv2d", "maxpool1d"):
            if self.kernel < 1 or self.stride < 1:
                raise ValueError(f"{self.kind}: kernel and stride must be positive")
            if not 0 <= self.padding < self.kernel:
                raise ValueError(f"{self.kind}: need 0 <= padding < kernel")
        if self.kind == "layernorm" and (not self.features or min(self.features) < 1):
            raise ValueError("layernorm needs a positive feature shape")


def init_layer(layer: LayerSpec, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Kaiming-uniform (fan-in, ReLU gain) weights; biases ~ U(+-1/sqrt(fan_in)); layernorm gain 1, bias 0."""
    kind = layer.kind
    if kind in ("relu", "maxpool1d"):
        return {}
    if kind == "layernorm":
        return {"gain": np.ones(layer.features), "bias": np.zeros(layer.features)}
    if kind == "linear":
        shape = (layer.out_channels, layer.in_channels)
        fan_in = layer.in_channels
    elif kind == "conv1d":
        shape = (layer.out_channels, layer.in_channels, layer.kernel)
        fan_in = layer.in_channels * layer.kernel
    elif kind == "tconv1d":
        shape = (layer.in_channels, layer.out_channels, layer.kernel)
        fan_in = layer.in_channels * layer.kernel
    else:
        shape = (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel)
        fan_in = layer.in_channels * layer.kernel * layer.kernel
    bound = math.sqrt(6.0 / fan_in)
    out = {"weight": rng.uniform(-bound, bound, size=shape)}
    if layer.bias:
        b = 1.0 / math.sqrt(fan_in)
        out["bias"] = rng.uniform(-b, b, size=layer.out_channels)
    return out


def forward(layer: LayerSpec, params: Mapping[str, Tensor], x: Tensor) -> Tensor:
    """Apply one layer to ``x`` using the tensors in ``params`` (keys ``weight``/``bias``/``gain``)."""
    kind = layer.kind
    w = params.get("weight")
    b = params.get("bias")
    if kind == "relu":
        return relu(x)
    if kind == "maxpool1d":
        return max_pool1d(x, layer.kernel, layer.stride)
    if kind == "layernorm":
        if tuple(x.shape[1:]) != tuple(layer.features):
            raise ShapeError(f"layernorm over {layer.features}, got sample shape {x.shape[1:]}")
        return layer_norm(x, params.get("gain"), b)
    if kind == "linear":
        return linear(x, w, b)
    if kind == "conv1d":
        return conv1d(x, w, b, layer.stride, layer.padding)
    if kind == "tconv1d":
        return conv_transpose1d(x, w, b, layer.stride, layer.padding, layer.output_padding)
    return conv2d(x, w, b, layer.stride, layer.padding)


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.tensor.grad = None


def adam_step(params: Iterable[Parameter], lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place."""
    params = list(params)
    for p in params:
        if p.tensor.grad is None:
            raise MissingGradientError(f"parameter {p.name!r} has no gradient")
    for p in params:
        g = p.tensor.grad
        p.step_count += 1
        t = p.step_count
        p.adam_m *= beta1
        p.adam_m += (1.0 - beta1) * g
        p.adam_v *= beta2
        p.adam_v += (1.0 - beta2) * g * g
        m_hat = p.adam_m / (1.0 - beta1 ** t)
        v_hat = p.adam_v / (1.0 - beta2 ** t)
        p.tensor.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
