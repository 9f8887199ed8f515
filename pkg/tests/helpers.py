"""Shared oracles for the test suite: finite differences and per-layer check cases."""

from __future__ import annotations

import numpy as np

from wavesplit.engine import LayerSpec, Tensor, forward, init_layer

FD_STEP = 1e-5


def numeric_grad(f, x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central differences of the scalar ``f()`` with respect to ``x``, perturbed in place."""
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest absolute discrepancy relative to the largest gradient entry."""
    scale = max(float(np.max(np.abs(numeric))), float(np.max(np.abs(analytic))), 1e-12)
    return float(np.max(np.abs(analytic - numeric))) / scale


# (layer, input shape); five per kind, none larger than 2 x 4 x 16 elements per sample axis
GRADIENT_CASES: dict[str, list[tuple[LayerSpec, tuple]]] = {
    "conv1d": [
        (LayerSpec("conv1d", 3, 4, 5, 1, 2), (2, 3, 16)),
        (LayerSpec("conv1d", 2, 3, 3, 2, 1), (1, 2, 9)),
        (LayerSpec("conv1d", 4, 2, 4, 2, 1), (2, 4, 16)),
        (LayerSpec("conv1d", 1, 1, 1, 1, 0), (1, 1, 7)),
        (LayerSpec("conv1d", 2, 3, 5, 3, 0, bias=False), (2, 2, 11)),
    ],
    "tconv1d": [
        (LayerSpec("tconv1d", 4, 3, 4, 2, 1), (2, 4, 8)),
        (LayerSpec("tconv1d", 3, 2, 3, 2, 2, 1), (1, 3, 6)),
        (LayerSpec("tconv1d", 2, 4, 5, 1, 2), (2, 2, 7)),
        (LayerSpec("tconv1d", 1, 1, 2, 3, 0), (1, 1, 4)),
        (LayerSpec("tconv1d", 3, 2, 4, 2, 1, 1, bias=False), (2, 3, 8)),
    ],
    "conv2d": [
        (LayerSpec("conv2d", 2, 3, 5, 2, 1), (2, 2, 8, 8)),
        (LayerSpec("conv2d", 3, 2, 3, 1, 1), (1, 3, 7, 6)),
        (LayerSpec("conv2d", 1, 4, 5, 2, 0), (2, 1, 9, 9)),
        (LayerSpec("conv2d", 4, 2, 3, 3, 2), (1, 4, 6, 6)),
        (LayerSpec("conv2d", 2, 3, 1, 1, 0, bias=False), (2, 2, 5, 7)),
    ],
    "linear": [
        (LayerSpec("linear", 16, 4), (2, 16)),
        (LayerSpec("linear", 3, 5), (1, 3)),
        (LayerSpec("linear", 7, 1), (2, 7)),
        (LayerSpec("linear", 1, 1), (1, 1)),
        (LayerSpec("linear", 12, 6, bias=False), (2, 12)),
    ],
    "layernorm": [
        (LayerSpec("layernorm", features=(4, 16)), (2, 4, 16)),
        (LayerSpec("layernorm", features=(3,)), (1, 3)),
        (LayerSpec("layernorm", features=(2, 5)), (2, 2, 5)),
        (LayerSpec("layernorm", features=(4, 3, 3)), (2, 4, 3, 3)),
        (LayerSpec("layernorm", features=(1, 8)), (1, 1, 8)),
    ],
    "relu": [
        (LayerSpec("relu"), (2, 4, 16)),
        (LayerSpec("relu"), (1, 5)),
        (LayerSpec("relu"), (2, 3, 4, 4)),
        (LayerSpec("relu"), (1, 1, 9)),
        (LayerSpec("relu"), (2, 2, 7)),
    ],
    "maxpool1d": [
        (LayerSpec("maxpool1d", kernel=2, stride=2), (2, 4, 16)),
        (LayerSpec("maxpool1d", kernel=2, stride=2), (1, 3, 9)),
        (LayerSpec("maxpool1d", kernel=2, stride=2), (2, 1, 4)),
        (LayerSpec("maxpool1d", kernel=3, stride=1, padding=0), (1, 2, 7)),
        (LayerSpec("maxpool1d", kernel=2, stride=2), (2, 3, 2)),
    ],
}


def layer_gradient_error(layer: LayerSpec, shape: tuple, seed: int) -> float:
    """Worst relative error over the input and every parameter of one layer."""
    rng = np.random.default_rng(seed)
    # random affine for layernorm too, so gain and bias gradients are not trivial
    params = {k: Tensor(v + 0.3 * rng.normal(size=v.shape), requires_grad=True)
              for k, v in init_layer(layer, rng).items()}
    x = Tensor(rng.normal(size=shape), requires_grad=True)
    probe = rng.normal(size=forward(layer, params, x).shape)

    def loss_value() -> float:
        return float(np.sum(forward(layer, params, Tensor(x.data)).data * probe))

    out = forward(layer, params, x)
    (out * Tensor(probe)).sum().backward()
    worst = rel_error(x.grad, numeric_grad(loss_value, x.data))
    for t in params.values():
        worst = max(worst, rel_error(t.grad, numeric_grad(loss_value, t.data)))
    return worst
