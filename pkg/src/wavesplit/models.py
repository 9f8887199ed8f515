"""Separator U-net, single-source localizer, two-source baseline, packing and losses."""

from __future__ import annotations

import itertools
from typing import Sequence

import numpy as np

from . import engine
from .engine import LayerSpec, Parameter, Tensor
from .engine import conv_output_size

SFS_WIDTHS = (32, 64, 128)
SSL_CONV_WIDTHS = (16, 32, 64, 128)
SSL_MLP_WIDTHS = (512, 256, 128)
# kernel, stride, padding, output padding; doubles the length exactly (see SfsNet)
TCONV = (4, 2, 1, 0)


class ZeroInputError(ValueError):
    """Normalization by the max modulus of an all-zero pressure vector."""


# packing ------------------------------------------------------------------

def pack_sfs_input(p: np.ndarray) -> tuple[np.ndarray, float]:
    """Max-modulus normalize a pressure vector and split it into (Re, Im) rows.

    Returns the ``(2, M)`` real array and the scale ``max |p_m|``.
    """
    p = np.asarray(p, dtype=np.complex128).ravel()
    scale = float(np.max(np.abs(p))) if p.size else 0.0
    if scale == 0.0:
        raise ZeroInputError("pressure vector is all zero")
    q = p / scale
    return np.stack([q.real, q.imag]), scale


def unpack_sfs_output(y: np.ndarray, scale: float) -> list[np.ndarray]:
    """Inverse of the packing for a ``(2S, M)`` separator output: S complex vectors times ``scale``."""
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 2 or y.shape[0] % 2:
        raise ValueError(f"separator output must be (2S, M), got {y.shape}")
    return [(y[2 * s] + 1j * y[2 * s + 1]) * scale for s in range(y.shape[0] // 2)]


COVARIANCE_QUANTUM = 2.0 ** -26


def _canonical(us: np.ndarray) -> np.ndarray:
    """Rotate each row so its largest-modulus entry is real positive, scale that
    entry to one, and snap to a 2**-26 grid.

    ``v v^H`` equals the covariance of the max-modulus-normalized vector; the
    snapping lets a global complex factor on the input cancel bitwise instead
    of to rounding error.
    """
    mag2 = us.real ** 2 + us.imag ** 2
    idx = np.argmax(mag2, axis=1)
    rows = np.arange(len(us))
    ref = us[rows, idx]
    peak2 = mag2[rows, idx]
    if np.any(peak2 == 0.0):
        raise ZeroInputError("pressure vector is all zero")
    v = us * (ref.conj() / peak2)[:, None]
    q = COVARIANCE_QUANTUM
    return np.round(v.real / q) * q + 1j * (np.round(v.imag / q) * q)


def pack_ssl_input(u: np.ndarray) -> np.ndarray:
    """Spatial covariance of the max-normalized vector as a ``(2, M, M)`` (Re, Im) array."""
    u = np.asarray(u, dtype=np.complex128).ravel()
    if u.size == 0:
        raise ZeroInputError("empty pressure vector")
    return pack_ssl_batch(u[None])[0]


def pack_ssl_batch(us: np.ndarray) -> np.ndarray:
    """Row-wise :func:`pack_ssl_input` for a (B, M) block, giving (B, 2, M, M)."""
    v = _canonical(np.asarray(us, dtype=np.complex128))
    cov = v[:, :, None] * v.conj()[:, None, :]
    return np.stack([cov.real, cov.imag], axis=1)


def covariance_tensor(x: Tensor, eps: float = 1e-300) -> Tensor:
    """Differentiable covariance of packed ``(B, 2, M)`` rows.

    Same quantity as :func:`pack_ssl_batch` up to its 2**-26 snapping.
    """
    a = x[:, 0, :]
    b = x[:, 1, :]
    peak2 = engine.tmax(a * a + b * b, axis=1, keepdims=True) + eps
    inv = 1.0 / engine.tsqrt(peak2)
    a = a * inv
    b = b * inv
    B, M = a.shape
    ai, aj = a.reshape(B, M, 1), a.reshape(B, 1, M)
    bi, bj = b.reshape(B, M, 1), b.reshape(B, 1, M)
    re = ai * aj + bi * bj
    im = bi * aj - ai * bj
    return engine.stack([re, im], axis=1)


# networks -----------------------------------------------------------------

class Network:
    """Ordered layers plus their named parameters.

    Parameters are keyed ``"<layer>.<role>"`` (role is ``weight``, ``bias``
    or ``gain``) and returned in construction order by :meth:`parameters`.
    """

    kind = "network"

    def __init__(self, descriptor: dict, seed: int = 0):
        self.descriptor = dict(descriptor)
        self.layers: dict[str, LayerSpec] = {}
        self._params: dict[str, Parameter] = {}
        self._rng = np.random.default_rng(seed)
        self._build()
        del self._rng

    def _add(self, name: str, spec: LayerSpec) -> str:
        self.layers[name] = spec
        for role, value in engine.init_layer(spec, self._rng).items():
            full = f"{name}.{role}"
            self._params[full] = Parameter(full, Tensor(value))
        return name

    def _unit(self, name: str, conv: LayerSpec, features: tuple) -> list[str]:
        return [
            self._add(f"{name}.conv", conv),
            self._add(f"{name}.norm", LayerSpec("layernorm", features=features)),
            self._add(f"{name}.act", LayerSpec("relu")),
        ]

    def _apply(self, names: Sequence[str], x: Tensor) -> Tensor:
        for name in names:
            spec = self.layers[name]
            tensors = {
                role: self._params[f"{name}.{role}"].tensor
                for role in ("weight", "bias", "gain")
                if f"{name}.{role}" in self._params
            }
            x = engine.forward(spec, tensors, x)
        return x

    def _build(self) -> None:
        raise NotImplementedError

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def __call__(self, x) -> Tensor:
        return self.forward(x if isinstance(x, Tensor) else Tensor(x))

    def parameters(self) -> list[Parameter]:
        return list(self._params.values())

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        return [(name, p.tensor.data) for name, p in self._params.items()]

    def load_arrays(self, arrays: Sequence[tuple[str, np.ndarray]]) -> None:
        """Replace parameter values in place; names and shapes must match exactly."""
        arrays = list(arrays)
        if [n for n, _ in arrays] != list(self._params):
            raise ValueError("parameter names do not match the architecture")
        for name, value in arrays:
            p = self._params[name]
            value = np.asarray(value, dtype=np.float64)
            if value.shape != p.tensor.shape:
                raise ValueError(f"{name}: shape {value.shape} does not match {p.tensor.shape}")
            p.tensor.data = value.copy()

    def copy_weights_from(self, other: "Network") -> None:
        self.load_arrays(other.named_arrays())

    def reset_optimizer(self) -> None:
        for p in self._params.values():
            p.adam_m[...] = 0.0
            p.adam_v[...] = 0.0
            p.step_count = 0

    @property
    def M(self) -> int:
        return int(self.descriptor["M"])


class SfsNet(Network):
    """1D U-net mapping packed mixtures (B, 2, M) to packed separated fields (B, 2S, M).

    Two stride-2 max-pools take the length M -> M/2 -> M/4 and two transposed
    convolutions bring it back.  The transposed convolution defaults to
    kernel 4, stride 2, padding 1, which doubles the length exactly so the
    skip concatenations line up; kernel 3, stride 2, padding 2,
    output-padding 2 would give 2L - 1.
    """

    kind = "sfs"

    def _build(self):
        M = self.M
        S = int(self.descriptor["S"])
        w1, w2, w3 = self.descriptor["widths"]
        tk, ts, tp, top = self.descriptor.get("tconv", TCONV)
        if M % 4:
            raise ValueError(f"separator needs M divisible by 4, got {M}")
        L1, L2, L3 = M, M // 2, M // 4

        def conv(cin, cout):
            return LayerSpec("conv1d", cin, cout, kernel=5, stride=1, padding=2)

        def tconv(cin, cout):
            return LayerSpec("tconv1d", cin, cout, kernel=tk, stride=ts, padding=tp, output_padding=top)

        u = self._unit
        self.enc1 = u("enc1a", conv(2, w1), (w1, L1)) + u("enc1b", conv(w1, w1), (w1, L1))
        self.pool1 = [self._add("pool1", LayerSpec("maxpool1d", kernel=2, stride=2))]
        self.enc2 = u("enc2a", conv(w1, w2), (w2, L2)) + u("enc2b", conv(w2, w2), (w2, L2))
        self.pool2 = [self._add("pool2", LayerSpec("maxpool1d", kernel=2, stride=2))]
        self.bottom = u("enc3a", conv(w2, w3), (w3, L3)) + u("enc3b", conv(w3, w3), (w3, L3))
        self.up2 = [self._add("up2", tconv(w3, w2))]
        self.dec2 = u("dec2a", conv(2 * w2, w2), (w2, L2)) + u("dec2b", conv(w2, w2), (w2, L2))
        self.up1 = [self._add("up1", tconv(w2, w1))]
        self.dec1 = u("dec1a", conv(2 * w1, w1), (w1, L1)) + u("dec1b", conv(w1, w1), (w1, L1))
        self.head = [self._add("head", conv(w1, 2 * S))]

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 3 or x.shape[1:] != (2, self.M):
            raise engine.ShapeError(f"separator expects (batch, 2, {self.M}), got {x.shape}")
        s1 = self._apply(self.enc1, x)
        s2 = self._apply(self.enc2, self._apply(self.pool1, s1))
        h = self._apply(self.bottom, self._apply(self.pool2, s2))
        h = self._apply(self.up2, h)
        if h.shape[2] != s2.shape[2]:
            raise engine.ShapeError(f"upsampled length {h.shape[2]} cannot join skip of length {s2.shape[2]}")
        h = self._apply(self.dec2, engine.cat([h, s2], axis=1))
        h = self._apply(self.up1, h)
        if h.shape[2] != s1.shape[2]:
            raise engine.ShapeError(f"upsampled length {h.shape[2]} cannot join skip of length {s1.shape[2]}")
        h = self._apply(self.dec1, engine.cat([h, s1], axis=1))
        return self._apply(self.head, h)


class SslNet(Network):
    """Covariance (B, 2, M, M) -> position (B, out): four stride-2 conv units then an MLP."""

    kind = "ssl"
    out_features = 3

    def _build(self):
        M = self.M
        convs = self.descriptor["widths"]
        mlp = self.descriptor["mlp_widths"]
        size = M
        cin = 2
        self.features = []
        for i, c in enumerate(convs):
            size = conv_output_size(size, 5, 2, 1)
            if size < 1:
                raise ValueError(f"M={M} is too small for {len(convs)} stride-2 convolutions")
            spec = LayerSpec("conv2d", cin, c, kernel=5, stride=2, padding=1)
            self.features += self._unit(f"conv{i + 1}", spec, (c, size, size))
            cin = c
        self.flat = cin * size * size
        self.mlp = []
        fin = self.flat
        for i, f in enumerate(mlp):
            self.mlp += [
                self._add(f"fc{i + 1}", LayerSpec("linear", fin, f)),
                self._add(f"fc{i + 1}.norm", LayerSpec("layernorm", features=(f,))),
                self._add(f"fc{i + 1}.act", LayerSpec("relu")),
            ]
            fin = f
        self.mlp.append(self._add("out", LayerSpec("linear", fin, self.out_features)))

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1:] != (2, self.M, self.M):
            raise engine.ShapeError(f"localizer expects (batch, 2, {self.M}, {self.M}), got {x.shape}")
        h = self._apply(self.features, x)
        h = h.reshape(h.shape[0], self.flat)
        return self._apply(self.mlp, h)


class BaselineNet(SslNet):
    """The localizer with a six-wide head: two stacked positions."""

    kind = "baseline"
    out_features = 6


def build_sfs(M: int = 64, S: int = 2, widths: Sequence[int] = SFS_WIDTHS, seed: int = 0, tconv=TCONV, **meta) -> SfsNet:
    """Separator U-net for ``M`` mics and ``S`` sources (M divisible by 4)."""
    desc = {"kind": "sfs", "M": int(M), "S": int(S), "widths": list(widths), "tconv": list(tconv), **meta}
    return SfsNet(desc, seed)


def build_ssl(M: int = 64, widths: Sequence[int] = SSL_CONV_WIDTHS, mlp_widths: Sequence[int] = SSL_MLP_WIDTHS, seed: int = 0, **meta) -> SslNet:
    desc = {"kind": "ssl", "M": int(M), "S": 1, "widths": list(widths), "mlp_widths": list(mlp_widths), **meta}
    return SslNet(desc, seed)


def build_baseline(M: int = 64, widths: Sequence[int] = SSL_CONV_WIDTHS, mlp_widths: Sequence[int] = SSL_MLP_WIDTHS, seed: int = 0, **meta) -> BaselineNet:
    desc = {"kind": "baseline", "M": int(M), "S": 2, "widths": list(widths), "mlp_widths": list(mlp_widths), **meta}
    return BaselineNet(desc, seed)


def build_from_descriptor(descriptor: dict, seed: int = 0) -> Network:
    kinds = {"sfs": SfsNet, "ssl": SslNet, "baseline": BaselineNet}
    try:
        cls = kinds[descriptor["kind"]]
    except KeyError:
        raise ValueError(f"unknown network kind {descriptor.get('kind')!r}") from None
    return cls(descriptor, seed)


# losses -------------------------------------------------------------------

def ssl_loss_tensor(pred: Tensor, target: np.ndarray) -> Tensor:
    """Batch mean of one third of the squared position error."""
    d = pred - Tensor(np.asarray(target, dtype=np.float64).reshape(pred.shape))
    return (d * d).sum(axis=1).mean() * (1.0 / 3.0)


def _perm_min(costs: dict[tuple[int, int], Tensor], S: int) -> Tensor:
    best = None
    for perm in itertools.permutations(range(S)):
        total = costs[(0, perm[0])]
        for i in range(1, S):
            total = total + costs[(i, perm[i])]
        best = total if best is None else engine.minimum(best, total)
    return best


def sfs_loss_tensor(pred: Tensor, target: np.ndarray) -> Tensor:
    """Permutation-invariant MSE between packed separated fields, shape (B, 2S, M).

    ``MSE_ij`` is the mean over mics of ``|target_i - pred_j|**2``; the loss is
    ``(1/S) min_perm sum_i MSE_{i, perm(i)}``, averaged over the batch.  The
    gradient follows the minimizing assignment (ties go to the identity).
    """
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.shape[1] % 2:
        raise ValueError(f"shape mismatch: pred {pred.shape}, target {target.shape}")
    B, C, M = pred.shape
    S = C // 2
    costs = {}
    for i in range(S):
        t = Tensor(target[:, 2 * i : 2 * i + 2, :])
        for j in range(S):
            d = pred[:, 2 * j : 2 * j + 2, :] - t
            costs[(i, j)] = (d * d).sum(axis=(1, 2)) * (1.0 / M)
    return _perm_min(costs, S).mean() * (1.0 / S)


def base_loss_tensor(pred: Tensor, target: np.ndarray) -> Tensor:
    """Permutation-invariant position MSE for stacked positions, shape (B, 3S)."""
    target = np.asarray(target, dtype=np.float64).reshape(pred.shape)
    B, W = pred.shape
    S = W // 3
    costs = {}
    for i in range(S):
        t = Tensor(target[:, 3 * i : 3 * i + 3])
        for j in range(S):
            d = pred[:, 3 * j : 3 * j + 3] - t
            costs[(i, j)] = (d * d).sum(axis=1)
    return _perm_min(costs, S).mean() * (1.0 / (3 * S))


def loss_ssl(r_true, r_hat) -> float:
    r_true = np.asarray(r_true, dtype=np.float64).reshape(1, 3)
    return ssl_loss_tensor(Tensor(np.asarray(r_hat, dtype=np.float64).reshape(1, 3)), r_true).item()


def _pack_many(vectors) -> np.ndarray:
    rows = []
    for v in vectors:
        v = np.asarray(v, dtype=np.complex128).ravel()
        rows += [v.real, v.imag]
    return np.array(rows)[None]


def loss_sfs(targets, preds) -> float:
    """Permutation-invariant separation loss for lists of complex mic vectors."""
    t = _pack_many(targets)
    p = _pack_many(preds)
    if t.shape != p.shape:
        raise ValueError("targets and predictions must have the same count and length")
    return sfs_loss_tensor(Tensor(p), t).item()


def loss_base(r1, r2, r1_hat, r2_hat) -> float:
    target = np.concatenate([np.ravel(r1), np.ravel(r2)]).astype(np.float64)
    pred = np.concatenate([np.ravel(r1_hat), np.ravel(r2_hat)]).astype(np.float64)
    return base_loss_tensor(Tensor(pred[None]), target[None]).item()
