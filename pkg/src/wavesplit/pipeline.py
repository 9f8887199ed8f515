"""Two-stage decomposition: separate, localize each part, regress amplitudes, reconstruct."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import engine
from .acoustics import KLike, MicArray, PointSource, SingularityError, green_matrix
from .engine import Tensor
from .models import Network, ZeroInputError, pack_sfs_input, pack_ssl_batch, pack_ssl_input, unpack_sfs_output

EXCLUSION_RADIUS = 1e-6
COINCIDENT_ESTIMATES = "coincident-estimates"


class DegenerateGeometryError(ValueError):
    """The transfer matrix of the estimated positions is rank deficient."""


@dataclass
class Decomposition:
    sources: list[PointSource]
    separated: list[np.ndarray]
    flags: tuple[str, ...] = field(default_factory=tuple)

    @property
    def positions(self) -> np.ndarray:
        return np.array([s.position for s in self.sources]).reshape(-1, 3)

    @property
    def amplitudes(self) -> np.ndarray:
        return np.array([s.amplitude for s in self.sources], dtype=np.complex128)


def _mic_positions(mics) -> np.ndarray:
    return mics.positions if isinstance(mics, MicArray) else np.asarray(mics, dtype=np.float64)


def localize_single(u: np.ndarray, ssl: Network) -> np.ndarray:
    """Regress one source position from a single-source pressure vector."""
    with engine.no_grad():
        return ssl(Tensor(pack_ssl_input(u)[None])).data[0].copy()


def localize_batch(us: np.ndarray, ssl: Network, batch_size: int = 100) -> np.ndarray:
    us = np.asarray(us, dtype=np.complex128)
    out = []
    with engine.no_grad():
        for i in range(0, len(us), batch_size):
            out.append(ssl(Tensor(pack_ssl_batch(us[i : i + batch_size]))).data)
    return np.concatenate(out) if out else np.zeros((0, getattr(ssl, "out_features", 3)))


def estimate_amplitudes(p: np.ndarray, positions, mics, k: KLike, conjugate: bool = True) -> np.ndarray:
    """Complex source amplitudes given source positions.

    One source: centered least squares,
    ``sum((u - mean u) * conj(g - mean g)) / sum(|g - mean g|**2)``.
    ``conjugate=False`` evaluates the same expression without the conjugate
    and modulus, which is only a least-squares fit for real data.

    Several sources: minimum-norm least squares through the normal equations
    with a small Tikhonov term when they are badly conditioned.
    """
    p = np.asarray(p, dtype=np.complex128).ravel()
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    G = green_matrix(_mic_positions(mics), positions, k)
    S = positions.shape[0]
    if G.shape[0] < S:
        raise DegenerateGeometryError(f"{G.shape[0]} microphones cannot resolve {S} sources")
    if S == 1:
        g = G[:, 0]
        gc = g - g.mean()
        uc = p - p.mean()
        if conjugate:
            return np.array([np.sum(uc * gc.conj()) / np.sum(np.abs(gc) ** 2)])
        return np.array([np.sum(uc * gc) / np.sum(gc * gc)])
    if np.linalg.matrix_rank(G) < S:
        raise DegenerateGeometryError("estimated source positions give a rank-deficient transfer matrix")
    A = G.conj().T @ G
    b = G.conj().T @ p
    if np.linalg.cond(A) > 1e12:
        A = A + (1e-12 * np.trace(A).real / S) * np.eye(S)
    return np.linalg.solve(A, b)


def decompose(p: np.ndarray, S: int, sfs: Network | None, ssl: Network, mics, k: KLike,
              separated: Sequence[np.ndarray] | None = None) -> Decomposition:
    """Decompose a mic pressure vector into ``S`` point sources (S in {1, 2}).

    ``separated`` bypasses the separator with given per-source pressures.
    Amplitudes are always regressed on the recorded vector ``p``.
    """
    p = np.asarray(p, dtype=np.complex128).ravel()
    if S not in (1, 2):
        raise ValueError(f"unsupported source count {S}")
    if S == 1:
        parts = [p] if separated is None else [np.asarray(separated[0], dtype=np.complex128)]
    elif separated is not None:
        parts = [np.asarray(u, dtype=np.complex128) for u in separated]
    else:
        if sfs is None:
            raise ValueError("two-source decomposition needs separator weights")
        x, scale = pack_sfs_input(p)
        with engine.no_grad():
            y = sfs(Tensor(x[None])).data[0]
        parts = unpack_sfs_output(y, scale)
    if len(parts) != S:
        raise ValueError(f"expected {S} separated fields, got {len(parts)}")

    positions = []
    for u in parts:
        try:
            positions.append(localize_single(u, ssl))
        except ZeroInputError:
            # the separator may emit an exactly zero field; localize nothing better than the origin
            positions.append(np.zeros(3))
    return _with_amplitudes(p, np.array(positions), parts, mics, k)


def _with_amplitudes(p, positions, parts, mics, k) -> Decomposition:
    if len(positions) == 2 and np.linalg.norm(positions[0] - positions[1]) < EXCLUSION_RADIUS:
        # split the one-source fit between the two copies so the field is unchanged
        mid = positions.mean(axis=0)
        a = estimate_amplitudes(p, mid[None], mics, k)[0]
        sources = [PointSource(mid, a / 2), PointSource(mid, a / 2)]
        return Decomposition(sources, parts, (COINCIDENT_ESTIMATES,))
    amps = estimate_amplitudes(p, positions, mics, k)
    return Decomposition([PointSource(r, a) for r, a in zip(positions, amps)], parts)


def baseline_decompose(p: np.ndarray, baseline: Network, mics, k: KLike) -> Decomposition:
    """Two positions regressed jointly from the mixture covariance, then amplitudes."""
    p = np.asarray(p, dtype=np.complex128).ravel()
    with engine.no_grad():
        out = baseline(Tensor(pack_ssl_input(p)[None])).data[0]
    positions = out.reshape(-1, 3).copy()
    dec = _with_amplitudes(p, positions, [], mics, k)
    G = green_matrix(_mic_positions(mics), dec.positions, k)
    dec.separated = [G[:, s] * dec.amplitudes[s] for s in range(G.shape[1])]
    return dec


def reconstruct(sources: Sequence[PointSource], eval_points, k: KLike) -> np.ndarray:
    """Field of the point-source superposition at ``eval_points`` (n, 3)."""
    pts = np.asarray(eval_points, dtype=np.float64).reshape(-1, 3)
    if len(sources) == 0:
        return np.zeros(len(pts), dtype=np.complex128)
    pos = np.array([s.position for s in sources])
    amp = np.array([s.amplitude for s in sources], dtype=np.complex128)
    d = np.linalg.norm(pts[:, None, :] - pos[None, :, :], axis=-1)
    if d.size and d.min() < EXCLUSION_RADIUS:
        raise SingularityError("evaluation point within 1e-6 m of a source")
    return green_matrix(pts, pos, k) @ amp
