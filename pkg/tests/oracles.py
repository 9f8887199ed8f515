"""Independent reference implementations used as test oracles."""

from __future__ import annotations

import itertools

import numpy as np

from wavesplit.acoustics import green


def lattice_count(pitch: float, radius: float, closed: bool = True) -> int:
    """Brute-force count of origin-anchored lattice points in a ball (integer arithmetic)."""
    n = int(radius / pitch + 1e-9)
    limit = (radius / pitch) ** 2
    count = 0
    for i, j, k in itertools.product(range(-n, n + 1), repeat=3):
        s = i * i + j * j + k * k
        if s < limit - 1e-9 or (closed and abs(s - limit) <= 1e-9):
            count += 1
    return count


def best_single_column(p: np.ndarray, mic_positions: np.ndarray, grid_points: np.ndarray, k: float) -> int:
    """Exhaustive normalized-correlation maximizer, building each column from scalar Green evaluations."""
    best, best_val = -1, -np.inf
    for n, r in enumerate(grid_points):
        col = np.array([green(m, r, k) for m in mic_positions])
        val = abs(np.vdot(col, p)) / np.linalg.norm(col)
        if val > best_val:
            best, best_val = n, val
    return best


def best_pair(p: np.ndarray, D: np.ndarray) -> tuple[int, int]:
    """Exhaustive two-column least-squares optimum: maximizes the explained energy b^H A^-1 b."""
    gram = D.conj().T @ D
    b = D.conj().T @ p
    i, j = np.triu_indices(D.shape[1], 1)
    a, c, d = gram[i, i].real, gram[i, j], gram[j, j].real
    bi, bj = b[i], b[j]
    det = a * d - np.abs(c) ** 2
    explained = (d * np.abs(bi) ** 2 + a * np.abs(bj) ** 2 - 2 * np.real(np.conj(bi) * c * bj)) / det
    best = int(np.argmax(explained))
    return int(i[best]), int(j[best])
