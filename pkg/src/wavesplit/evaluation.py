"""Localization and reconstruction metrics, randomized sweeps and field maps."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .acoustics import (
    ARRAY_RADIUS,
    SPEED_OF_SOUND,
    MicArray,
    PointSource,
    Wavenumber,
    add_noise,
    sample_source_positions,
    synthesize,
)
from .pipeline import EXCLUSION_RADIUS, Decomposition, baseline_decompose, decompose, reconstruct
from .sparse import build_dictionary, build_grid, sparse_decompose

SDR_CLAMP = 100.0
METHODS = ("proposed", "proposed-lbase", "baseline", "sparse")
ROW_FIELDS = ["method", "frequency_hz", "snr_db", "S", "trial", "rmse_m", "sdr_db"]
AGGREGATE_FIELDS = ["method", "frequency_hz", "snr_db", "S", "trials", "mean_rmse_m", "mean_sdr_db", "rms_rmse_m"]


class MissingWeightsError(LookupError):
    pass


def rmse(true_positions, est_positions, S: int | None = None) -> float:
    """Euclidean error for one source; permutation-minimal root mean square for two."""
    t = np.asarray(true_positions, dtype=np.float64).reshape(-1, 3)
    e = np.asarray(est_positions, dtype=np.float64).reshape(-1, 3)
    S = len(t) if S is None else S
    if S not in (1, 2) or len(t) != S or len(e) != S:
        raise ValueError(f"need S in (1, 2) and S positions each, got S={S}, {len(t)} and {len(e)}")
    if S == 1:
        return float(np.sqrt(np.sum((t[0] - e[0]) ** 2)))
    d = lambda i, j: float(np.sum((t[i] - e[j]) ** 2))
    return math.sqrt(min(d(0, 0) + d(1, 1), d(0, 1) + d(1, 0)) / S)


def sdr(true_field, rec_field, clamp: float = SDR_CLAMP, literal: bool = False) -> float:
    """Signal-to-distortion ratio in dB, ``10 log10(sum |p|^2 / sum |p_rec - p|^2)``.

    ``literal=True`` returns the distortion-over-signal orientation instead
    (the negative).  Results are clamped to ``[-clamp, clamp]``.
    """
    p = np.asarray(true_field, dtype=np.complex128).ravel()
    r = np.asarray(rec_field, dtype=np.complex128).ravel()
    if p.shape != r.shape:
        raise ValueError("fields must be sampled on the same points")
    sig = float(np.sum(np.abs(p) ** 2))
    if sig == 0.0:
        raise ValueError("true field is zero")
    err = float(np.sum(np.abs(r - p) ** 2))
    value = clamp if err == 0.0 else 10.0 * math.log10(sig / err)
    value = max(-clamp, min(clamp, value))
    return -value if literal else value


def eval_grid(pitch: float = 0.1, radius: float = ARRAY_RADIUS) -> np.ndarray:
    """Origin-anchored lattice strictly inside the ball of the given radius."""
    n = int(math.floor(radius / pitch + 1e-9))
    r = np.arange(-n, n + 1)
    ijk = np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1).reshape(-1, 3)
    pts = ijk * pitch
    return pts[np.linalg.norm(pts, axis=1) < radius * (1 - 1e-12)]


def field_sdr(true_sources: Sequence[PointSource], est_sources: Sequence[PointSource], k, grid: np.ndarray,
              literal: bool = False) -> float:
    """SDR of the reconstructed field over ``grid``, skipping points near any source."""
    centers = np.array([s.position for s in list(true_sources) + list(est_sources)]).reshape(-1, 3)
    d = np.linalg.norm(grid[:, None, :] - centers[None], axis=-1)
    pts = grid[(d >= EXCLUSION_RADIUS).all(axis=1)]
    return sdr(reconstruct(true_sources, pts, k), reconstruct(est_sources, pts, k), literal=literal)


@dataclass
class ExperimentConfig:
    frequencies: Sequence[float] = (500.0,)
    snrs: Sequence[float] = (40.0,)
    S: int = 1
    trials: int = 100
    method: str = "proposed"
    seed: int = 0
    sdr_pitch: float = 0.1
    sparse_pitch: float = 0.2
    speed_of_sound: float = SPEED_OF_SOUND
    # optional held-out positions: (n, 3) for S=1 or (n, 2, 3) for S=2; trial t uses row t % n
    positions: np.ndarray | None = field(default=None, repr=False)
    sdr_literal: bool = False

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if any(not f > 0 for f in self.frequencies):
            raise ValueError("frequencies must be positive")
        if self.S not in (1, 2):
            raise ValueError("S must be 1 or 2")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")

    @property
    def label(self) -> str:
        return f"sparse-{self.sparse_pitch:g}" if self.method == "sparse" else self.method


def _lookup(models: Mapping, kind: str, freq: float):
    table = models.get(kind) or {}
    for f, net in table.items():
        if abs(float(f) - freq) < 1e-9:
            return net
    raise MissingWeightsError(f"no {kind} weights for {freq:g} Hz")


def draw_trial(cfg: ExperimentConfig, rng: np.random.Generator, trial: int) -> list[PointSource]:
    """Sources for one trial: unit-modulus random phase for S=1, Re/Im ~ U(-1, 1) for S=2."""
    if cfg.positions is not None:
        pos = np.asarray(cfg.positions, dtype=np.float64)
        pos = pos[trial % len(pos)].reshape(-1, 3)
        if len(pos) != cfg.S:
            raise ValueError("held-out positions do not match the source count")
    else:
        pos = sample_source_positions(rng, cfg.S)
    if cfg.S == 1:
        amps = np.exp(1j * rng.uniform(-math.pi, math.pi, 1))
    else:
        ri = rng.uniform(-1.0, 1.0, size=(cfg.S, 2))
        amps = ri[:, 0] + 1j * ri[:, 1]
    return [PointSource(r, a) for r, a in zip(pos, amps)]


class _Method:
    def __init__(self, cfg: ExperimentConfig, models: Mapping, mics: MicArray):
        self.cfg, self.models, self.mics = cfg, models, mics
        self._dicts: dict[float, object] = {}
        self._grid = build_grid(cfg.sparse_pitch) if cfg.method == "sparse" else None

    def check(self, freq: float) -> None:
        m, S = self.cfg.method, self.cfg.S
        if m == "sparse":
            return
        if m == "baseline":
            if S != 2:
                raise ValueError("the baseline network is defined for two sources")
            _lookup(self.models, "baseline", freq)
            return
        _lookup(self.models, "ssl", freq)
        if S == 2:
            _lookup(self.models, "sfs" if m == "proposed" else "sfs-lbase", freq)

    def __call__(self, p: np.ndarray, freq: float, k: Wavenumber) -> Decomposition:
        m, S = self.cfg.method, self.cfg.S
        if m == "sparse":
            if freq not in self._dicts:
                self._dicts[freq] = build_dictionary(self._grid, self.mics, k)
            return sparse_decompose(p, self.cfg.sparse_pitch, S, self.mics, k, dictionary=self._dicts[freq])
        if m == "baseline":
            return baseline_decompose(p, _lookup(self.models, "baseline", freq), self.mics, k)
        ssl = _lookup(self.models, "ssl", freq)
        sfs = None
        if S == 2:
            sfs = _lookup(self.models, "sfs" if m == "proposed" else "sfs-lbase", freq)
        return decompose(p, S, sfs, ssl, self.mics, k)


def run_sweep(cfg: ExperimentConfig, models: Mapping | None, mics: MicArray,
              out: str | Path | None = None, aggregate_out: str | Path | None = None):
    """Run every (frequency, snr, trial) condition and collect per-trial metrics.

    ``models`` maps ``"ssl"``, ``"sfs"``, ``"sfs-lbase"`` or ``"baseline"`` to
    ``{frequency_hz: Network}``.  Each trial draws from its own RNG seeded by
    ``(seed, frequency index, snr index, trial)``.  Returns ``(rows, aggregates)``
    as lists of dicts and optionally writes both CSV files.
    """
    models = models or {}
    method = _Method(cfg, models, mics)
    grid = eval_grid(cfg.sdr_pitch)
    for freq in cfg.frequencies:
        method.check(float(freq))
    rows, aggregates = [], []
    for fi, freq in enumerate(cfg.frequencies):
        freq = float(freq)
        k = Wavenumber(freq, cfg.speed_of_sound)
        for si, snr in enumerate(cfg.snrs):
            snr = float(snr)
            block = []
            for t in range(cfg.trials):
                rng = np.random.default_rng([cfg.seed, fi, si, t])
                sources = draw_trial(cfg, rng, t)
                p = add_noise(synthesize(sources, mics, k), snr, rng)
                dec = method(p, freq, k)
                row = {
                    "method": cfg.label,
                    "frequency_hz": freq,
                    "snr_db": snr,
                    "S": cfg.S,
                    "trial": t,
                    "rmse_m": rmse([s.position for s in sources], dec.positions, cfg.S),
                    "sdr_db": field_sdr(sources, dec.sources, k, grid, cfg.sdr_literal),
                }
                block.append(row)
            rows += block
            r = np.array([b["rmse_m"] for b in block])
            aggregates.append({
                "method": cfg.label,
                "frequency_hz": freq,
                "snr_db": snr,
                "S": cfg.S,
                "trials": len(block),
                "mean_rmse_m": float(np.mean(r)),
                "mean_sdr_db": float(np.mean([b["sdr_db"] for b in block])),
                "rms_rmse_m": float(np.sqrt(np.mean(r ** 2))),
            })
    if out is not None:
        write_rows(out, rows, ROW_FIELDS)
    if aggregate_out is not None:
        write_rows(aggregate_out, aggregates, AGGREGATE_FIELDS)
    return rows, aggregates


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def write_rows(path: str | Path, rows: Sequence[Mapping], columns: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in columns])


# field maps ---------------------------------------------------------------

def parse_plane(spec: str) -> tuple[int, float]:
    """``"z=0"`` -> (axis index 2, offset 0.0)."""
    try:
        axis, value = spec.replace(" ", "").split("=")
        return "xyz".index(axis.lower()), float(value)
    except ValueError:
        raise ValueError(f"plane must look like 'z=0', got {spec!r}") from None


def field_map(sources: Sequence[PointSource], plane: str, extent: float, pitch: float, k,
              bound: float = ARRAY_RADIUS) -> tuple[np.ndarray, np.ndarray]:
    """Field on an axis-aligned square ``[-extent, extent]^2`` lattice in ``plane``.

    Points within 1e-6 m of a source get NaN.  Returns ``(points (n, 3), values (n,))``.
    """
    axis, offset = parse_plane(plane)
    if abs(offset) > bound or extent > bound * (1 + 1e-12) or not extent > 0:
        raise ValueError(f"plane and extent must lie within [-{bound}, {bound}]")
    if not pitch > 0:
        raise ValueError("pitch must be positive")
    n = int(round(extent / pitch))
    c = np.arange(-n, n + 1) * pitch
    u, v = np.meshgrid(c, c, indexing="ij")
    others = [i for i in range(3) if i != axis]
    pts = np.zeros((u.size, 3))
    pts[:, others[0]] = u.ravel()
    pts[:, others[1]] = v.ravel()
    pts[:, axis] = offset
    values = np.full(len(pts), np.nan + 1j * np.nan)
    if sources:
        pos = np.array([s.position for s in sources])
        ok = (np.linalg.norm(pts[:, None] - pos[None], axis=-1) >= EXCLUSION_RADIUS).all(axis=1)
    else:
        ok = np.ones(len(pts), bool)
    values[ok] = reconstruct(sources, pts[ok], k)
    return pts, values


def write_field_csv(path: str | Path, points: np.ndarray, values: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "z", "re", "im"])
        for (x, y, z), val in zip(points, values):
            w.writerow([repr(float(x)), repr(float(y)), repr(float(z)), repr(float(val.real)), repr(float(val.imag))])


def localization_errors(ssl, positions: np.ndarray, mics: MicArray, k, rng: np.random.Generator,
                        snr_range=(20.0, 60.0)) -> np.ndarray:
    """Per-source Euclidean error of the single-source localizer on random-phase, noisy inputs."""
    from .pipeline import localize_batch
    from .training import ssl_pressures

    us = ssl_pressures(np.asarray(positions), mics, k, rng, snr_range)
    est = localize_batch(us, ssl)
    return np.linalg.norm(est - positions, axis=1)
