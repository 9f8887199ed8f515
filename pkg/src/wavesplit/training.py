"""Datasets of source positions and the training loops.

Datasets hold positions only.  Pressures are synthesized per batch with a
fresh source phase/amplitude and noise draw, from an RNG seeded by
``(seed, epoch, batch)`` so a run is reproducible regardless of how batches
are produced.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import engine
from .acoustics import SOURCE_REGION_RADIUS, MicArray, Wavenumber, green_matrix, noise_variance, sample_source_positions
from .engine import Tensor
from .models import (
    BaselineNet,
    Network,
    SfsNet,
    SslNet,
    base_loss_tensor,
    covariance_tensor,
    pack_ssl_batch,
    sfs_loss_tensor,
    ssl_loss_tensor,
)

VALIDATION_STREAM = 0xFFFFFFFF


class TrainingDivergedError(RuntimeError):
    pass


# datasets -----------------------------------------------------------------

@dataclass
class SslDataset:
    """Single-source positions; the first ``n_train`` rows are the training split."""

    positions: np.ndarray
    n_train: int
    frequency: float
    seed: int = 0

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if not 0 <= self.n_train <= len(self.positions):
            raise ValueError("n_train out of range")

    @classmethod
    def generate(cls, count: int = 10_000, frequency: float = 500.0, seed: int = 0,
                 train_fraction: float = 0.9, region_radius: float = SOURCE_REGION_RADIUS) -> "SslDataset":
        rng = np.random.default_rng([seed, 1])
        pos = sample_source_positions(rng, count, region_radius)
        return cls(pos, int(round(train_fraction * count)), frequency, seed)

    def __len__(self):
        return len(self.positions)

    @property
    def is_train(self) -> np.ndarray:
        return np.arange(len(self)) < self.n_train

    @property
    def train_indices(self) -> np.ndarray:
        return np.arange(self.n_train)

    @property
    def val_indices(self) -> np.ndarray:
        return np.arange(self.n_train, len(self))

    def targets(self, indices) -> np.ndarray:
        return self.positions[np.asarray(indices)]


@dataclass
class SfsDataset:
    """Two-source position pairs, shape (N, 2, 3); the first ``n_train`` are training pairs."""

    pairs: np.ndarray
    n_train: int
    frequency: float
    seed: int = 0

    def __post_init__(self):
        self.pairs = np.asarray(self.pairs, dtype=np.float64).reshape(-1, 2, 3)
        if not 0 <= self.n_train <= len(self.pairs):
            raise ValueError("n_train out of range")

    @classmethod
    def from_ssl(cls, ssl: SslDataset, n_train: int = 45_000, n_val: int = 5_000, seed: int | None = None) -> "SfsDataset":
        """Pairs of distinct positions, training pairs from the SSL training split only
        and validation pairs from the SSL validation split only."""
        seed = ssl.seed if seed is None else seed
        rng = np.random.default_rng([seed, 2])
        train = _draw_pairs(rng, ssl.positions[ssl.train_indices], n_train)
        val = _draw_pairs(rng, ssl.positions[ssl.val_indices], n_val)
        return cls(np.concatenate([train, val]), n_train, ssl.frequency, seed)

    def __len__(self):
        return len(self.pairs)

    @property
    def is_train(self) -> np.ndarray:
        return np.arange(len(self)) < self.n_train

    @property
    def train_indices(self) -> np.ndarray:
        return np.arange(self.n_train)

    @property
    def val_indices(self) -> np.ndarray:
        return np.arange(self.n_train, len(self))

    def targets(self, indices) -> np.ndarray:
        return self.pairs[np.asarray(indices)].reshape(-1, 6)


def _draw_pairs(rng: np.random.Generator, pool: np.ndarray, n: int) -> np.ndarray:
    if n == 0:
        return np.zeros((0, 2, 3))
    if len(pool) < 2:
        raise ValueError("need at least two positions to form pairs")
    first = rng.integers(0, len(pool), n)
    # offset in [1, len) guarantees two distinct members
    second = (first + rng.integers(1, len(pool), n)) % len(pool)
    return np.stack([pool[first], pool[second]], axis=1)


# batches ------------------------------------------------------------------

def _noisy(clean: np.ndarray, snr_db: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Row-wise :func:`~wavesplit.acoustics.add_noise` for a (B, M) block."""
    power = np.mean(np.abs(clean) ** 2, axis=1)
    sigma = np.sqrt(noise_variance(power, snr_db) / 2.0)[:, None]
    shape = clean.shape
    return clean + sigma * rng.normal(size=shape) + 1j * sigma * rng.normal(size=shape)


def _draw_snr(rng, n, snr_range):
    if snr_range is None:
        return None
    lo, hi = snr_range
    return rng.uniform(lo, hi, n)


def ssl_pressures(positions: np.ndarray, mics: MicArray, k, rng: np.random.Generator,
                  snr_range=(20.0, 60.0), phases=None) -> np.ndarray:
    """Unit-modulus, random-phase single-source pressures with noise, shape (B, M)."""
    G = green_matrix(mics.positions, positions, k).T
    if phases is None:
        phases = rng.uniform(-math.pi, math.pi, len(G))
    clean = G * np.exp(1j * np.asarray(phases))[:, None]
    snr = _draw_snr(rng, len(G), snr_range)
    return clean if snr is None else _noisy(clean, snr, rng)


def make_ssl_batch(ds: SslDataset, indices, rng: np.random.Generator, mics: MicArray, k=None,
                   snr_range=(20.0, 60.0), phases=None) -> tuple[np.ndarray, np.ndarray]:
    """Covariance inputs (B, 2, M, M) and position targets (B, 3).

    ``snr_range=None`` skips the noise; ``phases`` overrides the random phase.
    """
    k = Wavenumber(ds.frequency) if k is None else k
    pos = ds.targets(indices)
    return pack_ssl_batch(ssl_pressures(pos, mics, k, rng, snr_range, phases)), pos


@dataclass
class SfsBatch:
    inputs: np.ndarray  # packed mixture, (B, 2, M)
    targets: np.ndarray  # packed clean per-source fields over the mixture scale, (B, 4, M)
    scales: np.ndarray  # (B,)
    positions: np.ndarray  # (B, 6)
    amplitudes: np.ndarray  # (B, 2) complex
    mixture: np.ndarray  # unnormalized noisy mixture, (B, M) complex


def two_source_pressures(pairs: np.ndarray, mics: MicArray, k, rng: np.random.Generator,
                         snr_range=(20.0, 60.0), amplitudes=None):
    """Per-source clean fields (B, 2, M), their amplitudes, and the noisy mixture (B, M)."""
    B = len(pairs)
    G = green_matrix(mics.positions, pairs.reshape(-1, 3), k).T.reshape(B, 2, -1)
    if amplitudes is None:
        ri = rng.uniform(-1.0, 1.0, size=(B, 2, 2))
        amplitudes = ri[..., 0] + 1j * ri[..., 1]
    amplitudes = np.asarray(amplitudes, dtype=np.complex128).reshape(B, 2)
    sep = G * amplitudes[:, :, None]
    clean = sep[:, 0] + sep[:, 1]
    snr = _draw_snr(rng, B, snr_range)
    mixture = clean if snr is None else _noisy(clean, snr, rng)
    return sep, amplitudes, mixture


def make_sfs_batch(ds: SfsDataset, indices, rng: np.random.Generator, mics: MicArray, k=None,
                   snr_range=(20.0, 60.0), amplitudes=None) -> SfsBatch:
    """Noisy mixture packed as input; noise-free separated fields as targets.

    Both are divided by the mixture's max modulus.
    """
    k = Wavenumber(ds.frequency) if k is None else k
    pairs = ds.pairs[np.asarray(indices)]
    sep, amps, mixture = two_source_pressures(pairs, mics, k, rng, snr_range, amplitudes)
    scales = np.max(np.abs(mixture), axis=1)
    q = mixture / scales[:, None]
    t = sep / scales[:, None, None]
    inputs = np.stack([q.real, q.imag], axis=1)
    targets = np.stack([t[:, 0].real, t[:, 0].imag, t[:, 1].real, t[:, 1].imag], axis=1)
    return SfsBatch(inputs, targets, scales, pairs.reshape(-1, 6), amps, mixture)


# configuration ------------------------------------------------------------

@dataclass
class TrainConfig:
    learning_rate: float = 5e-4
    batch_size: int = 100
    epochs: int = 1000
    snr_low: float = 20.0
    snr_high: float = 60.0
    seed: int = 0
    speed_of_sound: float = 343.0
    noise: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.snr_low > self.snr_high:
            raise ValueError("snr_low must not exceed snr_high")

    @property
    def snr_range(self):
        return (self.snr_low, self.snr_high) if self.noise else None

    @classmethod
    def from_mapping(cls, values: Mapping[str, str]) -> "TrainConfig":
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            key = key.strip().replace("-", "_")
            if key not in types:
                raise ValueError(f"unknown training option {key!r}")
            default = getattr(cls, key)
            if isinstance(default, bool):
                kwargs[key] = str(raw).strip().lower() in ("1", "true", "yes", "on")
            elif isinstance(default, int):
                kwargs[key] = int(raw)
            else:
                kwargs[key] = float(raw)
        return cls(**kwargs)

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(self))


def load_train_config(path: str | Path) -> TrainConfig:
    """Parse a ``key=value`` file (``#`` comments allowed)."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return TrainConfig.from_mapping(values)


FULL_SSL = TrainConfig(learning_rate=5e-4, batch_size=100, epochs=1000)
FULL_SFS = TrainConfig(learning_rate=1e-3, batch_size=100, epochs=10_000)
FULL_BASELINE = TrainConfig(learning_rate=5e-4, batch_size=100, epochs=10_000)
FULL_SFS_FROZEN = TrainConfig(learning_rate=1e-3, batch_size=100, epochs=10_000)
DESK_SSL = TrainConfig(learning_rate=5e-4, batch_size=100, epochs=200)
DESK_SFS = TrainConfig(learning_rate=1e-3, batch_size=100, epochs=500)
DESK_BASELINE = TrainConfig(learning_rate=5e-4, batch_size=100, epochs=500)
DESK_SFS_FROZEN = TrainConfig(learning_rate=1e-3, batch_size=100, epochs=500)


# training loops -----------------------------------------------------------

@dataclass
class TrainResult:
    network: Network
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_arrays: list | None = None

    def best_network(self) -> Network:
        """A copy of the network holding the lowest-validation-loss weights (final weights if none)."""
        from .models import build_from_descriptor

        net = build_from_descriptor(self.network.descriptor)
        net.load_arrays(self.best_arrays if self.best_arrays is not None else self.network.named_arrays())
        return net


def write_curves(path: str | Path, result: TrainResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss"])
        for e, (tr, va) in enumerate(zip(result.train_loss, result.val_loss), 1):
            w.writerow([e, repr(float(tr)), repr(float(va))])


def _batch_rng(seed: int, epoch: int, batch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, batch])


def _run(net: Network, train_idx: np.ndarray, val_idx: np.ndarray, cfg: TrainConfig,
         step_loss: Callable[[np.ndarray, np.random.Generator], Tensor],
         trainable: Sequence[engine.Parameter], log: Callable[[str], None] | None = None) -> TrainResult:
    result = TrainResult(net)
    best = math.inf
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(train_idx)
        total = 0.0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            engine.zero_grad(trainable)
            loss = step_loss(idx, _batch_rng(cfg.seed, epoch + 1, b))
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergedError(f"non-finite loss {value} at epoch {epoch + 1}, batch {b}")
            loss.backward()
            engine.adam_step(trainable, cfg.learning_rate)
            total += value * len(idx)
        result.train_loss.append(total / max(len(order), 1))
        val = evaluate_loss(step_loss, val_idx, cfg)
        result.val_loss.append(val)
        if math.isfinite(val) and val < best:
            best = val
            result.best_epoch = epoch + 1
            result.best_arrays = [(n, a.copy()) for n, a in net.named_arrays()]
        if log is not None:
            log(f"epoch {epoch + 1}/{cfg.epochs} train {result.train_loss[-1]:.6g} val {val:.6g}")
    return result


def evaluate_loss(step_loss, indices: np.ndarray, cfg: TrainConfig) -> float:
    """Mean loss over ``indices`` with a fixed noise stream (same draws every call)."""
    if len(indices) == 0:
        return math.nan
    total = 0.0
    with engine.no_grad():
        for b, start in enumerate(range(0, len(indices), cfg.batch_size)):
            idx = indices[start : start + cfg.batch_size]
            total += step_loss(idx, _batch_rng(cfg.seed, VALIDATION_STREAM, b)).item() * len(idx)
    return total / len(indices)


def _wavenumber(ds, cfg: TrainConfig) -> Wavenumber:
    return Wavenumber(ds.frequency, cfg.speed_of_sound)


def ssl_step_loss(net: SslNet, ds: SslDataset, mics: MicArray, cfg: TrainConfig):
    k = _wavenumber(ds, cfg)

    def step(idx, rng):
        x, y = make_ssl_batch(ds, idx, rng, mics, k, cfg.snr_range)
        return ssl_loss_tensor(net(Tensor(x)), y)

    return step


def train_ssl(ds: SslDataset, mics: MicArray, cfg: TrainConfig = DESK_SSL, net: SslNet | None = None, log=None) -> TrainResult:
    """Fit the single-source localizer on one-third squared position error."""
    from .models import build_ssl

    net = build_ssl(mics.M, seed=cfg.seed, frequency=ds.frequency) if net is None else net
    step = ssl_step_loss(net, ds, mics, cfg)
    return _run(net, ds.train_indices, ds.val_indices, cfg, step, net.parameters(), log)


def sfs_step_loss(net: SfsNet, ds: SfsDataset, mics: MicArray, cfg: TrainConfig):
    k = _wavenumber(ds, cfg)

    def step(idx, rng):
        batch = make_sfs_batch(ds, idx, rng, mics, k, cfg.snr_range)
        return sfs_loss_tensor(net(Tensor(batch.inputs)), batch.targets)

    return step


def train_sfs(ds: SfsDataset, mics: MicArray, cfg: TrainConfig = DESK_SFS, net: SfsNet | None = None, log=None) -> TrainResult:
    """Fit the separator on the permutation-invariant separation loss."""
    from .models import build_sfs

    net = build_sfs(mics.M, 2, seed=cfg.seed, frequency=ds.frequency) if net is None else net
    step = sfs_step_loss(net, ds, mics, cfg)
    return _run(net, ds.train_indices, ds.val_indices, cfg, step, net.parameters(), log)


def baseline_step_loss(net: BaselineNet, ds: SfsDataset, mics: MicArray, cfg: TrainConfig):
    k = _wavenumber(ds, cfg)

    def step(idx, rng):
        batch = make_sfs_batch(ds, idx, rng, mics, k, cfg.snr_range)
        return base_loss_tensor(net(Tensor(pack_ssl_batch(batch.mixture))), batch.positions)

    return step


def train_baseline(ds: SfsDataset, mics: MicArray, cfg: TrainConfig = DESK_BASELINE, net: BaselineNet | None = None, log=None) -> TrainResult:
    """Fit the two-position localizer directly on the permutation-invariant position loss."""
    from .models import build_baseline

    net = build_baseline(mics.M, seed=cfg.seed, frequency=ds.frequency) if net is None else net
    step = baseline_step_loss(net, ds, mics, cfg)
    return _run(net, ds.train_indices, ds.val_indices, cfg, step, net.parameters(), log)


def separated_positions(sfs: SfsNet, ssl: SslNet, packed_mixture: Tensor) -> Tensor:
    """Separator then localizer on each separated field; returns (B, 6) stacked positions."""
    out = sfs(packed_mixture)
    S = out.shape[1] // 2
    positions = [ssl(covariance_tensor(out[:, 2 * s : 2 * s + 2, :])) for s in range(S)]
    return engine.cat(positions, axis=1)


def frozen_step_loss(sfs: SfsNet, ssl: SslNet, ds: SfsDataset, mics: MicArray, cfg: TrainConfig):
    k = _wavenumber(ds, cfg)

    def step(idx, rng):
        batch = make_sfs_batch(ds, idx, rng, mics, k, cfg.snr_range)
        return base_loss_tensor(separated_positions(sfs, ssl, Tensor(batch.inputs)), batch.positions)

    return step


def train_sfs_frozen_ssl(ds: SfsDataset, mics: MicArray, ssl: SslNet, cfg: TrainConfig = DESK_SFS_FROZEN,
                         net: SfsNet | None = None, log=None) -> TrainResult:
    """Fit the separator through a fixed, pre-trained localizer on the position loss."""
    from .models import build_sfs

    net = build_sfs(mics.M, 2, seed=cfg.seed, frequency=ds.frequency, objective="position") if net is None else net
    frozen = ssl.parameters()
    saved = [p.tensor.requires_grad for p in frozen]
    for p in frozen:
        p.tensor.requires_grad = False
    try:
        step = frozen_step_loss(net, ssl, ds, mics, cfg)
        return _run(net, ds.train_indices, ds.val_indices, cfg, step, net.parameters(), log)
    finally:
        for p, flag in zip(frozen, saved):
            p.tensor.requires_grad = flag
