"""Free-field acoustics: geometry, Green's function, synthesis and noise.

Pressures are plain complex numpy vectors of length ``M`` (one entry per
microphone, one wavenumber).  Positions are ``(3,)`` or ``(n, 3)`` float
arrays in meters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np

SPEED_OF_SOUND = 343.0
SOURCE_REGION_RADIUS = 0.8
ARRAY_RADIUS = 1.0
SINGULAR_DISTANCE = 1e-12


class SingularityError(ValueError):
    """Receiver and source coincide, the Green's function is unbounded."""


class UndefinedSNRError(ValueError):
    """Noise was requested for an all-zero signal."""


class MicArrayFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Wavenumber:
    frequency: float
    speed_of_sound: float = SPEED_OF_SOUND

    def __post_init__(self):
        if not self.frequency > 0:
            raise ValueError(f"frequency must be positive, got {self.frequency}")
        if not self.speed_of_sound > 0:
            raise ValueError("speed of sound must be positive")

    @property
    def k(self) -> float:
        return 2.0 * math.pi * self.frequency / self.speed_of_sound


KLike = Union[Wavenumber, float]


def wavenumber_value(k: KLike) -> float:
    """Return ``k`` in rad/m whether given as a :class:`Wavenumber` or a float."""
    if isinstance(k, Wavenumber):
        return k.k
    return float(k)


@dataclass
class PointSource:
    position: np.ndarray
    amplitude: complex = 1.0 + 0.0j

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.amplitude = complex(self.amplitude)


@dataclass
class MicArray:
    """Microphones on a sphere of radius ``radius`` centered at the origin."""

    positions: np.ndarray
    radius: float = ARRAY_RADIUS
    rtol: float = field(default=1e-9, repr=False)

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3 or pos.shape[0] < 1:
            raise MicArrayFormatError(f"positions must have shape (M, 3), got {pos.shape}")
        norms = np.linalg.norm(pos, axis=1)
        bad = np.abs(norms - self.radius) > self.rtol * self.radius
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise MicArrayFormatError(
                f"microphone {i} has norm {float(norms[i])!r}, not on sphere of radius {self.radius!r}"
            )
        if len(pos) > 1:
            d = np.linalg.norm(pos[:, None] - pos[None], axis=-1)
            d[np.diag_indices(len(pos))] = np.inf
            if d.min() < SINGULAR_DISTANCE:
                raise MicArrayFormatError("microphone positions are not pairwise distinct")
        self.positions = pos

    @property
    def M(self) -> int:
        return self.positions.shape[0]


def green(r, r_prime, k: KLike) -> complex:
    """Free-field Green's function ``exp(-jkd) / (4 pi d)`` between two points."""
    d = float(np.linalg.norm(np.asarray(r, dtype=np.float64) - np.asarray(r_prime, dtype=np.float64)))
    if d < SINGULAR_DISTANCE:
        raise SingularityError(f"coincident points (distance {d:g} m)")
    kv = wavenumber_value(k)
    return complex(np.exp(-1j * kv * d) / (4.0 * math.pi * d))


def green_matrix(receivers: np.ndarray, sources: np.ndarray, k: KLike) -> np.ndarray:
    """Transfer matrix ``G[m, s] = green(receivers[m], sources[s], k)``.

    Parameters
    ----------
    receivers : (M, 3) array
    sources : (S, 3) array
    k : Wavenumber or float

    Returns
    -------
    (M, S) complex ndarray
    """
    rec = np.atleast_2d(np.asarray(receivers, dtype=np.float64))
    src = np.asarray(sources, dtype=np.float64).reshape(-1, 3)
    d = np.sqrt(((rec[:, None, :] - src[None, :, :]) ** 2).sum(axis=-1))
    if d.size and d.min() < SINGULAR_DISTANCE:
        raise SingularityError("a source coincides with a receiver")
    kv = wavenumber_value(k)
    return np.exp(-1j * kv * d) / (4.0 * math.pi * d)


def _as_arrays(sources: Sequence[PointSource]) -> tuple[np.ndarray, np.ndarray]:
    pos = np.array([s.position for s in sources], dtype=np.float64).reshape(-1, 3)
    amp = np.array([s.amplitude for s in sources], dtype=np.complex128)
    return pos, amp


def synthesize(sources: Sequence[PointSource], mics: MicArray | np.ndarray, k: KLike) -> np.ndarray:
    """Pressure at the microphones due to a superposition of point sources."""
    rec = mics.positions if isinstance(mics, MicArray) else np.asarray(mics, dtype=np.float64)
    if len(sources) == 0:
        return np.zeros(len(rec), dtype=np.complex128)
    pos, amp = _as_arrays(sources)
    return green_matrix(rec, pos, k) @ amp


def add_noise(p: np.ndarray, snr_db: float, rng: np.random.Generator) -> np.ndarray:
    """Add circularly-symmetric complex Gaussian noise at a given SNR.

    The reference is the mean signal power over the array, so every mic gets
    noise variance ``mean(|p|**2) / 10**(snr_db / 10)``.  ``snr_db=inf``
    returns an unmodified copy without consuming random numbers.
    """
    p = np.asarray(p, dtype=np.complex128)
    power = float(np.mean(np.abs(p) ** 2))
    if power == 0.0:
        raise UndefinedSNRError("cannot set an SNR for an all-zero signal")
    if math.isinf(snr_db) and snr_db > 0:
        return p.copy()
    if not math.isfinite(snr_db):
        raise ValueError(f"snr_db must be finite or +inf, got {snr_db}")
    sigma2 = noise_variance(power, snr_db)
    scale = math.sqrt(sigma2 / 2.0)
    noise = rng.normal(0.0, scale, size=p.shape) + 1j * rng.normal(0.0, scale, size=p.shape)
    return p + noise


def noise_variance(signal_power: float, snr_db: float) -> float:
    return signal_power / 10.0 ** (snr_db / 10.0)


def sample_source_position(rng: np.random.Generator, region_radius: float = SOURCE_REGION_RADIUS) -> np.ndarray:
    """One point drawn uniformly from the open ball of the given radius."""
    return sample_source_positions(rng, 1, region_radius)[0]


def sample_source_positions(rng: np.random.Generator, n: int, region_radius: float = SOURCE_REGION_RADIUS) -> np.ndarray:
    if not region_radius > 0:
        raise ValueError("region_radius must be positive")
    direction = rng.normal(size=(n, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    # U in [0, 1) keeps the norm strictly below the radius
    radius = region_radius * rng.random(n) ** (1.0 / 3.0)
    return direction * radius[:, None]


def fibonacci_sphere(M: int, radius: float = ARRAY_RADIUS) -> MicArray:
    """Golden-angle spiral of ``M`` points, exactly on the sphere."""
    if M < 4:
        raise ValueError("fibonacci_sphere needs M >= 4")
    i = np.arange(M) + 0.5
    z = 1.0 - 2.0 * i / M
    rho = np.sqrt(1.0 - z * z)
    phi = math.pi * (3.0 - math.sqrt(5.0)) * i
    pts = np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=1)
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    return MicArray(pts * radius, radius)


def _parse_points(lines: Iterable[str], source: str) -> np.ndarray:
    rows = []
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise MicArrayFormatError(f"{source}:{lineno}: expected 'x y z', got {line!r}")
        try:
            rows.append([float(v) for v in parts])
        except ValueError:
            raise MicArrayFormatError(f"{source}:{lineno}: non-numeric coordinate in {line!r}") from None
    if not rows:
        raise MicArrayFormatError(f"{source}: no microphone coordinates")
    return np.array(rows, dtype=np.float64)


def load_mic_array(path: str | Path, radius: float | None = None) -> MicArray:
    """Read a plaintext ``x y z`` mic file; blank lines and ``#`` comments are ignored.

    Without an explicit ``radius`` the mean point norm is used and every point
    must lie on that sphere to 1e-9 relative tolerance.
    """
    path = Path(path)
    pts = _parse_points(path.read_text().splitlines(), str(path))
    if radius is None:
        radius = float(np.mean(np.linalg.norm(pts, axis=1)))
    return MicArray(pts, radius)


def save_mic_array(path: str | Path, mics: MicArray) -> None:
    with open(path, "w") as fh:
        fh.write(f"# {mics.M} microphones, radius {float(mics.radius)!r} m\n")
        for x, y, z in mics.positions:
            fh.write(f"{float(x)!r} {float(y)!r} {float(z)!r}\n")


def tdesign_64(radius: float = ARRAY_RADIUS) -> MicArray:
    """The bundled 64-point spherical t-design, scaled to ``radius``."""
    text = resources.files("wavesplit").joinpath("data/tdesign64.txt").read_text()
    pts = _parse_points(text.splitlines(), "tdesign64.txt")
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    return MicArray(pts * radius, radius)
