"""
Noise power spectral densities, trace synthesis, shot-to-shot draws, decay
channels and atomic-motion noise.

PSDs are one-sided. Frequency-noise PSDs are in Hz^2/Hz and produce traces
in Hz; relative-intensity PSDs are in 1/Hz and produce dimensionless traces.
"""

import csv
import math
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from scipy.integrate import trapezoid

from quantum_core import TimeGrid

logger = logging.getLogger(__name__)

PSD_KINDS = ('frequency', 'relative_intensity')
PSD_HEADER = ['freq_hz', 'psd']
MHZ = 2 * np.pi * 1e6

SeedLike = Union[int, Tuple[int, ...], np.random.SeedSequence, np.random.Generator]


def make_rng(seed: SeedLike) -> np.random.Generator:
    """Generator from an explicit seed; generators are passed through"""
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, np.random.SeedSequence):
        return np.random.default_rng(seed)
    if seed is None:
        raise ValueError("An explicit seed is required")
    if isinstance(seed, (tuple, list)):
        return np.random.default_rng(np.random.SeedSequence([int(s) for s in seed]))
    return np.random.default_rng(np.random.SeedSequence(int(seed)))


class PowerSpectralDensity:
    """One-sided PSD with linear interpolation between grid points and zero outside"""

    def __init__(self, freqs_hz, values, kind: str = 'frequency'):
        freqs = np.array(freqs_hz, dtype=float)
        vals = np.array(values, dtype=float)
        if kind not in PSD_KINDS:
            raise ValueError(f"Unknown PSD kind '{kind}', expected one of {PSD_KINDS}")
        if freqs.ndim != 1 or freqs.size == 0:
            raise ValueError("PSD needs at least one frequency point")
        if vals.shape != freqs.shape:
            raise ValueError(f"PSD has {freqs.size} frequencies but {vals.size} values")
        if not (np.all(np.isfinite(freqs)) and np.all(np.isfinite(vals))):
            raise ValueError("PSD contains non-finite entries")
        if freqs[0] < 0:
            raise ValueError("PSD is one-sided, frequencies must be >= 0")
        if np.any(np.diff(freqs) <= 0):
            bad = int(np.flatnonzero(np.diff(freqs) <= 0)[0]) + 1
            raise ValueError(f"PSD frequencies must be strictly increasing (point {bad + 1})")
        if np.any(vals < 0):
            bad = int(np.flatnonzero(vals < 0)[0])
            raise ValueError(f"PSD values must be nonnegative (point {bad + 1})")
        freqs.setflags(write=False)
        vals.setflags(write=False)
        self.freqs_hz = freqs
        self.values = vals
        self.kind = kind

    def __call__(self, f) -> np.ndarray:
        return np.interp(f, self.freqs_hz, self.values, left=0.0, right=0.0)

    def __repr__(self):
        return (f"PowerSpectralDensity(kind={self.kind!r}, points={self.freqs_hz.size}, "
                f"range=[{self.freqs_hz[0]:.6g}, {self.freqs_hz[-1]:.6g}] Hz)")

    @property
    def f_max(self) -> float:
        """Highest frequency carrying nonzero spectral weight"""
        nz = np.flatnonzero(self.values > 0)
        if nz.size == 0:
            return 0.0
        k = nz[-1]
        return float(self.freqs_hz[min(k + 1, self.freqs_hz.size - 1)])

    def integral(self) -> float:
        if self.freqs_hz.size < 2:
            return 0.0
        return float(trapezoid(self.values, self.freqs_hz))

    def scaled(self, factor: float) -> 'PowerSpectralDensity':
        if factor < 0:
            raise ValueError("PSD scale factor must be nonnegative")
        return PowerSpectralDensity(self.freqs_hz, self.values * factor, self.kind)


def load_psd(path: str, kind: str = 'frequency') -> PowerSpectralDensity:
    """Read a `freq_hz,psd` CSV file"""
    freqs: List[float] = []
    values: List[float] = []
    with open(path, 'r', encoding='utf-8', newline='') as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"{path}: empty file")
        if [h.strip() for h in header] != PSD_HEADER:
            raise ValueError(f"{path}: header must be '{','.join(PSD_HEADER)}', got '{','.join(header)}'")
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != 2:
                raise ValueError(f"{path}: row {line_no} must have two columns")
            try:
                freq, value = float(row[0]), float(row[1])
            except ValueError:
                raise ValueError(f"{path}: row {line_no} is not numeric: {','.join(row)}")
            if not (math.isfinite(freq) and math.isfinite(value)):
                raise ValueError(f"{path}: row {line_no} has non-finite values")
            if freqs and freq <= freqs[-1]:
                raise ValueError(f"{path}: row {line_no} frequency {freq} is not strictly increasing")
            if value < 0:
                raise ValueError(f"{path}: row {line_no} has negative PSD value {value}")
            freqs.append(freq)
            values.append(value)

    if not freqs:
        raise ValueError(f"{path}: empty file (no PSD rows)")

    logger.debug(f"Loaded {len(freqs)} PSD rows from {path}")
    return PowerSpectralDensity(freqs, values, kind)


def save_psd(psd: PowerSpectralDensity, path: str):
    data = np.column_stack([psd.freqs_hz, psd.values])
    np.savetxt(path, data, fmt='%.17g', delimiter=',', header=','.join(PSD_HEADER), comments='')


@dataclass
class NoiseTrace:
    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.grid.n_steps,):
            raise ValueError(f"Trace has {self.values.size} values, grid has {self.grid.n_steps} steps")
        if not np.all(np.isfinite(self.values)):
            raise FloatingPointError("Noise trace contains non-finite values")


def sample_trace(psd: PowerSpectralDensity, grid: TimeGrid, rng_seed: SeedLike) -> NoiseTrace:
    """
    Cosine-sum synthesis h(t) = sum_j sqrt(2 S(f_j) df) cos(2 pi f_j t + phi_j).

    Bins have width df = 1 / (2T). Each tone sits at a uniformly drawn
    position inside its bin with a uniform phase, so the ensemble
    autocorrelation is the cosine transform of S without discretization bias.
    Values are evaluated at the grid step midpoints.
    """
    rng = make_rng(rng_seed)
    f_max = psd.f_max
    if f_max <= 0:
        return NoiseTrace(grid, np.zeros(grid.n_steps))
    if grid.dt >= 1.0 / (4.0 * f_max):
        raise ValueError(
            f"Grid dt = {grid.dt:.3e} s undersamples the PSD (f_max = {f_max:.6g} Hz); "
            f"need dt < {1.0 / (4.0 * f_max):.3e} s"
        )

    df = 1.0 / (2.0 * grid.duration)
    n_bins = int(math.ceil(f_max / df))
    offsets = rng.random(n_bins)
    phases = rng.uniform(0.0, 2.0 * np.pi, n_bins)
    freqs = df * (np.arange(n_bins) + offsets)
    amplitudes = np.sqrt(2.0 * psd(freqs) * df)

    t = grid.midpoints
    values = np.zeros(grid.n_steps)
    for start in range(0, n_bins, 256):
        sl = slice(start, start + 256)
        values += amplitudes[sl] @ np.cos(2.0 * np.pi * np.outer(freqs[sl], t) + phases[sl, None])
    return NoiseTrace(grid, values)


@dataclass(frozen=True)
class CavityFilter:
    """Lorentzian transmission 1 / (1 + (2f / linewidth)^2)"""
    linewidth_hz: float

    def __post_init__(self):
        if not self.linewidth_hz > 0:
            raise ValueError(f"Cavity linewidth must be positive, got {self.linewidth_hz}")


@dataclass(frozen=True)
class MovingAverage:
    """Boxcar smoothing of the stated full width"""
    window_hz: float

    def __post_init__(self):
        if not self.window_hz > 0:
            raise ValueError(f"Moving-average window must be positive, got {self.window_hz}")


def transform_psd(psd: PowerSpectralDensity, transform) -> PowerSpectralDensity:
    if isinstance(transform, CavityFilter):
        gain = 1.0 / (1.0 + (2.0 * psd.freqs_hz / transform.linewidth_hz) ** 2)
        return PowerSpectralDensity(psd.freqs_hz, psd.values * gain, psd.kind)
    if isinstance(transform, MovingAverage):
        return _moving_average(psd, transform.window_hz)
    raise ValueError(f"Unknown PSD transform {transform!r}")


def _moving_average(psd: PowerSpectralDensity, window_hz: float) -> PowerSpectralDensity:
    freqs = psd.freqs_hz
    if freqs.size < 2:
        return psd
    spacing = np.diff(freqs)
    h = float(spacing.min())
    uniform = np.allclose(spacing, h, rtol=1e-9, atol=0.0)
    if uniform:
        grid = freqs
        values = psd.values
    else:
        n_grid = int(math.floor((freqs[-1] - freqs[0]) / h + 1e-9)) + 1
        grid = freqs[0] + h * np.arange(n_grid)
        values = psd(grid)

    width = max(1, int(round(window_hz / h)))
    if width % 2 == 0:
        width += 1
    if width == 1:
        return PowerSpectralDensity(grid, values, psd.kind)

    half = (width - 1) // 2
    smoothed = np.convolve(values, np.full(width, 1.0 / width), mode='full')
    out_freqs = grid[0] + h * (np.arange(smoothed.size) - half)
    keep = out_freqs >= 0
    return PowerSpectralDensity(out_freqs[keep], smoothed[keep], psd.kind)


@dataclass(frozen=True)
class ShotToShotSpec:
    """Gaussian per-shot offset; sigma is relative for intensity and Hz for detuning"""
    sigma: float = 0.0
    distribution: str = 'gaussian'

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError(f"Shot-to-shot sigma must be >= 0, got {self.sigma}")
        if self.distribution != 'gaussian':
            raise ValueError(f"Unsupported shot-to-shot distribution '{self.distribution}'")


def sample_shot_to_shot(spec: ShotToShotSpec, rng_seed: SeedLike) -> float:
    rng = make_rng(rng_seed)
    return float(spec.sigma * rng.standard_normal())


@dataclass(frozen=True)
class DecayChannel:
    """
    Decay source -> target. Constant channels have rate 1/lifetime_s;
    Rabi-scaled channels have rate (Omega / (2 pi MHz))^2 / lifetime_s.
    """
    source: str
    target: str
    lifetime_s: float
    rabi_scaled: bool = False

    def __post_init__(self):
        if not self.lifetime_s > 0:
            raise ValueError(f"Lifetime must be positive for {self.source}->{self.target}")

    def rate(self, omega: Optional[float] = None) -> float:
        if not self.rabi_scaled:
            return 1.0 / self.lifetime_s
        if omega is None:
            raise ValueError(f"Channel {self.source}->{self.target} needs the Rabi frequency")
        return (omega / MHZ) ** 2 / self.lifetime_s


def _sr88_n61() -> List[DecayChannel]:
    to_triplet = 166e-6
    return [
        DecayChannel('r', 'dark', 78e-6),
        DecayChannel('r', '1', to_triplet / 0.1),
        DecayChannel('r', 'p1', to_triplet / 0.3),
        DecayChannel('r', 'p2', to_triplet / 0.6),
        DecayChannel('p1', '0', 21e-6),
        DecayChannel('p1', 'dark', 320e-6, rabi_scaled=True),
        DecayChannel('p2', 'dark', 320e-6, rabi_scaled=True),
    ]


DECAY_PRESETS = {
    'sr88-n61': _sr88_n61,
}


def decay_preset(name: str) -> List[DecayChannel]:
    if name not in DECAY_PRESETS:
        raise ValueError(f"Unknown decay preset '{name}', available: {', '.join(DECAY_PRESETS)}")
    return DECAY_PRESETS[name]()


def total_decay_rate(channels: List[DecayChannel], source: str, omega: Optional[float] = None) -> float:
    return sum(ch.rate(omega) for ch in channels if ch.source == source)


@dataclass(frozen=True)
class MotionSpec:
    doppler_sigma_hz: float = 0.0
    beam_waist_m: float = math.inf
    position_sigma_m: float = 0.0

    def __post_init__(self):
        for name in ('doppler_sigma_hz', 'beam_waist_m', 'position_sigma_m'):
            if getattr(self, name) < 0:
                raise ValueError(f"MotionSpec.{name} must be >= 0")


def sample_motion(spec: MotionSpec, rng: np.random.Generator, n_atoms: int = 2) -> Tuple[np.ndarray, np.ndarray]:
    """Per-atom Doppler detuning (Hz) and relative field amplitude from transverse displacement"""
    doppler = spec.doppler_sigma_hz * rng.standard_normal(n_atoms)
    displacement = spec.position_sigma_m * rng.standard_normal((n_atoms, 2))
    if math.isinf(spec.beam_waist_m) or spec.beam_waist_m == 0:
        field = np.ones(n_atoms)
    else:
        field = np.exp(-np.sum(displacement ** 2, axis=1) / spec.beam_waist_m ** 2)
    return doppler, field


@dataclass(frozen=True)
class ToneSpec:
    """Monochromatic modulation sqrt(2 variance) cos(2 pi f t + phase) on one noise kind"""
    kind: str
    frequency_hz: float
    variance: float
    phase: float = 0.0
    arm: str = 'main'

    def __post_init__(self):
        if self.kind not in ('frequency', 'intensity'):
            raise ValueError(f"Tone kind must be 'frequency' or 'intensity', got '{self.kind}'")
        if self.frequency_hz < 0 or self.variance < 0:
            raise ValueError("Tone frequency and variance must be >= 0")


def tone_trace(tone: ToneSpec, grid: TimeGrid) -> NoiseTrace:
    t = grid.midpoints
    values = math.sqrt(2.0 * tone.variance) * np.cos(2.0 * np.pi * tone.frequency_hz * t + tone.phase)
    return NoiseTrace(grid, values)


def psd_summary(psd: PowerSpectralDensity) -> Dict:
    return {
        'kind': psd.kind,
        'points': int(psd.freqs_hz.size),
        'f_min_hz': float(psd.freqs_hz[0]),
        'f_max_hz': float(psd.freqs_hz[-1]),
        'integral': psd.integral(),
    }
