"""
Studies built on the gate, trajectory and response modules: spin-lock
spectroscopy of laser frequency noise, noise response of many-body
dynamics, and the projected error budget of an upgraded laser system.
"""

import csv
import math
import logging
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence

import numpy as np
from scipy.optimize import curve_fit

from quantum_core import ControlSchedule, TimeGrid
from noise_model import (
    CavityFilter, DecayChannel, MovingAverage, PowerSpectralDensity, total_decay_rate,
    transform_psd,
)
from gate_protocols import (
    LevelScheme, PhaseModulatedGate, TimeOptimalGate, TWO_PI, calibrated_time_optimal,
)
from trajectory_sim import (
    BRIGHT_LEVEL, ErrorModelConfig, decay_probability, prepare_protocol, run_batch,
)
from frt_engine import (
    ResponseFunction, default_frequencies, from_universal, infidelity_from_psd,
    rescale_to_universal, response_from_hamiltonian, response_function,
)

logger = logging.getLogger(__name__)

SPINLOCK_LEVELS = ('0', '1', 'r')
READOUT_AXES = ('+Y', '-Y')
MAX_SITES = 10
MANYBODY_STEPS = 1024
BUDGET_HEADER = ['rabi_hz', 'eps_freq', 'eps_int', 'eps_decay', 'eps_motion', 'eps_total']


class SpinLockProtocol(PhaseModulatedGate):
    """Single atom locked by a constant drive Omega/2 (|1><r| + h.c.) for a time t"""

    name = 'spin-lock'

    def __init__(self, omega: float, lock_time: float, scheme: Optional[LevelScheme] = None):
        if not omega > 0:
            raise ValueError(f"Lock Rabi frequency must be positive, got {omega}")
        if not lock_time > 0:
            raise ValueError(f"Lock time must be positive, got {lock_time}")
        super().__init__(scheme or LevelScheme(SPINLOCK_LEVELS, n_atoms=1))
        self.omega = omega
        self.lock_time = lock_time

    @property
    def duration(self) -> float:
        return self.lock_time

    @property
    def rabi(self) -> float:
        return self.omega

    @property
    def ideal(self) -> bool:
        return True

    def envelope(self, t):
        return np.full(np.shape(t), self.omega, dtype=float)

    def phase(self, t):
        return np.zeros(np.shape(t), dtype=float)

    def on_scheme(self, scheme: LevelScheme) -> 'SpinLockProtocol':
        return SpinLockProtocol(self.omega, self.lock_time, scheme)

    def locked_state(self) -> np.ndarray:
        """(|1> + |r>) / sqrt(2), the eigenstate of the lock drive"""
        return (self.scheme.basis_vector('1') + self.scheme.basis_vector('r')) / math.sqrt(2)


@dataclass(frozen=True)
class SpinLockConfig:
    omega: float
    probe_times: Sequence[float]
    gamma_ryd: float = 0.0
    readout_axes: Sequence[str] = READOUT_AXES

    def __post_init__(self):
        times = np.asarray(self.probe_times, dtype=float)
        if times.size < 3:
            raise ValueError("Spin-lock fit needs at least three probe times")
        if np.any(times <= 0) or np.any(np.diff(times) <= 0):
            raise ValueError("Probe times must be positive and increasing")
        if not self.omega > 0:
            raise ValueError(f"Lock Rabi frequency must be positive, got {self.omega}")
        if self.gamma_ryd < 0:
            raise ValueError(f"Rydberg decay rate must be >= 0, got {self.gamma_ryd}")
        if sorted(self.readout_axes) != sorted(READOUT_AXES):
            raise ValueError(f"Readout axes must be {READOUT_AXES}")


@dataclass
class SpinLockResult:
    gamma: float
    gamma_stderr: float
    a0: float
    b0: float
    times: np.ndarray
    signal: np.ndarray
    signal_err: np.ndarray


def spinlock_response_analytic(omega: float, t: float, f) -> np.ndarray:
    """1/2 pi^2 t^2 {sinc^2[(Omega/2 + pi f) t] + sinc^2[(Omega/2 - pi f) t]}, sinc(x) = sin(x)/x"""
    if not t > 0:
        raise ValueError(f"Probe time must be positive, got {t}")
    f = np.asarray(f, dtype=float)
    plus = np.sinc((omega / 2 + np.pi * f) * t / np.pi)
    minus = np.sinc((omega / 2 - np.pi * f) * t / np.pi)
    return 0.5 * np.pi ** 2 * t ** 2 * (plus ** 2 + minus ** 2)


def spinlock_decay_rate_prediction(psd: PowerSpectralDensity, omega: float, gamma_ryd: float = 0.0,
                                   smoothing_window_hz: Optional[float] = None) -> float:
    """Long-time decay rate pi^2 S(Omega / 2 pi) + Gamma_Ryd / 2"""
    if psd.kind != 'frequency':
        raise ValueError("Spin-lock prediction needs a frequency-noise PSD")
    if smoothing_window_hz:
        psd = transform_psd(psd, MovingAverage(smoothing_window_hz))
    return float(np.pi ** 2 * psd(omega / TWO_PI) + 0.5 * gamma_ryd)


def spinlock_response(omega: float, t: float, freqs: Sequence[float],
                      grid: Optional[TimeGrid] = None) -> ResponseFunction:
    """Frequency-noise response of the locked state from the correlator machinery"""
    protocol = SpinLockProtocol(omega, t)
    return response_function(protocol, 'frequency', 'single_state', freqs=freqs, grid=grid,
                             state=protocol.locked_state())


def _readout_rotation(axis: str) -> np.ndarray:
    """pi/2 about +-Y on (|1>, |r>); +Y takes the locked state to |r>"""
    sign = 1.0 if axis == '+Y' else -1.0
    return np.array([[1.0, -sign], [sign, 1.0]]) / math.sqrt(2)


def _spinlock_signal(protocol: SpinLockProtocol, noise: ErrorModelConfig, n_trajectories: int,
                     master_seed: int, n_jobs: Optional[int]):
    protocol = prepare_protocol(protocol, noise)
    scheme = protocol.scheme
    initial = protocol.locked_state()[:, None]
    _, _, results = run_batch(protocol, noise, n_trajectories, master_seed, initial=initial, n_jobs=n_jobs)

    psi = np.stack([r.propagator[:, 0] for r in results])
    pair = psi[:, [scheme.state_index('1'), scheme.state_index('r')]]
    bright_rows = [i for i in range(scheme.dim) if BRIGHT_LEVEL in scheme.basis[i]]
    pops = np.stack([r.populations[:, 0] for r in results])
    bright = np.sum(pops[:, bright_rows], axis=1) if bright_rows else 0.0

    imaged = {}
    for axis in READOUT_AXES:
        rotated = pair @ _readout_rotation(axis).T
        imaged[axis] = np.abs(rotated[:, 0]) ** 2 + bright
    diff = imaged['-Y'] - imaged['+Y']
    err = float(np.std(diff, ddof=1) / math.sqrt(diff.size)) if diff.size > 1 else 0.0
    return float(diff.mean()), err


def spinlock_simulate(config: SpinLockConfig, noise: ErrorModelConfig, n_trajectories: int = 1000,
                      master_seed: int = 0, n_jobs: Optional[int] = None) -> SpinLockResult:
    """
    Difference of the -Y and +Y readout signals at every probe time, fitted
    to a0 + b0 exp(-Gamma t). Gamma_Ryd enters as an r -> dark channel when
    the noise configuration brings no decay channels of its own.
    """
    if config.gamma_ryd > 0 and noise.decay and not noise.decay_channels:
        noise = replace(noise, decay_channels=[DecayChannel('r', 'dark', 1.0 / config.gamma_ryd)])

    times = np.asarray(config.probe_times, dtype=float)
    signal, errors = [], []
    for t in times:
        value, err = _spinlock_signal(SpinLockProtocol(config.omega, t), noise, n_trajectories,
                                      master_seed, n_jobs)
        signal.append(value)
        errors.append(err)
        logger.debug(f"Spin-lock t = {t:.3e} s: signal {value:.5f} +- {err:.2e}")
    signal = np.array(signal)
    errors = np.array(errors)

    if np.max(np.abs(signal)) < 1e-9:
        raise ValueError("Spin-lock signal has no contrast")
    if np.ptp(signal) < 1e-9:
        logger.info("Spin-lock signal shows no decay")
        return SpinLockResult(0.0, 0.0, 0.0, float(signal.mean()), times, signal, errors)

    def model(t, a0, b0, gamma):
        return a0 + b0 * np.exp(-gamma * t)

    span = times[-1] - times[0]
    guess = -math.log(max(signal[-1], 1e-3) / max(signal[0], 1e-3)) / span if signal[0] > 0 else 1.0 / span
    sigma = np.maximum(errors, 1e-9)
    try:
        popt, pcov = curve_fit(model, times, signal, p0=[0.0, signal[0], max(guess, 1e-3 / span)],
                               sigma=sigma, absolute_sigma=True, maxfev=20000)
    except (RuntimeError, ValueError) as e:
        raise ValueError(f"Spin-lock fit failed: {e}")
    stderr = float(np.sqrt(pcov[2, 2])) if np.isfinite(pcov[2, 2]) else float('inf')
    logger.info(f"Spin-lock decay rate {popt[2]:.4e} +- {stderr:.1e} 1/s at Omega/2pi = {config.omega / TWO_PI:.4g} Hz")
    return SpinLockResult(float(popt[2]), stderr, float(popt[0]), float(popt[1]), times, signal, errors)


def _site_operators(n_sites: int):
    """Total Rydberg number diagonal and total sigma_x for n sites, site 0 the most significant bit"""
    dim = 1 << n_sites
    states = np.arange(dim)
    bits = np.array([(states >> (n_sites - 1 - i)) & 1 for i in range(n_sites)], dtype=float)
    sigma_x = np.zeros((dim, dim))
    for i in range(n_sites):
        flipped = states ^ (1 << (n_sites - 1 - i))
        sigma_x[flipped, states] = 1.0
    return bits, sigma_x


@dataclass
class ManyBodySchedule:
    """
    Chain of sites under H = Omega(t)/2 sum_i sigma_x,i - Delta(t) sum_i n_i
    + sum_{i<j} C6 / r_ij^6 n_i n_j, with n_i the Rydberg projector.
    """
    positions_m: np.ndarray
    c6: float
    controls: ControlSchedule
    kind: str = 'custom'

    def __post_init__(self):
        self.positions_m = np.asarray(self.positions_m, dtype=float)
        n = self.positions_m.size
        if not 1 <= n <= MAX_SITES:
            raise ValueError(f"Dense many-body simulation supports 1..{MAX_SITES} sites, got {n}")
        if np.unique(self.positions_m).size != n:
            raise ValueError("Site positions must be distinct")
        if not (self.c6 >= 0 and math.isfinite(self.c6)):
            raise ValueError(f"C6 must be finite and >= 0, got {self.c6}")
        if 'omega' not in self.controls.samples:
            raise ValueError("Many-body schedule needs an 'omega' control")

    @property
    def n_sites(self) -> int:
        return int(self.positions_m.size)

    @property
    def grid(self) -> TimeGrid:
        return self.controls.grid

    @property
    def rabi(self) -> float:
        return float(np.max(np.abs(self.controls.samples['omega'])))

    def interactions(self) -> np.ndarray:
        r = np.abs(self.positions_m[:, None] - self.positions_m[None, :])
        with np.errstate(divide='ignore'):
            v = np.where(r > 0, self.c6 / r ** 6, 0.0)
        return np.triu(v, 1)

    def hamiltonian_factory(self):
        bits, sigma_x = _site_operators(self.n_sites)
        v = self.interactions()
        interaction = np.einsum('ij,is,js->s', v, bits, bits)
        number = bits.sum(axis=0)

        def hamiltonian(times: np.ndarray) -> np.ndarray:
            omega = self.controls.value('omega', times)
            delta = self.controls.value('detuning', times)
            h = 0.5 * omega[:, None, None] * sigma_x[None].astype(complex)
            diag = interaction[None, :] - delta[:, None] * number[None, :]
            idx = np.arange(number.size)
            h[:, idx, idx] += diag
            return h

        return hamiltonian, number, sigma_x

    @classmethod
    def _chain(cls, n_sites: int, omega: float, rb_over_a: float, spacing_m: float):
        positions = spacing_m * np.arange(n_sites)
        c6 = omega * (rb_over_a * spacing_m) ** 6
        return positions, c6

    @classmethod
    def quench(cls, n_sites: int, omega: float, duration: float, rb_over_a: float = 1.5,
               spacing_m: float = 3e-6, n_steps: int = MANYBODY_STEPS) -> 'ManyBodySchedule':
        positions, c6 = cls._chain(n_sites, omega, rb_over_a, spacing_m)
        grid = TimeGrid.spanning(duration, n_steps)
        controls = ControlSchedule(grid, {'omega': np.full(n_steps, omega), 'detuning': np.zeros(n_steps)})
        return cls(positions, c6, controls, 'quench')

    @classmethod
    def tangent_sweep(cls, n_sites: int, omega: float, duration: float,
                      delta_start: Optional[float] = None, delta_end: Optional[float] = None,
                      curvature: float = 1.3, rb_over_a: float = 1.5, spacing_m: float = 3e-6,
                      n_steps: int = MANYBODY_STEPS) -> 'ManyBodySchedule':
        """Delta(t) = mid + half tan(c (2t/T - 1)) / tan(c); from -10 Omega to +10 Omega by default"""
        if not 0 < curvature < np.pi / 2:
            raise ValueError(f"Sweep curvature must be in (0, pi/2), got {curvature}")
        delta_start = -10 * omega if delta_start is None else delta_start
        delta_end = 10 * omega if delta_end is None else delta_end
        positions, c6 = cls._chain(n_sites, omega, rb_over_a, spacing_m)
        grid = TimeGrid.spanning(duration, n_steps)
        s = 2 * grid.midpoints / duration - 1
        mid, half = 0.5 * (delta_start + delta_end), 0.5 * (delta_end - delta_start)
        detuning = mid + half * np.tan(curvature * s) / np.tan(curvature)
        controls = ControlSchedule(grid, {'omega': np.full(n_steps, omega), 'detuning': detuning})
        return cls(positions, c6, controls, 'tangent_sweep')


def manybody_response(schedule: ManyBodySchedule, kind: str = 'frequency',
                      freqs: Optional[Sequence[float]] = None) -> ResponseFunction:
    """Response of the final-state fidelity of |0...0> to global frequency or intensity noise"""
    if kind not in ('frequency', 'intensity'):
        raise ValueError(f"Many-body noise kind must be 'frequency' or 'intensity', got '{kind}'")
    hamiltonian, number, sigma_x = schedule.hamiltonian_factory()
    freqs = default_frequencies(schedule.rabi) if freqs is None else np.asarray(freqs, dtype=float)
    dim = number.size

    if kind == 'frequency':
        op = np.diag(-TWO_PI * number).astype(complex)

        def operators(times):
            return np.broadcast_to(op, (np.size(times), dim, dim))
    else:
        def operators(times):
            omega = schedule.controls.value('omega', times)
            return 0.25 * omega[:, None, None] * sigma_x[None].astype(complex)

    state = np.zeros(dim, dtype=complex)
    state[0] = 1.0
    values, dc = response_from_hamiltonian(hamiltonian, schedule.grid, operators, freqs, state=state)
    logger.info(f"Many-body {schedule.kind} response ({schedule.n_sites} sites, {kind}): I(0) = {dc:.4e}")
    return ResponseFunction(freqs_hz=freqs, values=values, kind=kind, metric='single_state',
                            protocol_tag=f"manybody-{schedule.kind}-{schedule.n_sites}",
                            omega=schedule.rabi, dc=dc)


@dataclass(frozen=True)
class BudgetRow:
    rabi_hz: float
    eps_freq: float
    eps_int: float
    eps_decay: float
    eps_motion: float

    @property
    def eps_total(self) -> float:
        return self.eps_freq + self.eps_int + self.eps_decay + self.eps_motion

    def as_list(self) -> List[float]:
        return [self.rabi_hz, self.eps_freq, self.eps_int, self.eps_decay, self.eps_motion, self.eps_total]


def upgrade_projection(config: ErrorModelConfig, filter_linewidth_hz: Optional[float],
                       rabi_hz_values: Sequence[float], metric: str = 'sym') -> List[BudgetRow]:
    """
    Error budget of the time-optimal gate across Rabi frequencies, with the
    frequency-noise PSD passed through a cavity of the given linewidth
    (None or inf keeps it unfiltered). Responses are computed once and
    rescaled through the universal form of the ideal gate.
    """
    rabi_hz_values = [float(v) for v in rabi_hz_values]
    if not rabi_hz_values or min(rabi_hz_values) <= 0:
        raise ValueError("Rabi frequencies must be positive")

    freq_psd = config.frequency_psd if config.frequency else None
    if freq_psd is not None and filter_linewidth_hz is not None and math.isfinite(filter_linewidth_hz):
        freq_psd = transform_psd(freq_psd, CavityFilter(filter_linewidth_hz))
    int_psd = config.intensity_psd if config.intensity else None
    shot_det = config.shot_to_shot_detuning.sigma if config.shot_to_shot else 0.0
    shot_int = config.shot_to_shot_intensity.sigma if config.shot_to_shot else 0.0
    doppler = config.motion.doppler_sigma_hz if config.motion_noise else 0.0

    reference = TimeOptimalGate(calibrated_time_optimal(TWO_PI * rabi_hz_values[0]))
    universal = {kind: rescale_to_universal(response_function(reference, kind, metric))
                 for kind in ('frequency', 'intensity', 'single_atom_frequency')}
    rate = total_decay_rate(config.active_channels, 'r')

    rows = []
    for rabi_hz in rabi_hz_values:
        omega = TWO_PI * rabi_hz
        resp = {kind: from_universal(u, omega) for kind, u in universal.items()}
        eps_freq = shot_det ** 2 * resp['frequency'].dc
        if freq_psd is not None:
            eps_freq += infidelity_from_psd(resp['frequency'], freq_psd).total
        eps_int = shot_int ** 2 * resp['intensity'].dc
        if int_psd is not None:
            eps_int += infidelity_from_psd(resp['intensity'], int_psd).total
        eps_motion = 2 * doppler ** 2 * resp['single_atom_frequency'].dc

        eps_decay = 0.0
        if rate > 0:
            gate = TimeOptimalGate(reference.params.with_omega(omega))
            eps01, eps11 = decay_probability(gate, '01', rate), decay_probability(gate, '11', rate)
            eps_decay = (2 * eps01 + eps11) / 4 if metric == 'haar' else (eps01 + eps11) / 3
        rows.append(BudgetRow(rabi_hz, eps_freq, eps_int, eps_decay, eps_motion))
        logger.info(f"Budget at {rabi_hz / 1e6:.3g} MHz: total {rows[-1].eps_total:.4e}")
    return rows


def save_budget(rows: Sequence[BudgetRow], path: str):
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(BUDGET_HEADER)
        for row in rows:
            writer.writerow(['%.17g' % v for v in row.as_list()])
    logger.info(f"Wrote budget table with {len(rows)} rows to {path}")
