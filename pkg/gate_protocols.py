"""
Gate Hamiltonians for Rydberg CZ protocols and their calibration.

Hamiltonian tables are built by protocol objects from per-step sample times,
with optional per-arm, per-atom field and intensity scale factors so that
noisy realizations reuse the same builder. All entries are in rad/s.
"""

import math
import logging
import itertools
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.optimize import minimize

from config import Config
from quantum_core import (
    TimeGrid, ControlSchedule, compose, coupling_blocks, default_step_count,
    step_propagators, subspace_fidelity,
)

logger = logging.getLogger(__name__)

IDEAL_LEVELS = ('0', '1', 'r')
DECAY_LEVELS = ('0', '1', 'r', 'p1', 'p2', 'dark')
TWO_PHOTON_LEVELS = ('0', '1', 'e', 'r')
COMPUTATIONAL_LABELS = ('00', '01', '10', '11')
TWO_PI = 2 * np.pi

MAX_LEAKAGE = 1e-6


class LevelScheme:
    """Per-atom level labels, their tensor-product basis and embedded operators"""

    def __init__(self, levels: Sequence[str] = IDEAL_LEVELS, n_atoms: int = 2,
                 blockade: Optional[float] = None):
        levels = tuple(levels)
        if len(set(levels)) != len(levels):
            raise ValueError(f"Duplicate level labels in {levels}")
        if '0' not in levels or '1' not in levels:
            raise ValueError("Level scheme must contain the qubit levels '0' and '1'")
        if n_atoms not in (1, 2):
            raise ValueError(f"Only one or two atoms are supported, got {n_atoms}")
        if blockade is not None and not (blockade > 0 and math.isfinite(blockade)):
            raise ValueError(f"Finite blockade must be positive, got {blockade}")

        self.levels = levels
        self.n_atoms = n_atoms
        self.blockade = blockade

        basis = list(itertools.product(levels, repeat=n_atoms))
        if n_atoms == 2 and blockade is None and 'r' in levels:
            basis.remove(('r', 'r'))
        self.basis: List[Tuple[str, ...]] = basis
        self.index: Dict[Tuple[str, ...], int] = {state: i for i, state in enumerate(basis)}

    def __repr__(self):
        mode = 'infinite' if self.blockade is None else f'{self.blockade:.6g} rad/s'
        return f"LevelScheme(levels={self.levels}, n_atoms={self.n_atoms}, blockade={mode})"

    @property
    def dim(self) -> int:
        return len(self.basis)

    def has_level(self, level: str) -> bool:
        return level in self.levels

    def require(self, *levels: str):
        missing = [lv for lv in levels if lv not in self.levels]
        if missing:
            raise ValueError(f"Level scheme {self.levels} lacks levels {missing}")

    def with_levels(self, levels: Sequence[str]) -> 'LevelScheme':
        return LevelScheme(levels, self.n_atoms, self.blockade)

    def state_index(self, *labels: str) -> int:
        return self.index[tuple(labels)]

    def basis_vector(self, *labels: str) -> np.ndarray:
        v = np.zeros(self.dim, dtype=complex)
        v[self.state_index(*labels)] = 1.0
        return v

    def label(self, i: int) -> str:
        return ''.join(self.basis[i])

    def number_operator(self, level: str, atom: Optional[int] = None) -> np.ndarray:
        """Diagonal operator counting atoms in `level` (one atom or all)"""
        atoms = range(self.n_atoms) if atom is None else [atom]
        diag = np.array([sum(state[a] == level for a in atoms) for state in self.basis], dtype=float)
        return np.diag(diag).astype(complex)

    def transition(self, lower: str, upper: str, atom: int) -> np.ndarray:
        """|lower><upper| acting on one atom, embedded in the two-atom basis"""
        op = np.zeros((self.dim, self.dim), dtype=complex)
        for state, col in self.index.items():
            if state[atom] != upper:
                continue
            target = list(state)
            target[atom] = lower
            row = self.index.get(tuple(target))
            if row is not None:
                op[row, col] = 1.0
        return op

    def pair_projector(self, level: str = 'r') -> np.ndarray:
        op = np.zeros((self.dim, self.dim), dtype=complex)
        key = (level,) * self.n_atoms
        if self.n_atoms == 2 and key in self.index:
            i = self.index[key]
            op[i, i] = 1.0
        return op

    def jump_indices(self, source: str, target: str, atom: int) -> Tuple[np.ndarray, np.ndarray]:
        """Basis indices (from, to) linked by a decay of `atom` from source to target"""
        sources, targets = [], []
        for state, i in self.index.items():
            if state[atom] != source:
                continue
            moved = list(state)
            moved[atom] = target
            j = self.index.get(tuple(moved))
            if j is not None:
                sources.append(i)
                targets.append(j)
        return np.array(sources, dtype=int), np.array(targets, dtype=int)

    @property
    def computational_indices(self) -> np.ndarray:
        if self.n_atoms == 1:
            return np.array([self.index[('0',)], self.index[('1',)]])
        return np.array([self.index[tuple(label)] for label in COMPUTATIONAL_LABELS])

    def computational_isometry(self) -> np.ndarray:
        idx = self.computational_indices
        iso = np.zeros((self.dim, idx.size), dtype=complex)
        iso[idx, np.arange(idx.size)] = 1.0
        return iso

    def computational_state(self, label: str) -> np.ndarray:
        return self.basis_vector(*label)


def symmetric_isometry() -> np.ndarray:
    """Columns |00>, (|01> + |10>)/sqrt(2), |11> in the computational basis"""
    q = np.zeros((4, 3), dtype=complex)
    q[0, 0] = 1.0
    q[1, 1] = q[2, 1] = 1.0 / math.sqrt(2)
    q[3, 2] = 1.0
    return q


_H = 0.5
_S = 1.0 / math.sqrt(2)
SSS_TABLE: Tuple[Tuple[str, Tuple[complex, complex, complex, complex]], ...] = (
    ('IX,XI', (_H, _H, _H, _H)),
    ('-IX,-XI', (_H, -_H, -_H, _H)),
    ('IY,YI', (_H, 1j * _H, 1j * _H, -_H)),
    ('-IY,-YI', (_H, -1j * _H, -1j * _H, -_H)),
    ('IZ,ZI', (1, 0, 0, 0)),
    ('-IZ,-ZI', (0, 0, 0, 1)),
    ('XZ,ZX', (_H, _H, _H, -_H)),
    ('-XZ,-ZX', (_H, -_H, -_H, -_H)),
    ('YZ,ZY', (_H, 1j * _H, 1j * _H, _H)),
    ('-YZ,-ZY', (_H, -1j * _H, -1j * _H, _H)),
    ('XY,YX', (_S, 0, 0, 1j * _S)),
    ('-XY,-YX', (_S, 0, 0, -1j * _S)),
)


def symmetric_stabilizer_states() -> np.ndarray:
    """The twelve exchange-symmetric two-qubit stabilizer states as rows, ordered as SSS_TABLE"""
    return np.array([amps for _, amps in SSS_TABLE], dtype=complex)


def cz_target(phase: float = 0.0, global_phase: float = 0.0, cz: bool = True) -> np.ndarray:
    """e^{i global} (Z(phase) x Z(phase)) CZ on {00, 01, 10, 11}"""
    sign = -1.0 if cz else 1.0
    diag = np.array([1.0, np.exp(1j * phase), np.exp(1j * phase), sign * np.exp(2j * phase)])
    return np.exp(1j * global_phase) * np.diag(diag)


def computational_block(u: np.ndarray, scheme: Optional[LevelScheme] = None) -> np.ndarray:
    u = np.asarray(u)
    if scheme is None:
        if u.shape[-2:] != (4, 4):
            raise ValueError(f"Expected a 4x4 computational block, got shape {u.shape}")
        return u
    idx = scheme.computational_indices
    return u[..., idx[:, None], idx]


def wrap_phase(angle: float) -> float:
    return float((angle + np.pi) % (2 * np.pi) - np.pi)


def extract_single_atom_phase(u: np.ndarray, scheme: Optional[LevelScheme] = None) -> float:
    """arg <01|u|01> - arg <00|u|00>, after checking u stays in the computational subspace"""
    block = computational_block(u, scheme)
    leakage = 1.0 - np.sum(np.abs(block) ** 2, axis=0)
    if scheme is None:
        offdiag = block - np.diag(np.diag(block))
        leakage = np.maximum(leakage, np.sum(np.abs(offdiag) ** 2, axis=0))
    if np.max(leakage) > MAX_LEAKAGE:
        raise ValueError(f"Excessive leakage out of the computational subspace ({np.max(leakage):.3e})")
    return wrap_phase(np.angle(block[1, 1]) - np.angle(block[0, 0]))


def compensated_map(u: np.ndarray, scheme: Optional[LevelScheme] = None,
                    phase: Optional[float] = None, cz: bool = True) -> np.ndarray:
    """V^dagger u on the computational block, V the virtual-Z compensated target"""
    block = computational_block(u, scheme)
    if phase is None:
        phase = wrap_phase(np.angle(block[1, 1]) - np.angle(block[0, 0]))
    target = cz_target(phase, float(np.angle(block[0, 0])), cz=cz)
    return np.conj(target.T) @ block


def cz_infidelity(u: np.ndarray, scheme: Optional[LevelScheme] = None,
                  metric: str = 'sym', phase: Optional[float] = None) -> float:
    """1 - F of u against CZ after optimal virtual-Z compensation"""
    m = compensated_map(u, scheme, phase)
    if metric == 'sym':
        fid = subspace_fidelity(m, symmetric_isometry())
    elif metric == 'haar':
        fid = subspace_fidelity(m)
    else:
        raise ValueError(f"Unknown metric '{metric}'")
    return float(1.0 - fid)


@dataclass(frozen=True)
class TimeOptimalParams:
    """Constant drive Omega with phase A cos(omega_m t + offset) + detuning * t"""
    omega: float
    amplitude: float
    modulation_frequency: float
    phase_offset: float
    detuning: float
    duration: float
    single_atom_phase: float = 0.0

    def __post_init__(self):
        if self.omega < 0:
            raise ValueError(f"Rabi frequency must be >= 0, got {self.omega}")
        if not self.duration > 0:
            raise ValueError(f"Pulse duration must be positive, got {self.duration}")

    def phase(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        return self.amplitude * np.cos(self.modulation_frequency * t + self.phase_offset) + self.detuning * t

    def phase_rate(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        return (-self.amplitude * self.modulation_frequency
                * np.sin(self.modulation_frequency * t + self.phase_offset) + self.detuning)

    def dimensionless(self) -> Tuple[float, float, float, float, float]:
        if not self.omega > 0:
            raise ValueError("Dimensionless parameters need a positive Rabi frequency")
        return (self.amplitude, self.modulation_frequency / self.omega, self.phase_offset,
                self.detuning / self.omega, self.omega * self.duration)

    @classmethod
    def from_dimensionless(cls, x: Sequence[float], omega: float,
                           single_atom_phase: float = 0.0) -> 'TimeOptimalParams':
        if not omega > 0:
            raise ValueError(f"Rabi frequency must be positive, got {omega}")
        a, w_ratio, offset, d_ratio, area = (float(v) for v in x)
        return cls(omega=omega, amplitude=a, modulation_frequency=w_ratio * omega,
                   phase_offset=offset, detuning=d_ratio * omega, duration=area / omega,
                   single_atom_phase=single_atom_phase)

    def with_omega(self, omega: float) -> 'TimeOptimalParams':
        return TimeOptimalParams.from_dimensionless(self.dimensionless(), omega, self.single_atom_phase)

    @classmethod
    def initial_guess(cls, omega: float, flip_offset: bool = False) -> 'TimeOptimalParams':
        x = list(Config.CALIBRATION_GUESS)
        if flip_offset:
            x[2] = -x[2]
        return cls.from_dimensionless(x, omega)


ENVELOPE_SHAPES = ('raised_cosine', 'linear', 'square')


@dataclass(frozen=True)
class RealisticGateParams:
    """Time-optimal phase modulation with a ramped envelope, light shifts and finite blockade"""
    pulse: TimeOptimalParams
    rise_time: float = Config.RISE_TIME_S
    shape: str = 'raised_cosine'
    kappa_r: float = 0.0
    kappa_g: float = 0.0
    blockade: Optional[float] = None
    detuning: float = 0.0

    def __post_init__(self):
        if self.shape not in ENVELOPE_SHAPES:
            raise ValueError(f"Unknown envelope shape '{self.shape}'")
        if self.rise_time < 0:
            raise ValueError(f"Rise time must be >= 0, got {self.rise_time}")
        if 2 * self.rise_time > self.pulse.duration:
            raise ValueError(
                f"Envelope mismatch: ramps of {self.rise_time:.3e} s do not fit a "
                f"{self.pulse.duration:.3e} s pulse"
            )

    @property
    def omega(self) -> float:
        return self.pulse.omega

    def envelope(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        omega = self.pulse.omega
        if self.rise_time == 0 or self.shape == 'square':
            return np.where((t >= 0) & (t <= self.pulse.duration), omega, 0.0)
        edge = np.minimum(t, self.pulse.duration - t) / self.rise_time
        edge = np.clip(edge, 0.0, 1.0)
        if self.shape == 'linear':
            return omega * edge
        return omega * 0.5 * (1.0 - np.cos(np.pi * edge))

    def with_pulse(self, pulse: TimeOptimalParams) -> 'RealisticGateParams':
        return replace(self, pulse=pulse)


@dataclass(frozen=True)
class TwoPhotonParams:
    """
    Ladder 1 -> e -> r driven by arm 1 (Omega_1) and arm 2 (Omega_2) with
    intermediate detuning Delta. kappa keys are '<s><j>' for level s in
    {0, 1, r} and arm j in {1, 2}. The phase-modulated pulse is defined at
    the effective Rabi frequency Omega_1 Omega_2 / (2 Delta).
    """
    rabi1: float
    rabi2: float
    intermediate_detuning: float
    kappa: Dict[str, float] = field(default_factory=dict)
    blockade: Optional[float] = None
    pulse: Optional[TimeOptimalParams] = None
    delta1: Optional[ControlSchedule] = None
    delta2: Optional[ControlSchedule] = None
    compensate_light_shift: bool = True

    def __post_init__(self):
        if self.rabi1 < 0 or self.rabi2 < 0:
            raise ValueError("Two-photon Rabi frequencies must be >= 0")
        if not self.intermediate_detuning > 0:
            raise ValueError("Intermediate detuning must be positive")
        unknown = set(self.kappa) - {'01', '02', '11', '12', 'r1', 'r2'}
        if unknown:
            raise ValueError(f"Unknown polarizability keys {sorted(unknown)}")

    @property
    def effective_rabi(self) -> float:
        return self.rabi1 * self.rabi2 / (2.0 * self.intermediate_detuning)

    def k(self, key: str) -> float:
        return float(self.kappa.get(key, 0.0))

    def relative_kappa(self, level: str, arm: int) -> float:
        return self.k(f'{level}{arm}') - self.k(f'1{arm}')

    def effective_valid(self) -> bool:
        scales = [self.rabi1, self.rabi2]
        if self.blockade is not None:
            scales.append(self.blockade)
        return self.intermediate_detuning >= 10.0 * max(scales)


ScaleInput = Union[None, float, np.ndarray]


class GateProtocol:
    """Common interface: Hamiltonian tables, noise operators and default grids"""

    name = 'protocol'
    arms: Tuple[str, ...] = ('main',)

    def __init__(self, scheme: LevelScheme):
        self.logger = logging.getLogger(__name__)
        self.scheme = scheme
        self._blocks = None

    @property
    def duration(self) -> float:
        raise NotImplementedError

    @property
    def rabi(self) -> float:
        raise NotImplementedError

    @property
    def ideal(self) -> bool:
        """Zero rise time, no light shifts, infinite blockade"""
        return False

    def hamiltonian(self, times: np.ndarray, field_scale: Optional[Dict[str, ScaleInput]] = None,
                    intensity_scale: Optional[Dict[str, ScaleInput]] = None) -> np.ndarray:
        raise NotImplementedError

    def drive_max(self) -> float:
        raise NotImplementedError

    def frequency_operator(self, arm: str = 'main') -> np.ndarray:
        self._check_arm(arm)
        return -TWO_PI * self.scheme.number_operator('r')

    def intensity_operator(self, times: np.ndarray, arm: str = 'main') -> np.ndarray:
        """dH/d(eps_I) for relative intensity noise on one arm"""
        self._check_arm(arm)
        times = np.asarray(times, dtype=float)
        field_on = self.hamiltonian(times)
        field_off = self.hamiltonian(times, field_scale={arm: 0.0})
        shift_off = self.hamiltonian(times, intensity_scale={arm: 0.0})
        return 0.5 * (field_on - field_off) + (field_on - shift_off)

    def default_grid(self, n_steps: Optional[int] = None) -> TimeGrid:
        if n_steps is None:
            n_steps = default_step_count(self.duration, self.drive_max())
        return TimeGrid.spanning(self.duration, n_steps)

    def blocks(self, grid: TimeGrid) -> List[np.ndarray]:
        if self._blocks is None:
            self._blocks = coupling_blocks(self.hamiltonian(grid.midpoints))
        return self._blocks

    def propagator(self, grid: Optional[TimeGrid] = None) -> np.ndarray:
        grid = grid or self.default_grid()
        steps = step_propagators(self.hamiltonian(grid.midpoints), grid.dt, self.blocks(grid))
        return compose(steps)

    def on_scheme(self, scheme: LevelScheme) -> 'GateProtocol':
        raise NotImplementedError

    def tag(self) -> str:
        return f"{self.name}@{self.rabi / TWO_PI:.6g}Hz"

    def _check_arm(self, arm: str):
        if arm not in self.arms:
            raise ValueError(f"Protocol '{self.name}' has no arm '{arm}' (arms: {', '.join(self.arms)})")

    def _scale(self, scales: Optional[Dict[str, ScaleInput]], arm: str, n: int) -> np.ndarray:
        """(n, n_atoms) factors; 1-D input is per time step, per-atom constants use shape (1, n_atoms)"""
        value = None if scales is None else scales.get(arm)
        if value is None:
            return np.ones((n, self.scheme.n_atoms))
        value = np.asarray(value, dtype=float)
        if value.ndim == 0:
            return np.full((n, self.scheme.n_atoms), float(value))
        if value.ndim == 1:
            return np.broadcast_to(value[:, None], (n, self.scheme.n_atoms))
        return np.broadcast_to(value, (n, self.scheme.n_atoms))

    def _empty(self, n: int) -> np.ndarray:
        h = np.zeros((n, self.scheme.dim, self.scheme.dim), dtype=complex)
        if self.scheme.blockade is not None and self.scheme.n_atoms == 2:
            i = self.scheme.index.get(('r', 'r'))
            if i is not None:
                h[:, i, i] += self.scheme.blockade
        return h


def _add_coupling(h: np.ndarray, op: np.ndarray, coef: np.ndarray):
    """h += coef * op + conj(coef) * op^dagger for a 0/1 transition operator"""
    rows, cols = np.nonzero(op)
    h[:, rows, cols] += coef[:, None]
    h[:, cols, rows] += np.conj(coef)[:, None]


def _add_diagonal(h: np.ndarray, op: np.ndarray, coef: np.ndarray):
    diag = np.real(np.diag(op))
    nz = np.flatnonzero(diag)
    h[:, nz, nz] += coef[:, None] * diag[nz][None, :]


class PhaseModulatedGate(GateProtocol):
    """
    Single-photon drive 1 <-> r on both atoms:
    H = sum_i [Omega(t) f_i / 2 e^{-i phi(t)} |1_i><r_i| + h.c.]
        - Delta(t) sum_i |r_i><r_i| + kappa_r Omega(t)^2 s_i |r_i><r_i|
        + kappa_g Omega(t)^2 s_i |0_i><0_i| + B |rr><rr|
    """

    name = 'phase-modulated'

    def __init__(self, scheme: LevelScheme):
        scheme.require('0', '1', 'r')
        super().__init__(scheme)
        atoms = range(scheme.n_atoms)
        self._raise = [scheme.transition('1', 'r', a) for a in atoms]
        self._n_r = [scheme.number_operator('r', a) for a in atoms]
        self._n_0 = [scheme.number_operator('0', a) for a in atoms]

    def envelope(self, t: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def phase(self, t: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def static_detuning(self, t: np.ndarray) -> np.ndarray:
        return np.zeros_like(np.asarray(t, dtype=float))

    kappa_r = 0.0
    kappa_g = 0.0

    def hamiltonian(self, times, field_scale=None, intensity_scale=None) -> np.ndarray:
        times = np.asarray(times, dtype=float)
        n = times.size
        h = self._empty(n)
        env = self.envelope(times)
        drive = 0.5 * env * np.exp(-1j * self.phase(times))
        fs = self._scale(field_scale, 'main', n)
        ints = self._scale(intensity_scale, 'main', n)
        detuning = self.static_detuning(times)
        for a in range(self.scheme.n_atoms):
            _add_coupling(h, self._raise[a], drive * fs[:, a])
            r_shift = -detuning + self.kappa_r * env ** 2 * ints[:, a]
            if np.any(r_shift):
                _add_diagonal(h, self._n_r[a], r_shift)
            if self.kappa_g:
                _add_diagonal(h, self._n_0[a], self.kappa_g * env ** 2 * ints[:, a])
        return h

    def drive_max(self) -> float:
        return math.sqrt(self.scheme.n_atoms) * 0.5 * self.rabi


class TimeOptimalGate(PhaseModulatedGate):
    name = 'time-optimal'

    def __init__(self, params: TimeOptimalParams, scheme: Optional[LevelScheme] = None):
        super().__init__(scheme or LevelScheme(IDEAL_LEVELS))
        self.params = params

    @property
    def duration(self) -> float:
        return self.params.duration

    @property
    def rabi(self) -> float:
        return self.params.omega

    @property
    def ideal(self) -> bool:
        return self.scheme.blockade is None

    def envelope(self, t):
        return np.full(np.shape(t), self.params.omega, dtype=float)

    def phase(self, t):
        return self.params.phase(t)

    def on_scheme(self, scheme: LevelScheme) -> 'TimeOptimalGate':
        return TimeOptimalGate(self.params, scheme)


class RealisticGate(PhaseModulatedGate):
    name = 'realistic'

    def __init__(self, params: RealisticGateParams, scheme: Optional[LevelScheme] = None):
        scheme = scheme or LevelScheme(IDEAL_LEVELS, 2, params.blockade)
        super().__init__(scheme)
        self.params = params
        self.kappa_r = params.kappa_r
        self.kappa_g = params.kappa_g

    @property
    def duration(self) -> float:
        return self.params.pulse.duration

    @property
    def rabi(self) -> float:
        return self.params.pulse.omega

    @property
    def ideal(self) -> bool:
        p = self.params
        return (p.rise_time == 0 and p.kappa_r == 0 and p.kappa_g == 0
                and p.detuning == 0 and self.scheme.blockade is None)

    def envelope(self, t):
        return self.params.envelope(t)

    def phase(self, t):
        return self.params.pulse.phase(t)

    def static_detuning(self, t):
        return np.full(np.shape(t), self.params.detuning, dtype=float)

    def on_scheme(self, scheme: LevelScheme) -> 'RealisticGate':
        return RealisticGate(self.params, scheme)


class ScheduledGate(PhaseModulatedGate):
    """Plug-in protocol driven by a ControlSchedule with controls 'omega', 'phase', 'detuning'"""

    name = 'scheduled'

    def __init__(self, schedule: ControlSchedule, scheme: Optional[LevelScheme] = None,
                 kappa_r: float = 0.0, kappa_g: float = 0.0):
        if 'omega' not in schedule.samples:
            raise ValueError("Control schedule needs an 'omega' control")
        if np.any(schedule.samples['omega'] < 0):
            raise ValueError("Envelope 'omega' must be >= 0")
        super().__init__(scheme or LevelScheme(IDEAL_LEVELS))
        self.schedule = schedule
        self.kappa_r = kappa_r
        self.kappa_g = kappa_g

    @property
    def duration(self) -> float:
        return self.schedule.grid.duration

    @property
    def rabi(self) -> float:
        return float(np.max(self.schedule.samples['omega']))

    def envelope(self, t):
        return self.schedule.value('omega', t)

    def phase(self, t):
        return self.schedule.value('phase', t)

    def static_detuning(self, t):
        return self.schedule.value('detuning', t)

    def default_grid(self, n_steps: Optional[int] = None) -> TimeGrid:
        if n_steps is None:
            return self.schedule.grid
        return super().default_grid(n_steps)

    def on_scheme(self, scheme: LevelScheme) -> 'ScheduledGate':
        return ScheduledGate(self.schedule, scheme, self.kappa_r, self.kappa_g)


TWO_PHOTON_MODES = ('four_level', 'effective_three_level')


class TwoPhotonGate(GateProtocol):
    """
    Two-photon ladder gate. The phase modulation of the pulse is applied
    through the detuning controls, delta_1 + delta_2 = -dphi/dt plus
    optional compensation of the differential light shift of |r>.
    """

    name = 'two-photon'
    arms = ('arm1', 'arm2')

    def __init__(self, params: TwoPhotonParams, mode: str = 'four_level',
                 scheme: Optional[LevelScheme] = None):
        if mode not in TWO_PHOTON_MODES:
            raise ValueError(f"Unknown two-photon mode '{mode}'")
        if mode == 'effective_three_level' and not params.effective_valid():
            raise ValueError(
                "Effective three-level mode requires Delta >= 10 max(Omega_1, Omega_2, B)"
            )
        levels = TWO_PHOTON_LEVELS if mode == 'four_level' else IDEAL_LEVELS
        scheme = scheme or LevelScheme(levels, 2, params.blockade)
        scheme.require(*levels)
        super().__init__(scheme)
        self.params = params
        self.mode = mode

        pulse = params.pulse
        if pulse is None:
            if not params.effective_rabi > 0:
                raise ValueError("Two-photon pulse needs a positive effective Rabi frequency")
            guess = TimeOptimalParams.initial_guess(params.effective_rabi)
            ideal_scheme = LevelScheme(IDEAL_LEVELS, 2, params.blockade)
            pulse = calibrate_protocol(guess, ideal_scheme).params
        self.pulse = pulse

        atoms = range(scheme.n_atoms)
        self._n = {lv: [scheme.number_operator(lv, a) for a in atoms] for lv in levels}
        if mode == 'four_level':
            self._lower = [scheme.transition('1', 'e', a) for a in atoms]
            self._upper = [scheme.transition('e', 'r', a) for a in atoms]
        else:
            self._raise = [scheme.transition('1', 'r', a) for a in atoms]

    @property
    def duration(self) -> float:
        return self.pulse.duration

    @property
    def rabi(self) -> float:
        return self.params.effective_rabi

    def detunings(self, t: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        p = self.params
        t = np.asarray(t, dtype=float)
        target = -self.pulse.phase_rate(t)
        if p.compensate_light_shift:
            target = target - (p.rabi1 ** 2 - p.rabi2 ** 2) / (4.0 * p.intermediate_detuning)
            target = target + p.relative_kappa('r', 1) * p.rabi1 ** 2 + p.relative_kappa('r', 2) * p.rabi2 ** 2
        d1 = p.delta1.value('delta', t) if p.delta1 is not None else np.zeros_like(t)
        d2 = p.delta2.value('delta', t) if p.delta2 is not None else target - d1
        return d1, d2

    def hamiltonian(self, times, field_scale=None, intensity_scale=None) -> np.ndarray:
        p = self.params
        times = np.asarray(times, dtype=float)
        n = times.size
        h = self._empty(n)
        f1 = self._scale(field_scale, 'arm1', n)
        f2 = self._scale(field_scale, 'arm2', n)
        s1 = self._scale(intensity_scale, 'arm1', n)
        s2 = self._scale(intensity_scale, 'arm2', n)
        d1, d2 = self.detunings(times)
        big_delta = p.intermediate_detuning
        w1, w2 = p.rabi1 ** 2, p.rabi2 ** 2

        for a in range(self.scheme.n_atoms):
            if self.mode == 'four_level':
                _add_coupling(h, self._lower[a], 0.5 * p.rabi1 * f1[:, a] + 0j)
                _add_coupling(h, self._upper[a], 0.5 * p.rabi2 * f2[:, a] + 0j)
                _add_diagonal(h, self._n['0'][a], p.k('01') * w1 * s1[:, a] + p.k('02') * w2 * s2[:, a])
                _add_diagonal(h, self._n['1'][a], p.k('11') * w1 * s1[:, a] + p.k('12') * w2 * s2[:, a])
                _add_diagonal(h, self._n['e'][a], -(big_delta + d1))
                _add_diagonal(h, self._n['r'][a], -(d1 + d2 - p.k('r1') * w1 * s1[:, a]
                                                    - p.k('r2') * w2 * s2[:, a]))
            else:
                coupling = p.rabi1 * p.rabi2 * f1[:, a] * f2[:, a] / (4.0 * big_delta)
                _add_coupling(h, self._raise[a], coupling + 0j)
                _add_diagonal(h, self._n['0'][a], p.relative_kappa('0', 1) * w1 * s1[:, a]
                              + p.relative_kappa('0', 2) * w2 * s2[:, a])
                self_shift = (w1 * s1[:, a] - w2 * s2[:, a]) / (4.0 * big_delta)
                _add_diagonal(h, self._n['r'][a], p.relative_kappa('r', 1) * w1 * s1[:, a]
                              + p.relative_kappa('r', 2) * w2 * s2[:, a] - (d1 + d2 + self_shift))
        return h

    def frequency_operator(self, arm: str = 'arm1') -> np.ndarray:
        self._check_arm(arm)
        op = -TWO_PI * self.scheme.number_operator('r')
        if self.mode == 'four_level' and arm == 'arm1':
            op = op - TWO_PI * self.scheme.number_operator('e')
        return op

    def drive_max(self) -> float:
        p = self.params
        if self.mode == 'four_level':
            return 0.5 * max(p.rabi1, p.rabi2)
        return math.sqrt(2) * 0.5 * p.effective_rabi

    def on_scheme(self, scheme: LevelScheme) -> 'TwoPhotonGate':
        return TwoPhotonGate(replace(self.params, pulse=self.pulse), self.mode, scheme)


def build_ideal_hamiltonian(params: TimeOptimalParams, scheme: LevelScheme,
                            grid: Optional[TimeGrid] = None) -> np.ndarray:
    gate = TimeOptimalGate(params, scheme)
    grid = grid or gate.default_grid()
    return gate.hamiltonian(grid.midpoints)


def build_realistic_hamiltonian(params: RealisticGateParams, scheme: Optional[LevelScheme] = None,
                                grid: Optional[TimeGrid] = None) -> np.ndarray:
    gate = RealisticGate(params, scheme)
    grid = grid or gate.default_grid()
    if grid.duration > params.pulse.duration * (1 + 1e-12) + grid.dt / 2:
        raise ValueError("Envelope/grid mismatch: grid extends beyond the pulse")
    return gate.hamiltonian(grid.midpoints)


def build_two_photon_hamiltonian(params: TwoPhotonParams, mode: str = 'four_level',
                                 grid: Optional[TimeGrid] = None) -> np.ndarray:
    gate = TwoPhotonGate(params, mode)
    grid = grid or gate.default_grid()
    return gate.hamiltonian(grid.midpoints)


@dataclass
class CalibrationResult:
    params: Union[TimeOptimalParams, RealisticGateParams]
    residual: float
    converged: bool
    evaluations: int


def _unit_problem(initial) -> Tuple[str, Tuple, Tuple[float, ...], float]:
    """Problem key at Omega = 1 and the scale that maps it back"""
    if isinstance(initial, RealisticGateParams):
        omega = initial.pulse.omega
        if not omega > 0:
            raise ValueError(f"Calibration needs a positive Rabi frequency, got {omega}")
        blockade = None if initial.blockade is None else initial.blockade / omega
        key = (initial.rise_time * omega, initial.shape, initial.kappa_r * omega,
               initial.kappa_g * omega, blockade, initial.detuning / omega)
        return 'realistic', key, initial.pulse.dimensionless(), omega
    if isinstance(initial, TimeOptimalParams):
        if not initial.omega > 0:
            raise ValueError(f"Calibration needs a positive Rabi frequency, got {initial.omega}")
        return 'time-optimal', (), initial.dimensionless(), initial.omega
    raise ValueError(f"Cannot calibrate {type(initial).__name__}")


def _unit_gate(kind: str, key: Tuple, blockade: Optional[float], x: Sequence[float]) -> GateProtocol:
    pulse = TimeOptimalParams.from_dimensionless(x, 1.0)
    if kind == 'time-optimal':
        return TimeOptimalGate(pulse, LevelScheme(IDEAL_LEVELS, 2, blockade))
    rise, shape, kappa_r, kappa_g, params_blockade, detuning = key
    if 2 * rise > pulse.duration:
        rise = 0.5 * pulse.duration
    params = RealisticGateParams(pulse, rise, shape, kappa_r, kappa_g, params_blockade, detuning)
    return RealisticGate(params, LevelScheme(IDEAL_LEVELS, 2, blockade))


@lru_cache(maxsize=64)
def _calibrate_unit(kind: str, key: Tuple, blockade: Optional[float], x0: Tuple[float, ...],
                    n_steps: int, tol: float) -> Tuple[Tuple[float, ...], float, bool, int]:
    evaluations = 0

    def objective(x):
        nonlocal evaluations
        evaluations += 1
        if x[4] <= 0:
            return 1.0 + abs(x[4])
        gate = _unit_gate(kind, key, blockade, x)
        grid = TimeGrid.spanning(gate.duration, n_steps)
        try:
            u = gate.propagator(grid)
        except ValueError:
            return 1.0
        return cz_infidelity(u, gate.scheme, 'sym')

    steps = np.array([0.05, 0.02, 0.05, 0.02, 0.1])
    flipped = np.array(x0, dtype=float)
    flipped[2] = -flipped[2]
    starts = [np.array(x0, dtype=float), flipped]

    best_x, best_f = starts[0], objective(starts[0])
    for start in starts:
        x, f = start, objective(start)
        scale = 1.0
        for attempt in range(Config.CALIBRATION_MAX_RESTARTS + 1):
            simplex = np.vstack([x] + [x + scale * steps[i] * np.eye(5)[i] for i in range(5)])
            res = minimize(objective, x, method='Nelder-Mead',
                           options={'initial_simplex': simplex, 'xatol': 1e-10, 'fatol': 1e-14,
                                    'maxiter': Config.CALIBRATION_MAX_ITER,
                                    'maxfev': 2 * Config.CALIBRATION_MAX_ITER})
            if res.fun <= f:
                x, f = res.x, float(res.fun)
            if f < tol:
                break
            scale *= 0.3
        if f < best_f:
            best_x, best_f = x, f
        if best_f < tol:
            break

    return tuple(float(v) for v in best_x), best_f, bool(best_f < tol), evaluations


def calibrate_protocol(initial: Union[TimeOptimalParams, RealisticGateParams],
                       scheme: Optional[LevelScheme] = None,
                       n_steps: Optional[int] = None) -> CalibrationResult:
    """
    Nelder-Mead over (A, omega_m / Omega, offset, Delta / Omega, Omega T)
    minimizing the symmetric-subspace CZ infidelity after virtual-Z
    compensation. The search runs in units of Omega, so equal problems at
    different Rabi frequencies return identical dimensionless parameters.
    """
    kind, key, x0, omega = _unit_problem(initial)
    if scheme is not None:
        blockade = None if scheme.blockade is None else scheme.blockade / omega
    elif kind == 'realistic':
        blockade = key[4]
    else:
        blockade = None
    n_steps = n_steps or Config.STEPS_PER_GATE

    # x0 rounded so equal unit problems share a cache entry
    x, residual, converged, evaluations = _calibrate_unit(
        kind, key, blockade, tuple(float(f"{v:.12g}") for v in x0), int(n_steps), Config.CALIBRATION_TOL
    )

    gate = _unit_gate(kind, key, blockade, x)
    u = gate.propagator(TimeGrid.spanning(gate.duration, n_steps))
    try:
        phase = extract_single_atom_phase(u, gate.scheme)
    except ValueError as e:
        logger.warning(f"Calibrated gate leaks: {e}")
        block = computational_block(u, gate.scheme)
        phase = wrap_phase(np.angle(block[1, 1]) - np.angle(block[0, 0]))
    pulse = TimeOptimalParams.from_dimensionless(x, omega, single_atom_phase=phase)
    params = pulse if kind == 'time-optimal' else initial.with_pulse(pulse)

    if converged:
        logger.info(f"Calibrated {kind} gate at Omega/2pi = {omega / TWO_PI:.6g} Hz: "
                    f"residual {residual:.3e}, phase {phase:.6f} rad")
    else:
        logger.warning(f"Calibration of {kind} gate did not converge: best residual {residual:.3e}")
    return CalibrationResult(params=params, residual=residual, converged=converged,
                             evaluations=evaluations)


def calibrated_time_optimal(omega: float, scheme: Optional[LevelScheme] = None) -> TimeOptimalParams:
    return calibrate_protocol(TimeOptimalParams.initial_guess(omega), scheme).params


DESCRIPTOR_KEYS = (
    'protocol', 'rabi_hz', 'rise_s', 'shape', 'blockade_hz', 'kappa_r', 'kappa_g', 'detuning_hz',
    'levels', 'mode', 'rabi1_hz', 'rabi2_hz', 'intermediate_detuning_hz',
    'kappa_01', 'kappa_02', 'kappa_11', 'kappa_12', 'kappa_r1', 'kappa_r2',
    'amplitude', 'modulation_ratio', 'phase_offset', 'detuning_ratio', 'rabi_area',
)
PULSE_KEYS = ('amplitude', 'modulation_ratio', 'phase_offset', 'detuning_ratio', 'rabi_area')
LEVEL_SETS = {'ideal': IDEAL_LEVELS, 'decay': DECAY_LEVELS}


def parse_descriptor(path: str) -> Dict[str, str]:
    settings: Dict[str, str] = {}
    with open(path, 'r', encoding='utf-8') as f:
        for line_no, raw in enumerate(f, start=1):
            line = raw.split('#', 1)[0].strip()
            if not line:
                continue
            if '=' not in line:
                raise ValueError(f"{path}: row {line_no} is not 'key = value'")
            key, value = (part.strip() for part in line.split('=', 1))
            if key not in DESCRIPTOR_KEYS:
                raise ValueError(f"{path}: row {line_no} has unknown key '{key}'")
            settings[key] = value
    if 'protocol' not in settings:
        raise ValueError(f"{path}: missing required key 'protocol'")
    return settings


def _float(settings: Dict[str, str], key: str, default: Optional[float] = None) -> Optional[float]:
    if key not in settings:
        return default
    try:
        return float(settings[key])
    except ValueError:
        raise ValueError(f"Descriptor key '{key}' is not a number: {settings[key]}")


def protocol_from_settings(settings: Dict[str, str]) -> GateProtocol:
    kind = settings['protocol']
    blockade_hz = settings.get('blockade_hz', 'inf')
    blockade = None if blockade_hz.lower() == 'inf' else TWO_PI * float(blockade_hz)
    levels = LEVEL_SETS.get(settings.get('levels', 'ideal'))
    if levels is None:
        raise ValueError(f"Unknown levels '{settings.get('levels')}', expected one of {', '.join(LEVEL_SETS)}")
    pulse_x = [_float(settings, k) for k in PULSE_KEYS]

    if kind in ('time-optimal', 'realistic'):
        rabi_hz = _float(settings, 'rabi_hz')
        if rabi_hz is None or rabi_hz <= 0:
            raise ValueError("Descriptor needs a positive 'rabi_hz'")
        omega = TWO_PI * rabi_hz
        scheme = LevelScheme(levels, 2, blockade)
        if kind == 'time-optimal':
            if all(v is not None for v in pulse_x):
                pulse = TimeOptimalParams.from_dimensionless(pulse_x, omega)
                u = TimeOptimalGate(pulse, scheme.with_levels(IDEAL_LEVELS)).propagator()
                pulse = replace(pulse, single_atom_phase=extract_single_atom_phase(u, scheme.with_levels(IDEAL_LEVELS)))
            else:
                pulse = calibrated_time_optimal(omega, scheme.with_levels(IDEAL_LEVELS))
            return TimeOptimalGate(pulse, scheme)
        params = RealisticGateParams(
            pulse=TimeOptimalParams.initial_guess(omega),
            rise_time=_float(settings, 'rise_s', Config.RISE_TIME_S),
            shape=settings.get('shape', 'raised_cosine'),
            kappa_r=_float(settings, 'kappa_r', 0.0),
            kappa_g=_float(settings, 'kappa_g', 0.0),
            blockade=blockade,
            detuning=TWO_PI * _float(settings, 'detuning_hz', 0.0),
        )
        if all(v is not None for v in pulse_x):
            params = params.with_pulse(TimeOptimalParams.from_dimensionless(pulse_x, omega))
        else:
            guess = calibrated_time_optimal(omega)
            area = guess.omega * guess.duration + omega * params.rise_time
            start = TimeOptimalParams.from_dimensionless(guess.dimensionless()[:4] + (area,), omega)
            params = calibrate_protocol(params.with_pulse(start)).params
        return RealisticGate(params, scheme)

    if kind == 'two-photon':
        kappa = {k.split('_', 1)[1]: float(settings[k]) for k in settings if k.startswith('kappa_')
                 and k not in ('kappa_r', 'kappa_g')}
        params = TwoPhotonParams(
            rabi1=TWO_PI * _float(settings, 'rabi1_hz', 0.0),
            rabi2=TWO_PI * _float(settings, 'rabi2_hz', 0.0),
            intermediate_detuning=TWO_PI * _float(settings, 'intermediate_detuning_hz', 0.0),
            kappa=kappa,
            blockade=blockade,
        )
        if all(v is not None for v in pulse_x):
            params = replace(params, pulse=TimeOptimalParams.from_dimensionless(pulse_x, params.effective_rabi))
        return TwoPhotonGate(params, settings.get('mode', 'four_level'))

    raise ValueError(f"Unknown protocol '{kind}' (expected time-optimal, realistic or two-photon)")


def load_protocol_descriptor(path: str) -> GateProtocol:
    return protocol_from_settings(parse_descriptor(path))


def descriptor_settings(protocol: GateProtocol) -> Dict[str, str]:
    settings: Dict[str, str] = {}
    scheme = protocol.scheme
    settings['blockade_hz'] = 'inf' if scheme.blockade is None else repr(scheme.blockade / TWO_PI)
    if isinstance(protocol, TwoPhotonGate):
        p = protocol.params
        settings.update({
            'protocol': 'two-photon', 'mode': protocol.mode,
            'rabi1_hz': repr(p.rabi1 / TWO_PI), 'rabi2_hz': repr(p.rabi2 / TWO_PI),
            'intermediate_detuning_hz': repr(p.intermediate_detuning / TWO_PI),
        })
        for k, v in sorted(p.kappa.items()):
            settings[f'kappa_{k}'] = repr(v)
        pulse = protocol.pulse
    elif isinstance(protocol, RealisticGate):
        p = protocol.params
        settings.update({
            'protocol': 'realistic', 'rabi_hz': repr(p.pulse.omega / TWO_PI), 'rise_s': repr(p.rise_time),
            'shape': p.shape, 'kappa_r': repr(p.kappa_r), 'kappa_g': repr(p.kappa_g),
            'detuning_hz': repr(p.detuning / TWO_PI),
        })
        pulse = p.pulse
    elif isinstance(protocol, TimeOptimalGate):
        settings.update({'protocol': 'time-optimal', 'rabi_hz': repr(protocol.params.omega / TWO_PI)})
        pulse = protocol.params
    else:
        raise ValueError(f"Protocol '{protocol.name}' has no descriptor form")
    if scheme.levels == DECAY_LEVELS:
        settings['levels'] = 'decay'
    for key, value in zip(PULSE_KEYS, pulse.dimensionless()):
        settings[key] = repr(float(value))
    return settings


def save_protocol_descriptor(protocol: GateProtocol, path: str):
    with open(path, 'w', encoding='utf-8') as f:
        for key, value in descriptor_settings(protocol).items():
            f.write(f"{key} = {value}\n")
