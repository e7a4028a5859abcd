"""
Symmetric stabilizer benchmarking of a CZ gate.

A benchmark instance starts in |11>, prepares one of the twelve
exchange-symmetric two-qubit stabilizer states with U_init, applies N random
global pi/2 rotations with a CZ after each of the first N_CZ - 2 of them and
returns to |11> with U_rec. The stabilizer state is tracked classically
through Pauli conjugation of its stabilizer generators, so U_rec can be
looked up from the final state alone.

Circuits are simulated as 4x4 density matrices. Single-qubit gates carry an
optional error channel. CZ gates are either an analytic channel, a set of
sampled comparison maps from the trajectory simulator or fresh Hamiltonian
trajectories. Population that leaks into the bright (imaged) level counts
half towards the |11> outcome.
"""

import csv
import math
import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from joblib import Parallel, delayed
from scipy.optimize import brentq, least_squares, minimize_scalar

from config import Config
from noise_model import SeedLike, make_rng
from gate_protocols import (
    SSS_TABLE, GateProtocol, computational_block, cz_target, symmetric_stabilizer_states,
    wrap_phase,
)
from trajectory_sim import (
    BRIGHT_LEVEL, ChannelEstimate, ErrorModelConfig, prepare_protocol, run_trajectory,
)

logger = logging.getLogger(__name__)

ROTATIONS = ('X', '-X', 'Y', '-Y')
CZ_OP = 'CZ'
SHOT_MODES = ('independent', 'coherent')
DATASET_HEADER = ['n_cz', 'p11', 'err', 'shots']

F_MIN = 1e-6
F_MAX = 1.02

# Rotation strings per target state, in SSS_TABLE order. U_init: R1 R2 CZ R3 R4 R5 from |11>.
INIT_STRINGS: Tuple[Tuple[str, ...], ...] = (
    ('X', 'X', 'Y', '-Y', 'Y'),
    ('X', '-X', 'Y', '-Y', 'Y'),
    ('X', '-X', 'X', '-X', 'X'),
    ('X', 'X', 'X', '-X', 'X'),
    ('X', 'X', 'X', '-Y', '-X'),
    ('X', '-X', 'X', '-Y', '-X'),
    ('-X', '-Y', 'X', '-Y', '-X'),
    ('X', 'Y', 'X', '-Y', '-X'),
    ('-X', '-Y', 'X', '-X', 'X'),
    ('X', 'Y', 'X', '-X', 'X'),
    ('X', 'Y', 'Y', '-Y', 'Y'),
    ('-X', '-Y', 'Y', '-Y', 'Y'),
)

# U_rec: R1 R2 CZ R3 R4 back to |11>.
REC_STRINGS: Tuple[Tuple[str, ...], ...] = (
    ('X', '-Y', 'X', 'X'),
    ('X', 'Y', 'X', 'X'),
    ('Y', 'X', 'X', 'X'),
    ('Y', '-X', 'X', 'X'),
    ('-X', 'X', 'X', 'X'),
    ('X', 'X', 'X', 'X'),
    ('-X', 'Y', 'Y', 'X'),
    ('X', 'Y', 'Y', 'X'),
    ('Y', 'Y', 'Y', 'X'),
    ('X', 'X', 'Y', 'X'),
    ('-Y', 'X', 'Y', 'X'),
    ('Y', 'X', 'Y', 'X'),
)

_PAULI = {
    'I': np.eye(2, dtype=complex),
    'X': np.array([[0, 1], [1, 0]], dtype=complex),
    'Y': np.array([[0, -1j], [1j, 0]], dtype=complex),
    'Z': np.array([[1, 0], [0, -1]], dtype=complex),
}
_PAULI_STRINGS = [a + b for a in 'IXYZ' for b in 'IXYZ']

PauliString = Tuple[int, str]


def _pauli_matrix(op: PauliString) -> np.ndarray:
    sign, s = op
    return sign * np.kron(_PAULI[s[0]], _PAULI[s[1]])


def parse_stabilizers(label: str) -> Tuple[PauliString, PauliString]:
    """'-XZ,-ZX' -> ((-1, 'XZ'), (-1, 'ZX')); the first letter acts on qubit 1"""
    parts = label.split(',')
    if len(parts) != 2:
        raise ValueError(f"Stabilizer label '{label}' needs two generators")
    gens = []
    for part in parts:
        part = part.strip()
        sign = -1 if part.startswith('-') else 1
        s = part.lstrip('+-')
        if len(s) != 2 or any(c not in _PAULI for c in s):
            raise ValueError(f"Bad Pauli string '{part}' in label '{label}'")
        gens.append((sign, s))
    return gens[0], gens[1]


def _pauli_product(a: PauliString, b: PauliString) -> PauliString:
    m = _pauli_matrix(a) @ _pauli_matrix(b)
    return _match_pauli(m)


def _match_pauli(m: np.ndarray) -> PauliString:
    """Identify m = +-P for a two-qubit Pauli string P"""
    for s in _PAULI_STRINGS:
        c = np.trace(_pauli_matrix((1, s)).conj().T @ m) / 4
        if abs(abs(c) - 1) < 1e-9:
            if abs(c.imag) > 1e-9:
                raise ValueError("Operator is an imaginary multiple of a Pauli string")
            return (1 if c.real > 0 else -1, s)
    raise ValueError("Operator is not a signed Pauli string")


@dataclass(frozen=True)
class SymmetricStabilizerState:
    id: int
    label: str
    amplitudes: np.ndarray = field(compare=False)

    @property
    def stabilizers(self) -> Tuple[PauliString, PauliString]:
        return parse_stabilizers(self.label)

    @property
    def group(self) -> Tuple[PauliString, ...]:
        s1, s2 = self.stabilizers
        return (s1, s2, _pauli_product(s1, s2))

    def is_stabilized(self, tol: float = 1e-12) -> bool:
        psi = self.amplitudes
        return all(np.allclose(_pauli_matrix(g) @ psi, psi, atol=tol) for g in self.stabilizers)


def sss_table() -> List[SymmetricStabilizerState]:
    """The twelve symmetric stabilizer states, checked against their stabilizer labels"""
    states = [SymmetricStabilizerState(i, label, np.asarray(amps, dtype=complex))
              for i, (label, amps) in enumerate(SSS_TABLE)]
    swap = np.eye(4)[[0, 2, 1, 3]]
    for st in states:
        if abs(np.linalg.norm(st.amplitudes) - 1) > 1e-12:
            raise ValueError(f"State {st.label} is not normalized")
        if not np.allclose(swap @ st.amplitudes, st.amplitudes):
            raise ValueError(f"State {st.label} is not exchange symmetric")
        if not st.is_stabilized():
            raise ValueError(f"State {st.label} is not stabilized by its generators")
    return states


def frame_potential(states: np.ndarray, t: int = 2) -> float:
    """(1/N^2) sum_ij |<psi_i|psi_j>|^(2t)"""
    states = np.asarray(states, dtype=complex)
    if t not in (1, 2):
        raise ValueError(f"Frame potential order must be 1 or 2, got {t}")
    norms = np.linalg.norm(states, axis=1)
    if np.any(np.abs(norms - 1) > 1e-9):
        raise ValueError("Frame potential needs normalized states")
    overlaps = np.abs(np.conj(states) @ states.T) ** (2 * t)
    return float(overlaps.sum() / states.shape[0] ** 2)


def rotation_matrix(label: str) -> np.ndarray:
    """R_n(pi/2) = (I - i n.sigma) / sqrt(2) on one qubit"""
    if label not in ROTATIONS:
        raise ValueError(f"Unknown rotation '{label}', expected one of {', '.join(ROTATIONS)}")
    sign = -1.0 if label.startswith('-') else 1.0
    axis = _PAULI[label[-1]]
    return (np.eye(2) - 1j * sign * axis) / math.sqrt(2)


def global_rotation(label: str) -> np.ndarray:
    r = rotation_matrix(label)
    return np.kron(r, r)


def _operation_matrix(op: str) -> np.ndarray:
    return cz_target() if op == CZ_OP else global_rotation(op)


def _build_transition_table() -> np.ndarray:
    """table[s, j]: state reached from s under ROTATIONS[j] (j < 4) or CZ (j = 4)"""
    states = sss_table()
    by_group = {frozenset(st.group): st.id for st in states}
    table = np.empty((len(states), len(ROTATIONS) + 1), dtype=int)
    for j, op in enumerate(ROTATIONS + (CZ_OP,)):
        u = _operation_matrix(op)
        for st in states:
            image = frozenset(_match_pauli(u @ _pauli_matrix(g) @ u.conj().T) for g in st.group)
            if image not in by_group:
                raise ValueError(f"{op} maps {st.label} outside the symmetric stabilizer states")
            table[st.id, j] = by_group[image]
    return table


TRANSITIONS = _build_transition_table()


def _op_column(op: str) -> int:
    return len(ROTATIONS) if op == CZ_OP else ROTATIONS.index(op)


def _apply_string(psi: np.ndarray, ops: Sequence[str]) -> np.ndarray:
    for op in ops:
        psi = _operation_matrix(op) @ psi
    return psi


def _with_cz(rotations: Sequence[str]) -> List[str]:
    return list(rotations[:2]) + [CZ_OP] + list(rotations[2:])


def verify_transition_table() -> int:
    """
    Compare the classical tracking with state-vector evolution for every
    state and operation, and check U_init and U_rec for every state.
    Returns the number of checked cases.
    """
    states = symmetric_stabilizer_states()
    checked = 0
    for j, op in enumerate(ROTATIONS + (CZ_OP,)):
        column = TRANSITIONS[:, j]
        if sorted(column.tolist()) != list(range(len(states))):
            raise ValueError(f"Transitions under {op} are not a permutation")
        for s in range(len(states)):
            psi = _operation_matrix(op) @ states[s]
            if abs(np.vdot(states[column[s]], psi)) < 1 - 1e-9:
                raise ValueError(f"{op} on {SSS_TABLE[s][0]} does not give {SSS_TABLE[column[s]][0]}")
            checked += 1

    ket11 = np.eye(4, dtype=complex)[3]
    for s in range(len(states)):
        prepared = _apply_string(ket11, _with_cz(INIT_STRINGS[s]))
        if abs(np.vdot(states[s], prepared)) < 1 - 1e-9:
            raise ValueError(f"U_init does not prepare {SSS_TABLE[s][0]}")
        recovered = _apply_string(states[s], _with_cz(REC_STRINGS[s]))
        if abs(recovered[3]) < 1 - 1e-9:
            raise ValueError(f"U_rec does not return {SSS_TABLE[s][0]} to |11>")
        checked += 2
    return checked


@dataclass(frozen=True)
class CircuitInstance:
    initial_id: int
    init_rotations: Tuple[str, ...]
    core_rotations: Tuple[str, ...]
    n_cz: int
    core_states: Tuple[int, ...]
    final_id: int
    rec_rotations: Tuple[str, ...]
    virtual_phase: Optional[float] = None

    @property
    def n_rotations(self) -> int:
        return len(self.core_rotations)

    def operations(self) -> List[Tuple[str, str]]:
        """(operation, stage) pairs in temporal order; stage is init, core or rec"""
        ops = [(op, 'init') for op in _with_cz(self.init_rotations)]
        for i, rot in enumerate(self.core_rotations):
            ops.append((rot, 'core'))
            if i < self.n_cz - 2:
                ops.append((CZ_OP, 'core'))
        ops.extend((op, 'rec') for op in _with_cz(self.rec_rotations))
        return ops


def build_instance(rng_seed: SeedLike, n_rotations: int, n_cz: int) -> CircuitInstance:
    if n_cz < 2 or n_rotations < n_cz - 2:
        raise ValueError(f"Need N >= N_CZ - 2 >= 0, got N = {n_rotations}, N_CZ = {n_cz}")
    rng = make_rng(rng_seed)
    initial = int(rng.integers(len(SSS_TABLE)))
    picks = rng.integers(len(ROTATIONS), size=n_rotations)

    state = initial
    visited = []
    for i, j in enumerate(picks):
        state = TRANSITIONS[state, j]
        if i < n_cz - 2:
            state = TRANSITIONS[state, _op_column(CZ_OP)]
        visited.append(int(state))

    return CircuitInstance(
        initial_id=initial,
        init_rotations=INIT_STRINGS[initial],
        core_rotations=tuple(ROTATIONS[j] for j in picks),
        n_cz=n_cz,
        core_states=tuple(visited),
        final_id=int(state),
        rec_rotations=REC_STRINGS[state],
    )


def _superop(a: np.ndarray) -> np.ndarray:
    """Matrix of rho -> a rho a^dagger on row-major vec(rho)"""
    return np.kron(a, np.conj(a))


_VEC_IDENTITY = np.eye(4, dtype=complex).reshape(16)


def _depolarizer(strength: float) -> np.ndarray:
    """rho -> (1 - d) rho + d Tr(rho) I / 4"""
    return (1 - strength) * np.eye(16) + strength * np.outer(_VEC_IDENTITY / 4, _VEC_IDENTITY)


def virtual_z(phase: float) -> np.ndarray:
    z = np.diag([1.0, np.exp(-1j * phase)])
    return np.kron(z, z)


@dataclass(frozen=True)
class SingleQubitModel:
    """Error channel after every global rotation: ideal, phase_flip(p), depolarizing(d0) or maps"""
    kind: str = 'ideal'
    strength: float = 0.0
    maps: Optional[np.ndarray] = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in ('ideal', 'phase_flip', 'depolarizing', 'maps'):
            raise ValueError(f"Unknown single-qubit model '{self.kind}'")
        if not 0.0 <= self.strength <= 1.0:
            raise ValueError(f"Single-qubit error strength must be in [0, 1], got {self.strength}")
        if self.kind == 'maps' and (self.maps is None or np.asarray(self.maps).shape[1:] != (4, 4)):
            raise ValueError("The maps model needs an array of 4x4 maps")

    @classmethod
    def ideal(cls) -> 'SingleQubitModel':
        return cls()

    @classmethod
    def phase_flip(cls, p: float) -> 'SingleQubitModel':
        return cls('phase_flip', p)

    @classmethod
    def depolarizing(cls, d0: float) -> 'SingleQubitModel':
        return cls('depolarizing', d0)

    @property
    def is_ideal(self) -> bool:
        return self.kind == 'ideal' or (self.kind != 'maps' and self.strength == 0.0)

    def superoperator(self) -> np.ndarray:
        if self.kind == 'phase_flip':
            z = _PAULI['Z']
            flip1 = (1 - self.strength) * np.eye(16) + self.strength * _superop(np.kron(z, _PAULI['I']))
            flip2 = (1 - self.strength) * np.eye(16) + self.strength * _superop(np.kron(_PAULI['I'], z))
            return flip1 @ flip2
        if self.kind == 'depolarizing':
            return _depolarizer(self.strength)
        if self.kind == 'maps':
            return np.mean([_superop(a) for a in np.asarray(self.maps)], axis=0)
        return np.eye(16, dtype=complex)


class CZModel:
    """
    Sampled CZ maps on the computational block with their bright-leakage
    fractions per input column. default_phase is the virtual-Z phase that
    compensates the single-atom phase of the maps.
    """

    sampled = True
    exact_only = False

    def __init__(self, raw_maps: np.ndarray, bright: Optional[np.ndarray] = None,
                 default_phase: float = 0.0, name: str = 'maps'):
        raw_maps = np.asarray(raw_maps, dtype=complex)
        if raw_maps.ndim == 2:
            raw_maps = raw_maps[None]
        if raw_maps.shape[0] < 1 or raw_maps.shape[1:] != (4, 4):
            raise ValueError("CZ channel ensemble is empty or not 4x4")
        self.raw_maps = raw_maps
        self.bright = np.zeros((raw_maps.shape[0], 4)) if bright is None else np.asarray(bright, dtype=float)
        if self.bright.shape != (raw_maps.shape[0], 4):
            raise ValueError(f"Bright fractions have shape {self.bright.shape}, expected {(raw_maps.shape[0], 4)}")
        self.default_phase = float(default_phase)
        self.name = name
        self._average = None

    @classmethod
    def ideal(cls) -> 'CZModel':
        return cls(cz_target(), name='ideal')

    @classmethod
    def from_unitary(cls, u: np.ndarray, scheme=None) -> 'CZModel':
        block = computational_block(np.asarray(u), scheme)
        phase = wrap_phase(np.angle(block[1, 1]) - np.angle(block[0, 0]))
        return cls(block, default_phase=phase, name='unitary')

    @classmethod
    def from_channel(cls, channel: ChannelEstimate) -> 'CZModel':
        return cls(channel.raw_maps, channel.bright, channel.single_atom_phase, name='channel')

    @property
    def n_samples(self) -> int:
        return int(self.raw_maps.shape[0])

    def average(self) -> Tuple[np.ndarray, np.ndarray]:
        """Ensemble-averaged superoperator and bright fractions"""
        if self._average is None:
            sup = np.einsum('kij,kab->iajb', self.raw_maps, np.conj(self.raw_maps)).reshape(16, 16)
            self._average = (sup / self.n_samples, self.bright.mean(axis=0))
        return self._average

    def sample(self, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
        k = int(rng.integers(self.n_samples))
        return self.raw_maps[k], self.bright[k]


class AnalyticCZModel(CZModel):
    """CZ followed by two-qubit depolarizing of strength d, then loss with probability eps"""

    sampled = False

    def __init__(self, depolarizing: float = 0.0, leakage: float = 0.0):
        if not (0.0 <= depolarizing <= 1.0 and 0.0 <= leakage <= 1.0):
            raise ValueError(f"Analytic CZ parameters must be in [0, 1], got d = {depolarizing}, eps = {leakage}")
        super().__init__(cz_target(), name='analytic')
        self.depolarizing = depolarizing
        self.leakage = leakage

    def average(self) -> Tuple[np.ndarray, np.ndarray]:
        sup = (1 - self.leakage) * _depolarizer(self.depolarizing) @ _superop(cz_target())
        return sup, np.zeros(4)


class HamiltonianCZModel(CZModel):
    """Every CZ is a fresh noisy trajectory of the full gate Hamiltonian"""

    exact_only = True

    def __init__(self, protocol: GateProtocol, config: ErrorModelConfig):
        self.protocol = prepare_protocol(protocol, config)
        self.config = config
        self.grid = self.protocol.default_grid()
        u0 = computational_block(self.protocol.propagator(self.grid), self.protocol.scheme)
        super().__init__(u0, default_phase=wrap_phase(np.angle(u0[1, 1]) - np.angle(u0[0, 0])),
                         name=f'hamiltonian:{protocol.name}')
        scheme = self.protocol.scheme
        self._comp = scheme.computational_indices
        self._bright_rows = [i for i in range(scheme.dim) if BRIGHT_LEVEL in scheme.basis[i]]

    def average(self):
        raise ValueError("Hamiltonian CZ gates can only be sampled")

    def sample(self, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
        seed = tuple(int(x) for x in rng.integers(2 ** 31, size=2))
        result = run_trajectory(self.protocol, self.config, seed, grid=self.grid)
        a, pops = result.propagator, result.populations
        bright = pops[self._bright_rows].sum(axis=0) if self._bright_rows else np.zeros(4)
        return a[self._comp], bright


CZLike = Union[CZModel, ChannelEstimate, np.ndarray]


def as_cz_model(cz: CZLike) -> CZModel:
    if isinstance(cz, CZModel):
        return cz
    if isinstance(cz, ChannelEstimate):
        return CZModel.from_channel(cz)
    return CZModel.from_unitary(cz)


_ROTATION_SUPEROPS = {label: _superop(global_rotation(label)) for label in ROTATIONS}


def simulate_instance(inst: CircuitInstance, single_qubit_model: Optional[SingleQubitModel] = None,
                      cz_model: CZLike = None, shot_mode: str = 'independent',
                      rng_seed: SeedLike = 0, virtual_phase: Optional[float] = None,
                      noisy_frame: bool = True, sample_maps: bool = False) -> float:
    """
    P_|11> of one instance. In independent mode every CZ is drawn from the
    ensemble (or, unless sample_maps is set, the draw is averaged out exactly
    through the mean superoperator); in coherent mode one draw serves every
    CZ of the instance. noisy_frame=False keeps U_init and U_rec ideal.
    """
    if shot_mode not in SHOT_MODES:
        raise ValueError(f"Unknown shot mode '{shot_mode}', expected one of {', '.join(SHOT_MODES)}")
    single_qubit_model = single_qubit_model or SingleQubitModel.ideal()
    model = as_cz_model(CZModel.ideal() if cz_model is None else cz_model)

    if virtual_phase is None:
        virtual_phase = inst.virtual_phase if inst.virtual_phase is not None else model.default_phase
    vz = virtual_z(virtual_phase)
    rng = make_rng(rng_seed)

    fixed = None
    per_gate = False
    if model.sampled and (shot_mode == 'coherent' or sample_maps or model.exact_only):
        if shot_mode == 'coherent':
            fixed = model.sample(rng)
        else:
            per_gate = True
    if fixed is None and not per_gate:
        sup, bright_avg = model.average()
        cz_sup = _superop(vz) @ sup

    err_sup = None if single_qubit_model.is_ideal else single_qubit_model.superoperator()
    rho = np.zeros((4, 4), dtype=complex)
    rho[3, 3] = 1.0
    rho = rho.reshape(16)
    bright_total = 0.0

    for op, stage in inst.operations():
        if op != CZ_OP:
            rho = _ROTATION_SUPEROPS[op] @ rho
            if err_sup is not None and (noisy_frame or stage == 'core'):
                rho = err_sup @ rho
            continue
        pops = np.real(np.diag(rho.reshape(4, 4)))
        if fixed is None and not per_gate:
            bright_total += float(pops @ bright_avg)
            rho = cz_sup @ rho
            continue
        raw, bright = fixed if fixed is not None else model.sample(rng)
        bright_total += float(pops @ bright)
        a = vz @ raw
        rho = (a @ rho.reshape(4, 4) @ np.conj(a.T)).reshape(16)

    if not np.all(np.isfinite(rho)):
        raise FloatingPointError("Non-finite density matrix in circuit simulation")
    p11 = float(np.real(rho[15])) + 0.5 * bright_total
    if not -1e-9 <= p11 <= 1 + 1e-9:
        raise ValueError(f"Return probability {p11:.9f} is outside [0, 1]; the CZ maps are not a channel")
    return min(max(p11, 0.0), 1.0)  # roundoff only


@dataclass(frozen=True)
class SSBRow:
    n_cz: int
    p11: float
    err: float
    shots: int = 0
    instances: int = 0


@dataclass
class SSBDataset:
    rows: List[SSBRow]

    def __post_init__(self):
        for i, row in enumerate(self.rows):
            if row.n_cz < 2:
                raise ValueError(f"Row {i + 1}: N_CZ must be >= 2, got {row.n_cz}")
            if not 0.0 <= row.p11 <= 1.0:
                raise ValueError(f"Row {i + 1}: probability {row.p11} outside [0, 1]")
            if not (row.err >= 0 and math.isfinite(row.err)):
                raise ValueError(f"Row {i + 1}: uncertainty must be finite and >= 0, got {row.err}")

    @property
    def n_cz(self) -> np.ndarray:
        return np.array([r.n_cz for r in self.rows], dtype=float)

    @property
    def p11(self) -> np.ndarray:
        return np.array([r.p11 for r in self.rows])

    @property
    def err(self) -> np.ndarray:
        return np.array([r.err for r in self.rows])

    def save_csv(self, path: str):
        with open(path, 'w', newline='') as f:
            writer = csv.writer(f)
            writer.writerow(DATASET_HEADER)
            for r in self.rows:
                writer.writerow([r.n_cz, '%.17g' % r.p11, '%.17g' % r.err, r.shots])
        logger.info(f"Wrote SSB dataset with {len(self.rows)} points to {path}")

    @classmethod
    def load_csv(cls, path: str) -> 'SSBDataset':
        rows = []
        with open(path, newline='') as f:
            reader = csv.reader(f)
            header = next(reader, None)
            if header is None or [h.strip() for h in header] != DATASET_HEADER:
                raise ValueError(f"{path}: expected header {','.join(DATASET_HEADER)}")
            for line, rec in enumerate(reader, start=2):
                if not rec or not ''.join(rec).strip():
                    continue
                if len(rec) != len(DATASET_HEADER):
                    raise ValueError(f"{path} row {line}: expected {len(DATASET_HEADER)} columns, got {len(rec)}")
                try:
                    rows.append(SSBRow(int(rec[0]), float(rec[1]), float(rec[2]), int(rec[3])))
                except ValueError as e:
                    raise ValueError(f"{path} row {line}: {e}")
        return cls(rows)


def parse_ncz_range(text: str) -> List[int]:
    """'2:10' -> [2, ..., 10]; '2,4,8' -> [2, 4, 8]"""
    text = text.strip()
    try:
        if ':' in text:
            lo, hi = (int(v) for v in text.split(':'))
            values = list(range(lo, hi + 1))
        else:
            values = [int(v) for v in text.split(',') if v.strip()]
    except ValueError:
        raise ValueError(f"Cannot parse N_CZ list '{text}'")
    if not values or min(values) < 2:
        raise ValueError(f"N_CZ values must be >= 2, got '{text}'")
    return values


def instance_seed(master_seed: int, n_cz: int, index: int, stream: int = 0) -> Tuple[int, ...]:
    return (int(master_seed), int(n_cz), int(index), int(stream))


def _benchmark_point(model: CZModel, single: SingleQubitModel, n_rotations: int, n_cz: int,
                     n_instances: int, shots: int, shot_mode: str, master_seed: int,
                     virtual_phase: Optional[float], noisy_frame: bool, sample_maps: bool) -> SSBRow:
    values = np.empty(n_instances)
    for i in range(n_instances):
        inst = build_instance(instance_seed(master_seed, n_cz, i), n_rotations, n_cz)
        p = simulate_instance(inst, single, model, shot_mode, instance_seed(master_seed, n_cz, i, 1),
                              virtual_phase, noisy_frame, sample_maps)
        if shots > 0:
            p = make_rng(instance_seed(master_seed, n_cz, i, 2)).binomial(shots, p) / shots
        values[i] = p

    mean = float(values.mean())
    if n_instances > 1:
        err = float(values.std(ddof=1) / math.sqrt(n_instances))
    elif shots > 0:
        err = math.sqrt(mean * (1 - mean) / shots)
    else:
        err = 0.0
    return SSBRow(n_cz, mean, max(err, Config.SSB_MIN_UNCERTAINTY), shots, n_instances)


def run_benchmark(cz_model: CZLike = None, single_qubit_model: Optional[SingleQubitModel] = None,
                  n_rotations: Optional[int] = None, n_cz_values: Optional[Sequence[int]] = None,
                  n_instances: Optional[int] = None, shots: int = 0, shot_mode: str = 'independent',
                  master_seed: int = 0, virtual_phase: Optional[float] = None,
                  noisy_frame: bool = True, sample_maps: bool = False,
                  n_jobs: Optional[int] = None) -> SSBDataset:
    """
    Mean P_|11> over random instances at every N_CZ. Instance i at N_CZ uses
    seeds (master_seed, N_CZ, i, stream), so the dataset does not depend on
    n_jobs. shots = 0 keeps exact probabilities per instance.
    """
    model = as_cz_model(CZModel.ideal() if cz_model is None else cz_model)
    single = single_qubit_model or SingleQubitModel.ideal()
    n_rotations = Config.SSB_N if n_rotations is None else n_rotations
    n_cz_values = parse_ncz_range(Config.SSB_NCZ) if n_cz_values is None else list(n_cz_values)
    n_instances = Config.CIRCUIT_TRAJECTORIES if n_instances is None else n_instances
    if n_instances < 1:
        raise ValueError(f"Need at least one instance per point, got {n_instances}")
    if shots < 0:
        raise ValueError(f"Shot count must be >= 0, got {shots}")
    for n_cz in n_cz_values:
        if n_cz < 2 or n_rotations < n_cz - 2:
            raise ValueError(f"Need N >= N_CZ - 2 >= 0, got N = {n_rotations}, N_CZ = {n_cz}")

    n_jobs = n_jobs or Config.DEFAULT_THREADS
    args = (single, n_rotations)
    rest = (n_instances, shots, shot_mode, master_seed, virtual_phase, noisy_frame, sample_maps)
    logger.info(f"SSB run: model {model.name}, N = {n_rotations}, N_CZ = {n_cz_values}, "
                f"{n_instances} instances per point, shot mode {shot_mode}")
    if n_jobs == 1 or len(n_cz_values) == 1:
        rows = [_benchmark_point(model, *args, n_cz, *rest) for n_cz in n_cz_values]
    else:
        rows = Parallel(n_jobs=n_jobs)(
            delayed(_benchmark_point)(model, *args, n_cz, *rest) for n_cz in n_cz_values
        )
    return SSBDataset(list(rows))


@dataclass(frozen=True)
class FitOutcome:
    F: float
    a0: float
    stderr: float
    chi2_red: float
    offset: int = 0
    F_corrected: Optional[float] = None
    eps_false: float = 0.0
    stderr_corrected: Optional[float] = None

    def to_dict(self) -> Dict:
        return {
            'F': self.F,
            'a0': self.a0,
            'stderr': self.stderr,
            'chi2_red': self.chi2_red,
            'F_corrected': self.F if self.F_corrected is None else self.F_corrected,
            'eps_false': self.eps_false,
        }


def _profile_chi2(F: float, n: np.ndarray, p: np.ndarray, w: np.ndarray) -> Tuple[float, float]:
    g = F ** n
    a0 = float(np.sum(w * p * g) / np.sum(w * g * g))
    return float(np.sum(w * (p - a0 * g) ** 2)), a0


def ml_fit(data: SSBDataset, offset: int = 0) -> FitOutcome:
    """
    Gaussian maximum likelihood for P = a0 F^(N_CZ - offset). a0 is profiled
    out analytically; the uncertainty of F is where the profiled chi^2 rises
    by one.
    """
    n = data.n_cz - offset
    p = data.p11
    sigma = np.maximum(data.err, Config.SSB_MIN_UNCERTAINTY)
    if np.unique(n).size < 3:
        raise ValueError("The fit needs at least three distinct N_CZ values")
    w = 1.0 / sigma ** 2

    def chi2(F):
        return _profile_chi2(F, n, p, w)[0]

    scan = np.linspace(F_MIN, F_MAX, 4097)
    values = np.array([chi2(F) for F in scan])
    k = int(np.argmin(values))
    lo, hi = scan[max(k - 1, 0)], scan[min(k + 1, scan.size - 1)]
    res = minimize_scalar(chi2, bounds=(lo, hi), method='bounded', options={'xatol': 1e-13})
    F_best = float(res.x)
    best = chi2(F_best)

    a0_best = _profile_chi2(F_best, n, p, w)[1]
    polish = least_squares(lambda x: (p - x[0] * x[1] ** n) * np.sqrt(w), x0=[a0_best, F_best],
                           bounds=([-np.inf, F_MIN], [np.inf, F_MAX]),
                           xtol=1e-15, ftol=1e-15, gtol=1e-15)
    if polish.success and chi2(polish.x[1]) <= best:
        F_best = float(polish.x[1])
        best = chi2(F_best)
    a0_best = _profile_chi2(F_best, n, p, w)[1]

    def excess(F):
        return chi2(F) - best - 1.0

    widths = []
    if F_best < F_MAX and excess(F_MAX) > 0:
        widths.append(brentq(excess, F_best, F_MAX, xtol=1e-15) - F_best)
    if F_best > F_MIN and excess(F_MIN) > 0:
        widths.append(F_best - brentq(excess, F_MIN, F_best, xtol=1e-15))
    if widths:
        stderr = float(np.mean(widths))
    else:
        h = 1e-6
        curvature = (chi2(F_best + h) - 2 * best + chi2(F_best - h)) / h ** 2
        stderr = math.sqrt(2.0 / curvature) if curvature > 0 else float('inf')

    dof = max(n.size - 2, 1)
    fit = FitOutcome(F=F_best, a0=a0_best, stderr=stderr, chi2_red=best / dof, offset=offset)
    logger.info(f"SSB fit: F = {fit.F:.6f} +- {fit.stderr:.2e}, a0 = {fit.a0:.5f}, chi2_red = {fit.chi2_red:.3f}")
    return fit


def leakage_correct(fit: FitOutcome, eps_image: float, eps_image_err: float = 0.0) -> FitOutcome:
    """Subtract the false fidelity eps_image / 2 contributed by imaged leakage"""
    if not 0.0 <= eps_image <= 0.1:
        raise ValueError(f"Imaged leakage must be in [0, 0.1], got {eps_image}")
    if eps_image_err < 0:
        raise ValueError(f"Leakage uncertainty must be >= 0, got {eps_image_err}")
    eps_false = 0.5 * eps_image
    stderr = math.hypot(fit.stderr, 0.5 * eps_image_err)
    return replace(fit, F_corrected=fit.F - eps_false, eps_false=eps_false, stderr_corrected=stderr)


@dataclass(frozen=True)
class DepolarizingErrorModel:
    """Two-qubit depolarizing d0 per global rotation, loss eps per CZ"""
    d0: float
    eps: float

    def return_probability(self, n_rotations: int, n_cz) -> np.ndarray:
        return (0.25 + 0.75 * (1 - self.d0) ** n_rotations) * (1 - self.eps) ** np.asarray(n_cz, dtype=float)

    def first_order_fidelity(self, n_rotations: int) -> float:
        return 1.0 - self.eps

    @property
    def sym_fidelity(self) -> float:
        return 1.0 - self.eps


@dataclass(frozen=True)
class PhaseFlipDepolarizingModel:
    """Phase flip p per qubit per global rotation, two-qubit depolarizing d per CZ"""
    p: float
    d: float

    @property
    def f_sym(self) -> float:
        return 1 - 5.0 / 3.0 * self.p + self.p ** 2

    @property
    def f_prod(self) -> float:
        return 1 - 4.0 / 3.0 * self.p + 8.0 / 15.0 * self.p ** 2

    def return_probability(self, n_rotations: int, n_cz) -> np.ndarray:
        survive = (1 - self.d) ** np.asarray(n_cz, dtype=float)
        return self.f_sym ** n_rotations * survive + 0.25 * (1 - survive)

    def first_order_fidelity(self, n_rotations: int) -> float:
        x = 5.0 / 3.0 * n_rotations * self.p
        return 1.0 - (0.75 - x) / (1 - x) * self.d

    @property
    def sym_fidelity(self) -> float:
        return 1.0 - 0.75 * self.d


AnalyticModel = Union[DepolarizingErrorModel, PhaseFlipDepolarizingModel]


@dataclass(frozen=True)
class AnalyticPrediction:
    n_cz: np.ndarray
    p11: np.ndarray
    F_inferred: float
    F_first_order: float
    F_sym: float


def analytic_return_probability(model: AnalyticModel, n_rotations: int,
                                n_cz_values: Sequence[int]) -> AnalyticPrediction:
    """Closed-form return probabilities and the fidelity the ML fit infers from them"""
    for name, value in vars(model).items():
        if not 0.0 <= value < 1.0:
            raise ValueError(f"Model parameter {name} must be in [0, 1), got {value}")
    n_cz = np.asarray(list(n_cz_values), dtype=int)
    p11 = model.return_probability(n_rotations, n_cz)
    rows = [SSBRow(int(k), float(v), 1e-4) for k, v in zip(n_cz, p11)]
    fit = ml_fit(SSBDataset(rows))
    return AnalyticPrediction(n_cz=n_cz, p11=p11, F_inferred=fit.F,
                              F_first_order=model.first_order_fidelity(n_rotations),
                              F_sym=model.sym_fidelity)


def calibrate_virtual_phase(cz: CZLike, n_rotations: int = 10, n_cz: int = 10,
                            n_instances: int = 24, rng_seed: int = 0) -> float:
    """Virtual-Z phase in [0, 2 pi) that maximizes the mean P_|11> of a fixed set of instances"""
    model = as_cz_model(cz)
    instances = [build_instance(instance_seed(rng_seed, n_cz, i), n_rotations, n_cz) for i in range(n_instances)]

    def mean_p11(phase: float) -> float:
        return float(np.mean([simulate_instance(inst, None, model, 'independent', 0, phase)
                              for inst in instances]))

    grid = np.linspace(0, 2 * np.pi, 64, endpoint=False)
    scan = np.array([mean_p11(phi) for phi in grid])
    if np.ptp(scan) < 1e-9:
        raise ValueError("Return probability does not depend on the virtual phase")
    k = int(np.argmax(scan))
    step = grid[1] - grid[0]
    res = minimize_scalar(lambda phi: -mean_p11(phi), bounds=(grid[k] - step, grid[k] + step),
                          method='bounded', options={'xatol': 1e-12})
    phase = float(res.x % (2 * np.pi))
    logger.info(f"Virtual phase calibrated to {phase:.6f} rad (P_11 = {-res.fun:.6f})")
    return phase
