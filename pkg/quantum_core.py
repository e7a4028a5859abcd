"""
Dense time evolution for small quantum systems.

Hamiltonians are supplied as tables of shape (n_steps, d, d) in rad/s, one
matrix per grid step evaluated at the step midpoint, and are treated as
piecewise constant. Each step is exponentiated exactly through a Hermitian
eigendecomposition of the coupled blocks of the matrix.
"""

import math
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
from scipy.sparse.csgraph import connected_components

from config import Config

logger = logging.getLogger(__name__)

HERMITIAN_TOL = 1e-12
NORM_TOL = 1e-9


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid of n_steps intervals of length dt starting at t_start"""
    t_start: float
    dt: float
    n_steps: int

    def __post_init__(self):
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ValueError(f"TimeGrid dt must be positive and finite, got {self.dt}")
        if int(self.n_steps) < 1:
            raise ValueError(f"TimeGrid needs at least one step, got {self.n_steps}")

    @classmethod
    def spanning(cls, duration: float, n_steps: int, t_start: float = 0.0) -> 'TimeGrid':
        if duration <= 0:
            raise ValueError(f"Duration must be positive, got {duration}")
        return cls(t_start=t_start, dt=duration / n_steps, n_steps=int(n_steps))

    @property
    def duration(self) -> float:
        return self.n_steps * self.dt

    @property
    def edges(self) -> np.ndarray:
        return self.t_start + self.dt * np.arange(self.n_steps + 1)

    @property
    def midpoints(self) -> np.ndarray:
        return self.t_start + self.dt * (np.arange(self.n_steps) + 0.5)


def default_step_count(duration: float, drive_max: float) -> int:
    """Steps so that dt <= min(T / STEPS_PER_GATE, 1 / (STEPS_PER_RABI_PERIOD * drive_max))"""
    n_rabi = math.ceil(duration * Config.STEPS_PER_RABI_PERIOD * max(drive_max, 0.0))
    return max(Config.STEPS_PER_GATE, n_rabi)


@dataclass
class ControlSchedule:
    """Named control samples (one value per grid step) for plug-in protocols"""
    grid: TimeGrid
    samples: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for name, values in self.samples.items():
            values = np.asarray(values)
            if values.shape != (self.grid.n_steps,):
                raise ValueError(
                    f"Control '{name}' has {values.size} samples, grid has {self.grid.n_steps} steps"
                )
            if not np.all(np.isfinite(values)):
                raise ValueError(f"Control '{name}' contains non-finite samples")
            self.samples[name] = values

    def value(self, name: str, times: np.ndarray, default: float = 0.0) -> np.ndarray:
        """Piecewise-constant lookup of a control at arbitrary times"""
        times = np.asarray(times, dtype=float)
        if name not in self.samples:
            return np.full(times.shape, default, dtype=float)
        k = np.floor((times - self.grid.t_start) / self.grid.dt).astype(int)
        k = np.clip(k, 0, self.grid.n_steps - 1)
        return self.samples[name][k]


def check_hermitian(h_table: np.ndarray, tol: float = HERMITIAN_TOL):
    """Reject tables whose steps are not Hermitian within tol (relative to the largest entry)"""
    if not np.all(np.isfinite(h_table)):
        raise FloatingPointError("Hamiltonian table contains non-finite entries")
    scale = max(1.0, float(np.max(np.abs(h_table)))) if h_table.size else 1.0
    deviation = np.max(np.abs(h_table - np.conj(np.swapaxes(h_table, -1, -2)))) if h_table.size else 0.0
    if deviation > tol * scale:
        raise ValueError(f"Non-Hermitian step matrix (max |H - H^dagger| = {deviation:.3e})")


def check_state(psi: np.ndarray, dim: Optional[int] = None, normalized: bool = True) -> np.ndarray:
    psi = np.asarray(psi, dtype=complex)
    if psi.ndim != 1:
        raise ValueError(f"State vector must be one-dimensional, got shape {psi.shape}")
    if dim is not None and psi.size != dim:
        raise ValueError(f"State dimension {psi.size} does not match {dim}")
    if not np.all(np.isfinite(psi)):
        raise FloatingPointError("State vector contains non-finite amplitudes")
    norm = np.linalg.norm(psi)
    if normalized and abs(norm - 1.0) > NORM_TOL:
        raise ValueError(f"State vector is not normalized (norm {norm:.12f})")
    if not normalized and not (0 < norm <= 1.0 + NORM_TOL):
        raise ValueError(f"State norm {norm:.12f} outside (0, 1]")
    return psi


def coupling_blocks(h_table: np.ndarray) -> List[np.ndarray]:
    """Index sets of basis states connected by any nonzero off-diagonal entry on the grid"""
    pattern = np.any(h_table != 0, axis=0)
    n_blocks, labels = connected_components(pattern | pattern.T, directed=False)
    return [np.flatnonzero(labels == b) for b in range(n_blocks)]


def step_propagators(h_table: np.ndarray, dt: float,
                     blocks: Optional[List[np.ndarray]] = None) -> np.ndarray:
    """exp(-i H_k dt) for every step k, block by block"""
    h_table = np.asarray(h_table, dtype=complex)
    check_hermitian(h_table)
    n, d, _ = h_table.shape
    if blocks is None:
        blocks = coupling_blocks(h_table)

    steps = np.zeros((n, d, d), dtype=complex)
    for idx in blocks:
        if idx.size == 1:
            i = idx[0]
            steps[:, i, i] = np.exp(-1j * h_table[:, i, i].real * dt)
            continue
        sub = h_table[:, idx[:, None], idx]
        w, v = np.linalg.eigh(sub)
        phases = np.exp(-1j * w * dt)
        steps[:, idx[:, None], idx] = (v * phases[:, None, :]) @ np.conj(np.swapaxes(v, -1, -2))

    if not np.all(np.isfinite(steps)):
        raise FloatingPointError("Non-finite step propagator")
    return steps


def compose(steps: np.ndarray) -> np.ndarray:
    """Time-ordered product U_n ... U_2 U_1 by pairwise reduction"""
    d = steps.shape[-1]
    layer = steps
    if layer.shape[0] == 0:
        return np.eye(d, dtype=complex)
    while layer.shape[0] > 1:
        if layer.shape[0] % 2:
            layer = np.concatenate([layer, np.eye(d, dtype=complex)[None]], axis=0)
        layer = layer[1::2] @ layer[0::2]
    return layer[0]


def evolve_state(h_table: np.ndarray, psi0: np.ndarray, grid: TimeGrid) -> np.ndarray:
    """Return psi(T) for a normalized psi0"""
    h_table = np.asarray(h_table)
    _check_grid(h_table, grid)
    psi = check_state(psi0, h_table.shape[-1]).copy()
    for step in step_propagators(h_table, grid.dt):
        psi = step @ psi
    if not np.all(np.isfinite(psi)):
        raise FloatingPointError("Non-finite amplitude during evolution")
    return psi


def evolve_propagator(h_table: np.ndarray, grid: TimeGrid,
                      blocks: Optional[List[np.ndarray]] = None) -> np.ndarray:
    """Return U(T)"""
    h_table = np.asarray(h_table)
    _check_grid(h_table, grid)
    return compose(step_propagators(h_table, grid.dt, blocks))


def propagator_table(h_table: np.ndarray, grid: TimeGrid,
                     blocks: Optional[List[np.ndarray]] = None) -> np.ndarray:
    """Cumulative propagators U(t_k) at every grid edge, shape (n_steps + 1, d, d)"""
    h_table = np.asarray(h_table)
    _check_grid(h_table, grid)
    steps = step_propagators(h_table, grid.dt, blocks)
    n, d, _ = steps.shape
    table = np.empty((n + 1, d, d), dtype=complex)
    table[0] = np.eye(d)
    for k in range(n):
        table[k + 1] = steps[k] @ table[k]
    return table


def expectation(op: np.ndarray, psi: np.ndarray) -> complex:
    """<psi|op|psi>"""
    op = np.asarray(op)
    psi = np.asarray(psi)
    if op.shape != (psi.size, psi.size):
        raise ValueError(f"Operator shape {op.shape} does not match state dimension {psi.size}")
    return complex(np.vdot(psi, op @ psi))


def subspace_fidelity(m: np.ndarray, isometry: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Haar average of |<psi|m|psi>|^2 over states of a D-dimensional subspace:
    [Tr(M^dagger M) + |Tr M|^2] / (D (D + 1)) with M = Q^dagger m Q.
    Works on stacks of matrices.
    """
    m = np.asarray(m)
    if isometry is not None:
        m = np.conj(isometry.T) @ m @ isometry
    dim = m.shape[-1]
    frob = np.sum(np.abs(m) ** 2, axis=(-2, -1))
    tr = np.trace(m, axis1=-2, axis2=-1)
    return (frob + np.abs(tr) ** 2) / (dim * (dim + 1))


def _check_grid(h_table: np.ndarray, grid: TimeGrid):
    if h_table.ndim != 3 or h_table.shape[1] != h_table.shape[2]:
        raise ValueError(f"Hamiltonian table must have shape (n, d, d), got {h_table.shape}")
    if h_table.shape[0] != grid.n_steps:
        raise ValueError(f"Hamiltonian table has {h_table.shape[0]} steps, grid has {grid.n_steps}")
