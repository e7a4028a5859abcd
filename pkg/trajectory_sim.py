"""
Monte Carlo wavefunction simulation of noisy gates.

Each trajectory evolves the computational input columns jointly under one
noise realization and one quantum-jump record. The block is never
renormalized, so every sampled map stays a contraction. Decays into levels
outside the qubit (dark, p1, p2) are terminal within a gate: they damp the
no-jump evolution and their flux into each leaked level is accumulated
deterministically. Decays back into |0> or |1> are drawn as jumps with
probability Gamma dt ||L A||^2 (operator norm); a jump leaves the block
L A / ||L A|| with unit norm.
"""

import math
import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed
from scipy.integrate import trapezoid

from config import Config
from quantum_core import TimeGrid, compose, step_propagators, subspace_fidelity
from noise_model import (
    DecayChannel, MotionSpec, PowerSpectralDensity, ShotToShotSpec, ToneSpec,
    make_rng, sample_motion, sample_shot_to_shot, sample_trace, tone_trace,
    total_decay_rate,
)
from gate_protocols import (
    GateProtocol, LevelScheme, cz_target, computational_block, symmetric_isometry,
    symmetric_stabilizer_states, wrap_phase,
)

logger = logging.getLogger(__name__)

BRIGHT_LEVEL = 'p2'
NOISE_SOURCES = ('frequency', 'intensity', 'shot_to_shot', 'decay', 'motion')
METRICS = ('haar', 'sym', 'sss', 'single_state')


@dataclass
class ErrorModelConfig:
    """Error sources of one simulation. Each flag switches its source independently."""
    frequency_psd: Optional[PowerSpectralDensity] = None
    intensity_psd: Optional[PowerSpectralDensity] = None
    shot_to_shot_intensity: ShotToShotSpec = field(default_factory=ShotToShotSpec)
    shot_to_shot_detuning: ShotToShotSpec = field(default_factory=ShotToShotSpec)
    decay_channels: List[DecayChannel] = field(default_factory=list)
    motion: MotionSpec = field(default_factory=MotionSpec)
    tones: Tuple[ToneSpec, ...] = ()
    frequency: bool = True
    intensity: bool = True
    shot_to_shot: bool = True
    decay: bool = True
    motion_noise: bool = True

    def __post_init__(self):
        if self.frequency_psd is not None and self.frequency_psd.kind != 'frequency':
            raise ValueError("frequency_psd must be a frequency-noise PSD")
        if self.intensity_psd is not None and self.intensity_psd.kind != 'relative_intensity':
            raise ValueError("intensity_psd must be a relative-intensity PSD")
        self.tones = tuple(self.tones)

    def only(self, *sources: str) -> 'ErrorModelConfig':
        unknown = set(sources) - set(NOISE_SOURCES)
        if unknown:
            raise ValueError(f"Unknown noise sources {sorted(unknown)}")
        return replace(self, frequency='frequency' in sources, intensity='intensity' in sources,
                       shot_to_shot='shot_to_shot' in sources, decay='decay' in sources,
                       motion_noise='motion' in sources)

    @property
    def active_channels(self) -> List[DecayChannel]:
        return list(self.decay_channels) if self.decay else []

    @property
    def motion_active(self) -> bool:
        m = self.motion
        return self.motion_noise and (m.doppler_sigma_hz > 0 or
                                      (m.position_sigma_m > 0 and math.isfinite(m.beam_waist_m)))

    def shot_active(self, spec: ShotToShotSpec) -> bool:
        return self.shot_to_shot and spec.sigma > 0

    @property
    def hamiltonian_noise(self) -> bool:
        return bool(
            (self.frequency and self.frequency_psd is not None and self.frequency_psd.f_max > 0)
            or (self.intensity and self.intensity_psd is not None and self.intensity_psd.f_max > 0)
            or self.shot_active(self.shot_to_shot_intensity)
            or self.shot_active(self.shot_to_shot_detuning)
            or self.motion_active
            or self.tones
        )

    def check_grid(self, grid: TimeGrid):
        for psd, on in ((self.frequency_psd, self.frequency), (self.intensity_psd, self.intensity)):
            if on and psd is not None and psd.f_max > 0 and grid.dt >= 1.0 / (4.0 * psd.f_max):
                raise ValueError(
                    f"Grid dt = {grid.dt:.3e} s is too coarse for the {psd.kind} PSD "
                    f"(need dt < {1.0 / (4.0 * psd.f_max):.3e} s)"
                )

    def describe(self) -> Dict:
        return {
            'frequency': self.frequency and self.frequency_psd is not None,
            'intensity': self.intensity and self.intensity_psd is not None,
            'shot_to_shot_intensity': self.shot_to_shot_intensity.sigma if self.shot_to_shot else 0.0,
            'shot_to_shot_detuning_hz': self.shot_to_shot_detuning.sigma if self.shot_to_shot else 0.0,
            'decay_channels': len(self.active_channels),
            'motion': self.motion_active,
            'tones': len(self.tones),
        }


@dataclass
class TrajectoryResult:
    propagator: np.ndarray
    jump_record: List[Tuple[float, str]] = field(default_factory=list)
    leaked: Optional[np.ndarray] = None

    @property
    def populations(self) -> np.ndarray:
        """Final populations per basis row and input column, terminal decay flux included"""
        pops = np.abs(self.propagator) ** 2
        return pops if self.leaked is None else pops + self.leaked

    @property
    def n_jumps(self) -> int:
        return len(self.jump_record)


@dataclass
class ChannelEstimate:
    """
    Per-trajectory comparison maps M_k = V^dagger A_k on the computational
    block, V the virtual-Z compensated CZ of the noiseless gate.
    """
    maps: np.ndarray
    target: np.ndarray
    survival: np.ndarray
    leakage: np.ndarray
    leakage_labels: List[str]
    bright: np.ndarray
    jump_counts: np.ndarray
    single_atom_phase: float = 0.0

    def __post_init__(self):
        if self.maps.ndim != 3 or self.maps.shape[0] < 1:
            raise ValueError("Channel estimate needs at least one trajectory")
        norms = np.linalg.norm(self.maps, ord=2, axis=(1, 2))
        if np.any(norms > 1 + 1e-6):
            raise ValueError(f"Channel sample is not a contraction (max ||M|| = {norms.max():.9f})")

    @property
    def n_trajectories(self) -> int:
        return int(self.maps.shape[0])

    @property
    def raw_maps(self) -> np.ndarray:
        return self.target @ self.maps

    def leakage_by_level(self) -> Dict[str, float]:
        return {label: float(v) for label, v in zip(self.leakage_labels, self.leakage.mean(axis=0))}

    def bright_leakage(self) -> float:
        """Bright-level population per pair and gate, averaged over the symmetric stabilizer inputs"""
        weights = np.sum(np.abs(symmetric_isometry()) ** 2, axis=1) / 3.0
        return float(np.mean(self.bright @ weights))

    def summary(self) -> Dict:
        return {
            'trajectories': self.n_trajectories,
            'mean_survival': float(self.survival.mean()),
            'mean_bright': float(self.bright.mean()),
            'bright_leakage': self.bright_leakage(),
            'mean_jumps': float(self.jump_counts.mean()),
            'single_atom_phase': self.single_atom_phase,
        }


@dataclass
class FidelityEstimate:
    metric: str
    mean: float
    stderr: float
    n_trajectories: int

    @property
    def infidelity(self) -> float:
        return 1.0 - self.mean


class _JumpChannels:
    """Decay channels resolved per atom onto basis-index maps"""

    RETURNING_TARGETS = ('0', '1')

    def __init__(self, scheme: LevelScheme, channels: Sequence[DecayChannel], omega: float):
        self.labels: List[str] = []
        self.rates: List[float] = []
        self.sources: List[np.ndarray] = []
        self.targets: List[np.ndarray] = []
        self.returning: List[bool] = []
        self.damping = np.zeros(scheme.dim)
        for ch in channels:
            scheme.require(ch.source, ch.target)
            rate = ch.rate(omega)
            for atom in range(scheme.n_atoms):
                src, tgt = scheme.jump_indices(ch.source, ch.target, atom)
                if src.size == 0:
                    continue
                self.labels.append(f"{ch.source}->{ch.target}@{atom}")
                self.rates.append(rate)
                self.sources.append(src)
                self.targets.append(tgt)
                self.returning.append(ch.target in self.RETURNING_TARGETS)
                self.damping[src] += rate
        self.rates = np.array(self.rates)
        self.drawn = [c for c, back in enumerate(self.returning) if back]
        self.terminal = [c for c, back in enumerate(self.returning) if not back]
        levels = {ch.source for ch in channels}
        self.max_rate = max((total_decay_rate(list(channels), lv, omega) for lv in levels), default=0.0)

    @property
    def empty(self) -> bool:
        return len(self.labels) == 0

    def check_step(self, dt: float):
        if self.max_rate * dt >= Config.MAX_JUMP_PROBABILITY:
            suggested = 0.5 * Config.MAX_JUMP_PROBABILITY / self.max_rate
            raise ValueError(
                f"Jump probability Gamma_max*dt = {self.max_rate * dt:.3e} exceeds "
                f"{Config.MAX_JUMP_PROBABILITY}; use dt <= {suggested:.3e} s"
            )


def prepare_protocol(protocol: GateProtocol, config: ErrorModelConfig) -> GateProtocol:
    """Extend the level scheme with any decay levels the protocol lacks"""
    needed = []
    for ch in config.active_channels:
        for level in (ch.source, ch.target):
            if level not in protocol.scheme.levels and level not in needed:
                needed.append(level)
    if not needed:
        return protocol
    return protocol.on_scheme(protocol.scheme.with_levels(protocol.scheme.levels + tuple(needed)))


def trajectory_seed(master_seed: int, index: int) -> Tuple[int, int]:
    return (int(master_seed), int(index))


def _noisy_hamiltonian(protocol: GateProtocol, grid: TimeGrid, config: ErrorModelConfig,
                       rng: np.random.Generator) -> np.ndarray:
    scheme = protocol.scheme
    n, times = grid.n_steps, grid.midpoints
    arms = protocol.arms

    eps_shot = 0.0
    if config.shot_active(config.shot_to_shot_intensity):
        eps_shot = sample_shot_to_shot(config.shot_to_shot_intensity, rng)
    nu_shot = 0.0
    if config.shot_active(config.shot_to_shot_detuning):
        nu_shot = sample_shot_to_shot(config.shot_to_shot_detuning, rng)
    if config.motion_active:
        doppler, field_factor = sample_motion(config.motion, rng, scheme.n_atoms)
    else:
        doppler, field_factor = np.zeros(scheme.n_atoms), np.ones(scheme.n_atoms)

    freq = {arm: np.full(n, nu_shot if arm == arms[0] else 0.0) for arm in arms}
    eps = {arm: np.full(n, eps_shot) for arm in arms}
    if config.frequency and config.frequency_psd is not None:
        for arm in arms:
            freq[arm] += sample_trace(config.frequency_psd, grid, rng).values
    if config.intensity and config.intensity_psd is not None:
        for arm in arms:
            eps[arm] += sample_trace(config.intensity_psd, grid, rng).values
    for tone in config.tones:
        arm = arms[0] if tone.arm == 'main' else tone.arm
        if arm not in arms:
            raise ValueError(f"Tone arm '{tone.arm}' not driven by protocol '{protocol.name}'")
        target = freq if tone.kind == 'frequency' else eps
        target[arm] = target[arm] + tone_trace(tone, grid).values

    field_scale = {arm: (1.0 + 0.5 * eps[arm])[:, None] * field_factor[None, :] for arm in arms}
    intensity_scale = {arm: (1.0 + eps[arm])[:, None] * field_factor[None, :] ** 2 for arm in arms}
    h = protocol.hamiltonian(times, field_scale, intensity_scale)

    diag = np.zeros((n, scheme.dim))
    for arm in arms:
        if np.any(freq[arm]):
            diag += freq[arm][:, None] * np.real(np.diag(protocol.frequency_operator(arm)))[None, :]
    for atom in range(scheme.n_atoms):
        if doppler[atom]:
            diag += -2 * np.pi * doppler[atom] * np.real(np.diag(scheme.number_operator('r', atom)))[None, :]
    idx = np.arange(scheme.dim)
    h[:, idx, idx] += diag
    return h


def _largest_singular_sq(x: np.ndarray) -> np.ndarray:
    """Squared operator norm of each (rows, m) block in a batch"""
    gram = np.conj(np.swapaxes(x, -1, -2)) @ x
    return np.linalg.eigvalsh(gram)[..., -1].clip(min=0.0)


def _evolve_with_jumps(steps: np.ndarray, a0: np.ndarray, uniforms: np.ndarray, jumps: _JumpChannels,
                       grid: TimeGrid) -> Tuple[np.ndarray, np.ndarray, List[List[Tuple[float, str]]]]:
    """
    Batched jump evolution; a0 is (B, d, m) and steps (n, d, d) are shared by
    the batch. Returns the final blocks, the terminal decay flux per row and
    column, and the jump records.
    """
    a = np.array(a0, dtype=complex)
    batch = a.shape[0]
    leaked = np.zeros(a.shape)
    records: List[List[Tuple[float, str]]] = [[] for _ in range(batch)]
    no_jump = (1.0 - 0.5 * grid.dt * jumps.damping)[None, :, None]
    edges = grid.edges
    dt = grid.dt

    for k in range(grid.n_steps):
        a = steps[k] @ a
        for c in jumps.terminal:
            leaked[:, jumps.targets[c], :] += jumps.rates[c] * dt * np.abs(a[:, jumps.sources[c], :]) ** 2

        jumped = np.zeros(batch, dtype=bool)
        if jumps.drawn:
            weights = np.stack([_largest_singular_sq(a[:, jumps.sources[c], :]) for c in jumps.drawn], axis=1)
            cum = np.cumsum(weights * jumps.rates[jumps.drawn][None, :] * dt, axis=1)
            u = uniforms[:, k]
            jumped = u < cum[:, -1]
            for b in np.flatnonzero(jumped):
                c = jumps.drawn[int(np.searchsorted(cum[b], u[b], side='right'))]
                moved = np.zeros_like(a[b])
                moved[jumps.targets[c]] = a[b, jumps.sources[c]]
                a[b] = moved / math.sqrt(_largest_singular_sq(moved))
                records[b].append((float(edges[k + 1]), jumps.labels[c]))
        a[~jumped] *= no_jump

    if not np.all(np.isfinite(a)):
        raise FloatingPointError("Non-finite amplitude during jump evolution")
    return a, leaked, records


def _run_chunk(protocol: GateProtocol, config: ErrorModelConfig, grid: TimeGrid,
               seeds: Sequence, initial: np.ndarray) -> List[TrajectoryResult]:
    jumps = _JumpChannels(protocol.scheme, config.active_channels, protocol.rabi)
    rngs = [make_rng(s) for s in seeds]
    n = grid.n_steps

    if not config.hamiltonian_noise:
        steps = step_propagators(protocol.hamiltonian(grid.midpoints), grid.dt, protocol.blocks(grid))
        if jumps.empty:
            a = compose(steps) @ initial
            return [TrajectoryResult(a.copy()) for _ in rngs]
        uniforms = np.stack([rng.random(n) for rng in rngs])
        a0 = np.broadcast_to(initial, (len(rngs),) + initial.shape)
        a, leaked, records = _evolve_with_jumps(steps, a0, uniforms, jumps, grid)
        return [TrajectoryResult(a[b], records[b], leaked[b]) for b in range(len(rngs))]

    results = []
    for rng in rngs:
        h = _noisy_hamiltonian(protocol, grid, config, rng)
        steps = step_propagators(h, grid.dt, protocol.blocks(grid))
        if jumps.empty:
            results.append(TrajectoryResult(compose(steps) @ initial))
            continue
        a, leaked, records = _evolve_with_jumps(steps, initial[None], rng.random(n)[None], jumps, grid)
        results.append(TrajectoryResult(a[0], records[0], leaked[0]))
    return results


def _setup(protocol: GateProtocol, config: ErrorModelConfig, grid: Optional[TimeGrid],
           initial: Optional[np.ndarray]) -> Tuple[GateProtocol, TimeGrid, np.ndarray]:
    protocol = prepare_protocol(protocol, config)
    grid = grid or protocol.default_grid()
    config.check_grid(grid)
    _JumpChannels(protocol.scheme, config.active_channels, protocol.rabi).check_step(grid.dt)
    if initial is None:
        initial = protocol.scheme.computational_isometry()
    initial = np.asarray(initial, dtype=complex)
    if initial.ndim == 1:
        initial = initial[:, None]
    if initial.shape[0] != protocol.scheme.dim:
        raise ValueError(f"Initial columns have dimension {initial.shape[0]}, scheme has {protocol.scheme.dim}")
    return protocol, grid, initial


def run_trajectory(protocol: GateProtocol, config: ErrorModelConfig, seed,
                   grid: Optional[TimeGrid] = None, initial: Optional[np.ndarray] = None) -> TrajectoryResult:
    """One noisy trajectory. Draw order: shot intensity, shot detuning, motion, traces, jumps."""
    protocol, grid, initial = _setup(protocol, config, grid, initial)
    return _run_chunk(protocol, config, grid, [seed], initial)[0]


def run_batch(protocol: GateProtocol, config: ErrorModelConfig, n_trajectories: int, master_seed: int,
              grid: Optional[TimeGrid] = None, initial: Optional[np.ndarray] = None,
              n_jobs: Optional[int] = None) -> Tuple[GateProtocol, TimeGrid, List[TrajectoryResult]]:
    """
    Trajectories 0..K-1 with seeds (master_seed, k), run in fixed chunks and
    gathered by index so the output does not depend on n_jobs.
    """
    if n_trajectories < 1:
        raise ValueError(f"Need at least one trajectory, got {n_trajectories}")
    protocol, grid, initial = _setup(protocol, config, grid, initial)
    chunk = Config.TRAJECTORY_CHUNK
    bounds = [(i, min(i + chunk, n_trajectories)) for i in range(0, n_trajectories, chunk)]
    n_jobs = n_jobs or Config.DEFAULT_THREADS

    logger.debug(f"Running {n_trajectories} trajectories in {len(bounds)} chunks on {n_jobs} workers")
    if n_jobs == 1 or len(bounds) == 1:
        chunks = [_run_chunk(protocol, config, grid,
                             [trajectory_seed(master_seed, k) for k in range(lo, hi)], initial)
                  for lo, hi in bounds]
    else:
        chunks = Parallel(n_jobs=n_jobs)(
            delayed(_run_chunk)(protocol, config, grid,
                                [trajectory_seed(master_seed, k) for k in range(lo, hi)], initial)
            for lo, hi in bounds
        )
    results = [r for part in chunks for r in part]
    return protocol, grid, results


def channel_estimate(protocol: GateProtocol, grid: TimeGrid,
                     results: Sequence[TrajectoryResult]) -> ChannelEstimate:
    if not results:
        raise ValueError("Empty trajectory ensemble")
    scheme = protocol.scheme
    comp = scheme.computational_indices

    u0 = computational_block(protocol.propagator(grid), scheme)
    phase = wrap_phase(np.angle(u0[1, 1]) - np.angle(u0[0, 0]))
    target = cz_target(phase, float(np.angle(u0[0, 0])))

    a = np.stack([r.propagator for r in results])
    if a.shape[-1] != comp.size:
        raise ValueError("Channel estimates need the computational input columns")
    maps = np.conj(target.T) @ a[:, comp, :]
    pops = np.stack([r.populations for r in results])
    survival = pops[:, comp, :].sum(axis=1).mean(axis=1)

    others = [i for i in range(scheme.dim) if i not in set(comp.tolist())]
    leakage = pops[:, others, :].mean(axis=2) if others else np.zeros((len(results), 0))
    labels = [scheme.label(i) for i in others]
    bright_idx = [i for i in others if BRIGHT_LEVEL in scheme.basis[i]]
    bright = pops[:, bright_idx, :].sum(axis=1) if bright_idx else np.zeros((len(results), comp.size))
    jumps = np.array([r.n_jumps for r in results])

    return ChannelEstimate(maps=maps, target=target, survival=survival, leakage=leakage,
                           leakage_labels=labels, bright=bright, jump_counts=jumps,
                           single_atom_phase=phase)


def run_ensemble(protocol: GateProtocol, config: ErrorModelConfig, n_trajectories: int,
                 master_seed: int, grid: Optional[TimeGrid] = None,
                 n_jobs: Optional[int] = None) -> ChannelEstimate:
    protocol, grid, results = run_batch(protocol, config, n_trajectories, master_seed, grid, n_jobs=n_jobs)
    estimate = channel_estimate(protocol, grid, results)
    logger.info(f"Ensemble of {n_trajectories} trajectories finished "
                f"({int(estimate.jump_counts.sum())} jumps, survival {estimate.survival.mean():.6f})")
    return estimate


def ensemble_from_maps(maps: np.ndarray, bright: Optional[np.ndarray] = None) -> ChannelEstimate:
    """Channel estimate from explicit comparison maps against a plain CZ target"""
    maps = np.asarray(maps, dtype=complex)
    k = maps.shape[0]
    survival = np.sum(np.abs(maps) ** 2, axis=(1, 2)) / maps.shape[-1]
    return ChannelEstimate(maps=maps, target=cz_target(), survival=survival,
                           leakage=np.zeros((k, 0)), leakage_labels=[],
                           bright=np.zeros((k, 4)) if bright is None else np.asarray(bright),
                           jump_counts=np.zeros(k, dtype=int))


PAULIS = (
    np.eye(2, dtype=complex),
    np.array([[0, 1], [1, 0]], dtype=complex),
    np.array([[0, -1j], [1j, 0]], dtype=complex),
    np.array([[1, 0], [0, -1]], dtype=complex),
)


def depolarizing_ensemble(strength: float, n_trajectories: int) -> ChannelEstimate:
    """
    Two-qubit depolarizing channel of strength d as an ensemble of Pauli maps:
    each of the 15 non-identity Paulis appears round(K d / 16) times, the
    rest are identities. Exact when K d / 16 is an integer.
    """
    if not 0.0 <= strength <= 1.0:
        raise ValueError(f"Depolarizing strength must be in [0, 1], got {strength}")
    per_pauli = int(round(n_trajectories * strength / 16.0))
    if abs(per_pauli - n_trajectories * strength / 16.0) > 1e-9:
        logger.warning(f"Depolarizing ensemble of {n_trajectories} maps approximates d = {strength}")
    paulis = [np.kron(a, b) for a in PAULIS for b in PAULIS][1:]
    n_identity = n_trajectories - 15 * per_pauli
    if n_identity < 0:
        raise ValueError("Too few trajectories for the requested depolarizing strength")
    maps = [np.eye(4, dtype=complex)] * n_identity + [p for p in paulis for _ in range(per_pauli)]
    return ensemble_from_maps(np.array(maps))


def _per_trajectory_fidelity(maps: np.ndarray, metric: str, state: Optional[np.ndarray]) -> np.ndarray:
    if metric == 'haar':
        return subspace_fidelity(maps)
    if metric == 'sym':
        return subspace_fidelity(maps, symmetric_isometry())
    if metric == 'sss':
        states = symmetric_stabilizer_states()
        amps = np.einsum('si,kij,sj->ks', np.conj(states), maps, states)
        return np.mean(np.abs(amps) ** 2, axis=1)
    if metric == 'single_state':
        if state is None:
            raise ValueError("single_state metric needs a state")
        psi = np.asarray(state, dtype=complex)
        if psi.shape != (maps.shape[-1],):
            raise ValueError(f"State must have {maps.shape[-1]} amplitudes")
        psi = psi / np.linalg.norm(psi)
        return np.abs(np.einsum('i,kij,j->k', np.conj(psi), maps, psi)) ** 2
    raise ValueError(f"Unknown metric '{metric}', expected one of {', '.join(METRICS)}")


def fidelity_metric(ch: ChannelEstimate, metric: str = 'sym',
                    state: Optional[np.ndarray] = None) -> FidelityEstimate:
    if ch.n_trajectories < 1:
        raise ValueError("Empty ensemble")
    values = _per_trajectory_fidelity(ch.maps, metric, state)
    k = values.size
    stderr = float(np.std(values, ddof=1) / math.sqrt(k)) if k > 1 else 0.0
    return FidelityEstimate(metric=metric, mean=float(np.mean(values)), stderr=stderr, n_trajectories=k)


def rydberg_population(protocol: GateProtocol, initial_state,
                       grid: Optional[TimeGrid] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Total Rydberg population <sum_i n_r,i> at every grid edge of the noiseless evolution"""
    scheme = protocol.scheme
    grid = grid or protocol.default_grid()
    psi = _initial_vector(scheme, initial_state)
    steps = step_propagators(protocol.hamiltonian(grid.midpoints), grid.dt, protocol.blocks(grid))
    n_r = np.real(np.diag(scheme.number_operator('r')))
    pops = np.empty(grid.n_steps + 1)
    pops[0] = np.sum(n_r * np.abs(psi) ** 2)
    for k in range(grid.n_steps):
        psi = steps[k] @ psi
        pops[k + 1] = np.sum(n_r * np.abs(psi) ** 2)
    return grid.edges, pops


def _initial_vector(scheme: LevelScheme, initial_state) -> np.ndarray:
    if isinstance(initial_state, str):
        return scheme.computational_state(initial_state)
    psi = np.asarray(initial_state, dtype=complex)
    if psi.shape == (4,) and scheme.dim != 4:
        full = np.zeros(scheme.dim, dtype=complex)
        full[scheme.computational_indices] = psi
        psi = full
    if psi.shape != (scheme.dim,):
        raise ValueError(f"Initial state has {psi.size} amplitudes, expected 4 or {scheme.dim}")
    return psi / np.linalg.norm(psi)


def decay_probability(protocol: GateProtocol, initial_state, rate: float,
                      grid: Optional[TimeGrid] = None) -> float:
    """Gamma times the time-integrated Rydberg population along the noiseless trajectory"""
    if rate < 0:
        raise ValueError(f"Decay rate must be >= 0, got {rate}")
    times, pops = rydberg_population(protocol, initial_state, grid)
    return float(rate * trapezoid(pops, times))


def bright_leakage_estimate(protocol: GateProtocol, channels: Sequence[DecayChannel],
                            grid: Optional[TimeGrid] = None) -> float:
    """
    Probability per gate that a pair ends with an atom in the bright leakage
    level: rate r -> bright times the Rydberg time averaged over the twelve
    symmetric stabilizer inputs.
    """
    rate = sum(ch.rate(protocol.rabi) for ch in channels if ch.source == 'r' and ch.target == BRIGHT_LEVEL)
    if rate == 0:
        return 0.0
    rydberg_time = []
    for psi in symmetric_stabilizer_states():
        times, pops = rydberg_population(protocol, psi, grid)
        rydberg_time.append(trapezoid(pops, times))
    return float(rate * np.mean(rydberg_time))
