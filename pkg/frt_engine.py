"""
Fidelity response theory: first-order infidelity response functions.

For a noise term eps(t) O(t) added to H0(t), the infidelity is
int S(f) I(f) df with
    I(f) = int int cos(2 pi f (t - tau)) <O_H(t) O_H(tau)>_c dt dtau,
O_H = U^dagger O U. The connected correlator is averaged exactly over Haar
states of the computational (D = 4) or symmetric (D = 3) subspace, or taken
for one initial state.
"""

import csv
import math
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.integrate import cumulative_trapezoid

from config import Config
from quantum_core import TimeGrid, check_hermitian, step_propagators
from noise_model import PowerSpectralDensity, ToneSpec, make_rng
from gate_protocols import GateProtocol, TwoPhotonGate, symmetric_isometry, TWO_PI
from trajectory_sim import ErrorModelConfig, fidelity_metric, run_ensemble

logger = logging.getLogger(__name__)

NOISE_KINDS = (
    'frequency', 'intensity', 'single_atom_frequency',
    'two_photon_freq_arm1', 'two_photon_freq_arm2',
    'two_photon_int_arm1', 'two_photon_int_arm2', 'custom',
)
FREQUENCY_KINDS = ('frequency', 'single_atom_frequency', 'two_photon_freq_arm1', 'two_photon_freq_arm2')
RESPONSE_METRICS = ('haar', 'sym', 'single_state')
RESPONSE_HEADER = ['freq_hz', 'value']


def psd_kind_for(kind: str) -> str:
    return 'frequency' if kind in FREQUENCY_KINDS else 'relative_intensity'


@dataclass
class NoiseOperatorSchedule:
    kind: str
    operators: np.ndarray
    grid: TimeGrid

    def __post_init__(self):
        if self.operators.shape[0] != self.grid.n_steps:
            raise ValueError(f"Operator table has {self.operators.shape[0]} steps, grid has {self.grid.n_steps}")
        check_hermitian(self.operators)


@dataclass
class ResponseFunction:
    freqs_hz: np.ndarray
    values: np.ndarray
    kind: str
    metric: str
    protocol_tag: str
    omega: float
    dc: float
    ideal: bool = False

    def __call__(self, f) -> np.ndarray:
        freqs, values = self.points()
        return np.interp(np.asarray(f, dtype=float), freqs, values, left=values[0], right=0.0)

    def points(self) -> Tuple[np.ndarray, np.ndarray]:
        """Sampled frequencies with the zero-frequency value prepended"""
        if self.freqs_hz.size and self.freqs_hz[0] == 0.0:
            return self.freqs_hz, self.values
        return np.concatenate([[0.0], self.freqs_hz]), np.concatenate([[self.dc], self.values])


@dataclass
class UniversalResponse:
    x: np.ndarray
    g: np.ndarray
    kind: str
    metric: str
    dc: float
    warning: Optional[str] = None


@dataclass(frozen=True)
class FitParams6:
    a: float
    b: float
    c: float
    d: float
    e: float
    f: float
    form: str
    metric: str = 'haar'


FIT_FORMS = ('double_gaussian_freq', 'logistic_tanh_int')

FIT_PRESETS: Dict[str, FitParams6] = {
    'haar_frequency': FitParams6(2.910, -0.02715, 0.5874, 3.022, 1.179, 0.5337, 'double_gaussian_freq', 'haar'),
    'haar_intensity': FitParams6(1.187, 6.423, 0.7670, 0.07678, 5.528, 0.2381, 'logistic_tanh_int', 'haar'),
    'sym_frequency': FitParams6(3.062, -0.01507, 0.5588, 2.843, 1.232, 0.5339, 'double_gaussian_freq', 'sym'),
    'sym_intensity': FitParams6(1.218, 5.790, 0.7580, 0.03630, 5.647, 0.2054, 'logistic_tanh_int', 'sym'),
}


@dataclass
class InfidelityBreakdown:
    total: float
    dc: float
    band_edges_hz: np.ndarray
    band_values: np.ndarray

    def to_dict(self) -> Dict:
        return {
            'total': self.total,
            'dc': self.dc,
            'bands': [
                {'f_lo_hz': float(lo), 'f_hi_hz': float(hi), 'infidelity': float(v)}
                for lo, hi, v in zip(self.band_edges_hz[:-1], self.band_edges_hz[1:], self.band_values)
            ],
        }


@dataclass
class ProbeResult:
    kind: str
    f0_hz: float
    strengths: np.ndarray
    infidelities: np.ndarray
    slope: float
    stderr: float
    nonlinear: bool


def _operators_at(protocol: GateProtocol, kind: str, times: np.ndarray,
                  custom: Union[None, np.ndarray, Callable] = None) -> np.ndarray:
    scheme = protocol.scheme
    n = times.size
    if kind == 'custom':
        if custom is None:
            raise ValueError("Custom noise kind needs an operator")
        if callable(custom):
            return np.asarray(custom(times), dtype=complex)
        op = np.asarray(custom, dtype=complex)
        if op.shape != (scheme.dim, scheme.dim):
            raise ValueError(f"Custom operator has shape {op.shape}, scheme dimension is {scheme.dim}")
        return np.broadcast_to(op, (n,) + op.shape).copy()
    if kind.startswith('two_photon'):
        if not isinstance(protocol, TwoPhotonGate):
            raise ValueError(f"Noise kind '{kind}' needs a two-photon protocol, got '{protocol.name}'")
        arm = 'arm1' if kind.endswith('arm1') else 'arm2'
        if '_freq_' in kind:
            op = protocol.frequency_operator(arm)
            return np.broadcast_to(op, (n,) + op.shape).copy()
        return protocol.intensity_operator(times, arm)
    if kind == 'frequency':
        op = protocol.frequency_operator(protocol.arms[0])
        return np.broadcast_to(op, (n,) + op.shape).copy()
    if kind == 'single_atom_frequency':
        op = -TWO_PI * scheme.number_operator('r', 0)
        return np.broadcast_to(op, (n,) + op.shape).copy()
    if kind == 'intensity':
        return protocol.intensity_operator(times, protocol.arms[0])
    raise ValueError(f"Unknown noise kind '{kind}', expected one of {', '.join(NOISE_KINDS)}")


def noise_operator_schedule(protocol: GateProtocol, kind: str, grid: Optional[TimeGrid] = None,
                            custom: Union[None, np.ndarray, Callable] = None) -> NoiseOperatorSchedule:
    grid = grid or protocol.default_grid()
    return NoiseOperatorSchedule(kind, _operators_at(protocol, kind, grid.midpoints, custom), grid)


def default_frequencies(omega: float) -> np.ndarray:
    f_max = max(4.0 * omega / TWO_PI, 10 * Config.FRT_F_MIN_HZ)
    return np.geomspace(Config.FRT_F_MIN_HZ, f_max, Config.FRT_N_FREQS)


def _sample_indices(n_steps: int) -> np.ndarray:
    m = min(n_steps, Config.FRT_MAX_POINTS)
    return np.unique(np.round(np.linspace(0, n_steps, m + 1)).astype(int))


def _trapezoid_weights(t: np.ndarray) -> np.ndarray:
    w = np.zeros_like(t)
    if t.size < 2:
        return w
    gaps = np.diff(t)
    w[:-1] += 0.5 * gaps
    w[1:] += 0.5 * gaps
    return w


def _heisenberg_columns(hamiltonian: Callable[[np.ndarray], np.ndarray], grid: TimeGrid,
                        blocks: Optional[List[np.ndarray]], operators: Callable[[np.ndarray], np.ndarray],
                        columns: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """O_H(t_k) @ columns at the sampled grid edges, and the sample times"""
    idx = _sample_indices(grid.n_steps)
    times = grid.edges[idx]
    ops = np.asarray(operators(times), dtype=complex)
    check_hermitian(ops)

    d = ops.shape[-1]
    chunk = max(1, (1 << 22) // (d * d))
    mids = grid.midpoints
    u = columns.astype(complex)
    proj = np.empty((idx.size, d, columns.shape[1]), dtype=complex)
    pos = 0
    if idx[0] == 0:
        proj[0] = ops[0] @ u
        pos = 1
    prop = np.eye(d, dtype=complex)
    for start in range(0, grid.n_steps, chunk):
        steps = step_propagators(hamiltonian(mids[start:start + chunk]), grid.dt, blocks)
        for j, step in enumerate(steps):
            prop = step @ prop
            if pos < idx.size and idx[pos] == start + j + 1:
                proj[pos] = np.conj(prop.T) @ (ops[pos] @ (prop @ u))
                pos += 1
    return proj, times


def _connected_correlator(proj: np.ndarray, columns: np.ndarray, single_state: bool) -> np.ndarray:
    """Real part of the connected correlator C[k, l], for one state or averaged over the column span"""
    if single_state:
        psi = columns[:, 0]
        v = proj[:, :, 0]
        means = v @ np.conj(psi)
        corr = np.conj(v) @ v.T - np.outer(np.conj(means), means)
        return np.real(corr)

    dim = columns.shape[1]
    reduced = np.conj(columns.T) @ proj
    t1 = np.einsum('kja,lja->kl', np.conj(proj), proj)
    tr = np.trace(reduced, axis1=1, axis2=2)
    t3 = np.einsum('kab,lba->kl', reduced, reduced)
    corr = t1 / dim - (np.outer(tr, tr) + t3) / (dim * (dim + 1))
    return np.real(corr)


def _isometry_for(protocol: GateProtocol, metric: str) -> np.ndarray:
    comp = protocol.scheme.computational_isometry()
    if metric == 'haar':
        return comp
    if metric == 'sym':
        return comp @ symmetric_isometry()
    raise ValueError(f"Unknown metric '{metric}', expected one of {', '.join(RESPONSE_METRICS)}")


def _state_vector(protocol: GateProtocol, state) -> np.ndarray:
    scheme = protocol.scheme
    psi = np.asarray(state, dtype=complex)
    comp = scheme.computational_indices
    if psi.shape == (comp.size,) and scheme.dim != comp.size:
        full = np.zeros(scheme.dim, dtype=complex)
        full[comp] = psi
        psi = full
    if psi.shape != (scheme.dim,):
        raise ValueError(f"State has {psi.size} amplitudes, expected {comp.size} or {scheme.dim}")
    return psi / np.linalg.norm(psi)


def response_from_hamiltonian(hamiltonian: Callable[[np.ndarray], np.ndarray], grid: TimeGrid,
                              operators: Callable[[np.ndarray], np.ndarray], freqs: np.ndarray,
                              isometry: Optional[np.ndarray] = None, state: Optional[np.ndarray] = None,
                              blocks: Optional[List[np.ndarray]] = None) -> Tuple[np.ndarray, float]:
    """
    I(f) at freqs and I(0) for a Hamiltonian and a noise operator, both
    given as functions of time returning (n, d, d) tables. Averages over the
    subspace spanned by isometry, or takes one state.
    """
    if (isometry is None) == (state is None):
        raise ValueError("Give exactly one of isometry and state")
    freqs = np.asarray(freqs, dtype=float)
    columns = np.asarray(state, dtype=complex)[:, None] if state is not None else np.asarray(isometry)
    proj, times = _heisenberg_columns(hamiltonian, grid, blocks, operators, columns)
    corr = _connected_correlator(proj, columns, single_state=state is not None)
    corr = 0.5 * (corr + corr.T)
    weights = _trapezoid_weights(times)

    def evaluate(f: np.ndarray) -> np.ndarray:
        out = np.empty(f.size)
        for start in range(0, f.size, 64):
            phase = TWO_PI * np.outer(f[start:start + 64], times)
            c = weights * np.cos(phase)
            s = weights * np.sin(phase)
            out[start:start + 64] = np.sum((c @ corr) * c, axis=1) + np.sum((s @ corr) * s, axis=1)
        return out

    logger.debug(f"Correlator on {times.size} samples, {freqs.size} frequencies")
    return evaluate(freqs), float(evaluate(np.array([0.0]))[0])


def response_function(protocol: GateProtocol, kind: str = 'frequency', metric: str = 'haar',
                      freqs: Optional[Sequence[float]] = None, grid: Optional[TimeGrid] = None,
                      state: Optional[np.ndarray] = None,
                      custom: Union[None, np.ndarray, Callable] = None) -> ResponseFunction:
    grid = grid or protocol.default_grid()
    freqs = default_frequencies(protocol.rabi) if freqs is None else np.asarray(freqs, dtype=float)
    if np.any(freqs < 0):
        raise ValueError("Response frequencies must be >= 0")

    if metric == 'single_state':
        if state is None:
            raise ValueError("single_state metric needs a state")
        psi, iso = _state_vector(protocol, state), None
    else:
        psi, iso = None, _isometry_for(protocol, metric)

    values, dc = response_from_hamiltonian(
        protocol.hamiltonian, grid,
        lambda times: _operators_at(protocol, kind, times, custom), freqs,
        isometry=iso, state=psi, blocks=protocol.blocks(grid),
    )
    if np.min(values, initial=0.0) < -1e-9 * max(1.0, np.max(np.abs(values), initial=0.0)):
        logger.warning(f"Response for {kind} has negative values down to {values.min():.3e}")

    return ResponseFunction(freqs_hz=freqs, values=values, kind=kind, metric=metric,
                            protocol_tag=protocol.tag(), omega=protocol.rabi, dc=dc,
                            ideal=protocol.ideal)


def infidelity_from_psd(resp: ResponseFunction, psd: PowerSpectralDensity, dc_variance: float = 0.0,
                        band_hz: Optional[float] = None) -> InfidelityBreakdown:
    """Trapezoid integral of S I on the union grid plus dc_variance I(0), with a per-band histogram"""
    if psd.kind != psd_kind_for(resp.kind):
        raise ValueError(f"PSD kind '{psd.kind}' does not match response kind '{resp.kind}'")
    if dc_variance < 0:
        raise ValueError("DC variance must be >= 0")
    band_hz = band_hz or Config.FRT_BAND_HZ

    r_freqs, _ = resp.points()
    lo = max(r_freqs[0], psd.freqs_hz[0])
    hi = min(r_freqs[-1], psd.freqs_hz[-1])
    dc = dc_variance * resp.dc
    if hi <= lo:
        return InfidelityBreakdown(total=dc, dc=dc, band_edges_hz=np.array([0.0, band_hz]),
                                   band_values=np.zeros(1))

    grid = np.union1d(r_freqs, psd.freqs_hz)
    grid = grid[(grid >= lo) & (grid <= hi)]
    integrand = psd(grid) * resp(grid)
    cumulative = cumulative_trapezoid(integrand, grid, initial=0.0)

    edges = np.arange(0.0, hi + band_hz, band_hz)
    at_edges = np.interp(edges, grid, cumulative, left=0.0, right=cumulative[-1])
    bands = np.diff(at_edges)
    total = float(cumulative[-1]) + dc
    return InfidelityBreakdown(total=total, dc=dc, band_edges_hz=edges, band_values=bands)


def rescale_to_universal(resp: ResponseFunction, omega: Optional[float] = None) -> UniversalResponse:
    omega = omega or resp.omega
    if not omega > 0:
        raise ValueError("Universal rescaling needs a positive Rabi frequency")
    x = TWO_PI * resp.freqs_hz / omega
    factor = omega ** 2 if resp.kind in FREQUENCY_KINDS else 1.0
    warning = None
    if not resp.ideal:
        warning = "response of a non-ideal protocol; universal collapse is not guaranteed"
        logger.warning(f"Rescaling {resp.protocol_tag}: {warning}")
    return UniversalResponse(x=x, g=resp.values * factor, kind=resp.kind, metric=resp.metric,
                             dc=resp.dc * factor, warning=warning)


def from_universal(u: UniversalResponse, omega: float) -> ResponseFunction:
    factor = omega ** 2 if u.kind in FREQUENCY_KINDS else 1.0
    return ResponseFunction(freqs_hz=u.x * omega / TWO_PI, values=u.g / factor, kind=u.kind,
                            metric=u.metric, protocol_tag='universal', omega=omega,
                            dc=u.dc / factor, ideal=u.warning is None)


def approx_universal_form(params: FitParams6, x) -> np.ndarray:
    """Closed-form fits of the universal responses; frequency forms return g, not g / (2 pi)^2"""
    x = np.asarray(x, dtype=float)
    p = params
    if p.form == 'double_gaussian_freq':
        return TWO_PI ** 2 * (p.a * np.exp(-((x - p.b) / p.c) ** 2) + p.d * np.exp(-((x - p.e) / p.f) ** 2))
    if p.form == 'logistic_tanh_int':
        with np.errstate(over='ignore'):
            return p.a * (1.0 + p.d * np.tanh(p.e * (x - p.f))) / (1.0 + np.exp(p.b * (x - p.c)))
    raise ValueError(f"Unknown fit form '{p.form}', expected one of {', '.join(FIT_FORMS)}")


def fit_preset(metric: str, kind: str) -> FitParams6:
    key = f"{metric}_{'frequency' if kind in FREQUENCY_KINDS else 'intensity'}"
    if key not in FIT_PRESETS:
        raise ValueError(f"No fitted form for metric '{metric}' and kind '{kind}'")
    return FIT_PRESETS[key]


def delta_psd_probe(protocol: GateProtocol, config: ErrorModelConfig, kind: str, f0_hz: float,
                    strengths: Sequence[float], n_trajectories: int = 1, master_seed: int = 0,
                    metric: str = 'haar', n_jobs: Optional[int] = None) -> ProbeResult:
    """
    Estimate I(f0) from simulations with a monochromatic modulation of
    variance w. Each strength averages four phases spaced by pi/4 from a
    random start, covering one period of the phase dependence.
    """
    strengths = np.asarray(list(strengths), dtype=float)
    if strengths.size == 0:
        raise ValueError("delta_psd_probe needs at least one strength")
    if np.any(strengths <= 0):
        raise ValueError("Probe strengths must be positive")
    if kind not in ('frequency', 'intensity'):
        raise ValueError(f"Probe kind must be 'frequency' or 'intensity', got '{kind}'")

    phi0 = make_rng((master_seed, 0x70B3)).uniform(0.0, np.pi)
    phases = phi0 + np.pi * np.arange(4) / 4.0

    def infidelity(cfg: ErrorModelConfig) -> Tuple[float, float]:
        est = fidelity_metric(run_ensemble(protocol, cfg, n_trajectories, master_seed, n_jobs=n_jobs), metric)
        return est.infidelity, est.stderr

    baseline, _ = infidelity(config)
    values, errors = [], []
    for w in strengths:
        runs = [infidelity(replace(config, tones=config.tones + (ToneSpec(kind, f0_hz, w, phase=ph),)))
                for ph in phases]
        values.append(np.mean([r[0] for r in runs]) - baseline)
        errors.append(math.sqrt(sum(r[1] ** 2 for r in runs)) / len(runs))
    values = np.array(values)

    slope = float(np.sum(strengths * values) / np.sum(strengths ** 2))
    propagated = math.sqrt(np.sum((strengths * np.array(errors)) ** 2)) / np.sum(strengths ** 2)
    if strengths.size > 1:
        resid = values - slope * strengths
        spread = math.sqrt(np.sum(resid ** 2) / (strengths.size - 1) / np.sum(strengths ** 2))
    else:
        spread = 0.0
    stderr = max(propagated, spread)

    nonlinear = False
    if np.unique(strengths).size >= 2:
        design = np.stack([strengths, strengths ** 2], axis=1)
        (a, b), *_ = np.linalg.lstsq(design, values, rcond=None)
        nonlinear = bool(abs(b * strengths.max()) > 0.2 * abs(a))
    if nonlinear:
        logger.warning(f"Probe at {f0_hz:.6g} Hz is outside the linear regime; reduce the strengths")
    if np.max(values) > 0.05:
        logger.warning(f"Probe infidelity {np.max(values):.3e} exceeds 0.05")

    return ProbeResult(kind=kind, f0_hz=f0_hz, strengths=strengths, infidelities=values,
                       slope=slope, stderr=stderr, nonlinear=nonlinear)


def response_cost(protocol: GateProtocol, psds: Dict[str, PowerSpectralDensity],
                  metric: str = 'sym', dc_variances: Optional[Dict[str, float]] = None) -> float:
    """Sum over noise kinds of the PSD-weighted infidelity, for use as an optimization objective"""
    dc_variances = dc_variances or {}
    total = 0.0
    for kind, psd in psds.items():
        resp = response_function(protocol, kind, metric)
        total += infidelity_from_psd(resp, psd, dc_variances.get(kind, 0.0)).total
    return total


def save_response(resp: ResponseFunction, path: str):
    freqs, values = resp.points()
    np.savetxt(path, np.column_stack([freqs, values]), delimiter=',', fmt='%.17g',
               header=','.join(RESPONSE_HEADER), comments='')


def load_response(path: str, kind: str, metric: str = 'haar', omega: float = 0.0) -> ResponseFunction:
    freqs: List[float] = []
    values: List[float] = []
    with open(path, 'r', encoding='utf-8', newline='') as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != RESPONSE_HEADER:
            raise ValueError(f"{path}: expected header {','.join(RESPONSE_HEADER)}")
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                freqs.append(float(row[0]))
                values.append(float(row[1]))
            except (ValueError, IndexError):
                raise ValueError(f"{path}: row {row_no} is not two numbers")
    if not freqs:
        raise ValueError(f"{path}: no response rows")
    freqs_arr, values_arr = np.array(freqs), np.array(values)
    # lowest sample stands in for I(0) when the file starts above zero
    dc = float(values_arr[0])
    return ResponseFunction(freqs_hz=freqs_arr, values=values_arr, kind=kind, metric=metric,
                            protocol_tag=path, omega=omega, dc=dc)
