#!/usr/bin/env python3
"""
Rydberg gate benchmark command line

Every run writes <stem>.csv, <stem>.json and <stem>.manifest.json into the
--out location (a directory, or a .csv path whose name supplies the stem),
and is recorded in the results store. All randomness flows from --seed
(default 0).
"""

import os
import sys
import csv
import json
import hashlib
import logging
import argparse
from typing import Dict, List, Optional, Sequence

import numpy as np
import psutil

from config import Config, setup_logging, validate_config
from noise_model import (
    CavityFilter, MotionSpec, MovingAverage, ShotToShotSpec, DECAY_PRESETS,
    decay_preset, load_psd, psd_summary, save_psd, transform_psd,
)
from gate_protocols import (
    LevelScheme, RealisticGate, RealisticGateParams, TimeOptimalGate, TimeOptimalParams,
    calibrate_protocol, calibrated_time_optimal, load_protocol_descriptor, protocol_from_settings,
    save_protocol_descriptor, IDEAL_LEVELS, TWO_PI,
)
from trajectory_sim import (
    ErrorModelConfig, METRICS, NOISE_SOURCES, bright_leakage_estimate, fidelity_metric, run_ensemble,
)
from frt_engine import (
    NOISE_KINDS, RESPONSE_METRICS, delta_psd_probe, infidelity_from_psd,
    response_function, save_response,
)
from ssb_benchmark import (
    AnalyticCZModel, CZModel, SHOT_MODES, SSBDataset, SingleQubitModel, leakage_correct, ml_fit,
    parse_ncz_range, run_benchmark,
)
from applications import (
    ManyBodySchedule, SpinLockConfig, manybody_response, save_budget, spinlock_decay_rate_prediction,
    spinlock_response, spinlock_simulate, upgrade_projection,
)
from results_store import ResultsStore
from notifier import RunNotifier

logger = logging.getLogger(__name__)

# Arguments that never change an output number
UNRECORDED_ARGS = ('func', 'threads', 'out', 'notify', 'command', 'action')


class RunArtifacts:
    """Output file names of one run"""

    def __init__(self, out: str, default_stem: str):
        if out.lower().endswith('.csv'):
            self.directory = os.path.dirname(out) or '.'
            self.stem = os.path.basename(out)[:-4]
        else:
            self.directory = out
            self.stem = default_stem
        os.makedirs(self.directory, exist_ok=True)

    def path(self, suffix: str) -> str:
        return os.path.join(self.directory, self.stem + suffix)

    @property
    def csv_path(self) -> str:
        return self.path('.csv')

    @property
    def result_path(self) -> str:
        return self.path('.json')

    @property
    def manifest_path(self) -> str:
        return self.path('.manifest.json')


def _jsonable(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    raise TypeError(f"Cannot serialize {type(value).__name__}")


def _write_json(path: str, data: Dict):
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(data, f, indent=2, sort_keys=True, default=_jsonable)
        f.write('\n')


def write_csv(path: str, header: Sequence[str], rows: Sequence[Sequence]):
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow(['%.17g' % v if isinstance(v, (float, np.floating)) else v for v in row])


def file_digest(path: str) -> str:
    sha = hashlib.sha256()
    with open(path, 'rb') as f:
        for block in iter(lambda: f.read(65536), b''):
            sha.update(block)
    return sha.hexdigest()


def build_manifest(command: str, args: argparse.Namespace) -> Dict:
    params = {k: v for k, v in sorted(vars(args).items()) if k not in UNRECORDED_ARGS}
    inputs = {}
    for key in ('descriptor', 'freq_psd', 'int_psd', 'input'):
        path = getattr(args, key, None)
        if path:
            inputs[path] = file_digest(path)
    return {
        'schema_version': Config.SCHEMA_VERSION,
        'tool_version': Config.TOOL_VERSION,
        'command': command,
        'seed': getattr(args, 'seed', None),
        'params': params,
        'inputs': inputs,
    }


def host_info() -> Dict:
    return {
        'cpu_physical': psutil.cpu_count(logical=False) or 1,
        'cpu_logical': psutil.cpu_count(logical=True) or 1,
        'memory_gb': round(psutil.virtual_memory().total / 1024 ** 3, 2),
    }


def finish_run(command: str, args: argparse.Namespace, artifacts: RunArtifacts,
               result: Dict, summary: Dict):
    """Write result and manifest, then record and announce the run"""
    manifest = build_manifest(command, args)
    _write_json(artifacts.result_path, {'schema_version': Config.SCHEMA_VERSION, 'command': command,
                                        'result': result})
    _write_json(artifacts.manifest_path, manifest)

    manifest['output_dir'] = os.path.abspath(artifacts.directory)
    try:
        store = ResultsStore()
        store.record_run(manifest, summary, host_info())
        store.close()
    except Exception as e:
        logger.error(f"Run not recorded: {e}")

    if getattr(args, 'notify', False):
        ok, detail = RunNotifier().send_summary({'command': command, 'seed': manifest['seed'], **summary})
        if not ok:
            print(f"✗ Notification not sent: {detail}")

    for path in (artifacts.csv_path, artifacts.result_path, artifacts.manifest_path):
        if os.path.exists(path):
            print(f"✓ Wrote {path}")


def _parse_floats(text: str, name: str) -> List[float]:
    try:
        values = [float(v) for v in text.split(',') if v.strip()]
    except ValueError:
        raise ValueError(f"Cannot parse {name} list '{text}'")
    if not values:
        raise ValueError(f"Empty {name} list")
    return values


def protocol_from_args(args: argparse.Namespace):
    if getattr(args, 'descriptor', None):
        return load_protocol_descriptor(args.descriptor)
    settings = {
        'protocol': args.protocol,
        'rabi_hz': repr(args.rabi_hz),
        'blockade_hz': 'inf' if args.blockade_hz is None else repr(args.blockade_hz),
    }
    if args.protocol == 'realistic':
        settings['rise_s'] = repr(args.rise_s)
    return protocol_from_settings(settings)


def noise_from_args(args: argparse.Namespace) -> ErrorModelConfig:
    config = ErrorModelConfig(
        frequency_psd=load_psd(args.freq_psd, 'frequency') if args.freq_psd else None,
        intensity_psd=load_psd(args.int_psd, 'relative_intensity') if args.int_psd else None,
        shot_to_shot_intensity=ShotToShotSpec(args.shot_intensity),
        shot_to_shot_detuning=ShotToShotSpec(args.shot_detuning_hz),
        decay_channels=decay_preset(args.decay_preset) if args.decay_preset else [],
        motion=MotionSpec(doppler_sigma_hz=args.doppler_hz),
    )
    if args.sources:
        config = config.only(*[s.strip() for s in args.sources.split(',') if s.strip()])
    return config


def cmd_calibrate_gate(args: argparse.Namespace):
    """Calibrate a time-optimal or realistic gate and save its descriptor"""
    omega = TWO_PI * args.rabi_hz
    blockade = None if args.blockade_hz is None else TWO_PI * args.blockade_hz
    print(f"\n🔧 Calibrating {args.protocol} gate at Ω/2π = {args.rabi_hz:.6g} Hz")

    if args.protocol == 'time-optimal':
        scheme = LevelScheme(IDEAL_LEVELS, 2, blockade)
        calibration = calibrate_protocol(TimeOptimalParams.initial_guess(omega), scheme)
        gate = TimeOptimalGate(calibration.params, scheme)
    else:
        guess = calibrated_time_optimal(omega)
        area = guess.omega * guess.duration + omega * args.rise_s
        start = TimeOptimalParams.from_dimensionless(guess.dimensionless()[:4] + (area,), omega)
        params = RealisticGateParams(pulse=start, rise_time=args.rise_s, blockade=blockade)
        calibration = calibrate_protocol(params)
        gate = RealisticGate(calibration.params, LevelScheme(IDEAL_LEVELS, 2, blockade))

    artifacts = RunArtifacts(args.out, 'calibrate_gate')
    save_protocol_descriptor(gate, artifacts.path('.protocol.txt'))
    grid = gate.default_grid()
    t = grid.midpoints
    write_csv(artifacts.csv_path, ['time_s', 'rabi', 'phase', 'detuning'],
              zip(t, gate.envelope(t), gate.phase(t), gate.static_detuning(t)))

    pulse = calibration.params if isinstance(calibration.params, TimeOptimalParams) else calibration.params.pulse
    result = {
        'protocol': gate.tag(),
        'duration_s': gate.duration,
        'residual': calibration.residual,
        'converged': calibration.converged,
        'evaluations': calibration.evaluations,
        'single_atom_phase': pulse.single_atom_phase,
        'dimensionless': list(pulse.dimensionless()),
    }
    if calibration.converged:
        print(f"✓ Converged: residual {calibration.residual:.3e}, duration {gate.duration * 1e9:.2f} ns")
    else:
        print(f"✗ Not converged: best residual {calibration.residual:.3e}")
    print(f"✓ Wrote {artifacts.path('.protocol.txt')}")
    finish_run('calibrate-gate', args, artifacts, result,
               {'residual': calibration.residual, 'duration_s': gate.duration})


def cmd_gate_fidelity(args: argparse.Namespace):
    """Monte Carlo gate fidelity under the configured error model"""
    protocol = protocol_from_args(args)
    noise = noise_from_args(args)
    print(f"\n🎲 Simulating {args.trajectories} trajectories of {protocol.tag()}")

    channel = run_ensemble(protocol, noise, args.trajectories, args.seed, n_jobs=args.threads)
    estimates = {metric: fidelity_metric(channel, metric) for metric in METRICS if metric != 'single_state'}

    artifacts = RunArtifacts(args.out, 'gate_fidelity')
    write_csv(artifacts.csv_path, ['metric', 'fidelity', 'stderr'],
              [(m, e.mean, e.stderr) for m, e in estimates.items()])
    result = {
        'protocol': protocol.tag(),
        'noise': noise.describe(),
        'channel': channel.summary(),
        'leakage_by_level': channel.leakage_by_level(),
        'fidelity': {m: {'mean': e.mean, 'stderr': e.stderr} for m, e in estimates.items()},
    }
    if noise.active_channels:
        bright = channel.bright_leakage()
        noiseless = bright_leakage_estimate(protocol, noise.active_channels)
        result['bright_leakage'] = {'eps_image': bright, 'eps_false': 0.5 * bright, 'eps_image_noiseless': noiseless}
        print(f"✓ Bright leakage per gate {bright:.3e} (false contribution {0.5 * bright:.3e}, "
              f"noiseless estimate {noiseless:.3e})")
    for m, e in estimates.items():
        print(f"✓ F_{m} = {e.mean:.6f} ± {e.stderr:.1e}")
    finish_run('gate-fidelity', args, artifacts, result,
               {'F_sym': estimates['sym'].mean, 'stderr': estimates['sym'].stderr})


def _cz_model_from_args(args: argparse.Namespace) -> CZModel:
    if args.cz_model == 'ideal':
        return CZModel.ideal()
    if args.cz_model == 'analytic':
        return AnalyticCZModel(depolarizing=args.depolarizing, leakage=args.leakage)
    protocol = protocol_from_args(args)
    channel = run_ensemble(protocol, noise_from_args(args), args.gate_trajectories, args.seed,
                           n_jobs=args.threads)
    return CZModel.from_channel(channel)


def _single_qubit_from_args(args: argparse.Namespace) -> SingleQubitModel:
    if args.single_qubit == 'phase_flip':
        return SingleQubitModel.phase_flip(args.single_strength)
    if args.single_qubit == 'depolarizing':
        return SingleQubitModel.depolarizing(args.single_strength)
    return SingleQubitModel.ideal()


def _fit_summary(data: SSBDataset, offset: int = 0, eps_image: float = 0.0,
                 eps_image_err: float = 0.0) -> Optional[Dict]:
    if np.unique(data.n_cz).size < 3:
        return None
    fit = ml_fit(data, offset)
    if eps_image > 0:
        fit = leakage_correct(fit, eps_image, eps_image_err)
    return fit.to_dict()


def cmd_ssb_run(args: argparse.Namespace):
    """Sample symmetric-subspace benchmarking circuits across an N_CZ sweep"""
    n_cz_values = parse_ncz_range(args.ncz)
    model = _cz_model_from_args(args)
    print(f"\n🔁 SSB run: {args.instances} instances at N_CZ = {n_cz_values}")

    data = run_benchmark(model, _single_qubit_from_args(args), args.n_rotations, n_cz_values,
                         args.instances, args.shots, args.shot_mode, args.seed,
                         virtual_phase=args.virtual_phase, n_jobs=args.threads)
    artifacts = RunArtifacts(args.out, 'ssb_run')
    data.save_csv(artifacts.csv_path)

    fit = _fit_summary(data)
    result = {
        'cz_model': model.name,
        'points': [{'n_cz': r.n_cz, 'p11': r.p11, 'err': r.err, 'shots': r.shots, 'instances': r.instances}
                   for r in data.rows],
        'fit': fit,
    }
    if fit:
        print(f"✓ F = {fit['F']:.6f} ± {fit['stderr']:.1e}")
    finish_run('ssb run', args, artifacts, result, {'F': fit['F']} if fit else {})


def cmd_ssb_fit(args: argparse.Namespace):
    """Maximum-likelihood fit of a saved SSB dataset"""
    data = SSBDataset.load_csv(args.input)
    print(f"\n📈 Fitting {len(data.rows)} points from {args.input}")
    fit = _fit_summary(data, args.offset, args.eps_image, args.eps_image_err)
    if fit is None:
        raise ValueError("SSB fit needs at least three distinct N_CZ values")

    artifacts = RunArtifacts(args.out, 'ssb_fit')
    curve = fit['a0'] * fit['F'] ** (data.n_cz - args.offset)
    write_csv(artifacts.csv_path, ['n_cz', 'p11', 'err', 'p11_fit'],
              [(int(n), p, e, c) for n, p, e, c in zip(data.n_cz, data.p11, data.err, curve)])
    print(f"✓ F = {fit['F']:.6f} ± {fit['stderr']:.1e} (χ²_red = {fit['chi2_red']:.3f})")
    if args.eps_image > 0:
        print(f"✓ Leakage-corrected F = {fit['F_corrected']:.6f}")
    finish_run('ssb fit', args, artifacts, fit, {'F': fit['F'], 'F_corrected': fit['F_corrected']})


def cmd_frt_response(args: argparse.Namespace):
    """Fidelity response function of a protocol to one noise kind"""
    protocol = protocol_from_args(args)
    print(f"\n〰️  Response of {protocol.tag()} to {args.noise} noise ({args.metric})")
    resp = response_function(protocol, args.noise, args.metric)

    artifacts = RunArtifacts(args.out, 'frt_response')
    save_response(resp, artifacts.csv_path)
    result = {
        'protocol': resp.protocol_tag,
        'kind': resp.kind,
        'metric': resp.metric,
        'omega': resp.omega,
        'dc': resp.dc,
        'n_freqs': int(resp.freqs_hz.size),
    }
    print(f"✓ I(0) = {resp.dc:.6e}")
    finish_run('frt response', args, artifacts, result, {'dc': resp.dc})


def cmd_frt_infidelity(args: argparse.Namespace):
    """Infidelity budget from measured PSDs through the response functions"""
    protocol = protocol_from_args(args)
    noise = noise_from_args(args)
    terms = []
    if noise.frequency and noise.frequency_psd is not None:
        terms.append(('frequency', noise.frequency_psd, noise.shot_to_shot_detuning.sigma))
    if noise.intensity and noise.intensity_psd is not None:
        terms.append(('intensity', noise.intensity_psd, noise.shot_to_shot_intensity.sigma))
    if not terms:
        raise ValueError("frt infidelity needs --freq-psd and/or --int-psd")

    print(f"\n∑ Infidelity budget of {protocol.tag()} ({args.metric})")
    budget, rows = {}, []
    for kind, psd, sigma in terms:
        resp = response_function(protocol, kind, args.metric)
        breakdown = infidelity_from_psd(resp, psd, sigma ** 2 if noise.shot_to_shot else 0.0)
        budget[kind] = {'psd': psd_summary(psd), **breakdown.to_dict()}
        for band in budget[kind]['bands']:
            rows.append((kind, band['f_lo_hz'], band['f_hi_hz'], band['infidelity']))
        print(f"✓ ε_{kind} = {breakdown.total:.4e}")

    total = float(sum(b['total'] for b in budget.values()))
    artifacts = RunArtifacts(args.out, 'frt_infidelity')
    write_csv(artifacts.csv_path, ['kind', 'f_lo_hz', 'f_hi_hz', 'infidelity'], rows)
    print(f"✓ Total ε = {total:.4e}")
    finish_run('frt infidelity', args, artifacts, {'total': total, 'budget': budget}, {'total': total})


def cmd_frt_probe(args: argparse.Namespace):
    """Numerical response at one frequency from monochromatic modulations"""
    protocol = protocol_from_args(args)
    strengths = _parse_floats(args.strengths, 'strength')
    print(f"\n🎯 Probing {args.noise} response at {args.f0_hz:.6g} Hz")
    probe = delta_psd_probe(protocol, noise_from_args(args), args.noise, args.f0_hz, strengths,
                            args.trajectories, args.seed, args.metric, n_jobs=args.threads)
    predicted = float(response_function(protocol, args.noise, args.metric, freqs=[args.f0_hz]).values[0])

    artifacts = RunArtifacts(args.out, 'frt_probe')
    write_csv(artifacts.csv_path, ['strength', 'infidelity'], zip(probe.strengths, probe.infidelities))
    result = {
        'kind': probe.kind,
        'f0_hz': probe.f0_hz,
        'response': probe.slope,
        'stderr': probe.stderr,
        'nonlinear': probe.nonlinear,
        'response_predicted': predicted,
    }
    print(f"✓ I_num = {probe.slope:.4g} ± {probe.stderr:.2g} (predicted {predicted:.4g})")
    if probe.nonlinear:
        print("✗ Probe is outside the linear regime; reduce --strengths")
    finish_run('frt probe', args, artifacts, result, {'response': probe.slope, 'stderr': probe.stderr})


def cmd_psd_transform(args: argparse.Namespace):
    """Cavity-filter or smooth a PSD file"""
    psd = load_psd(args.input, args.kind)
    if args.cavity_linewidth_hz is not None:
        transform = CavityFilter(args.cavity_linewidth_hz)
    else:
        transform = MovingAverage(args.moving_average_hz)
    print(f"\n🧹 Applying {transform} to {args.input}")
    out = transform_psd(psd, transform)

    artifacts = RunArtifacts(args.out, 'psd_transform')
    save_psd(out, artifacts.csv_path)
    result = {'input': psd_summary(psd), 'output': psd_summary(out)}
    print(f"✓ Integral {psd.integral():.4e} -> {out.integral():.4e}")
    finish_run('psd transform', args, artifacts, result, {'integral': out.integral()})


def cmd_spinlock(args: argparse.Namespace):
    """Spin-lock noise spectroscopy at one lock Rabi frequency"""
    omega = TWO_PI * args.rabi_hz
    times = [1e-6 * t for t in _parse_floats(args.times_us, 'time')]
    config = SpinLockConfig(omega, times, args.gamma_ryd)
    noise = noise_from_args(args)
    print(f"\n🔒 Spin-lock at Ω/2π = {args.rabi_hz:.6g} Hz, {len(times)} probe times")

    fit = spinlock_simulate(config, noise, args.trajectories, args.seed, n_jobs=args.threads)
    predicted = 0.5 * args.gamma_ryd
    if noise.frequency_psd is not None and noise.frequency:
        predicted = spinlock_decay_rate_prediction(noise.frequency_psd, omega, args.gamma_ryd,
                                                   args.smoothing_hz)

    artifacts = RunArtifacts(args.out, 'spinlock')
    write_csv(artifacts.csv_path, ['time_s', 'signal', 'err'], zip(fit.times, fit.signal, fit.signal_err))
    result = {
        'gamma': fit.gamma,
        'gamma_stderr': fit.gamma_stderr,
        'a0': fit.a0,
        'b0': fit.b0,
        'gamma_predicted': predicted,
    }
    if args.response_freqs:
        freqs = _parse_floats(args.response_freqs, 'frequency')
        resp = spinlock_response(omega, times[-1], freqs)
        result['response'] = {'time_s': times[-1], 'freqs_hz': list(freqs), 'values': resp.values}
    print(f"✓ Γ = {fit.gamma:.4e} ± {fit.gamma_stderr:.1e} 1/s (predicted {predicted:.4e})")
    finish_run('spinlock', args, artifacts, result, {'gamma': fit.gamma, 'gamma_predicted': predicted})


def cmd_manybody_response(args: argparse.Namespace):
    """Response of a many-body quench or sweep to global noise"""
    omega = TWO_PI * args.rabi_hz
    if args.schedule == 'quench':
        schedule = ManyBodySchedule.quench(args.sites, omega, args.duration_s, args.rb_over_a, args.spacing_m)
    else:
        schedule = ManyBodySchedule.tangent_sweep(args.sites, omega, args.duration_s,
                                                  curvature=args.curvature, rb_over_a=args.rb_over_a,
                                                  spacing_m=args.spacing_m)
    print(f"\n🧲 {args.schedule} of {args.sites} sites: {args.noise} response")
    resp = manybody_response(schedule, args.noise)

    artifacts = RunArtifacts(args.out, 'manybody_response')
    save_response(resp, artifacts.csv_path)
    result = {'schedule': schedule.kind, 'sites': schedule.n_sites, 'c6': schedule.c6,
              'kind': resp.kind, 'dc': resp.dc, 'omega': resp.omega}
    print(f"✓ I(0) = {resp.dc:.6e}")
    finish_run('manybody response', args, artifacts, result, {'dc': resp.dc})


def cmd_project_upgrade(args: argparse.Namespace):
    """Error budget across Rabi frequencies with an optional cavity filter"""
    noise = noise_from_args(args)
    rabi_values = _parse_floats(args.rabi_hz_values, 'Rabi frequency')
    print(f"\n🚀 Projecting budget over {len(rabi_values)} Rabi frequencies")
    rows = upgrade_projection(noise, args.cavity_linewidth_hz, rabi_values, args.metric)

    artifacts = RunArtifacts(args.out, 'project_upgrade')
    save_budget(rows, artifacts.csv_path)
    result = {'rows': [dict(zip(['rabi_hz', 'eps_freq', 'eps_int', 'eps_decay', 'eps_motion', 'eps_total'],
                                row.as_list())) for row in rows]}
    best = min(rows, key=lambda r: r.eps_total)
    print(f"✓ Lowest total ε = {best.eps_total:.4e} at {best.rabi_hz:.4g} Hz")
    finish_run('project upgrade', args, artifacts, result,
               {'best_rabi_hz': best.rabi_hz, 'best_eps_total': best.eps_total})


def cmd_status(args: argparse.Namespace):
    """Status report of host, run ledger and log"""
    import monitor
    if args.watch:
        monitor.watch_status()
    else:
        monitor.print_status()


def _add_common(p: argparse.ArgumentParser, seed: bool = True):
    p.add_argument('--out', default=Config.OUTPUT_DIR,
                   help=f'Output directory or .csv path (default: {Config.OUTPUT_DIR})')
    if seed:
        p.add_argument('--seed', type=int, default=0, help='Master seed (default: 0)')
    p.add_argument('--threads', type=int, default=Config.DEFAULT_THREADS,
                   help=f'Worker count (default: {Config.DEFAULT_THREADS})')
    p.add_argument('--notify', action='store_true', help='Post a run summary to NOTIFY_WEBHOOK_URL')


def _add_protocol(p: argparse.ArgumentParser):
    p.add_argument('--protocol', choices=['time-optimal', 'realistic'], default='time-optimal',
                   help='Gate protocol (default: time-optimal)')
    p.add_argument('--descriptor', help='Protocol descriptor file (overrides --protocol)')
    p.add_argument('--rabi-hz', type=float, default=7.7e6, help='Rabi frequency Ω/2π in Hz (default: 7.7e6)')
    p.add_argument('--blockade-hz', type=float, help='Finite blockade B/2π in Hz (default: infinite)')
    p.add_argument('--rise-s', type=float, default=Config.RISE_TIME_S,
                   help=f'Realistic pulse rise time (default: {Config.RISE_TIME_S})')


def _add_noise(p: argparse.ArgumentParser):
    p.add_argument('--freq-psd', help='Frequency-noise PSD CSV (freq_hz,psd in Hz^2/Hz)')
    p.add_argument('--int-psd', help='Relative intensity noise PSD CSV (freq_hz,psd in 1/Hz)')
    p.add_argument('--shot-detuning-hz', type=float, default=0.0, help='Shot-to-shot detuning sigma in Hz')
    p.add_argument('--shot-intensity', type=float, default=0.0, help='Shot-to-shot relative intensity sigma')
    p.add_argument('--decay-preset', choices=sorted(DECAY_PRESETS), help='Decay channel preset')
    p.add_argument('--doppler-hz', type=float, default=0.0, help='Doppler detuning sigma in Hz')
    p.add_argument('--sources', help=f"Comma list of active sources from {', '.join(NOISE_SOURCES)}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Noisy Rydberg CZ gate simulation and benchmarking",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  %(prog)s calibrate-gate --rabi-hz 7.7e6 --out runs/cal
  %(prog)s gate-fidelity --rabi-hz 3e6 --decay-preset sr88-n61 --trajectories 2000
  %(prog)s ssb run --rabi-hz 3e6 --ncz 2:10 --instances 100 --shots 500 --seed 7
  %(prog)s ssb fit --in runs/ssb_run.csv --eps-image 6.8e-4
  %(prog)s frt response --rabi-hz 7.7e6 --noise frequency --metric sym --out r.csv
  %(prog)s frt infidelity --freq-psd data/psd_frequency.csv --int-psd data/psd_intensity.csv
  %(prog)s psd transform --cavity-linewidth-hz 140e3 --in psd.csv --out f.csv
  %(prog)s spinlock --rabi-hz 1e6 --times-us 1,2,4,8 --freq-psd data/psd_frequency.csv
  %(prog)s manybody response --sites 7 --schedule quench --noise intensity
  %(prog)s project upgrade --freq-psd data/psd_frequency.csv --cavity-linewidth-hz 140e3
  %(prog)s status
  %(prog)s status --watch
        """
    )
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('calibrate-gate', help='Calibrate gate parameters')
    p.add_argument('--protocol', choices=['time-optimal', 'realistic'], default='time-optimal')
    p.add_argument('--rabi-hz', type=float, default=7.7e6)
    p.add_argument('--blockade-hz', type=float)
    p.add_argument('--rise-s', type=float, default=Config.RISE_TIME_S)
    _add_common(p, seed=False)
    p.set_defaults(func=cmd_calibrate_gate)

    p = sub.add_parser('gate-fidelity', help='Monte Carlo gate fidelity')
    _add_protocol(p)
    _add_noise(p)
    p.add_argument('--trajectories', type=int, default=Config.GATE_TRAJECTORIES)
    _add_common(p)
    p.set_defaults(func=cmd_gate_fidelity)

    ssb = sub.add_parser('ssb', help='Symmetric-subspace benchmarking').add_subparsers(dest='action', required=True)
    p = ssb.add_parser('run', help='Simulate an SSB experiment')
    _add_protocol(p)
    _add_noise(p)
    p.add_argument('--cz-model', choices=['channel', 'analytic', 'ideal'], default='channel',
                   help='CZ error model: simulated channel ensemble, analytic depolarizing, or ideal')
    p.add_argument('--gate-trajectories', type=int, default=200, help='Channel samples for --cz-model channel')
    p.add_argument('--depolarizing', type=float, default=0.0)
    p.add_argument('--leakage', type=float, default=0.0)
    p.add_argument('--single-qubit', choices=['ideal', 'phase_flip', 'depolarizing'], default='ideal')
    p.add_argument('--single-strength', type=float, default=0.0)
    p.add_argument('--n-rotations', type=int, default=Config.SSB_N)
    p.add_argument('--ncz', default=Config.SSB_NCZ, help=f'N_CZ range or list (default: {Config.SSB_NCZ})')
    p.add_argument('--instances', type=int, default=Config.CIRCUIT_TRAJECTORIES)
    p.add_argument('--shots', type=int, default=0, help='Shots per instance (0 keeps exact probabilities)')
    p.add_argument('--shot-mode', choices=SHOT_MODES, default='independent')
    p.add_argument('--virtual-phase', type=float, help='Override the virtual-Z phase in rad')
    _add_common(p)
    p.set_defaults(func=cmd_ssb_run)

    p = ssb.add_parser('fit', help='Fit a saved SSB dataset')
    p.add_argument('--in', dest='input', required=True, help='Dataset CSV (n_cz,p11,err,shots)')
    p.add_argument('--offset', type=int, default=0, help='Fit a0 F^(N_CZ - offset)')
    p.add_argument('--eps-image', type=float, default=0.0, help='Imaged leakage per gate')
    p.add_argument('--eps-image-err', type=float, default=0.0)
    _add_common(p, seed=False)
    p.set_defaults(func=cmd_ssb_fit)

    frt = sub.add_parser('frt', help='Fidelity response theory').add_subparsers(dest='action', required=True)
    p = frt.add_parser('response', help='Response function of a protocol')
    _add_protocol(p)
    p.add_argument('--noise', choices=NOISE_KINDS, default='frequency')
    p.add_argument('--metric', choices=[m for m in RESPONSE_METRICS if m != 'single_state'], default='haar')
    _add_common(p, seed=False)
    p.set_defaults(func=cmd_frt_response)

    p = frt.add_parser('infidelity', help='Infidelity budget from PSDs')
    _add_protocol(p)
    _add_noise(p)
    p.add_argument('--metric', choices=[m for m in RESPONSE_METRICS if m != 'single_state'], default='haar')
    _add_common(p, seed=False)
    p.set_defaults(func=cmd_frt_infidelity)

    p = frt.add_parser('probe', help='Delta-PSD probe of the response')
    _add_protocol(p)
    _add_noise(p)
    p.add_argument('--noise', choices=['frequency', 'intensity'], default='intensity')
    p.add_argument('--f0-hz', type=float, required=True)
    p.add_argument('--strengths', default='1e-5,2e-5,4e-5', help='Comma list of tone variances')
    p.add_argument('--trajectories', type=int, default=1)
    p.add_argument('--metric', choices=['haar', 'sym'], default='haar')
    _add_common(p)
    p.set_defaults(func=cmd_frt_probe)

    psd = sub.add_parser('psd', help='PSD utilities').add_subparsers(dest='action', required=True)
    p = psd.add_parser('transform', help='Filter or smooth a PSD')
    p.add_argument('--in', dest='input', required=True, help='PSD CSV (freq_hz,psd)')
    p.add_argument('--kind', choices=['frequency', 'relative_intensity'], default='frequency')
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument('--cavity-linewidth-hz', type=float, help='Lorentzian cavity FWHM')
    group.add_argument('--moving-average-hz', type=float, help='Moving-average window width')
    _add_common(p, seed=False)
    p.set_defaults(func=cmd_psd_transform)

    p = sub.add_parser('spinlock', help='Spin-lock noise spectroscopy')
    _add_noise(p)
    p.add_argument('--rabi-hz', type=float, default=1e6)
    p.add_argument('--times-us', default='1,2,4,8,16', help='Comma list of lock times in µs')
    p.add_argument('--gamma-ryd', type=float, default=0.0, help='Rydberg decay rate in 1/s')
    p.add_argument('--smoothing-hz', type=float, help='Moving-average window for the prediction')
    p.add_argument('--response-freqs', help='Comma list of frequencies for the response at the last time')
    p.add_argument('--trajectories', type=int, default=1000)
    _add_common(p)
    p.set_defaults(func=cmd_spinlock)

    mb = sub.add_parser('manybody', help='Many-body responses').add_subparsers(dest='action', required=True)
    p = mb.add_parser('response', help='Response of a chain schedule')
    p.add_argument('--sites', type=int, default=7)
    p.add_argument('--schedule', choices=['quench', 'sweep'], default='quench')
    p.add_argument('--rabi-hz', type=float, default=7.7e6)
    p.add_argument('--duration-s', type=float, default=6e-6)
    p.add_argument('--noise', choices=['frequency', 'intensity'], default='intensity')
    p.add_argument('--rb-over-a', type=float, default=1.5, help='Blockade radius over spacing')
    p.add_argument('--spacing-m', type=float, default=3e-6)
    p.add_argument('--curvature', type=float, default=1.3, help='Tangent sweep curvature')
    _add_common(p, seed=False)
    p.set_defaults(func=cmd_manybody_response)

    proj = sub.add_parser('project', help='Projections').add_subparsers(dest='action', required=True)
    p = proj.add_parser('upgrade', help='Error budget across Rabi frequencies')
    _add_noise(p)
    p.add_argument('--cavity-linewidth-hz', type=float, help='Filter the frequency PSD (default: unfiltered)')
    p.add_argument('--rabi-hz-values', default='3e6,5.4e6,7.7e6,10e6')
    p.add_argument('--metric', choices=['haar', 'sym'], default='sym')
    _add_common(p, seed=False)
    p.set_defaults(func=cmd_project_upgrade)

    p = sub.add_parser('status', help='Show host, ledger and log status')
    p.add_argument('--watch', action='store_true', help='Repeat the report every 30 s until Ctrl+C')
    p.set_defaults(func=cmd_status)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main function"""
    parser = build_parser()
    args = parser.parse_args(argv)

    setup_logging()

    try:
        validate_config()
        args.func(args)
    except Exception as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"✗ Error: {e}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
