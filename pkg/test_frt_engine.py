#!/usr/bin/env python3
"""
Tests for response functions, PSD-weighted infidelities and single-tone modulations
"""

import os
import sys
import tempfile

import numpy as np
from scipy.integrate import trapezoid

from quantum_core import evolve_propagator
from noise_model import PowerSpectralDensity, load_psd
from gate_protocols import TimeOptimalGate, TWO_PI, calibrated_time_optimal, cz_infidelity
from trajectory_sim import ErrorModelConfig, fidelity_metric, run_ensemble
from frt_engine import (
    approx_universal_form, delta_psd_probe, fit_preset, from_universal, infidelity_from_psd, load_response,
    noise_operator_schedule, rescale_to_universal, response_cost, response_function, save_response,
)

RABI_HZ = 3e6
X_POINTS = np.array([0.0, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5])
DATA_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'data')


def _gate(rabi_hz: float = RABI_HZ) -> TimeOptimalGate:
    return TimeOptimalGate(calibrated_time_optimal(TWO_PI * rabi_hz))


def _shipped_psds():
    return (load_psd(os.path.join(DATA_DIR, 'psd_frequency.csv'), 'frequency'),
            load_psd(os.path.join(DATA_DIR, 'psd_intensity.csv'), 'relative_intensity'))


def test_dc_response_matches_static_detuning():
    gate = _gate()
    grid = gate.default_grid()
    resp = response_function(gate, 'frequency', 'haar', freqs=[1e5], grid=grid)
    h = gate.hamiltonian(grid.midpoints)
    op = gate.frequency_operator()

    def eps(delta_hz):
        u = evolve_propagator(h + delta_hz * op, grid)
        return cz_infidelity(u, gate.scheme, 'haar', phase=gate.params.single_atom_phase)

    delta = 1e4
    second_order = 0.5 * (eps(delta) + eps(-delta)) - eps(0.0)
    assert abs(second_order / (delta ** 2 * resp.dc) - 1.0) < 0.02


def test_single_atom_detuning_response():
    for rabi_hz in (RABI_HZ, 7.7e6):
        resp = response_function(_gate(rabi_hz), 'single_atom_frequency', 'haar', freqs=[1e5])
        assert abs(resp.dc * rabi_hz ** 2 / 3.0 - 1.0) < 0.05, rabi_hz


def test_response_collapses_in_units_of_rabi_frequency():
    universal = []
    for rabi_hz in (RABI_HZ, 7.7e6):
        gate = _gate(rabi_hz)
        for kind in ('frequency', 'intensity'):
            resp = response_function(gate, kind, 'sym', freqs=X_POINTS * rabi_hz)
            assert np.all(resp.values >= -1e-9 * resp.values.max())
            universal.append(rescale_to_universal(resp))
    slow_freq, slow_int, fast_freq, fast_int = universal
    assert np.allclose(slow_freq.x, fast_freq.x, rtol=1e-12)
    assert np.allclose(slow_freq.g, fast_freq.g, rtol=1e-6)
    assert np.allclose(slow_int.g, fast_int.g, rtol=1e-6)
    assert slow_freq.warning is None


def test_universal_response_matches_fitted_form():
    gate = _gate()
    x = np.linspace(0.0, 2.0, 21)
    for metric in ('haar', 'sym'):
        for kind in ('frequency', 'intensity'):
            u = rescale_to_universal(response_function(gate, kind, metric, freqs=x * RABI_HZ))
            fit = approx_universal_form(fit_preset(metric, kind), x)
            assert np.max(np.abs(u.g - fit)) < 0.05 * np.max(fit), (metric, kind)


def test_infidelity_from_flat_psd():
    gate = _gate()
    freqs = np.linspace(0.0, 6e6, 61)
    resp = response_function(gate, 'frequency', 'haar', freqs=freqs)
    psd = PowerSpectralDensity(freqs, np.full(freqs.size, 50.0), 'frequency')
    breakdown = infidelity_from_psd(resp, psd, dc_variance=1e6, band_hz=1e6)
    expected = 50.0 * trapezoid(resp.values, freqs)
    assert abs(breakdown.total - breakdown.dc - expected) < 1e-9 * expected
    assert abs(breakdown.dc - 1e6 * resp.dc) < 1e-15
    assert abs(np.sum(breakdown.band_values) - expected) < 1e-9 * expected
    assert len(breakdown.to_dict()['bands']) == breakdown.band_values.size

    intensity_psd = PowerSpectralDensity(freqs, np.full(freqs.size, 1e-12), 'relative_intensity')
    try:
        infidelity_from_psd(resp, intensity_psd)
        assert False, "mismatched PSD kind accepted"
    except ValueError:
        pass


def test_frequency_modulation_reproduces_response():
    gate = _gate()
    f0 = 1.5e6
    resp = response_function(gate, 'frequency', 'haar', freqs=[f0])
    result = delta_psd_probe(gate, ErrorModelConfig(), 'frequency', f0, [2.5e9, 5e9], n_trajectories=1,
                             master_seed=4, n_jobs=1)
    assert not result.nonlinear
    assert abs(result.slope / resp.values[0] - 1.0) < 0.05
    try:
        delta_psd_probe(gate, ErrorModelConfig(), 'frequency', f0, [-1.0])
        assert False, "negative strength accepted"
    except ValueError:
        pass


def test_intensity_modulation_reproduces_response():
    gate = _gate()
    f0 = 1.5e6
    resp = response_function(gate, 'intensity', 'haar', freqs=[f0])
    # closed-form value of the Haar intensity response at half the Rabi frequency
    assert abs(resp.values[0] - 1.04) < 0.1
    result = delta_psd_probe(gate, ErrorModelConfig(), 'intensity', f0, [5e-4, 1e-3], n_trajectories=1,
                             master_seed=4, n_jobs=1)
    assert not result.nonlinear
    assert abs(result.slope / resp.values[0] - 1.0) < 0.05


def test_psd_prediction_matches_trajectories():
    freq_psd, int_psd = _shipped_psds()
    config = ErrorModelConfig(frequency_psd=freq_psd, intensity_psd=int_psd)
    for rabi_hz in (RABI_HZ, 7.7e6):
        gate = _gate(rabi_hz)
        predicted = response_cost(gate, {'frequency': freq_psd, 'intensity': int_psd}, metric='sym')
        estimate = fidelity_metric(run_ensemble(gate, config, 1500, master_seed=11, n_jobs=2), 'sym')
        assert abs(estimate.infidelity - predicted) < 0.15 * predicted + 2 * estimate.stderr, \
            (rabi_hz, estimate.infidelity, predicted)


def test_band_limited_scaling_with_rabi_frequency():
    freq_psd, int_psd = _shipped_psds()
    rabi = np.array([4e6, 5.4e6, 7.7e6, 10e6])
    reference = _gate()
    eps = {}
    for kind, psd in (('frequency', freq_psd), ('intensity', int_psd)):
        u = rescale_to_universal(response_function(reference, kind, 'haar'))
        eps[kind] = np.array([infidelity_from_psd(from_universal(u, TWO_PI * r), psd).total for r in rabi])
    exponent = np.polyfit(np.log(rabi), np.log(eps['frequency']), 1)[0]
    assert -2.1 <= exponent <= -1.6, exponent
    # band-limited intensity noise stops depending on the Rabi frequency
    slopes = np.diff(np.log(eps['intensity'])) / np.diff(np.log(rabi))
    assert abs(slopes[-1]) < 0.2, slopes


def test_response_csv_round_trip():
    resp = response_function(_gate(), 'intensity', 'sym', freqs=[1e5, 1e6, 3e6])
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, 'resp.csv')
        save_response(resp, path)
        back = load_response(path, 'intensity', 'sym')
        assert back.freqs_hz[0] == 0.0
        assert back.dc == resp.dc
        assert np.array_equal(back.values[1:], resp.values)

        bad = os.path.join(tmp, 'bad.csv')
        with open(bad, 'w') as f:
            f.write("freq_hz,value\n0,1.0\n1e5,x\n")
        try:
            load_response(bad, 'intensity')
            assert False, "non-numeric row accepted"
        except ValueError as e:
            assert 'row 3' in str(e)


def test_noise_operator_schedules():
    gate = _gate()
    grid = gate.default_grid()
    freq = noise_operator_schedule(gate, 'frequency', grid)
    assert freq.operators.shape == (grid.n_steps, 8, 8)
    assert np.allclose(freq.operators[-1], gate.frequency_operator())
    inten = noise_operator_schedule(gate, 'intensity', grid)
    assert np.allclose(inten.operators, gate.intensity_operator(grid.midpoints))
    custom = noise_operator_schedule(gate, 'custom', grid, custom=np.diag(np.arange(8.0)))
    assert np.allclose(custom.operators[0], np.diag(np.arange(8.0)))
    for kind, op in (('custom', None), ('custom', np.eye(3)), ('two_photon_freq_arm1', None), ('motion', None)):
        try:
            noise_operator_schedule(gate, kind, grid, custom=op)
            assert False, f"noise kind '{kind}' accepted"
        except ValueError:
            pass


def test_universal_round_trip_and_cost():
    gate = _gate()
    resp = response_function(gate, 'frequency', 'sym', freqs=X_POINTS[1:] * RABI_HZ)
    back = from_universal(rescale_to_universal(resp), gate.rabi)
    assert np.allclose(back.freqs_hz, resp.freqs_hz, rtol=1e-12)
    assert np.allclose(back.values, resp.values, rtol=1e-12)
    assert abs(back.dc - resp.dc) < 1e-12 * abs(resp.dc)

    freqs = np.linspace(0.0, 6e6, 7)
    psds = {'frequency': PowerSpectralDensity(freqs, np.full(7, 50.0), 'frequency'),
            'intensity': PowerSpectralDensity(freqs, np.full(7, 1e-12), 'relative_intensity')}
    cost = response_cost(gate, psds)
    parts = [infidelity_from_psd(response_function(gate, kind, 'sym'), psd).total for kind, psd in psds.items()]
    assert abs(cost - sum(parts)) < 1e-12 * cost
    assert cost > 0


def main():
    """Run all tests"""
    print("=" * 50)
    print("Fidelity Response Tests")
    print("=" * 50)

    tests = [(name, func) for name, func in globals().items() if name.startswith('test_') and callable(func)]
    failed = 0
    for name, func in tests:
        try:
            func()
            print(f"✓ {name}")
        except Exception as e:
            failed += 1
            print(f"✗ {name}: {e!r}")

    print("=" * 50)
    print(f"{len(tests) - failed}/{len(tests)} passed")
    return 0 if failed == 0 else 1


if __name__ == "__main__":
    sys.exit(main())
