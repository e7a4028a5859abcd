#!/usr/bin/env python3
"""
Tests for dense time evolution
"""

import sys

import numpy as np

from quantum_core import (
    ControlSchedule, TimeGrid, check_hermitian, check_state, compose, coupling_blocks, evolve_propagator,
    evolve_state, expectation, propagator_table, step_propagators, subspace_fidelity,
)

SX = np.array([[0, 1], [1, 0]], dtype=complex)
SZ = np.diag([1.0, -1.0]).astype(complex)


def _random_hermitian(rng, n, d):
    a = rng.normal(size=(n, d, d)) + 1j * rng.normal(size=(n, d, d))
    return 0.5 * (a + np.conj(np.swapaxes(a, -1, -2)))


def test_time_grid():
    grid = TimeGrid.spanning(2e-6, 100)
    assert grid.n_steps == 100
    assert abs(grid.dt - 2e-8) < 1e-20
    assert grid.edges.size == 101
    assert abs(grid.midpoints[0] - 1e-8) < 1e-20
    assert abs(grid.duration - 2e-6) < 1e-18
    for bad in (lambda: TimeGrid(0.0, 0.0, 10), lambda: TimeGrid(0.0, 1e-9, 0), lambda: TimeGrid.spanning(-1.0, 5)):
        try:
            bad()
            assert False, "invalid grid accepted"
        except ValueError:
            pass


def test_pi_pulse_flips_state():
    omega = 2 * np.pi * 1e6
    grid = TimeGrid.spanning(np.pi / omega, 50)
    h = np.repeat((0.5 * omega * SX)[None], grid.n_steps, axis=0)
    psi = evolve_state(h, np.array([1, 0], dtype=complex), grid)
    assert abs(abs(psi[1]) - 1.0) < 1e-12
    u = evolve_propagator(h, grid)
    assert np.allclose(u, -1j * SX, atol=1e-12)


def test_compose_matches_sequential_product():
    rng = np.random.default_rng(3)
    steps = step_propagators(_random_hermitian(rng, 7, 3), 0.1)
    expected = np.eye(3, dtype=complex)
    for s in steps:
        expected = s @ expected
    assert np.allclose(compose(steps), expected, atol=1e-12)
    assert np.allclose(compose(steps[:0]), np.eye(3))


def test_step_propagators_are_unitary():
    rng = np.random.default_rng(11)
    steps = step_propagators(_random_hermitian(rng, 5, 4), 0.3)
    for s in steps:
        assert np.allclose(s @ np.conj(s.T), np.eye(4), atol=1e-12)


def test_propagator_table_ends_at_full_propagator():
    rng = np.random.default_rng(5)
    grid = TimeGrid.spanning(1.0, 6)
    h = _random_hermitian(rng, 6, 3)
    table = propagator_table(h, grid)
    assert table.shape == (7, 3, 3)
    assert np.allclose(table[0], np.eye(3))
    assert np.allclose(table[-1], evolve_propagator(h, grid), atol=1e-12)


def test_coupling_blocks_split_uncoupled_levels():
    h = np.zeros((2, 4, 4), dtype=complex)
    h[:, 0, 1] = h[:, 1, 0] = 1.0
    h[:, 3, 3] = 2.0
    blocks = coupling_blocks(h)
    assert sorted(tuple(b) for b in blocks) == [(0, 1), (2,), (3,)]
    blocked = step_propagators(h, 0.2, blocks)
    assert np.allclose(blocked, step_propagators(h, 0.2, [np.arange(4)]), atol=1e-12)


def test_rejects_non_hermitian_and_bad_states():
    h = np.zeros((1, 2, 2), dtype=complex)
    h[0, 0, 1] = 1.0
    try:
        check_hermitian(h)
        assert False, "non-Hermitian step accepted"
    except ValueError:
        pass
    try:
        check_state(np.array([1.0, 1.0]))
        assert False, "unnormalized state accepted"
    except ValueError:
        pass
    try:
        check_state(np.array([np.nan, 0.0]))
        assert False, "non-finite state accepted"
    except FloatingPointError:
        pass
    grid = TimeGrid.spanning(1.0, 3)
    try:
        evolve_propagator(np.zeros((2, 2, 2)), grid)
        assert False, "step count mismatch accepted"
    except ValueError:
        pass


def test_control_schedule_lookup():
    grid = TimeGrid.spanning(4.0, 4)
    sched = ControlSchedule(grid, {'omega': np.array([1.0, 2.0, 3.0, 4.0])})
    values = sched.value('omega', np.array([0.5, 1.5, 3.99, 10.0]))
    assert list(values) == [1.0, 2.0, 4.0, 4.0]
    assert list(sched.value('detuning', np.array([0.1, 0.2]), default=7.0)) == [7.0, 7.0]
    try:
        ControlSchedule(grid, {'omega': np.ones(3)})
        assert False, "short control accepted"
    except ValueError:
        pass


def test_expectation_and_subspace_fidelity():
    psi = np.array([1, 1j], dtype=complex) / np.sqrt(2)
    assert abs(expectation(SX, psi)) < 1e-15
    assert abs(expectation(SZ, np.array([1, 0], dtype=complex)) - 1.0) < 1e-15
    assert abs(subspace_fidelity(np.eye(4)) - 1.0) < 1e-15
    # Z on a qubit: |Tr|^2 = 0, Tr(M^dagger M) = 2, D = 2
    assert abs(subspace_fidelity(SZ) - 1.0 / 3.0) < 1e-15
    iso = np.eye(4)[:, :3]
    assert abs(subspace_fidelity(np.diag([1, 1, 1, -1]).astype(complex), iso) - 1.0) < 1e-15


def main():
    """Run all tests"""
    print("=" * 50)
    print("Quantum Core Tests")
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
