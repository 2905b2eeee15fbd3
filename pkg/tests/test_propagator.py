import math

import numpy as np
import pytest

from localpower.grid import GridSpec, make_grid, product_state
from localpower.potentials import Envelope, ExternalPotential, PairPotential, PotentialAssembly, Profile
from localpower.propagator import (
    ConvergenceError,
    PropagationError,
    StrangPlan,
    SymmetryPolicy,
    apply_symmetry,
    energy_expectation,
    imaginary_time_relax,
    run,
    strang_step,
    symmetry_residual,
)
from conftest import gaussian

HARMONIC = ExternalPotential(Profile("harmonic"))
# a soft core far larger than the box turns the pair term into a negligible constant
NO_INTERACTION = PairPotential(1e9)


def _rms(a, b):
    return float(np.sqrt(np.mean(np.abs(a - b) ** 2)))


def test_plane_wave_picks_up_kinetic_phase():
    g = make_grid(GridSpec(1, 64, 8 * math.pi))
    p = 2.0
    psi = product_state(g, [np.exp(1j * p * g.x)])
    dt = 0.01
    out = strang_step(StrangPlan(g, PotentialAssembly(g), dt), psi)
    np.testing.assert_allclose(out.amplitudes, psi.amplitudes * np.exp(-0.5j * p * p * dt), atol=1e-10)
    assert out.time == pytest.approx(dt)


def test_constant_potential_adds_global_phase(grid1, packet1):
    c = 0.7
    flat_top = ExternalPotential(Profile("barrier", {"height": c, "width": 1e4, "softness": 1.0}))
    dt = 0.02
    free = strang_step(StrangPlan(grid1, PotentialAssembly(grid1), dt), packet1)
    shifted = strang_step(StrangPlan(grid1, PotentialAssembly(grid1, flat_top), dt), packet1)
    np.testing.assert_allclose(shifted.amplitudes, free.amplitudes * np.exp(-1j * c * dt), atol=1e-12)


def test_harmonic_ground_state_is_stationary(harmonic_state):
    psi, pot = harmonic_state
    traj = run(psi, pot, 100 * 1e-3, 1e-3)
    assert _rms(traj.final.density, psi.density) < 1e-6


def test_run_zero_steps_calls_observers_once(packet1, free1):
    traj = run(packet1, free1, packet1.time, 0.1, {"norm": lambda s, f: f.norm()})
    assert traj.series["norm"] == [pytest.approx(1.0)]
    assert traj.final is packet1
    assert traj.steps == 0


def test_norm_observer_stays_at_one(packet1):
    pot = PotentialAssembly(packet1.grid, ExternalPotential(Profile("barrier", {"height": 2.0})))
    traj = run(packet1, pot, 1.0, 1e-2, {"norm": lambda s, f: f.norm()}, stride=10)
    assert len(traj.series["norm"]) == 11
    assert max(abs(v - 1) for v in traj.series["norm"]) < 1e-10


def test_observer_failure_reports_step(packet1, free1):
    def fails_late(step, field):
        if step >= 3:
            raise RuntimeError("boom")
        return step

    with pytest.raises(PropagationError) as exc:
        run(packet1, free1, 0.5, 0.1, {"bad": fails_late})
    assert exc.value.step == 3


def test_run_rejects_fractional_steps(packet1, free1):
    with pytest.raises(ValueError, match="whole number"):
        run(packet1, free1, 0.25, 0.1)


def test_nonperiodic_grid_rejected():
    g = make_grid(GridSpec(1, 32, 10.0, periodic=False))
    with pytest.raises(PropagationError):
        StrangPlan(g, PotentialAssembly(g), 0.1)


def test_unitarity_over_ten_thousand_steps():
    g = make_grid(GridSpec(1, 128, 30.0))
    psi = product_state(g, [gaussian(g.x, -3.0, 1.0, 1.0)])
    pot = PotentialAssembly(g, ExternalPotential(Profile("barrier", {"height": 1.0}), Envelope("sinusoid")))
    plan = StrangPlan(g, pot, 1e-3)
    amp, worst_step = psi.amplitudes, 0.0
    prev = 1.0
    for step in range(10_000):
        amp = plan.step_array(amp, step * 1e-3)
        norm = float(np.vdot(amp, amp).real) * g.cell_volume
        worst_step = max(worst_step, abs(norm - prev))
        prev = norm
    assert worst_step < 1e-12
    assert abs(prev - 1) < 1e-9


def test_time_reversal_recovers_initial_state(packet1):
    pot = PotentialAssembly(packet1.grid, ExternalPotential(Profile("barrier", {"height": 0.5})))
    forward = StrangPlan(packet1.grid, pot, 0.01)
    backward = StrangPlan(packet1.grid, pot, -0.01)
    amp = packet1.amplitudes
    for _ in range(200):
        amp = forward.step_array(amp, 0.0)
    for _ in range(200):
        amp = backward.step_array(amp, 0.0)
    assert _rms(amp, packet1.amplitudes) < 1e-8


def test_second_order_convergence(packet1):
    pot = PotentialAssembly(
        packet1.grid,
        ExternalPotential(Profile("harmonic", {"omega": 0.5}), Envelope("sinusoid", {"frequency": 2.0})),
    )
    t_end = 1.0

    def final(dt):
        return run(packet1, pot, t_end, dt).final.amplitudes

    reference = final(0.1 / 8)
    coarse = _rms(final(0.1), reference)
    fine = _rms(final(0.05), reference)
    # against a dt/8 reference the coarse/fine ratio of a 2nd-order scheme is (1-1/64)/(1/4-1/64)
    assert 3.5 <= coarse / fine <= 4.5


def test_exchange_symmetry_conserved(pair_state):
    pot = PotentialAssembly(pair_state.grid, ExternalPotential(Profile("uniform_field")), PairPotential(1.0))
    for policy in ("symmetric", "antisymmetric"):
        psi = apply_symmetry(pair_state, policy)
        assert symmetry_residual(psi, policy) < 1e-12
        traj = run(psi, pot, 0.5, 0.01)
        assert symmetry_residual(traj.final, policy) < 1e-9


def test_antisymmetrizing_identical_orbitals_fails():
    g = make_grid(GridSpec(2, 32, 12.0))
    phi = gaussian(g.x)
    with pytest.raises(ValueError, match="annihilates"):
        apply_symmetry(product_state(g, [phi, phi]), SymmetryPolicy.ANTISYMMETRIC)


def test_symmetric_projection_formula(grid2, pair_state):
    x = grid2.x
    a = gaussian(x, -2.5, 1.0, 0.4)
    b = gaussian(x, 2.0, 0.8, -0.3)
    expected = np.multiply.outer(a, b) + np.multiply.outer(b, a)
    expected /= math.sqrt(np.sum(np.abs(expected) ** 2) * grid2.cell_volume)
    psi = apply_symmetry(pair_state, "symmetric")
    np.testing.assert_allclose(psi.amplitudes, expected, atol=1e-12)
    assert np.max(np.abs(psi.amplitudes - psi.amplitudes.T)) < 1e-12


def test_projection_is_idempotent(pair_state):
    once = apply_symmetry(pair_state, "antisymmetric")
    twice = apply_symmetry(once, "antisymmetric")
    np.testing.assert_allclose(twice.amplitudes, once.amplitudes, atol=1e-12)


def test_single_particle_symmetry_rejected(packet1):
    with pytest.raises(ValueError):
        apply_symmetry(packet1, "symmetric")


def test_relax_harmonic_ground_energy(harmonic_state):
    psi, pot = harmonic_state
    assert abs(energy_expectation(psi, pot) - 0.5) < 1e-4


def test_relax_box_ground_energy(box_state):
    psi, pot = box_state
    assert abs(energy_expectation(psi, pot) - math.pi**2 / 2) / (math.pi**2 / 2) < 0.02


def test_relax_antisymmetric_pair_harmonic():
    g = make_grid(GridSpec(2, 64, 16.0))
    pot = PotentialAssembly(g, HARMONIC, NO_INTERACTION)
    guess = product_state(g, [gaussian(g.x, -1.0), gaussian(g.x, 1.0, 1.0)])
    psi = imaginary_time_relax(guess, pot, 1e-2, tol=1e-12, symmetry="antisymmetric", dtau_min=1e-3)
    single = PotentialAssembly(make_grid(GridSpec(1, 64, 16.0)), HARMONIC)
    g1 = single.grid
    ground = imaginary_time_relax(product_state(g1, [gaussian(g1.x)]), single, 1e-3, tol=1e-13)
    odd = imaginary_time_relax(product_state(g1, [g1.x * gaussian(g1.x)]), single, 1e-3, tol=1e-13)
    oracle = energy_expectation(ground, single) + energy_expectation(odd, single)
    assert abs(oracle - 2.0) < 1e-3
    assert abs(energy_expectation(psi, pot) - oracle) < 1e-3
    assert symmetry_residual(psi, "antisymmetric") < 1e-10


def test_relax_nonconvergence(packet1):
    pot = PotentialAssembly(packet1.grid, HARMONIC)
    with pytest.raises(ConvergenceError):
        imaginary_time_relax(packet1, pot, 1e-4, max_iters=20, tol=1e-15)


def test_relax_rejects_time_dependent_potential(packet1):
    pot = PotentialAssembly(packet1.grid, ExternalPotential(Profile("harmonic"), Envelope("sinusoid")))
    with pytest.raises(ValueError, match="time-independent"):
        imaginary_time_relax(packet1, pot, 1e-3)
