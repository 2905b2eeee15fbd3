import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from localpower.grid import GridSpec, gradient_axis, integrate_region, make_grid, product_state
from localpower.hydro import NodePolicy, continuity_residual, extract, qpot_time_derivative, write_field_csv
from localpower.potentials import PotentialAssembly
from localpower.propagator import StrangPlan, run, strang_step

from conftest import gaussian


@pytest.fixture
def plane():
    g = make_grid(GridSpec(1, 64, 8 * math.pi))
    return product_state(g, [np.exp(2j * g.x)])


def test_plane_wave_fields(plane):
    f = extract(plane)
    np.testing.assert_allclose(f.density, f.density[0], rtol=1e-12)
    np.testing.assert_allclose(f.current[0], 2 * f.density, atol=1e-9)
    assert np.max(np.abs(f.qpot_total)) < 1e-9
    assert not f.node_mask.any()


def test_gaussian_quantum_potential_matches_closed_form():
    g = make_grid(GridSpec(1, 256, 40.0))
    sigma = 1.0
    f = extract(product_state(g, [gaussian(g.x, 0.0, sigma)]))
    keep = ~f.node_mask
    oracle = 1 / (4 * sigma**2) - g.x**2 / (8 * sigma**4)
    assert np.max(np.abs(f.qpot[0][keep] - oracle[keep])) < 1e-6
    assert f.qpot[0][g.n // 2] == pytest.approx(0.25, abs=1e-10)
    assert np.max(np.abs(f.current[0])) < 1e-10
    assert np.all(f.qpot[0][f.node_mask] == 0.0)
    assert np.all(f.velocity[0][f.node_mask] == 0.0)
    assert np.all(f.qforce[0][f.node_mask] == 0.0)


def test_harmonic_ground_state_quantum_hamilton_jacobi(harmonic_state):
    psi, pot = harmonic_state
    f = extract(psi)
    keep = ~f.node_mask
    residual = f.qpot_total + pot.total(0.0) - 0.5
    assert np.max(np.abs(residual[keep])) < 1e-3


def test_density_invariants(packet1, pair_state):
    for psi in (packet1, pair_state):
        f = extract(psi)
        assert np.all(f.density >= 0)
        assert abs(np.sum(f.density) * psi.grid.cell_volume - 1) < 1e-10


def test_real_state_carries_no_current(pair_state):
    real = pair_state.replace(amplitudes=np.abs(pair_state.amplitudes) * np.exp(0.4j))
    f = extract(real)
    for j in f.current:
        assert np.max(np.abs(j)) < 1e-10


def test_gauge_invariance(pair_state):
    a = extract(pair_state)
    b = extract(pair_state.replace(amplitudes=pair_state.amplitudes * np.exp(1.234j)))
    # a constant phase changes the fields only through floating-point round-off
    assert np.array_equal(a.node_mask, b.node_mask)
    np.testing.assert_allclose(b.density, a.density, atol=1e-14, rtol=1e-12)
    np.testing.assert_allclose(b.qpot_total, a.qpot_total, atol=1e-10, rtol=1e-10)
    for x, y in zip(a.current + a.velocity + a.qforce, b.current + b.velocity + b.qforce):
        np.testing.assert_allclose(y, x, atol=1e-10, rtol=1e-10)


def test_galilean_boost(packet1):
    g = packet1.grid
    p = 2 * math.pi * 3 / (g.n * g.dx)
    a = extract(packet1)
    b = extract(packet1.replace(amplitudes=packet1.amplitudes * np.exp(1j * p * g.x)))
    keep = ~a.node_mask
    assert np.array_equal(a.node_mask, b.node_mask)
    assert np.max(np.abs(b.velocity[0][keep] - a.velocity[0][keep] - p)) < 1e-9
    assert np.max(np.abs(b.qpot[0][keep] - a.qpot[0][keep])) < 1e-9


def test_current_equals_density_times_velocity(pair_state):
    f = extract(pair_state)
    keep = ~f.node_mask
    for j, v in zip(f.current, f.velocity):
        np.testing.assert_allclose(j[keep], (f.density * v)[keep], atol=1e-14, rtol=1e-12)


@settings(max_examples=20, deadline=None)
@given(
    c1=st.floats(-4, 4),
    c2=st.floats(-4, 4),
    w=st.floats(0.7, 1.5),
    p=st.floats(-2, 2),
    mix=st.floats(0.1, 0.9),
)
def test_quantum_energy_integration_by_parts(c1, c2, w, p, mix):
    g = make_grid(GridSpec(1, 256, 32.0))
    amp = gaussian(g.x, c1, w, p) + mix * gaussian(g.x, c2, 1.0, -p)
    psi = product_state(g, [amp])
    f = extract(psi)
    # (grad R)^2 = (grad rho)^2 / (4 rho); the far tails hold only spectral round-off and are dropped
    rho = f.density
    tail = rho < 1e-20 * rho.max()
    grad_rho = gradient_axis(g, rho, 0)
    grad_r_sq = np.where(tail, 0.0, grad_rho**2 / (4 * np.where(tail, 1.0, rho)))
    lhs = integrate_region(g, f.quantum_density[0])
    rhs = 0.5 * integrate_region(g, grad_r_sq)
    assert abs(lhs - rhs) < 1e-9


def test_identical_snapshots_give_zero_rate(packet1):
    f = extract(packet1)
    assert all(np.all(d == 0.0) for d in qpot_time_derivative(f, f, 0.1))


def test_stationary_state_rate_and_continuity(harmonic_state):
    psi, pot = harmonic_state
    plan = StrangPlan(psi.grid, pot, 1e-3)
    nxt = strang_step(plan, psi)
    nxt2 = strang_step(plan, nxt)
    rate = qpot_time_derivative(extract(psi), extract(nxt2), 1e-3)
    f = extract(nxt)
    assert np.max(np.abs(rate[0][~f.node_mask])) < 1e-6
    assert continuity_residual(psi, nxt, nxt2, 1e-3) < 1e-8


def test_plane_wave_continuity(plane):
    plan = StrangPlan(plane.grid, PotentialAssembly(plane.grid), 1e-2)
    a = strang_step(plan, plane)
    b = strang_step(plan, a)
    assert continuity_residual(plane, a, b, 1e-2) < 1e-8


def test_free_gaussian_qpot_rate_matches_spreading_law():
    g = make_grid(GridSpec(1, 512, 60.0))
    sigma0 = 1.0
    dt = 1e-3
    t = 1.0
    psi0 = product_state(g, [gaussian(g.x, 0.0, sigma0)])
    traj = run(psi0, PotentialAssembly(g), t - dt, dt)
    prev = traj.final
    plan = StrangPlan(g, PotentialAssembly(g), dt)
    mid = strang_step(plan, prev)
    nxt = strang_step(plan, mid)
    rate = qpot_time_derivative(extract(prev), extract(nxt), dt)[0][g.n // 2]

    def sigma(tt):
        return sigma0 * math.sqrt(1 + tt**2 / (4 * sigma0**4))

    dsigma = t / (4 * sigma0**3 * math.sqrt(1 + t**2 / (4 * sigma0**4)))
    oracle = -dsigma / (2 * sigma(t) ** 3)
    assert abs(rate - oracle) / abs(oracle) < 0.05


def test_rate_rejects_mismatched_grids(packet1, pair_state):
    with pytest.raises(ValueError):
        qpot_time_derivative(extract(packet1), extract(pair_state), 0.1)
    f = extract(packet1)
    with pytest.raises(ValueError):
        qpot_time_derivative(f, f, 0.0)


@pytest.mark.parametrize("eps", [0.0, -1e-8, 0.1])
def test_node_policy_bounds(eps):
    with pytest.raises(ValueError):
        NodePolicy(eps)


def test_mask_threshold_is_relative(packet1):
    tight = extract(packet1, NodePolicy(1e-10))
    loose = extract(packet1, NodePolicy(1e-2))
    assert tight.node_mask.sum() < loose.node_mask.sum()
    limit = 1e-2 * tight.density.max()
    assert np.array_equal(loose.node_mask, packet1.density < limit)


def test_field_csv_dump(tmp_path, pair_state):
    f = extract(pair_state)
    path = tmp_path / "fields.csv"
    write_field_csv(path, pair_state.grid, density=f.density, qpot=f.qpot_total)
    data = np.genfromtxt(path, delimiter=",", names=True)
    assert data.dtype.names == ("x0", "x1", "density", "qpot")
    np.testing.assert_array_equal(data["density"], f.density.ravel())
