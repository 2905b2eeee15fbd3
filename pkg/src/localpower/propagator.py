"""Strang split-operator propagation plus imaginary-time relaxation within an exchange sector."""

from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .grid import ConfigurationGrid, WavefunctionField, normalize
from .potentials import PotentialAssembly


class PropagationError(RuntimeError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class ConvergenceError(RuntimeError):
    pass


class SymmetryPolicy(str, enum.Enum):
    NONE = "none"
    SYMMETRIC = "symmetric"
    ANTISYMMETRIC = "antisymmetric"


def _kinetic_symbol(grid: ConfigurationGrid) -> np.ndarray:
    """|k_vec|^2 / 2 over the full spectral grid."""
    ksq = np.zeros(grid.shape)
    for axis in range(grid.ndim):
        ksq = ksq + grid.wavenumber(axis) ** 2
    return 0.5 * ksq


@dataclass(eq=False)
class StrangPlan:
    grid: ConfigurationGrid
    potentials: PotentialAssembly
    dt: float
    kinetic_half: np.ndarray = field(init=False, repr=False)
    _static_phase: np.ndarray | None = field(init=False, default=None, repr=False)

    def __post_init__(self):
        if not self.grid.periodic:
            raise PropagationError("split-operator stepping needs a periodic grid")
        self.kinetic_half = np.exp(-1j * _kinetic_symbol(self.grid) * self.dt / 2)
        if not self.potentials.external.time_dependent:
            self._static_phase = np.exp(-1j * self.potentials.total(0.0) * self.dt)

    def potential_phase(self, t_mid: float) -> np.ndarray:
        if self._static_phase is not None:
            return self._static_phase
        return np.exp(-1j * self.potentials.total(t_mid) * self.dt)

    def step_array(self, psi: np.ndarray, t: float) -> np.ndarray:
        phi = np.fft.ifftn(self.kinetic_half * np.fft.fftn(psi))
        phi *= self.potential_phase(t + 0.5 * self.dt)
        return np.fft.ifftn(self.kinetic_half * np.fft.fftn(phi))


def strang_step(plan: StrangPlan, psi: WavefunctionField) -> WavefunctionField:
    """Advance ``psi`` by one step of ``plan.dt``."""
    out = plan.step_array(psi.amplitudes, psi.time)
    return WavefunctionField(out, psi.time + plan.dt, psi.grid)


Observer = Callable[[int, WavefunctionField], object]


@dataclass
class Trajectory:
    final: WavefunctionField
    steps: int
    series: dict[str, list] = field(default_factory=dict)
    times: list[float] = field(default_factory=list)


def step_count(t_start: float, t_end: float, dt: float) -> int:
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    ratio = (t_end - t_start) / dt
    steps = int(round(ratio))
    if steps < 0 or abs(ratio - steps) > 1e-9 * max(1.0, abs(ratio)):
        raise ValueError(f"(t_end - t_start)/dt = {ratio} is not a whole number of steps")
    return steps


def run(
    psi0: WavefunctionField,
    potentials: PotentialAssembly,
    t_end: float,
    dt: float,
    observers: dict[str, Observer] | None = None,
    stride: int = 1,
) -> Trajectory:
    """Propagate from ``psi0.time`` to ``t_end``.

    Observers are called at step 0 and every ``stride`` steps after it with
    ``(step, field)``; their return values form the per-observer series.
    """
    observers = observers or {}
    nsteps = step_count(psi0.time, t_end, dt)
    plan = StrangPlan(psi0.grid, potentials, dt)
    traj = Trajectory(final=psi0, steps=nsteps, series={name: [] for name in observers})

    def observe(step, field_):
        traj.times.append(field_.time)
        for name, obs in observers.items():
            try:
                traj.series[name].append(obs(step, field_))
            except Exception as exc:
                raise PropagationError(f"observer {name!r} failed at step {step}: {exc}", step) from exc

    observe(0, psi0)
    amp = psi0.amplitudes
    t0 = psi0.time
    for step in range(1, nsteps + 1):
        amp = plan.step_array(amp, t0 + (step - 1) * dt)
        if step % stride == 0 or step == nsteps:
            traj.final = WavefunctionField(amp, t0 + step * dt, psi0.grid)
            if step % stride == 0:
                observe(step, traj.final)
    if nsteps == 0:
        traj.final = psi0
    return traj


# -- exchange symmetry -------------------------------------------------------------


def _permutation_parity(perm: Sequence[int]) -> int:
    perm = list(perm)
    sign = 1
    for i in range(len(perm)):
        while perm[i] != i:
            j = perm[i]
            perm[i], perm[j] = perm[j], perm[i]
            sign = -sign
    return sign


def apply_symmetry(psi: WavefunctionField, policy: SymmetryPolicy | str) -> WavefunctionField:
    """Project onto the exchange-even or exchange-odd sector and renormalize."""
    policy = SymmetryPolicy(policy)
    grid = psi.grid
    if policy is SymmetryPolicy.NONE:
        return psi
    npart = grid.particle_count
    if npart < 2:
        raise ValueError("exchange symmetry needs at least two particles")
    d = grid.spec.dims_per_particle
    acc = np.zeros(grid.shape, dtype=complex)
    for perm in itertools.permutations(range(npart)):
        axes = [a for p in perm for a in range(p * d, (p + 1) * d)]
        sign = 1 if policy is SymmetryPolicy.SYMMETRIC else _permutation_parity(perm)
        acc += sign * np.transpose(psi.amplitudes, axes)
    acc /= math.factorial(npart)
    before = psi.norm()
    projected = psi.replace(amplitudes=acc)
    if projected.norm() <= 1e-20 * max(before, 1e-300):
        raise ValueError(f"{policy.value} projection annihilates the state")
    return normalize(projected)


def symmetry_residual(psi: WavefunctionField, policy: SymmetryPolicy | str) -> float:
    """max |psi - (+/-) psi with particles 0 and 1 exchanged|."""
    policy = SymmetryPolicy(policy)
    if policy is SymmetryPolicy.NONE or psi.grid.particle_count < 2:
        return 0.0
    d = psi.grid.spec.dims_per_particle
    axes = list(range(psi.grid.ndim))
    axes[0:d], axes[d : 2 * d] = axes[d : 2 * d], axes[0:d]
    sign = 1.0 if policy is SymmetryPolicy.SYMMETRIC else -1.0
    return float(np.max(np.abs(psi.amplitudes - sign * np.transpose(psi.amplitudes, axes))))


# -- imaginary time --------------------------------------------------------------


def energy_expectation(psi: WavefunctionField, potentials: PotentialAssembly, t: float = 0.0) -> float:
    """<psi|K + U(t)|psi> with the kinetic part evaluated spectrally."""
    grid = psi.grid
    amp = psi.amplitudes
    spectrum = np.abs(np.fft.fftn(amp)) ** 2
    kinetic = float(np.sum(spectrum * _kinetic_symbol(grid))) / grid.n**grid.ndim * grid.cell_volume
    potential = float(np.sum(np.abs(amp) ** 2 * potentials.total(t))) * grid.cell_volume
    return (kinetic + potential) / psi.norm()


def imaginary_time_relax(
    psi_guess: WavefunctionField,
    potentials: PotentialAssembly,
    dtau: float,
    max_iters: int = 100_000,
    tol: float = 1e-12,
    symmetry: SymmetryPolicy | str = SymmetryPolicy.NONE,
    check_every: int = 10,
    dtau_min: float | None = None,
) -> WavefunctionField:
    """Lowest state reachable from ``psi_guess`` (within its symmetry sector).

    Iterates e^{-K dtau/2} e^{-U dtau} e^{-K dtau/2} with renormalization until
    the Rayleigh-quotient energy changes by less than ``tol`` between checks.
    The fixed point of the split product differs from the true eigenstate by
    O(dtau^2); with ``dtau_min`` the converged state is refined in further
    stages, dividing dtau by 4 each time until it reaches ``dtau_min``.
    Stiff potentials (steep walls) need this.
    """
    psi = _relax_stage(psi_guess, potentials, dtau, max_iters, tol, symmetry, check_every)
    while dtau_min is not None and dtau > dtau_min * (1 + 1e-12):
        dtau = max(dtau / 4, dtau_min)
        psi = _relax_stage(psi, potentials, dtau, max_iters, tol, symmetry, check_every)
    return psi


def _relax_stage(psi_guess, potentials, dtau, max_iters, tol, symmetry, check_every):
    grid = psi_guess.grid
    if not dtau > 0:
        raise ValueError(f"dtau must be positive, got {dtau}")
    if potentials.external.time_dependent:
        raise ValueError("relaxation needs a time-independent potential")
    symmetry = SymmetryPolicy(symmetry)
    kin = np.exp(-_kinetic_symbol(grid) * dtau / 2)
    pot = np.exp(-potentials.total(0.0) * dtau)
    psi = normalize(psi_guess)
    if symmetry is not SymmetryPolicy.NONE:
        psi = apply_symmetry(psi, symmetry)
    amp = psi.amplitudes.copy()
    keep_real = not np.any(amp.imag)
    energy = energy_expectation(psi, potentials)
    for it in range(1, max_iters + 1):
        amp = np.fft.ifftn(kin * np.fft.fftn(amp))
        amp *= pot
        amp = np.fft.ifftn(kin * np.fft.fftn(amp))
        if keep_real:
            amp = amp.real.astype(complex)
        amp /= math.sqrt(np.sum(np.abs(amp) ** 2) * grid.cell_volume)
        if it % check_every == 0:
            psi = WavefunctionField(amp, psi_guess.time, grid)
            if symmetry is not SymmetryPolicy.NONE:
                psi = apply_symmetry(psi, symmetry)
                amp = psi.amplitudes.copy()
            new_energy = energy_expectation(psi, potentials)
            if abs(new_energy - energy) < tol:
                return psi
            energy = new_energy
    raise ConvergenceError(f"imaginary-time relaxation did not converge in {max_iters} iterations")
