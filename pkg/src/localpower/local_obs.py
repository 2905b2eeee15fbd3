"""Expectation values of local observables over an open volume Omega.

Omega is one interval of physical space tested against the x coordinate of
every particle.  For particle k the integrals restrict x_k to Omega and let
every other coordinate range over the box; pair terms restrict both partners.
The partner window of the Coulomb terms is realised by the same restricted
quadrature, so "partner inside" always means "partner coordinate integrated
over Omega".
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields as dc_fields
from typing import Sequence

import numpy as np

from .grid import (
    ConfigurationGrid,
    Region,
    WavefunctionField,
    gradient_axis,
    integrate_region,
    reduce_axes,
)
from .hydro import HydroFields
from .potentials import PotentialAssembly, eval_pair


@dataclass(frozen=True)
class OmegaSpec:
    region: Region
    label: str = "omega"

    def constraint(self, grid: ConfigurationGrid, *particles: int) -> dict[int, Region]:
        self.region.check(grid.n)
        return {grid.x_axis(k): self.region for k in particles}

    def is_full(self, grid: ConfigurationGrid) -> bool:
        return self.region.is_full(grid.n)


def _as_omega(omega: OmegaSpec | Region) -> OmegaSpec:
    return omega if isinstance(omega, OmegaSpec) else OmegaSpec(omega)


@dataclass(frozen=True)
class EnergyBreakdown:
    kinetic_flow: float
    kinetic_quantum: float
    kinetic_imag_diag: float
    coulomb_internal: float

    @property
    def kinetic(self) -> float:
        return self.kinetic_flow + self.kinetic_quantum

    @property
    def total(self) -> float:
        return self.kinetic_flow + self.kinetic_quantum + self.coulomb_internal

    def as_dict(self) -> dict[str, float]:
        return {**asdict(self), "total": self.total}


@dataclass(frozen=True)
class PowerBreakdown:
    drive: float
    env_coulomb: float
    quantum_work: float
    surface_flux: float
    qpot_time: float
    qpot_advect: float

    @property
    def total(self) -> float:
        return (
            self.drive
            + self.env_coulomb
            + self.quantum_work
            + self.surface_flux
            + self.qpot_time
            + self.qpot_advect
        )

    def as_dict(self) -> dict[str, float]:
        return {**asdict(self), "total": self.total}

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in dc_fields(cls)] + ["total"]


# -- presence and current -----------------------------------------------------------


def presence_probability(psi: WavefunctionField, k: int, omega: OmegaSpec | Region) -> float:
    omega = _as_omega(omega)
    return integrate_region(psi.grid, psi.density, omega.constraint(psi.grid, k))


def pair_presence(psi: WavefunctionField, k: int, j: int, omega: OmegaSpec | Region) -> float:
    if k == j:
        raise ValueError("pair presence needs two distinct particles")
    if psi.grid.particle_count < 2:
        raise ValueError("pair presence needs at least two particles")
    omega = _as_omega(omega)
    return integrate_region(psi.grid, psi.density, omega.constraint(psi.grid, k, j))


def local_current(
    psi: WavefunctionField, k: int, omega: OmegaSpec | Region, fields: HydroFields | None = None
) -> float:
    """Restricted integral of the x component of J_k."""
    omega = _as_omega(omega)
    grid = psi.grid
    a = grid.x_axis(k)
    if fields is not None:
        j = fields.current[a]
    else:
        j = np.imag(np.conj(psi.amplitudes) * gradient_axis(grid, psi.amplitudes, a))
    return integrate_region(grid, j, omega.constraint(grid, k))


# -- energy ------------------------------------------------------------------------


def local_kinetic(fields: HydroFields, omega: OmegaSpec | Region) -> tuple[float, float, float]:
    """(flow, quantum, imaginary diagnostic) parts of the kinetic energy in Omega."""
    omega = _as_omega(omega)
    grid = fields.grid
    flow = quantum = imag = 0.0
    zero = (0,) * grid.ndim
    pc = np.conj(fields.psi_derivatives[zero])
    for k in range(grid.particle_count):
        cons = omega.constraint(grid, k)
        flow += integrate_region(grid, fields.flow_density[k], cons)
        quantum += integrate_region(grid, fields.quantum_density[k], cons)
        im = np.zeros(grid.shape)
        for b in grid.particle_axes(k):
            orders = tuple(2 if a == b else 0 for a in range(grid.ndim))
            d2 = fields.psi_derivatives.get(orders)
            if d2 is None:
                d2 = grid.derivative(fields.psi_derivatives[zero], {b: 2})
            im = im - 0.5 * np.imag(pc * d2)
        imag += integrate_region(grid, im, cons)
    return flow, quantum, imag


def local_coulomb(
    psi: WavefunctionField, omega: OmegaSpec | Region, potentials: PotentialAssembly
) -> float:
    """Pair energy counted only when both partners lie in Omega."""
    omega = _as_omega(omega)
    grid = psi.grid
    total = 0.0
    rho = psi.density
    for k in range(grid.particle_count):
        for j in range(k + 1, grid.particle_count):
            u = eval_pair(potentials.pair, potentials.separation(k, j))
            total += integrate_region(grid, rho * u, omega.constraint(grid, k, j))
    return total


def local_energy(
    psi: WavefunctionField,
    fields: HydroFields,
    omega: OmegaSpec | Region,
    potentials: PotentialAssembly,
) -> EnergyBreakdown:
    flow, quantum, imag = local_kinetic(fields, omega)
    return EnergyBreakdown(
        kinetic_flow=flow,
        kinetic_quantum=quantum,
        kinetic_imag_diag=imag,
        coulomb_internal=local_coulomb(psi, omega, potentials),
    )


def total_energy(psi: WavefunctionField, potentials: PotentialAssembly) -> float:
    """<psi|K + U_cou|psi> from the momentum-space kinetic sum (independent of hydro)."""
    grid = psi.grid
    spectrum = np.abs(np.fft.fftn(psi.amplitudes)) ** 2
    ksq = np.zeros(grid.shape)
    for a in range(grid.ndim):
        ksq = ksq + grid.wavenumber(a) ** 2
    kinetic = 0.5 * float(np.sum(spectrum * ksq)) * grid.cell_volume / grid.n**grid.ndim
    coulomb = float(np.sum(psi.density * potentials.coulomb)) * grid.cell_volume
    return kinetic + coulomb


# -- power -------------------------------------------------------------------------


def total_power_external(
    psi: WavefunctionField, potentials: PotentialAssembly, t: float, fields: HydroFields | None = None
) -> float:
    """sum_k integral over the whole box of J_k . F_ext."""
    grid = psi.grid
    if potentials.external.is_zero:
        return 0.0
    total = 0.0
    for k in range(grid.particle_count):
        a = grid.x_axis(k)
        if fields is not None:
            j = fields.current[a]
        else:
            j = np.imag(np.conj(psi.amplitudes) * gradient_axis(grid, psi.amplitudes, a))
        total += float(np.sum(j * potentials.external_force_axis(k, t))) * grid.cell_volume
    return total


def _face_flux(
    grid: ConfigurationGrid,
    fields: HydroFields,
    potentials: PotentialAssembly,
    omega: OmegaSpec,
    k: int,
    side: str,
    classical: bool,
) -> float:
    """Integral over the other coordinates of J_k (Q_k + |grad_k S|^2/2 + U_int) at one face."""
    a = grid.x_axis(k)
    c = grid.face_weights(omega.region, side)
    nd = grid.ndim
    der = fields.psi_derivatives

    def at_face(*axes):
        orders = [0] * nd
        for b in axes:
            orders[b] += 1
        key = tuple(orders)
        arr = der.get(key)
        if arr is None:
            arr = grid.derivative(der[(0,) * nd], {b: m for b, m in enumerate(key) if m})
        return np.tensordot(c, arr, axes=([0], [a]))

    psi_f = at_face()
    pc = np.conj(psi_f)
    rho_f = np.abs(psi_f) ** 2
    safe = np.where(rho_f > 0, rho_f, 1.0)
    j_f = np.imag(pc * at_face(a))
    if classical:
        keep = rho_f >= fields.policy.epsilon_rel * float(np.max(fields.density))
        flow = sum(np.imag(pc * at_face(b)) ** 2 for b in grid.particle_axes(k)) / (2.0 * safe)
        energy_per_density = np.where(keep, flow / safe, 0.0)
    else:
        kin = sum(-0.5 * np.real(pc * at_face(b, b)) for b in grid.particle_axes(k))
        energy_per_density = np.where(rho_f > 0, kin / safe, 0.0)
    flux = j_f * energy_per_density

    # slice axes: every grid axis except `a`, in order
    def slice_axis(axis):
        return axis if axis < a else axis - 1

    full_w = {slice_axis(b): grid.axis_weights(None) for b in range(nd) if b != a}
    total = float(reduce_axes(flux, full_w))

    x_face = grid.face_coordinate(omega.region, side)
    for jdx in range(grid.particle_count):
        if jdx == k:
            continue
        bj = grid.x_axis(jdx)
        shape = [1] * (nd - 1)
        shape[slice_axis(bj)] = grid.n
        u = eval_pair(potentials.pair, x_face - grid.x.reshape(shape))
        w = dict(full_w)
        w[slice_axis(bj)] = grid.axis_weights(omega.region)
        total += float(reduce_axes(j_f * u, w))
    return total


def _power_terms(
    psi: WavefunctionField,
    fields: HydroFields,
    dqdt: Sequence[np.ndarray] | None,
    omega: OmegaSpec | Region,
    potentials: PotentialAssembly,
    t: float,
    classical: bool,
) -> PowerBreakdown:
    omega = _as_omega(omega)
    grid = psi.grid
    if not classical and dqdt is None:
        raise ValueError("local power needs dQ_k/dt from snapshots at t - dt and t + dt")
    npart = grid.particle_count
    full = omega.is_full(grid)
    drive = env = qwork = qtime = qadv = surface = 0.0
    for k in range(npart):
        a = grid.x_axis(k)
        cons = omega.constraint(grid, k)
        jk = fields.current[a]
        if not potentials.external.is_zero:
            drive += integrate_region(grid, jk * potentials.external_force_axis(k, t), cons)
        if not full:
            for jdx in range(npart):
                if jdx == k:
                    continue
                jf = jk * potentials.pair_force_kj(k, jdx)
                env += integrate_region(grid, jf, cons) - integrate_region(
                    grid, jf, omega.constraint(grid, k, jdx)
                )
            surface -= _face_flux(grid, fields, potentials, omega, k, "hi", classical) - _face_flux(
                grid, fields, potentials, omega, k, "lo", classical
            )
        if classical:
            continue
        work = sum(fields.current[b] * fields.qforce[b] for b in grid.particle_axes(k))
        qwork += integrate_region(grid, work, cons)
        qtime += integrate_region(grid, fields.density * dqdt[k], cons)
        adv = sum(fields.current[b] * fields.qpot_grad[k][b] for b in range(grid.ndim))
        qadv += integrate_region(grid, adv, cons)
    return PowerBreakdown(
        drive=drive,
        env_coulomb=env,
        quantum_work=qwork,
        surface_flux=surface,
        qpot_time=qtime,
        qpot_advect=qadv,
    )


def local_power(
    psi: WavefunctionField,
    fields: HydroFields,
    dqdt: Sequence[np.ndarray] | None,
    omega: OmegaSpec | Region,
    potentials: PotentialAssembly,
    t: float | None = None,
) -> PowerBreakdown:
    """Term-by-term power flowing into Omega at time ``t`` (default ``psi.time``)."""
    return _power_terms(psi, fields, dqdt, omega, potentials, psi.time if t is None else t, False)


def classical_limit_power(
    psi: WavefunctionField,
    fields: HydroFields,
    omega: OmegaSpec | Region,
    potentials: PotentialAssembly,
    t: float | None = None,
) -> PowerBreakdown:
    """Local power with the quantum potential removed everywhere."""
    return _power_terms(psi, fields, None, omega, potentials, psi.time if t is None else t, True)
