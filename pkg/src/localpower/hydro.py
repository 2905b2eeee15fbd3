"""Hydrodynamic fields of psi = R exp(iS) without reconstructing S.

Nothing here differentiates R or S on the grid.  Every field is an algebraic
combination of spectral derivatives of psi itself:

    J_a           = Im(psi* d_a psi)
    R^2 Q_a       = -Re(psi* d_a^2 psi)/2 - J_a^2/(2 R^2)
    d_a Q_b       = closed form in psi, d psi, d^2 psi, d^3 psi

Densities weighted by R^2 (kinetic, flow, quantum) are bounded by products of
|d psi| and need no masking.  Fields carrying 1/R (velocity, Q, grad Q) are
zeroed on the node mask.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .grid import ConfigurationGrid, WavefunctionField, gradient_axis

Orders = tuple[int, ...]


@dataclass(frozen=True)
class NodePolicy:
    epsilon_rel: float = 1e-8

    def __post_init__(self):
        if not 0.0 < self.epsilon_rel <= 1e-2:
            raise ValueError(f"epsilon_rel must lie in (0, 1e-2], got {self.epsilon_rel}")

    def mask(self, density: np.ndarray) -> np.ndarray:
        return density < self.epsilon_rel * float(np.max(density))


@dataclass(frozen=True, eq=False)
class HydroFields:
    grid: ConfigurationGrid
    time: float
    density: np.ndarray
    amplitude: np.ndarray
    current: tuple[np.ndarray, ...]  # per axis
    velocity: tuple[np.ndarray, ...]  # per axis, 0 on nodes
    qpot: tuple[np.ndarray, ...]  # per particle, 0 on nodes
    qpot_total: np.ndarray
    qforce: tuple[np.ndarray, ...]  # per axis, -d_a Q
    qpot_grad: tuple[tuple[np.ndarray, ...], ...]  # [particle][axis] d_a Q_k
    kinetic_density: tuple[np.ndarray, ...]  # per particle, R^2 (Q_k + |grad_k S|^2/2)
    flow_density: tuple[np.ndarray, ...]  # per particle, R^2 |grad_k S|^2/2
    node_mask: np.ndarray
    policy: NodePolicy
    fully_masked: bool = False
    psi_derivatives: Mapping[Orders, np.ndarray] = field(default_factory=dict, repr=False)

    @property
    def quantum_density(self) -> tuple[np.ndarray, ...]:
        """R^2 Q_k per particle, from the division-safe split."""
        return tuple(k - f for k, f in zip(self.kinetic_density, self.flow_density))


class _Derivatives:
    """Lazy cache of spectral (or FD) derivatives of one array."""

    def __init__(self, grid: ConfigurationGrid, psi: np.ndarray):
        self.grid = grid
        self.psi = psi
        self._fhat = grid.fourier(psi) if grid.periodic else None
        self.cache: dict[Orders, np.ndarray] = {(0,) * grid.ndim: psi}

    def __call__(self, *axes: int) -> np.ndarray:
        orders = [0] * self.grid.ndim
        for a in axes:
            orders[a] += 1
        key = tuple(orders)
        if key not in self.cache:
            spec = {a: m for a, m in enumerate(key) if m}
            if self._fhat is not None:
                self.cache[key] = self.grid.derivative_from_fourier(self._fhat, spec)
            else:
                self.cache[key] = self.grid.derivative(self.psi, spec)
        return self.cache[key]


def extract(psi: WavefunctionField, policy: NodePolicy | None = None) -> HydroFields:
    policy = policy or NodePolicy()
    grid = psi.grid
    nd = grid.ndim
    npart = grid.particle_count
    D = _Derivatives(grid, psi.amplitudes)
    p = psi.amplitudes
    pc = np.conj(p)

    rho = np.abs(p) ** 2
    mask = policy.mask(rho)
    keep = ~mask
    fully_masked = not keep.any()
    if fully_masked:
        warnings.warn("every grid point is below the node threshold", RuntimeWarning, stacklevel=2)
    safe = np.where(rho > 0, rho, 1.0)
    inv = np.divide(1.0, safe, out=np.zeros_like(safe), where=keep)

    first = [D(a) for a in range(nd)]
    current = tuple(np.imag(pc * first[a]) for a in range(nd))
    drho = [2.0 * np.real(pc * first[a]) for a in range(nd)]
    lap = [np.real(pc * D(b, b)) for b in range(nd)]

    velocity = tuple(current[a] * inv for a in range(nd))
    flow_axis = [np.where(rho > 0, current[b] ** 2 / (2.0 * safe), 0.0) for b in range(nd)]
    q_axis = [np.where(keep, (-0.5 * lap[b] - flow_axis[b]) * inv, 0.0) for b in range(nd)]

    dq_axis = [[None] * nd for _ in range(nd)]  # [b][a] = d_a Q_b
    for b in range(nd):
        for a in range(nd):
            dlap = np.real(np.conj(first[a]) * D(b, b) + pc * D(a, b, b))
            djb = np.imag(np.conj(first[a]) * first[b] + pc * D(a, b))
            val = (
                -0.5 * dlap * inv
                + 0.5 * lap[b] * drho[a] * inv**2
                - current[b] * djb * inv**2
                + current[b] ** 2 * drho[a] * inv**3
            )
            dq_axis[b][a] = np.where(keep, val, 0.0)

    kinetic_density = []
    flow_density = []
    qpot = []
    qpot_grad = []
    for k in range(npart):
        axes = grid.particle_axes(k)
        kinetic_density.append(sum(-0.5 * lap[b] for b in axes))
        flow_density.append(sum(flow_axis[b] for b in axes))
        qpot.append(sum(q_axis[b] for b in axes))
        qpot_grad.append(tuple(sum(dq_axis[b][a] for b in axes) for a in range(nd)))
    qpot_total = sum(qpot)
    qforce = tuple(-sum(qpot_grad[k][a] for k in range(npart)) for a in range(nd))

    return HydroFields(
        grid=grid,
        time=psi.time,
        density=rho,
        amplitude=np.sqrt(rho),
        current=current,
        velocity=velocity,
        qpot=tuple(qpot),
        qpot_total=qpot_total,
        qforce=qforce,
        qpot_grad=tuple(qpot_grad),
        kinetic_density=tuple(kinetic_density),
        flow_density=tuple(flow_density),
        node_mask=mask,
        policy=policy,
        fully_masked=fully_masked,
        psi_derivatives=dict(D.cache),
    )


def qpot_time_derivative(prev: HydroFields, nxt: HydroFields, dt: float) -> tuple[np.ndarray, ...]:
    """Centred difference (Q_k(t+dt) - Q_k(t-dt)) / (2 dt) on jointly unmasked points."""
    if prev.grid is not nxt.grid and prev.grid.spec != nxt.grid.spec:
        raise ValueError("snapshots live on different grids")
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    keep = ~(prev.node_mask | nxt.node_mask)
    return tuple(
        np.where(keep, (qn - qp) / (2.0 * dt), 0.0) for qp, qn in zip(prev.qpot, nxt.qpot)
    )


def continuity_residual(
    psi_prev: WavefunctionField, psi_mid: WavefunctionField, psi_next: WavefunctionField, dt: float
) -> float:
    """L2 norm of d(R^2)/dt + sum_j div_j J_j at the middle snapshot."""
    grid = psi_mid.grid
    drho_dt = (psi_next.density - psi_prev.density) / (2.0 * dt)
    pc = np.conj(psi_mid.amplitudes)
    div = np.zeros(grid.shape)
    for a in range(grid.ndim):
        j = np.imag(pc * gradient_axis(grid, psi_mid.amplitudes, a))
        div = div + gradient_axis(grid, j, a)
    r = drho_dt + div
    return float(np.sqrt(np.sum(r * r) * grid.cell_volume))


def write_field_csv(path, grid: ConfigurationGrid, **fields: np.ndarray) -> None:
    """Dump fields as rows of (coordinates..., values...)."""
    coords = np.meshgrid(*([grid.x] * grid.ndim), indexing="ij")
    names = [f"x{a}" for a in range(grid.ndim)] + list(fields)
    columns = [c.ravel() for c in coords] + [np.asarray(v).ravel() for v in fields.values()]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for row in zip(*columns):
            w.writerow([f"{v:.16e}" for v in row])
