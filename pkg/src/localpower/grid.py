"""Configuration-space tensor grid with wavefunction storage and restricted quadrature.

Every particle coordinate lives on the same uniform, cell-centred axis
``x_i = -L/2 + i*dx``; grid point ``i`` is the centre of the cell
``[x_i - dx/2, x_i + dx/2]``.  A :class:`Region` selects a contiguous run of
cells and its two open faces sit on the outer edges of the first and last
cell, so the boundary cells always carry their full weight.

On periodic grids a restricted integral is the exact integral of the
trigonometric interpolant over the selected cells, and face values are the
interpolant evaluated on the cell edge.  With that pairing the discrete
Gauss theorem ``integral(d f/dx) = f(face_hi) - f(face_lo)`` holds to
round-off for spectral derivatives.  Non-periodic grids fall back to
box-sum quadrature with 4th-order finite differences; their face values
come from 4-point interpolation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Mapping, Sequence

import numpy as np

COMPLEX_BYTES = 16
DEFAULT_MEMORY_BUDGET = 1 << 30


class GridError(ValueError):
    """Raised for grid specifications that cannot be realised."""


class InvalidRegionError(ValueError):
    """Raised for regions that are inverted or lie off the grid."""


@dataclass(frozen=True)
class GridSpec:
    particle_count: int
    points_per_axis: int
    box_length: float
    dims_per_particle: int = 1
    periodic: bool = True
    memory_budget: int = DEFAULT_MEMORY_BUDGET

    @property
    def ndim(self) -> int:
        return self.particle_count * self.dims_per_particle

    @property
    def spacing(self) -> float:
        return self.box_length / self.points_per_axis

    @property
    def size(self) -> int:
        return self.points_per_axis**self.ndim

    def validate(self) -> None:
        if self.particle_count < 1:
            raise GridError("particle_count must be >= 1")
        if self.dims_per_particle < 1:
            raise GridError("dims_per_particle must be >= 1")
        if self.points_per_axis < 4:
            raise GridError(f"points_per_axis must be >= 4, got {self.points_per_axis}")
        if not self.box_length > 0:
            raise GridError(f"box_length must be positive, got {self.box_length}")
        nbytes = self.size * COMPLEX_BYTES
        if nbytes > self.memory_budget:
            raise GridError(
                f"grid of {self.points_per_axis}^{self.ndim} complex values needs "
                f"{nbytes} bytes, over the budget of {self.memory_budget} bytes"
            )


@dataclass(frozen=True)
class Region:
    """Closed run of cells ``lower_index..upper_index`` applied to a coordinate axis.

    ``Region.empty()`` is the zero-measure region; every integral over it is 0.
    """

    lower_index: int
    upper_index: int
    degenerate: bool = False

    def __post_init__(self):
        if self.degenerate:
            return
        if not (0 <= self.lower_index < self.upper_index):
            raise InvalidRegionError(
                f"region needs 0 <= lower_index < upper_index, got "
                f"[{self.lower_index}, {self.upper_index}]"
            )

    @classmethod
    def full(cls, n: int) -> "Region":
        return cls(0, n - 1)

    @classmethod
    def empty(cls) -> "Region":
        return cls(0, 0, degenerate=True)

    def check(self, n: int) -> None:
        if not self.degenerate and self.upper_index > n - 1:
            raise InvalidRegionError(
                f"region upper_index {self.upper_index} outside grid of {n} points"
            )

    def is_full(self, n: int) -> bool:
        return not self.degenerate and self.lower_index == 0 and self.upper_index == n - 1

    def contains_index(self, i) -> np.ndarray:
        i = np.asarray(i)
        if self.degenerate:
            return np.zeros(i.shape, dtype=bool)
        return (i >= self.lower_index) & (i <= self.upper_index)


def _interval_weights(n: int, dx: float, lo: float, hi: float) -> np.ndarray:
    """Weights w with sum(w*f) = exact integral over [lo, hi] of f's interpolant.

    ``lo``/``hi`` are offsets from the first grid point.  The Nyquist mode is
    read as a cosine so the weights stay real.
    """
    m = np.fft.fftfreq(n, d=1.0 / n)
    k = 2.0 * np.pi * m / (n * dx)
    c = np.empty(n, dtype=complex)
    c[0] = hi - lo
    nz = m != 0
    kk = k[nz]
    c[nz] = (np.exp(1j * kk * hi) - np.exp(1j * kk * lo)) / (1j * kk)
    if n % 2 == 0:
        kn = np.pi / dx
        c[n // 2] = (math.sin(kn * hi) - math.sin(kn * lo)) / kn
    return np.fft.fft(c).real / n


def _cardinal_weights(n: int, dx: float, offset: float) -> np.ndarray:
    """Weights c with sum(c*f) = trigonometric interpolant of f at ``offset``.

    The Nyquist mode is dropped, which is exact at cell faces where its
    cosine vanishes.
    """
    m = np.fft.fftfreq(n, d=1.0 / n)
    k = 2.0 * np.pi * m / (n * dx)
    phase = np.exp(1j * k * offset)
    if n % 2 == 0:
        phase[n // 2] = 0.0
    return np.fft.fft(phase).real / n


def _lagrange_face_weights(n: int, face: int) -> np.ndarray:
    """4-point weights for the face between points ``face`` and ``face + 1``."""
    w = np.zeros(n)
    if face < 0:
        w[:4] = np.array([35.0, -35.0, 21.0, -5.0]) / 16.0
    elif face >= n - 1:
        w[-4:] = np.array([-5.0, 21.0, -35.0, 35.0]) / 16.0
    else:
        j = min(max(face - 1, 0), n - 4)
        nodes = np.arange(j, j + 4, dtype=float)
        target = face + 0.5
        for a in range(4):
            others = np.delete(nodes, a)
            w[j + a] = np.prod((target - others) / (nodes[a] - others))
    return w


@dataclass(frozen=True, eq=False)
class ConfigurationGrid:
    spec: GridSpec
    x: np.ndarray = field(repr=False)
    k: np.ndarray = field(repr=False)

    @property
    def n(self) -> int:
        return self.spec.points_per_axis

    @property
    def ndim(self) -> int:
        return self.spec.ndim

    @property
    def dx(self) -> float:
        return self.spec.spacing

    @property
    def cell_volume(self) -> float:
        return self.dx**self.ndim

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n,) * self.ndim

    @property
    def periodic(self) -> bool:
        return self.spec.periodic

    @property
    def particle_count(self) -> int:
        return self.spec.particle_count

    def particle_axes(self, particle: int) -> range:
        d = self.spec.dims_per_particle
        return range(particle * d, (particle + 1) * d)

    def x_axis(self, particle: int) -> int:
        """Axis carrying the x coordinate of ``particle`` (the axis Omega cuts)."""
        return particle * self.spec.dims_per_particle

    def coordinate(self, axis: int) -> np.ndarray:
        """Coordinate values along ``axis``, shaped to broadcast over the grid."""
        self.check_axis(axis)
        shape = [1] * self.ndim
        shape[axis] = self.n
        return self.x.reshape(shape)

    def wavenumber(self, axis: int) -> np.ndarray:
        shape = [1] * self.ndim
        shape[axis] = self.n
        return self.k.reshape(shape)

    def check_axis(self, axis: int) -> None:
        if not 0 <= axis < self.ndim:
            raise IndexError(f"axis {axis} out of range for {self.ndim}-dimensional grid")

    # -- spectral machinery ---------------------------------------------------

    def fourier(self, f: np.ndarray) -> np.ndarray:
        return np.fft.fftn(f)

    def derivative_from_fourier(self, fhat: np.ndarray, orders: Mapping[int, int]) -> np.ndarray:
        """Inverse transform of ``fhat`` times prod_a (i k_a)^orders[a]."""
        g = fhat
        for axis, m in orders.items():
            if m == 0:
                continue
            factor = (1j * self.k) ** m
            if m % 2 == 1 and self.n % 2 == 0:
                factor = factor.copy()
                factor[self.n // 2] = 0.0
            shape = [1] * self.ndim
            shape[axis] = self.n
            g = g * factor.reshape(shape)
        return np.fft.ifftn(g)

    def derivative(self, f: np.ndarray, orders: Mapping[int, int]) -> np.ndarray:
        """Mixed partial derivative of ``f``; ``orders`` maps axis -> order."""
        for axis in orders:
            self.check_axis(axis)
        real_input = np.isrealobj(f)
        if self.periodic:
            out = self.derivative_from_fourier(self.fourier(f), orders)
            return out.real if real_input else out
        out = np.asarray(f)
        for axis, m in orders.items():
            for _ in range(m // 2):
                out = _fd4_second(out, axis, self.dx)
            if m % 2:
                out = _fd4_first(out, axis, self.dx)
        return out

    # -- quadrature -------------------------------------------------------------

    def axis_weights(self, region: Region | None) -> np.ndarray:
        """1D quadrature weights along one axis for ``region`` (None = whole axis)."""
        if region is None:
            return np.full(self.n, self.dx)
        return _cached_axis_weights(self.n, self.dx, self.periodic, region)

    def face_weights(self, region: Region, side: str) -> np.ndarray:
        """Interpolation weights evaluating a field on the S1 ('lo') or S4 ('hi') face."""
        region.check(self.n)
        if region.degenerate:
            raise InvalidRegionError("the empty region has no faces")
        if side not in ("lo", "hi"):
            raise ValueError(f"side must be 'lo' or 'hi', got {side!r}")
        face = region.lower_index - 1 if side == "lo" else region.upper_index
        return _cached_face_weights(self.n, self.dx, self.periodic, face)

    def face_coordinate(self, region: Region, side: str) -> float:
        if side == "lo":
            return float(self.x[region.lower_index] - 0.5 * self.dx)
        return float(self.x[region.upper_index] + 0.5 * self.dx)

    def snap(self, x_lo: float, x_hi: float) -> tuple[Region, float]:
        """Region whose boundary grid points are nearest to [x_lo, x_hi]; also the snap distance."""
        lo = int(np.argmin(np.abs(self.x - x_lo)))
        hi = int(np.argmin(np.abs(self.x - x_hi)))
        dist = max(abs(self.x[lo] - x_lo), abs(self.x[hi] - x_hi))
        return Region(lo, hi), float(dist)


@lru_cache(maxsize=256)
def _cached_axis_weights(n: int, dx: float, periodic: bool, region: Region) -> np.ndarray:
    region.check(n)
    if region.degenerate:
        w = np.zeros(n)
    elif region.is_full(n):
        w = np.full(n, dx)
    elif periodic:
        w = _interval_weights(
            n, dx, (region.lower_index - 0.5) * dx, (region.upper_index + 0.5) * dx
        )
    else:
        w = np.where(region.contains_index(np.arange(n)), dx, 0.0)
    w.setflags(write=False)
    return w


@lru_cache(maxsize=256)
def _cached_face_weights(n: int, dx: float, periodic: bool, face: int) -> np.ndarray:
    if periodic:
        w = _cardinal_weights(n, dx, ((face % n) + 0.5) * dx)
    else:
        w = _lagrange_face_weights(n, face)
    w.setflags(write=False)
    return w


def _fd4_first(f: np.ndarray, axis: int, h: float) -> np.ndarray:
    f = np.moveaxis(np.asarray(f), axis, 0)
    out = np.empty_like(f)
    out[2:-2] = (-f[4:] + 8 * f[3:-1] - 8 * f[1:-3] + f[:-4]) / (12 * h)
    out[0] = (-25 * f[0] + 48 * f[1] - 36 * f[2] + 16 * f[3] - 3 * f[4]) / (12 * h)
    out[1] = (-3 * f[0] - 10 * f[1] + 18 * f[2] - 6 * f[3] + f[4]) / (12 * h)
    out[-1] = (25 * f[-1] - 48 * f[-2] + 36 * f[-3] - 16 * f[-4] + 3 * f[-5]) / (12 * h)
    out[-2] = (3 * f[-1] + 10 * f[-2] - 18 * f[-3] + 6 * f[-4] - f[-5]) / (12 * h)
    return np.moveaxis(out, 0, axis)


def _fd4_second(f: np.ndarray, axis: int, h: float) -> np.ndarray:
    f = np.moveaxis(np.asarray(f), axis, 0)
    out = np.empty_like(f)
    h2 = 12 * h * h
    out[2:-2] = (-f[4:] + 16 * f[3:-1] - 30 * f[2:-2] + 16 * f[1:-3] - f[:-4]) / h2
    out[0] = (45 * f[0] - 154 * f[1] + 214 * f[2] - 156 * f[3] + 61 * f[4] - 10 * f[5]) / h2
    out[1] = (10 * f[0] - 15 * f[1] - 4 * f[2] + 14 * f[3] - 6 * f[4] + f[5]) / h2
    out[-1] = (45 * f[-1] - 154 * f[-2] + 214 * f[-3] - 156 * f[-4] + 61 * f[-5] - 10 * f[-6]) / h2
    out[-2] = (10 * f[-1] - 15 * f[-2] - 4 * f[-3] + 14 * f[-4] - 6 * f[-5] + f[-6]) / h2
    return np.moveaxis(out, 0, axis)


def make_grid(spec: GridSpec) -> ConfigurationGrid:
    spec.validate()
    n, dx = spec.points_per_axis, spec.spacing
    x = -0.5 * spec.box_length + dx * np.arange(n)
    k = 2.0 * np.pi * np.fft.fftfreq(n, d=dx)
    x.setflags(write=False)
    k.setflags(write=False)
    return ConfigurationGrid(spec=spec, x=x, k=k)


@dataclass(frozen=True, eq=False)
class WavefunctionField:
    """Immutable snapshot of the many-body amplitudes at one time."""

    amplitudes: np.ndarray = field(repr=False)
    time: float
    grid: ConfigurationGrid

    def __post_init__(self):
        a = np.array(self.amplitudes, dtype=complex)
        if a.shape != self.grid.shape:
            raise ValueError(f"amplitudes shape {a.shape} does not match grid {self.grid.shape}")
        a.setflags(write=False)
        object.__setattr__(self, "amplitudes", a)

    @property
    def density(self) -> np.ndarray:
        return np.abs(self.amplitudes) ** 2

    def norm(self) -> float:
        return float(np.sum(self.density) * self.grid.cell_volume)

    def replace(self, amplitudes: np.ndarray | None = None, time: float | None = None) -> "WavefunctionField":
        return WavefunctionField(
            self.amplitudes if amplitudes is None else amplitudes,
            self.time if time is None else time,
            self.grid,
        )


def normalize(psi: WavefunctionField) -> WavefunctionField:
    norm = psi.norm()
    if not norm > 0 or not np.isfinite(norm):
        raise ValueError("cannot normalize a wavefunction with zero or non-finite norm")
    return psi.replace(amplitudes=psi.amplitudes / math.sqrt(norm))


def gradient_axis(grid: ConfigurationGrid, f: np.ndarray, axis: int) -> np.ndarray:
    return grid.derivative(f, {axis: 1})


def laplacian_axis(grid: ConfigurationGrid, f: np.ndarray, axis: int) -> np.ndarray:
    return grid.derivative(f, {axis: 2})


def reduce_axes(f: np.ndarray, weights: Mapping[int, np.ndarray]) -> np.ndarray:
    """Contract ``f`` with a 1D weight vector on each listed axis; other axes survive."""
    out = f
    for axis in sorted(weights, reverse=True):
        out = np.tensordot(weights[axis], out, axes=([0], [axis]))
    return out


def integrate_region(
    grid: ConfigurationGrid,
    f: np.ndarray,
    constraints: Mapping[int, Region] | None = None,
) -> float:
    """Integral of ``f`` with the listed axes restricted; free axes span the box."""
    constraints = constraints or {}
    for axis, region in constraints.items():
        grid.check_axis(axis)
        region.check(grid.n)
    weights = {a: grid.axis_weights(constraints.get(a)) for a in range(grid.ndim)}
    out = reduce_axes(np.asarray(f), weights)
    return float(out) if np.isrealobj(out) else complex(out)


def surface_slice(
    grid: ConfigurationGrid,
    f: np.ndarray,
    axis: int,
    region: Region,
    boundary: str,
    constraints: Mapping[int, Region] | None = None,
) -> float:
    """Integral of ``f`` over the other axes with ``axis`` pinned to a face of ``region``.

    ``boundary`` is ``"S1"`` (lower face) or ``"S4"`` (upper face).  The caller
    forms the S4 - S1 difference.
    """
    grid.check_axis(axis)
    side = {"S1": "lo", "S4": "hi"}.get(boundary)
    if side is None:
        raise ValueError(f"boundary must be 'S1' or 'S4', got {boundary!r}")
    constraints = dict(constraints or {})
    constraints.pop(axis, None)
    weights = {a: grid.axis_weights(constraints.get(a)) for a in range(grid.ndim) if a != axis}
    weights[axis] = grid.face_weights(region, side)
    out = reduce_axes(np.asarray(f), weights)
    return float(out) if np.isrealobj(out) else complex(out)


def region_weight_vectors(
    grid: ConfigurationGrid, constraints: Mapping[int, Region] | None
) -> dict[int, np.ndarray]:
    constraints = constraints or {}
    return {a: grid.axis_weights(constraints.get(a)) for a in range(grid.ndim)}


def product_state(grid: ConfigurationGrid, factors: Sequence[np.ndarray], time: float = 0.0) -> WavefunctionField:
    """Outer product of one 1D factor per axis, normalized."""
    if len(factors) != grid.ndim:
        raise ValueError(f"need {grid.ndim} factors, got {len(factors)}")
    amp = np.ones((), dtype=complex)
    for f in factors:
        amp = np.multiply.outer(amp, np.asarray(f, dtype=complex))
    return normalize(WavefunctionField(amp, time, grid))
