"""External one-body drive, soft-core pair interaction and their forces.

The external potential acts on the x coordinate of every particle as
``U_ext(x, t) = profile(x) * envelope(t)``.  All forces are analytic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .grid import ConfigurationGrid, Region


class UnknownNameError(KeyError):
    def __str__(self):
        return str(self.args[0])


# -- static profiles ----------------------------------------------------------


def _smooth_window(x, center, width, softness):
    """Top-hat of unit height on |x - center| < width/2 with tanh edges."""
    a = (x - center + 0.5 * width) / softness
    b = (x - center - 0.5 * width) / softness
    return 0.5 * (np.tanh(a) - np.tanh(b))


def _smooth_window_dx(x, center, width, softness):
    a = (x - center + 0.5 * width) / softness
    b = (x - center - 0.5 * width) / softness
    return 0.5 * (np.tanh(b) ** 2 - np.tanh(a) ** 2) / softness


@dataclass(frozen=True)
class Profile:
    """Static spatial factor of the external potential."""

    name: str
    params: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in PROFILES:
            raise UnknownNameError(
                f"unknown potential profile {self.name!r}; available: {', '.join(sorted(PROFILES))}"
            )
        defaults, _, _ = PROFILES[self.name]
        unknown = set(self.params) - set(defaults)
        if unknown:
            raise ValueError(
                f"profile {self.name!r} got unknown parameters {sorted(unknown)}; "
                f"accepted: {sorted(defaults)}"
            )
        object.__setattr__(self, "params", {**defaults, **dict(self.params)})

    def value(self, x):
        return PROFILES[self.name][1](np.asarray(x, dtype=float), **self.params)

    def slope(self, x):
        """d profile / dx."""
        return PROFILES[self.name][2](np.asarray(x, dtype=float), **self.params)


def _flat(x):
    return np.zeros_like(x)


def _uniform(x, strength):
    return -strength * x


def _uniform_dx(x, strength):
    return np.full_like(x, -strength)


def _harmonic(x, omega, center):
    return 0.5 * omega**2 * (x - center) ** 2


def _harmonic_dx(x, omega, center):
    return omega**2 * (x - center)


def _barrier(x, height, center, width, softness):
    return height * _smooth_window(x, center, width, softness)


def _barrier_dx(x, height, center, width, softness):
    return height * _smooth_window_dx(x, center, width, softness)


def _well(x, depth, center, width, softness):
    # zero inside, `depth` outside: a box with steep but smooth walls
    return depth * (1.0 - _smooth_window(x, center, width, softness))


def _well_dx(x, depth, center, width, softness):
    return -depth * _smooth_window_dx(x, center, width, softness)


PROFILES: dict[str, tuple[dict[str, float], Callable, Callable]] = {
    "flat": ({}, _flat, _flat),
    "uniform_field": ({"strength": 0.1}, _uniform, _uniform_dx),
    "harmonic": ({"omega": 1.0, "center": 0.0}, _harmonic, _harmonic_dx),
    "barrier": (
        {"height": 1.0, "center": 0.0, "width": 2.0, "softness": 0.1},
        _barrier,
        _barrier_dx,
    ),
    "well": (
        {"depth": 1.0e4, "center": 0.0, "width": 1.0, "softness": 0.01},
        _well,
        _well_dx,
    ),
}


# -- time envelopes -----------------------------------------------------------


ENVELOPES: dict[str, dict[str, float]] = {
    "constant": {"value": 1.0},
    "ramp": {"duration": 1.0},
    "sinusoid": {"amplitude": 1.0, "frequency": 1.0, "phase": 0.0},
}


@dataclass(frozen=True)
class Envelope:
    name: str = "constant"
    params: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in ENVELOPES:
            raise UnknownNameError(
                f"unknown envelope {self.name!r}; available: {', '.join(sorted(ENVELOPES))}"
            )
        unknown = set(self.params) - set(ENVELOPES[self.name])
        if unknown:
            raise ValueError(
                f"envelope {self.name!r} got unknown parameters {sorted(unknown)}; "
                f"accepted: {sorted(ENVELOPES[self.name])}"
            )
        object.__setattr__(self, "params", {**ENVELOPES[self.name], **dict(self.params)})

    def __call__(self, t: float) -> float:
        p = self.params
        if self.name == "constant":
            return float(p["value"])
        if self.name == "ramp":
            return float(min(max(t / p["duration"], 0.0), 1.0))
        return float(p["amplitude"] * math.sin(p["frequency"] * t + p["phase"]))


@dataclass(frozen=True)
class ExternalPotential:
    profile: Profile = field(default_factory=lambda: Profile("flat"))
    envelope: Envelope = field(default_factory=Envelope)

    @property
    def is_zero(self) -> bool:
        if self.profile.name == "flat":
            return True
        e = self.envelope
        return (e.name == "constant" and e.params["value"] == 0.0) or (
            e.name == "sinusoid" and e.params["amplitude"] == 0.0
        )

    @property
    def time_dependent(self) -> bool:
        return not self.is_zero and self.envelope.name != "constant"


def eval_external(ext: ExternalPotential, x, t: float):
    return ext.profile.value(x) * ext.envelope(t)


def external_force(ext: ExternalPotential, x, t: float):
    return -ext.profile.slope(x) * ext.envelope(t)


# -- pair interaction ---------------------------------------------------------


@dataclass(frozen=True)
class PairPotential:
    soft_core: float = 1.0

    def __post_init__(self):
        if not self.soft_core > 0:
            raise ValueError(f"soft_core must be positive, got {self.soft_core}")


def eval_pair(pair: PairPotential, s):
    s = np.asarray(s, dtype=float)
    return 1.0 / np.sqrt(s * s + pair.soft_core**2)


def pair_force(pair: PairPotential, s):
    """Force on particle k from j as a function of s = x_k - x_j (repulsive)."""
    s = np.asarray(s, dtype=float)
    return s / (s * s + pair.soft_core**2) ** 1.5


def coulomb_force_on_k(pair: PairPotential, r, k: int) -> float:
    """x-force on particle k at configuration point ``r`` (one coordinate per particle)."""
    r = np.asarray(r, dtype=float)
    if r.size < 2:
        return 0.0
    s = r[k] - np.delete(r, k)
    return float(np.sum(pair_force(pair, s)))


def pair_window_internal(grid: ConfigurationGrid, x_j: float, region: Region) -> int:
    """1 when x_j lies in the closed cell union of ``region``, else 0."""
    if region.degenerate:
        return 0
    lo = grid.face_coordinate(region, "lo")
    hi = grid.face_coordinate(region, "hi")
    return int(lo <= x_j <= hi)


def coulomb_force_external_on_k(
    grid: ConfigurationGrid, pair: PairPotential, r, k: int, region: Region
) -> float:
    """x-force on particle k from the partners lying outside ``region``."""
    r = np.asarray(r, dtype=float)
    total = 0.0
    for j in range(r.size):
        if j != k and not pair_window_internal(grid, r[j], region):
            total += float(pair_force(pair, r[k] - r[j]))
    return total


# -- assembly on the grid -------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PotentialAssembly:
    grid: ConfigurationGrid
    external: ExternalPotential = field(default_factory=ExternalPotential)
    pair: PairPotential = field(default_factory=PairPotential)
    coulomb: np.ndarray = field(init=False, repr=False)
    profile_sum: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        g = self.grid
        cou = np.zeros(g.shape)
        for k in range(g.particle_count):
            for j in range(k + 1, g.particle_count):
                cou = cou + eval_pair(self.pair, self.separation(k, j))
        prof = np.zeros(g.shape)
        for k in range(g.particle_count):
            prof = prof + self.external.profile.value(g.coordinate(g.x_axis(k)))
        cou.setflags(write=False)
        prof.setflags(write=False)
        object.__setattr__(self, "coulomb", cou)
        object.__setattr__(self, "profile_sum", prof)

    def separation(self, k: int, j: int) -> np.ndarray:
        g = self.grid
        return g.coordinate(g.x_axis(k)) - g.coordinate(g.x_axis(j))

    def total(self, t: float) -> np.ndarray:
        """U(r, t) = U_cou(r) + sum_k U_ext(x_k, t) on the full grid."""
        f = self.external.envelope(t)
        return self.coulomb + self.profile_sum * f

    def external_force_axis(self, particle: int, t: float) -> np.ndarray:
        g = self.grid
        return external_force(self.external, g.coordinate(g.x_axis(particle)), t)

    def pair_force_kj(self, k: int, j: int) -> np.ndarray:
        """x-force on k from j over the grid."""
        return pair_force(self.pair, self.separation(k, j))
