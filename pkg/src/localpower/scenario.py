"""Declarative scenario files: validated parsing plus initial-state preparation.

A scenario is a TOML document with the sections ``[grid]``, ``[potentials]``,
``[initial]``, ``[time]``, ``[[omega]]``, ``[observers]``, ``[output]`` and
``[checks]``.  Parsing collects every problem before failing, and unknown
keys count as problems.  :meth:`Scenario.resolved` echoes every default back.
"""

from __future__ import annotations

import copy
import math
import sys
from dataclasses import dataclass, field
from typing import Any

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .grid import GridError, GridSpec, Region, WavefunctionField, make_grid, normalize, product_state
from .local_obs import OmegaSpec
from .potentials import (
    Envelope,
    ExternalPotential,
    PairPotential,
    PotentialAssembly,
    Profile,
)
from .propagator import SymmetryPolicy, apply_symmetry, imaginary_time_relax

OBSERVERS = ("energy", "power", "presence", "current", "norm", "continuity", "closed", "total_energy")
FORMATS = ("csv", "json")
INITIAL_KINDS = ("gaussian", "plane_wave", "relax")

# bound name -> kind; "max" bounds pass when value < bound, "range" take [lo, hi]
CHECKS = {
    "norm_drift": "max",
    "balance": "max",
    "balance_absolute": "max",
    "balance_order": "range",
    "continuity": "max",
    "continuity_order": "range",
    "energy_drift": "max",
    "quantum_cancellation": "max",
    "coulomb_cancellation": "max",
    "qpot_time_integral": "max",
    "total_power_cross": "max",
    "presence_symmetry": "max",
    "node_sensitivity": "flag",
}

DEFAULTS: dict[str, dict[str, Any]] = {
    "grid": {"periodic": True},
    "potentials": {
        "profile": "flat",
        "profile_params": {},
        "envelope": "constant",
        "envelope_params": {},
        "soft_core": 1.0,
    },
    "initial": {"noise": 0.0},
    "time": {"sample_stride": 1, "norm_abort": 1e-6},
    "observers": {"names": list(OBSERVERS)},
    "output": {"formats": list(FORMATS)},
    "checks": {"norm_drift": 1e-9},
    "verify": {"node_epsilon": 1e-8, "refine_dt": False},
}

TOP_KEYS = {"id", "description", "seed", "symmetry", "grid", "potentials", "initial", "time", "omega",
            "observers", "output", "checks", "verify"}


class ScenarioError(ValueError):
    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("invalid scenario:\n  " + "\n  ".join(self.errors))


@dataclass(frozen=True)
class Packet:
    center: float
    width: float
    momentum: float = 0.0


@dataclass(frozen=True)
class OmegaEntry:
    label: str
    bounds: tuple[float, float] | None  # None = whole box
    region: Region
    snap_distance: float

    def spec(self) -> OmegaSpec:
        return OmegaSpec(self.region, self.label)


@dataclass
class Scenario:
    scenario_id: str
    description: str
    seed: int
    symmetry: SymmetryPolicy
    grid: GridSpec
    external: ExternalPotential
    pair: PairPotential
    initial: dict
    t_end: float
    dt: float
    sample_stride: int
    norm_abort: float
    omegas: list[OmegaEntry]
    observers: list[str]
    output_directory: str
    formats: list[str]
    checks: dict[str, Any]
    node_epsilon: float
    refine_dt: bool
    source: dict = field(repr=False, default_factory=dict)

    def resolved(self) -> dict:
        """Full configuration including every default that the file left out."""
        return {
            "id": self.scenario_id,
            "description": self.description,
            "seed": self.seed,
            "symmetry": self.symmetry.value,
            "grid": {
                "particles": self.grid.particle_count,
                "points": self.grid.points_per_axis,
                "length": self.grid.box_length,
                "periodic": self.grid.periodic,
            },
            "potentials": {
                "profile": self.external.profile.name,
                "profile_params": dict(self.external.profile.params),
                "envelope": self.external.envelope.name,
                "envelope_params": dict(self.external.envelope.params),
                "soft_core": self.pair.soft_core,
            },
            "initial": copy.deepcopy(self.initial),
            "time": {
                "t_end": self.t_end,
                "dt": self.dt,
                "sample_stride": self.sample_stride,
                "norm_abort": self.norm_abort,
            },
            "omega": [
                {
                    "label": o.label,
                    "bounds": list(o.bounds) if o.bounds is not None else "full",
                    "lower_index": o.region.lower_index,
                    "upper_index": o.region.upper_index,
                    "snap_distance": o.snap_distance,
                }
                for o in self.omegas
            ],
            "observers": {"names": list(self.observers)},
            "output": {"directory": self.output_directory, "formats": list(self.formats)},
            "checks": copy.deepcopy(self.checks),
            "verify": {"node_epsilon": self.node_epsilon, "refine_dt": self.refine_dt},
        }

    def to_dict(self) -> dict:
        """Editable copy of the source document (for building variants)."""
        return copy.deepcopy(self.source)


# -- parsing -------------------------------------------------------------------------


class _Collector:
    def __init__(self):
        self.errors: list[str] = []

    def add(self, msg: str) -> None:
        self.errors.append(msg)

    def table(self, doc: dict, name: str, required: bool) -> dict:
        if name not in doc:
            if required:
                self.add(f"missing required section [{name}]")
            return {}
        value = doc[name]
        if not isinstance(value, dict):
            self.add(f"[{name}] must be a table")
            return {}
        return value

    def unknown(self, table: dict, allowed: set[str], path: str) -> None:
        for key in sorted(set(table) - allowed):
            self.add(f"{path}: unknown key {key!r} (allowed: {', '.join(sorted(allowed))})")

    def get(self, table: dict, key: str, kind, path: str, required: bool = False, default=None):
        if key not in table:
            if required:
                self.add(f"{path}.{key}: required")
            return default
        value = table[key]
        if kind is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if kind is int and isinstance(value, bool):
            self.add(f"{path}.{key}: expected integer, got boolean")
            return default
        if not isinstance(value, kind):
            names = kind.__name__ if isinstance(kind, type) else "/".join(k.__name__ for k in kind)
            self.add(f"{path}.{key}: expected {names}, got {type(value).__name__}")
            return default
        if isinstance(value, float) and not math.isfinite(value):
            self.add(f"{path}.{key}: must be finite")
            return default
        return value


def _params(c: _Collector, raw, path: str) -> dict[str, float]:
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        c.add(f"{path}: must be a table")
        return {}
    out = {}
    for key, value in raw.items():
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            c.add(f"{path}.{key}: expected number, got {type(value).__name__}")
        else:
            out[key] = float(value)
    return out


def _packets(c: _Collector, raw, path: str, count: int) -> list[Packet]:
    if not isinstance(raw, list) or not all(isinstance(p, dict) for p in raw):
        c.add(f"{path}: expected an array of tables [[{path}]]")
        return []
    if len(raw) != count:
        c.add(f"{path}: need one packet per particle ({count}), got {len(raw)}")
    out = []
    for i, p in enumerate(raw):
        where = f"{path}[{i}]"
        c.unknown(p, {"center", "width", "momentum"}, where)
        center = c.get(p, "center", float, where, required=True)
        width = c.get(p, "width", float, where, required=True)
        momentum = c.get(p, "momentum", float, where, default=0.0)
        if width is not None and not width > 0:
            c.add(f"{where}.width: must be positive")
            width = None
        if center is not None and width is not None:
            out.append(Packet(center, width, momentum))
    return out


def scenario_from_dict(doc: dict) -> Scenario:
    """Validate a decoded scenario document; raises ScenarioError listing every problem."""
    c = _Collector()
    if not isinstance(doc, dict):
        raise ScenarioError(["scenario document must be a table"])
    c.unknown(doc, TOP_KEYS, "scenario")
    sid = c.get(doc, "id", str, "scenario", required=True, default="scenario")
    description = c.get(doc, "description", str, "scenario", default="")
    seed = c.get(doc, "seed", int, "scenario", default=0)
    sym_raw = c.get(doc, "symmetry", str, "scenario", default="none")
    try:
        symmetry = SymmetryPolicy(sym_raw)
    except ValueError:
        c.add(f"scenario.symmetry: unknown policy {sym_raw!r}; available: none, symmetric, antisymmetric")
        symmetry = SymmetryPolicy.NONE

    # grid
    g = c.table(doc, "grid", True)
    c.unknown(g, {"particles", "points", "length", "periodic"}, "grid")
    particles = c.get(g, "particles", int, "grid", required=True, default=1)
    points = c.get(g, "points", int, "grid", required=True, default=16)
    length = c.get(g, "length", float, "grid", required=True, default=1.0)
    periodic = c.get(g, "periodic", bool, "grid", default=True)
    spec = GridSpec(particles, points, length, periodic=periodic)
    grid = None
    try:
        grid = make_grid(spec)
    except GridError as exc:
        c.add(f"grid: {exc}")
    if symmetry is not SymmetryPolicy.NONE and particles < 2:
        c.add("scenario.symmetry: exchange symmetry needs at least two particles")

    # potentials
    p = c.table(doc, "potentials", False)
    c.unknown(p, set(DEFAULTS["potentials"]), "potentials")
    pdef = DEFAULTS["potentials"]
    profile_name = c.get(p, "profile", str, "potentials", default=pdef["profile"])
    envelope_name = c.get(p, "envelope", str, "potentials", default=pdef["envelope"])
    profile_params = _params(c, p.get("profile_params"), "potentials.profile_params")
    envelope_params = _params(c, p.get("envelope_params"), "potentials.envelope_params")
    soft_core = c.get(p, "soft_core", float, "potentials", default=pdef["soft_core"])
    external = ExternalPotential()
    pair = PairPotential()
    try:
        prof = Profile(profile_name, profile_params)
    except (KeyError, ValueError) as exc:
        c.add(f"potentials.profile: {exc}")
        prof = None
    try:
        env = Envelope(envelope_name, envelope_params)
    except (KeyError, ValueError) as exc:
        c.add(f"potentials.envelope: {exc}")
        env = None
    if prof is not None and env is not None:
        external = ExternalPotential(prof, env)
    if prof is not None and "softness" in prof.params and grid is not None:
        # propagation samples U on grid points while the power uses the analytic force
        if prof.params["softness"] < grid.dx:
            c.add(
                f"potentials.profile_params.softness: {prof.params['softness']} is below the grid "
                f"spacing {grid.dx}; unresolved edges break the energy balance"
            )
    try:
        pair = PairPotential(soft_core)
    except ValueError as exc:
        c.add(f"potentials.soft_core: {exc}")

    # initial state
    ini = c.table(doc, "initial", True)
    kind = c.get(ini, "kind", str, "initial", required=True, default="gaussian")
    initial: dict[str, Any] = {"kind": kind, "noise": c.get(ini, "noise", float, "initial", default=0.0)}
    if initial["noise"] is not None and initial["noise"] < 0:
        c.add("initial.noise: must be >= 0")
    if kind == "gaussian":
        c.unknown(ini, {"kind", "noise", "packets"}, "initial")
        initial["packets"] = [p.__dict__ for p in _packets(c, ini.get("packets"), "initial.packets", particles)]
    elif kind == "plane_wave":
        c.unknown(ini, {"kind", "noise", "momentum"}, "initial")
        mom = c.get(ini, "momentum", float, "initial", required=True, default=0.0)
        initial["momentum"] = mom
        if mom is not None and isinstance(length, float) and length > 0:
            mode = mom * length / (2 * math.pi)
            if abs(mode - round(mode)) > 1e-9:
                c.add(f"initial.momentum: {mom} is not a grid wavenumber (2*pi*m/L)")
    elif kind == "relax":
        c.unknown(ini, {"kind", "noise", "packets", "dtau", "dtau_min", "tol", "max_iters"}, "initial")
        initial["packets"] = [p.__dict__ for p in _packets(c, ini.get("packets"), "initial.packets", particles)]
        initial["dtau"] = c.get(ini, "dtau", float, "initial", default=1e-3)
        initial["dtau_min"] = c.get(ini, "dtau_min", float, "initial", default=initial["dtau"])
        initial["tol"] = c.get(ini, "tol", float, "initial", default=1e-12)
        initial["max_iters"] = c.get(ini, "max_iters", int, "initial", default=100_000)
        if initial["dtau"] is not None and not initial["dtau"] > 0:
            c.add("initial.dtau: must be positive")
        if initial["dtau_min"] is not None and not initial["dtau_min"] > 0:
            c.add("initial.dtau_min: must be positive")
        if external.time_dependent:
            c.add("initial.kind: relax needs a time-independent external potential")
    else:
        c.add(f"initial.kind: unknown kind {kind!r}; available: {', '.join(INITIAL_KINDS)}")

    # time
    t = c.table(doc, "time", True)
    c.unknown(t, {"t_end", "dt", "sample_stride", "norm_abort"}, "time")
    t_end = c.get(t, "t_end", float, "time", required=True, default=0.0)
    dt = c.get(t, "dt", float, "time", required=True, default=1.0)
    stride = c.get(t, "sample_stride", int, "time", default=1)
    norm_abort = c.get(t, "norm_abort", float, "time", default=DEFAULTS["time"]["norm_abort"])
    if dt is not None and not dt > 0:
        c.add("time.dt: must be positive")
    if t_end is not None and t_end < 0:
        c.add("time.t_end: must be >= 0")
    if stride is not None and stride < 1:
        c.add("time.sample_stride: must be >= 1")
    if norm_abort is not None and not norm_abort > 0:
        c.add("time.norm_abort: must be positive")
    if dt and t_end is not None and dt > 0:
        ratio = t_end / dt
        if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio):
            c.add(f"time.t_end: {t_end} is not a whole number of steps of {dt}")

    # omega list
    omegas: list[OmegaEntry] = []
    raw_om = doc.get("omega", [])
    if not isinstance(raw_om, list) or not all(isinstance(o, dict) for o in raw_om):
        c.add("omega: expected an array of tables [[omega]]")
        raw_om = []
    labels = set()
    for i, o in enumerate(raw_om):
        where = f"omega[{i}]"
        c.unknown(o, {"label", "bounds", "full"}, where)
        label = c.get(o, "label", str, where, default=f"omega{i}")
        if label in labels or label == "full":
            c.add(f"{where}.label: {label!r} is reserved or repeated")
        labels.add(label)
        full = c.get(o, "full", bool, where, default=False)
        bounds = o.get("bounds")
        if full:
            if bounds is not None:
                c.add(f"{where}: give either full = true or bounds, not both")
            if grid is not None:
                omegas.append(OmegaEntry(label, None, Region.full(grid.n), 0.0))
            continue
        if (
            not isinstance(bounds, list)
            or len(bounds) != 2
            or not all(isinstance(b, (int, float)) and not isinstance(b, bool) for b in bounds)
        ):
            c.add(f"{where}.bounds: expected [x_lo, x_hi]")
            continue
        lo, hi = float(bounds[0]), float(bounds[1])
        if grid is None:
            continue
        # the outermost grid points bound the box so every snap moves a bound by under dx/2
        first, last = float(grid.x[0]), float(grid.x[-1])
        if not (first <= lo < hi <= last):
            c.add(f"{where}.bounds: [{lo}, {hi}] must satisfy {first} <= x_lo < x_hi <= {last}")
            continue
        try:
            region, dist = grid.snap(lo, hi)
        except ValueError as exc:
            c.add(f"{where}.bounds: {exc}")
            continue
        omegas.append(OmegaEntry(label, (lo, hi), region, dist))

    # observers / output / checks / verify
    obs = c.table(doc, "observers", False)
    c.unknown(obs, {"names"}, "observers")
    names = obs.get("names", list(OBSERVERS))
    if not isinstance(names, list) or not all(isinstance(n, str) for n in names):
        c.add("observers.names: expected a list of strings")
        names = []
    for n in names:
        if n not in OBSERVERS:
            c.add(f"observers.names: unknown observer {n!r}; available: {', '.join(OBSERVERS)}")
    out = c.table(doc, "output", False)
    c.unknown(out, {"directory", "formats"}, "output")
    directory = c.get(out, "directory", str, "output", default=sid or "scenario")
    formats = out.get("formats", list(FORMATS))
    if not isinstance(formats, list) or any(f not in FORMATS for f in formats):
        c.add(f"output.formats: expected a subset of {list(FORMATS)}")
        formats = list(FORMATS)

    chk = c.table(doc, "checks", False)
    c.unknown(chk, set(CHECKS), "checks")
    checks: dict[str, Any] = dict(DEFAULTS["checks"])
    for key, value in chk.items():
        kind_ = CHECKS.get(key)
        if kind_ == "max":
            v = c.get(chk, key, float, "checks")
            if v is not None:
                checks[key] = v
        elif kind_ == "range":
            if (
                isinstance(value, list)
                and len(value) == 2
                and all(isinstance(b, (int, float)) and not isinstance(b, bool) for b in value)
                and value[0] <= value[1]
            ):
                checks[key] = [float(value[0]), float(value[1])]
            else:
                c.add(f"checks.{key}: expected [low, high]")
        elif kind_ == "flag":
            v = c.get(chk, key, bool, "checks")
            if v is not None:
                checks[key] = v
    ver = c.table(doc, "verify", False)
    c.unknown(ver, {"node_epsilon", "refine_dt"}, "verify")
    eps = c.get(ver, "node_epsilon", float, "verify", default=DEFAULTS["verify"]["node_epsilon"])
    if eps is not None and not 0 < eps <= 1e-2:
        c.add("verify.node_epsilon: must lie in (0, 1e-2]")
    refine = c.get(ver, "refine_dt", bool, "verify", default=False)
    needs_refine = [k for k in ("balance_order", "continuity_order") if k in checks]
    if needs_refine and not refine:
        c.add(f"checks.{needs_refine[0]}: needs verify.refine_dt = true")

    if c.errors:
        raise ScenarioError(c.errors)
    return Scenario(
        scenario_id=sid,
        description=description,
        seed=seed,
        symmetry=symmetry,
        grid=spec,
        external=external,
        pair=pair,
        initial=initial,
        t_end=t_end,
        dt=dt,
        sample_stride=stride,
        norm_abort=norm_abort,
        omegas=omegas,
        observers=list(names),
        output_directory=directory,
        formats=list(formats),
        checks=checks,
        node_epsilon=eps,
        refine_dt=refine,
        source=copy.deepcopy(doc),
    )


def parse_scenario(text: str) -> Scenario:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ScenarioError([f"syntax: {exc}"]) from exc
    return scenario_from_dict(doc)


# -- preparation -----------------------------------------------------------------------


def gaussian_factor(x: np.ndarray, packet: Packet) -> np.ndarray:
    """exp(-(x - c)^2 / (4 w^2) + i p x): |.|^2 has standard deviation w."""
    return np.exp(-((x - packet.center) ** 2) / (4.0 * packet.width**2) + 1j * packet.momentum * x)


def build_potentials(s: Scenario, grid=None) -> PotentialAssembly:
    return PotentialAssembly(grid or make_grid(s.grid), s.external, s.pair)


def prepare_state(s: Scenario, potentials: PotentialAssembly) -> WavefunctionField:
    grid = potentials.grid
    kind = s.initial["kind"]
    if kind == "plane_wave":
        amp = np.ones(grid.shape, dtype=complex)
        for k in range(grid.particle_count):
            amp = amp * np.exp(1j * s.initial["momentum"] * grid.coordinate(grid.x_axis(k)))
        psi = normalize(WavefunctionField(amp, 0.0, grid))
    else:
        packets = [Packet(**p) for p in s.initial["packets"]]
        psi = product_state(grid, [gaussian_factor(grid.x, p) for p in packets])
    if s.initial["noise"]:
        rng = np.random.default_rng(s.seed)
        noise = rng.standard_normal(grid.shape) + 1j * rng.standard_normal(grid.shape)
        scale = s.initial["noise"] * float(np.max(np.abs(psi.amplitudes)))
        psi = normalize(psi.replace(amplitudes=psi.amplitudes + scale * noise))
    if s.symmetry is not SymmetryPolicy.NONE:
        psi = apply_symmetry(psi, s.symmetry)
    if kind == "relax":
        psi = imaginary_time_relax(
            psi,
            potentials,
            dtau=s.initial["dtau"],
            tol=s.initial["tol"],
            max_iters=s.initial["max_iters"],
            symmetry=s.symmetry,
            dtau_min=s.initial["dtau_min"],
        )
    return psi
