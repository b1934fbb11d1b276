"""Piezoresistive substrate models.

A substrate maps an applied pressure history to the instantaneous
resistance of one taxel.  The model has three stages applied in order:

1. a play (backlash) operator on pressure, which produces rate-independent
   hysteresis,
2. a static resistance law evaluated at the hysteresis-filtered pressure,
3. first-order relaxation toward that static value, with separate loading
   and unloading time constants and an optional slow creep branch.

Measurement noise is added on conductance at the output; it never feeds
back into the state.

All functions accept scalars or numpy arrays (one element per taxel).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from importlib import resources
from pathlib import Path

import numpy as np

__all__ = [
    "DomainError",
    "Material",
    "LawKind",
    "SubstrateModel",
    "SubstrateState",
    "initial_state",
    "static_resistance",
    "step_state",
    "hold",
    "default_substrates",
    "substrate_by_name",
    "load_substrates",
    "dump_substrates",
]

# Conductance floor applied after noise; keeps resistance finite and > 0.
G_FLOOR = 1e-12


class DomainError(ValueError):
    """Raised for inputs outside a function's physical domain."""


class Material(str, Enum):
    EEONTEX = "EeonTex"
    WEARIC = "Wearic"
    FOAM_HD = "FoamHighDensity"
    FOAM_LD = "FoamLowDensity"
    CUSTOM = "Custom"


class LawKind(str, Enum):
    EXP_SATURATING = "ExpSaturating"
    LINEAR_CONDUCTANCE = "LinearConductance"


@dataclass(frozen=True)
class SubstrateModel:
    """Parameters of one substrate material.

    Resistances are in ohms, pressures in pascals, times in seconds and
    ``noise_sigma`` in siemens.  ``r_sat`` is the asymptote of the
    exponential law; the linear-conductance law has no asymptote and only
    uses ``r_sat`` as a nominal bound for documentation and validation.
    """

    name: Material
    model_kind: LawKind
    r_zero: float
    r_sat: float
    p_char: float
    tau_rise: float
    tau_fall: float
    tau_secondary: float | None = None
    secondary_fraction: float = 0.0
    hyst_width: float = 0.0
    noise_sigma: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "name", Material(self.name))
        object.__setattr__(self, "model_kind", LawKind(self.model_kind))
        if not (0 < self.r_sat < self.r_zero):
            raise DomainError(f"need 0 < r_sat < r_zero, got {self.r_sat}, {self.r_zero}")
        for attr in ("p_char", "tau_rise", "tau_fall"):
            value = getattr(self, attr)
            if not (math.isfinite(value) and value > 0):
                raise DomainError(f"{attr} must be finite and > 0, got {value}")
        if self.tau_secondary is None:
            if self.secondary_fraction != 0.0:
                raise DomainError("secondary_fraction requires tau_secondary")
        elif not self.tau_secondary > 0:
            raise DomainError("tau_secondary must be > 0")
        if not 0.0 <= self.secondary_fraction < 1.0:
            raise DomainError("secondary_fraction must lie in [0, 1)")
        if self.hyst_width < 0 or self.noise_sigma < 0:
            raise DomainError("hyst_width and noise_sigma must be >= 0")

    @property
    def tau_min(self) -> float:
        taus = [self.tau_rise, self.tau_fall]
        if self.tau_secondary is not None:
            taus.append(self.tau_secondary)
        return min(taus)

    @property
    def tau_max(self) -> float:
        taus = [self.tau_rise, self.tau_fall]
        if self.tau_secondary is not None:
            taus.append(self.tau_secondary)
        return max(taus)

    def with_(self, **changes) -> SubstrateModel:
        return replace(self, **changes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["name"] = self.name.value
        d["model_kind"] = self.model_kind.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> SubstrateModel:
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise DomainError(f"unknown substrate fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class SubstrateState:
    """Dynamic state of one taxel (or an array of taxels sharing a model).

    ``r_filtered`` is the fast branch, ``r_secondary`` the slow creep
    branch.  The rng is shared by reference, so advancing a state also
    advances its noise stream.
    """

    p_effective: np.ndarray
    r_filtered: np.ndarray
    r_secondary: np.ndarray
    rng: np.random.Generator = field(repr=False)

    @property
    def shape(self) -> tuple:
        return np.shape(self.p_effective)


def initial_state(model: SubstrateModel, shape=(), seed=None, rng=None) -> SubstrateState:
    """State at rest with zero load. Pass ``rng`` to share a noise stream."""
    if rng is None:
        rng = np.random.default_rng(seed)
    return SubstrateState(
        p_effective=np.zeros(shape),
        r_filtered=np.full(shape, float(model.r_zero)),
        r_secondary=np.full(shape, float(model.r_zero)),
        rng=rng,
    )


def _check_pressure(p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if not np.all(np.isfinite(p)):
        raise DomainError("pressure must be finite")
    if np.any(p < 0):
        raise DomainError("pressure must be >= 0")
    return p


def _law(model: SubstrateModel, p: np.ndarray) -> np.ndarray:
    if model.model_kind is LawKind.EXP_SATURATING:
        return model.r_sat + (model.r_zero - model.r_sat) * np.exp(-p / model.p_char)
    # 1/R = 1/r0 + p / (p_char r0)  =>  R = r0 / (1 + p / p_char)
    return model.r_zero / (1.0 + p / model.p_char)


def static_resistance(model: SubstrateModel, p):
    """Steady-state resistance under pressure ``p`` (no hysteresis, no lag)."""
    r = _law(model, _check_pressure(p))
    return float(r) if r.ndim == 0 else r


def _play(p_effective, p, width):
    return np.clip(p_effective, p - width, p + width)


def _output(model: SubstrateModel, r_fast, r_slow, rng, size):
    f = model.secondary_fraction
    r = (1.0 - f) * r_fast + f * r_slow if f else r_fast
    if model.noise_sigma > 0:
        g = 1.0 / r + model.noise_sigma * rng.standard_normal(size)
        r = 1.0 / np.maximum(g, G_FLOOR)
    return r


def step_state(model: SubstrateModel, state: SubstrateState, p_applied, dt: float):
    """Advance the substrate by one time step of length ``dt``.

    Returns ``(new_state, resistance)``.  ``dt`` must not exceed a fifth
    of the fastest time constant.
    """
    if not (math.isfinite(dt) and dt > 0):
        raise DomainError("dt must be finite and > 0")
    if dt > model.tau_min / 5 * (1 + 1e-9):
        raise DomainError(f"dt={dt} exceeds tau_min/5={model.tau_min / 5}")
    p = np.broadcast_to(_check_pressure(p_applied), state.shape)

    p_eff = _play(state.p_effective, p, model.hyst_width)
    target = _law(model, p_eff)
    tau = np.where(target < state.r_filtered, model.tau_rise, model.tau_fall)
    r_fast = target + (state.r_filtered - target) * np.exp(-dt / tau)
    if model.tau_secondary is not None:
        r_slow = target + (state.r_secondary - target) * math.exp(-dt / model.tau_secondary)
    else:
        r_slow = r_fast
    new = SubstrateState(p_eff, r_fast, r_slow, state.rng)
    r = _output(model, r_fast, r_slow, state.rng, state.shape)
    return new, (float(r) if np.ndim(r) == 0 else r)


def hold(model: SubstrateModel, state: SubstrateState, p_applied, dt: float, n: int,
         last_only: bool = False):
    """Hold a constant pressure for ``n`` steps of ``dt``.

    Equivalent to ``n`` calls of :func:`step_state` (up to float rounding)
    but evaluated in closed form.  Returns ``(new_state, r)`` with ``r`` of
    shape ``(n,) + state.shape``, or just the final sample when
    ``last_only`` is set (noise is then drawn once, not ``n`` times).
    """
    if n < 1:
        raise DomainError("n must be >= 1")
    if not (math.isfinite(dt) and dt > 0):
        raise DomainError("dt must be finite and > 0")
    if dt > model.tau_min / 5 * (1 + 1e-9):
        raise DomainError(f"dt={dt} exceeds tau_min/5={model.tau_min / 5}")
    shape = state.shape
    p = np.broadcast_to(_check_pressure(p_applied), shape)

    p_eff = _play(state.p_effective, p, model.hyst_width)
    target = _law(model, p_eff)
    tau = np.where(target < state.r_filtered, model.tau_rise, model.tau_fall)
    if last_only:
        k = np.full((1,) + (1,) * len(shape), n * dt)
    else:
        k = np.arange(1, n + 1, dtype=float).reshape((n,) + (1,) * len(shape)) * dt
    r_fast = target + (state.r_filtered - target) * np.exp(-k / tau)
    if model.tau_secondary is not None:
        r_slow = target + (state.r_secondary - target) * np.exp(-k / model.tau_secondary)
    else:
        r_slow = r_fast
    new = SubstrateState(p_eff, r_fast[-1].copy(), r_slow[-1].copy(), state.rng)
    if last_only:
        r = _output(model, r_fast[0], r_slow[0], state.rng, shape)
        return new, (float(r) if np.ndim(r) == 0 else r)
    r = _output(model, r_fast, r_slow, state.rng, (n,) + shape)
    return new, r


def _data_path(name: str):
    return resources.files("piezoskin").joinpath("data", name)


def load_substrates(path=None) -> list[SubstrateModel]:
    """Read a ``substrates.json`` document (defaults to the bundled one)."""
    if path is None:
        text = _data_path("substrates.json").read_text()
    else:
        text = Path(path).read_text()
    doc = json.loads(text)
    models = doc["substrates"] if "substrates" in doc else doc
    out = []
    for key, params in models.items():
        params = dict(params)
        params.setdefault("name", key)
        if Material(params["name"]).value != key:
            raise DomainError(f"substrate key {key!r} does not match name {params['name']!r}")
        out.append(SubstrateModel.from_dict(params))
    return out


def dump_substrates(models, path=None) -> str:
    doc = {
        "version": 1,
        "substrates": {m.name.value: m.to_dict() for m in models},
    }
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text


def default_substrates() -> list[SubstrateModel]:
    """The four calibrated materials in the order LD, HD, Wearic, EeonTex."""
    by_name = {m.name: m for m in load_substrates()}
    return [by_name[m] for m in _CANONICAL_ORDER if m in by_name]


def substrate_by_name(name, models=None) -> SubstrateModel:
    key = _ALIASES.get(str(name).lower(), name)
    material = Material(key)
    for m in models if models is not None else default_substrates():
        if m.name is material:
            return m
    raise KeyError(name)


_CANONICAL_ORDER = (Material.FOAM_LD, Material.FOAM_HD, Material.WEARIC, Material.EEONTEX)

_ALIASES = {
    "ld": "FoamLowDensity",
    "lowdensity": "FoamLowDensity",
    "foamlowdensity": "FoamLowDensity",
    "hd": "FoamHighDensity",
    "highdensity": "FoamHighDensity",
    "foamhighdensity": "FoamHighDensity",
    "wearic": "Wearic",
    "eeontex": "EeonTex",
}
