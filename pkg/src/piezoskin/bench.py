"""Benchtop characterization procedures run against simulated substrates.

Outputs are normalized divider voltages: 0 at zero load and 1 at the
static response to the heaviest bench weight (100 g on the standard
footprint).  Loading lowers the taxel resistance and therefore the divider
voltage, so the normalized output is the voltage *drop*.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .daq import AcquisitionConfig, divider_voltage
from .substrate import (
    DomainError,
    SubstrateModel,
    hold,
    initial_state,
    static_resistance,
)

__all__ = [
    "GRAVITY",
    "WEIGHT_FOOTPRINT_M2",
    "BENCH_MASSES_G",
    "MeasurementError",
    "ResponseTrace",
    "SensitivityCurve",
    "pressure_of_weight",
    "normalized_output",
    "step_response",
    "rise_fall_times",
    "sensitivity_sweep",
    "hysteresis_percent",
    "calibrate_hyst_width",
    "change_below",
    "saturation_pressure",
    "linear_r2",
    "characterize",
    "trace_to_csv",
    "curve_to_csv",
]

GRAVITY = 9.81
# footprint of the hexagonal bench weights
WEIGHT_FOOTPRINT_M2 = 5.85e-4
BENCH_MASSES_G = tuple(range(0, 101, 5))


class MeasurementError(RuntimeError):
    """A measurement could not be taken from the data (e.g. no crossing)."""


def pressure_of_weight(mass_g: float, area_m2: float = WEIGHT_FOOTPRINT_M2) -> float:
    if mass_g < 0:
        raise DomainError("mass must be >= 0")
    if not area_m2 > 0:
        raise DomainError("area must be > 0")
    return mass_g * 1e-3 * GRAVITY / area_m2


def normalized_output(model: SubstrateModel, r, cfg: AcquisitionConfig = AcquisitionConfig(),
                      area_m2: float = WEIGHT_FOOTPRINT_M2, output: str = "voltage"):
    """Map resistance to the bench's normalized output.

    ``output="resistance"`` uses the resistance drop instead of the voltage
    drop; it is affine in resistance, so a first-order substrate gives a
    first-order trace.  The divider voltage is not affine in resistance and
    distorts edge times for large excursions.
    """
    r_ref = static_resistance(model, pressure_of_weight(100, area_m2))
    if output == "resistance":
        return (model.r_zero - np.asarray(r)) / (model.r_zero - r_ref)
    if output != "voltage":
        raise DomainError(f"unknown output {output!r}")
    v0 = divider_voltage(model.r_zero, cfg)
    v_ref = divider_voltage(r_ref, cfg)
    return (v0 - divider_voltage(r, cfg)) / (v0 - v_ref)


def _record(model, state, p, seconds, sample_hz):
    """Hold ``p`` for ``seconds`` and return samples taken at ``sample_hz``."""
    n = max(1, round(seconds * sample_hz))
    dt = 1.0 / sample_hz
    sub = max(1, math.ceil(dt / (model.tau_min / 5) - 1e-9))
    state, r = hold(model, state, p, dt / sub, n * sub)
    return state, r[sub - 1::sub]


def _settle(model, state, p, seconds):
    dt = model.tau_min / 5
    n = max(1, math.ceil(seconds / dt))
    state, _ = hold(model, state, p, seconds / n, n, last_only=True)
    return state


# -- step response ------------------------------------------------------------


@dataclass
class ResponseTrace:
    t: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    trials: int
    t_load: float
    t_unload: float

    def __post_init__(self):
        if not (len(self.t) == len(self.mean) == len(self.std)):
            raise DomainError("trace vectors must have equal length")
        if self.trials < 1:
            raise DomainError("trials must be >= 1")


def step_response(model: SubstrateModel, mass_g: float = 20.0,
                  area_m2: float = WEIGHT_FOOTPRINT_M2, hold_s: float | None = None,
                  trials: int = 15, sample_hz: float = 10_000.0, seed: int = 0,
                  pre_s: float | None = None, post_s: float | None = None,
                  cfg: AcquisitionConfig = AcquisitionConfig(),
                  output: str = "voltage") -> ResponseTrace:
    """Place a weight at ``t_load``, remove it ``hold_s`` later; average trials.

    Every trial starts from rest and draws noise from its own stream
    spawned from ``seed``.
    """
    if trials < 1:
        raise DomainError("trials must be >= 1")
    if sample_hz < 5 / model.tau_min * (1 - 1e-9):
        raise DomainError(f"sample_hz must be >= 5/tau_min = {5 / model.tau_min}")
    hold_s = max(1.0, 10 * model.tau_max) if hold_s is None else hold_s
    pre_s = 0.1 * hold_s if pre_s is None else pre_s
    post_s = hold_s if post_s is None else post_s
    p = pressure_of_weight(mass_g, area_m2)

    runs = []
    for child in np.random.SeedSequence(seed).spawn(trials):
        state = initial_state(model, seed=child)
        state, a = _record(model, state, 0.0, pre_s, sample_hz)
        state, b = _record(model, state, p, hold_s, sample_hz)
        state, c = _record(model, state, 0.0, post_s, sample_hz)
        runs.append(normalized_output(model, np.concatenate([a, b, c]), cfg,
                                      area_m2, output))
    runs = np.array(runs)
    n_pre = max(1, round(pre_s * sample_hz))
    n_hold = max(1, round(hold_s * sample_hz))
    t = np.arange(1, runs.shape[1] + 1) / sample_hz
    return ResponseTrace(
        t=t,
        mean=runs.mean(axis=0),
        std=runs.std(axis=0),
        trials=trials,
        t_load=n_pre / sample_hz,
        t_unload=(n_pre + n_hold) / sample_hz,
    )


def _crossing(t, y, level, rising, before=None):
    """Time ``y`` crosses ``level`` in the given direction, interpolated.

    Without ``before`` this is the first crossing.  With it, the last
    crossing at or before that time, which ignores noise that pokes over
    the level early and falls back.
    """
    hit = y >= level if rising else y <= level
    if before is None:
        idx = np.flatnonzero(hit)
    else:
        enter = np.flatnonzero(hit[1:] & ~hit[:-1]) + 1
        idx = enter[t[enter] <= before][-1:]
        if idx.size == 0 and hit[0]:
            idx = np.array([0])
    if idx.size == 0:
        raise MeasurementError(f"signal never crosses {level:.4g}")
    i = idx[0]
    if i == 0:
        return float(t[0])
    y0, y1 = y[i - 1], y[i]
    return float(t[i - 1] + (level - y0) / (y1 - y0) * (t[i] - t[i - 1]))


def _edge_time(t, y, start, end, level_before):
    sel = (t > start) & (t <= end)
    ts, ys = t[sel], y[sel]
    if ts.size < 4:
        raise MeasurementError("window holds too few samples")
    tail = max(2, ts.size // 10)
    final = ys[-tail:].mean()
    excursion = final - level_before
    if excursion == 0:
        raise MeasurementError("no excursion in window")
    rising = excursion > 0
    t90 = _crossing(ts, ys, level_before + 0.9 * excursion, rising)
    t10 = _crossing(ts, ys, level_before + 0.1 * excursion, rising, before=t90)
    return t90 - t10, final


def rise_fall_times(trace: ResponseTrace, load_window=None, unload_window=None):
    """10-90 % rise and fall times of the mean trace, in seconds.

    Windows are ``(start, end)`` times; the starting level of each edge is
    the mean of the samples just before the window, the final level is the
    mean of the last tenth of the window.
    """
    t, y = trace.t, trace.mean
    load_window = load_window or (trace.t_load, trace.t_unload)
    unload_window = unload_window or (trace.t_unload, float(t[-1]))

    before = y[t <= load_window[0]]
    if before.size == 0:
        raise MeasurementError("no samples before load")
    base = before[-max(1, before.size // 2):].mean()
    t_rise, plateau = _edge_time(t, y, *load_window, base)
    t_fall, _ = _edge_time(t, y, *unload_window, plateau)
    return t_rise, t_fall


# -- sensitivity --------------------------------------------------------------


@dataclass
class SensitivityCurve:
    pressure: np.ndarray
    mean_output: np.ndarray
    samples_per_step: int

    def __post_init__(self):
        if np.any(np.diff(self.pressure) <= 0):
            raise DomainError("pressures must be strictly increasing")


def sensitivity_sweep(model: SubstrateModel, masses=BENCH_MASSES_G,
                      area_m2: float = WEIGHT_FOOTPRINT_M2, settle_s: float = 3.0,
                      record_s: float = 5.0, samples_per_step: int = 1625, seed: int = 0,
                      cfg: AcquisitionConfig = AcquisitionConfig()) -> SensitivityCurve:
    """Add weight step by step; average a recording window at each step.

    The averaged outputs are rescaled so the sweep spans exactly [0, 1].
    """
    masses = np.asarray(masses, dtype=float)
    if np.any(np.diff(masses) < 0):
        raise DomainError("masses must be non-decreasing")
    sample_hz = samples_per_step / record_s
    state = initial_state(model, seed=seed)
    means = []
    for m in masses:
        p = pressure_of_weight(m, area_m2)
        state = _settle(model, state, p, settle_s)
        state, r = _record(model, state, p, record_s, sample_hz)
        means.append(normalized_output(model, r, cfg).mean())
    means = np.array(means)
    lo, hi = means.min(), means.max()
    out = (means - lo) / (hi - lo) if hi > lo else np.zeros_like(means)
    return SensitivityCurve(
        pressure=np.array([pressure_of_weight(m, area_m2) for m in masses]),
        mean_output=out,
        samples_per_step=samples_per_step,
    )


def change_below(curve: SensitivityCurve, p: float = 300.0) -> float:
    """Normalized output change from zero load up to pressure ``p``."""
    return float(np.interp(p, curve.pressure, curve.mean_output) - curve.mean_output[0])


def saturation_pressure(curve: SensitivityCurve, fraction: float = 0.95) -> float:
    """Pressure where the normalized output first reaches ``fraction``."""
    return _crossing(curve.pressure, curve.mean_output, fraction, rising=True)


def linear_r2(curve: SensitivityCurve) -> float:
    x, y = curve.pressure, curve.mean_output
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = ((y - y.mean()) ** 2).sum()
    return float(1 - (resid ** 2).sum() / ss_tot)


# -- hysteresis ---------------------------------------------------------------


def hysteresis_percent(model: SubstrateModel, mass_g: float = 20.0,
                       area_m2: float = WEIGHT_FOOTPRINT_M2, cycles: int = 20, seed: int = 0,
                       levels: int = 21, settle_s: float | None = None,
                       record_s: float = 0.05, sample_hz: float = 10_000.0,
                       cfg: AcquisitionConfig = AcquisitionConfig()) -> float:
    """Mean loop width over ``cycles`` quasi-static load/unload cycles.

    Each cycle steps the pressure 0 -> P -> 0 over ``levels`` equally spaced
    values per leg.  At each level the substrate settles for ``settle_s``
    (default 8 slowest time constants) before ``record_s`` of samples are
    averaged.  Per cycle, hysteresis is the largest loading/unloading gap at
    equal pressure divided by the cycle's output span, in percent.
    """
    if cycles < 1:
        raise DomainError("cycles must be >= 1")
    settle_s = 8 * model.tau_max if settle_s is None else settle_s
    p_max = pressure_of_weight(mass_g, area_m2)
    grid = np.linspace(0.0, p_max, levels)
    state = initial_state(model, seed=seed)
    result = []
    for _ in range(cycles):
        outs = []
        for p in np.concatenate([grid, grid[-2::-1]]):
            state = _settle(model, state, p, settle_s)
            state, r = _record(model, state, p, record_s, sample_hz)
            outs.append(normalized_output(model, r, cfg).mean())
        outs = np.array(outs)
        loading = outs[:levels]
        unloading = outs[levels - 1:][::-1]
        span = outs.max() - outs.min()
        gap = np.abs(loading - unloading).max()
        result.append(100.0 * gap / span if span > 0 else 0.0)
    return float(np.mean(result))


def calibrate_hyst_width(model: SubstrateModel, target_pct: float, tol: float = 0.01,
                         max_iter: int = 60, **kwargs) -> float:
    """Bisect ``hyst_width`` until the noise-free measured hysteresis hits the target."""
    quiet = model.with_(noise_sigma=0.0)
    # beyond a quarter of the peak pressure the settled loop already spans
    # the whole output range
    lo, hi = 0.0, pressure_of_weight(kwargs.get("mass_g", 20.0),
                                     kwargs.get("area_m2", WEIGHT_FOOTPRINT_M2)) / 4
    if hysteresis_percent(quiet.with_(hyst_width=hi), **kwargs) < target_pct:
        raise MeasurementError(f"target {target_pct}% unreachable")
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        h = hysteresis_percent(quiet.with_(hyst_width=mid), **kwargs)
        if abs(h - target_pct) <= tol:
            return mid
        if h < target_pct:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# -- reporting ----------------------------------------------------------------


def characterize(model: SubstrateModel, seed: int = 0, trials: int = 15,
                 cycles: int = 20) -> tuple:
    """Run all bench procedures. Returns ``(summary, trace, curve)``."""
    trace = step_response(model, trials=trials, seed=seed)
    t_rise, t_fall = rise_fall_times(trace)
    curve = sensitivity_sweep(model, seed=seed)
    summary = {
        "material": model.name.value,
        "rise_time_s": t_rise,
        "fall_time_s": t_fall,
        "hysteresis_pct": hysteresis_percent(model, cycles=cycles, seed=seed),
        "change_below_300pa": change_below(curve, 300.0),
        "saturation_pressure_95_pa": saturation_pressure(curve, 0.95),
        "linear_r2": linear_r2(curve),
    }
    return summary, trace, curve


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) for v in row])
    return buf.getvalue()


def trace_to_csv(trace: ResponseTrace) -> str:
    return _csv(["t", "mean", "std"], zip(trace.t, trace.mean, trace.std))


def curve_to_csv(curve: SensitivityCurve) -> str:
    return _csv(["pressure_pa", "mean_output"], zip(curve.pressure, curve.mean_output))
