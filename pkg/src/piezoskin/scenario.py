"""Pressure-field generators for the robot experiments.

Contact mechanics are a linear spring: the normal force is stiffness times
penetration, and it is spread over an object's footprint patches in
proportion to each patch's overlap with the taxel rectangles.  Objects in
the bundled catalog carry invented, calibrated parameters; they are not
measurements.
"""

from __future__ import annotations

import csv
import io
import json
import math
import zlib
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np
import shapely
from shapely import affinity
from shapely.geometry import box

from .bench import GRAVITY
from .daq import AcquisitionConfig, Frame, Scanner, SkinLayout, grid5x4, palm34
from .forest import ForestParams
from .perception import (
    ContractError,
    Dataset,
    Debounced,
    ForestDetector,
    baseline_frame,
    noise_threshold,
    train,
    zero_baseline,
)
from .substrate import SubstrateModel

__all__ = [
    "Patch",
    "ObjectSpec",
    "ScenarioSpec",
    "ContactOutcome",
    "Catalog",
    "load_catalog",
    "distribute_force",
    "place_object",
    "run_probe",
    "run_probe_suite",
    "probe_detector",
    "suite_to_csv",
    "generate_contact_dataset",
    "train_contact_detector",
    "generate_recognition_dataset",
    "GraspSequence",
    "grasp_lift_sequence",
    "phase_change_ratios",
]


# -- objects ------------------------------------------------------------------


@dataclass(frozen=True)
class Patch:
    """Axis-aligned rectangle (object frame, mm) carrying a share of the load."""

    x: float
    y: float
    width: float
    height: float
    share: float = 1.0


@dataclass(frozen=True)
class ObjectSpec:
    name: str
    patches: tuple
    mass_g: float = 0.0
    stiffness: float = 1000.0  # N/m, probe scenarios
    topple_force: float = math.inf  # N
    fragile: bool = False

    def __post_init__(self):
        patches = tuple(p if isinstance(p, Patch) else Patch(**p) for p in self.patches)
        object.__setattr__(self, "patches", patches)
        if not patches:
            raise ContractError(f"{self.name}: needs at least one patch")
        if abs(sum(p.share for p in patches) - 1.0) > 1e-9:
            raise ContractError(f"{self.name}: patch shares must sum to 1")
        if not self.topple_force > 0:
            raise ContractError(f"{self.name}: topple_force must be > 0")
        if self.stiffness <= 0 or self.mass_g < 0:
            raise ContractError(f"{self.name}: stiffness must be > 0 and mass >= 0")


@lru_cache(maxsize=16)
def _taxel_boxes(layout: SkinLayout):
    return np.array([box(*t.bounds) for t in layout.taxels], dtype=object)


def _patch_polygon(patch: Patch, pose):
    dx, dy, theta = pose
    poly = box(patch.x - patch.width / 2, patch.y - patch.height / 2,
               patch.x + patch.width / 2, patch.y + patch.height / 2)
    if theta:
        poly = affinity.rotate(poly, theta, origin=(0.0, 0.0))
    return affinity.translate(poly, dx, dy)


def distribute_force(force: float, patches, layout: SkinLayout, pose=(0.0, 0.0, 0.0)):
    """Per-taxel pressure (Pa) for a normal ``force`` (N) over ``patches``.

    ``pose`` is ``(dx mm, dy mm, rotation deg)`` about the object origin.
    Within a patch the force splits in proportion to overlap area with each
    taxel.  A patch overlapping no taxel hands its share to the taxel
    nearest its centre, so the total force is always conserved.
    """
    boxes = _taxel_boxes(layout)
    forces = np.zeros(len(layout))
    if force == 0:
        return forces
    for patch in patches:
        poly = _patch_polygon(patch, pose)
        overlap = shapely.area(shapely.intersection(boxes, poly))
        total = overlap.sum()
        if total > 0:
            forces += force * patch.share * overlap / total
        else:
            c = poly.centroid
            d = np.hypot(layout.centers[:, 0] - c.x, layout.centers[:, 1] - c.y)
            forces[int(np.argmin(d))] += force * patch.share
    return forces / layout.areas_m2


def place_object(obj: ObjectSpec, pose, layout: SkinLayout):
    """Static pressures of an object resting on the array under ``pose``."""
    if len(pose) == 2:
        pose = (pose[0], pose[1], 0.0)
    return distribute_force(obj.mass_g * 1e-3 * GRAVITY, obj.patches, layout, tuple(pose))


# -- catalog ------------------------------------------------------------------


@dataclass
class Catalog:
    probe: dict  # name -> list of ObjectSpec, one per orientation
    recognition: list  # ObjectSpec
    meta: dict = field(default_factory=dict)

    def probe_object(self, name: str, orientation: int = 0) -> ObjectSpec:
        return self.probe[name][orientation]


def load_catalog(path=None) -> Catalog:
    """Read the object catalog (defaults to the bundled, calibrated one)."""
    if path is None:
        text = resources.files("piezoskin").joinpath("data", "catalog.json").read_text()
    else:
        text = Path(path).read_text()
    doc = json.loads(text)
    probe = {}
    for entry in doc["probe_objects"]:
        specs = []
        for o in entry["orientations"]:
            specs.append(ObjectSpec(
                name=entry["name"],
                patches=tuple(Patch(**p) for p in o["patches"]),
                mass_g=entry["mass_g"],
                stiffness=o.get("stiffness", entry.get("stiffness", 1000.0)),
                topple_force=o["topple_force"],
                fragile=entry.get("fragile", False),
            ))
        probe[entry["name"]] = specs
    recognition = [
        ObjectSpec(name=e["name"], patches=tuple(Patch(**p) for p in e["patches"]),
                   mass_g=e["mass_g"])
        for e in doc["recognition_objects"]
    ]
    meta = {k: v for k, v in doc.items() if k not in ("probe_objects", "recognition_objects")}
    return Catalog(probe, recognition, meta)


# -- motion arrest ------------------------------------------------------------


@dataclass(frozen=True)
class ScenarioSpec:
    object: ObjectSpec
    approach_speed: float = 50.0  # mm/s
    start_distance: float = 120.0  # mm
    orientation: int = 0
    stop_latency_frames: int = 3
    seed: int = 0
    overtravel: float = 40.0  # mm past first contact before the trajectory ends
    baseline_s: float = 1.0
    hold_frames: int = 20

    def __post_init__(self):
        if not self.approach_speed > 0:
            raise ContractError("approach_speed must be > 0")
        if self.stop_latency_frames < 0:
            raise ContractError("stop_latency_frames must be >= 0")


@dataclass(frozen=True)
class ContactOutcome:
    detected: bool
    frames_to_detect: int | None  # counted from first contact
    peak_force: float
    toppled: bool
    false_alarm: bool = False  # detector fired before the object was touched


def _baseline(scanner: Scanner, seconds: float):
    zero = np.zeros(len(scanner.layout))
    scanner.settle(zero, 0.2)
    n = max(1, round(seconds * scanner.cfg.scan_rate))
    frames = [scanner.scan(zero) for _ in range(n)]
    return baseline_frame(frames), frames


def run_probe(spec: ScenarioSpec, substrate: SubstrateModel, layout: SkinLayout,
              cfg: AcquisitionConfig | None = None, detector=None):
    """Drive the palm toward the object until the detector halts it.

    Returns ``(outcome, frames)`` where ``frames`` is the log from motion
    start.  The object leaves the path once the force reaches its topple
    (or collapse) force; from then on it loads the sensor with nothing and
    the detector is no longer consulted.  A detection counts only if it
    happens while the object is still in contact (the topple frame
    included).
    """
    if detector is None:
        raise ContractError("run_probe needs a detector")
    if hasattr(detector, "reset"):
        detector.reset()
    scanner = Scanner(layout, substrate, cfg, seed=spec.seed)
    base, _ = _baseline(scanner, spec.baseline_s)
    obj = spec.object
    dt = scanner.cfg.frame_period
    step = spec.approach_speed * dt
    goal = spec.start_distance + spec.overtravel

    traveled, peak, toppled = 0.0, 0.0, False
    detected_at, contact_at, halt_at, topple_at = None, None, None, None
    frames = []
    i = 0
    while True:
        if halt_at is None or i <= halt_at:
            traveled = min(traveled + step, goal)
        penetration = max(0.0, traveled - spec.start_distance)
        force = 0.0
        if not toppled and penetration > 0:
            force = obj.stiffness * penetration * 1e-3
            if force >= obj.topple_force:
                force = obj.topple_force
                toppled, topple_at = True, i
            if contact_at is None:
                contact_at = i
        peak = max(peak, force)
        frame = scanner.scan(distribute_force(force, obj.patches, layout))
        frames.append(frame)
        # once the object is down there is nothing left to arrest; later
        # positives would only be residue of the contact
        live = topple_at is None or i == topple_at
        if detected_at is None and live and detector(zero_baseline(frame, base)):
            detected_at = i
            halt_at = i + spec.stop_latency_frames
        i += 1
        if halt_at is not None and i > halt_at + spec.hold_frames:
            break
        if halt_at is None and topple_at is not None and i > topple_at + spec.hold_frames:
            break
        if halt_at is None and traveled >= goal:
            break
    # a trigger before first contact stops the arm short of the object
    false_alarm = detected_at is not None and (contact_at is None or detected_at < contact_at)
    if detected_at is None or false_alarm:
        return ContactOutcome(False, None, peak, toppled, false_alarm), frames
    return ContactOutcome(True, detected_at - contact_at, peak, toppled), frames


def run_probe_suite(substrates: dict, detectors: dict, catalog: Catalog | None = None,
                    layout: SkinLayout | None = None, seed: int = 0, **spec_kwargs) -> list:
    """Probe every catalog object in every orientation with every substrate.

    ``substrates`` and ``detectors`` are keyed by the same labels (e.g.
    ``"LD"``, ``"HD"``).  Rows come back ordered by (substrate, object,
    orientation), each run seeded independently of the others.
    """
    catalog = catalog or load_catalog()
    layout = layout or palm34()
    rows = []
    for label, model in substrates.items():
        for name, orientations in catalog.probe.items():
            for k, obj in enumerate(orientations):
                # keyed by names so a run's seed does not depend on what else is in the suite
                run_seed = _derive_seed(seed, _name_key(label), _name_key(name), k)
                spec = ScenarioSpec(obj, orientation=k, seed=run_seed, **spec_kwargs)
                outcome, _ = run_probe(spec, model, layout, detector=detectors[label])
                rows.append({
                    "substrate": label,
                    "object": name,
                    "orientation": k,
                    "detected": outcome.detected,
                    "toppled": outcome.toppled,
                    "frames_to_detect": outcome.frames_to_detect,
                    "peak_force": outcome.peak_force,
                    "false_alarm": outcome.false_alarm,
                })
    return rows


def suite_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = ["substrate", "object", "orientation", "detected", "toppled", "frames_to_detect",
            "false_alarm"]
    w.writerow(cols)
    for r in rows:
        ftd = "" if r["frames_to_detect"] is None else r["frames_to_detect"]
        w.writerow([r["substrate"], r["object"], r["orientation"], int(r["detected"]),
                    int(r["toppled"]), ftd, int(r.get("false_alarm", False))])
    return buf.getvalue()


def _name_key(name: str) -> int:
    return zlib.crc32(name.encode())


def _derive_seed(*parts) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


# -- contact training data ----------------------------------------------------


def _random_training_object(rng, layout: SkinLayout) -> tuple:
    x0, y0, x1, y1 = layout.bounds
    cx, cy = rng.uniform(x0, x1), rng.uniform(y0, y1)
    if rng.random() < 0.3:
        # a narrow poke, so every taxel sees contacts that load it alone
        size = rng.uniform(3, 8)
        patches = [Patch(cx, cy, size, size, 1.0)]
    else:
        n = int(rng.integers(1, 4))
        patches = []
        for s in rng.dirichlet(np.ones(n)):
            w, h = np.exp(rng.uniform(np.log(4), np.log(40), 2))
            patches.append(Patch(cx + rng.normal(0, 8), cy + rng.normal(0, 8), w, h, float(s)))
    # renormalize against float drift in the dirichlet draw
    total = sum(p.share for p in patches)
    patches = tuple(Patch(p.x, p.y, p.width, p.height, p.share / total) for p in patches)
    stiffness = float(np.exp(rng.uniform(np.log(150), np.log(3000))))
    push_force = float(np.exp(rng.uniform(np.log(0.5), np.log(6.0))))
    return patches, stiffness, push_force


def generate_contact_dataset(substrate: SubstrateModel, layout: SkinLayout | None = None,
                             n_frames: int = 57_334, contact_fraction: float = 0.45,
                             seed: int = 0, repetitions: int = 5,
                             cfg: AcquisitionConfig | None = None) -> Dataset:
    """Push-through trajectories labelled free (0) / contact (1).

    Each random training object is pushed ``repetitions`` times.  A run
    approaches in a straight line, makes contact, and keeps pushing (the
    force saturating at the object's sliding force) until the trajectory
    ends.  Every run starts from a rested sensor and is zeroed against its
    own baseline window.
    """
    layout = layout or palm34()
    rng = np.random.default_rng([seed, 0])
    feats, labels = [], []
    run = 0
    while len(labels) < n_frames:
        patches, stiffness, push_force = _random_training_object(rng, layout)
        for _ in range(repetitions):
            if len(labels) >= n_frames:
                break
            speed = rng.uniform(20, 80)
            dt_frames = (cfg.scan_rate if cfg else 100.0)
            n_free = int(rng.integers(10, 40))
            n_contact = max(1, int(round(n_free * contact_fraction / (1 - contact_fraction))))
            scanner = Scanner(layout, substrate, cfg, seed=_derive_seed(seed, 1, run))
            base, _ = _baseline(scanner, 0.5)
            for i in range(n_free + n_contact):
                penetration = max(0, i - n_free + 1) * speed / dt_frames
                force = min(stiffness * penetration * 1e-3, push_force)
                frame = scanner.scan(distribute_force(force, patches, layout))
                feats.append(zero_baseline(frame, base))
                labels.append(int(penetration > 0))
            run += 1
    feats = np.array(feats[:n_frames])
    labels = np.array(labels[:n_frames])
    return Dataset(feats, labels, ["free", "contact"], split_seed=seed)


def train_contact_detector(substrate: SubstrateModel, layout: SkinLayout | None = None,
                           n_frames: int = 20_000, params: ForestParams | None = None,
                           seed: int = 0) -> ForestDetector:
    """Forest contact detector trained on synthetic push-through data."""
    data = generate_contact_dataset(substrate, layout, n_frames=n_frames, seed=seed)
    params = params or ForestParams(n_trees=25, max_depth=30, seed=seed)
    return ForestDetector(train(data, params))


def probe_detector(substrate: SubstrateModel, layout: SkinLayout | None = None,
                   confirm_frames: int = 2, **kwargs) -> Debounced:
    """Forest detector that must agree on consecutive frames before halting.

    The per-frame false-positive rate on a resting HD array is about 1e-3,
    and a probe approach spends a few hundred frames in free space.
    """
    return Debounced(train_contact_detector(substrate, layout, **kwargs), confirm_frames)


# -- object recognition -------------------------------------------------------


def generate_recognition_dataset(objects=None, trials: int = 3, n_samples: int = 1172,
                                 layout: SkinLayout | None = None,
                                 substrate: SubstrateModel | None = None, seed: int = 0,
                                 pose_jitter_mm: float = 4.0, settle_s: float = 0.5,
                                 rest_s: float = 0.3,
                                 cfg: AcquisitionConfig | None = None) -> Dataset:
    """Pick-and-place sessions over the array, one labelled frame per placement.

    Each trial visits the objects in a fresh random order and re-zeroes the
    sensor once at its start; residue left by one object carries into the
    next.  Poses are centred with uniform jitter and a random rotation.
    """
    from .substrate import substrate_by_name

    objects = list(objects) if objects is not None else load_catalog().recognition
    layout = layout or grid5x4()
    substrate = substrate or substrate_by_name("ld")
    rng = np.random.default_rng([seed, 2])
    slots = trials * len(objects)
    per_slot = np.full(slots, n_samples // slots)
    per_slot[: n_samples - per_slot.sum()] += 1

    scanner = Scanner(layout, substrate, cfg, seed=_derive_seed(seed, 3))
    zero = np.zeros(len(layout))
    feats, labels = [], []
    slot = 0
    for _ in range(trials):
        base, _ = _baseline(scanner, 0.5)
        for label in rng.permutation(len(objects)):
            obj = objects[label]
            for _ in range(per_slot[slot]):
                pose = (rng.uniform(-pose_jitter_mm, pose_jitter_mm),
                        rng.uniform(-pose_jitter_mm, pose_jitter_mm),
                        rng.uniform(0.0, 360.0))
                p = place_object(obj, pose, layout)
                scanner.settle(p, settle_s)
                feats.append(zero_baseline(scanner.scan(p), base))
                labels.append(int(label))
                scanner.settle(zero, rest_s)
            slot += 1
    return Dataset(np.array(feats), np.array(labels), [o.name for o in objects],
                   split_seed=seed)


# -- grasp and lift -----------------------------------------------------------


@dataclass
class GraspSequence:
    frames: list
    phases: list  # (name, start, end) frame ranges, end exclusive
    pressures: list  # applied pressure vector per frame
    baseline: Frame

    def deviations(self) -> np.ndarray:
        return np.array([zero_baseline(f, self.baseline) for f in self.frames])

    def active_set(self, phase: str) -> frozenset:
        """Taxels loaded by the applied pattern in ``phase``."""
        for name, start, end in self.phases:
            if name == phase:
                return frozenset(np.flatnonzero(self.pressures[end - 1] > 0).tolist())
        raise KeyError(phase)


def grasp_lift_sequence(obj: ObjectSpec, grasp_pose=(0.0, 0.0, 0.0), lift_shift=(0.0, 0.0),
                        force: float = 2.0, lift_scale: float = 1.0,
                        substrate: SubstrateModel | None = None,
                        layout: SkinLayout | None = None, phase_frames=(40, 80, 80),
                        seed: int = 0, cfg: AcquisitionConfig | None = None) -> GraspSequence:
    """Reach (no load), grasp (pattern A) and lift (A moved by ``lift_shift``).

    ``lift_shift`` is a ``(dx, dy)`` translation in mm of the contact
    pattern once the object leaves the table; ``lift_scale`` re-weights the
    grasp force.
    """
    from .substrate import substrate_by_name

    substrate = substrate or substrate_by_name("ld")
    layout = layout or palm34()
    scanner = Scanner(layout, substrate, cfg, seed=seed)
    base, _ = _baseline(scanner, 0.5)
    grasp_pose = tuple(grasp_pose) + (0.0,) * (3 - len(grasp_pose))
    lift_pose = (grasp_pose[0] + lift_shift[0], grasp_pose[1] + lift_shift[1], grasp_pose[2])
    patterns = [
        ("reach", np.zeros(len(layout))),
        ("grasp", distribute_force(force, obj.patches, layout, grasp_pose)),
        ("lift", distribute_force(force * lift_scale, obj.patches, layout, lift_pose)),
    ]
    frames, phases, pressures = [], [], []
    for (name, p), n in zip(patterns, phase_frames):
        start = len(frames)
        for _ in range(n):
            frames.append(scanner.scan(p))
            pressures.append(p)
        phases.append((name, start, len(frames)))
    return GraspSequence(frames, phases, pressures, base)


def phase_change_ratios(seq: GraspSequence, window: int = 3, settle: int = 20) -> list:
    """Boundary change relative to typical within-phase change, per boundary.

    The boundary change is the largest frame-to-frame L1 difference in the
    ``window`` frames starting at the boundary.  The within-phase change is
    the median L1 difference over frames at least ``settle`` frames past any
    boundary.
    """
    dev = seq.deviations().astype(float)
    diffs = np.abs(np.diff(dev, axis=0)).sum(axis=1)  # diffs[i] = |f[i+1] - f[i]|
    boundaries = [start for _, start, _ in seq.phases[1:]]
    quiet = np.ones(len(diffs), dtype=bool)
    for b in boundaries:
        quiet[max(0, b - 1): b - 1 + settle] = False
    within = float(np.median(diffs[quiet])) if quiet.any() else 0.0
    within = max(within, 1.0)  # at least one count of change
    return [float(diffs[b - 1: b - 1 + window].max() / within) for b in boundaries]
