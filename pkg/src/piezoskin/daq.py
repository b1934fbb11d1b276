"""Acquisition chain: taxel layouts, voltage divider, ADC and array scanning."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .substrate import DomainError, SubstrateModel, SubstrateState, hold, initial_state

__all__ = [
    "AcquisitionConfig",
    "Frame",
    "Taxel",
    "SkinLayout",
    "palm34",
    "grid5x4",
    "get_layout",
    "adc_code",
    "adc_codes",
    "divider_voltage",
    "scan_frame",
    "Scanner",
    "frames_to_csv",
    "frames_from_csv",
    "frames_to_json",
]

SEQ_MOD = 1 << 16


@dataclass(frozen=True)
class AcquisitionConfig:
    v_in: float = 5.0
    r_div: float = 5100.0
    adc_bits: int = 10
    scan_rate: float = 100.0
    taxel_count: int = 34

    def __post_init__(self):
        if self.v_in <= 0 or self.r_div <= 0:
            raise DomainError("v_in and r_div must be > 0")
        if not 1 <= self.adc_bits <= 16:
            raise DomainError("adc_bits must be in 1..16")
        if self.scan_rate <= 0 or self.taxel_count <= 0:
            raise DomainError("scan_rate and taxel_count must be > 0")

    @property
    def full_scale(self) -> int:
        return 1 << self.adc_bits

    @property
    def max_code(self) -> int:
        return self.full_scale - 1

    @property
    def frame_period(self) -> float:
        return 1.0 / self.scan_rate


@dataclass(frozen=True)
class Frame:
    seq: int
    t: float
    values: tuple

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(int(v) for v in self.values))
        if not 0 <= self.seq < SEQ_MOD:
            raise DomainError(f"seq out of 16-bit range: {self.seq}")

    @property
    def k(self) -> int:
        return len(self.values)

    def array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.int64)


# -- layouts ---------------------------------------------------------------


@dataclass(frozen=True)
class Taxel:
    id: int
    x: float  # center, mm
    y: float
    width: float  # mm
    height: float

    @property
    def area_mm2(self) -> float:
        return self.width * self.height

    @property
    def bounds(self) -> tuple:
        hw, hh = self.width / 2, self.height / 2
        return (self.x - hw, self.y - hh, self.x + hw, self.y + hh)


class SkinLayout:
    """Geometry of a taxel array. Ids are dense ``0..K-1`` in list order."""

    def __init__(self, taxels, name: str = "custom", pitch: float | None = None):
        taxels = sorted(taxels, key=lambda t: t.id)
        if not taxels:
            raise DomainError("layout needs at least one taxel")
        if [t.id for t in taxels] != list(range(len(taxels))):
            raise DomainError("taxel ids must be unique and dense 0..K-1")
        if any(t.width <= 0 or t.height <= 0 for t in taxels):
            raise DomainError("taxel areas must be > 0")
        self.taxels = tuple(taxels)
        self.name = name
        self._pitch = pitch

    def __len__(self):
        return len(self.taxels)

    def __iter__(self):
        return iter(self.taxels)

    def __getitem__(self, i):
        return self.taxels[i]

    @property
    def centers(self) -> np.ndarray:
        return np.array([(t.x, t.y) for t in self.taxels], dtype=float)

    @property
    def areas_m2(self) -> np.ndarray:
        return np.array([t.area_mm2 for t in self.taxels], dtype=float) * 1e-6

    @property
    def pitch(self) -> float:
        """Center-to-center spacing; nearest-neighbour distance if not given."""
        if self._pitch is not None:
            return self._pitch
        c = self.centers
        if len(c) < 2:
            return max(self.taxels[0].width, self.taxels[0].height)
        d = np.sqrt(((c[:, None, :] - c[None, :, :]) ** 2).sum(-1))
        np.fill_diagonal(d, np.inf)
        return float(d.min())

    @property
    def bounds(self) -> tuple:
        b = np.array([t.bounds for t in self.taxels])
        return (b[:, 0].min(), b[:, 1].min(), b[:, 2].max(), b[:, 3].max())

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "pitch": self._pitch,
            "taxels": [
                {"id": t.id, "x": t.x, "y": t.y, "width": t.width, "height": t.height}
                for t in self.taxels
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> SkinLayout:
        taxels = [Taxel(int(t["id"]), float(t["x"]), float(t["y"]),
                        float(t["width"]), float(t["height"])) for t in d["taxels"]]
        return cls(taxels, name=d.get("name", "custom"), pitch=d.get("pitch"))


def grid_layout(cols: int, rows: int, pitch: float = 12.0, size: float = 10.0,
                name: str | None = None) -> SkinLayout:
    """Rectangular grid centred on the origin, ids row-major from the top-left."""
    taxels = []
    x0 = -(cols - 1) * pitch / 2
    y0 = (rows - 1) * pitch / 2
    for r in range(rows):
        for c in range(cols):
            taxels.append(Taxel(r * cols + c, x0 + c * pitch, y0 - r * pitch, size, size))
    return SkinLayout(taxels, name=name or f"grid{cols}x{rows}", pitch=pitch)


def grid5x4() -> SkinLayout:
    return grid_layout(5, 4, name="grid5x4")


def palm34() -> SkinLayout:
    """34 taxels of 1 cm^2 covering a palm: four rows of 6, two rows of 5.

    The rows of five sit toward the wrist and are offset by half a pitch.
    """
    pitch, size = 12.0, 10.0
    taxels = []
    y = 2.5 * pitch
    for count in (6, 6, 6, 6, 5, 5):
        x0 = -(count - 1) * pitch / 2
        for c in range(count):
            taxels.append(Taxel(len(taxels), x0 + c * pitch, y, size, size))
        y -= pitch
    return SkinLayout(taxels, name="palm34", pitch=pitch)


_LAYOUTS = {"palm34": palm34, "grid5x4": grid5x4}


def get_layout(name_or_path) -> SkinLayout:
    """Named layout (``palm34``, ``grid5x4``) or a JSON layout file."""
    if isinstance(name_or_path, SkinLayout):
        return name_or_path
    key = str(name_or_path)
    if key in _LAYOUTS:
        return _LAYOUTS[key]()
    path = Path(key)
    if not path.exists():
        raise DomainError(f"unknown layout {key!r}")
    return SkinLayout.from_dict(json.loads(path.read_text()))


# -- divider and ADC -------------------------------------------------------


def divider_voltage(r_tax, cfg: AcquisitionConfig = AcquisitionConfig()):
    """Voltage across the taxel in the divider (continuous, unquantized)."""
    r = np.asarray(r_tax, dtype=float)
    v = cfg.v_in * r / (cfg.r_div + r)
    return float(v) if v.ndim == 0 else v


def _exact_code(r: float, cfg: AcquisitionConfig) -> int:
    r_q = Fraction(r)
    x = cfg.full_scale * r_q / (Fraction(cfg.r_div) + r_q)
    return min(math.floor(x), cfg.max_code)


def adc_code(r_tax: float, cfg: AcquisitionConfig = AcquisitionConfig()) -> int:
    """Quantized divider reading: floor(2^bits * R / (R_div + R)), clamped."""
    r = float(r_tax)
    if math.isnan(r) or r < 0:
        raise DomainError(f"resistance must be >= 0, got {r_tax}")
    if math.isinf(r):
        return cfg.max_code
    x = cfg.full_scale * r / (cfg.r_div + r)
    if abs(x - round(x)) < 1e-6:
        return _exact_code(r, cfg)
    return min(math.floor(x), cfg.max_code)


def adc_codes(r_tax, cfg: AcquisitionConfig = AcquisitionConfig()) -> np.ndarray:
    """Vectorized :func:`adc_code`; exact near quantization boundaries."""
    r = np.asarray(r_tax, dtype=float)
    if np.any(np.isnan(r)) or np.any(r < 0):
        raise DomainError("resistances must be >= 0")
    with np.errstate(invalid="ignore"):
        x = cfg.full_scale * r / (cfg.r_div + r)
    x = np.where(np.isinf(r), cfg.full_scale, x)
    codes = np.minimum(np.floor(x), cfg.max_code).astype(np.int64)
    near = np.abs(x - np.round(x)) < 1e-6
    near &= np.isfinite(r)
    if near.any():
        flat = codes.reshape(-1)
        for i in np.flatnonzero(near.reshape(-1)):
            flat[i] = _exact_code(float(r.reshape(-1)[i]), cfg)
        codes = flat.reshape(codes.shape)
    return codes


# -- scanning ---------------------------------------------------------------


def _substeps(model: SubstrateModel, dt: float) -> int:
    return max(1, math.ceil(dt / (model.tau_min / 5) - 1e-9))


def _advance(model, state, pressures, dt):
    n = _substeps(model, dt)
    state, r = hold(model, state, pressures, dt / n, n, last_only=True)
    return state, r


def scan_frame(layout: SkinLayout, model: SubstrateModel, state: SubstrateState,
               pressures, cfg: AcquisitionConfig, dt: float | None = None,
               prev: Frame | None = None):
    """Advance every taxel by ``dt`` under ``pressures`` and sample once.

    Returns ``(frame, new_state)``.  The frame follows ``prev`` in sequence
    (16-bit wraparound) and time.
    """
    p = np.asarray(pressures, dtype=float)
    if p.shape != (len(layout),):
        raise DomainError(f"expected {len(layout)} pressures, got shape {p.shape}")
    dt = cfg.frame_period if dt is None else dt
    state, r = _advance(model, state, p, dt)
    seq = 0 if prev is None else (prev.seq + 1) % SEQ_MOD
    t = 0.0 if prev is None else prev.t + dt
    return Frame(seq, t, adc_codes(r, cfg).tolist()), state


class Scanner:
    """Stateful multiplexed scanner for one substrate sheet under a layout.

    Frame times are ``n / scan_rate`` with ``n`` the frame index, which is
    the same clock the stream parser reconstructs.
    """

    def __init__(self, layout: SkinLayout, model: SubstrateModel,
                 cfg: AcquisitionConfig | None = None, seed=None, rng=None,
                 seq0: int = 0):
        self.layout = layout
        self.model = model
        self.cfg = cfg or AcquisitionConfig(taxel_count=len(layout))
        if self.cfg.taxel_count != len(layout):
            raise DomainError("cfg.taxel_count does not match layout")
        self.state = initial_state(model, (len(layout),), seed=seed, rng=rng)
        self.n = 0
        self.seq0 = seq0

    def scan(self, pressures) -> Frame:
        p = np.asarray(pressures, dtype=float)
        if p.shape != (len(self.layout),):
            raise DomainError(f"expected {len(self.layout)} pressures, got shape {p.shape}")
        self.state, r = _advance(self.model, self.state, p, self.cfg.frame_period)
        frame = Frame((self.seq0 + self.n) % SEQ_MOD, self.n / self.cfg.scan_rate,
                      adc_codes(r, self.cfg).tolist())
        self.n += 1
        return frame

    def settle(self, pressures, seconds: float) -> None:
        """Advance without emitting frames (frame counter is not touched)."""
        p = np.asarray(pressures, dtype=float)
        n_frames = max(1, round(seconds * self.cfg.scan_rate))
        dt = self.cfg.frame_period
        n = _substeps(self.model, dt) * n_frames
        self.state, _ = hold(self.model, self.state, p, dt * n_frames / n, n, last_only=True)


# -- export -----------------------------------------------------------------


def frames_to_csv(frames, path=None) -> str:
    frames = list(frames)
    k = frames[0].k if frames else 0
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "seq"] + [f"v{i}" for i in range(k)])
    for f in frames:
        w.writerow([repr(float(f.t)), f.seq, *f.values])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def frames_from_csv(source) -> list:
    """Parse frames from CSV text or a path."""
    if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source):
        source = Path(source).read_text()
    rows = list(csv.reader(io.StringIO(source)))
    if not rows or rows[0][:2] != ["t", "seq"]:
        raise DomainError("frame CSV must start with header t,seq,v0,...")
    k = len(rows[0]) - 2
    frames = []
    for row in rows[1:]:
        if not row:
            continue
        if len(row) != k + 2:
            raise DomainError(f"row has {len(row)} columns, expected {k + 2}")
        frames.append(Frame(int(row[1]), float(row[0]), [int(v) for v in row[2:]]))
    return frames


def frames_to_json(frames) -> str:
    return json.dumps([[f.t, f.seq, *f.values] for f in frames])
