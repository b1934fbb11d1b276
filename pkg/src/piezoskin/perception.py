"""Signal processing and learning on frames.

Baseline zeroing, contact detection, contact localization, dataset I/O
and classification metrics.  Deviations are ``baseline - frame`` so a
loaded taxel (lower resistance, lower ADC code) reads positive.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .daq import Frame, SkinLayout
from .forest import ForestModel, ForestParams, train_forest

__all__ = [
    "ContractError",
    "Dataset",
    "ContactEstimate",
    "zero_baseline",
    "baseline_frame",
    "noise_threshold",
    "train",
    "evaluate",
    "metrics",
    "confusion_to_csv",
    "detect_contact",
    "ForestDetector",
    "ThresholdDetector",
    "Debounced",
    "localize_contact",
]


class ContractError(ValueError):
    """Inputs violate an operation's preconditions (shape, emptiness)."""


# -- datasets ---------------------------------------------------------------


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    label_names: list
    split_seed: int = 0

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features))
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.labels) < 1:
            raise ContractError("dataset needs at least one row")
        if self.features.ndim != 2 or len(self.features) != len(self.labels):
            raise ContractError("features must be (N, K) with N == len(labels)")
        if self.labels.min() < 0 or self.labels.max() >= len(self.label_names):
            raise ContractError("labels out of range of label_names")
        self.label_names = list(self.label_names)

    def __len__(self):
        return len(self.labels)

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> Dataset:
        return Dataset(self.features[idx], self.labels[idx], self.label_names, self.split_seed)

    def split(self, test_fraction: float = 0.2) -> tuple:
        """Shuffled train/test split driven by ``split_seed``."""
        n = len(self)
        perm = np.random.default_rng(self.split_seed).permutation(n)
        n_test = int(round(n * test_fraction))
        if n_test < 1 or n_test >= n:
            raise ContractError("split leaves an empty side")
        return self.subset(np.sort(perm[n_test:])), self.subset(np.sort(perm[:n_test]))

    def to_csv(self, path) -> None:
        """Write ``path`` (CSV) and a JSON sidecar next to it."""
        path = Path(path)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["label"] + [f"v{i}" for i in range(self.n_features)])
        integral = np.issubdtype(self.features.dtype, np.integer) or np.all(
            self.features == np.round(self.features))
        for label, row in zip(self.labels, self.features):
            vals = [int(v) for v in row] if integral else [repr(float(v)) for v in row]
            w.writerow([int(label), *vals])
        path.write_text(buf.getvalue())
        sidecar = {"label_names": self.label_names, "split_seed": self.split_seed,
                   "n_rows": len(self), "n_features": self.n_features}
        _sidecar(path).write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_csv(cls, path) -> Dataset:
        path = Path(path)
        rows = list(csv.reader(io.StringIO(path.read_text())))
        if not rows or rows[0][0] != "label":
            raise ContractError("dataset CSV must start with header label,v0,...")
        body = [r for r in rows[1:] if r]
        if not body:
            raise ContractError("dataset CSV has no rows")
        labels = np.array([int(r[0]) for r in body])
        features = np.array([[float(v) for v in r[1:]] for r in body])
        side = _sidecar(path)
        if side.exists():
            meta = json.loads(side.read_text())
            names, seed = meta["label_names"], int(meta.get("split_seed", 0))
        else:
            names, seed = [str(i) for i in range(labels.max() + 1)], 0
        return cls(features, labels, names, seed)


def _sidecar(path: Path) -> Path:
    return path.with_suffix(".json")


# -- zeroing ------------------------------------------------------------------


def zero_baseline(frame: Frame, baseline: Frame) -> np.ndarray:
    """Signed deviation ``baseline - frame``; loading gives positive values."""
    if frame.k != baseline.k:
        raise ContractError(f"frame has {frame.k} taxels, baseline {baseline.k}")
    return baseline.array() - frame.array()


def baseline_frame(frames) -> Frame:
    """Rounded per-taxel mean of a window of no-contact frames."""
    frames = list(frames)
    if not frames:
        raise ContractError("need at least one frame")
    mean = np.mean([f.values for f in frames], axis=0)
    return Frame(frames[-1].seq, frames[-1].t, np.round(mean).astype(int).tolist())


def noise_threshold(frames, k: float = 4.0) -> np.ndarray:
    """Per-taxel activation threshold: ``k`` times the baseline noise std.

    Taxels whose codes never move get a floor of half a count, so a
    single-count change still exceeds the threshold.
    """
    values = np.array([f.values for f in frames], dtype=float)
    return np.maximum(k * values.std(axis=0), 0.5)


# -- classification -----------------------------------------------------------


def train(data: Dataset, params: ForestParams = ForestParams()) -> ForestModel:
    """Fit a forest on a dataset. Single-class data gives a constant model."""
    return train_forest(data.features, data.labels, params, label_names=data.label_names)


def evaluate(model: ForestModel, test: Dataset) -> dict:
    """Accuracy, per-class precision/recall/f1, macro-f1 and confusion.

    Confusion rows are true classes, columns predictions.  Undefined
    precision or recall (no predictions / no members) counts as 0.
    """
    if len(test) == 0:
        raise ContractError("empty test set")
    if test.n_features != model.n_features:
        raise ContractError("model and data disagree on feature count")
    pred = model.predict(test.features)
    return metrics(test.labels, pred, model.n_classes, model.label_names or test.label_names)


def metrics(y_true, y_pred, n_classes: int, label_names=None) -> dict:
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if len(y_true) == 0:
        raise ContractError("empty test set")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    tp = np.diag(cm).astype(float)
    pred_pos = cm.sum(axis=0)
    true_pos = cm.sum(axis=1)
    precision = np.divide(tp, pred_pos, out=np.zeros(n_classes), where=pred_pos > 0)
    recall = np.divide(tp, true_pos, out=np.zeros(n_classes), where=true_pos > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros(n_classes), where=denom > 0)
    present = true_pos > 0
    out = {
        "n": int(len(y_true)),
        "accuracy": float(tp.sum() / len(y_true)),
        "chance": 1.0 / n_classes,
        "precision": precision.tolist(),
        "recall": recall.tolist(),
        "f1": f1.tolist(),
        "macro_f1": float(f1[present].mean()) if present.any() else 0.0,
        "confusion": cm.tolist(),
        "label_names": list(label_names) if label_names is not None else None,
    }
    if n_classes == 2:
        out["binary_f1"] = float(f1[1])
    return out


def confusion_to_csv(result: dict) -> str:
    names = result.get("label_names") or [str(i) for i in range(len(result["confusion"]))]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["true\\pred"] + names)
    for name, row in zip(names, result["confusion"]):
        w.writerow([name, *row])
    return buf.getvalue()


# -- detection ----------------------------------------------------------------


def detect_contact(model: ForestModel, deviations) -> bool:
    """Contact decision of a two-class (0 = free, 1 = contact) forest."""
    return model.predict_one(deviations) == 1


class ForestDetector:
    def __init__(self, model: ForestModel):
        if model.n_classes != 2:
            raise ContractError("contact detector needs a two-class model")
        self.model = model

    def __call__(self, deviations) -> bool:
        return detect_contact(self.model, deviations)


class ThresholdDetector:
    """Fallback rule: contact when any taxel deviation exceeds ``theta``."""

    def __init__(self, theta=0.0):
        self.theta = theta

    def __call__(self, deviations) -> bool:
        return bool(np.any(np.asarray(deviations) > self.theta))


class Debounced:
    """Fires only after ``frames`` consecutive positives from ``detector``.

    Stateful; call ``reset()`` between runs.  A single noise spike on a
    resting array no longer stops the arm, at the price of ``frames - 1``
    frames of extra latency.
    """

    def __init__(self, detector, frames: int = 2):
        if frames < 1:
            raise ContractError("frames must be >= 1")
        self.detector = detector
        self.frames = frames
        self._run = 0

    def reset(self) -> None:
        self._run = 0

    def __call__(self, deviations) -> bool:
        self._run = self._run + 1 if self.detector(deviations) else 0
        return self._run >= self.frames


# -- localization -------------------------------------------------------------


@dataclass(frozen=True)
class ContactEstimate:
    in_contact: bool
    centroid: tuple | None
    active_taxels: frozenset
    total_activation: float


def localize_contact(deviations, layout: SkinLayout, theta=0.0) -> ContactEstimate:
    """Active taxels exceed ``theta``; centroid is activation-weighted."""
    dev = np.asarray(deviations, dtype=float)
    if dev.shape != (len(layout),):
        raise ContractError(f"expected {len(layout)} deviations, got shape {dev.shape}")
    active = dev > np.asarray(theta, dtype=float)
    if not active.any():
        return ContactEstimate(False, None, frozenset(), 0.0)
    w = dev[active]
    c = layout.centers[active]
    centroid = tuple(float(v) for v in (w[:, None] * c).sum(axis=0) / w.sum())
    return ContactEstimate(True, centroid, frozenset(np.flatnonzero(active).tolist()),
                           float(w.sum()))
