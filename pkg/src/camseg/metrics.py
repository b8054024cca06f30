"""Confusion-matrix accumulation and the precision-based aggregates.

AP here is the macro mean of per-class pixel precision; category APs are the
same mean restricted to size (small/medium/large) or frequency
(frequent/common/rare) groups defined by a CategorySpec data file.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .palette import IGNORE_LABEL

__all__ = [
    "ConfusionMatrix",
    "CategorySpec",
    "MetricsReport",
    "MetricsError",
    "per_class_precision",
    "average_precision",
    "category_ap",
    "f1_macro",
    "compute_report",
    "bundled_category_spec_path",
]

SUMMARY_COLUMNS = ("AP", "AP_S", "AP_M", "AP_L", "AP_F", "AP_C", "AP_R")


class MetricsError(ValueError):
    pass


class ConfusionMatrix:
    """K x K integer counts; entry (g, p) = pixels with truth g predicted p."""

    def __init__(self, num_classes: int, counts: np.ndarray | None = None):
        self.num_classes = num_classes
        if counts is None:
            counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        self.counts = np.asarray(counts, dtype=np.int64)
        assert self.counts.shape == (num_classes, num_classes)

    def accumulate(self, gt: np.ndarray, pred: np.ndarray) -> "ConfusionMatrix":
        gt = np.asarray(gt)
        pred = np.asarray(pred)
        if gt.shape != pred.shape:
            raise MetricsError(f"shape mismatch: gt {gt.shape} vs pred {pred.shape}")
        keep = gt != IGNORE_LABEL
        g = gt[keep].astype(np.int64)
        p = pred[keep].astype(np.int64)
        if g.size and (g.max() >= self.num_classes or p.max() >= self.num_classes):
            raise MetricsError("label outside [0, K)")
        k = self.num_classes
        self.counts += np.bincount(g * k + p, minlength=k * k).reshape(k, k)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        self.counts += other.counts
        return self

    def total(self) -> int:
        return int(self.counts.sum())

    def to_csv(self, path, class_names=None) -> None:
        names = list(class_names) if class_names else [str(i) for i in range(self.num_classes)]
        lines = ["gt\\pred," + ",".join(names)]
        for i, row in enumerate(self.counts):
            lines.append(names[i] + "," + ",".join(str(int(v)) for v in row))
        Path(path).write_text("\n".join(lines) + "\n")


def per_class_precision(cm: ConfusionMatrix) -> tuple[np.ndarray, np.ndarray]:
    """Returns (precision percent per class, present mask).

    A class is absent when it is never predicted and has no ground truth
    pixels; absent classes carry NaN.
    """
    counts = cm.counts
    pred_tot = counts.sum(axis=0).astype(np.float64)
    gt_tot = counts.sum(axis=1).astype(np.float64)
    present = (pred_tot > 0) | (gt_tot > 0)
    prec = np.full(cm.num_classes, np.nan)
    with np.errstate(invalid="ignore", divide="ignore"):
        vals = 100.0 * np.diag(counts) / pred_tot
    prec[present] = np.where(pred_tot[present] > 0, vals[present], 0.0)
    return prec, present


def average_precision(precisions: np.ndarray, present: np.ndarray) -> float:
    if not present.any():
        raise MetricsError("no present class to average over")
    return float(np.mean(precisions[present]))


@dataclass(frozen=True)
class CategorySpec:
    classes: tuple[str, ...]
    size: dict[str, tuple[int, ...]]
    frequency: dict[str, tuple[int, ...]]

    def __post_init__(self):
        k = len(self.classes)
        for axis_name, axis in (("size", self.size), ("frequency", self.frequency)):
            merged = sorted(i for group in axis.values() for i in group)
            if merged != list(range(k)):
                raise MetricsError(f"{axis_name} groups must partition 0..{k - 1}, got {merged}")

    @classmethod
    def load(cls, path) -> "CategorySpec":
        raw = json.loads(Path(path).read_text())
        return cls(
            classes=tuple(raw["classes"]),
            size={k: tuple(v) for k, v in raw["size"].items()},
            frequency={k: tuple(v) for k, v in raw["frequency"].items()},
        )


def category_ap(precisions: np.ndarray, present: np.ndarray, spec: CategorySpec) -> dict[str, float]:
    """Six values keyed small/medium/large/frequent/common/rare; NaN when a
    category has no present class (rendered as a dash in reports)."""
    out = {}
    for axis in (spec.size, spec.frequency):
        for name, idxs in axis.items():
            idxs = np.array(idxs, dtype=int)
            sel = idxs[present[idxs]]
            out[name] = float(np.mean(precisions[sel])) if sel.size else math.nan
    return out


def f1_macro(cm: ConfusionMatrix) -> float:
    counts = cm.counts
    tp = np.diag(counts).astype(np.float64)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp
    present = (counts.sum(axis=0) + counts.sum(axis=1)) > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        f1 = 100.0 * 2 * tp / (2 * tp + fp + fn)
    f1 = np.where(2 * tp + fp + fn > 0, f1, 0.0)
    if not present.any():
        raise MetricsError("empty confusion matrix")
    return float(np.mean(f1[present]))


@dataclass
class MetricsReport:
    ap: float
    category: dict[str, float]
    per_class: np.ndarray
    present: np.ndarray
    macro_f1: float
    class_names: tuple[str, ...] = field(default_factory=tuple)

    def summary_row(self) -> list[float]:
        c = self.category
        return [self.ap, c["small"], c["medium"], c["large"], c["frequent"], c["common"], c["rare"]]

    def write_summary_csv(self, path, run_name="run") -> None:
        vals = ",".join("-" if math.isnan(v) else f"{v:.4f}" for v in self.summary_row())
        Path(path).write_text("run," + ",".join(SUMMARY_COLUMNS) + "\n" + f"{run_name},{vals}\n")

    def write_per_class_csv(self, path) -> None:
        names = self.class_names or tuple(str(i) for i in range(len(self.per_class)))
        lines = ["class,precision"]
        for name, v, pres in zip(names, self.per_class, self.present):
            lines.append(f"{name},{'-' if not pres else f'{v:.4f}'}")
        Path(path).write_text("\n".join(lines) + "\n")


def compute_report(cm: ConfusionMatrix, spec: CategorySpec) -> MetricsReport:
    prec, present = per_class_precision(cm)
    return MetricsReport(
        ap=average_precision(prec, present),
        category=category_ap(prec, present, spec),
        per_class=prec,
        present=present,
        macro_f1=f1_macro(cm),
        class_names=spec.classes,
    )


def bundled_category_spec_path(name: str) -> Path:
    p = resources.files("camseg") / "category_specs" / f"{name}.json"
    if not p.is_file():
        raise FileNotFoundError(f"no bundled category spec named {name!r}")
    return Path(str(p))
