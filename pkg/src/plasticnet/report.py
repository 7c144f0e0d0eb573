"""Per-class evaluation, Many/Medium/Few grouping, and report emission.

Reports serialize to canonical JSON (sorted keys, fixed separators, no
timestamps) so identical runs produce byte-identical files. Group
thresholds follow the long-tailed convention: Many >= 100 training
samples, Medium 20..99, Few < 20.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError

REPORT_VERSION = 1

MANY_MIN = 100
MEDIUM_MIN = 20


def per_class_accuracy(logits: np.ndarray, labels: np.ndarray,
                       num_classes: int) -> np.ndarray:
    """Fraction correct per class; classes absent from the split are NaN."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise InputError(f"labels must lie in [0, {num_classes})")
    preds = np.asarray(logits).argmax(axis=1)
    acc = np.full(num_classes, np.nan)
    for c in range(num_classes):
        mask = labels == c
        if mask.any():
            acc[c] = float((preds[mask] == c).mean())
    return acc


def group_accuracy(per_class: np.ndarray, train_counts: np.ndarray,
                   many_min: int = MANY_MIN, medium_min: int = MEDIUM_MIN
                   ) -> dict[str, float | None]:
    """Unweighted mean accuracy within each frequency bucket.

    Empty buckets (and buckets whose classes are all absent from the test
    split) are reported as None.
    """
    per_class = np.asarray(per_class, dtype=np.float64)
    train_counts = np.asarray(train_counts)
    if per_class.shape != train_counts.shape:
        raise InputError(f"{per_class.shape} accuracies vs {train_counts.shape} counts")
    buckets = {
        "many": train_counts >= many_min,
        "medium": (train_counts >= medium_min) & (train_counts < many_min),
        "few": train_counts < medium_min,
    }
    out: dict[str, float | None] = {}
    for name, mask in buckets.items():
        vals = per_class[mask]
        vals = vals[~np.isnan(vals)]
        out[name] = float(vals.mean()) if vals.size else None
    return out


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    train_accuracy: float
    test_accuracy: float
    test_mean_class_accuracy: float

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "train_accuracy": self.train_accuracy,
            "test_accuracy": self.test_accuracy,
            "test_mean_class_accuracy": self.test_mean_class_accuracy,
        }


@dataclass
class RunReport:
    """Everything one training run produced, ready for serialization."""
    config: dict
    seed: int
    epochs: list[EpochMetrics] = field(default_factory=list)
    events: list[dict] = field(default_factory=list)
    final_per_class: list[float] = field(default_factory=list)
    train_counts: list[int] = field(default_factory=list)
    groups: dict = field(default_factory=dict)
    overall_accuracy: float = 0.0
    mean_class_accuracy: float = 0.0

    @property
    def config_hash(self) -> str:
        canon = json.dumps(self.config, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    def to_dict(self) -> dict:
        return {
            "version": REPORT_VERSION,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "config": self.config,
            "metrics": {
                "per_epoch": [m.to_dict() for m in self.epochs],
                "overall_accuracy": self.overall_accuracy,
                "mean_class_accuracy": self.mean_class_accuracy,
                "groups": self.groups,
                "final_per_class": self.final_per_class,
                "train_counts": self.train_counts,
            },
            "events": self.events,
        }

    @classmethod
    def from_dict(cls, blob: dict) -> "RunReport":
        if blob.get("version") != REPORT_VERSION:
            raise InputError(f"unsupported report version {blob.get('version')}")
        metrics = blob["metrics"]
        report = cls(
            config=blob["config"],
            seed=blob["seed"],
            epochs=[EpochMetrics(**m) for m in metrics["per_epoch"]],
            events=blob["events"],
            final_per_class=metrics["final_per_class"],
            train_counts=metrics["train_counts"],
            groups=metrics["groups"],
            overall_accuracy=metrics["overall_accuracy"],
            mean_class_accuracy=metrics["mean_class_accuracy"],
        )
        return report


def emit_report(report: RunReport, path) -> None:
    """Write the canonical JSON form (byte-stable for identical runs)."""
    try:
        with open(path, "w") as fh:
            json.dump(report.to_dict(), fh, sort_keys=True, separators=(",", ":"),
                      allow_nan=True)
            fh.write("\n")
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc}") from exc


def load_report(path) -> RunReport:
    with open(path) as fh:
        return RunReport.from_dict(json.load(fh))


def emit_classwise_csv(report: RunReport, path) -> None:
    """Class-index-sorted per-class accuracy table for plotting."""
    lines = ["class_index,train_count,accuracy"]
    for c, (count, acc) in enumerate(zip(report.train_counts, report.final_per_class)):
        lines.append(f"{c},{count},{repr(float(acc))}")
    try:
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write csv to {path}: {exc}") from exc
