"""
Confusion-matrix bookkeeping for segmentation: mIoU, pixel accuracy,
per-class IoU, flat metrics files and multi-seed aggregation.
"""
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ContractError, DimensionError, EmptyEvaluationError, MissingFileError, ParseError

logger = logging.getLogger(__name__)

IGNORE_INDEX = 255


@dataclass
class ConfusionMatrix:
    """Rows are ground truth, columns are predictions."""

    num_classes: int
    counts: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)
        elif self.counts.shape != (self.num_classes, self.num_classes) or (self.counts < 0).any():
            raise ContractError(f"Invalid confusion counts of shape {self.counts.shape}")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accumulate(
        self, pred: np.ndarray, label: np.ndarray, ignore_index: int = IGNORE_INDEX
    ) -> "ConfusionMatrix":
        pred, label = np.asarray(pred), np.asarray(label)
        if pred.shape != label.shape:
            raise DimensionError(f"Prediction shape {pred.shape} != label shape {label.shape}")
        k = self.num_classes
        keep = label != ignore_index
        p, t = pred[keep].astype(np.int64), label[keep].astype(np.int64)
        if p.size and (p.min() < 0 or p.max() >= k):
            raise ContractError(f"Prediction values outside [0, {k})")
        if t.size and (t.min() < 0 or t.max() >= k):
            raise ContractError(f"Label values outside [0, {k}) and not ignore_index {ignore_index}")
        self.counts += np.bincount(t * k + p, minlength=k * k).reshape(k, k)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ContractError(
                f"Cannot merge confusion matrices over {self.num_classes} and {other.num_classes} classes"
            )
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    def recall(self) -> List[Optional[float]]:
        rows = self.counts.sum(axis=1)
        diag = np.diag(self.counts)
        return [float(d / r) if r else None for d, r in zip(diag, rows)]


def accumulate(
    cm: ConfusionMatrix, pred: np.ndarray, label: np.ndarray, ignore_index: int = IGNORE_INDEX
) -> ConfusionMatrix:
    return cm.accumulate(pred, label, ignore_index)


def per_class_iou(cm: ConfusionMatrix) -> List[Optional[float]]:
    diag = np.diag(cm.counts)
    union = cm.counts.sum(axis=1) + cm.counts.sum(axis=0) - diag
    return [float(d / u) if u else None for d, u in zip(diag, union)]


def miou(cm: ConfusionMatrix) -> Tuple[float, List[Optional[float]]]:
    """Mean IoU over classes that occur in truth or prediction."""
    per_class = per_class_iou(cm)
    defined = [v for v in per_class if v is not None]
    if not defined:
        raise EmptyEvaluationError("mIoU undefined: no class occurs in truth or prediction")
    return float(np.mean(defined)), per_class


def pixel_accuracy(cm: ConfusionMatrix) -> float:
    total = cm.total
    if not total:
        raise EmptyEvaluationError("Pixel accuracy undefined: no scored pixels")
    return float(np.trace(cm.counts) / total)


@dataclass
class MetricsReport:
    miou: float
    accuracy: float
    per_class: List[Optional[float]]
    seeds: int = 1
    std: float = 0.0
    per_class_std: List[Optional[float]] = field(default_factory=list)

    @classmethod
    def from_confusion(cls, cm: ConfusionMatrix) -> "MetricsReport":
        value, per_class = miou(cm)
        return cls(miou=value, accuracy=pixel_accuracy(cm), per_class=per_class)


def _pct(value: Optional[float]) -> str:
    return "-" if value is None else f"{100.0 * value:6.2f}"


def format_report(report: MetricsReport, class_names: Optional[Sequence[str]] = None) -> str:
    names = class_names or [f"class{k}" for k in range(len(report.per_class))]
    with_std = report.seeds > 1
    lines = []
    if with_std:
        lines.append(f"mIoU      {_pct(report.miou)} +- {_pct(report.std).strip()}  ({report.seeds} seeds)")
    else:
        lines.append(f"mIoU      {_pct(report.miou)}")
    lines.append(f"accuracy  {_pct(report.accuracy)}")
    lines.append("")
    lines.append("class        IoU(%)")
    for k, name in enumerate(names):
        row = f"{name:<12} {_pct(report.per_class[k])}"
        if with_std and k < len(report.per_class_std) and report.per_class_std[k] is not None:
            row += f" +- {_pct(report.per_class_std[k]).strip()}"
        lines.append(row)
    return "\n".join(lines) + "\n"


def metrics_items(report: MetricsReport) -> Dict[str, str]:
    items = {
        "miou": repr(report.miou),
        "accuracy": repr(report.accuracy),
    }
    for k, value in enumerate(report.per_class):
        items[f"per_class_iou.{k}"] = "nan" if value is None else repr(value)
    items["seeds"] = str(report.seeds)
    items["std"] = repr(report.std)
    for k, value in enumerate(report.per_class_std):
        items[f"per_class_std.{k}"] = "nan" if value is None else repr(value)
    return items


def write_metrics_file(path: Union[str, Path], report: MetricsReport) -> None:
    Path(path).write_text("".join(f"{k}={v}\n" for k, v in metrics_items(report).items()))


def _indexed(items: Mapping[str, str], prefix: str) -> List[Optional[float]]:
    pairs = sorted((int(k[len(prefix) :]), v) for k, v in items.items() if k.startswith(prefix))
    return [None if math.isnan(float(v)) else float(v) for _, v in pairs]


def parse_metrics(items: Mapping[str, str]) -> MetricsReport:
    try:
        per_class = _indexed(items, "per_class_iou.")
        return MetricsReport(
            miou=float(items["miou"]),
            accuracy=float(items["accuracy"]),
            per_class=per_class,
            seeds=int(items.get("seeds", "1")),
            std=float(items.get("std", "0.0")),
            per_class_std=_indexed(items, "per_class_std."),
        )
    except (KeyError, ValueError) as e:
        raise ParseError(f"Malformed metrics: {e}") from e


def read_metrics_file(path: Union[str, Path]) -> MetricsReport:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"No such metrics file: {path}")
    items = {}
    offset = 0
    for raw in path.read_text().splitlines(keepends=True):
        line = raw.strip()
        if line and not line.startswith("#"):
            if "=" not in line:
                raise ParseError(f"{path}: expected key=value, got {line!r}", offset=offset)
            key, value = line.split("=", 1)
            items[key.strip()] = value.strip()
        offset += len(raw.encode())
    return parse_metrics(items)


def _mean_std(values: Sequence[float]) -> Tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), std


def aggregate_runs(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Mean and sample standard deviation over independent runs."""
    if not reports:
        raise EmptyEvaluationError("No runs to aggregate")
    k = max(len(r.per_class) for r in reports)
    mean_miou, std_miou = _mean_std([r.miou for r in reports])
    mean_acc, _ = _mean_std([r.accuracy for r in reports])
    per_class, per_class_std = [], []
    for c in range(k):
        values = [r.per_class[c] for r in reports if c < len(r.per_class) and r.per_class[c] is not None]
        if values:
            m, s = _mean_std(values)
            per_class.append(m)
            per_class_std.append(s)
        else:
            per_class.append(None)
            per_class_std.append(None)
    logger.debug(f"Aggregated {len(reports)} runs: mIoU {mean_miou:.4f} +- {std_miou:.4f}")
    return MetricsReport(
        miou=mean_miou,
        accuracy=mean_acc,
        per_class=per_class,
        seeds=len(reports),
        std=std_miou,
        per_class_std=per_class_std,
    )
