"""Segmentation metrics from dataset-level pixel confusion counts.

Binary datasets are scored as two classes (background, foreground) so the
background's IoU/F1 enter the mean like any other class.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import AnnotatedDataset, MaskStack
from .network import ModelState, default_mask_mode, forward, predict_masks


@dataclass
class ConfusionCounts:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray

    @classmethod
    def zeros(cls, n_classes: int) -> ConfusionCounts:
        z = lambda: np.zeros(n_classes, dtype=np.int64)  # noqa: E731
        return cls(z(), z(), z(), z())

    @property
    def n_classes(self) -> int:
        return len(self.tp)

    @property
    def total(self) -> np.ndarray:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: ConfusionCounts) -> ConfusionCounts:
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ConfusionCounts):
            return NotImplemented
        return all(np.array_equal(getattr(self, k), getattr(other, k)) for k in ("tp", "fp", "fn", "tn"))


def _scored_maps(mask: MaskStack) -> np.ndarray:
    if mask.mode == "binary":
        fg = mask.maps[0].astype(bool)
        return np.stack([~fg, fg])
    return mask.maps.astype(bool)


def accumulate_confusion(pred: MaskStack, truth: MaskStack, acc: ConfusionCounts | None = None) -> ConfusionCounts:
    """Add one image's per-class pixel counts to ``acc`` (returns a new object)."""
    if pred.mode != truth.mode or pred.maps.shape != truth.maps.shape:
        raise ValueError(f"prediction {pred.mode}{pred.maps.shape} and truth "
                         f"{truth.mode}{truth.maps.shape} do not match")
    p, t = _scored_maps(pred), _scored_maps(truth)
    axes = (1, 2)
    counts = ConfusionCounts(
        tp=(p & t).sum(axis=axes), fp=(p & ~t).sum(axis=axes),
        fn=(~p & t).sum(axis=axes), tn=(~p & ~t).sum(axis=axes),
    )
    if acc is None:
        return counts
    if acc.n_classes != counts.n_classes:
        raise ValueError("accumulator class count differs from the masks")
    return acc + counts


def scored_class_names(class_names: Sequence[str], mode: str) -> list[str]:
    return ["background", *class_names] if mode == "binary" else list(class_names)


@dataclass
class MetricsReport:
    mean_iou: float
    per_class_f1: dict[str, float]
    per_class_iou: dict[str, float]
    mean_accuracy: float
    excluded_classes: list[str] = field(default_factory=list)
    undefined_classes: list[str] = field(default_factory=list)
    n_runs: int = 1
    std: dict[str, float] = field(default_factory=dict)
    std_defined: bool = False
    seeds: list[int] = field(default_factory=list)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> MetricsReport:
        return cls(**d)

    def flat(self) -> dict[str, float]:
        """Scalar view used for aggregation: mean_iou, mean_accuracy, f1/<c>, iou/<c>."""
        out = {"mean_iou": self.mean_iou, "mean_accuracy": self.mean_accuracy}
        out.update({f"f1/{k}": v for k, v in self.per_class_f1.items()})
        out.update({f"iou/{k}": v for k, v in self.per_class_iou.items()})
        return out


def compute_metrics(acc: ConfusionCounts, excluded: Sequence[int] = (),
                    class_names: Sequence[str] | None = None) -> MetricsReport:
    """IoU and F1 per class, their unweighted means, and overall pixel accuracy.

    ``class_names`` label the scored classes (background first in binary
    mode). Excluded classes drop out of the IoU mean and F1 table but still
    count toward accuracy. Classes never present nor predicted are listed as
    undefined and skipped.
    """
    names = list(class_names) if class_names is not None else [str(j) for j in range(acc.n_classes)]
    if len(names) != acc.n_classes:
        raise ValueError(f"{len(names)} class names for {acc.n_classes} classes")
    excluded = set(excluded)
    union = acc.tp + acc.fp + acc.fn
    ious, f1s, undefined = {}, {}, []
    for j, name in enumerate(names):
        if j in excluded:
            continue
        if union[j] == 0:
            undefined.append(name)
            continue
        ious[name] = float(acc.tp[j] / union[j])
        f1s[name] = float(2 * acc.tp[j] / (2 * acc.tp[j] + acc.fp[j] + acc.fn[j]))
    if not ious:
        raise ValueError("no scorable class: every non-excluded class has TP+FP+FN = 0")
    # every pixel is a TP of exactly one class when masks are one-hot
    pixels = int(acc.total[0])
    accuracy = float(acc.tp.sum() / pixels) if pixels else 0.0
    return MetricsReport(
        mean_iou=float(np.mean(list(ious.values()))),
        per_class_f1=f1s,
        per_class_iou=ious,
        mean_accuracy=accuracy,
        excluded_classes=[names[j] for j in sorted(excluded) if j < len(names)],
        undefined_classes=undefined,
    )


def predict_dataset(model: ModelState, ds: AnnotatedDataset, ids: Sequence[str], mask_mode: str | None = None,
                    threshold: float = 0.5, batch_size: int = 16):
    """Yield (image_id, ScoreMaps, predicted MaskStack) in the given order."""
    mode = mask_mode or default_mask_mode(model)
    for s in range(0, len(ids), batch_size):
        chunk = list(ids[s:s + batch_size])
        for image_id, maps in zip(chunk, forward(model, [ds.patch(i) for i in chunk])):
            yield image_id, maps, predict_masks(maps, mode, threshold)


def evaluate_model(model: ModelState, ds: AnnotatedDataset, mask_mode: str | None = None,
                   excluded: Sequence[int] = (), threshold: float = 0.5,
                   ids: Sequence[str] | None = None) -> MetricsReport:
    """Forward the test split, threshold/argmax the maps and score against masks."""
    ids = sorted(ds.test_ids) if ids is None else list(ids)
    if not ids:
        raise ValueError("nothing to evaluate: the test split is empty")
    if ds.gt_masks is None or any(i not in ds.gt_masks for i in ids):
        raise ValueError("evaluation needs ground-truth masks for every test image")
    acc = None
    for image_id, _, pred in predict_dataset(model, ds, ids, mask_mode, threshold):
        acc = accumulate_confusion(pred, ds.gt_masks[image_id], acc)
    report = compute_metrics(acc, excluded, scored_class_names(ds.class_names, ds.mode))
    report.seeds = [model.seed]
    return report


def aggregate_reports(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Mean and sample standard deviation of every metric across runs."""
    if not reports:
        raise ValueError("no reports to aggregate")
    flats = [r.flat() for r in reports]
    keys = list(flats[0])
    if any(list(f) != keys for f in flats):
        raise ValueError("reports do not share the same class structure")
    values = np.array([[f[k] for k in keys] for f in flats])
    mean = values.mean(axis=0)
    n = len(reports)
    std = values.std(axis=0, ddof=1) if n > 1 else np.zeros(len(keys))
    m = dict(zip(keys, mean.tolist()))
    first = reports[0]
    return MetricsReport(
        mean_iou=m["mean_iou"],
        per_class_f1={k: m[f"f1/{k}"] for k in first.per_class_f1},
        per_class_iou={k: m[f"iou/{k}"] for k in first.per_class_iou},
        mean_accuracy=m["mean_accuracy"],
        excluded_classes=list(first.excluded_classes),
        undefined_classes=sorted({c for r in reports for c in r.undefined_classes}),
        n_runs=n,
        std=dict(zip(keys, std.tolist())),
        std_defined=n > 1,
        seeds=[s for r in reports for s in r.seeds],
    )


def write_report(report: MetricsReport, out_dir: str | Path, title: str = "Results",
                 config: dict | None = None) -> tuple[Path, Path]:
    """report.json (full) and report.md (table laid out like the results tables)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    body = {"metrics": report.to_json(), "config": config or {}}
    jpath = out_dir / "report.json"
    jpath.write_text(json.dumps(body, indent=2, sort_keys=True))
    mpath = out_dir / "report.md"
    mpath.write_text(markdown_table({title: report}))
    return jpath, mpath


def _cell(report: MetricsReport, key: str, value: float) -> str:
    if report.std_defined:
        return f"{100 * value:.1f} ± {100 * report.std[key]:.1f}"
    return f"{100 * value:.1f}"


def markdown_table(rows: dict[str, MetricsReport]) -> str:
    """Model | Mean IoU | per-class F1 ... | Mean accuracy, values in percent."""
    first = next(iter(rows.values()))
    classes = list(first.per_class_f1)
    head = ["Model", "Mean IoU", *(f"F1 {c}" for c in classes), "Mean accuracy"]
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for name, r in rows.items():
        cells = [name, _cell(r, "mean_iou", r.mean_iou)]
        cells += [_cell(r, f"f1/{c}", r.per_class_f1.get(c, float("nan"))) for c in classes]
        cells.append(_cell(r, "mean_accuracy", r.mean_accuracy))
        lines.append("| " + " | ".join(cells) + " |")
    notes = []
    if first.excluded_classes:
        notes.append(f"Excluded from Mean IoU/F1: {', '.join(first.excluded_classes)}.")
    if first.undefined_classes:
        notes.append(f"Undefined (absent and never predicted): {', '.join(first.undefined_classes)}.")
    notes.append(f"Runs: {first.n_runs}.")
    return "\n".join(lines) + "\n\n" + " ".join(notes) + "\n"
