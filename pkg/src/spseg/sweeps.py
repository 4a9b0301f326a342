"""SP-degradation sensitivity sweeps.

Each level degrades the training SPs (Gaussian noise or K-means collapse),
retrains SPSS from scratch and scores the test split. Levels persist to
their own directories so an interrupted sweep picks up where it stopped.
"""

from __future__ import annotations

import csv
import json
import logging
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Literal, Sequence

from .annotation import (ClusterDegradeSpec, NoiseSpec, degrade_sp_clustering, degrade_sp_noise_all,
                         write_degrade_sidecar)
from .core import AnnotatedDataset, ProportionVector, read_sp_csv, write_sp_csv
from .evaluation import MetricsReport, aggregate_reports, evaluate_model
from .training import TrainConfig, train_spss

log = logging.getLogger(__name__)

SweepKind = Literal["noise", "cluster"]


def resolve_level(level, n_train: int):
    """Cluster levels may be written relative to the train size: ``N``, ``N/3``."""
    if isinstance(level, str):
        text = level.strip()
        m = re.fullmatch(r"N(?:/(\d+))?", text)
        if m:
            return n_train if m.group(1) is None else max(1, n_train // int(m.group(1)))
        return int(text)
    return level


def severity_order(kind: SweepKind, levels: Sequence) -> tuple:
    """Mildest first: sigma ascending, K descending."""
    return tuple(sorted(levels, reverse=kind == "cluster"))


@dataclass(frozen=True)
class SweepSpec:
    kind: SweepKind
    levels: tuple
    train_cfg: TrainConfig = field(default_factory=TrainConfig)
    n_runs: int = 1
    seed: int = 0
    renorm: str = "softmax_if_noisy"

    def __post_init__(self) -> None:
        if self.kind not in ("noise", "cluster"):
            raise ValueError(f"unknown sweep kind {self.kind!r}")
        if not self.levels:
            raise ValueError("a sweep needs at least one level")
        if self.n_runs < 1:
            raise ValueError("n_runs must be >= 1")
        if self.kind == "noise":
            levels = tuple(float(v) for v in self.levels)
            for v in levels:
                NoiseSpec(sigma=v, renorm=self.renorm)
        else:
            levels = tuple(self.levels)
            for v in levels:
                if not isinstance(v, str) and (int(v) != v or v < 1):
                    raise ValueError(f"cluster levels must be positive integers, got {v!r}")
        if len(set(levels)) != len(levels):
            raise ValueError("sweep levels must be distinct")
        object.__setattr__(self, "levels", levels)

    def resolved_levels(self, n_train: int) -> tuple:
        if self.kind == "noise":
            return severity_order("noise", self.levels)
        ks = tuple(int(resolve_level(v, n_train)) for v in self.levels)
        if len(set(ks)) != len(ks):
            raise ValueError(f"cluster levels {self.levels} collapse to duplicates {ks} for N={n_train}")
        too_big = [k for k in ks if k > n_train]
        if too_big:
            raise ValueError(f"K={too_big} exceeds the {n_train} training images")
        return severity_order("cluster", ks)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "levels": list(self.levels), "n_runs": self.n_runs, "seed": self.seed,
                "renorm": self.renorm, "train": self.train_cfg.to_dict()}


@dataclass
class SweepRow:
    level: float | int
    report: MetricsReport
    seed: int

    @property
    def mean_iou(self) -> float:
        return self.report.mean_iou

    @property
    def std(self) -> float:
        return self.report.std.get("mean_iou", 0.0)


def degrade_train_sp(ds: AnnotatedDataset, spec: SweepSpec, level, seed: int):
    """Degraded SP for the train split plus the NoiseSpec or ClusterDegradeSpec that produced it."""
    train_sp = {i: ds.sp[i] for i in ds.train_ids}
    if spec.kind == "noise":
        dspec = NoiseSpec(sigma=float(level), renorm=spec.renorm, seed=seed)
        return degrade_sp_noise_all(train_sp, dspec), dspec
    dspec = ClusterDegradeSpec(k=int(level), seed=seed)
    return degrade_sp_clustering(train_sp, dspec)[0], dspec


def _level_dir(out_dir: Path, index: int, level) -> Path:
    return out_dir / f"level_{index:02d}_{level}"


def _run_level(ds: AnnotatedDataset, spec: SweepSpec, index: int, level, level_dir: Path | None) -> SweepRow:
    seed = spec.seed + index
    degraded, dspec = degrade_train_sp(ds, spec, level, seed)
    if level_dir is not None:
        level_dir.mkdir(parents=True, exist_ok=True)
        write_sp_csv(level_dir / "sp.csv", degraded, ds.class_names)
        write_degrade_sidecar(level_dir / "sp.json", dspec, source="train split")
    trained = ds.with_sp({**ds.sp, **degraded})
    reports = []
    for r in range(spec.n_runs):
        # distinct seeds across every (level, run) pair
        cfg = replace(spec.train_cfg, mode="spss", seed=seed + r * len(spec.levels))
        model, _ = train_spss(trained, cfg)
        reports.append(evaluate_model(model, trained))
    report = aggregate_reports(reports) if len(reports) > 1 else reports[0]
    row = SweepRow(level, report, seed)
    if level_dir is not None:
        body = {"level": level, "seed": seed, "metrics": report.to_json(), "sweep": spec.to_dict()}
        (level_dir / "report.json").write_text(json.dumps(body, indent=2, sort_keys=True))
    return row


def _load_level(level_dir: Path, spec: SweepSpec, level) -> SweepRow | None:
    path = level_dir / "report.json"
    if not path.exists():
        return None
    body = json.loads(path.read_text())
    if body.get("sweep") != spec.to_dict() or body.get("level") != level:
        return None
    return SweepRow(level, MetricsReport.from_json(body["metrics"]), body["seed"])


def load_level_sp(level_dir: str | Path, mode: str = "multiclass") -> dict[str, ProportionVector]:
    """Degraded SP persisted for one level, for retraining without re-degrading."""
    return read_sp_csv(Path(level_dir) / "sp.csv", mode)[0]


def run_sweep(ds: AnnotatedDataset, spec: SweepSpec, out_dir: str | Path | None = None) -> list[SweepRow]:
    """Degrade, train and evaluate every level, mildest first.

    With ``out_dir`` each finished level is written immediately and reused
    on the next call with the same spec. A failing level leaves the finished
    rows on disk and re-raises.
    """
    if ds.gt_masks is None:
        raise ValueError("sweeps need ground-truth masks to score the test split")
    levels = spec.resolved_levels(len(ds.train_ids))
    out = Path(out_dir) if out_dir is not None else None
    rows: list[SweepRow] = []
    try:
        for index, level in enumerate(levels):
            level_dir = _level_dir(out, index, level) if out is not None else None
            row = _load_level(level_dir, spec, level) if level_dir is not None else None
            if row is not None:
                log.info("sweep level %s already done, reusing", level)
            else:
                log.info("sweep %s level %s", spec.kind, level)
                row = _run_level(ds, spec, index, level, level_dir)
            rows.append(row)
    finally:
        if out is not None and rows:
            write_sweep(rows, spec, out)
    return rows


def write_sweep(rows: Sequence[SweepRow], spec: SweepSpec, out_dir: str | Path) -> None:
    """sweep.csv, sweep.json and plot_data.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["level", "mean_iou", "std", "seed"])
        for row in rows:
            w.writerow([row.level, repr(row.mean_iou), repr(row.std), row.seed])
    body = {"sweep": spec.to_dict(),
            "rows": [{"level": r.level, "seed": r.seed, "metrics": r.report.to_json()} for r in rows]}
    (out / "sweep.json").write_text(json.dumps(body, indent=2, sort_keys=True))
    classes = list(rows[0].report.per_class_f1)
    with open(out / "plot_data.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([spec.kind, "mean_iou_pct", "std_pct", "mean_accuracy_pct", *(f"f1_{c}_pct" for c in classes)])
        for r in rows:
            f1 = [100 * r.report.per_class_f1.get(c, float("nan")) for c in classes]
            w.writerow([r.level, 100 * r.mean_iou, 100 * r.std, 100 * r.report.mean_accuracy, *f1])


def read_sweep_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{"level": float(r["level"]), "mean_iou": float(r["mean_iou"]), "std": float(r["std"]),
                 "seed": int(r["seed"])} for r in csv.DictReader(fh)]


@dataclass(frozen=True)
class TrendResult:
    passed: bool
    violations: tuple[tuple[int, float, float], ...]

    def __bool__(self) -> bool:
        return self.passed


def trend_check(table, tolerance_points: float = 0.0) -> TrendResult:
    """Mean IoU must not rise from one level to the next by more than the tolerance.

    ``table`` is a list of SweepRow (fractions, converted to points) or of
    plain numbers already in points, ordered mildest first. Violations are
    (step index, earlier score, later score) in points.
    """
    scores = [100.0 * t.mean_iou if isinstance(t, SweepRow) else float(t) for t in table]
    bad = tuple((k, scores[k], scores[k + 1]) for k in range(len(scores) - 1)
                if scores[k + 1] - scores[k] > tolerance_points)
    return TrendResult(not bad, bad)
