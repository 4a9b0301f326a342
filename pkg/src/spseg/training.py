"""Trainers for proportion-only, proportion+keypoint and mask supervision.

All three share one loop: Adam, seeded per-epoch shuffling, early stopping
on a held-out validation loss with the best epoch's weights restored.
"""

from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Literal

import numpy as np
import torch

from .core import AnnotatedDataset, DatasetError
from .network import BackboneConfig, ModelState, build_backbone, global_average_pool, patches_to_tensor, save_checkpoint
from .objectives import LossConfig, loss_sk, loss_sp, loss_total, pixel_cross_entropy

log = logging.getLogger(__name__)

TrainMode = Literal["spss", "spss_plus", "benchmark"]
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    mode: TrainMode = "spss"
    learning_rate: float = 1e-3
    batch_size: int = 16
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    loss_cfg: LossConfig = field(default_factory=LossConfig)
    base_filters: int = 64
    dtype: Literal["float32", "float64"] = "float32"
    val_fraction: float = 0.1
    monitor: Literal["train_holdout", "test"] = "train_holdout"
    prior_init: bool = True

    def __post_init__(self) -> None:
        if self.mode not in ("spss", "spss_plus", "benchmark"):
            raise ValueError(f"unknown training mode {self.mode!r}")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in [0, 1)")
        if self.monitor not in ("train_holdout", "test"):
            raise ValueError(f"unknown monitor {self.monitor!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        if isinstance(d.get("loss_cfg"), dict):
            d["loss_cfg"] = LossConfig(**d["loss_cfg"])
        return cls(**d)


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list, compare=False)
    stopped_epoch: int = 0
    best_epoch: int = 0
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def best_val_loss(self) -> float:
        return self.val_loss[self.best_epoch - 1]

    def to_json(self) -> dict:
        """Everything except wall-clock times, so reruns serialise identically."""
        d = asdict(self)
        d.pop("seconds")
        return d


class EarlyStopping:
    """Tracks the best (lowest) monitored loss; epochs are 1-based."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = float("inf")
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, loss: float) -> bool:
        """Record one epoch; returns True if it is the new best."""
        if loss < self.best:
            self.best, self.best_epoch, self.bad_epochs = loss, epoch, 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


class _Data:
    """Tensors for one subset of the dataset, indexed by position."""

    def __init__(self, ds: AnnotatedDataset, ids: list[str], cfg: TrainConfig, dtype: torch.dtype):
        self.ids = ids
        self.x = patches_to_tensor([ds.patch(i) for i in ids], dtype)
        self.sp = None
        self.masks = None
        self.keypoints: dict[int, list] = {}
        if cfg.mode in ("spss", "spss_plus"):
            self.sp = torch.from_numpy(np.stack([ds.sp[i].values for i in ids])).to(dtype)
        if cfg.mode == "benchmark":
            self.masks = torch.from_numpy(np.stack([ds.gt_masks[i].maps for i in ids]))
        if cfg.mode == "spss_plus":
            pos = {i: k for k, i in enumerate(ids)}
            for kp in ds.keypoints:
                if kp.image_id in pos:
                    self.keypoints.setdefault(pos[kp.image_id], []).append(kp)

    def __len__(self) -> int:
        return len(self.ids)


def _objective(cfg: TrainConfig, binary: bool) -> Callable[[torch.Tensor, torch.Tensor, _Data, np.ndarray], torch.Tensor]:
    eps = cfg.loss_cfg.bce_epsilon

    def spss(logits, maps, data, idx):
        return loss_sp(global_average_pool(maps), data.sp[idx])

    def spss_plus(logits, maps, data, idx):
        lsp = loss_sp(global_average_pool(maps), data.sp[idx])
        preds, kps = {}, []
        for row, k in enumerate(idx):
            for kp in data.keypoints.get(int(k), ()):
                preds[kp.image_id] = maps[row]
                kps.append(kp)
        lsk = loss_sk(preds, kps, eps) if kps else torch.zeros((), dtype=maps.dtype)
        return loss_total(lsp, lsk, cfg.loss_cfg)

    def benchmark(logits, maps, data, idx):
        return pixel_cross_entropy(logits, data.masks[idx], binary)

    return {"spss": spss, "spss_plus": spss_plus, "benchmark": benchmark}[cfg.mode]


def _outputs(model: ModelState, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    logits = model.net.logits(x)
    return logits, model.net.activate(logits)


def _eval_loss(model: ModelState, data: _Data, objective, chunk: int) -> float:
    with torch.no_grad():
        logits = torch.cat([model.net.logits(data.x[s:s + chunk]) for s in range(0, len(data), chunk)])
        maps = model.net.activate(logits)
        return float(objective(logits, maps, data, np.arange(len(data))))


def _check(ds: AnnotatedDataset, cfg: TrainConfig, train_ids: list[str]) -> None:
    if not train_ids:
        raise DatasetError("dataset has no train images")
    if cfg.mode in ("spss", "spss_plus"):
        missing = [i for i in train_ids if i not in ds.sp]
        if missing:
            raise DatasetError(f"{len(missing)} train images lack SP annotations: {missing[:10]}")
    if cfg.mode == "spss_plus":
        if not any(kp.image_id in set(train_ids) for kp in ds.keypoints):
            raise DatasetError("spss_plus needs keypoints on at least one train image; "
                               "use mode 'spss' when only SP annotations exist")
    if cfg.mode == "benchmark":
        masks = ds.gt_masks or {}
        missing = [i for i in train_ids if i not in masks]
        if missing:
            raise DatasetError(f"{len(missing)} train images lack ground-truth masks: {missing[:10]}")


def holdout_split(ds: AnnotatedDataset, cfg: TrainConfig) -> tuple[list[str], list[str]]:
    """(fit ids, validation ids) for early stopping.

    Validation comes from the train split unless ``cfg.monitor == 'test'``.
    Images carrying keypoints are kept for fitting when possible.
    """
    train = sorted(ds.train_ids)
    if cfg.monitor == "test":
        return train, sorted(ds.test_ids)
    n_val = int(round(cfg.val_fraction * len(train)))
    if n_val == 0 or n_val >= len(train):
        return train, []
    keyed = {kp.image_id for kp in ds.keypoints}
    pool = [i for i in train if i not in keyed]
    if len(pool) < n_val:
        pool = train
    rng = np.random.default_rng([cfg.seed, 0x5A17])
    val = set(pool[k] for k in rng.choice(len(pool), size=n_val, replace=False))
    return [i for i in train if i not in val], sorted(val)


def batch_loss(model: ModelState, ds: AnnotatedDataset, cfg: TrainConfig, ids: list[str]) -> torch.Tensor:
    """The training objective on the given images, with gradients attached."""
    data = _Data(ds, ids, cfg, model.config.torch_dtype)
    logits, maps = _outputs(model, data.x)
    return _objective(cfg, model.config.n_out == 1)(logits, maps, data, np.arange(len(data)))


def backbone_config_for(ds: AnnotatedDataset, cfg: TrainConfig) -> BackboneConfig:
    n_out = 1 if ds.mode == "binary" else ds.n_classes
    return BackboneConfig(in_channels=ds.patches[0].channels, n_out=n_out,
                          base_filters=cfg.base_filters, dtype=cfg.dtype)


def class_prior(ds: AnnotatedDataset, cfg: TrainConfig, ids: list[str]) -> np.ndarray | None:
    """Mean class proportion over the fitting images, from whatever supervision the mode uses."""
    if not cfg.prior_init:
        return None
    if cfg.mode == "benchmark":
        return np.mean([ds.gt_masks[i].maps.mean(axis=(1, 2)) for i in ids], axis=0)
    return np.mean([ds.sp[i].values for i in ids], axis=0)


def _fit(ds: AnnotatedDataset, cfg: TrainConfig, model: ModelState | None = None) -> tuple[ModelState, TrainHistory]:
    fit_ids, val_ids = holdout_split(ds, cfg)
    _check(ds, cfg, fit_ids)
    if model is None:
        model = build_backbone(backbone_config_for(ds, cfg), cfg.seed, class_prior(ds, cfg, fit_ids))
    dtype = model.config.torch_dtype
    fit = _Data(ds, fit_ids, cfg, dtype)
    val = _Data(ds, val_ids, cfg, dtype) if val_ids else None
    objective = _objective(cfg, model.config.n_out == 1)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, betas=ADAM_BETAS, eps=ADAM_EPS,
                           foreach=False)
    rng = np.random.default_rng(cfg.seed)
    stopper = EarlyStopping(cfg.patience)
    best_state = copy.deepcopy(model.net.state_dict())
    hist = TrainHistory(seed=cfg.seed, meta={
        "mode": cfg.mode, "adam_betas": list(ADAM_BETAS), "adam_eps": ADAM_EPS,
        "monitor": cfg.monitor if val is not None else "train_loss",
        "n_fit": len(fit), "n_val": 0 if val is None else len(val),
    })
    model.net.train()
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(fit))
        total = 0.0
        for start in range(0, len(fit), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            logits, maps = _outputs(model, fit.x[idx])
            loss = objective(logits, maps, fit, idx)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            model.step += 1
            total += loss.item() * len(idx)
        train_loss = total / len(fit)
        val_loss = _eval_loss(model, val, objective, cfg.batch_size) if val is not None else train_loss
        hist.train_loss.append(train_loss)
        hist.val_loss.append(val_loss)
        hist.seconds.append(time.perf_counter() - t0)
        if stopper.update(epoch, val_loss):
            best_state = copy.deepcopy(model.net.state_dict())
        log.info("%s seed=%d epoch %d train %.5f val %.5f", cfg.mode, cfg.seed, epoch, train_loss, val_loss)
        if stopper.should_stop:
            break
    model.net.load_state_dict(best_state)
    model.net.eval()
    hist.stopped_epoch = len(hist.train_loss)
    hist.best_epoch = stopper.best_epoch
    return model, hist


def train_spss(ds: AnnotatedDataset, cfg: TrainConfig) -> tuple[ModelState, TrainHistory]:
    """Fit the backbone so the GAP of its score maps matches each image's SP."""
    return _fit(ds, replace(cfg, mode="spss"))


def train_spss_plus(ds: AnnotatedDataset, cfg: TrainConfig) -> tuple[ModelState, TrainHistory]:
    """SP loss plus keypoint BCE, mixed by ``cfg.loss_cfg.alpha``."""
    return _fit(ds, replace(cfg, mode="spss_plus"))


def train_benchmark(ds: AnnotatedDataset, cfg: TrainConfig) -> tuple[ModelState, TrainHistory]:
    """Fully supervised baseline: per-pixel cross-entropy against the masks."""
    return _fit(ds, replace(cfg, mode="benchmark"))


TRAINERS = {"spss": train_spss, "spss_plus": train_spss_plus, "benchmark": train_benchmark}


def run_repeated(trainer, ds: AnnotatedDataset, cfg: TrainConfig, n_runs: int = 3) -> list[tuple[ModelState, TrainHistory]]:
    """Independent runs with seeds ``cfg.seed, cfg.seed + 1, ...``."""
    if n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    return [trainer(ds, replace(cfg, seed=cfg.seed + r)) for r in range(n_runs)]


def save_run(run_dir: str | Path, model: ModelState, hist: TrainHistory, cfg: TrainConfig,
             extra_config: dict | None = None) -> Path:
    """checkpoint.pt, history.json, timing.json and config.json in one directory."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, run_dir / "checkpoint.pt", {"train_config": cfg.to_dict()})
    (run_dir / "history.json").write_text(json.dumps(hist.to_json(), indent=2, sort_keys=True))
    (run_dir / "timing.json").write_text(json.dumps({"seconds_per_epoch": hist.seconds}, indent=2))
    resolved = {"train": cfg.to_dict(), "backbone": asdict(model.config), **(extra_config or {})}
    (run_dir / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True))
    return run_dir


def load_history(path: str | Path) -> TrainHistory:
    d = json.loads(Path(path).read_text())
    return TrainHistory(**d)
