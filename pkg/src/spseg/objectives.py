"""Loss functions for proportion- and keypoint-supervised segmentation.

All losses take torch tensors (or anything ``torch.as_tensor`` accepts) and
stay differentiable. Proportion batches are (B, C); score maps are
(C, M, H) per image.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import torch

from .core import KeypointAnnotation, ProportionVector

DEFAULT_EPS = 1e-7


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.5
    bce_epsilon: float = DEFAULT_EPS

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if not 0.0 < self.bce_epsilon < 1e-3:
            raise ValueError(f"bce_epsilon must be in (0, 1e-3), got {self.bce_epsilon}")


def _as_batch(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    if isinstance(x, ProportionVector):
        return torch.from_numpy(np.array(x.values))[None]
    if isinstance(x, Sequence) and x and isinstance(x[0], ProportionVector):
        return torch.from_numpy(np.stack([p.values for p in x]))
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def loss_sp(pred_sp, target_sp) -> torch.Tensor:
    """Mean over the batch of the squared L2 distance between proportion vectors."""
    pred, target = _as_batch(pred_sp), _as_batch(target_sp)
    if pred.ndim == 1:
        pred = pred[None]
    if target.ndim == 1:
        target = target[None]
    if pred.shape != target.shape:
        raise ValueError(f"prediction batch {tuple(pred.shape)} and target batch {tuple(target.shape)} differ")
    if pred.shape[0] == 0:
        raise ValueError("empty batch")
    target = target.to(pred.dtype)
    return ((target - pred) ** 2).sum(dim=1).mean()


def bce_pixel(y_true, y_pred, eps: float = DEFAULT_EPS):
    """Binary cross-entropy with the prediction clipped to [eps, 1 - eps]."""
    if not isinstance(y_pred, torch.Tensor):
        p = min(max(float(y_pred), eps), 1.0 - eps)
        t = float(y_true)
        return -(t * np.log(p) + (1.0 - t) * np.log1p(-p))
    y_true = torch.as_tensor(y_true, dtype=y_pred.dtype)
    p = y_pred.clamp(eps, 1.0 - eps)
    return -(y_true * torch.log(p) + (1.0 - y_true) * torch.log1p(-p))


def loss_sk(pred_maps: Mapping[str, torch.Tensor], keypoints: Sequence[KeypointAnnotation],
            eps: float = DEFAULT_EPS) -> torch.Tensor:
    """Keypoint loss: per annotation, the mean pixel BCE; summed over images and classes."""
    total = None
    for kp in keypoints:
        if kp.image_id not in pred_maps:
            raise KeyError(f"no prediction for keypoint image {kp.image_id!r}")
        maps = pred_maps[kp.image_id]
        if not isinstance(maps, torch.Tensor):
            maps = torch.as_tensor(np.asarray(getattr(maps, "values", maps)))
        if not 0 <= kp.class_index < maps.shape[0]:
            raise IndexError(f"keypoint class {kp.class_index} not among {maps.shape[0]} predicted maps")
        rows, cols, vals = kp.arrays()
        if rows.max() >= maps.shape[1] or cols.max() >= maps.shape[2]:
            raise IndexError(f"keypoints of {kp.image_id!r} fall outside the {tuple(maps.shape[1:])} map")
        picked = maps[kp.class_index, torch.from_numpy(rows), torch.from_numpy(cols)]
        term = bce_pixel(torch.from_numpy(vals), picked, eps).mean()
        total = term if total is None else total + term
    if total is None:
        return torch.zeros((), dtype=torch.float64)
    return total


def loss_total(lsp, lsk, cfg: LossConfig):
    """Convex combination ``alpha * lsp + (1 - alpha) * lsk``."""
    return cfg.alpha * lsp + (1.0 - cfg.alpha) * lsk


def pixel_cross_entropy(logits: torch.Tensor, masks: torch.Tensor, binary: bool) -> torch.Tensor:
    """Supervised per-pixel loss used by the fully supervised benchmark.

    ``masks`` are one-hot (N, C, M, H) or, in binary mode, (N, 1, M, H).
    Computed from logits for numerical stability.
    """
    masks = masks.to(logits.dtype)
    if binary:
        return torch.nn.functional.binary_cross_entropy_with_logits(logits, masks)
    return -(masks * torch.log_softmax(logits, dim=1)).sum(dim=1).mean()
