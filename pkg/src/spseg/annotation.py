"""Produce, degrade and sample annotations.

SP vectors come from masks, are corrupted by Gaussian noise or by K-means
collapse for sensitivity studies, and a handful of (dilated) keypoints per
class can be drawn from masks to emulate expert clicks.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Literal, Mapping, Sequence

import numpy as np
from scipy.special import softmax

from .core import KeypointAnnotation, MaskStack, ProportionVector

Renorm = Literal["softmax_always", "softmax_if_noisy", "clip_and_rescale"]


@dataclass(frozen=True)
class NoiseSpec:
    sigma: float = 0.1
    renorm: Renorm = "softmax_if_noisy"
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.sigma <= 1.0:
            raise ValueError(f"sigma must be in [0, 1], got {self.sigma}")
        if self.renorm not in ("softmax_always", "softmax_if_noisy", "clip_and_rescale"):
            raise ValueError(f"unknown renorm mode {self.renorm!r}")


@dataclass(frozen=True)
class ClusterDegradeSpec:
    k: int = 10
    max_iters: int = 300
    tol: float = 1e-6
    max_reseeds: int = 10
    seed: int = 0

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")


def extract_sp(mask: MaskStack) -> ProportionVector:
    """Pixel fraction of each class map."""
    counts = mask.maps.reshape(mask.n_classes, -1).sum(axis=1, dtype=np.int64)
    return ProportionVector(counts / (mask.shape[0] * mask.shape[1]), mask.mode)


def degrade_sp_noise(sp: ProportionVector, spec: NoiseSpec,
                     rng: np.random.Generator | None = None) -> ProportionVector:
    """Add N(0, sigma) per class, then renormalise.

    ``rng`` lets callers stream one generator over many images; otherwise a
    fresh generator is seeded from ``spec.seed``.
    """
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    if spec.sigma == 0 and spec.renorm != "softmax_always":
        return sp
    noisy = sp.values + rng.normal(0.0, spec.sigma, size=len(sp)) if spec.sigma > 0 else sp.values.copy()
    if sp.mode == "binary":
        return ProportionVector(np.clip(noisy, 0.0, 1.0), "binary")
    if spec.renorm == "softmax_always" or (spec.renorm == "softmax_if_noisy" and spec.sigma > 0):
        out = softmax(noisy)
    elif spec.renorm == "softmax_if_noisy":
        out = noisy
    else:
        clipped = np.clip(noisy, 0.0, None)
        total = clipped.sum()
        out = clipped / total if total > 0 else np.full(len(sp), 1.0 / len(sp))
    return ProportionVector(out / out.sum(), "multiclass")


def degrade_sp_noise_all(sp: Mapping[str, ProportionVector], spec: NoiseSpec) -> dict[str, ProportionVector]:
    """Noise every SP with one seeded stream, visiting ids in sorted order."""
    rng = np.random.default_rng(spec.seed)
    return {i: degrade_sp_noise(sp[i], spec, rng) for i in sorted(sp)}


class ClusteringError(RuntimeError):
    pass


def kmeans_plus_plus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """D^2-weighted seeding; falls back to uniform picks when all distances vanish."""
    n = len(x)
    centres = [x[rng.integers(n)]]
    d2 = ((x - centres[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centres.append(x[idx])
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(axis=1))
    return np.array(centres)


def kmeans(x: np.ndarray, k: int, rng: np.random.Generator, max_iters: int = 300,
           tol: float = 1e-6, max_reseeds: int = 10) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd iterations from k-means++ seeds. Returns (labels, centres).

    An emptied cluster gets its centre moved to the point farthest from its
    current centre; after ``max_reseeds`` such moves the run fails.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if k > len(x):
        raise ValueError(f"k={k} exceeds the number of points ({len(x)})")
    centres = kmeans_plus_plus(x, k, rng)
    reseeds = 0
    for _ in range(max_iters):
        d2 = ((x[:, None, :] - centres[None]) ** 2).sum(axis=2)
        labels = d2.argmin(axis=1)
        new = centres.copy()
        for j in range(k):
            members = labels == j
            if members.any():
                new[j] = x[members].mean(axis=0)
                continue
            reseeds += 1
            if reseeds > max_reseeds:
                raise ClusteringError(f"cluster {j} stayed empty after {max_reseeds} re-seeds")
            far = int(d2[np.arange(len(x)), labels].argmax())
            new[j] = x[far]
        shift = np.sqrt(((new - centres) ** 2).sum(axis=1)).max()
        centres = new
        if shift <= tol:
            break
    labels = ((x[:, None, :] - centres[None]) ** 2).sum(axis=2).argmin(axis=1)
    if len(np.unique(labels)) < k:
        raise ClusteringError("k-means ended with an empty cluster")
    return labels, centres


def degrade_sp_clustering(sp_set: Sequence[tuple[str, ProportionVector]] | Mapping[str, ProportionVector],
                          spec: ClusterDegradeSpec) -> tuple[dict[str, ProportionVector], dict[str, int]]:
    """Collapse SPs within K-means clusters to one randomly elected member's SP.

    When ``k`` reaches the number of distinct SP vectors every distinct
    vector is its own cluster and the SPs come back unchanged.
    """
    items = sorted(sp_set.items() if isinstance(sp_set, Mapping) else sp_set, key=lambda t: t[0])
    if len(items) < spec.k:
        raise ValueError(f"k={spec.k} exceeds the number of SP annotations ({len(items)})")
    ids = [i for i, _ in items]
    x = np.stack([pv.values for _, pv in items])
    _, first, inverse = np.unique(x, axis=0, return_index=True, return_inverse=True)
    if spec.k >= len(first):
        order = np.argsort(first)
        relabel = np.empty_like(order)
        relabel[order] = np.arange(len(order))
        return {i: pv for i, pv in items}, {i: int(relabel[c]) for i, c in zip(ids, inverse.ravel())}
    rng = np.random.default_rng(spec.seed)
    labels, _ = kmeans(x, spec.k, rng, spec.max_iters, spec.tol, spec.max_reseeds)
    out: dict[str, ProportionVector] = {}
    for j in range(spec.k):
        members = np.flatnonzero(labels == j)
        donor = items[int(members[rng.integers(len(members))])][1]
        for idx in members:
            out[ids[idx]] = donor
    return {i: out[i] for i in ids}, {i: int(c) for i, c in zip(ids, labels)}


def write_degrade_sidecar(path: str | Path, spec: NoiseSpec | ClusterDegradeSpec, source: str = "") -> None:
    """Provenance record next to a degraded SP file."""
    kind = "noise" if isinstance(spec, NoiseSpec) else "cluster"
    body = {"kind": kind, **asdict(spec), "source": str(source)}
    Path(path).write_text(json.dumps(body, indent=2, sort_keys=True))


def dilate_points(points, radius: int, bounds: tuple[int, int]) -> set[tuple[int, int]]:
    """Union of square (L-inf) balls around each point, clipped to bounds."""
    big_m, big_h = bounds
    out: set[tuple[int, int]] = set()
    for m, h in points:
        if not (0 <= m < big_m and 0 <= h < big_h):
            raise ValueError(f"point ({m}, {h}) outside bounds {bounds}")
        for dm in range(-radius, radius + 1):
            for dh in range(-radius, radius + 1):
                mm, hh = m + dm, h + dh
                if 0 <= mm < big_m and 0 <= hh < big_h:
                    out.add((mm, hh))
    return out


def _grow(region: np.ndarray, n_seeds: int, radius: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    candidates = np.argwhere(region)
    picks = candidates[rng.choice(len(candidates), size=n_seeds, replace=False)]
    grown = dilate_points([tuple(p) for p in picks.tolist()], radius, region.shape)
    return [(m, h) for m, h in sorted(grown) if region[m, h]]


def sample_keypoints(mask: MaskStack, class_indices: Sequence[int], n_seeds: int = 3,
                     dilation_radius: int = 2, seed: int = 0, image_id: str = "",
                     negatives: bool = False) -> list[KeypointAnnotation]:
    """Draw ``n_seeds`` positive pixels per class and grow them inside the class region.

    With ``negatives`` the same number of clicks is also drawn outside the
    region (grown inside the complement) and labelled 0 for that class.
    """
    rng = np.random.default_rng(seed)
    out = []
    for j in class_indices:
        if not 0 <= j < mask.n_classes:
            raise ValueError(f"class {j} not in mask with {mask.n_classes} channels")
        region = mask.maps[j].astype(bool)
        positives = np.argwhere(region)
        if len(positives) == 0:
            raise ValueError(f"class {j} has no positive pixels in image {image_id or '<unnamed>'}")
        if len(positives) < n_seeds:
            raise ValueError(f"class {j} has {len(positives)} positive pixels, fewer than n_seeds={n_seeds}")
        pts = [(m, h, 1) for m, h in _grow(region, n_seeds, dilation_radius, rng)]
        if negatives:
            if int((~region).sum()) < n_seeds:
                raise ValueError(f"class {j} leaves fewer than n_seeds={n_seeds} negative pixels")
            pts += [(m, h, 0) for m, h in _grow(~region, n_seeds, dilation_radius, rng)]
        out.append(KeypointAnnotation(image_id, int(j), tuple(sorted(pts))))
    return out


def sample_dataset_keypoints(masks: Mapping[str, MaskStack], image_ids: Sequence[str],
                             class_indices: Sequence[int], n_seeds: int = 3, dilation_radius: int = 2,
                             seed: int = 0, negatives: bool = False) -> list[KeypointAnnotation]:
    """Keypoints for every listed image, skipping classes too small to seed there.

    Each image gets its own generator derived from ``seed`` and its position,
    so the result does not depend on how the work is scheduled.
    """
    out = []
    for n, image_id in enumerate(sorted(image_ids)):
        mask = masks[image_id]
        size = mask.shape[0] * mask.shape[1]
        present = [j for j in class_indices if n_seeds <= int(mask.maps[j].sum())
                   and (not negatives or size - int(mask.maps[j].sum()) >= n_seeds)]
        if present:
            out += sample_keypoints(mask, present, n_seeds, dilation_radius,
                                    seed=int(np.random.SeedSequence([seed, n]).generate_state(1)[0]),
                                    image_id=image_id, negatives=negatives)
    return out
