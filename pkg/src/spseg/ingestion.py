"""Turn raw data into AnnotatedDatasets.

Real benchmarks are tiled into fixed-size patches; a synthetic shape
generator provides small datasets with known ground truth for desk-scale
experiments.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
from PIL import Image, ImageSequence

from .core import AnnotatedDataset, DatasetError, ImagePatch, MaskStack, split_dataset

log = logging.getLogger(__name__)

EdgePolicy = Literal["drop_partial", "pad_reflect"]

# Published colour legend of the Dubai aerial imagery set, in class order.
AERIAL_CLASSES = ("building", "land", "road", "vegetation", "water", "unlabeled")
AERIAL_COLOURS = {
    (0x3C, 0x10, 0x98): 0,
    (0x84, 0x29, 0xF6): 1,
    (0x6E, 0xC1, 0xE4): 2,
    (0xFE, 0xDD, 0x3A): 3,
    (0xE2, 0xA9, 0x29): 4,
    (0x9B, 0x9B, 0x9B): 5,
}
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".tif", ".tiff")


@dataclass(frozen=True)
class TilingSpec:
    patch_m: int = 224
    patch_h: int = 224
    stride_m: int = 224
    stride_h: int = 224
    edge_policy: EdgePolicy = "drop_partial"

    def __post_init__(self) -> None:
        if min(self.patch_m, self.patch_h) < 8:
            raise ValueError("patch sizes must be >= 8")
        if min(self.stride_m, self.stride_h) < 1:
            raise ValueError("strides must be >= 1")
        if self.edge_policy not in ("drop_partial", "pad_reflect"):
            raise ValueError(f"unknown edge policy {self.edge_policy!r}")

    @classmethod
    def square(cls, size: int, stride: int | None = None, edge_policy: EdgePolicy = "drop_partial") -> TilingSpec:
        stride = stride or size
        return cls(size, size, stride, stride, edge_policy)


def _n_tiles(length: int, patch: int, stride: int, pad: bool) -> int:
    if pad:
        return max(math.ceil((length - patch) / stride), 0) + 1
    return (length - patch) // stride + 1


def tile_image(image: np.ndarray, mask: MaskStack | None, spec: TilingSpec,
               prefix: str = "img") -> list[tuple[ImagePatch, MaskStack | None]]:
    """Cut an image (and its mask) into patches on the stride grid, row-major."""
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[:, :, None]
    big_m, big_h = img.shape[:2]
    if mask is not None and mask.shape != (big_m, big_h):
        raise ValueError(f"mask shape {mask.shape} does not match image shape {(big_m, big_h)}")
    pad = spec.edge_policy == "pad_reflect"
    if not pad and (big_m < spec.patch_m or big_h < spec.patch_h):
        raise ValueError(f"image {prefix} is {big_m}x{big_h}, smaller than the "
                         f"{spec.patch_m}x{spec.patch_h} patch (edge policy drop_partial)")
    n_m = _n_tiles(big_m, spec.patch_m, spec.stride_m, pad)
    n_h = _n_tiles(big_h, spec.patch_h, spec.stride_h, pad)
    maps = None if mask is None else mask.maps
    if pad:
        need_m = (n_m - 1) * spec.stride_m + spec.patch_m - big_m
        need_h = (n_h - 1) * spec.stride_h + spec.patch_h - big_h
        img = np.pad(img, ((0, need_m), (0, need_h), (0, 0)), mode="reflect")
        if maps is not None:
            maps = np.pad(maps, ((0, 0), (0, need_m), (0, need_h)), mode="reflect")

    out = []
    for r in range(n_m):
        for c in range(n_h):
            m0, h0 = r * spec.stride_m, c * spec.stride_h
            crop = img[m0:m0 + spec.patch_m, h0:h0 + spec.patch_h]
            patch = ImagePatch(f"{prefix}_r{r:02d}c{c:02d}", crop)
            mpatch = None
            if maps is not None:
                mpatch = MaskStack(maps[:, m0:m0 + spec.patch_m, h0:h0 + spec.patch_h], mask.mode)
            out.append((patch, mpatch))
    return out


def _read_rgb(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def decode_colour_mask(rgb: np.ndarray, legend: dict[tuple[int, int, int], int], source: str = "") -> np.ndarray:
    """Map flat-colour RGB masks to integer labels by exact colour match."""
    flat = rgb.reshape(-1, 3).astype(np.int64)
    codes = (flat[:, 0] << 16) | (flat[:, 1] << 8) | flat[:, 2]
    lut = {(r << 16) | (g << 8) | b: k for (r, g, b), k in legend.items()}
    uniq, inverse = np.unique(codes, return_inverse=True)
    labels_of_uniq = np.empty(len(uniq), dtype=np.int64)
    for n, code in enumerate(uniq):
        if int(code) not in lut:
            triple = (int(code) >> 16, (int(code) >> 8) & 255, int(code) & 255)
            raise DatasetError(f"unknown mask colour {triple} in {source}")
        labels_of_uniq[n] = lut[int(code)]
    return labels_of_uniq[inverse].reshape(rgb.shape[:2])


def _finish(patches, masks, class_names, mode, meta, train_fraction, seed) -> AnnotatedDataset:
    from .annotation import extract_sp

    sp = {pid: extract_sp(m) for pid, m in masks.items()}
    ds = AnnotatedDataset(patches=tuple(patches), sp=sp, class_names=class_names, mode=mode,
                          gt_masks=masks, meta=meta)
    return split_dataset(ds, train_fraction, seed)


def load_aerial_dubai(root_dir: str | Path, spec: TilingSpec | None = None, *,
                      train_fraction: float = 0.8, seed: int = 0, workers: int = 1) -> AnnotatedDataset:
    """Load the Dubai aerial imagery set (``Tile N/images`` + ``Tile N/masks``)."""
    spec = spec or TilingSpec.square(224)
    root = Path(root_dir)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")
    pairs = []
    for tile in sorted(p for p in root.iterdir() if p.is_dir()):
        img_dir, mask_dir = tile / "images", tile / "masks"
        if not img_dir.is_dir():
            continue
        for img_path in sorted(p for p in img_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES):
            mask_path = mask_dir / (img_path.stem + ".png")
            if not mask_path.exists():
                raise DatasetError(f"missing mask for image {img_path}")
            pairs.append((img_path, mask_path))
    if not pairs:
        raise DatasetError(f"no 'Tile */images' files found under {root}")

    def load(pair):
        img_path, mask_path = pair
        img = _read_rgb(img_path).astype(np.float32) / 255.0
        labels = decode_colour_mask(_read_rgb(mask_path), AERIAL_COLOURS, str(mask_path))
        if labels.shape != img.shape[:2]:
            raise DatasetError(f"mask {mask_path} shape {labels.shape} differs from image {img.shape[:2]}")
        prefix = f"{img_path.parent.parent.name.replace(' ', '_')}_{img_path.stem}"
        return tile_image(img, MaskStack.from_labels(labels, len(AERIAL_CLASSES)), spec, prefix)

    with ThreadPoolExecutor(max_workers=max(workers, 1)) as pool:
        tiled = list(pool.map(load, pairs))
    patches, masks = [], {}
    for tiles in tiled:
        for patch, mask in tiles:
            patches.append(patch)
            masks[patch.id] = mask
    log.info("aerial: %d images -> %d patches", len(pairs), len(patches))
    meta = {"source": "aerial_dubai", "tiling": asdict(spec)}
    return _finish(patches, masks, AERIAL_CLASSES, "multiclass", meta, train_fraction, seed)


def _read_stack(path: Path) -> list[np.ndarray]:
    with Image.open(path) as im:
        return [np.asarray(frame) for frame in ImageSequence.Iterator(im)]


def _em_pairs(root: Path) -> list[tuple[str, np.ndarray, np.ndarray]]:
    """Slices from ``<name>.tif`` + ``<name>_groundtruth.tif`` stacks or images/ + masks/ folders."""
    out = []
    stacks = sorted(p for p in root.iterdir()
                    if p.suffix.lower() in (".tif", ".tiff") and not p.stem.endswith("_groundtruth"))
    for stack in stacks:
        gt = stack.with_name(stack.stem + "_groundtruth" + stack.suffix)
        if not gt.exists():
            raise DatasetError(f"missing ground-truth stack for {stack}")
        imgs, gts = _read_stack(stack), _read_stack(gt)
        if len(imgs) != len(gts):
            raise DatasetError(f"{stack}: {len(imgs)} slices but {len(gts)} mask slices")
        out += [(f"{stack.stem}_s{k:03d}", a, b) for k, (a, b) in enumerate(zip(imgs, gts))]
    img_dir, mask_dir = root / "images", root / "masks"
    if img_dir.is_dir():
        for p in sorted(q for q in img_dir.iterdir() if q.suffix.lower() in IMAGE_SUFFIXES):
            masks = [m for m in mask_dir.glob(p.stem + ".*") if m.suffix.lower() in IMAGE_SUFFIXES]
            if not masks:
                raise DatasetError(f"missing mask for image {p}")
            with Image.open(p) as a, Image.open(masks[0]) as b:
                out.append((p.stem, np.asarray(a.convert("L")), np.asarray(b.convert("L"))))
    return out


def load_electron_microscopy(root_dir: str | Path, spec: TilingSpec | None = None, *,
                             train_fraction: float = 0.8, seed: int = 0) -> AnnotatedDataset:
    """Load the EPFL mitochondria slices as a binary dataset of 256x256 patches."""
    spec = spec or TilingSpec.square(256)
    root = Path(root_dir)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")
    slices = _em_pairs(root)
    if not slices:
        raise DatasetError(f"no microscopy slices found under {root}")
    patches, masks = [], {}
    for name, img, gt in slices:
        if img.ndim == 3:
            img = img[..., 0]
        if gt.ndim == 3:
            gt = gt[..., 0]
        bad = ~np.isin(gt, (0, 255))
        if bad.any():
            raise DatasetError(f"mask {name} has values outside {{0, 255}}: {np.unique(gt[bad])[:5].tolist()}")
        scale = 65535.0 if img.dtype == np.uint16 else 255.0
        img = img.astype(np.float32) / scale
        mask = MaskStack((gt == 255).astype(np.uint8)[None], "binary")
        for patch, mpatch in tile_image(img, mask, spec, name):
            patches.append(patch)
            masks[patch.id] = mpatch
    log.info("microscopy: %d slices -> %d patches", len(slices), len(patches))
    meta = {"source": "electron_microscopy", "tiling": asdict(spec)}
    return _finish(patches, masks, ("mitochondria",), "binary", meta, train_fraction, seed)


# -- synthetic shapes --------------------------------------------------------

PALETTE = np.array([
    [0.30, 0.45, 0.30],
    [0.80, 0.30, 0.25],
    [0.25, 0.35, 0.80],
    [0.85, 0.80, 0.30],
    [0.60, 0.30, 0.75],
    [0.30, 0.75, 0.75],
])


@dataclass(frozen=True)
class SyntheticSpec:
    """Random discs and rectangles over a background.

    ``n_classes`` counts the background in multiclass mode. In binary mode
    there is one foreground class and ``imbalance_ratio`` caps each image's
    foreground fraction.
    """

    n_images: int = 100
    m: int = 64
    h: int = 64
    n_classes: int = 3
    mode: Literal["multiclass", "binary"] = "multiclass"
    radius_range: tuple[int, int] = (8, 18)
    count_range: tuple[int, int] = (1, 2)
    imbalance_ratio: float | None = None
    noise_std: float = 0.1
    brightness_jitter: float = 0.1
    channels: int | None = None
    train_fraction: float = 0.8
    max_retries: int = 200
    seed: int = 0
    class_names: tuple[str, ...] = field(default=())

    def __post_init__(self) -> None:
        if self.mode == "multiclass" and self.n_classes < 2:
            raise ValueError("multiclass synthetic data needs n_classes >= 2")
        if min(self.m, self.h) < 16:
            raise ValueError("synthetic images must be at least 16x16")
        if self.n_images < 1:
            raise ValueError("n_images must be >= 1")
        lo, hi = self.radius_range
        if not 1 <= lo <= hi:
            raise ValueError("radius_range must satisfy 1 <= lo <= hi")
        if 2 * hi >= min(self.m, self.h):
            raise ValueError(f"radius up to {hi} does not fit a {self.m}x{self.h} image (need 2*radius < side)")
        if not 0 <= self.count_range[0] <= self.count_range[1]:
            raise ValueError("count_range must satisfy 0 <= lo <= hi")
        if self.imbalance_ratio is not None and not 0 < self.imbalance_ratio <= 1:
            raise ValueError("imbalance_ratio must be in (0, 1]")

    @property
    def n_channels(self) -> int:
        if self.channels is not None:
            return self.channels
        return 1 if self.mode == "binary" else 3

    @property
    def names(self) -> tuple[str, ...]:
        if self.class_names:
            return self.class_names
        if self.mode == "binary":
            return ("foreground",)
        return ("background",) + tuple(f"class{j}" for j in range(1, self.n_classes))


def disc(m: int, h: int, cm: int, ch: int, radius: int) -> np.ndarray:
    rr, cc = np.ogrid[:m, :h]
    return (rr - cm) ** 2 + (cc - ch) ** 2 <= radius ** 2


def rectangle(m: int, h: int, top: int, left: int, height: int, width: int) -> np.ndarray:
    out = np.zeros((m, h), dtype=bool)
    out[max(top, 0):top + height, max(left, 0):left + width] = True
    return out


def _place_shapes(spec: SyntheticSpec, rng: np.random.Generator, n_fg: int) -> np.ndarray:
    labels = np.zeros((spec.m, spec.h), dtype=np.int64)
    budget = math.inf if spec.imbalance_ratio is None else spec.imbalance_ratio * spec.m * spec.h
    used = 0
    lo, hi = spec.radius_range
    for cls in range(1, n_fg + 1):
        count = int(rng.integers(spec.count_range[0], spec.count_range[1] + 1))
        for _ in range(count):
            for _attempt in range(spec.max_retries):
                r = int(rng.integers(lo, hi + 1))
                if rng.random() < 0.5:
                    cm = int(rng.integers(r, spec.m - r))
                    ch = int(rng.integers(r, spec.h - r))
                    shape = disc(spec.m, spec.h, cm, ch, r)
                else:
                    hm, hh = (int(x) for x in rng.integers(r, 2 * r + 1, size=2))
                    top = int(rng.integers(0, spec.m - hm + 1))
                    left = int(rng.integers(0, spec.h - hh + 1))
                    shape = rectangle(spec.m, spec.h, top, left, hm, hh)
                area = int(shape.sum())
                if used + area > budget or (labels[shape] != 0).any():
                    continue
                labels[shape] = cls
                used += area
                break
            else:
                raise DatasetError(f"could not place a class-{cls} shape after {spec.max_retries} tries; "
                                   "loosen radius/count ranges or imbalance_ratio")
    return labels


def _render(labels: np.ndarray, spec: SyntheticSpec, rng: np.random.Generator, n_fg: int) -> np.ndarray:
    ch = spec.n_channels
    if ch == 1:
        levels = np.linspace(0.35, 0.65, n_fg + 1)
        base = levels[labels][..., None]
    else:
        base = PALETTE[labels % len(PALETTE)][..., :ch]
    img = base + rng.uniform(-spec.brightness_jitter, spec.brightness_jitter)
    img = img + rng.normal(0.0, spec.noise_std, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_synthetic(spec: SyntheticSpec) -> AnnotatedDataset:
    """Deterministic shape dataset with masks, SP and a train/test split."""
    from .annotation import extract_sp

    rng = np.random.default_rng(spec.seed)
    n_fg = 1 if spec.mode == "binary" else spec.n_classes - 1
    patches, masks, sp = [], {}, {}
    for k in range(spec.n_images):
        labels = _place_shapes(spec, rng, n_fg)
        pid = f"syn{k:05d}"
        patches.append(ImagePatch(pid, _render(labels, spec, rng, n_fg)))
        if spec.mode == "binary":
            mask = MaskStack((labels > 0).astype(np.uint8)[None], "binary")
        else:
            mask = MaskStack.from_labels(labels, spec.n_classes)
        masks[pid] = mask
        sp[pid] = extract_sp(mask)
    meta = {"source": "synthetic", "synthetic": _jsonable(asdict(spec))}
    ds = AnnotatedDataset(patches=tuple(patches), sp=sp, class_names=spec.names, mode=spec.mode,
                          gt_masks=masks, meta=meta)
    return split_dataset(ds, spec.train_fraction, spec.seed)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def reassemble(tiles: Sequence[ImagePatch], spec: TilingSpec, n_m: int, n_h: int) -> np.ndarray:
    """Stitch non-overlapping row-major tiles back into one image."""
    if (spec.stride_m, spec.stride_h) != (spec.patch_m, spec.patch_h):
        raise ValueError("reassembly needs stride == patch size")
    rows = [np.concatenate([t.pixels for t in tiles[r * n_h:(r + 1) * n_h]], axis=1) for r in range(n_m)]
    return np.concatenate(rows, axis=0)
