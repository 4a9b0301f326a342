"""Domain types and dataset bookkeeping shared by the rest of the package.

All types are immutable once built: numpy buffers are flagged read-only and
the dataclasses are frozen. Constructors check the invariants that can be
checked locally; invariants that depend on the whole dataset (keypoint
bounds, SP coverage of the train split) are reported by
:func:`validate_dataset`.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Literal, Mapping, Sequence

import numpy as np

Mode = Literal["multiclass", "binary"]
Split = Literal["train", "test"]

MODES = ("multiclass", "binary")
SIMPLEX_TOL = 1e-6
MIN_SIDE = 8
MANIFEST_VERSION = 1


class DatasetError(ValueError):
    """Raised for malformed or unusable datasets."""


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


def _check_mode(mode: str) -> None:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")


@dataclass(frozen=True, eq=False)
class ImagePatch:
    """One image of shape (M, H, ch) with values in [0, 1]."""

    id: str
    pixels: np.ndarray

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[2] not in (1, 3):
            raise ValueError(f"patch {self.id}: pixels must be MxHx1 or MxHx3, got {px.shape}")
        if px.shape[0] < MIN_SIDE or px.shape[1] < MIN_SIDE:
            raise ValueError(f"patch {self.id}: sides must be >= {MIN_SIDE}, got {px.shape[:2]}")
        if not np.issubdtype(px.dtype, np.floating):
            px = px.astype(np.float32)
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise ValueError(f"patch {self.id}: pixel values must be finite and in [0, 1]")
        object.__setattr__(self, "pixels", _frozen(px))

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ImagePatch):
            return NotImplemented
        return (self.id == other.id and self.pixels.dtype == other.pixels.dtype
                and np.array_equal(self.pixels, other.pixels))


@dataclass(frozen=True, eq=False)
class MaskStack:
    """Per-class binary maps of shape (C, M, H).

    In multiclass mode every pixel is one-hot across the class axis. Binary
    mode carries a single foreground channel.
    """

    maps: np.ndarray
    mode: Mode = "multiclass"

    def __post_init__(self) -> None:
        _check_mode(self.mode)
        maps = np.asarray(self.maps)
        if maps.ndim == 2:
            maps = maps[None]
        if maps.ndim != 3:
            raise ValueError(f"maps must be CxMxH, got shape {maps.shape}")
        if not np.isin(maps, (0, 1)).all():
            raise ValueError("mask values must be 0 or 1")
        maps = maps.astype(np.uint8)
        if self.mode == "binary":
            if maps.shape[0] != 1:
                raise ValueError(f"binary masks carry exactly one channel, got {maps.shape[0]}")
        elif not (maps.sum(axis=0) == 1).all():
            raise ValueError("multiclass masks must be one-hot at every pixel")
        object.__setattr__(self, "maps", _frozen(maps))

    @classmethod
    def from_labels(cls, labels: np.ndarray, n_classes: int) -> MaskStack:
        """Build a one-hot stack from an integer label image."""
        labels = np.asarray(labels)
        if labels.min() < 0 or labels.max() >= n_classes:
            raise ValueError(f"labels must lie in [0, {n_classes})")
        maps = (labels[None] == np.arange(n_classes)[:, None, None]).astype(np.uint8)
        return cls(maps, "multiclass")

    @property
    def n_classes(self) -> int:
        return self.maps.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.maps.shape[1], self.maps.shape[2]

    def labels(self) -> np.ndarray:
        """Integer label image (multiclass) or the foreground map (binary)."""
        if self.mode == "binary":
            return self.maps[0].astype(np.int64)
        return self.maps.argmax(axis=0)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, MaskStack):
            return NotImplemented
        return self.mode == other.mode and np.array_equal(self.maps, other.maps)


@dataclass(frozen=True, eq=False)
class ProportionVector:
    """Per-class pixel proportions for one image."""

    values: np.ndarray
    mode: Mode = "multiclass"

    def __post_init__(self) -> None:
        _check_mode(self.mode)
        vals = np.atleast_1d(np.asarray(self.values, dtype=np.float64))
        if vals.ndim != 1:
            raise ValueError("proportions must be a flat vector")
        object.__setattr__(self, "values", _frozen(vals))
        problems = proportion_violations(self)
        if problems:
            raise ValueError("; ".join(problems))

    @classmethod
    def raw(cls, values: Iterable[float], mode: Mode = "multiclass") -> ProportionVector:
        """Build without invariant checks, for untrusted input awaiting validation."""
        _check_mode(mode)
        pv = object.__new__(cls)
        object.__setattr__(pv, "values", _frozen(np.atleast_1d(np.asarray(values, dtype=np.float64))))
        object.__setattr__(pv, "mode", mode)
        return pv

    def __len__(self) -> int:
        return len(self.values)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ProportionVector):
            return NotImplemented
        return self.mode == other.mode and np.array_equal(self.values, other.values)

    def __repr__(self) -> str:
        return f"ProportionVector({self.values.tolist()}, mode={self.mode!r})"


def proportion_violations(pv: ProportionVector) -> list[str]:
    v = pv.values
    out = []
    if len(v) == 0:
        out.append("range: empty proportion vector")
    elif not np.all(np.isfinite(v)) or v.min() < 0.0 or v.max() > 1.0:
        out.append("range: proportions must lie in [0, 1]")
    if pv.mode == "binary" and len(v) != 1:
        out.append("binary: binary mode carries exactly one proportion")
    if pv.mode == "multiclass" and len(v) and abs(float(v.sum()) - 1.0) > SIMPLEX_TOL:
        out.append(f"simplex: proportions sum to {float(v.sum()):.6g}, expected 1")
    return out


@dataclass(frozen=True)
class KeypointAnnotation:
    """Labelled pixels of one class in one image.

    ``points`` holds (row, col, value) triples with value 0 or 1.
    """

    image_id: str
    class_index: int
    points: tuple[tuple[int, int, int], ...]

    def __post_init__(self) -> None:
        pts = tuple(sorted((int(m), int(h), int(v)) for m, h, v in self.points))
        if not pts:
            raise ValueError(f"keypoints for {self.image_id}/class {self.class_index} are empty")
        if len({(m, h) for m, h, _ in pts}) != len(pts):
            raise ValueError(f"duplicate keypoint coordinates in {self.image_id}/class {self.class_index}")
        if any(v not in (0, 1) for _, _, v in pts):
            raise ValueError("keypoint values must be 0 or 1")
        if self.class_index < 0:
            raise ValueError("class_index must be non-negative")
        object.__setattr__(self, "points", pts)

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Rows, cols and values as integer arrays."""
        a = np.asarray(self.points, dtype=np.int64)
        return a[:, 0], a[:, 1], a[:, 2]


@dataclass(frozen=True)
class AnnotatedDataset:
    """Patches plus whatever annotations exist for them."""

    patches: tuple[ImagePatch, ...]
    sp: Mapping[str, ProportionVector]
    class_names: tuple[str, ...]
    mode: Mode = "multiclass"
    split: Mapping[str, Split] = field(default_factory=dict)
    keypoints: tuple[KeypointAnnotation, ...] = ()
    gt_masks: Mapping[str, MaskStack] | None = None
    meta: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self) -> None:
        _check_mode(self.mode)
        object.__setattr__(self, "patches", tuple(self.patches))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        object.__setattr__(self, "keypoints", tuple(self.keypoints))
        ids = [p.id for p in self.patches]
        if len(set(ids)) != len(ids):
            raise DatasetError("patch ids must be unique")

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def ids(self) -> list[str]:
        return [p.id for p in self.patches]

    def ids_in(self, which: Split) -> list[str]:
        return [p.id for p in self.patches if self.split.get(p.id) == which]

    @property
    def train_ids(self) -> list[str]:
        return self.ids_in("train")

    @property
    def test_ids(self) -> list[str]:
        return self.ids_in("test")

    def patch(self, image_id: str) -> ImagePatch:
        return self._index()[image_id]

    def _index(self) -> dict[str, ImagePatch]:
        cache = self.__dict__.get("_patch_index")
        if cache is None:
            cache = {p.id: p for p in self.patches}
            object.__setattr__(self, "_patch_index", cache)
        return cache

    def with_sp(self, sp: Mapping[str, ProportionVector]) -> AnnotatedDataset:
        return replace(self, sp=dict(sp))

    def with_keypoints(self, keypoints: Sequence[KeypointAnnotation]) -> AnnotatedDataset:
        return replace(self, keypoints=tuple(keypoints))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, AnnotatedDataset):
            return NotImplemented
        return (self.patches == other.patches
                and dict(self.sp) == dict(other.sp)
                and self.class_names == other.class_names
                and self.mode == other.mode
                and dict(self.split) == dict(other.split)
                and set(self.keypoints) == set(other.keypoints)
                and (self.gt_masks is None) == (other.gt_masks is None)
                and (self.gt_masks is None or dict(self.gt_masks) == dict(other.gt_masks))
                and dict(self.meta) == dict(other.meta))

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class Violation:
    image_id: str
    rule: str
    detail: str

    def __str__(self) -> str:
        return f"{self.image_id}: [{self.rule}] {self.detail}"


def validate_dataset(ds: AnnotatedDataset, train_fraction: float | None = None) -> list[Violation]:
    """Check every dataset invariant and report the failures.

    Never raises. An empty list means the dataset is well formed. When
    ``train_fraction`` is given the split sizes are checked against it too.
    """
    out: list[Violation] = []
    expected_c = 1 if ds.mode == "binary" else ds.n_classes
    shapes = {p.id: p.shape for p in ds.patches}

    for image_id, pv in ds.sp.items():
        if image_id not in shapes:
            out.append(Violation(image_id, "unknown-id", "SP entry for an image not in the dataset"))
        if pv.mode != ds.mode:
            out.append(Violation(image_id, "mode", f"SP mode {pv.mode} differs from dataset mode {ds.mode}"))
        if len(pv) != expected_c:
            out.append(Violation(image_id, "classes", f"SP has {len(pv)} entries, expected {expected_c}"))
        for msg in proportion_violations(pv):
            rule, _, detail = msg.partition(": ")
            out.append(Violation(image_id, rule, detail))

    for image_id in shapes:
        if image_id not in ds.split:
            out.append(Violation(image_id, "split", "image has no split assignment"))
        elif ds.split[image_id] not in ("train", "test"):
            out.append(Violation(image_id, "split", f"unknown split {ds.split[image_id]!r}"))
    train = set(ds.train_ids)
    for image_id in sorted(train):
        if image_id not in ds.sp:
            out.append(Violation(image_id, "sp-missing", "train image has no SP annotation"))

    if ds.gt_masks is not None:
        for image_id, mask in ds.gt_masks.items():
            if image_id not in shapes:
                out.append(Violation(image_id, "unknown-id", "mask for an image not in the dataset"))
                continue
            if mask.shape != shapes[image_id]:
                out.append(Violation(image_id, "mask-shape", f"mask {mask.shape} vs patch {shapes[image_id]}"))
            if mask.mode != ds.mode or mask.n_classes != expected_c:
                out.append(Violation(image_id, "mask-classes", "mask mode/channel count disagrees with dataset"))

    seen: set[tuple[str, int]] = set()
    for kp in ds.keypoints:
        if kp.image_id not in train:
            out.append(Violation(kp.image_id, "keypoint-split", "keypoints must belong to train images"))
        key = (kp.image_id, kp.class_index)
        if key in seen:
            out.append(Violation(kp.image_id, "keypoint-duplicate", f"class {kp.class_index} annotated twice"))
        seen.add(key)
        if kp.class_index >= expected_c:
            out.append(Violation(kp.image_id, "keypoint-class", f"class {kp.class_index} out of range"))
        if kp.image_id in shapes:
            m_max, h_max = shapes[kp.image_id]
            rows, cols, _ = kp.arrays()
            bad = (rows < 0) | (rows >= m_max) | (cols < 0) | (cols >= h_max)
            if bad.any():
                i = int(np.argmax(bad))
                out.append(Violation(kp.image_id, "keypoint-bounds",
                                     f"point ({rows[i]}, {cols[i]}) outside {m_max}x{h_max}"))
    n_kp_images = len({kp.image_id for kp in ds.keypoints})
    if n_kp_images > len(train):
        out.append(Violation("*", "keypoint-count", "more keypoint images than train images"))

    if train_fraction is not None and shapes:
        n_train = len(train)
        if abs(n_train - train_fraction * len(shapes)) > 1.0:
            out.append(Violation("*", "split-ratio",
                                 f"{n_train}/{len(shapes)} train images, expected fraction {train_fraction}"))
    return out


def split_dataset(ds: AnnotatedDataset, train_fraction: float = 0.8, seed: int = 0) -> AnnotatedDataset:
    """Assign every image to train or test with a seeded shuffle."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    ids = sorted(ds.ids)
    if len(ids) < 2:
        raise DatasetError(f"unsplittable dataset: {len(ids)} image(s), need at least 2")
    n_train = min(max(int(round(train_fraction * len(ids))), 1), len(ids) - 1)
    order = np.random.default_rng(seed).permutation(len(ids))
    train = {ids[i] for i in order[:n_train]}
    split = {i: ("train" if i in train else "test") for i in ds.ids}
    meta = dict(ds.meta)
    meta["split"] = {"train_fraction": train_fraction, "seed": seed}
    return replace(ds, split=split, meta=meta)


# -- file formats ------------------------------------------------------------

def write_sp_csv(path: str | Path, sp: Mapping[str, ProportionVector], class_names: Sequence[str]) -> None:
    """One row per image; values written with full float precision."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", *class_names])
        for image_id in sorted(sp):
            w.writerow([image_id, *(repr(float(x)) for x in sp[image_id].values)])


def read_sp_csv(path: str | Path, mode: Mode = "multiclass") -> tuple[dict[str, ProportionVector], list[str]]:
    """Read an SP file without enforcing invariants (see validate_dataset)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "image_id":
        raise DatasetError(f"{path}: missing 'image_id' header")
    names = rows[0][1:]
    sp = {}
    for line, row in enumerate(rows[1:], start=2):
        if len(row) != len(names) + 1:
            raise DatasetError(f"{path}:{line}: expected {len(names) + 1} fields, got {len(row)}")
        sp[row[0]] = ProportionVector.raw([float(x) for x in row[1:]], mode)
    return sp, names


KEYPOINT_HEADER = ["image_id", "class_index", "row", "col", "value"]


def write_keypoint_csv(path: str | Path, keypoints: Sequence[KeypointAnnotation]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(KEYPOINT_HEADER)
        for kp in sorted(keypoints, key=lambda k: (k.image_id, k.class_index)):
            for m, h, v in kp.points:
                w.writerow([kp.image_id, kp.class_index, m, h, v])


def read_keypoint_csv(path: str | Path) -> list[KeypointAnnotation]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != KEYPOINT_HEADER:
            raise DatasetError(f"{path}: header must be {','.join(KEYPOINT_HEADER)}")
        groups: dict[tuple[str, int], list[tuple[int, int, int]]] = {}
        for row in reader:
            groups.setdefault((row[0], int(row[1])), []).append((int(row[2]), int(row[3]), int(row[4])))
    return [KeypointAnnotation(i, j, tuple(p)) for (i, j), p in groups.items()]


def save_dataset(ds: AnnotatedDataset, out_dir: str | Path) -> Path:
    """Write manifest.json, patches.npz, sp.csv and (if any) keypoints.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    arrays = {f"x/{p.id}": p.pixels for p in ds.patches}
    if ds.gt_masks is not None:
        arrays.update({f"y/{k}": v.maps for k, v in ds.gt_masks.items()})
    np.savez_compressed(out / "patches.npz", **arrays)
    write_sp_csv(out / "sp.csv", ds.sp, ds.class_names)
    files = {"patches": "patches.npz", "sp": "sp.csv"}
    if ds.keypoints:
        write_keypoint_csv(out / "keypoints.csv", ds.keypoints)
        files["keypoints"] = "keypoints.csv"
    manifest = {
        "version": MANIFEST_VERSION,
        "class_names": list(ds.class_names),
        "mode": ds.mode,
        "ids": ds.ids,
        "split": dict(ds.split),
        "has_masks": ds.gt_masks is not None,
        "files": files,
        "meta": dict(ds.meta),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out / "manifest.json"


def load_dataset(path: str | Path, sp_path: str | Path | None = None,
                 keypoint_path: str | Path | None = None) -> AnnotatedDataset:
    """Inverse of :func:`save_dataset`. ``path`` is the manifest or its directory.

    ``sp_path``/``keypoint_path`` override the annotation files named in the
    manifest (e.g. a degraded SP file).
    """
    path = Path(path)
    manifest_path = path / "manifest.json" if path.is_dir() else path
    if not manifest_path.exists():
        raise DatasetError(f"no dataset manifest at {manifest_path}")
    root = manifest_path.parent
    man = json.loads(manifest_path.read_text())
    if man.get("version") != MANIFEST_VERSION:
        raise DatasetError(f"unsupported manifest version {man.get('version')}")
    mode = man["mode"]
    with np.load(root / man["files"]["patches"]) as npz:
        patches = tuple(ImagePatch(i, npz[f"x/{i}"]) for i in man["ids"])
        masks = None
        if man["has_masks"]:
            masks = {i: MaskStack(npz[f"y/{i}"], mode) for i in man["ids"] if f"y/{i}" in npz.files}
    sp, _ = read_sp_csv(sp_path or root / man["files"]["sp"], mode)
    kp_file = keypoint_path or (root / man["files"]["keypoints"] if "keypoints" in man["files"] else None)
    keypoints = read_keypoint_csv(kp_file) if kp_file else []
    return AnnotatedDataset(
        patches=patches,
        sp=sp,
        class_names=tuple(man["class_names"]),
        mode=mode,
        split=man["split"],
        keypoints=tuple(keypoints),
        gt_masks=masks,
        meta=man.get("meta", {}),
    )
