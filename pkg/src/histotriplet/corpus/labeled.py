"""Labeled patch datasets (CRC-style directory trees) and stratified splits."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from ..allocation import largest_remainder_allocation
from ..errors import RecordValidationError
from ..manifests import write_jsonl

# The eight colorectal tissue types, as directory names.
TISSUE_CLASSES = (
    "tumour_epithelium",
    "simple_stroma",
    "complex_stroma",
    "immune_cells",
    "debris",
    "normal_mucosal_glands",
    "adipose_tissue",
    "background",
)


@dataclass
class LabeledPatchSet:
    """Images plus aligned class labels and unique item ids."""

    images: np.ndarray  # (N, H, W, 3) uint8
    labels: list
    item_ids: list
    provenance: str = ""
    class_names: tuple = TISSUE_CLASSES

    def __post_init__(self):
        n = len(self.images)
        if len(self.labels) != n or len(self.item_ids) != n:
            raise RecordValidationError("images, labels, item_ids must align")
        if n and (self.images.ndim != 4 or self.images.shape[3] != 3):
            raise RecordValidationError("images must have shape (N, H, W, 3)")
        bad = sorted({l for l in self.labels} - set(self.class_names))
        if bad:
            raise RecordValidationError(f"unknown class labels: {bad}")
        if len(set(self.item_ids)) != n:
            raise RecordValidationError("item_ids must be unique")
        self._index = {item_id: i for i, item_id in enumerate(self.item_ids)}

    def __len__(self):
        return len(self.images)

    def image_for(self, item_id):
        return self.images[self._index[item_id]]

    def label_for(self, item_id):
        return self.labels[self._index[item_id]]

    def subset(self, indices, provenance_suffix=""):
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledPatchSet(
            images=self.images[idx],
            labels=[self.labels[i] for i in idx],
            item_ids=[self.item_ids[i] for i in idx],
            provenance=self.provenance + provenance_suffix,
            class_names=self.class_names,
        )

    def subset_by_ids(self, item_ids, provenance_suffix=""):
        return self.subset([self._index[i] for i in item_ids], provenance_suffix)


@dataclass
class LoadReport:
    """What was skipped while loading a patch directory."""

    loaded: int = 0
    skipped: list = field(default_factory=list)  # (path, reason)


def center_crop(image, size):
    h, w = image.shape[:2]
    if h < size or w < size:
        raise ValueError(f"image {h}x{w} smaller than crop size {size}")
    oy = (h - size) // 2
    ox = (w - size) // 2
    return image[oy : oy + size, ox : ox + size]


def random_crop(image, size, rng):
    h, w = image.shape[:2]
    if h < size or w < size:
        raise ValueError(f"image {h}x{w} smaller than crop size {size}")
    oy = int(rng.integers(0, h - size + 1))
    ox = int(rng.integers(0, w - size + 1))
    return image[oy : oy + size, ox : ox + size]


def load_labeled_patches(
    root,
    crop="center",
    patch_size=128,
    class_names=TISSUE_CLASSES,
    rng=None,
    provenance=None,
):
    """Load a directory tree with one subdirectory per class label.

    Directories outside `class_names` are a validation error;
    class_names=None accepts whatever classes the tree defines. Images
    are cropped to patch_size x patch_size; smaller images are skipped
    and counted in the returned LoadReport. Item order is deterministic
    (sorted by path).
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"labeled patch root {root} does not exist")
    if crop not in ("center", "random"):
        raise ValueError(f"unknown crop policy {crop!r}")
    if crop == "random" and rng is None:
        rng = np.random.default_rng(0)

    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if class_names is None:
        class_names = tuple(p.name for p in class_dirs)
    unknown = [p.name for p in class_dirs if p.name not in class_names]
    if unknown:
        raise RecordValidationError(
            f"unknown class directories under {root}: {unknown}"
        )

    images, labels, item_ids = [], [], []
    report = LoadReport()
    for class_dir in class_dirs:
        for img_path in sorted(class_dir.iterdir()):
            if not img_path.is_file():
                continue
            try:
                with Image.open(img_path) as img:
                    arr = np.asarray(img.convert("RGB"), dtype=np.uint8)
            except OSError as exc:
                report.skipped.append((str(img_path), f"unreadable: {exc}"))
                continue
            if arr.shape[0] < patch_size or arr.shape[1] < patch_size:
                report.skipped.append(
                    (str(img_path), f"smaller than {patch_size}px")
                )
                continue
            if crop == "center":
                arr = center_crop(arr, patch_size)
            else:
                arr = random_crop(arr, patch_size, rng)
            images.append(arr)
            labels.append(class_dir.name)
            item_ids.append(str(img_path.relative_to(root)))
    report.loaded = len(images)

    stacked = (
        np.stack(images)
        if images
        else np.zeros((0, patch_size, patch_size, 3), dtype=np.uint8)
    )
    dataset = LabeledPatchSet(
        images=stacked,
        labels=labels,
        item_ids=item_ids,
        provenance=provenance if provenance is not None else str(root),
        class_names=tuple(class_names),
    )
    return dataset, report


@dataclass
class DatasetSplit:
    """Disjoint, covering, class-stratified two-way split of item ids."""

    source_ids: list
    target_ids: list
    fractions: tuple = (0.6, 0.4)
    seed: int = 0

    def to_dict(self):
        return {
            "source_ids": list(self.source_ids),
            "target_ids": list(self.target_ids),
            "fractions": list(self.fractions),
            "seed": self.seed,
        }

    def write(self, path):
        return write_jsonl(path, [self.to_dict()])


def split_source_target(dataset: LabeledPatchSet, fractions=(0.6, 0.4), seed=0):
    """Stratified source/target split with exact largest-remainder counts.

    Identical (dataset, seed) always yields an identical split.
    """
    f_src, f_tgt = fractions
    if abs(f_src + f_tgt - 1.0) > 1e-9:
        raise ValueError("fractions must sum to 1")
    if not 0.0 <= f_src <= 1.0:
        raise ValueError("fractions must lie in [0, 1]")

    by_class = {}
    for item_id, label in zip(dataset.item_ids, dataset.labels):
        by_class.setdefault(label, []).append(item_id)

    if 0.0 < f_src < 1.0:
        thin = [c for c, ids in by_class.items() if len(ids) < 2]
        if thin:
            raise RecordValidationError(
                f"classes too small to stratify: {sorted(thin)}"
            )

    rng = np.random.default_rng(seed)
    source_ids, target_ids = [], []
    for label in sorted(by_class):
        ids = list(by_class[label])
        order = rng.permutation(len(ids))
        shuffled = [ids[i] for i in order]
        n = len(ids)
        n_src, _ = largest_remainder_allocation((f_src * n, f_tgt * n), n)
        source_ids.extend(shuffled[:n_src])
        target_ids.extend(shuffled[n_src:])
    return DatasetSplit(
        source_ids=source_ids,
        target_ids=target_ids,
        fractions=tuple(fractions),
        seed=seed,
    )
