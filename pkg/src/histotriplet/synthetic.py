"""Synthetic fixtures: texture datasets, cluster embeddings, toy slides.

These back the scaled end-to-end checks (training smoke runs, eval
harness calibration, projection sanity) and double as a bundled demo
corpus for the CLI.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
from PIL import Image

from .corpus.labeled import LabeledPatchSet
from .corpus.records import SlideRecord
from .embeddings import EmbeddingMatrix

GRATING_CLASSES = ("grating_0", "grating_60", "grating_120")


def oriented_grating_dataset(
    n_per_class=200,
    class_names=GRATING_CLASSES,
    size=128,
    seed=0,
    noise_std=18.0,
) -> LabeledPatchSet:
    """Sinusoidal gratings at per-class orientations, plus pixel noise.

    Orientation is evenly spread over [0, pi); wavelength and phase
    jitter per patch so the classes differ by texture direction, not by
    any single template.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    images, labels, ids = [], [], []
    n_classes = len(class_names)
    for c, name in enumerate(class_names):
        theta = math.pi * c / n_classes
        cs, sn = math.cos(theta), math.sin(theta)
        for i in range(n_per_class):
            wavelength = rng.uniform(8.0, 16.0)
            phase = rng.uniform(0.0, 2 * math.pi)
            wave = np.sin(2 * math.pi * (xx * cs + yy * sn) / wavelength + phase)
            base = 128.0 + 90.0 * wave
            img = base[:, :, None] + rng.normal(0.0, noise_std, (size, size, 3))
            images.append(np.clip(img, 0, 255).astype(np.uint8))
            labels.append(name)
            ids.append(f"{name}/{i:05d}")
    return LabeledPatchSet(
        images=np.stack(images),
        labels=labels,
        item_ids=ids,
        provenance=f"oriented-gratings-seed{seed}",
        class_names=tuple(class_names),
    )


def gaussian_cluster_embeddings(
    n_per_class=100,
    n_classes=8,
    dim=16,
    separation=10.0,
    noise=1.0,
    seed=0,
    class_names=None,
) -> EmbeddingMatrix:
    """Ideal embeddings: one isotropic Gaussian blob per class.

    Class means sit `separation` apart along distinct axes, so with
    separation >> noise the clusters are linearly separable.
    """
    if class_names is None:
        class_names = [f"class_{c}" for c in range(n_classes)]
    if dim < n_classes:
        raise ValueError("dim must be >= n_classes to give each class its own axis")
    rng = np.random.default_rng(seed)
    vectors, labels, ids = [], [], []
    for c, name in enumerate(class_names):
        mean = np.zeros(dim)
        mean[c] = separation
        pts = rng.normal(0.0, noise, (n_per_class, dim)) + mean
        vectors.append(pts)
        labels.extend([name] * n_per_class)
        ids.extend(f"{name}/{i:05d}" for i in range(n_per_class))
    return EmbeddingMatrix(
        vectors=np.concatenate(vectors).astype(np.float32),
        item_ids=ids,
        labels=labels,
    )


def write_labeled_dataset(dataset: LabeledPatchSet, root) -> Path:
    """Materialize a LabeledPatchSet as one PNG directory per class."""
    root = Path(root)
    for img, label, item_id in zip(dataset.images, dataset.labels, dataset.item_ids):
        name = item_id.split("/")[-1]
        out = root / label / f"{name}.png"
        out.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(img).save(out)
    return root


def textured_slide(width, height, seed=0, tissue_fraction=0.6):
    """A toy slide: saturated blotchy 'tissue' over pale glass."""
    rng = np.random.default_rng(seed)
    img = np.full((height, width, 3), 242, dtype=np.float64)
    tissue_cols = int(width * tissue_fraction)
    texture = rng.normal(0.0, 1.0, (height, tissue_cols))
    # cheap smoothing so blotches span many pixels
    for _ in range(2):
        texture = (
            texture
            + np.roll(texture, 7, axis=0)
            + np.roll(texture, -7, axis=0)
            + np.roll(texture, 7, axis=1)
            + np.roll(texture, -7, axis=1)
        ) / 5.0
    level = 150 + 60 * np.tanh(texture)
    img[:, :tissue_cols, 0] = np.clip(level + 40, 0, 255)
    img[:, :tissue_cols, 1] = np.clip(level - 60, 0, 255)
    img[:, :tissue_cols, 2] = np.clip(level, 0, 255)
    return img.astype(np.uint8)


def write_demo_slide_corpus(root, side=1024, base_magnification=20.0):
    """Write a tiny slide corpus (PNG per slide) plus its manifest lines.

    Returns (manifest rows, slide paths); covers three organ sites so all
    four spatial distant types are feasible.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    layout = [
        ("demo-STAD-0", "gastrointestinal", "STAD"),
        ("demo-STAD-1", "gastrointestinal", "STAD"),
        ("demo-COAD-0", "gastrointestinal", "COAD"),
        ("demo-PRAD-0", "prostate", "PRAD"),
        ("demo-LUAD-0", "lung", "LUAD"),
    ]
    rows = []
    for k, (slide_id, organ, subtype) in enumerate(layout):
        arr = textured_slide(side, side, seed=k, tissue_fraction=1.0)
        path = root / f"{slide_id}.png"
        Image.fromarray(arr).save(path)
        rows.append(
            {
                "slide_id": slide_id,
                "organ_site": organ,
                "subtype": subtype,
                "base_width": side,
                "base_height": side,
                "base_magnification": base_magnification,
                "path": str(path),
            }
        )
    return rows


def _purity(assignments, labels):
    total = 0
    for cluster in set(assignments):
        members = [l for a, l in zip(assignments, labels) if a == cluster]
        counts = {}
        for l in members:
            counts[l] = counts.get(l, 0) + 1
        total += max(counts.values())
    return total / len(labels)
