import numpy as np
import pytest

from histotriplet.corpus import (
    ArraySlideStore,
    LabeledPatchSet,
    SlideRecord,
    TileRef,
    grid_tile_slide,
)
from histotriplet.sampler import TileCorpus


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_labeled_set(n_per_class, classes, size=8, seed=0):
    """Tiny labeled set with per-class constant-intensity images."""
    rng = np.random.default_rng(seed)
    images, labels, ids = [], [], []
    for c, name in enumerate(classes):
        for i in range(n_per_class):
            img = np.full((size, size, 3), 20 + 25 * c, dtype=np.uint8)
            img += rng.integers(0, 5, img.shape, dtype=np.uint8)
            images.append(img)
            labels.append(name)
            ids.append(f"{name}/{i:04d}")
    return LabeledPatchSet(
        images=np.stack(images),
        labels=labels,
        item_ids=ids,
        provenance="synthetic-fixture",
        class_names=tuple(classes),
    )


@pytest.fixture
def crc_like_dataset():
    """8 classes x 250 items, the shape used throughout the split examples."""
    from histotriplet.corpus import TISSUE_CLASSES

    return make_labeled_set(250, TISSUE_CLASSES, size=4)


def make_slide_corpus(slides_per_subtype=2, side=4096, base_mag=20.0, stride=256):
    """Fixture corpus covering all nine subtypes across three organ sites."""
    from histotriplet.corpus.records import SUBTYPE_TO_ORGAN

    slides = {}
    tiles = {}
    for subtype, organ in sorted(SUBTYPE_TO_ORGAN.items()):
        for k in range(slides_per_subtype):
            sid = f"{subtype}-{k}"
            rec = SlideRecord(
                slide_id=sid,
                organ_site=organ,
                subtype=subtype,
                base_width=side,
                base_height=side,
                base_magnification=base_mag,
                path="",
            )
            slides[sid] = rec
            tiles[sid] = grid_tile_slide(rec, patch_size=128, magnification=20.0, stride=stride)
    return TileCorpus(slides=slides, tiles=tiles)


@pytest.fixture(scope="session")
def nine_subtype_corpus():
    return make_slide_corpus()


def run_texture_smoke(seed, n_per_class=200, epochs=20, n_triplets=384):
    """One scaled end-to-end run: gratings -> 60/40 split -> triplet
    training -> held-out satisfaction -> SVM on a 10% target portion."""
    from histotriplet.corpus import split_source_target
    from histotriplet.model import (
        EncoderConfig,
        TripletLossConfig,
        extract_embeddings,
    )
    from histotriplet.sampler import DistantType, SamplerConfig, generate_manifest
    from histotriplet.synthetic import oriented_grating_dataset
    from histotriplet.trainer import LabeledPatchSource, TrainConfig, train_triplet
    from histotriplet.transfer import SvmGrid, kfold_accuracy, stratified_portion

    dataset = oriented_grating_dataset(n_per_class=n_per_class, seed=seed)
    split = split_source_target(dataset, (0.6, 0.4), seed=seed)
    source = dataset.subset_by_ids(split.source_ids)
    target = dataset.subset_by_ids(split.target_ids)

    manifest = generate_manifest(
        source,
        SamplerConfig(
            counts_per_type={DistantType.DIFFERENT_CLASS_LABEL: n_triplets}, seed=seed
        ),
    )
    encoder, log = train_triplet(
        manifest,
        LabeledPatchSource(source),
        TrainConfig(epochs=epochs, batch_size=32, seed=seed, learning_rate=1e-3),
        EncoderConfig(architecture="small_conv", embedding_dim=128),
        TripletLossConfig(),
    )

    heldout = generate_manifest(
        target,
        SamplerConfig(
            counts_per_type={DistantType.DIFFERENT_CLASS_LABEL: 200}, seed=seed + 1000
        ),
    )
    emb = extract_embeddings(target, encoder, batch_size=64)
    vec = dict(zip(emb.item_ids, emb.vectors))
    satisfied = [
        float(
            np.sum((vec[t.anchor] - vec[t.neighbor]) ** 2)
            < np.sum((vec[t.anchor] - vec[t.distant]) ** 2)
        )
        for t in heldout
    ]
    satisfaction = float(np.mean(satisfied))

    grid = SvmGrid(kernels=("linear", "rbf"), c_values=(1.0, 10.0), gamma_values=("scale",))
    idx = stratified_portion(emb.labels, 0.10, seed)
    accs, _ = kfold_accuracy(
        emb.vectors[idx].astype(np.float64),
        np.asarray(emb.labels)[idx],
        grid,
        k=10,
        seed=seed,
    )
    return {
        "seed": seed,
        "log": log,
        "heldout_satisfaction": satisfaction,
        "svm_mean_accuracy": float(np.mean(accs)),
    }


@pytest.fixture(scope="session")
def smoke_runs():
    """3-seed scaled training runs shared by trainer and acceptance tests."""
    return [run_texture_smoke(seed) for seed in (0, 1, 2)]
