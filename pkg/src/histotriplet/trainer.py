"""Optimization loops over triplet manifests and labeled sets, with
checkpointing and append-only metric logs.

Batch composition is a pure function of the run seed: data order comes
from a seeded permutation per epoch, never from worker timing.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .corpus.labeled import LabeledPatchSet
from .corpus.records import TileRef
from .corpus.tiling import materialize_patch
from .errors import (
    CheckpointError,
    ContractError,
    DataError,
    NonFiniteLossError,
)
from .model import (
    ClassifierNet,
    Encoder,
    EncoderConfig,
    TripletLossConfig,
    build_encoder,
    cross_entropy_loss,
    images_to_tensor,
    triplet_loss,
)

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class TrainConfig:
    learning_rate: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 32
    epochs: int = 50
    seed: int = 0
    mode: str = "triplet"  # or "cross_entropy"
    augmentation: str = "none"  # or "random_crop_flip"
    checkpoint_every: int = 0  # epochs; 0 = final checkpoint only

    def __post_init__(self):
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ContractError("learning_rate must be nonnegative")
        if self.epochs < 0:
            raise ContractError("epochs must be nonnegative")
        if self.mode not in ("triplet", "cross_entropy"):
            raise ContractError(f"unknown mode {self.mode!r}")
        if self.augmentation not in ("none", "random_crop_flip"):
            raise ContractError(f"unknown augmentation {self.augmentation!r}")


@dataclass
class StepRecord:
    step: int
    loss_sum: float
    loss_mean: float


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    satisfaction_rate: float | None = None  # fraction of zero-hinge triplets


@dataclass
class TrainLog:
    steps: list = field(default_factory=list)
    epochs: list = field(default_factory=list)

    def write(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        records = [("step", s.step, asdict(s)) for s in self.steps]
        records += [("epoch", e.epoch, asdict(e)) for e in self.epochs]
        with open(path, "w", encoding="utf-8") as fh:
            for kind, _, payload in records:
                payload = {"kind": kind, **payload}
                fh.write(json.dumps(payload, sort_keys=True) + "\n")
        return path


class TilePatchSource:
    """Resolves TileRefs through a slide store."""

    def __init__(self, store):
        self.store = store

    def get(self, ref):
        if not isinstance(ref, TileRef):
            raise DataError(f"expected a TileRef, got {type(ref).__name__}")
        return materialize_patch(ref, self.store)


class LabeledPatchSource:
    """Resolves item-id references against a LabeledPatchSet."""

    def __init__(self, dataset: LabeledPatchSet):
        self.dataset = dataset

    def get(self, ref):
        try:
            return self.dataset.image_for(ref)
        except KeyError:
            raise DataError(f"unknown item id {ref!r}") from None


def _fetch(patch_source, ref, triplet_index):
    try:
        return patch_source.get(ref)
    except Exception as exc:
        raise DataError(f"triplet {triplet_index}: {exc}") from exc


def _augment(images, rng):
    """Random horizontal/vertical flips and a 4px reflect-pad random crop."""
    out = []
    pad = 4
    for img in images:
        if rng.integers(2):
            img = img[:, ::-1]
        if rng.integers(2):
            img = img[::-1, :]
        padded = np.pad(img, ((pad, pad), (pad, pad), (0, 0)), mode="reflect")
        oy = int(rng.integers(0, 2 * pad + 1))
        ox = int(rng.integers(0, 2 * pad + 1))
        out.append(padded[oy : oy + img.shape[0], ox : ox + img.shape[1]])
    return np.stack(out)


def steps_per_epoch(n_items, batch_size):
    return math.ceil(n_items / batch_size)


def _check_finite(loss, model, checkpoint_dir, context):
    if torch.isfinite(loss):
        return
    if checkpoint_dir is not None:
        save_checkpoint(Path(checkpoint_dir) / "diagnostic.ckpt", model, {"context": context})
    raise NonFiniteLossError(f"non-finite loss at {context}")


def train_triplet(
    manifest,
    patch_source,
    config: TrainConfig,
    encoder_config: EncoderConfig | None = None,
    loss_config: TripletLossConfig | None = None,
    checkpoint_dir=None,
):
    """Optimize an encoder with the triplet hinge loss over a manifest.

    Runs epochs x ceil(N / batch_size) optimizer steps on the batch-sum
    loss; per-step and per-epoch metrics land in the returned TrainLog.
    """
    if config.mode != "triplet":
        raise ContractError(f"train_triplet called with mode {config.mode!r}")
    manifest = list(manifest)
    if not manifest:
        raise ContractError("manifest is empty")
    encoder_config = encoder_config or EncoderConfig()
    loss_config = loss_config or TripletLossConfig()

    torch.manual_seed(config.seed)
    encoder = build_encoder(encoder_config)
    optimizer = torch.optim.Adam(
        encoder.parameters(),
        lr=config.learning_rate,
        betas=(config.beta1, config.beta2),
    )
    order_rng = np.random.default_rng(config.seed)
    log = TrainLog()
    n = len(manifest)
    step = 0
    encoder.train()

    for epoch in range(1, config.epochs + 1):
        order = order_rng.permutation(n)
        epoch_term_sum = 0.0
        epoch_satisfied = 0
        for start in range(0, n, config.batch_size):
            batch_idx = order[start : start + config.batch_size]
            imgs = {"a": [], "n": [], "d": []}
            for i in batch_idx:
                t = manifest[i]
                imgs["a"].append(_fetch(patch_source, t.anchor, int(i)))
                imgs["n"].append(_fetch(patch_source, t.neighbor, int(i)))
                imgs["d"].append(_fetch(patch_source, t.distant, int(i)))
            stacks = {k: np.stack(v) for k, v in imgs.items()}
            if config.augmentation == "random_crop_flip":
                stacks = {k: _augment(v, order_rng) for k, v in stacks.items()}
            b = len(batch_idx)
            x = images_to_tensor(
                np.concatenate([stacks["a"], stacks["n"], stacks["d"]])
            )
            z = encoder(x)
            loss, terms = triplet_loss(z[:b], z[b : 2 * b], z[2 * b :], loss_config)
            _check_finite(loss, encoder, checkpoint_dir, f"epoch {epoch} step {step + 1}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            step += 1
            with torch.no_grad():
                term_sum = float(terms.sum())
                epoch_term_sum += term_sum
                epoch_satisfied += int((terms == 0).sum())
            log.steps.append(
                StepRecord(step=step, loss_sum=term_sum, loss_mean=term_sum / b)
            )
        log.epochs.append(
            EpochRecord(
                epoch=epoch,
                mean_loss=epoch_term_sum / n,
                satisfaction_rate=epoch_satisfied / n,
            )
        )
        _maybe_checkpoint(encoder, config, encoder_config, loss_config, checkpoint_dir, epoch, step)

    if checkpoint_dir is not None:
        save_checkpoint(
            Path(checkpoint_dir) / "checkpoint_final.ckpt",
            encoder,
            _metadata(config, encoder_config, loss_config, step),
        )
    return encoder, log


def train_supervised(
    dataset: LabeledPatchSet,
    config: TrainConfig,
    encoder_config: EncoderConfig | None = None,
    checkpoint_dir=None,
):
    """Train encoder + softmax head with cross-entropy over labeled patches."""
    if config.mode != "cross_entropy":
        raise ContractError(f"train_supervised called with mode {config.mode!r}")
    if len(dataset) == 0:
        raise ContractError("dataset is empty")
    class_names = sorted(set(dataset.labels))
    if len(class_names) < 2:
        raise ContractError("supervised training needs at least 2 classes")
    encoder_config = encoder_config or EncoderConfig()

    torch.manual_seed(config.seed)
    encoder = build_encoder(encoder_config)
    model = ClassifierNet(encoder, n_classes=len(class_names))
    optimizer = torch.optim.Adam(
        model.parameters(),
        lr=config.learning_rate,
        betas=(config.beta1, config.beta2),
    )
    label_index = {name: i for i, name in enumerate(class_names)}
    targets = np.array([label_index[l] for l in dataset.labels], dtype=np.int64)

    order_rng = np.random.default_rng(config.seed)
    log = TrainLog()
    n = len(dataset)
    step = 0
    model.train()
    for epoch in range(1, config.epochs + 1):
        order = order_rng.permutation(n)
        epoch_loss_sum = 0.0
        for start in range(0, n, config.batch_size):
            batch_idx = order[start : start + config.batch_size]
            images = dataset.images[batch_idx]
            if config.augmentation == "random_crop_flip":
                images = _augment(images, order_rng)
            x = images_to_tensor(images)
            logits = model(x)
            loss = cross_entropy_loss(logits, targets[batch_idx])
            _check_finite(loss, model, checkpoint_dir, f"epoch {epoch} step {step + 1}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            step += 1
            b = len(batch_idx)
            loss_value = loss.item()
            log.steps.append(
                StepRecord(step=step, loss_sum=loss_value * b, loss_mean=loss_value)
            )
            epoch_loss_sum += loss_value * b
        log.epochs.append(EpochRecord(epoch=epoch, mean_loss=epoch_loss_sum / n))
        _maybe_checkpoint(
            model, config, encoder_config, None, checkpoint_dir, epoch, step,
            class_names=class_names,
        )

    if checkpoint_dir is not None:
        save_checkpoint(
            Path(checkpoint_dir) / "checkpoint_final.ckpt",
            model,
            _metadata(config, encoder_config, None, step, class_names=class_names),
        )
    return model, log


def _metadata(config, encoder_config, loss_config, step, class_names=None):
    return {
        "mode": config.mode,
        "architecture": encoder_config.architecture,
        "embedding_dim": encoder_config.embedding_dim,
        "input_shape": list(encoder_config.input_shape),
        "normalize_embeddings": encoder_config.normalize_embeddings,
        "margin": loss_config.margin if loss_config else None,
        "seed": config.seed,
        "step": step,
        "class_names": class_names,
    }


def _maybe_checkpoint(model, config, encoder_config, loss_config, checkpoint_dir, epoch, step, class_names=None):
    if checkpoint_dir is None or config.checkpoint_every <= 0:
        return
    if epoch % config.checkpoint_every:
        return
    save_checkpoint(
        Path(checkpoint_dir) / f"checkpoint_epoch{epoch:04d}.ckpt",
        model,
        _metadata(config, encoder_config, loss_config, step, class_names=class_names),
    )


def save_checkpoint(path, model, metadata=None):
    """Write opaque weights at `path` and metadata + checksum at `path`.json."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), path)
    digest = hashlib.sha256(path.read_bytes()).hexdigest()
    meta = dict(metadata or {})
    if isinstance(model, ClassifierNet):
        enc_cfg = model.encoder.config
        meta.setdefault("kind", "classifier")
        meta.setdefault("n_classes", model.n_classes)
    else:
        enc_cfg = model.config
        meta.setdefault("kind", "encoder")
    meta.update(
        {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "architecture": enc_cfg.architecture,
            "embedding_dim": enc_cfg.embedding_dim,
            "input_shape": list(enc_cfg.input_shape),
            "normalize_embeddings": enc_cfg.normalize_embeddings,
            "sha256": digest,
        }
    )
    with open(_meta_path(path), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    return path


def _meta_path(path):
    return Path(str(path) + ".json")


def load_checkpoint(path):
    """Rebuild the model from a checkpoint; returns (model, metadata).

    The binary's checksum is verified against the metadata before any
    state is loaded, so a corrupt file never yields a half-built model.
    """
    path = Path(path)
    meta_path = _meta_path(path)
    if not path.exists() or not meta_path.exists():
        raise CheckpointError(f"checkpoint {path} or its metadata is missing")
    with open(meta_path, "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    version = meta.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {version} != {CHECKPOINT_FORMAT_VERSION}"
        )
    digest = hashlib.sha256(path.read_bytes()).hexdigest()
    if digest != meta.get("sha256"):
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupt")

    encoder_config = EncoderConfig(
        input_shape=tuple(meta["input_shape"]),
        embedding_dim=meta["embedding_dim"],
        architecture=meta["architecture"],
        normalize_embeddings=meta["normalize_embeddings"],
    )
    encoder = Encoder(encoder_config)
    if meta.get("kind") == "classifier":
        model = ClassifierNet(encoder, n_classes=meta["n_classes"])
    else:
        model = encoder
    state = torch.load(path, map_location="cpu", weights_only=True)
    model.load_state_dict(state)
    model.eval()
    return model, meta
