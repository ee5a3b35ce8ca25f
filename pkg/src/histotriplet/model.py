"""Encoders, the triplet hinge loss, and the cross-entropy baseline head.

The loss on a batch of embedded triplets is

    sum_i max(||f(a_i) - f(n_i)||^2 - ||f(a_i) - f(d_i)||^2 + margin, 0)

i.e. squared Euclidean distances with a hinge at `margin`; the neighbor
is pulled toward the anchor while the distant sample is pushed away until
the margin gap is met.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .embeddings import EmbeddingMatrix
from .errors import ContractError

ARCHITECTURES = ("resnet18", "small_conv")


@dataclass
class EncoderConfig:
    input_shape: tuple = (128, 128, 3)
    embedding_dim: int = 128
    architecture: str = "resnet18"
    normalize_embeddings: bool = False

    def __post_init__(self):
        if self.embedding_dim <= 0:
            raise ContractError("embedding_dim must be positive")
        if self.architecture not in ARCHITECTURES:
            raise ContractError(
                f"unknown architecture {self.architecture!r}; expected one of {ARCHITECTURES}"
            )
        self.input_shape = tuple(self.input_shape)


@dataclass
class TripletLossConfig:
    margin: float = 0.25
    reduction: str = "sum"

    def __post_init__(self):
        if self.margin < 0:
            raise ContractError("margin must be nonnegative")
        if self.reduction not in ("sum", "mean"):
            raise ContractError("reduction must be 'sum' or 'mean'")


class SmallConvEncoder(nn.Module):
    """Three conv blocks + global pooling; the test-scale encoder."""

    def __init__(self, embedding_dim=128, in_channels=3):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(in_channels, 16, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(16, 32, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(32, 64, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.AdaptiveAvgPool2d(1),
        )
        self.projection = nn.Linear(64, embedding_dim)

    def forward(self, x):
        h = self.features(x).flatten(1)
        return self.projection(h)


class Encoder(nn.Module):
    """Backbone plus a linear projection to the embedding space.

    The projection output is the embedding f(x): no activation follows
    it. Optional L2 normalization is available for ablations and is off
    by default.
    """

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        if config.architecture == "small_conv":
            self.backbone = SmallConvEncoder(config.embedding_dim)
        else:
            from torchvision.models import resnet18

            net = resnet18(weights=None)
            net.fc = nn.Linear(net.fc.in_features, config.embedding_dim)
            self.backbone = net

    def forward(self, x):
        z = self.backbone(x)
        if self.config.normalize_embeddings:
            z = z / z.norm(dim=1, keepdim=True).clamp_min(1e-12)
        return z


def build_encoder(config: EncoderConfig, seed=None) -> Encoder:
    if seed is not None:
        torch.manual_seed(int(seed))
    return Encoder(config)


class ClassifierNet(nn.Module):
    """Encoder with a linear softmax head for the cross-entropy baseline."""

    def __init__(self, encoder: Encoder, n_classes: int):
        super().__init__()
        self.encoder = encoder
        self.n_classes = n_classes
        self.head = nn.Linear(encoder.config.embedding_dim, n_classes)

    def forward(self, x):
        return self.head(self.encoder(x))


def triplet_loss(f_a, f_n, f_d, config: TripletLossConfig = None):
    """Hinge loss over embedded triplets.

    Returns (reduced loss, per-triplet terms). Accepts torch tensors
    (differentiable) or array-likes of shape (B, D).
    """
    if config is None:
        config = TripletLossConfig()
    f_a, f_n, f_d = (_as_2d_tensor(f) for f in (f_a, f_n, f_d))
    if not (f_a.shape == f_n.shape == f_d.shape):
        raise ContractError(
            f"embedding shapes differ: {tuple(f_a.shape)}, {tuple(f_n.shape)}, {tuple(f_d.shape)}"
        )
    d_neighbor = ((f_a - f_n) ** 2).sum(dim=1)
    d_distant = ((f_a - f_d) ** 2).sum(dim=1)
    terms = torch.clamp(d_neighbor - d_distant + config.margin, min=0.0)
    loss = terms.sum() if config.reduction == "sum" else terms.mean()
    return loss, terms


def cross_entropy_loss(logits, labels):
    """Mean multiclass negative log-likelihood of softmax outputs."""
    logits = _as_2d_tensor(logits)
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise ContractError("labels must be a vector aligned with logits rows")
    if labels.numel() and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ContractError("label index out of range for the head width")
    log_probs = torch.log_softmax(logits, dim=1)
    return -log_probs.gather(1, labels.unsqueeze(1)).mean()


def _as_2d_tensor(x):
    t = x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x))
    if t.ndim != 2:
        raise ContractError(f"expected a (B, D) array, got shape {tuple(t.shape)}")
    return t


def images_to_tensor(images):
    """uint8 or [0,1] float NHWC images -> float32 NCHW tensor in [0,1]."""
    arr = np.asarray(images)
    if arr.ndim != 4 or arr.shape[3] != 3:
        raise ContractError(f"expected (B, H, W, 3) images, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    else:
        arr = arr.astype(np.float32, copy=False)
        if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
            raise ContractError("float images must lie in [0, 1]")
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def embed_batch(images, encoder: Encoder) -> np.ndarray:
    """Embed a batch of images in inference mode; one row per image."""
    batch = images_to_tensor(images)
    if batch.shape[0] == 0:
        raise ContractError("batch must be nonempty")
    h, w, _ = encoder.config.input_shape
    if batch.shape[2] != h or batch.shape[3] != w:
        raise ContractError(
            f"images are {batch.shape[2]}x{batch.shape[3]}, encoder expects {h}x{w}"
        )
    was_training = encoder.training
    encoder.eval()
    try:
        with torch.no_grad():
            out = encoder(batch)
    finally:
        encoder.train(was_training)
    vectors = out.cpu().numpy().astype(np.float32)
    if not np.isfinite(vectors).all():
        raise ContractError("encoder produced non-finite embeddings")
    return vectors


def extract_embeddings(dataset, encoder: Encoder, batch_size=32) -> EmbeddingMatrix:
    """Embed every item of a LabeledPatchSet, preserving item order."""
    dim = encoder.config.embedding_dim
    if len(dataset) == 0:
        return EmbeddingMatrix(
            vectors=np.zeros((0, dim), dtype=np.float32), item_ids=[], labels=[]
        )
    chunks = []
    for start in range(0, len(dataset), batch_size):
        chunks.append(embed_batch(dataset.images[start : start + batch_size], encoder))
    return EmbeddingMatrix(
        vectors=np.concatenate(chunks, axis=0),
        item_ids=list(dataset.item_ids),
        labels=list(dataset.labels),
    )
