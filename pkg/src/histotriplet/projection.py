"""2-D manifold projection of embedding matrices (UMAP) and scatter plots.

The projection builds a fuzzy k-nearest-neighbor graph in the embedding
space (per-point bandwidths calibrated so each point's total membership
is log2(k)), symmetrizes it with probabilistic union, and lays the graph
out in 2-D by stochastic gradient descent on the fuzzy cross-entropy,
attracting sampled edges and repelling negative samples.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np
from scipy import sparse
from scipy.optimize import curve_fit
from sklearn.neighbors import NearestNeighbors

from .embeddings import EmbeddingMatrix
from .errors import ContractError


@dataclass
class ProjectionConfig:
    n_neighbors: int = 40
    output_dim: int = 2
    seed: int = 0
    min_dist: float = 0.1
    spread: float = 1.0
    n_epochs: int | None = None  # default: 500 small inputs, 200 large
    learning_rate: float = 1.0
    negative_sample_rate: int = 5
    repulsion_strength: float = 1.0

    def __post_init__(self):
        if self.n_neighbors < 2:
            raise ContractError("n_neighbors must be >= 2")
        if self.output_dim != 2:
            raise ContractError("output_dim must be 2")
        if self.min_dist < 0 or self.spread <= 0:
            raise ContractError("min_dist must be >= 0 and spread > 0")

    def to_metadata(self):
        return {
            "algorithm": "umap",
            "n_neighbors": self.n_neighbors,
            "output_dim": self.output_dim,
            "seed": self.seed,
            "min_dist": self.min_dist,
            "spread": self.spread,
            "n_epochs": self.n_epochs,
            "learning_rate": self.learning_rate,
            "negative_sample_rate": self.negative_sample_rate,
            "repulsion_strength": self.repulsion_strength,
        }


def _knn(x, k):
    nn = NearestNeighbors(n_neighbors=k + 1, algorithm="brute", metric="euclidean")
    nn.fit(x)
    distances, indices = nn.kneighbors(x)
    return indices[:, 1:], distances[:, 1:]  # drop self


def _smooth_knn_bandwidths(distances, n_iter=64, tolerance=1e-5):
    """Per-point (rho, sigma): rho is the distance to the nearest neighbor
    and sigma solves sum_j exp(-max(0, d_ij - rho) / sigma) = log2(k)."""
    n, k = distances.shape
    target = np.log2(k)
    rho = np.zeros(n)
    sigma = np.zeros(n)
    for i in range(n):
        row = distances[i]
        nonzero = row[row > 0.0]
        rho[i] = nonzero.min() if nonzero.size else 0.0
        lo, hi, mid = 0.0, np.inf, 1.0
        for _ in range(n_iter):
            val = np.exp(-np.maximum(row - rho[i], 0.0) / mid).sum()
            if abs(val - target) < tolerance:
                break
            if val > target:
                hi = mid
                mid = (lo + hi) / 2.0
            else:
                lo = mid
                mid = mid * 2.0 if hi == np.inf else (lo + hi) / 2.0
        sigma[i] = mid
        mean_dist = row.mean()
        if mean_dist > 0:
            sigma[i] = max(sigma[i], 1e-3 * mean_dist)
    return rho, sigma


def _fuzzy_graph(x, n_neighbors):
    indices, distances = _knn(x, n_neighbors)
    rho, sigma = _smooth_knn_bandwidths(distances)
    n, k = indices.shape
    rows = np.repeat(np.arange(n), k)
    cols = indices.ravel()
    vals = np.exp(
        -np.maximum(distances - rho[:, None], 0.0) / sigma[:, None]
    ).ravel()
    a = sparse.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    # probabilistic union keeps an edge if either endpoint claims it
    t = a.T.tocsr()
    graph = a + t - a.multiply(t)
    graph.eliminate_zeros()
    return graph.tocoo()


def _fit_output_kernel(min_dist, spread):
    """Fit (1 + a d^(2b))^-1 to the target membership curve."""

    def curve(x, a, b):
        return 1.0 / (1.0 + a * x ** (2 * b))

    xs = np.linspace(0, 3 * spread, 300)
    ys = np.where(xs < min_dist, 1.0, np.exp(-(xs - min_dist) / spread))
    (a, b), _ = curve_fit(curve, xs, ys)
    return float(a), float(b)


def _spectral_init(graph, dim, seed):
    """Eigenvectors of the symmetric normalized Laplacian, scaled to ~[-10, 10]."""
    n = graph.shape[0]
    rng = np.random.default_rng(seed)
    try:
        degrees = np.asarray(graph.sum(axis=1)).ravel()
        inv_sqrt = 1.0 / np.sqrt(np.maximum(degrees, 1e-12))
        d = sparse.diags(inv_sqrt)
        lap = sparse.identity(n) - d @ graph.tocsr() @ d
        if n <= 4096:
            vals, vecs = np.linalg.eigh(lap.toarray())
            order = np.argsort(vals)
            init = vecs[:, order[1 : dim + 1]]
        else:
            vals, vecs = sparse.linalg.eigsh(
                lap, k=dim + 1, which="SM", tol=1e-4, maxiter=n * 5
            )
            order = np.argsort(vals)
            init = vecs[:, order[1 : dim + 1]]
    except Exception:
        return rng.uniform(-10.0, 10.0, (n, dim)).astype(np.float32)
    scale = np.abs(init).max()
    if scale <= 0:
        return rng.uniform(-10.0, 10.0, (n, dim)).astype(np.float32)
    init = init / scale * 10.0
    init = init + rng.normal(0.0, 1e-4, init.shape)
    return init.astype(np.float32)


@numba.njit(cache=False, fastmath=False)
def _clip(val):
    if val > 4.0:
        return 4.0
    if val < -4.0:
        return -4.0
    return val


@numba.njit(cache=False, fastmath=False)
def _next_rand(state):
    x = state[0]
    x ^= x << np.uint64(13)
    x ^= x >> np.uint64(7)
    x ^= x << np.uint64(17)
    state[0] = x
    return x


@numba.njit(cache=False, fastmath=False)
def _optimize_layout(
    embedding,
    head,
    tail,
    n_epochs,
    epochs_per_sample,
    a,
    b,
    seed,
    gamma,
    initial_alpha,
    negative_sample_rate,
):
    n_vertices = embedding.shape[0]
    dim = embedding.shape[1]
    n_edges = head.shape[0]
    epochs_per_negative = epochs_per_sample / negative_sample_rate
    next_sample = epochs_per_sample.copy()
    next_negative = epochs_per_negative.copy()
    state = np.empty(1, dtype=np.uint64)
    state[0] = np.uint64(seed * 2654435761 + 1)

    for epoch in range(n_epochs):
        alpha = initial_alpha * (1.0 - epoch / n_epochs)
        for e in range(n_edges):
            if next_sample[e] > epoch:
                continue
            i = head[e]
            j = tail[e]
            dist_sq = 0.0
            for d in range(dim):
                diff = embedding[i, d] - embedding[j, d]
                dist_sq += diff * diff
            if dist_sq > 0.0:
                coeff = (-2.0 * a * b * dist_sq ** (b - 1.0)) / (
                    a * dist_sq**b + 1.0
                )
            else:
                coeff = 0.0
            for d in range(dim):
                grad = _clip(coeff * (embedding[i, d] - embedding[j, d]))
                embedding[i, d] += grad * alpha
                embedding[j, d] -= grad * alpha
            next_sample[e] += epochs_per_sample[e]

            n_neg = int((epoch - next_negative[e]) / epochs_per_negative[e])
            for _ in range(n_neg):
                k = int(_next_rand(state) % np.uint64(n_vertices))
                if k == i:
                    continue
                dist_sq = 0.0
                for d in range(dim):
                    diff = embedding[i, d] - embedding[k, d]
                    dist_sq += diff * diff
                if dist_sq > 0.0:
                    coeff = (2.0 * gamma * b) / (
                        (0.001 + dist_sq) * (a * dist_sq**b + 1.0)
                    )
                else:
                    coeff = 0.0
                for d in range(dim):
                    if coeff > 0.0:
                        grad = _clip(coeff * (embedding[i, d] - embedding[k, d]))
                    else:
                        grad = 4.0
                    embedding[i, d] += grad * alpha
            next_negative[e] += n_neg * epochs_per_negative[e]


def project_2d(embeddings, config: ProjectionConfig = None) -> np.ndarray:
    """Project rows of an EmbeddingMatrix (or array) to 2-D coordinates.

    Deterministic for a fixed seed; requires more rows than n_neighbors.
    """
    config = config or ProjectionConfig()
    x = embeddings.vectors if isinstance(embeddings, EmbeddingMatrix) else np.asarray(embeddings)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ContractError("embeddings must be a 2-D array")
    n = x.shape[0]
    if n <= config.n_neighbors:
        raise ContractError(
            f"need more rows than n_neighbors: {n} <= {config.n_neighbors}"
        )

    graph = _fuzzy_graph(x, config.n_neighbors)
    n_epochs = config.n_epochs or (500 if n <= 10_000 else 200)

    weights = graph.data.copy()
    # edges too weak to be sampled even once contribute nothing
    weights[weights < weights.max() / n_epochs] = 0.0
    keep = weights > 0.0
    head = graph.row[keep].astype(np.int64)
    tail = graph.col[keep].astype(np.int64)
    weights = weights[keep]
    epochs_per_sample = weights.max() / weights

    a, b = _fit_output_kernel(config.min_dist, config.spread)
    embedding = np.ascontiguousarray(
        _spectral_init(graph, config.output_dim, config.seed), dtype=np.float64
    )
    _optimize_layout(
        embedding,
        head,
        tail,
        int(n_epochs),
        epochs_per_sample.astype(np.float64),
        a,
        b,
        int(config.seed) % (2**31 - 1) + 1,
        float(config.repulsion_strength),
        float(config.learning_rate),
        float(config.negative_sample_rate),
    )
    if not np.isfinite(embedding).all():
        raise ContractError("projection diverged to non-finite coordinates")
    return embedding.astype(np.float32)


DEFAULT_PALETTE = (
    "#1f77b4",
    "#ff7f0e",
    "#2ca02c",
    "#d62728",
    "#9467bd",
    "#8c564b",
    "#e377c2",
    "#7f7f7f",
    "#bcbd22",
    "#17becf",
)


def render_scatter(coords, labels, item_ids, out_path, palette=None, title=None):
    """Write a class-colored scatter PNG plus a (item_id, x, y, label) CSV.

    Returns (image path, csv path). Coordinates round-trip through the
    CSV at 6 significant digits.
    """
    coords = np.asarray(coords)
    labels = list(labels)
    item_ids = list(item_ids)
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise ContractError("coords must have shape (N, 2)")
    if len(labels) != coords.shape[0] or len(item_ids) != coords.shape[0]:
        raise ContractError("labels/item_ids must align with coords")
    if coords.shape[0] == 0:
        raise ContractError("nothing to plot")

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    palette = palette or DEFAULT_PALETTE
    classes = sorted(set(labels))
    colors = {c: palette[i % len(palette)] for i, c in enumerate(classes)}

    fig, ax = plt.subplots(figsize=(7, 6))
    for c in classes:
        mask = np.array([l == c for l in labels])
        ax.scatter(
            coords[mask, 0], coords[mask, 1], s=8, color=colors[c], label=c, alpha=0.8
        )
    ax.legend(loc="best", fontsize=8, markerscale=2)
    ax.set_xlabel("dim 1")
    ax.set_ylabel("dim 2")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)

    csv_path = out_path.with_suffix(".csv")
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["item_id", "x", "y", "label"])
        for item_id, (x, y), label in zip(item_ids, coords, labels):
            writer.writerow([item_id, f"{x:.6g}", f"{y:.6g}", label])
    return out_path, csv_path


def write_projection_metadata(path, config: ProjectionConfig, extra=None):
    payload = config.to_metadata()
    if extra:
        payload.update(extra)
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
    return Path(path)
