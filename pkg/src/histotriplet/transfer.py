"""Few-shot transfer evaluation of frozen embeddings.

The protocol: draw stratified portions of the target data (5/10/25/50/
100%), and on each portion run 10-fold cross-validation of an SVM whose
kernel, C, and gamma are tuned per fold by an inner 3-fold search on the
training side. Cells report mean accuracy (percent) with a 95% normal-
approximation confidence half-width across folds.

Features are standardized per dimension with statistics fit on the
training side of every (inner or outer) split, never on held-out items.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.multiclass import OneVsRestClassifier
from sklearn.svm import SVC

from .allocation import largest_remainder_allocation
from .embeddings import EmbeddingMatrix
from .errors import ContractError, RecordValidationError

DEFAULT_PORTIONS = (0.05, 0.10, 0.25, 0.50, 1.00)
LOG_GRID = (0.001, 0.01, 0.1, 1.0, 10.0, 100.0, 1000.0)


@dataclass
class PortionSpec:
    fractions: tuple = DEFAULT_PORTIONS
    seed: int = 0

    def __post_init__(self):
        fracs = tuple(float(f) for f in self.fractions)
        if any(not 0.0 < f <= 1.0 for f in fracs):
            raise ContractError("fractions must lie in (0, 1]")
        if len(set(fracs)) != len(fracs):
            raise ContractError("duplicate fractions")
        self.fractions = fracs


@dataclass
class SvmGrid:
    """Search axes in fixed tie-break order: kernel, then C, then gamma."""

    kernels: tuple = ("linear", "rbf", "sigmoid", "poly")
    c_values: tuple = LOG_GRID
    gamma_values: tuple = LOG_GRID + ("scale", "auto")

    def __post_init__(self):
        if not self.kernels or not self.c_values or not self.gamma_values:
            raise ContractError("grid axes must be nonempty")
        if any(c <= 0 for c in self.c_values):
            raise ContractError("C values must be positive")
        for g in self.gamma_values:
            if not isinstance(g, str) and g <= 0:
                raise ContractError("numeric gamma values must be positive")
        self.kernels = tuple(self.kernels)
        self.c_values = tuple(self.c_values)
        self.gamma_values = tuple(self.gamma_values)

    def configurations(self):
        """Deterministic enumeration; the gamma axis collapses for the
        gamma-free linear kernel."""
        for kernel in self.kernels:
            for c in self.c_values:
                gammas = ("scale",) if kernel == "linear" else self.gamma_values
                for gamma in gammas:
                    yield kernel, c, gamma


@dataclass
class ReportRow:
    model_tag: str
    portion: float
    mean_accuracy: float  # percent
    ci_half_width: float
    fold_accuracies: list
    kernel: str
    c_value: float
    gamma: object
    fold_params: list = field(default_factory=list)


@dataclass
class EvalReport:
    rows: list
    metadata: dict = field(default_factory=dict)


def stratified_portion(labels, fraction, seed):
    """Select a class-stratified subset of indices.

    Per-class counts follow largest-remainder allocation of the fraction,
    so the subset size is exactly round(fraction * N). fraction == 1.0 is
    the identity. Returns sorted indices; deterministic per seed.
    """
    labels = list(labels)
    n = len(labels)
    if n == 0:
        raise ContractError("labels are empty")
    if not 0.0 < fraction <= 1.0:
        raise ContractError(f"fraction {fraction} outside (0, 1]")
    if fraction == 1.0:
        return np.arange(n, dtype=np.int64)

    classes = sorted(set(labels))
    if fraction * n < len(classes):
        raise ContractError(
            f"fraction {fraction} of {n} items cannot represent {len(classes)} classes"
        )
    by_class = {c: [] for c in classes}
    for i, l in enumerate(labels):
        by_class[l].append(i)

    total = int(round(fraction * n))
    quotas = [fraction * len(by_class[c]) for c in classes]
    counts = largest_remainder_allocation(quotas, total)
    empty = [c for c, k in zip(classes, counts) if k == 0]
    if empty:
        raise ContractError(f"fraction {fraction} leaves no items for class {empty[0]!r}")

    rng = np.random.default_rng(seed)
    chosen = []
    for c, k in zip(classes, counts):
        idx = np.array(by_class[c], dtype=np.int64)
        pick = rng.choice(idx, size=k, replace=False)
        chosen.append(pick)
    return np.sort(np.concatenate(chosen))


def stratified_folds(labels, k, seed):
    """Disjoint covering folds, stratified where class sizes allow.

    Classes with fewer than k items spread across a rotating subset of
    folds so overall fold sizes stay within one item of each other.
    """
    labels = list(labels)
    n = len(labels)
    if k < 2:
        raise ContractError("k must be >= 2")
    if n < k:
        raise ContractError(f"cannot make {k} folds from {n} items")
    rng = np.random.default_rng(seed)
    folds = [[] for _ in range(k)]
    offset = 0
    for c in sorted(set(labels)):
        idx = np.array([i for i, l in enumerate(labels) if l == c], dtype=np.int64)
        idx = rng.permutation(idx)
        for j, item in enumerate(idx):
            folds[(offset + j) % k].append(int(item))
        offset = (offset + len(idx)) % k
    return [np.array(sorted(f), dtype=np.int64) for f in folds]


def _standardize_fit(x):
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std < 1e-12, 1.0, std)
    return mean, std


def _fit_svc(x_train, y_train, kernel, c, gamma):
    base = SVC(kernel=kernel, C=c, gamma=gamma, cache_size=64)
    clf = OneVsRestClassifier(base)
    clf.fit(x_train, y_train)
    return clf


def _accuracy(clf, x, y):
    return float((clf.predict(x) == y).mean())


def grid_search_svm(x, y, grid: SvmGrid, inner_k=3, seed=0):
    """Pick the configuration maximizing mean inner-CV accuracy.

    Ties resolve to the earliest configuration in (kernel, C, gamma)
    axis order. Returns ((kernel, C, gamma), best inner accuracy).
    """
    y = np.asarray(y)
    if len(np.unique(y)) < 2:
        raise ContractError("grid search needs at least 2 classes")
    folds = stratified_folds(list(y), min(inner_k, len(y)), seed)
    splits = []
    for i, fold in enumerate(folds):
        val = fold
        train = np.concatenate([f for j, f in enumerate(folds) if j != i])
        if len(np.unique(y[val])) < 1 or len(np.unique(y[train])) < 2:
            raise ContractError(f"degenerate single-class fold {i}")
        mean, std = _standardize_fit(x[train])
        splits.append((train, val, mean, std))

    best = None
    best_acc = -1.0
    for kernel, c, gamma in grid.configurations():
        accs = []
        for train, val, mean, std in splits:
            clf = _fit_svc((x[train] - mean) / std, y[train], kernel, c, gamma)
            accs.append(_accuracy(clf, (x[val] - mean) / std, y[val]))
        acc = float(np.mean(accs))
        if acc > best_acc:
            best_acc = acc
            best = (kernel, c, gamma)
    return best, best_acc


def kfold_accuracy(x, y, grid: SvmGrid, k=10, seed=0, inner_k=3):
    """Outer k-fold accuracies with per-fold inner hyperparameter tuning.

    Returns (accuracies in percent, chosen parameters per fold).
    """
    y = np.asarray(y)
    if len(np.unique(y)) < 2:
        raise ContractError("evaluation needs at least 2 classes")
    folds = stratified_folds(list(y), k, seed)
    accuracies = []
    chosen = []
    for i, test in enumerate(folds):
        train = np.concatenate([f for j, f in enumerate(folds) if j != i])
        params, _ = grid_search_svm(x[train], y[train], grid, inner_k=inner_k, seed=seed)
        mean, std = _standardize_fit(x[train])
        clf = _fit_svc((x[train] - mean) / std, y[train], *params)
        accuracies.append(100.0 * _accuracy(clf, (x[test] - mean) / std, y[test]))
        chosen.append(params)
    return accuracies, chosen


def holdout_accuracy(x, y, portion_idx, grid: SvmGrid, k=10, seed=0, inner_k=3):
    """Alternative protocol: k models trained on portion folds, each
    tested on the items outside the portion."""
    y = np.asarray(y)
    rest = np.setdiff1d(np.arange(len(y)), portion_idx)
    if rest.size == 0:
        raise ContractError("holdout protocol needs items outside the portion")
    xp, yp = x[portion_idx], y[portion_idx]
    folds = stratified_folds(list(yp), k, seed)
    accuracies, chosen = [], []
    for i, held in enumerate(folds):
        train = np.concatenate([f for j, f in enumerate(folds) if j != i])
        params, _ = grid_search_svm(xp[train], yp[train], grid, inner_k=inner_k, seed=seed)
        mean, std = _standardize_fit(xp[train])
        clf = _fit_svc((xp[train] - mean) / std, yp[train], *params)
        accuracies.append(100.0 * _accuracy(clf, (x[rest] - mean) / std, y[rest]))
        chosen.append(params)
    return accuracies, chosen


def confidence_interval(fold_accuracies):
    """95% normal-approximation half-width: 1.96 * s / sqrt(k), with s the
    Bessel-corrected sample standard deviation across folds.

    Computed as 1.96 * sqrt(s^2 / k), which is algebraically identical
    and exact on round cases like folds {90, 92}.
    """
    accs = np.asarray(fold_accuracies, dtype=np.float64)
    if accs.size < 2:
        raise ContractError("need at least 2 folds for a confidence interval")
    return float(1.96 * np.sqrt(accs.var(ddof=1) / accs.size))


def _majority_params(params):
    counts = {}
    for p in params:
        counts[p] = counts.get(p, 0) + 1
    ordered = sorted(counts.items(), key=lambda kv: (-kv[1], params.index(kv[0])))
    return ordered[0][0]


def build_report(
    models: dict,
    portions: PortionSpec = None,
    grid: SvmGrid = None,
    k=10,
    cv_scope="within_portion",
    inner_k=3,
) -> EvalReport:
    """One row per (model tag, portion): the Table-1 shape.

    All embedding matrices must share item ids and labels; portions are
    drawn once per fraction from the portion seed and reused across
    models so columns are comparable.
    """
    portions = portions or PortionSpec()
    grid = grid or SvmGrid()
    if cv_scope not in ("within_portion", "train_portion_test_rest"):
        raise ContractError(f"unknown cv_scope {cv_scope!r}")
    if not models:
        raise ContractError("no models to evaluate")

    tags = sorted(models)
    first = models[tags[0]]
    for tag in tags[1:]:
        m = models[tag]
        if m.item_ids != first.item_ids or m.labels != first.labels:
            raise RecordValidationError(
                f"model {tag!r} ids/labels misaligned with {tags[0]!r}"
            )

    labels = np.asarray(first.labels)
    rows = []
    for tag in tags:
        matrix = models[tag]
        x = matrix.vectors.astype(np.float64)
        for fraction in portions.fractions:
            idx = stratified_portion(first.labels, fraction, portions.seed)
            if cv_scope == "within_portion" or fraction == 1.0:
                accs, chosen = kfold_accuracy(
                    x[idx], labels[idx], grid, k=k, seed=portions.seed, inner_k=inner_k
                )
            else:
                accs, chosen = holdout_accuracy(
                    x, labels, idx, grid, k=k, seed=portions.seed, inner_k=inner_k
                )
            kernel, c, gamma = _majority_params(chosen)
            rows.append(
                ReportRow(
                    model_tag=tag,
                    portion=fraction,
                    mean_accuracy=float(np.mean(accs)),
                    ci_half_width=confidence_interval(accs),
                    fold_accuracies=list(accs),
                    kernel=kernel,
                    c_value=c,
                    gamma=gamma,
                    fold_params=[list(p) for p in chosen],
                )
            )
    metadata = {
        "ci_formula": "1.96 * sample_std(bessel) / sqrt(k), normal approximation",
        "multiclass_strategy": "one-vs-rest",
        "standardization": "per-dimension z-score fit on the training split",
        "inner_selection": f"{inner_k}-fold CV inside each outer training split",
        "cv_scope": cv_scope,
        "folds": k,
        "portion_seed": portions.seed,
        "portions": list(portions.fractions),
        "grid": {
            "kernels": list(grid.kernels),
            "c_values": list(grid.c_values),
            "gamma_values": [str(g) for g in grid.gamma_values],
        },
    }
    return EvalReport(rows=rows, metadata=metadata)


def report_to_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(
        ["model", "portion", "mean_acc", "ci_half_width", "kernel", "C", "gamma"]
    )
    for row in report.rows:
        writer.writerow(
            [
                row.model_tag,
                f"{row.portion:g}",
                f"{row.mean_accuracy:.2f}",
                f"{row.ci_half_width:.2f}",
                row.kernel,
                f"{row.c_value:g}",
                str(row.gamma),
            ]
        )
    return buf.getvalue()


def report_to_text(report: EvalReport) -> str:
    """Aligned table of accuracy +/- half-width, models as columns."""
    tags = sorted({r.model_tag for r in report.rows})
    portions = sorted({r.portion for r in report.rows})
    cells = {(r.model_tag, r.portion): r for r in report.rows}
    width = max(16, max(len(t) for t in tags) + 2)
    header = "portion".ljust(10) + "".join(t.rjust(width) for t in tags)
    lines = [header, "-" * len(header)]
    for p in portions:
        line = f"{100 * p:>6.0f}%   "
        for t in tags:
            row = cells[(t, p)]
            line += f"{row.mean_accuracy:6.2f}+-{row.ci_half_width:<5.2f}".rjust(width)
        lines.append(line)
    return "\n".join(lines) + "\n"


def write_report(report: EvalReport, csv_path, text_path=None, meta_path=None):
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    csv_path.write_text(report_to_csv(report), encoding="utf-8")
    written = [csv_path]
    if text_path is not None:
        Path(text_path).write_text(report_to_text(report), encoding="utf-8")
        written.append(Path(text_path))
    if meta_path is not None:
        payload = dict(report.metadata)
        payload["fold_accuracies"] = {
            f"{r.model_tag}@{r.portion:g}": r.fold_accuracies for r in report.rows
        }
        Path(meta_path).write_text(
            json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8"
        )
        written.append(Path(meta_path))
    return written
