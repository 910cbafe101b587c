"""Zero-shot evaluation: cosine kNN classification, k-means, and metrics.

The classification protocol labels each query by majority vote over its k
most cosine-similar references. Deterministic tie-break chains are fixed
here because float ties do occur with duplicated vectors:

  neighbor selection:  similarity descending, then reference index ascending
  vote:                count desc, then summed similarity desc, then the
                       rank of the label's nearest member ascending

Clustering quality uses the chance-adjusted pair-counting Rand index and
adjusted mutual information with the arithmetic-mean entropy normalizer.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimMismatch, ZeroVector


@dataclass(frozen=True)
class NeighborSet:
    """k nearest references: (cell_id, label, similarity), similarity non-increasing."""

    neighbors: tuple[tuple[str, str, float], ...]


@dataclass
class ConfusionMatrix:
    labels: list[str]
    counts: np.ndarray  # rows = true, cols = predicted

    @classmethod
    def from_pairs(cls, true_labels, predicted) -> "ConfusionMatrix":
        labels = sorted(set(true_labels) | set(predicted))
        index = {lab: i for i, lab in enumerate(labels)}
        counts = np.zeros((len(labels), len(labels)), dtype=np.int64)
        for t, p in zip(true_labels, predicted):
            counts[index[t], index[p]] += 1
        return cls(labels=labels, counts=counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts) / self.total)


@dataclass
class ClusterAssignment:
    assignment: dict[str, int]
    centroids: np.ndarray
    inertia: float


@dataclass
class MetricsReport:
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    ari: float | None = None
    ami: float | None = None

    FIELDS = ("accuracy", "macro_precision", "macro_recall", "macro_f1", "ari", "ami")

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in self.FIELDS}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


@dataclass
class AggregateReport:
    """Per-seed metric values with mean and sample std, one row per metric."""

    runs: list[MetricsReport] = field(default_factory=list)

    def summary(self) -> dict[str, dict]:
        out: dict[str, dict] = {}
        for name in MetricsReport.FIELDS:
            values = [getattr(r, name) for r in self.runs if getattr(r, name) is not None]
            if not values:
                continue
            entry: dict = {"values": values, "mean": float(np.mean(values))}
            if len(values) >= 2:
                entry["std"] = sample_std(values)
            out[name] = entry
        return out


def format_mean_std(mean: float, std: float | None) -> str:
    """Render "0.962 (0.0019)" style cells; bare mean when std is unknown."""
    if std is None:
        return f"{mean:.3f}"
    std_text = "0.000" if std == 0 else f"{std:.2g}"
    return f"{mean:.3f} ({std_text})"


_COLUMN_TITLES = {
    "accuracy": "Accuracy",
    "macro_precision": "Precision",
    "macro_recall": "Recall",
    "macro_f1": "F1",
    "ari": "k-means ARI",
    "ami": "k-means AMI",
}


def metrics_markdown(rows: dict[str, "MetricsReport"]) -> str:
    """Markdown table with one row per model and metric columns
    (Accuracy / Precision / Recall / F1, plus ARI / AMI when present)."""
    columns = list(MetricsReport.FIELDS[:4])
    if any(r.ari is not None for r in rows.values()):
        columns += ["ari", "ami"]
    lines = [
        "| Model | " + " | ".join(_COLUMN_TITLES[c] for c in columns) + " |",
        "|" + "---|" * (len(columns) + 1),
    ]
    for name, report in rows.items():
        cells = [
            "" if getattr(report, c) is None else f"{getattr(report, c):.3f}"
            for c in columns
        ]
        lines.append(f"| {name} | " + " | ".join(cells) + " |")
    return "\n".join(lines)


def _normalize_rows(matrix: np.ndarray, what: str) -> np.ndarray:
    matrix = np.asarray(matrix, dtype=np.float64)
    norms = np.linalg.norm(matrix, axis=1)
    if np.any(norms == 0.0):
        raise ZeroVector(what)
    return matrix / norms[:, None]


def _clip_sims(sims: np.ndarray) -> np.ndarray:
    # unit-vector dot products can spill a last-place unit past +/-1
    return np.clip(sims, -1.0, 1.0)


def _neighbor_order(sims: np.ndarray) -> np.ndarray:
    # similarity descending, reference index ascending on ties
    return np.lexsort((np.arange(len(sims)), -sims))


def _vote(order: np.ndarray, sims: np.ndarray, labels: list[str], k: int):
    top = order[:k]
    stats: dict[str, list] = {}
    neighbors = []
    for rank, ref_idx in enumerate(top):
        lab = labels[ref_idx]
        entry = stats.setdefault(lab, [0, 0.0, rank])
        entry[0] += 1
        entry[1] += float(sims[ref_idx])
        neighbors.append((ref_idx, lab, float(sims[ref_idx])))
    ranked = sorted(stats.items(), key=lambda kv: (-kv[1][0], -kv[1][1], kv[1][2]))
    return ranked, neighbors


def knn_classify(
    query: np.ndarray,
    reference: list[tuple[np.ndarray, str]],
    k: int = 10,
    cell_ids: list[str] | None = None,
) -> tuple[str, NeighborSet]:
    """Label a query by majority vote over its k most similar references."""
    if k <= 0 or k > len(reference):
        raise ValueError(f"k={k} out of range for {len(reference)} references")
    vectors = np.stack([v for v, _ in reference])
    labels = [lab for _, lab in reference]
    query = np.asarray(query, dtype=np.float64)
    if query.shape != vectors.shape[1:]:
        raise DimMismatch(vectors.shape[1], query.shape[0], "knn query")
    qn = np.linalg.norm(query)
    if qn == 0.0:
        raise ZeroVector("knn query")
    sims = _clip_sims(_normalize_rows(vectors, "knn reference") @ (query / qn))
    ranked, neighbors = _vote(_neighbor_order(sims), sims, labels, k)
    ids = cell_ids or [str(i) for i in range(len(reference))]
    neighbor_set = NeighborSet(tuple((ids[i], lab, sim) for i, lab, sim in neighbors))
    return ranked[0][0], neighbor_set


def knn_top_labels(
    query: np.ndarray,
    reference: list[tuple[np.ndarray, str]],
    k: int = 10,
    m: int = 3,
) -> list[str]:
    """Distinct labels among the k neighbors, ranked by the vote chain, top m."""
    if k <= 0 or k > len(reference):
        raise ValueError(f"k={k} out of range for {len(reference)} references")
    vectors = np.stack([v for v, _ in reference])
    labels = [lab for _, lab in reference]
    query = np.asarray(query, dtype=np.float64)
    qn = np.linalg.norm(query)
    if qn == 0.0:
        raise ZeroVector("knn query")
    sims = _clip_sims(_normalize_rows(vectors, "knn reference") @ (query / qn))
    ranked, _ = _vote(_neighbor_order(sims), sims, labels, k)
    return [lab for lab, _ in ranked[:m]]


def knn_classify_batch(
    queries: np.ndarray,
    ref_vectors: np.ndarray,
    ref_labels: list[str],
    k: int = 10,
    m: int = 3,
) -> tuple[list[str], list[list[str]]]:
    """Vectorized batch form: predicted label and top-m label list per query."""
    if k > len(ref_labels):
        raise ValueError(f"k={k} out of range for {len(ref_labels)} references")
    R = _normalize_rows(ref_vectors, "knn reference")
    Q = _normalize_rows(queries, "knn query")
    sims_all = _clip_sims(Q @ R.T)
    preds: list[str] = []
    tops: list[list[str]] = []
    for sims in sims_all:
        ranked, _ = _vote(_neighbor_order(sims), sims, ref_labels, k)
        preds.append(ranked[0][0])
        tops.append([lab for lab, _ in ranked[:m]])
    return preds, tops


def _kmeans_once(X: np.ndarray, K: int, rng: np.random.Generator, tol: float, max_iter: int):
    n = X.shape[0]
    # k-means++ seeding
    centroids = np.empty((K, X.shape[1]), dtype=np.float64)
    centroids[0] = X[rng.integers(n)]
    d2 = np.sum((X - centroids[0]) ** 2, axis=1)
    for j in range(1, K):
        total = d2.sum()
        if total == 0.0:
            centroids[j] = X[rng.integers(n)]
        else:
            centroids[j] = X[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, np.sum((X - centroids[j]) ** 2, axis=1))

    prev_inertia = np.inf
    trace: list[float] = []
    assign = np.zeros(n, dtype=np.int64)
    for _ in range(max_iter):
        dists = ((X[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        assign = dists.argmin(axis=1)
        inertia = float(dists[np.arange(n), assign].sum())
        trace.append(inertia)
        for j in range(K):
            members = X[assign == j]
            if len(members):
                centroids[j] = members.mean(axis=0)
            else:
                # re-seed an empty cluster at the farthest point
                far = int(dists.min(axis=1).argmax())
                centroids[j] = X[far]
        if prev_inertia < np.inf and prev_inertia > 0:
            if (prev_inertia - inertia) / prev_inertia < tol:
                break
        elif prev_inertia == inertia:
            break
        prev_inertia = inertia
    dists = ((X[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    assign = dists.argmin(axis=1)
    inertia = float(dists[np.arange(n), assign].sum())
    return assign, centroids, inertia, trace


def kmeans(
    vectors: np.ndarray,
    K: int,
    seed: int,
    cell_ids: list[str] | None = None,
    restarts: int = 10,
    tol: float = 1e-4,
    max_iter: int = 300,
) -> ClusterAssignment:
    """Lloyd k-means with k-means++ seeding, best of ``restarts`` runs.

    Each restart uses a distinct child seed; iteration stops when the
    relative inertia improvement falls below ``tol``.
    """
    X = np.asarray(vectors, dtype=np.float64)
    n = X.shape[0]
    if K <= 0 or K > n:
        raise ValueError(f"K={K} out of range for {n} vectors")
    seeds = np.random.SeedSequence(seed).spawn(restarts)
    best = None
    for child in seeds:
        rng = np.random.default_rng(child)
        assign, centroids, inertia, _ = _kmeans_once(X, K, rng, tol, max_iter)
        if best is None or inertia < best[2]:
            best = (assign, centroids, inertia)
    assign, centroids, inertia = best
    ids = cell_ids or [str(i) for i in range(n)]
    return ClusterAssignment(
        assignment={ids[i]: int(assign[i]) for i in range(n)},
        centroids=centroids,
        inertia=inertia,
    )


def _contingency(a, b) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    ua, ia = np.unique(a, return_inverse=True)
    ub, ib = np.unique(b, return_inverse=True)
    table = np.zeros((len(ua), len(ub)), dtype=np.int64)
    np.add.at(table, (ia, ib), 1)
    return table, table.sum(axis=1), table.sum(axis=0)


def ari(true_labels, clusters) -> float:
    """Adjusted Rand index from the pair-counting contingency formula."""
    true_labels = list(true_labels)
    clusters = list(clusters)
    if len(true_labels) != len(clusters):
        raise ValueError("label sequences must have equal length")
    if len(true_labels) < 2:
        raise ValueError("need at least 2 items")
    table, a, b = _contingency(true_labels, clusters)

    def comb2(x):
        return x * (x - 1) / 2.0

    index = comb2(table).sum()
    sum_a = comb2(a).sum()
    sum_b = comb2(b).sum()
    total = comb2(len(true_labels))
    expected = sum_a * sum_b / total
    maximum = (sum_a + sum_b) / 2.0
    if maximum == expected:
        return 1.0  # both partitions trivial and identical in structure
    return float((index - expected) / (maximum - expected))


def _entropy(counts: np.ndarray, n: int) -> float:
    p = counts[counts > 0] / n
    return float(-(p * np.log(p)).sum())


def _expected_mi(a: np.ndarray, b: np.ndarray, n: int) -> float:
    """E[MI] under the hypergeometric model of random label permutations."""
    lg = math.lgamma
    emi = 0.0
    for ai in a:
        for bj in b:
            lo = max(1, ai + bj - n)
            hi = min(ai, bj)
            for nij in range(lo, hi + 1):
                log_term = math.log(n * nij / (ai * bj))
                log_weight = (
                    lg(ai + 1)
                    + lg(bj + 1)
                    + lg(n - ai + 1)
                    + lg(n - bj + 1)
                    - lg(n + 1)
                    - lg(nij + 1)
                    - lg(ai - nij + 1)
                    - lg(bj - nij + 1)
                    - lg(n - ai - bj + nij + 1)
                )
                emi += (nij / n) * log_term * math.exp(log_weight)
    return emi


def ami(true_labels, clusters) -> float:
    """Adjusted mutual information, arithmetic-mean entropy normalizer."""
    true_labels = list(true_labels)
    clusters = list(clusters)
    if len(true_labels) != len(clusters):
        raise ValueError("label sequences must have equal length")
    n = len(true_labels)
    if n < 2:
        raise ValueError("need at least 2 items")
    table, a, b = _contingency(true_labels, clusters)
    if len(a) == 1 and len(b) == 1:
        return 1.0  # both single-class: identical trivial partitions
    nz = table > 0
    nij = table[nz].astype(np.float64)
    outer = np.outer(a, b)[nz].astype(np.float64)
    mi = float((nij / n * np.log(n * nij / outer)).sum())
    emi = _expected_mi(a, b, n)
    h_mean = (_entropy(a, n) + _entropy(b, n)) / 2.0
    denom = h_mean - emi
    if abs(denom) < 1e-15:
        return 0.0
    return float((mi - emi) / denom)


def macro_metrics(true_labels, predicted) -> MetricsReport:
    """Accuracy and unweighted per-class precision/recall/F1 means.

    0/0 ratios resolve to 0; macro averages run over classes present in the
    true labels only.
    """
    true_labels = list(true_labels)
    predicted = list(predicted)
    if len(true_labels) != len(predicted):
        raise ValueError("label sequences must have equal length")
    cm = ConfusionMatrix.from_pairs(true_labels, predicted)
    present = [i for i, lab in enumerate(cm.labels) if lab in set(true_labels)]
    precisions, recalls, f1s = [], [], []
    for i in present:
        tp = float(cm.counts[i, i])
        pred_total = float(cm.counts[:, i].sum())
        true_total = float(cm.counts[i, :].sum())
        p = tp / pred_total if pred_total > 0 else 0.0
        r = tp / true_total if true_total > 0 else 0.0
        f1 = 2 * p * r / (p + r) if (p + r) > 0 else 0.0
        precisions.append(p)
        recalls.append(r)
        f1s.append(f1)
    return MetricsReport(
        accuracy=cm.accuracy,
        macro_precision=float(np.mean(precisions)),
        macro_recall=float(np.mean(recalls)),
        macro_f1=float(np.mean(f1s)),
    )


def sample_std(values) -> float:
    """Unbiased-denominator sample standard deviation, sqrt(sum sq dev / (n-1))."""
    values = np.asarray(list(values), dtype=np.float64)
    n = len(values)
    if n < 2:
        raise ValueError("sample_std needs at least 2 values")
    mean = values.mean()
    return float(math.sqrt(((values - mean) ** 2).sum() / (n - 1)))


def evaluate_zero_shot(
    train_vectors: np.ndarray,
    train_labels: list[str],
    test_vectors: np.ndarray,
    test_labels: list[str],
    k: int = 10,
    n_clusters: int | None = None,
    kmeans_seed: int = 0,
) -> MetricsReport:
    """Full zero-shot protocol: 10-NN classification metrics plus k-means
    ARI/AMI on the test embeddings (cluster count defaults to the number of
    distinct labels)."""
    preds, _ = knn_classify_batch(test_vectors, train_vectors, train_labels, k=k)
    report = macro_metrics(test_labels, preds)
    K = n_clusters or len(set(train_labels) | set(test_labels))
    clusters = kmeans(test_vectors, K, seed=kmeans_seed)
    order = [str(i) for i in range(len(test_labels))]
    cluster_ids = [clusters.assignment[i] for i in order]
    report.ari = ari(test_labels, cluster_ids)
    report.ami = ami(test_labels, cluster_ids)
    return report
