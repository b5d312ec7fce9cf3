"""Retrieval and clustering evaluation.

Recall@K, NMI, pairwise F1 (with k-means clustering at the number of
ground-truth classes), plus the query-level precision metrics P@1,
R-Precision, and MAP@R.  Everything works on a plain embedding matrix
and integer labels; neighbor ties break toward the smaller sample index.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

KMEANS_MAX_ITER = 300
KMEANS_TOL = 1e-6


def pairwise_distances(embeddings: np.ndarray) -> np.ndarray:
    """Symmetric Euclidean distance matrix with an exactly zero diagonal."""
    x = np.asarray(embeddings, dtype=np.float64)
    diff = x[:, None, :] - x[None, :, :]
    d = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    d = 0.5 * (d + d.T)
    np.fill_diagonal(d, 0.0)
    return d


def _neighbor_order(distances: np.ndarray, query: int) -> np.ndarray:
    """All other samples sorted by distance to ``query``, stable in index."""
    n = distances.shape[0]
    others = np.concatenate([np.arange(query), np.arange(query + 1, n)])
    return others[np.argsort(distances[query, others], kind="stable")]


def recall_at_k(distances: np.ndarray, labels: np.ndarray, k: int) -> float:
    """Fraction of queries with a same-label sample among their k nearest."""
    labels = np.asarray(labels)
    n = len(labels)
    if not 1 <= k <= n - 1:
        raise ValueError(f"k={k} out of range for {n} samples")
    hits = 0
    for i in range(n):
        nearest = _neighbor_order(distances, i)[:k]
        hits += bool(np.any(labels[nearest] == labels[i]))
    return hits / n


def _kmeanspp_centers(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    closest = np.sum((x - centers[0]) ** 2, axis=1)
    for c in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            centers[c] = x[rng.integers(n)]
            continue
        centers[c] = x[rng.choice(n, p=closest / total)]
        closest = np.minimum(closest, np.sum((x - centers[c]) ** 2, axis=1))
    return centers


def kmeans(embeddings: np.ndarray, n_clusters: int, seed: int) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding; empty clusters re-seed
    at the point farthest from its current center."""
    x = np.asarray(embeddings, dtype=np.float64)
    n = len(x)
    if n_clusters > n:
        raise ValueError(f"n_clusters={n_clusters} exceeds {n} samples")
    rng = np.random.default_rng(seed)
    centers = _kmeanspp_centers(x, n_clusters, rng)
    prev_inertia = np.inf
    assign = np.zeros(n, dtype=int)
    for _ in range(KMEANS_MAX_ITER):
        d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assign = np.argmin(d2, axis=1)
        closest = d2[np.arange(n), assign]
        for c in range(n_clusters):
            members = assign == c
            if not members.any():
                far = int(np.argmax(closest))
                centers[c] = x[far]
                assign[far] = c
                closest[far] = 0.0
            else:
                centers[c] = x[members].mean(axis=0)
        inertia = float(((x - centers[assign]) ** 2).sum())
        if np.isfinite(prev_inertia) and (
            prev_inertia - inertia <= KMEANS_TOL * max(prev_inertia, 1e-300)
        ):
            break
        prev_inertia = inertia
    return assign


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def nmi(clusters: np.ndarray, classes: np.ndarray) -> float:
    """Mutual information normalized by the arithmetic mean of entropies."""
    clusters = np.asarray(clusters)
    classes = np.asarray(classes)
    if clusters.shape != classes.shape:
        raise ValueError("cluster and class assignments differ in length")
    n = len(clusters)
    _, ci = np.unique(clusters, return_inverse=True)
    _, li = np.unique(classes, return_inverse=True)
    table = np.zeros((ci.max() + 1, li.max() + 1))
    np.add.at(table, (ci, li), 1.0)
    h_c = _entropy(table.sum(axis=1))
    h_l = _entropy(table.sum(axis=0))
    if h_c + h_l == 0.0:
        return 1.0  # single cluster and single class
    mi = 0.0
    pc = table.sum(axis=1) / n
    pl = table.sum(axis=0) / n
    for a in range(table.shape[0]):
        for b in range(table.shape[1]):
            if table[a, b] > 0:
                p = table[a, b] / n
                mi += p * np.log(p / (pc[a] * pl[b]))
    return float(2.0 * mi / (h_c + h_l))


def f1_pairwise(clusters: np.ndarray, classes: np.ndarray) -> float:
    """Pairwise-clustering F1 over all unordered sample pairs."""
    clusters = np.asarray(clusters)
    classes = np.asarray(classes)
    if clusters.shape != classes.shape:
        raise ValueError("cluster and class assignments differ in length")
    same_cluster = clusters[:, None] == clusters[None, :]
    same_class = classes[:, None] == classes[None, :]
    upper = np.triu(np.ones(same_class.shape, dtype=bool), k=1)
    tp = int(np.count_nonzero(same_class & same_cluster & upper))
    fp = int(np.count_nonzero(~same_class & same_cluster & upper))
    fn = int(np.count_nonzero(same_class & ~same_cluster & upper))
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2.0 * precision * recall / (precision + recall)


def precision_rp_map(distances: np.ndarray, labels: np.ndarray):
    """Per-query P@1, R-Precision, and MAP@R, averaged over queries.

    R is the query's class size minus one; single-sample classes are
    skipped with a warning.
    """
    labels = np.asarray(labels)
    n = len(labels)
    p1s, rps, maps = [], [], []
    for i in range(n):
        r = int(np.count_nonzero(labels == labels[i])) - 1
        if r < 1:
            warnings.warn(f"query {i}: class {labels[i]!r} has a single sample; skipped")
            continue
        order = _neighbor_order(distances, i)
        rel = (labels[order[:r]] == labels[i]).astype(float)
        p1s.append(float(labels[order[0]] == labels[i]))
        rps.append(rel.sum() / r)
        prec_at = np.cumsum(rel) / np.arange(1, r + 1)
        maps.append(float((prec_at * rel).sum() / r))
    if not p1s:
        raise ValueError("no valid queries: every class has a single sample")
    return float(np.mean(p1s)), float(np.mean(rps)), float(np.mean(maps))


@dataclass
class EvalReport:
    recall: dict = field(default_factory=dict)  # K -> value
    nmi: float = 0.0
    f1: float = 0.0
    p_at_1: float = 0.0
    r_precision: float = 0.0
    map_at_r: float = 0.0

    def as_items(self):
        items = [(f"recall@{k}", v) for k, v in sorted(self.recall.items())]
        items += [("nmi", self.nmi), ("f1", self.f1), ("p@1", self.p_at_1),
                  ("rp", self.r_precision), ("map@r", self.map_at_r)]
        return items


def evaluate(embeddings: np.ndarray, labels: np.ndarray,
             recall_ks=(1, 2, 4, 8), cluster_seed: int = 0) -> EvalReport:
    """Full retrieval + clustering report for an embedding set."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    if len(embeddings) < 2:
        raise ValueError("need at least two samples to evaluate")
    dist = pairwise_distances(embeddings)
    n = len(labels)
    report = EvalReport()
    for k in recall_ks:
        if k <= n - 1:
            report.recall[k] = recall_at_k(dist, labels, k)
    clusters = kmeans(embeddings, len(np.unique(labels)), cluster_seed)
    report.nmi = nmi(clusters, labels)
    report.f1 = f1_pairwise(clusters, labels)
    report.p_at_1, report.r_precision, report.map_at_r = precision_rp_map(dist, labels)
    return report
