"""Discriminative losses and tuple samplers.

Three loss families: triplet with semi-hard negative sampling, margin
loss with distance-weighted negative sampling, and proxy-anchor over a
learnable proxy bank.  Samplers work on plain distance matrices and
labels and are deterministic given the caller's random generator; loss
builders turn sampled tuples into graph nodes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Node

__all__ = [
    "TupleBatch",
    "triplet_loss",
    "triplet_loss_node",
    "semi_hard_sample",
    "margin_loss",
    "margin_loss_node",
    "negative_density",
    "distance_weighted_weights",
    "distance_weighted_sample",
    "proxy_anchor_loss_node",
    "build_batch",
]

DW_DISTANCE_FLOOR = 0.5
DW_CLIP_DISTANCE = 1.4


@dataclass
class TupleBatch:
    """Sampled index tuples: (a, p, n) triplets and/or labeled pairs."""

    anchors: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.intp))
    positives: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.intp))
    negatives: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.intp))
    pair_anchors: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.intp))
    pair_others: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.intp))
    pair_is_positive: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=bool))

    @property
    def n_triplets(self):
        return len(self.anchors)

    @property
    def n_pairs(self):
        return len(self.pair_anchors)


def triplet_loss(d_ap: float, d_an: float, margin: float) -> float:
    """Hinge on the distance gap of a single triplet."""
    return max(0.0, d_ap - d_an + margin)


def triplet_loss_node(z: Node, tuples: TupleBatch, margin: float) -> Node | None:
    """Mean triplet hinge over sampled tuples; None when no tuples."""
    if tuples.n_triplets == 0:
        return None
    za = ad.gather_rows(z, tuples.anchors)
    zp = ad.gather_rows(z, tuples.positives)
    zn = ad.gather_rows(z, tuples.negatives)
    d_ap = ad.row_norm(ad.sub(za, zp))
    d_an = ad.row_norm(ad.sub(za, zn))
    hinge = ad.relu(ad.add(ad.sub(d_ap, d_an), ad.constant(margin)))
    return ad.reduce_mean(hinge)


def semi_hard_sample(distances: np.ndarray, labels: np.ndarray, margin: float,
                     rng: np.random.Generator) -> TupleBatch:
    """Semi-hard negatives for every ordered anchor-positive pair.

    Primary rule: a uniform draw from negatives inside the band
    (d_ap, d_ap + margin).  Fallback when the band is empty: the hardest
    negative not farther than the positive.  Pairs with neither are skipped.
    """
    labels = np.asarray(labels)
    n = len(labels)
    anchors, positives, negatives = [], [], []
    for a in range(n):
        pos_idx = np.flatnonzero((labels == labels[a]) & (np.arange(n) != a))
        neg_idx = np.flatnonzero(labels != labels[a])
        if pos_idx.size == 0 or neg_idx.size == 0:
            continue
        d_neg = distances[a, neg_idx]
        for p in pos_idx:
            d_ap = distances[a, p]
            band = neg_idx[(d_neg > d_ap) & (d_neg < d_ap + margin)]
            if band.size:
                chosen = int(band[rng.integers(band.size)])
            else:
                below = neg_idx[d_neg <= d_ap]
                if below.size == 0:
                    continue
                chosen = int(below[np.argmax(distances[a, below])])
            anchors.append(a)
            positives.append(int(p))
            negatives.append(chosen)
    return TupleBatch(
        anchors=np.asarray(anchors, dtype=np.intp),
        positives=np.asarray(positives, dtype=np.intp),
        negatives=np.asarray(negatives, dtype=np.intp),
    )


def margin_loss(d: float, is_positive: bool, alpha: float, beta: float) -> float:
    """Single-pair margin loss with learnable class boundary beta."""
    if is_positive:
        return max(0.0, alpha + d - beta)
    return max(0.0, alpha - d + beta)


def margin_loss_node(z: Node, tuples: TupleBatch, anchor_classes: np.ndarray,
                     beta: Node, alpha: float) -> Node | None:
    """Margin loss summed over pairs, divided by the active-pair count."""
    if tuples.n_pairs == 0:
        return None
    za = ad.gather_rows(z, tuples.pair_anchors)
    zo = ad.gather_rows(z, tuples.pair_others)
    d = ad.row_norm(ad.sub(za, zo))
    beta_sel = ad.gather_rows(beta, anchor_classes[tuples.pair_anchors])
    gap = ad.sub(d, beta_sel)
    sign = np.where(tuples.pair_is_positive, 1.0, -1.0)
    hinge = ad.relu(ad.add(ad.mul(ad.constant(sign), gap), ad.constant(alpha)))
    active = int(np.count_nonzero(hinge.value > 0.0))
    if active == 0:
        return ad.scalar_mul(0.0, ad.reduce_sum(hinge))
    return ad.scalar_mul(1.0 / active, ad.reduce_sum(hinge))


def negative_density(d: float, dim: int) -> float:
    """Unnormalized density of pairwise distances on the unit sphere."""
    if d <= 0.0 or d >= 2.0:
        return 0.0
    return d ** (dim - 2) * (1.0 - d * d / 4.0) ** ((dim - 3) / 2.0)


def distance_weighted_weights(d: np.ndarray, dim: int) -> np.ndarray:
    """Clipped inverse-density sampling weights for negative distances."""
    clip = 1.0 / negative_density(DW_CLIP_DISTANCE, dim)
    d = np.maximum(np.asarray(d, dtype=float), DW_DISTANCE_FLOOR)
    out = np.empty_like(d)
    for i, di in np.ndenumerate(d):
        q = negative_density(di, dim)
        out[i] = clip if q <= 0.0 or 1.0 / q > clip else 1.0 / q
    return out


def distance_weighted_sample(distances: np.ndarray, labels: np.ndarray,
                             embed_dim: int, rng: np.random.Generator,
                             row_norms: np.ndarray | None = None) -> TupleBatch:
    """Exhaustive positive pairs; one inverse-density-weighted negative per anchor.

    ``row_norms``, when given, must be within 1e-6 of 1: the distance
    density assumes unit-normalized embeddings.
    """
    if row_norms is not None and np.any(np.abs(row_norms - 1.0) > 1e-6):
        bad = int(np.argmax(np.abs(row_norms - 1.0) > 1e-6))
        raise ValueError(f"distance-weighted sampling needs unit rows; row {bad} "
                         f"has norm {row_norms[bad]:.8f}")
    labels = np.asarray(labels)
    n = len(labels)
    pa, po, pp = [], [], []
    for i in range(n):
        for j in range(i + 1, n):
            if labels[i] == labels[j]:
                pa.append(i)
                po.append(j)
                pp.append(True)
    for a in range(n):
        neg_idx = np.flatnonzero(labels != labels[a])
        if neg_idx.size == 0:
            continue
        w = distance_weighted_weights(distances[a, neg_idx], embed_dim)
        total = w.sum()
        if total <= 0.0:
            continue
        chosen = int(neg_idx[rng.choice(neg_idx.size, p=w / total)])
        pa.append(a)
        po.append(chosen)
        pp.append(False)
    return TupleBatch(
        pair_anchors=np.asarray(pa, dtype=np.intp),
        pair_others=np.asarray(po, dtype=np.intp),
        pair_is_positive=np.asarray(pp, dtype=bool),
    )


def proxy_anchor_loss_node(z: Node, class_idx: np.ndarray, proxies: Node,
                           scale: float, margin: float) -> Node:
    """Proxy-anchor loss over cosine similarities to a normalized proxy bank."""
    if z.value.shape[0] == 0:
        raise ValueError("proxy-anchor loss on an empty batch")
    class_idx = np.asarray(class_idx)
    n_proxies = proxies.value.shape[0]
    sims = ad.matmul(z, ad.transpose(ad.normalize_rows(proxies)))
    pos_terms, neg_terms = [], []
    for c in range(n_proxies):
        col = ad.slice_cols(sims, c, c + 1)
        pos_rows = np.flatnonzero(class_idx == c)
        neg_rows = np.flatnonzero(class_idx != c)
        if pos_rows.size:
            s = ad.gather_rows(col, pos_rows)
            pos_terms.append(ad.log1p_sum_exp(
                ad.scalar_mul(-scale, ad.add(s, ad.constant(-margin)))))
        s = ad.gather_rows(col, neg_rows)
        neg_terms.append(ad.log1p_sum_exp(
            ad.scalar_mul(scale, ad.add(s, ad.constant(margin)))))

    def _mean(terms):
        total = terms[0]
        for t in terms[1:]:
            total = ad.add(total, t)
        return ad.scalar_mul(1.0 / len(terms), total)

    loss = _mean(neg_terms)
    if pos_terms:
        loss = ad.add(_mean(pos_terms), loss)
    return loss


def build_batch(labels: np.ndarray, strategy: str, classes_per_batch: int,
                batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """Indices for one training batch; deterministic given the generator."""
    labels = np.asarray(labels)
    n = len(labels)
    if n == 0:
        raise ValueError("empty dataset")
    if strategy == "random":
        return rng.choice(n, size=min(batch_size, n), replace=False)
    if strategy != "balanced":
        raise ValueError(f"unknown batch strategy {strategy!r}")
    classes = np.unique(labels)
    p = min(classes_per_batch, classes.size)
    if batch_size % p != 0:
        raise ValueError(f"batch size {batch_size} not divisible by {p} classes")
    q = batch_size // p
    chosen = rng.choice(classes.size, size=p, replace=False)
    out = []
    for ci in chosen:
        members = np.flatnonzero(labels == classes[ci])
        # small classes are topped up by sampling with replacement
        replace = members.size < q
        out.append(members[rng.choice(members.size, size=q, replace=replace)])
    return np.concatenate(out)
