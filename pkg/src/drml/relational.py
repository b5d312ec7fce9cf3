"""Relational inference over the branch ensemble.

Two sets of K affine heads produce meta-relational features from the
global feature; their pairwise differences form an asymmetric relation
tensor.  An affine score over each relation, normalized across source
branches, weights one round of message passing.  A shared affine updater
merges each branch feature with its incoming message, and the updated
features concatenate into the relation-aware embedding.

Both relational inputs (the global feature and the branch features) pass
through stop-gradient barriers: the embedding loss trains only this
module's parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .config import ModelConfig
from .ensemble import affine, barrier

LITERAL_EPS = 1e-8


def meta_features(params: dict, y: Node, cfg: ModelConfig,
                  pinned: dict | None = None):
    """The A- and B-side meta-relational features, K affine maps each."""
    frozen = barrier(y, "y", pinned)
    a = [affine(params, f"meta_a.{i}", frozen) for i in range(cfg.n_branches)]
    b = [affine(params, f"meta_b.{j}", frozen) for j in range(cfg.n_branches)]
    return a, b


def relation_matrix(a: list, b: list):
    """R[i][j] = a_i - b_j; generally asymmetric."""
    return [[ad.sub(a_i, b_j) for b_j in b] for a_i in a]


def relation_weights(params: dict, relations, cfg: ModelConfig):
    """Normalized per-target source weights from the affine relation score.

    Returns ``(scores, weights)`` where ``weights[i]`` is a [batch, K] node:
    column j is the weight of source branch j in the message to target i.
    """
    k = cfg.n_branches
    scores = [[affine(params, "score", relations[j][i]) for j in range(k)]
              for i in range(k)]
    weights = []
    for i in range(k):
        stacked = ad.concat(scores[i], axis=1)  # [batch, K] over sources j
        if cfg.relation_normalization == "softmax":
            weights.append(ad.softmax_rows(stacked))
        else:
            ones = ad.constant(np.ones((k, 1)))
            denom = ad.matmul(stacked, ones)  # [batch, 1]
            if np.any(np.abs(denom.value) < LITERAL_EPS):
                bad = int(np.argmax(np.abs(denom.value) < LITERAL_EPS))
                raise ad.GraphError(
                    f"literal relation normalization: score sum below {LITERAL_EPS} "
                    f"for sample {bad}, target {i}"
                )
            weights.append(ad.div(stacked, ad.add(denom, ad.constant(LITERAL_EPS))))
    return scores, weights


def messages(features: list, weights: list,
             pinned: dict | None = None) -> list:
    """M_i = sum_j w[j -> i] * g_j over stop-gradient branch features."""
    frozen = [barrier(g, f"g{j}", pinned) for j, g in enumerate(features)]
    out = []
    for i, w in enumerate(weights):
        terms = [ad.mul(ad.slice_cols(w, j, j + 1), frozen[j])
                 for j in range(len(frozen))]
        m = terms[0]
        for t in terms[1:]:
            m = ad.add(m, t)
        out.append(m)
    return out


def update_features(params: dict, features: list, msgs: list,
                    pinned: dict | None = None) -> list:
    """Shared affine updater over concat(g_i ; M_i)."""
    updated = []
    for i, (g, m) in enumerate(zip(features, msgs)):
        joined = ad.concat([barrier(g, f"g{i}", pinned), m], axis=1)
        updated.append(affine(params, "updater", joined))
    return updated


def relation_aware_embedding(updated: list, normalize: bool) -> Node:
    z = ad.concat(updated, axis=1)
    if normalize:
        z = ad.normalize_rows(z)
    return z


def distance(z_i: np.ndarray, z_j: np.ndarray) -> float:
    """Euclidean distance between two embeddings."""
    z_i = np.asarray(z_i, dtype=float)
    z_j = np.asarray(z_j, dtype=float)
    if z_i.shape != z_j.shape:
        raise ValueError(f"dimension mismatch: {z_i.shape} vs {z_j.shape}")
    return float(np.linalg.norm(z_i - z_j))


@dataclass
class RelationalState:
    meta_a: list
    meta_b: list
    relations: list
    scores: list
    weights: list
    messages: list
    updated: list
    z: Node


def relational_forward(params: dict, y: Node, features: list,
                       cfg: ModelConfig,
                       pinned: dict | None = None) -> RelationalState:
    a, b = meta_features(params, y, cfg, pinned)
    relations = relation_matrix(a, b)
    scores, weights = relation_weights(params, relations, cfg)
    msgs = messages(features, weights, pinned)
    updated = update_features(params, features, msgs, pinned)
    z = relation_aware_embedding(updated, cfg.normalize_embedding)
    return RelationalState(a, b, relations, scores, weights, msgs, updated, z)
