"""Trunk, branch heads, reconstruction decoders, and branch assignment.

The trunk maps raw inputs to a global feature.  K parallel affine heads
produce the individual-feature ensemble, and K affine decoders try to
reconstruct the global feature from each branch.  Each sample is assigned
to the branch whose decoder reconstructs it best; that branch alone trains
on the sample, while the decoders train on everyone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .config import ModelConfig


def affine(params: dict, prefix: str, x: Node) -> Node:
    """x @ W + b with parameters ``{prefix}.w`` and ``{prefix}.b``."""
    w = ad.parameter(f"{prefix}.w", params[f"{prefix}.w"])
    b = ad.parameter(f"{prefix}.b", params[f"{prefix}.b"])
    return ad.add(ad.matmul(x, w), b)


def barrier(node: Node, key: str, pinned: dict | None) -> Node:
    """Stop-gradient barrier, or a pinned constant during FD probing.

    Finite differences of the composed objective must not see value
    changes through a barrier; pinning replaces the barrier with the
    base-point value, which leaves analytic gradients untouched.
    """
    if pinned is None:
        return ad.stop_gradient(node)
    return ad.constant(pinned[key])


def trunk_forward(params: dict, x: Node, cfg: ModelConfig) -> Node:
    if x.value.ndim != 2 or x.value.shape[1] != cfg.input_dim:
        raise ad.GraphError(
            f"trunk input has shape {x.value.shape}, expected [batch, {cfg.input_dim}]"
        )
    if not cfg.trunk_hidden and not cfg.linear_trunk:
        return x  # identity trunk
    h = x
    for i in range(len(cfg.trunk_hidden)):
        h = ad.relu(affine(params, f"trunk.{i}", h))
    return affine(params, f"trunk.{len(cfg.trunk_hidden)}", h)


def heads_forward(params: dict, y: Node, cfg: ModelConfig) -> list[Node]:
    if y.value.shape[1] != cfg.trunk_out:
        raise ad.GraphError(f"head input width {y.value.shape[1]} != {cfg.trunk_out}")
    return [affine(params, f"head.{k}", y) for k in range(cfg.n_branches)]


def decode(params: dict, features: list[Node], cfg: ModelConfig) -> list[Node]:
    if len(features) != cfg.n_branches:
        raise ad.GraphError("one feature per branch required")
    for g in features:
        if g.value.shape[1] != cfg.feature_dim:
            raise ad.GraphError(f"decoder input width {g.value.shape[1]} != {cfg.feature_dim}")
    return [affine(params, f"dec.{k}", g) for k, g in enumerate(features)]


def reconstruction_loss(y: Node, reconstructions: list[Node]) -> Node:
    """Batch mean of (1/K) sum_k ||yhat_k - y||_2 (unsquared norms)."""
    norms = [ad.row_norm(ad.sub(rec, y)) for rec in reconstructions]
    total = norms[0]
    for n in norms[1:]:
        total = ad.add(total, n)
    return ad.reduce_mean(ad.scalar_mul(1.0 / len(reconstructions), total))


def recon_errors(y_value: np.ndarray, recon_values: list[np.ndarray]) -> np.ndarray:
    """Per-sample reconstruction cost, shape [batch, K]."""
    return np.stack(
        [np.linalg.norm(rec - y_value, axis=1) for rec in recon_values], axis=1
    )


def assign_branch(errors: np.ndarray) -> np.ndarray:
    """argmin over branches; ties break to the smallest index."""
    if not np.all(np.isfinite(errors)):
        raise ValueError("non-finite reconstruction error")
    return np.argmin(errors, axis=1)


@dataclass
class EnsembleState:
    y: Node
    features: list
    reconstructions: list
    errors: np.ndarray
    assignment: np.ndarray
    j_recon: Node


def ensemble_forward(params: dict, x: Node, cfg: ModelConfig,
                     pinned: dict | None = None) -> EnsembleState:
    """Forward pass through trunk, heads, and decoders.

    The reconstruction loss sees the global feature and the branch features
    through stop-gradient barriers, so it trains the decoders only.
    """
    y = trunk_forward(params, x, cfg)
    features = heads_forward(params, y, cfg)
    frozen = [barrier(g, f"g{k}", pinned) for k, g in enumerate(features)]
    recons = decode(params, frozen, cfg)
    j_recon = reconstruction_loss(barrier(y, "y", pinned), recons)
    errors = recon_errors(y.value, [r.value for r in recons])
    assignment = assign_branch(errors)
    return EnsembleState(y, features, recons, errors, assignment, j_recon)


def branch_usage(assignments: np.ndarray, n_branches: int) -> np.ndarray:
    """Fraction of samples assigned to each branch; sums to 1."""
    assignments = np.asarray(assignments)
    if assignments.size == 0:
        raise ValueError("no assignments recorded")
    counts = np.bincount(assignments, minlength=n_branches).astype(float)
    return counts / counts.sum()
