"""Joint training with per-objective gradient routing.

Three objectives share one forward pass per step: the ensemble loss
trains the trunk and branch heads, the reconstruction loss trains the
decoders, and the embedding loss trains the relational module.  The
stop-gradient barriers built into the forward graph make a single
reverse sweep produce correctly routed gradients; each parameter group
then takes one Adam update at its own learning rate.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import losses as L
from .autodiff import Node
from .config import ModelConfig, TrainerConfig
from .ensemble import branch_usage, ensemble_forward, heads_forward, trunk_forward
from .relational import relational_forward

BETA_FLOOR = 1e-3


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# parameters


def parameter_group(name: str) -> str:
    """Routing group of a parameter: 'G' (trunk/heads), 'P' (decoders), 'h'."""
    if name.startswith("dec."):
        return "P"
    if name.startswith(("trunk.", "head.", "proxy.branch.", "beta.branch.")):
        return "G"
    if name.startswith(("meta_a.", "meta_b.", "score.", "updater.",
                        "proxy.emb", "beta.emb")):
        return "h"
    raise ValueError(f"parameter {name!r} belongs to no routing group")


def init_params(cfg: TrainerConfig, seed: int, n_train_classes: int) -> dict:
    """Fresh parameter store: uniform(+-sqrt(1/fan_in)) weights, zero biases."""
    m = cfg.model
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}

    def affine_init(prefix, fan_in, fan_out):
        bound = np.sqrt(1.0 / fan_in)
        params[f"{prefix}.w"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        params[f"{prefix}.b"] = np.zeros(fan_out)

    if m.trunk_hidden or m.linear_trunk:
        dims = [m.input_dim, *m.trunk_hidden, m.trunk_out]
        for i in range(len(dims) - 1):
            affine_init(f"trunk.{i}", dims[i], dims[i + 1])
    for k in range(m.n_branches):
        affine_init(f"head.{k}", m.trunk_out, m.feature_dim)
        affine_init(f"dec.{k}", m.feature_dim, m.trunk_out)
        affine_init(f"meta_a.{k}", m.trunk_out, m.feature_dim)
        affine_init(f"meta_b.{k}", m.trunk_out, m.feature_dim)
    affine_init("score", m.feature_dim, 1)
    affine_init("updater", 2 * m.feature_dim, m.update_dim)

    def proxy_init(name, dim):
        p = rng.normal(size=(n_train_classes, dim))
        params[name] = p / np.linalg.norm(p, axis=1, keepdims=True)

    if cfg.loss == "proxy-anchor":
        proxy_init("proxy.emb", m.embedding_dim)
        for k in range(m.n_branches):
            proxy_init(f"proxy.branch.{k}", m.feature_dim)
    elif cfg.loss == "margin":
        params["beta.emb"] = np.full(n_train_classes, cfg.margin_beta_init)
        for k in range(m.n_branches):
            params[f"beta.branch.{k}"] = np.full(n_train_classes, cfg.margin_beta_init)
    return params


# ---------------------------------------------------------------------------
# loss assembly


@dataclass
class FrozenChoices:
    """Data-dependent selections pinned for finite-difference probing.

    ``barriers`` holds the base-point values of every stop-gradient
    input, so a probed rebuild sees them as constants, matching the
    derivative the barrier defines.
    """

    assignment: np.ndarray
    branch_tuples: list
    emb_tuples: L.TupleBatch
    barriers: dict


@dataclass
class ForwardState:
    ensemble: object
    relational: object
    j_ensem: Node
    j_recon: Node
    j_emb: Node
    per_branch: list
    total: Node
    choices: FrozenChoices


def _random_triplets(labels, rng):
    labels = np.asarray(labels)
    n = len(labels)
    anchors, positives, negatives = [], [], []
    for a in range(n):
        pos = np.flatnonzero((labels == labels[a]) & (np.arange(n) != a))
        neg = np.flatnonzero(labels != labels[a])
        if pos.size == 0 or neg.size == 0:
            continue
        for p in pos:
            anchors.append(a)
            positives.append(int(p))
            negatives.append(int(neg[rng.integers(neg.size)]))
    return L.TupleBatch(anchors=np.asarray(anchors, dtype=np.intp),
                        positives=np.asarray(positives, dtype=np.intp),
                        negatives=np.asarray(negatives, dtype=np.intp))


def _random_pairs(labels, rng):
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
        neg = np.flatnonzero(labels != labels[a])
        if neg.size:
            pa.append(a)
            po.append(int(neg[rng.integers(neg.size)]))
            pp.append(False)
    return L.TupleBatch(pair_anchors=np.asarray(pa, dtype=np.intp),
                        pair_others=np.asarray(po, dtype=np.intp),
                        pair_is_positive=np.asarray(pp, dtype=bool))


def _pairwise(values: np.ndarray) -> np.ndarray:
    diff = values[:, None, :] - values[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def _sample_tuples(values, labels, cfg: TrainerConfig, rng) -> L.TupleBatch:
    if cfg.loss == "proxy-anchor":
        return L.TupleBatch()
    dist = _pairwise(values)
    if cfg.loss == "triplet":
        if cfg.sampler == "semi-hard":
            return L.semi_hard_sample(dist, labels, cfg.triplet_margin, rng)
        return _random_triplets(labels, rng)
    if cfg.sampler == "distance-weighted":
        norms = np.linalg.norm(values, axis=1)
        return L.distance_weighted_sample(dist, labels, values.shape[1], rng,
                                          row_norms=norms)
    return _random_pairs(labels, rng)


def _loss_from_tuples(feats: Node, class_idx, tuples: L.TupleBatch,
                      cfg: TrainerConfig, params: dict,
                      proxy_name: str, beta_name: str) -> Node | None:
    if cfg.loss == "triplet":
        return L.triplet_loss_node(feats, tuples, cfg.triplet_margin)
    if cfg.loss == "margin":
        beta = ad.parameter(beta_name, params[beta_name])
        return L.margin_loss_node(feats, tuples, class_idx, beta, cfg.margin_alpha)
    proxies = ad.parameter(proxy_name, params[proxy_name])
    return L.proxy_anchor_loss_node(feats, class_idx, proxies,
                                    cfg.proxy_scale, cfg.proxy_margin)


def _zero() -> Node:
    return ad.constant(0.0)


def build_forward(params: dict, x: np.ndarray, class_idx: np.ndarray,
                  cfg: TrainerConfig, rng: np.random.Generator,
                  frozen: FrozenChoices | None = None) -> ForwardState:
    """One full forward pass: ensemble, relational module, and all losses.

    ``class_idx`` maps each batch row to a train-class index (for proxy
    banks and margin boundaries).  With ``frozen`` given, the branch
    assignment and every sampled tuple are reused instead of recomputed,
    which makes the resulting loss a smooth function of the parameters.
    """
    m = cfg.model
    pinned = frozen.barriers if frozen is not None else None
    x_node = ad.constant(np.asarray(x, dtype=np.float64))
    ens = ensemble_forward(params, x_node, m, pinned)
    assignment = frozen.assignment if frozen is not None else ens.assignment
    rel = relational_forward(params, ens.y, ens.features, m, pinned)

    needs_unit = cfg.loss in ("margin", "proxy-anchor")

    # per-branch losses on each branch's assigned sub-batch
    per_branch = []
    branch_tuples = []
    for k in range(m.n_branches):
        sub = np.flatnonzero(assignment == k)
        feats = ad.gather_rows(ens.features[k], sub)
        if needs_unit and sub.size:
            feats = ad.normalize_rows(feats)
        if frozen is not None:
            tuples = frozen.branch_tuples[k]
        elif sub.size:
            tuples = _sample_tuples(feats.value, class_idx[sub], cfg, rng)
        else:
            tuples = L.TupleBatch()
        branch_tuples.append(tuples)
        if sub.size == 0:
            per_branch.append(_zero())
            continue
        term = _loss_from_tuples(feats, class_idx[sub], tuples, cfg, params,
                                 f"proxy.branch.{k}", f"beta.branch.{k}")
        per_branch.append(term if term is not None else _zero())
    j_ensem = per_branch[0]
    for t in per_branch[1:]:
        j_ensem = ad.add(j_ensem, t)

    # embedding loss on the relation-aware embedding
    z = rel.z
    if needs_unit and not m.normalize_embedding:
        z = ad.normalize_rows(z)
    if frozen is not None:
        emb_tuples = frozen.emb_tuples
    else:
        emb_tuples = _sample_tuples(z.value, class_idx, cfg, rng)
    j_emb = _loss_from_tuples(z, class_idx, emb_tuples, cfg, params,
                              "proxy.emb", "beta.emb")
    if j_emb is None:
        j_emb = _zero()

    total = ad.add(
        ad.add(ad.scalar_mul(cfg.weight_ensemble, j_ensem),
               ad.scalar_mul(cfg.lambda_recon, ens.j_recon)),
        ad.scalar_mul(cfg.lambda_embed, j_emb),
    )
    if pinned is None:
        pinned = {"y": ens.y.value}
        for k, g in enumerate(ens.features):
            pinned[f"g{k}"] = g.value
    choices = FrozenChoices(assignment, branch_tuples, emb_tuples, pinned)
    return ForwardState(ens, rel, j_ensem, ens.j_recon, j_emb,
                        per_branch, total, choices)


# ---------------------------------------------------------------------------
# optimization


@dataclass
class AdamState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, cfg: TrainerConfig) -> None:
    state.t += 1
    b1, b2, eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name in params:
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(params[name])
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
        v = state.v[name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name] = m
        state.v[name] = v
        lr = cfg.lr_trunk if name.startswith("trunk.") else cfg.lr_heads
        params[name] = params[name] - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        if name.startswith("beta."):
            params[name] = np.maximum(params[name], BETA_FLOOR)


@dataclass
class StepReport:
    step: int
    total: float
    j_ensem: float
    j_recon: float
    j_emb: float
    branch_ratios: np.ndarray

    def csv_row(self) -> str:
        ratios = ",".join(f"{r:.6f}" for r in self.branch_ratios)
        return (f"{self.step},{self.total:.12g},{self.j_ensem:.12g},"
                f"{self.j_recon:.12g},{self.j_emb:.12g},{ratios}")


def csv_header(n_branches: int) -> str:
    ratios = ",".join(f"ratio_{k}" for k in range(n_branches))
    return f"step,J,J_ensem,J_recon,J_emb,{ratios}"


def train_step(params: dict, x: np.ndarray, class_idx: np.ndarray,
               cfg: TrainerConfig, rng: np.random.Generator,
               adam: AdamState, step: int) -> StepReport:
    """One routed optimization step; parameters untouched if the loss blows up."""
    try:
        state = build_forward(params, x, class_idx, cfg, rng)
    except ad.GraphError as err:
        raise TrainingError(f"step {step} aborted: {err}") from err
    values = [float(state.total.value), float(state.j_ensem.value),
              float(state.j_recon.value), float(state.j_emb.value)]
    if not all(np.isfinite(values)):
        raise TrainingError(f"step {step} aborted: non-finite loss {values}")
    grads = ad.parameter_grads(state.total)
    adam_step(params, grads, adam, cfg)
    ratios = branch_usage(state.choices.assignment, cfg.model.n_branches)
    return StepReport(step, values[0], values[1], values[2], values[3], ratios)


@dataclass
class TrainResult:
    params: dict
    reports: list
    class_values: np.ndarray  # train label value per class index


def train(x: np.ndarray, labels: np.ndarray, cfg: TrainerConfig,
          callback=None) -> TrainResult:
    """Run ``cfg.steps`` training steps over a labeled feature matrix."""
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    class_values = np.unique(labels)
    class_of = {v: i for i, v in enumerate(class_values)}
    class_idx = np.array([class_of[v] for v in labels])

    seq = np.random.SeedSequence(cfg.seed)
    init_seed, sample_seed = seq.spawn(2)
    params = init_params(cfg, int(init_seed.generate_state(1)[0]), len(class_values))
    rng = np.random.default_rng(sample_seed)
    adam = AdamState()
    reports = []
    for step in range(cfg.steps):
        batch = L.build_batch(labels, cfg.batch_strategy, cfg.classes_per_batch,
                              cfg.batch_size, rng)
        report = train_step(params, x[batch], class_idx[batch], cfg, rng,
                            adam, step)
        reports.append(report)
        if callback is not None:
            callback(report, params)
    return TrainResult(params, reports, class_values)


def embed(params: dict, x: np.ndarray, model_cfg: ModelConfig,
          chunk: int = 256) -> np.ndarray:
    """Relation-aware embeddings for a feature matrix (inference only)."""
    x = np.asarray(x, dtype=np.float64)
    out = []
    for start in range(0, len(x), chunk):
        x_node = ad.constant(x[start:start + chunk])
        y = trunk_forward(params, x_node, model_cfg)
        feats = heads_forward(params, y, model_cfg)
        rel = relational_forward(params, y, feats, model_cfg)
        out.append(rel.z.value)
    return np.concatenate(out, axis=0)


def concat_embed(params: dict, x: np.ndarray, model_cfg: ModelConfig,
                 chunk: int = 256) -> np.ndarray:
    """Plain-concatenation ensemble embedding (no relational module)."""
    x = np.asarray(x, dtype=np.float64)
    out = []
    for start in range(0, len(x), chunk):
        x_node = ad.constant(x[start:start + chunk])
        y = trunk_forward(params, x_node, model_cfg)
        feats = heads_forward(params, y, model_cfg)
        z = np.concatenate([g.value for g in feats], axis=1)
        norms = np.linalg.norm(z, axis=1, keepdims=True)
        out.append(z / np.where(norms > 0, norms, 1.0))
    return np.concatenate(out, axis=0)
