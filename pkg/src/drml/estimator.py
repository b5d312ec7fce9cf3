"""Scikit-learn style front end for the relational metric learner."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .config import ModelConfig, TrainerConfig
from .metrics import pairwise_distances, recall_at_k
from .trainer import concat_embed, embed, train


class RelationalMetricLearner(BaseEstimator, TransformerMixin):
    """Metric-learning transformer over an adaptive feature ensemble.

    ``fit`` trains the ensemble, its reconstruction decoders, and the
    relational module jointly; ``transform`` maps feature vectors to
    relation-aware embeddings suited for Euclidean retrieval.

    Parameters mirror the trainer configuration; see the README for the
    full key reference.
    """

    def __init__(self, n_branches=4, feature_dim=128, update_dim=128,
                 trunk_hidden=(), linear_trunk=True, trunk_out=None,
                 normalize_embedding=True, relation_normalization="softmax",
                 loss="triplet", sampler="semi-hard", batch_strategy="balanced",
                 classes_per_batch=20, batch_size=80, steps=1000, seed=0,
                 lambda_recon=0.1, lambda_embed=10.0, weight_ensemble=1.0,
                 lr_trunk=1e-5, lr_heads=1e-4, triplet_margin=0.2,
                 margin_alpha=0.2, margin_beta_init=1.2,
                 proxy_scale=32.0, proxy_margin=0.1, relational=True):
        self.n_branches = n_branches
        self.feature_dim = feature_dim
        self.update_dim = update_dim
        self.trunk_hidden = trunk_hidden
        self.linear_trunk = linear_trunk
        self.trunk_out = trunk_out
        self.normalize_embedding = normalize_embedding
        self.relation_normalization = relation_normalization
        self.loss = loss
        self.sampler = sampler
        self.batch_strategy = batch_strategy
        self.classes_per_batch = classes_per_batch
        self.batch_size = batch_size
        self.steps = steps
        self.seed = seed
        self.lambda_recon = lambda_recon
        self.lambda_embed = lambda_embed
        self.weight_ensemble = weight_ensemble
        self.lr_trunk = lr_trunk
        self.lr_heads = lr_heads
        self.triplet_margin = triplet_margin
        self.margin_alpha = margin_alpha
        self.margin_beta_init = margin_beta_init
        self.proxy_scale = proxy_scale
        self.proxy_margin = proxy_margin
        self.relational = relational

    def _trainer_config(self, n_features: int) -> TrainerConfig:
        out = self.trunk_out if self.trunk_out is not None else n_features
        model = ModelConfig(
            input_dim=n_features,
            trunk_hidden=tuple(self.trunk_hidden),
            trunk_out=out,
            n_branches=self.n_branches,
            feature_dim=self.feature_dim,
            update_dim=self.update_dim,
            normalize_embedding=self.normalize_embedding,
            relation_normalization=self.relation_normalization,
            linear_trunk=self.linear_trunk,
        )
        return TrainerConfig(
            model=model, loss=self.loss, sampler=self.sampler,
            batch_strategy=self.batch_strategy,
            classes_per_batch=self.classes_per_batch,
            batch_size=self.batch_size, steps=self.steps, seed=self.seed,
            lambda_recon=self.lambda_recon, lambda_embed=self.lambda_embed,
            weight_ensemble=self.weight_ensemble,
            lr_trunk=self.lr_trunk, lr_heads=self.lr_heads,
            triplet_margin=self.triplet_margin, margin_alpha=self.margin_alpha,
            margin_beta_init=self.margin_beta_init,
            proxy_scale=self.proxy_scale, proxy_margin=self.proxy_margin,
        )

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.config_ = self._trainer_config(X.shape[1])
        result = train(X, y, self.config_)
        self.params_ = result.params
        self.reports_ = result.reports
        self.classes_ = result.class_values
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(
                f"X has {X.shape[1]} features; expected {self.n_features_in_}"
            )
        if self.relational:
            return embed(self.params_, X, self.config_.model)
        return concat_embed(self.params_, X, self.config_.model)

    def score(self, X, y):
        """Recall@1 of the embedded samples (self excluded as a neighbor)."""
        z = self.transform(X)
        return recall_at_k(pairwise_distances(z), np.asarray(y), 1)
