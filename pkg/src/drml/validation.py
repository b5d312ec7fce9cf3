"""Finite-difference validation of the full training objective."""

from __future__ import annotations

import numpy as np

from .autodiff import GradCheckReport, grad_check
from .config import ModelConfig, TrainerConfig
from .trainer import build_forward, init_params

FIXTURE = dict(input_dim=16, trunk_out=16, feature_dim=8, update_dim=8,
               n_branches=3, batch=12, classes=3)


def fixture_config(loss: str = "triplet") -> TrainerConfig:
    model = ModelConfig(
        input_dim=FIXTURE["input_dim"],
        trunk_hidden=(FIXTURE["input_dim"],),
        trunk_out=FIXTURE["trunk_out"],
        n_branches=FIXTURE["n_branches"],
        feature_dim=FIXTURE["feature_dim"],
        update_dim=FIXTURE["update_dim"],
    )
    return TrainerConfig(model=model, loss=loss, batch_size=FIXTURE["batch"])


def full_gradient_check(seed: int = 7, loss: str = "triplet",
                        step: float = 1e-5) -> GradCheckReport:
    """Check the composed objective (all three terms) against central
    differences, with branch assignment and sampled tuples frozen."""
    cfg = fixture_config(loss)
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(FIXTURE["batch"], FIXTURE["input_dim"]))
    class_idx = np.repeat(np.arange(FIXTURE["classes"]),
                          FIXTURE["batch"] // FIXTURE["classes"])
    params = init_params(cfg, seed, FIXTURE["classes"])
    sample_rng = np.random.default_rng(seed + 1)
    state = build_forward(params, x, class_idx, cfg, sample_rng)
    frozen = state.choices

    def loss_fn(p):
        return build_forward(p, x, class_idx, cfg, None, frozen=frozen).total

    return grad_check(loss_fn, params, step=step)
