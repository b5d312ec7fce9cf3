"""Configuration dataclasses and the `key = value` config-file reader."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

LOSS_KINDS = ("triplet", "margin", "proxy-anchor")
SAMPLER_KINDS = ("semi-hard", "distance-weighted", "random")
BATCH_STRATEGIES = ("balanced", "random")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    input_dim: int = 32
    trunk_hidden: tuple = ()
    trunk_out: int = 32
    n_branches: int = 4
    feature_dim: int = 128
    update_dim: int = 128
    normalize_embedding: bool = True
    relation_normalization: str = "softmax"  # or "literal"
    # False with trunk_hidden=() gives the identity trunk
    linear_trunk: bool = True

    def __post_init__(self):
        self.trunk_hidden = tuple(int(h) for h in self.trunk_hidden)
        if self.input_dim < 1 or self.trunk_out < 1:
            raise ConfigError("dims must be positive")
        if any(h < 1 for h in self.trunk_hidden):
            raise ConfigError("hidden layer sizes must be >= 1")
        if self.n_branches < 1 or self.feature_dim < 1 or self.update_dim < 1:
            raise ConfigError("n_branches, feature_dim, update_dim must be >= 1")
        if not self.trunk_hidden and not self.linear_trunk and self.input_dim != self.trunk_out:
            raise ConfigError("identity trunk requires input_dim == trunk_out")
        if self.relation_normalization not in ("softmax", "literal"):
            raise ConfigError(f"unknown relation normalization {self.relation_normalization!r}")

    @property
    def embedding_dim(self):
        return self.n_branches * self.update_dim


@dataclass
class TrainerConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: str = "triplet"
    sampler: str = "semi-hard"
    batch_strategy: str = "balanced"
    classes_per_batch: int = 20
    batch_size: int = 80
    steps: int = 1000
    seed: int = 0
    lambda_recon: float = 0.1
    lambda_embed: float = 10.0
    weight_ensemble: float = 1.0
    lr_trunk: float = 1e-5
    lr_heads: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    triplet_margin: float = 0.2
    margin_alpha: float = 0.2
    margin_beta_init: float = 1.2
    proxy_scale: float = 32.0
    proxy_margin: float = 0.1

    def __post_init__(self):
        if self.loss not in LOSS_KINDS:
            raise ConfigError(f"unknown loss kind {self.loss!r}")
        if self.sampler not in SAMPLER_KINDS:
            raise ConfigError(f"unknown sampler kind {self.sampler!r}")
        if self.batch_strategy not in BATCH_STRATEGIES:
            raise ConfigError(f"unknown batch strategy {self.batch_strategy!r}")
        if self.lambda_recon < 0 or self.lambda_embed < 0:
            raise ConfigError("loss weights must be >= 0")
        if self.lr_trunk <= 0 or self.lr_heads <= 0:
            raise ConfigError("learning rates must be > 0")
        if self.batch_size < 1 or self.steps < 0:
            raise ConfigError("batch_size must be >= 1 and steps >= 0")


@dataclass
class SynthConfig:
    n_classes: int = 8
    samples_per_class: int = 64
    input_dim: int = 32
    n_factors: int = 4
    class_scale: float = 1.0
    factor_scale: float = 0.5
    noise_scale: float = 0.05
    seed: int = 1

    def __post_init__(self):
        if self.n_classes < 1 or self.samples_per_class < 1 or self.input_dim < 1:
            raise ConfigError("synth dims must be positive")
        if self.n_factors < 2:
            raise ConfigError("n_factors must be >= 2")
        if min(self.class_scale, self.factor_scale, self.noise_scale) < 0:
            raise ConfigError("scales must be >= 0")


def _apply_section(cls, section: dict, nested=()):
    names = {f.name for f in dataclasses.fields(cls)} - set(nested)
    unknown = set(section) - names
    if unknown:
        raise ConfigError(f"unknown config key {sorted(unknown)[0]!r} for {cls.__name__}")
    return {k: (tuple(v) if isinstance(v, list) else v) for k, v in section.items()}


def load_config(path) -> tuple[TrainerConfig, SynthConfig]:
    """Read a config file with [model], [trainer], and [synth] sections."""
    with open(path, "rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as err:
            raise ConfigError(f"malformed config file: {err}") from err
    known = {"model", "trainer", "synth"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config section {sorted(unknown)[0]!r}")
    model = ModelConfig(**_apply_section(ModelConfig, raw.get("model", {})))
    trainer_kw = _apply_section(TrainerConfig, raw.get("trainer", {}), nested=("model",))
    trainer = TrainerConfig(model=model, **trainer_kw)
    synth = SynthConfig(**_apply_section(SynthConfig, raw.get("synth", {})))
    return trainer, synth


def _canonical(obj) -> str:
    if dataclasses.is_dataclass(obj):
        pairs = []
        for f in sorted(dataclasses.fields(obj), key=lambda f: f.name):
            pairs.append(f"{f.name}={_canonical(getattr(obj, f.name))}")
        return "{" + ",".join(pairs) + "}"
    if isinstance(obj, float):
        return repr(obj)
    if isinstance(obj, (tuple, list)):
        return "[" + ",".join(_canonical(v) for v in obj) + "]"
    return repr(obj)


def config_digest(cfg: TrainerConfig) -> bytes:
    """Stable 32-byte digest of a trainer config, stored in checkpoints."""
    return hashlib.sha256(_canonical(cfg).encode()).digest()
