import os
import struct

import numpy as np
import pytest

from drml.checkpoint import load_checkpoint, save_checkpoint
from drml.config import ConfigError, SynthConfig, TrainerConfig, config_digest, load_config
from drml.data import (
    Dataset,
    FormatError,
    gen_synthetic,
    load_features,
    save_features,
    zero_shot_split,
)
from drml.metrics import pairwise_distances, recall_at_k


# ---------------------------------------------------------------------------
# synthetic generation


def test_gen_synthetic_shape_and_labels():
    cfg = SynthConfig(n_classes=3, samples_per_class=5, input_dim=8)
    data = gen_synthetic(cfg)
    assert data.features.shape == (15, 8)
    assert np.array_equal(np.unique(data.labels), [0, 1, 2])
    assert np.all(np.bincount(data.labels) == 5)


def test_gen_synthetic_deterministic():
    cfg = SynthConfig(seed=9)
    d1, d2 = gen_synthetic(cfg), gen_synthetic(cfg)
    assert np.array_equal(d1.features, d2.features)
    assert np.array_equal(d1.labels, d2.labels)


def test_gen_synthetic_zero_noise_collapses_classes():
    cfg = SynthConfig(n_classes=2, samples_per_class=4, input_dim=6,
                      factor_scale=0.0, noise_scale=0.0)
    data = gen_synthetic(cfg)
    for c in range(2):
        rows = data.features[data.labels == c]
        assert np.allclose(rows, rows[0])
    # identical class samples give perfect raw retrieval
    r1 = recall_at_k(pairwise_distances(data.features), data.labels, 1)
    assert r1 == 1.0


def test_gen_synthetic_default_scales_separable():
    data = gen_synthetic(SynthConfig())
    r1 = recall_at_k(pairwise_distances(data.features), data.labels, 1)
    assert r1 >= 0.95  # raw-feature NN baseline on constructed data


# ---------------------------------------------------------------------------
# zero-shot split


def test_zero_shot_split_rule():
    labels = np.repeat(np.arange(10, dtype=np.uint32), 2)
    data = Dataset(np.zeros((20, 1)), labels)
    train, test = zero_shot_split(data)
    assert set(train.labels) == set(range(5))
    assert set(test.labels) == set(range(5, 10))


def test_zero_shot_split_two_classes():
    data = Dataset(np.zeros((4, 1)), np.array([3, 3, 7, 7], dtype=np.uint32))
    train, test = zero_shot_split(data)
    assert set(train.labels) == {3}
    assert set(test.labels) == {7}


def test_zero_shot_split_needs_labels():
    with pytest.raises(ValueError, match="labels"):
        zero_shot_split(Dataset(np.zeros((2, 1)), None))


def test_zero_shot_split_needs_two_classes():
    with pytest.raises(ValueError, match="two classes"):
        zero_shot_split(Dataset(np.zeros((2, 1)), np.zeros(2, dtype=np.uint32)))


# ---------------------------------------------------------------------------
# FMAT format


def test_fmat_round_trip(tmp_path, rng):
    path = tmp_path / "data.fmat"
    original = Dataset(rng.normal(size=(5, 3)).astype(np.float32).astype(np.float64),
                       np.array([0, 1, 2, 1, 0], dtype=np.uint32))
    save_features(path, original)
    loaded = load_features(path)
    assert np.array_equal(loaded.features, original.features)
    assert np.array_equal(loaded.labels, original.labels)


def test_fmat_unlabeled(tmp_path, rng):
    path = tmp_path / "raw.fmat"
    save_features(path, Dataset(np.zeros((2, 4)), None))
    assert load_features(path).labels is None


def test_fmat_wrong_magic(tmp_path):
    path = tmp_path / "bad.fmat"
    path.write_bytes(b"NOPE" + b"\x00" * 30)
    with pytest.raises(FormatError, match="not a FMAT file"):
        load_features(path)


def test_fmat_truncated(tmp_path, rng):
    path = tmp_path / "trunc.fmat"
    save_features(path, Dataset(rng.normal(size=(4, 4)), None))
    blob = path.read_bytes()
    path.write_bytes(blob[:-8])
    with pytest.raises(FormatError, match="expected .* bytes"):
        load_features(path)


def test_fmat_bad_version(tmp_path):
    path = tmp_path / "version.fmat"
    payload = b"FMAT" + struct.pack("<IQQB", 99, 0, 0, 0)
    path.write_bytes(payload)
    with pytest.raises(FormatError, match="version 99"):
        load_features(path)


def test_fmat_write_is_atomic(tmp_path, rng):
    path = tmp_path / "atomic.fmat"
    save_features(path, Dataset(rng.normal(size=(2, 2)), None))
    # no stray temp files left in the directory
    assert os.listdir(tmp_path) == ["atomic.fmat"]


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip_bitwise(tmp_path, rng):
    cfg = TrainerConfig()
    params = {"trunk.0.w": rng.normal(size=(3, 3)),
              "head.0.b": rng.normal(size=4),
              "beta.emb": np.array(1.2)}
    path = tmp_path / "model.drml"
    save_checkpoint(path, params, cfg)
    loaded = load_checkpoint(path, cfg)
    assert set(loaded) == set(params)
    for name in params:
        assert np.array_equal(loaded[name], np.asarray(params[name], dtype=np.float64))


def test_checkpoint_digest_mismatch_warns(tmp_path, rng):
    path = tmp_path / "model.drml"
    save_checkpoint(path, {"score.w": rng.normal(size=(2, 1))}, TrainerConfig())
    with pytest.warns(UserWarning, match="digest"):
        load_checkpoint(path, TrainerConfig(seed=123))


def test_checkpoint_missing_param_rejected(tmp_path, rng):
    path = tmp_path / "model.drml"
    save_checkpoint(path, {"score.w": rng.normal(size=(2, 1))}, TrainerConfig())
    with pytest.raises(FormatError, match="missing parameter 'score.b'"):
        load_checkpoint(path, expected_shapes={"score.w": (2, 1), "score.b": (1,)})


def test_checkpoint_extra_param_rejected(tmp_path, rng):
    path = tmp_path / "model.drml"
    save_checkpoint(path, {"score.w": np.ones((2, 1)), "rogue": np.ones(1)},
                    TrainerConfig())
    with pytest.raises(FormatError, match="unexpected parameter 'rogue'"):
        load_checkpoint(path, expected_shapes={"score.w": (2, 1)})


def test_checkpoint_shape_mismatch_rejected(tmp_path):
    path = tmp_path / "model.drml"
    save_checkpoint(path, {"score.w": np.ones((2, 1))}, TrainerConfig())
    with pytest.raises(FormatError, match="shape"):
        load_checkpoint(path, expected_shapes={"score.w": (3, 1)})


def test_checkpoint_truncation_detected(tmp_path):
    path = tmp_path / "model.drml"
    save_checkpoint(path, {"score.w": np.ones((4, 4))}, TrainerConfig())
    blob = path.read_bytes()
    path.write_bytes(blob[:-16])
    with pytest.raises(FormatError, match="truncated"):
        load_checkpoint(path)


def test_checkpoint_wrong_magic(tmp_path):
    path = tmp_path / "model.drml"
    path.write_bytes(b"XXXX" + b"\x00" * 60)
    with pytest.raises(FormatError, match="not a DRML checkpoint"):
        load_checkpoint(path)


# ---------------------------------------------------------------------------
# config files


def test_load_config_sections(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text(
        "[model]\nn_branches = 3\nfeature_dim = 16\ntrunk_hidden = [8, 8]\n"
        "[trainer]\nloss = \"margin\"\nsteps = 50\n"
        "[synth]\nn_classes = 4\n"
    )
    trainer, synth = load_config(path)
    assert trainer.model.n_branches == 3
    assert trainer.model.trunk_hidden == (8, 8)
    assert trainer.loss == "margin" and trainer.steps == 50
    assert synth.n_classes == 4


def test_load_config_rejects_unknown_key(tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text("[trainer]\nmystery = 1\n")
    with pytest.raises(ConfigError, match="mystery"):
        load_config(path)


def test_load_config_rejects_unknown_section(tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text("[rocket]\nthrust = 1\n")
    with pytest.raises(ConfigError, match="rocket"):
        load_config(path)


def test_load_config_rejects_malformed(tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text("[trainer\nsteps = 1\n")
    with pytest.raises(ConfigError, match="malformed"):
        load_config(path)


def test_config_validation_errors():
    with pytest.raises(ConfigError):
        TrainerConfig(loss="hinge")
    with pytest.raises(ConfigError):
        TrainerConfig(lr_trunk=0.0)
    with pytest.raises(ConfigError):
        SynthConfig(n_factors=1)


def test_config_digest_stable_and_sensitive():
    assert config_digest(TrainerConfig()) == config_digest(TrainerConfig())
    assert config_digest(TrainerConfig()) != config_digest(TrainerConfig(seed=1))
    assert len(config_digest(TrainerConfig())) == 32
