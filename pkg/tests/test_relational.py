import numpy as np
import pytest

from drml import autodiff as ad
from drml.config import ModelConfig, TrainerConfig
from drml.ensemble import ensemble_forward
from drml.relational import (
    distance,
    messages,
    meta_features,
    relation_aware_embedding,
    relation_matrix,
    relation_weights,
    relational_forward,
    update_features,
)
from drml.trainer import init_params, parameter_group


def small_cfg(**kw):
    defaults = dict(input_dim=4, trunk_out=4, n_branches=2,
                    feature_dim=3, update_dim=3)
    defaults.update(kw)
    return ModelConfig(**defaults)


def _full_forward(cfg, rng, seed=0):
    tcfg = TrainerConfig(model=cfg, batch_size=4)
    params = init_params(tcfg, seed, n_train_classes=2)
    x = ad.constant(rng.normal(size=(5, cfg.input_dim)))
    ens = ensemble_forward(params, x, cfg)
    rel = relational_forward(params, ens.y, ens.features, cfg)
    return params, ens, rel


def test_meta_features_zero_weights(rng):
    cfg = small_cfg()
    params = {}
    for k in range(2):
        params[f"meta_a.{k}.w"] = np.zeros((4, 3))
        params[f"meta_a.{k}.b"] = np.full(3, 1.0 + k)
        params[f"meta_b.{k}.w"] = np.zeros((4, 3))
        params[f"meta_b.{k}.b"] = np.full(3, -1.0 - k)
    y = ad.constant(rng.normal(size=(3, 4)))
    a, b = meta_features(params, y, cfg)
    for k in range(2):
        assert np.allclose(a[k].value, 1.0 + k)
        assert np.allclose(b[k].value, -1.0 - k)


def test_relation_matrix_hand_values():
    a = [ad.constant([[1.0, 2.0]])]
    b = [ad.constant([[0.5, 0.5]])]
    relations = relation_matrix(a, b)
    assert np.allclose(relations[0][0].value, [[0.5, 1.5]])


def test_relation_matrix_diagonal_zero_when_sides_equal(rng):
    feats = [ad.constant(rng.normal(size=(2, 3))) for _ in range(2)]
    relations = relation_matrix(feats, feats)
    for i in range(2):
        assert np.allclose(relations[i][i].value, 0.0)


def test_relation_matrix_full_grid(rng):
    a = [ad.constant(rng.normal(size=(2, 3))) for _ in range(2)]
    b = [ad.constant(rng.normal(size=(2, 3))) for _ in range(2)]
    relations = relation_matrix(a, b)
    for i in range(2):
        for j in range(2):
            assert np.allclose(relations[i][j].value, a[i].value - b[j].value)


def test_relation_weights_equal_scores_uniform():
    cfg = small_cfg()
    # zero score weights make every score equal to the bias
    params = {"score.w": np.zeros((3, 1)), "score.b": np.array([0.7])}
    relations = [[ad.constant(np.ones((2, 3))) for _ in range(2)]
                 for _ in range(2)]
    _, weights = relation_weights(params, relations, cfg)
    for w in weights:
        assert np.allclose(w.value, 0.5)


def test_relation_weights_softmax_arithmetic():
    cfg = small_cfg(feature_dim=1)
    params = {"score.w": np.array([[1.0]]), "score.b": np.array([0.0])}
    # scores over sources for target 0 are [ln 2, 0] -> weights [2/3, 1/3]
    relations = [
        [ad.constant([[np.log(2.0)]]), ad.constant([[np.log(2.0)]])],
        [ad.constant([[0.0]]), ad.constant([[0.0]])],
    ]
    _, weights = relation_weights(params, relations, cfg)
    assert np.allclose(weights[0].value, [[2.0 / 3.0, 1.0 / 3.0]])


def test_relation_weights_single_branch_is_one(rng):
    cfg = small_cfg(n_branches=1)
    params = {"score.w": rng.normal(size=(3, 1)), "score.b": rng.normal(size=1)}
    relations = [[ad.constant(rng.normal(size=(4, 3)))]]
    _, weights = relation_weights(params, relations, cfg)
    assert np.array_equal(weights[0].value, np.ones((4, 1)))


def test_relation_weights_literal_mode(rng):
    cfg = small_cfg(relation_normalization="literal")
    params = {"score.w": np.zeros((3, 1)), "score.b": np.array([2.0])}
    relations = [[ad.constant(rng.normal(size=(2, 3))) for _ in range(2)]
                 for _ in range(2)]
    _, weights = relation_weights(params, relations, cfg)
    assert np.allclose(weights[0].value, 2.0 / (4.0 + 1e-8))


def test_relation_weights_literal_rejects_zero_sum():
    cfg = small_cfg(relation_normalization="literal")
    params = {"score.w": np.zeros((3, 1)), "score.b": np.array([0.0])}
    relations = [[ad.constant(np.ones((1, 3))) for _ in range(2)]
                 for _ in range(2)]
    with pytest.raises(ad.GraphError, match="literal relation normalization"):
        relation_weights(params, relations, cfg)


def test_messages_uniform_weights():
    g1 = ad.constant([[1.0, 0.0]])
    g2 = ad.constant([[0.0, 1.0]])
    w = ad.constant([[0.5, 0.5]])
    msgs = messages([g1, g2], [w, w])
    for m in msgs:
        assert np.allclose(m.value, [[0.5, 0.5]])


def test_messages_one_hot_selects_source():
    g1 = ad.constant([[1.0, 2.0]])
    g2 = ad.constant([[3.0, 4.0]])
    w1 = ad.constant([[1.0, 0.0]])
    w2 = ad.constant([[0.0, 1.0]])
    msgs = messages([g1, g2], [w1, w2])
    assert np.allclose(msgs[0].value, g1.value)
    assert np.allclose(msgs[1].value, g2.value)


def test_messages_match_direct_sum(rng):
    feats = [rng.normal(size=(4, 3)) for _ in range(3)]
    raw = rng.uniform(0.1, 1.0, size=(3, 4, 3))  # [target, batch, source]
    raw /= raw.sum(axis=2, keepdims=True)
    weights = [ad.constant(raw[i]) for i in range(3)]
    msgs = messages([ad.constant(g) for g in feats], weights)
    for i in range(3):
        direct = sum(raw[i][:, [j]] * feats[j] for j in range(3))
        assert np.allclose(msgs[i].value, direct, atol=1e-14)


def test_updater_selects_feature_or_message(rng):
    g = [ad.constant(rng.normal(size=(2, 3)))]
    m = [ad.constant(rng.normal(size=(2, 3)))]
    select_g = np.vstack([np.eye(3), np.zeros((3, 3))])
    params = {"updater.w": select_g, "updater.b": np.zeros(3)}
    (u,) = update_features(params, g, m)
    assert np.allclose(u.value, g[0].value, atol=1e-15)
    params["updater.w"] = np.vstack([np.zeros((3, 3)), np.eye(3)])
    (u,) = update_features(params, g, m)
    assert np.allclose(u.value, m[0].value, atol=1e-15)


def test_updater_known_matrix(rng):
    g = rng.normal(size=(2, 2))
    m = rng.normal(size=(2, 2))
    w = rng.normal(size=(4, 2))
    b = rng.normal(size=2)
    params = {"updater.w": w, "updater.b": b}
    (u,) = update_features(params, [ad.constant(g)], [ad.constant(m)])
    assert np.allclose(u.value, np.hstack([g, m]) @ w + b, atol=1e-14)


def test_embedding_concat_and_normalize():
    u1 = ad.constant([[1.0, 0.0]])
    u2 = ad.constant([[0.0, 1.0]])
    raw = relation_aware_embedding([u1, u2], normalize=False)
    assert np.array_equal(raw.value, [[1.0, 0.0, 0.0, 1.0]])
    unit = relation_aware_embedding([u1, u2], normalize=True)
    assert np.allclose(unit.value, np.array([[1.0, 0.0, 0.0, 1.0]]) / np.sqrt(2))


def test_embedding_rows_unit_norm(rng):
    cfg = small_cfg()
    _, _, rel = _full_forward(cfg, rng)
    assert np.allclose(np.linalg.norm(rel.z.value, axis=1), 1.0, atol=1e-12)


def test_embedding_loss_routes_to_relational_params(rng):
    cfg = small_cfg(trunk_hidden=(4,))
    params, _, rel = _full_forward(cfg, rng)
    grads = ad.parameter_grads(ad.reduce_sum(rel.z))
    for name, g in grads.items():
        group = parameter_group(name)
        if group == "h":
            assert np.any(g != 0.0), name
        else:
            assert np.all(g == 0.0), name


def test_distance_identical_and_hand_value():
    assert distance([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert distance([0.0, 3.0], [4.0, 0.0]) == pytest.approx(5.0)


def test_distance_rejects_mismatch():
    with pytest.raises(ValueError, match="dimension mismatch"):
        distance([1.0], [1.0, 2.0])


def test_relational_forward_pinned_matches_live(rng):
    cfg = small_cfg(trunk_hidden=(4,))
    tcfg = TrainerConfig(model=cfg, batch_size=4)
    params = init_params(tcfg, 9, n_train_classes=2)
    # offset keeps every hidden relu row alive, so no embedding row is zero
    x = ad.constant(rng.normal(size=(4, 4)) + 2.0)
    ens = ensemble_forward(params, x, cfg)
    pinned = {"y": ens.y.value}
    for k, g in enumerate(ens.features):
        pinned[f"g{k}"] = g.value
    live = relational_forward(params, ens.y, ens.features, cfg)
    replay = relational_forward(params, ens.y, ens.features, cfg, pinned)
    assert np.allclose(replay.z.value, live.z.value, atol=1e-15)
