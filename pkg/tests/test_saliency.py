import numpy as np
import pytest

from conftest import random_model
from ctrscope.data import Dataset, FeatureSchema, GroupSpec, sample_features
from ctrscope.net import ModelConfig, init_params, predict
from ctrscope.saliency import group_saliency


def test_zero_params_give_zero_scores(small_schema, small_data):
    p = random_model(small_schema, 0).map(np.zeros_like)
    rep = group_saliency(p, small_data)
    assert not rep.scores.any() and not rep.logit_scores.any()


def test_single_active_unit_closed_form():
    # one hidden unit held in its linear region: pctr = sigmoid(w . h0 + const)
    schema = FeatureSchema((GroupSpec(0, "a", 5), GroupSpec(1, "b", 6, (1, 3)), GroupSpec(2, "c", 7)))
    p = init_params(ModelConfig(embedding_dim=3, hidden_widths=(1,)), schema, 1)
    w = np.random.default_rng(0).normal(size=9)
    p.weights[0][0] = w
    p.biases[0][0] = 50.0
    p.weights[1][0, 0] = 1.0
    p.biases[1][0] = -50.0
    data = sample_features(schema, 300, 2)
    rep = group_saliency(p, data, schema=schema)
    pctr = predict(p, data)
    slope = np.mean(pctr * (1 - pctr))
    for g in range(3):
        expected = slope * np.mean(np.abs(w[3 * g : 3 * g + 3]))
        assert rep.score_of(g) == pytest.approx(expected, rel=1e-12)
        assert rep.logit_scores[g] == pytest.approx(np.mean(np.abs(w[3 * g : 3 * g + 3])), rel=1e-12)
    assert rep.group_names == ["a", "b", "c"] and rep.n_samples == 300


def test_group_equivariance():
    schema = FeatureSchema((GroupSpec(0, "a", 9), GroupSpec(1, "b", 9), GroupSpec(2, "c", 4)))
    p = random_model(schema, 3)
    data = sample_features(schema, 200, 1)
    swapped_p = p.copy()
    swapped_p.embeddings[0], swapped_p.embeddings[1] = p.embeddings[1].copy(), p.embeddings[0].copy()
    d = p.config.embedding_dim
    cols = np.r_[d : 2 * d, 0:d, 2 * d : 3 * d]
    swapped_p.weights[0] = p.weights[0][:, cols]
    swapped_data = Dataset(
        data.day_index,
        data.schema_hash,
        data.labels,
        [data.ids[1], data.ids[0], data.ids[2]],
        [data.offsets[1], data.offsets[0], data.offsets[2]],
    )
    a = group_saliency(p, data)
    b = group_saliency(swapped_p, swapped_data)
    assert np.allclose(b.scores, a.scores[[1, 0, 2]], rtol=1e-12, atol=0)


def test_order_invariant_and_deterministic(small_schema, small_data):
    p = random_model(small_schema, 5)
    a = group_saliency(p, small_data)
    b = group_saliency(p, small_data.take(np.arange(len(small_data))[::-1]))
    assert np.allclose(a.scores, b.scores, rtol=1e-12, atol=0)
    c = group_saliency(p, small_data, sample_cap=100, seed=3)
    d = group_saliency(p, small_data, sample_cap=100, seed=3)
    assert np.array_equal(c.scores, d.scores) and c.n_samples == 100
    assert (a.scores >= 0).all()


def test_user_bias_mode_omits_user_group(small_schema, small_data):
    p = random_model(small_schema, 5, use_user_bias=True, user_group=3)
    assert group_saliency(p, small_data).group_ids == [0, 1, 2]


def test_empty_dataset(small_schema):
    with pytest.raises(ValueError):
        group_saliency(random_model(small_schema, 0), Dataset.from_instances(small_schema, 0, []))
