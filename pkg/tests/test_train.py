import math

import numpy as np
import pytest

from conftest import random_model
from ctrscope.data import Dataset, FeatureSchema, GeneratorConfig, GroupSpec, Instance, substream
from ctrscope.errors import SchemaError, ShapeError, TrainingDivergedError
from ctrscope.experiment import ExperimentConfig, apply_variant, run_ablation
from ctrscope.metrics import auc
from ctrscope.net import GradientSet, ModelConfig, backward_batch, forward_batch, init_params, predict
from ctrscope.train import AdagradState, MetricTimeline, TrainConfig, adagrad_step, train


def _zero_grads(params):
    return GradientSet(
        {g: (np.arange(len(e)), np.zeros_like(e)) for g, e in params.embeddings.items()},
        [np.zeros_like(w) for w in params.weights],
        [np.zeros_like(b) for b in params.biases],
        None,
        np.zeros((1, params.input_dim)),
    )


def _unit_grads(params):
    g = _zero_grads(params)
    g.weights = [np.ones_like(w) for w in params.weights]
    g.biases = [np.ones_like(b) for b in params.biases]
    return g


# ---------------------------------------------------------------- adagrad


def test_first_unit_step_size(small_schema):
    p = random_model(small_schema, 0)
    before = p.copy()
    state = AdagradState.create(p, 1e-4)
    adagrad_step(p, state, _unit_grads(p), 0.005)
    step = before.weights[0] - p.weights[0]
    assert np.allclose(step, 0.005 / math.sqrt(1.0001), rtol=1e-12, atol=0)
    assert 0.005 / math.sqrt(1.0001) == pytest.approx(0.0049997, abs=1e-7)


def test_second_unit_step_is_smaller(small_schema):
    p = random_model(small_schema, 0)
    state = AdagradState.create(p, 1e-4)
    w0 = p.biases[0].copy()
    adagrad_step(p, state, _unit_grads(p), 0.005)
    w1 = p.biases[0].copy()
    adagrad_step(p, state, _unit_grads(p), 0.005)
    first, second = w0 - w1, w1 - p.biases[0]
    assert np.allclose(second, 0.005 / math.sqrt(2.0001), rtol=1e-12, atol=0)
    assert np.all(second < first)


def test_zero_gradient_changes_nothing(small_schema):
    p = random_model(small_schema, 0)
    state = AdagradState.create(p, 1e-4)
    before, acc_before = p.copy(), state.accumulators.copy()
    adagrad_step(p, state, _zero_grads(p), 0.005)
    assert p.equals(before) and state.accumulators.equals(acc_before)


def test_shape_mismatch(small_schema):
    p = random_model(small_schema, 0)
    g = _zero_grads(p)
    g.weights[0] = np.zeros((2, 2))
    with pytest.raises(ShapeError):
        adagrad_step(p, AdagradState.create(p, 1e-4), g, 0.005)


def test_lazy_updates_and_monotone_accumulators(small_schema, small_data):
    p = random_model(small_schema, 1)
    state = AdagradState.create(p, 1e-4)
    for s in range(5):
        batch = small_data.take(np.arange(10 * s, 10 * s + 10))
        before, acc_before = p.copy(), state.accumulators.copy()
        g = backward_batch(p, forward_batch(p, batch), batch.labels)
        adagrad_step(p, state, g, 0.005)
        for (name, a), (_, b) in zip(state.accumulators.named_tensors(), acc_before.named_tensors()):
            assert np.all(a >= b) and np.all(a >= 1e-4), name
        for gid in p.groups:
            untouched = np.setdiff1d(np.arange(len(p.embeddings[gid])), batch.ids[gid])
            assert np.array_equal(p.embeddings[gid][untouched], before.embeddings[gid][untouched])


# ---------------------------------------------------------------- train loop


def test_config_validation():
    with pytest.raises(SchemaError):
        TrainConfig(init_accumulator=0).validate()
    with pytest.raises(SchemaError):
        TrainConfig(batch_size=0).validate()
    with pytest.raises(SchemaError):
        TrainConfig(learning_rate=-1).validate()


def test_zero_steps(small_schema, small_data):
    p = random_model(small_schema, 0)
    res = train(p, small_data, TrainConfig(max_steps=0))
    assert res.params.equals(p) and len(res.timeline) == 0 and res.steps_done == 0


def test_empty_training_set(small_schema):
    with pytest.raises(ValueError):
        train(random_model(small_schema, 0), Dataset.from_instances(small_schema, 0, []), TrainConfig())


def test_zero_learning_rate_keeps_params(small_schema, small_data):
    p = random_model(small_schema, 0)
    cfg = TrainConfig(learning_rate=0.0, max_steps=20, eval_every=5, batch_size=16)
    res = train(p, small_data, cfg, {"test1": small_data})
    assert res.params.equals(p)
    assert res.timeline.steps() == [5, 10, 15, 20]


def test_training_does_not_mutate_input(small_schema, small_data):
    p = random_model(small_schema, 0)
    before = p.copy()
    train(p, small_data, TrainConfig(max_steps=10, batch_size=16))
    assert p.equals(before)


def test_training_reproducible(small_schema, small_data):
    p = random_model(small_schema, 0, dropout_keep=0.8)
    cfg = TrainConfig(max_steps=60, eval_every=20, batch_size=16, seed=3)
    a = train(p, small_data, cfg, {"test1": small_data})
    b = train(p, small_data, cfg, {"test1": small_data})
    assert a.params.digest() == b.params.digest()
    assert a.timeline.to_csv() == b.timeline.to_csv()
    c = train(p, small_data, TrainConfig(max_steps=60, eval_every=20, batch_size=16, seed=4))
    assert c.params.digest() != a.params.digest()


def test_separable_toy_data_reaches_auc_one():
    schema = FeatureSchema((GroupSpec(0, "key", 2), GroupSpec(1, "noise", 10)))
    rng = substream(0, "toy")
    insts = []
    for _ in range(512):
        key = int(rng.integers(2))
        insts.append(Instance(key, [[key], [int(rng.integers(10))]]))
    data = Dataset.from_instances(schema, 0, insts)
    params = init_params(ModelConfig(embedding_dim=4, hidden_widths=(8, 4)), schema, 0)
    reached = []

    def stop_at_one(step, p, result):
        if result.timeline.value(step, "train", "auc") == 1.0:
            reached.append(step)
            return True
        return False

    cfg = TrainConfig(max_steps=2000, eval_every=50, batch_size=32)
    res = train(params, data, cfg, {"test1": data}, on_eval=stop_at_one)
    assert reached and reached[0] <= 2000
    assert auc(predict(res.params, data), data.labels) == 1.0


def test_best_step_tracks_selection_auc(small_schema, small_data):
    p = random_model(small_schema, 0)
    res = train(p, small_data, TrainConfig(max_steps=100, eval_every=20, batch_size=16), {"test1": small_data})
    steps, values = res.timeline.series("test1")
    assert res.best_step == steps[int(np.argmax(values))]
    assert res.best_value == values.max()
    assert auc(predict(res.best_params, small_data), small_data.labels) == res.best_value


def test_patience_stops_early(small_schema, small_data):
    p = random_model(small_schema, 0)
    cfg = TrainConfig(learning_rate=0.0, max_steps=1000, eval_every=10, batch_size=16, patience=3)
    res = train(p, small_data, cfg, {"test1": small_data})
    # constant AUC: first eval is best, then three more without improvement
    assert res.steps_done == 40


def test_hooks_see_frozen_snapshot(small_schema, small_data):
    seen = {}

    def hook(step, params):
        with pytest.raises(ValueError):
            params.weights[0][0, 0] = 1.0
        seen[step] = params.digest()
        return step

    p = random_model(small_schema, 0)
    res = train(p, small_data, TrainConfig(max_steps=40, eval_every=20, batch_size=16), hooks={"h": hook})
    assert res.timeline.hook_results == {"h": {20: 20, 40: 40}}
    assert seen[40] == res.params.digest()


def test_unknown_hook(small_schema, small_data):
    with pytest.raises(KeyError):
        train(random_model(small_schema, 0), small_data, TrainConfig(max_steps=1, hooks=("nope",)))


def test_non_finite_training_reports_step(small_schema, small_data):
    p = random_model(small_schema, 0)
    p.embeddings[0][:] = np.nan
    with pytest.raises(TrainingDivergedError) as e:
        train(p, small_data, TrainConfig(max_steps=5, batch_size=16))
    assert e.value.step == 1 and e.value.batch == 0


def test_timeline_csv_round_trip():
    t = MetricTimeline()
    t.add(200, "train", "auc", 0.1 + 0.2)
    t.add(200, "test1", "logloss", 1 / 3)
    text = t.to_csv()
    assert text.splitlines()[0] == "step,dataset,metric,value"
    back = MetricTimeline.from_csv(text)
    assert back.rows == t.rows


# ---------------------------------------------------------------- ablations


def test_variant_parsing():
    m = ModelConfig()
    assert apply_variant(m, "halve-layer-2", 9).hidden_widths == (256, 64, 64, 32)
    assert apply_variant(m, "double-layer-1", 9).hidden_widths == (512, 128, 64, 32)
    assert apply_variant(m, "remove-layer-4", 9).hidden_widths == (256, 128, 64)
    assert apply_variant(m, "l2=0.001", 9).l2 == 0.001
    assert apply_variant(m, "dropout=0.9", 9).dropout_keep == 0.9
    ub = apply_variant(m, "user-bias", 9)
    assert ub.use_user_bias and ub.user_group == 9
    assert m == ModelConfig()
    for bad in ("remove-layer-7", "shrink-layer-1", "user-bias-x", "dropout=0"):
        with pytest.raises((ValueError, SchemaError)):
            apply_variant(m, bad, 9)


def _tiny_experiment():
    schema = FeatureSchema(
        (GroupSpec(0, "a", 20), GroupSpec(1, "b", 30), GroupSpec(2, "w", 40, (1, 3)), GroupSpec(3, "user", 400))
    )
    exp = ExperimentConfig(n_train=1500, n_test=500, n_days=2)
    exp.generator = GeneratorConfig(schema=schema, base_logit=-1.5, user_group=3)
    exp.model = ModelConfig(embedding_dim=4, hidden_widths=(8, 6, 4, 3))
    exp.train = TrainConfig(max_steps=60, eval_every=20, batch_size=64)
    return exp


def test_identical_variant_is_bit_identical():
    rep = run_ablation(_tiny_experiment(), "baseline", seeds=[0, 1])
    assert rep.best_auc["baseline"] == rep.best_auc["variant"]
    assert rep.paired_deltas() == [0.0, 0.0]


def test_remove_layer_report():
    rep = run_ablation(_tiny_experiment(), "remove-layer-4", seeds=[0])
    rows = list(rep.rows())
    assert len(rows) == 2 * 2
    assert all(0.0 <= r[-1] <= 1.0 for r in rows)
    assert math.isfinite(rep.paired_deltas()[0])
