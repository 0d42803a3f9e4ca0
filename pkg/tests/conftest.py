import numpy as np
import pytest

from ctrscope.data import FeatureSchema, GeneratorConfig, GroupSpec, build_ground_truth, sample_day
from ctrscope.net import ModelConfig, init_params

_CRITERIA: dict[str, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(label): acceptance criterion reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[rep.outcome]
        detail = "; ".join(v for k, v in item.user_properties if k == "detail")
        _CRITERIA[item.nodeid] = (marker.args[0], status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for label, status, detail in sorted(_CRITERIA.values(), key=lambda v: int(v[0].split(".")[0])):
        terminalreporter.write_line(f"{status}  {label}" + (f"  [{detail}]" if detail else ""))


@pytest.fixture
def small_schema():
    return FeatureSchema(
        (
            GroupSpec(0, "a", 7),
            GroupSpec(1, "b", 11),
            GroupSpec(2, "words", 13, (1, 3)),
            GroupSpec(3, "user", 50),
        )
    )


@pytest.fixture
def small_truth(small_schema):
    return build_ground_truth(
        GeneratorConfig(schema=small_schema, base_logit=-1.0, weight_scale=0.8, user_group=3, seed=3)
    )


@pytest.fixture
def small_data(small_truth):
    return sample_day(small_truth, 0, 400, seed=5)


def random_model(schema, seed, widths=(5, 4, 3), **kw):
    """Small model with non-zero biases so ReLU kinks are rare."""
    cfg = ModelConfig(embedding_dim=3, hidden_widths=widths, **kw)
    p = init_params(cfg, schema, seed)
    rng = np.random.default_rng(seed + 1000)
    for g in p.embeddings:
        p.embeddings[g] = rng.normal(0, 0.7, p.embeddings[g].shape)
    for k in range(len(p.weights)):
        p.weights[k] = rng.normal(0, 0.8, p.weights[k].shape)
        p.biases[k] = rng.normal(0, 0.3, p.biases[k].shape)
    if p.user_bias is not None:
        p.user_bias = rng.normal(0, 0.05, p.user_bias.shape)
    return p
