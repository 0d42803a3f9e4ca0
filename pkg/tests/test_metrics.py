import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctrscope.errors import UndefinedMetricError
from ctrscope.metrics import auc, logloss, score_histogram


def pairwise_auc(scores, labels):
    """O(n^2) oracle: P(positive outranks negative), ties count 1/2."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins2 = 0
    for p in pos:
        for q in neg:
            wins2 += 2 if p > q else (1 if p == q else 0)
    return wins2 / (2 * len(pos) * len(neg))


def test_auc_examples():
    assert auc([0.1, 0.9], [0, 1]) == 1.0
    assert auc([0.3, 0.3, 0.3, 0.3], [0, 1, 0, 1]) == 0.5
    assert auc([0.8, 0.5, 0.3], [1, 0, 1]) == 0.5
    assert pairwise_auc([0.8, 0.5, 0.3], [1, 0, 1]) == 0.5


def test_auc_single_class():
    with pytest.raises(UndefinedMetricError):
        auc([0.1, 0.2], [1, 1])
    with pytest.raises(UndefinedMetricError):
        auc([], [])


def test_auc_matches_pairwise_oracle_on_100_sets():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(2, 1001))
        # coarse grid of values forces many ties
        scores = rng.integers(0, int(rng.integers(2, 50)), n) / 7.0
        labels = rng.integers(0, 2, n)
        labels[:2] = [0, 1]
        assert abs(auc(scores, labels) - pairwise_auc(scores.tolist(), labels.tolist())) <= 1e-12


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.tuples(st.integers(-20, 20), st.integers(0, 1)), min_size=2, max_size=120).filter(
        lambda v: 0 < sum(y for _, y in v) < len(v)
    )
)
def test_auc_oracle_property(pairs):
    scores = [s / 4 for s, _ in pairs]
    labels = [y for _, y in pairs]
    assert abs(auc(scores, labels) - pairwise_auc(scores, labels)) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_auc_monotone_invariance_and_complement(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 300))
    s = np.clip(np.round(rng.uniform(0, 1, n), 2), 0.01, 0.99)
    y = rng.integers(0, 2, n)
    y[:2] = [0, 1]
    a = auc(s, y)
    assert auc(s**3, y) == a
    assert auc(np.log(s / (1 - s)), y) == a
    assert a + auc(s, 1 - y) == pytest.approx(1.0, abs=1e-15)


def test_logloss_examples():
    assert logloss([0.5, 0.5], [0, 1]) == pytest.approx(math.log(2), rel=1e-15)
    assert logloss([0.0, 1.0], [0, 1]) == pytest.approx(0.0, abs=1e-6)
    with pytest.raises(ValueError):
        logloss([], [])


def test_logloss_matches_naive_sum():
    rng = np.random.default_rng(1)
    p = rng.uniform(0.001, 0.999, 5000)
    y = rng.integers(0, 2, 5000)
    naive = math.fsum(-(math.log(pi) if yi else math.log(1 - pi)) for pi, yi in zip(p, y)) / len(p)
    assert logloss(p, y) == pytest.approx(naive, rel=1e-12)


def test_histogram_all_at_normalizer():
    h = score_histogram(np.full(10, 0.08), np.array([1] * 3 + [0] * 7), 0.08)
    j = int(np.flatnonzero(h.counts_pos + h.counts_neg)[0])
    assert h.bin_edges[j] <= 1.0 < h.bin_edges[j + 1]
    assert h.counts_pos[j] == 3 and h.counts_neg[j] == 7


def test_histogram_layout_and_conservation():
    rng = np.random.default_rng(2)
    s = rng.uniform(0, 0.6, 1000)
    y = rng.integers(0, 2, 1000)
    h = score_histogram(s, y, 0.1)
    assert len(h.bin_edges) == 102 and len(h.counts_pos) == 101
    assert np.all(np.diff(h.bin_edges) > 0)
    assert h.bin_edges[100] == 5.0 and h.bin_edges[-1] == np.inf
    assert h.counts_pos.sum() == y.sum() and h.total == 1000
    assert h.counts_pos[-1] + h.counts_neg[-1] == np.sum(s / 0.1 >= 5.0)
    rows = list(h.rows())
    assert len(rows) == 101 and rows[0][:2] == (0.0, 0.05)


def test_histogram_rejects_bad_normalizer():
    with pytest.raises(ValueError):
        score_histogram([0.1], [1], 0.0)
