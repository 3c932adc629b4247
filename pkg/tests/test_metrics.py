import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mortnet.metrics import operating_point, roc_auc

from helpers import pairwise_auc


def test_auc_examples():
    assert roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert roc_auc([0.3] * 6, [0, 1, 0, 1, 1, 0]) == 0.5


def test_auc_matches_pairwise_on_200_points():
    rng = np.random.default_rng(0)
    s = np.round(rng.normal(size=200), 1)  # rounding forces ties
    y = rng.integers(0, 2, 200)
    assert abs(roc_auc(s, y) - pairwise_auc(s, y)) <= 1e-12


def test_auc_single_class_rejected():
    with pytest.raises(ValueError):
        roc_auc([0.1, 0.2], [1, 1])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(-5, 5), st.integers(0, 1)), min_size=2, max_size=60))
def test_auc_invariant_under_increasing_transform(pairs):
    s = np.array([p[0] for p in pairs], dtype=float)
    y = np.array([p[1] for p in pairs])
    if y.min() == y.max():
        return
    base = roc_auc(s, y)
    assert roc_auc(np.exp(s) * 3 + 1, y) == pytest.approx(base, abs=1e-15)
    assert base == pytest.approx(pairwise_auc(s, y), abs=1e-12)


def test_operating_point_examples():
    scores = [0.9, 0.4, 0.6, 0.2]
    labels = [1, 1, 0, 0]
    assert operating_point(scores, labels, 0.5) == (0.5, 0.5)
    assert operating_point(scores, labels, 0.0)[0] == 1.0
    assert operating_point(scores, labels, 0.95) == (0.0, 1.0)


def test_operating_point_threshold_is_inclusive():
    assert operating_point([0.5, 0.1], [1, 0], 0.5) == (1.0, 1.0)
