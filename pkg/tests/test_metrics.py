import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from ssmtkrd import InvalidInputError, InvalidParameterError, TokenImportance, importance, rank_tokens

finite = st.floats(-100, 100, allow_nan=False, allow_infinity=False)


@pytest.mark.parametrize("row, expected", [
    ([-3.0, -1.0], {"clip": 0.0}),
    ([1.0, -1.0], {"clip": 0.5, "raw": 0.0, "l1": 1.0, "l2": 1.0}),
    ([2.0, 2.0], {"clip": 2.0, "l1": 2.0, "l2": 2.0}),
])
def test_hand_values(row, expected):
    y = np.array([[row]])
    for metric, value in expected.items():
        assert importance(y, metric)[0, 0] == pytest.approx(value)


def test_unclipped_alias():
    y = np.array([[1.0, -3.0]])
    assert importance(y, "unclipped")[0] == importance(y, "raw")[0] == -1.0


def test_nan_rejected():
    with pytest.raises(InvalidInputError):
        importance(np.array([[np.nan, 1.0]]))


def test_unknown_metric():
    with pytest.raises(InvalidParameterError):
        importance(np.zeros((1, 2)), "attention")


@pytest.mark.parametrize("scores, order", [
    ([3, 1, 4, 2], [1, 3, 0, 2]),
    ([7, 7, 7, 7], [0, 1, 2, 3]),
    ([0, 0, 5], [0, 1, 2]),
])
def test_rank_tokens(scores, order):
    assert rank_tokens(np.array(scores, dtype=float)).tolist() == order


def test_rank_tokens_batched():
    assert rank_tokens(np.array([[2.0, 1.0], [1.0, 2.0]])).tolist() == [[1, 0], [0, 1]]


def test_transformer_api():
    est = TokenImportance(metric="l1")
    y = np.array([[[1.0, -3.0], [0.0, 2.0]]])
    np.testing.assert_allclose(est.fit_transform(y), [[2.0, 1.0]])
    assert est.get_params() == {"metric": "l1"}


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (5, 6), elements=finite))
def test_clip_nonnegative_and_below_l1(y):
    clip, l1, l2 = importance(y, "clip"), importance(y, "l1"), importance(y, "l2")
    assert np.all(clip >= 0) and np.all(l2 >= 0)
    assert np.all(clip <= l1 + 1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 5), elements=finite), st.floats(0.01, 0.99))
def test_clip_ignores_negative_channels(y, shrink):
    y2 = np.where(y < 0, y * shrink, y)  # stays negative
    np.testing.assert_array_equal(importance(y, "clip"), importance(y2, "clip"))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (6, 3), elements=st.integers(-20, 20).map(float)),
       st.sampled_from([0.5, 2.0, 4.0]))
def test_positive_scaling(y, c):
    # powers of two keep the arithmetic exact, so ranks must not change
    for metric in ("clip", "l1", "l2", "raw"):
        np.testing.assert_allclose(importance(c * y, metric), c * importance(y, metric))
        assert rank_tokens(importance(c * y, metric)).tolist() == \
            rank_tokens(importance(y, metric)).tolist()
