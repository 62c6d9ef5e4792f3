"""Per-token importance scores computed from SSM hidden states."""

from __future__ import annotations

from enum import Enum

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_scores
from .exceptions import InvalidInputError, InvalidParameterError


class MetricKind(str, Enum):
    CLIP = "clip"
    L1 = "l1"
    L2 = "l2"
    UNCLIPPED = "raw"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        aliases = {"unclipped": cls.UNCLIPPED}
        try:
            return aliases.get(str(value).lower()) or cls(str(value).lower())
        except ValueError:
            raise InvalidParameterError(
                f"unknown metric {value!r}; choose from {[m.value for m in cls]}") from None


def importance(y, metric="clip"):
    """Importance score per token, averaged over the channel axis.

    ``clip``: mean of ``max(0, y)``; ``raw``: mean of ``y``; ``l1``: mean of
    ``|y|``; ``l2``: root mean square of ``y``. Input ``[..., L, E]`` gives
    output ``[..., L]``.
    """
    y = np.asarray(y, dtype=np.float64)
    if np.any(np.isnan(y)):
        raise InvalidInputError("hidden states contain NaN")
    kind = MetricKind.parse(metric)
    if kind is MetricKind.CLIP:
        return np.maximum(y, 0.0).mean(axis=-1)
    if kind is MetricKind.UNCLIPPED:
        return y.mean(axis=-1)
    if kind is MetricKind.L1:
        return np.abs(y).mean(axis=-1)
    return np.sqrt((y * y).mean(axis=-1))


def rank_tokens(s):
    """Ascending order of scores per row; ties go to the smaller position."""
    single = np.ndim(s) == 1
    order = np.argsort(check_scores(s), axis=-1, kind="stable")
    return order[0] if single else order


class TokenImportance(TransformerMixin, BaseEstimator):
    """Stateless transformer mapping hidden states ``[b, L, E]`` to scores ``[b, L]``."""

    def __init__(self, metric="clip"):
        self.metric = metric

    def fit(self, X=None, y=None):
        self.metric_ = MetricKind.parse(self.metric)
        return self

    def transform(self, X):
        return importance(X, self.metric)
