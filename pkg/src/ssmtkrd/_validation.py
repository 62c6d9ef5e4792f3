"""Input validation helpers shared by the estimators and free functions."""

from __future__ import annotations

import numbers

import numpy as np

from .exceptions import InvalidInputError, InvalidParameterError


def check_fraction(value, name, *, low_open=False, allow_none=False):
    if value is None and allow_none:
        return None
    if not isinstance(value, numbers.Real) or isinstance(value, bool):
        raise InvalidParameterError(f"{name} must be a real number, got {value!r}")
    value = float(value)
    ok = (0.0 < value <= 1.0) if low_open else (0.0 <= value <= 1.0)
    if not ok:
        interval = "(0, 1]" if low_open else "[0, 1]"
        raise InvalidParameterError(f"{name} must lie in {interval}, got {value}")
    return value


def check_positive_int(value, name, *, minimum=1):
    if not isinstance(value, numbers.Integral) or isinstance(value, bool) or value < minimum:
        raise InvalidParameterError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)


def check_tokens(X, name="X", *, ndim=3, dim=None):
    """Return ``X`` as a finite float64 array of the expected rank.

    2-D input is promoted to a batch of one when ``ndim == 3``.
    """
    X = np.asarray(X, dtype=np.float64)
    if ndim == 3 and X.ndim == 2:
        X = X[None]
    if X.ndim != ndim:
        raise InvalidParameterError(f"{name} must be {ndim}-D, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise InvalidInputError(f"{name} contains NaN or Inf")
    if dim is not None and X.shape[-1] != dim:
        raise InvalidParameterError(
            f"{name} last dimension is {X.shape[-1]}, expected {dim}")
    return X


def check_scores(s):
    s = np.asarray(s, dtype=np.float64)
    if s.ndim == 1:
        s = s[None]
    if s.ndim != 2:
        raise InvalidParameterError(f"scores must be 1-D or 2-D, got shape {s.shape}")
    if np.any(np.isnan(s)):
        raise InvalidInputError("scores contain NaN")
    return s
