"""Layer-by-layer forward pass with scheduled token reduction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin, clone
from sklearn.utils.validation import check_is_fitted

from ._validation import check_tokens
from .exceptions import InvalidParameterError, InvalidPlanError
from .reduction import keep_count, make_reducer, reassemble
from .ssm_core import ModelConfig, TokenSequence, init_weights, selective_scan


@dataclass
class ForwardTrace:
    """``token_counts[l]`` is the sequence length entering layer ``l``.

    ``reductions`` maps each schedule layer to the reducer fitted there.
    ``states`` holds each layer's final recurrent state when requested.
    """

    token_counts: list = field(default_factory=list)
    reductions: dict = field(default_factory=dict)
    output_tokens: int = 0
    states: list = field(default_factory=list)


def _scan_layer(T_prev, weights):
    x = T_prev.data @ weights.in_proj.T.astype(np.float64)
    return selective_scan(x, weights, return_state=True)


def _plain_block(T_prev, weights):
    y, h = _scan_layer(T_prev, weights)
    T_next = y @ weights.out_proj.T.astype(np.float64) + T_prev.data
    return TokenSequence(T_next, T_prev.positions), h


def _reduced_block(T_prev, weights, reducer, keep_ratio):
    y, h = _scan_layer(T_prev, weights)
    n = T_prev.seq_len
    if n - keep_count(n, keep_ratio) > n - 1:
        raise InvalidPlanError(f"cannot remove {n - keep_count(n, keep_ratio)} of {n} tokens")
    fitted = clone(reducer).set_params(keep_ratio=keep_ratio).fit(y)
    hidden = fitted.transform(y)
    residual = fitted.transform_residual(T_prev.data)
    T_next = reassemble(hidden, residual, weights.out_proj, T_prev.positions,
                        fitted.kept_positions_, fitted.residual_kept_positions_)
    return T_next, fitted, h


def model_forward(tokens, weights, schedule=None, reducer=None, collect_states=False):
    """Run every layer, reducing tokens at the schedule's layers.

    At schedule layer ``l`` the scan runs on the full input, the reducer is
    fitted on that layer's ``y``, and its plan is applied to both the hidden
    branch and the residual branch ``T_{l-1}`` before they are added. Layer
    ``l + 1`` therefore sees the reduced sequence.

    Returns ``(final TokenSequence, ForwardTrace)``.
    """
    if not isinstance(tokens, TokenSequence):
        tokens = TokenSequence(tokens)
    num_layers = len(weights)
    layers, keep = (), 1.0
    if schedule is not None:
        layers, keep = tuple(schedule.layers), schedule.per_layer_keep
        if layers and max(layers) >= num_layers:
            raise InvalidParameterError(
                f"schedule layer {max(layers)} out of range for {num_layers} layers")
        if reducer is None:
            reducer = make_reducer(schedule.reducer_config)
    trace = ForwardTrace()
    T = tokens
    for layer, w in enumerate(weights):
        trace.token_counts.append(T.seq_len)
        if layer in layers and keep < 1.0:
            T, trace.reductions[layer], h = _reduced_block(T, w, reducer, keep)
        else:
            T, h = _plain_block(T, w)
        if collect_states:
            trace.states.append(h)
    trace.output_tokens = T.seq_len
    return T, trace


class SelectiveSSM(TransformerMixin, BaseEstimator):
    """Toy selective-SSM stack as a transformer over token activations.

    ``fit`` materialises the weights (from ``checkpoint`` if given, else from
    the seeded initialiser); ``transform`` maps ``[batch, L, model_dim]``
    activations to the final layer's output, applying ``schedule``.

    Parameters
    ----------
    num_layers, model_dim, inner_dim, state_dim, seed : int
        Used when no checkpoint is given.
    checkpoint : str or None
    schedule : ReductionSchedule or None
    reducer : estimator or None
        Overrides the reducer described by ``schedule.reducer_config``.
    """

    def __init__(self, num_layers=4, model_dim=16, inner_dim=32, state_dim=8, seed=0,
                 checkpoint=None, schedule=None, reducer=None):
        self.num_layers = num_layers
        self.model_dim = model_dim
        self.inner_dim = inner_dim
        self.state_dim = state_dim
        self.seed = seed
        self.checkpoint = checkpoint
        self.schedule = schedule
        self.reducer = reducer

    def fit(self, X=None, y=None):
        if self.checkpoint is not None:
            from .checkpoint import load_checkpoint
            self.config_, self.weights_ = load_checkpoint(self.checkpoint)
        else:
            self.config_ = ModelConfig(self.num_layers, self.model_dim, self.inner_dim,
                                       self.state_dim, seed=self.seed)
            self.weights_ = init_weights(self.config_)
        return self

    def forward(self, X):
        """Returns ``(TokenSequence, ForwardTrace)`` for the reduced pass."""
        check_is_fitted(self, "weights_")
        if isinstance(X, TokenSequence):
            tokens = X
        else:
            tokens = TokenSequence(check_tokens(X, dim=self.config_.model_dim))
        return model_forward(tokens, self.weights_, self.schedule, self.reducer)

    def transform(self, X):
        out, self.trace_ = self.forward(X)
        return out.data
