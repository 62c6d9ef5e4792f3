"""Forward engine for a stack of simplified selective-SSM blocks.

Each block is ``in_proj -> selective scan -> out_proj -> + residual``. The
scan output ``y`` is returned alongside the block output so a token
reducer can act on it before the branches recombine.

Shapes used throughout: ``batch`` is ``b``, sequence length ``L``,
``model_dim`` is ``D``, ``inner_dim`` is ``E`` and ``state_dim`` is ``N``.
The recurrent state has shape ``(b, E, N)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from ._validation import check_positive_int, check_tokens
from .exceptions import InvalidParameterError, UnsupportedModeError
from .rng import Xoshiro256StarStar

SERIES_THRESHOLD = 1e-4

LAYER_TENSORS = (
    "in_proj",
    "out_proj",
    "A_diag",
    "B_proj",
    "B_bias",
    "C_proj",
    "C_bias",
    "delta_proj",
    "delta_bias",
)


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int
    model_dim: int
    inner_dim: int
    state_dim: int
    seq_len_max: int = 2048
    seed: int = 0

    def __post_init__(self):
        for name in ("num_layers", "model_dim", "inner_dim", "state_dim", "seq_len_max"):
            check_positive_int(getattr(self, name), name)
        if not 0 <= int(self.seed) < 2**64:
            raise InvalidParameterError(f"seed must be a 64-bit unsigned integer, got {self.seed}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: int(d[k]) for k in cls.__dataclass_fields__ if k in d})

    def layer_shapes(self):
        D, E, N = self.model_dim, self.inner_dim, self.state_dim
        return {
            "in_proj": (E, D),
            "out_proj": (D, E),
            "A_diag": (E, N),
            "B_proj": (N, E),
            "B_bias": (N,),
            "C_proj": (N, E),
            "C_bias": (N,),
            "delta_proj": (E, E),
            "delta_bias": (E,),
        }


@dataclass(frozen=True)
class LayerWeights:
    """Parameters of one block, stored as float32 (the checkpoint precision).

    Matrices follow the ``out_features x in_features`` convention, so a
    projection is ``x @ W.T``.
    """

    in_proj: np.ndarray
    out_proj: np.ndarray
    A_diag: np.ndarray
    B_proj: np.ndarray
    B_bias: np.ndarray
    C_proj: np.ndarray
    C_bias: np.ndarray
    delta_proj: np.ndarray
    delta_bias: np.ndarray

    def __post_init__(self):
        for name in LAYER_TENSORS:
            arr = np.array(getattr(self, name), dtype=np.float32)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if np.any(self.A_diag >= 0):
            raise InvalidParameterError("A_diag entries must be strictly negative")

    def tensors(self):
        return {name: getattr(self, name) for name in LAYER_TENSORS}

    def replace(self, **changes):
        return LayerWeights(**{**self.tensors(), **changes})


@dataclass(frozen=True)
class TokenSequence:
    """Activations ``[batch, seq_len, dim]`` plus each token's original index."""

    data: np.ndarray
    positions: np.ndarray = field(default=None)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[None]
        if data.ndim != 3:
            raise InvalidParameterError(f"token data must be 3-D, got shape {data.shape}")
        if self.positions is None:
            positions = np.broadcast_to(np.arange(data.shape[1]), data.shape[:2]).copy()
        else:
            positions = np.asarray(self.positions, dtype=np.int64)
            if positions.ndim == 1:
                positions = np.broadcast_to(positions, data.shape[:2]).copy()
            if positions.shape != data.shape[:2]:
                raise InvalidParameterError(
                    f"positions shape {positions.shape} does not match data {data.shape[:2]}")
            if positions.shape[1] > 1 and np.any(np.diff(positions, axis=1) <= 0):
                raise InvalidParameterError("positions must be strictly increasing")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "positions", positions)

    @property
    def batch(self):
        return self.data.shape[0]

    @property
    def seq_len(self):
        return self.data.shape[1]


def softplus(z):
    """``log(1 + exp(z))``, floored at the smallest positive double so it stays > 0."""
    return np.maximum(np.logaddexp(0.0, z), np.finfo(np.float64).tiny)


def _expm1_over_z(z):
    """``(exp(z) - 1) / z`` with a second-order series near zero."""
    z = np.asarray(z, dtype=np.float64)
    small = np.abs(z) < SERIES_THRESHOLD
    safe = np.where(small, 1.0, z)
    exact = np.expm1(safe) / safe
    zs = np.where(small, z, 0.0)
    series = 1.0 + zs / 2.0 + zs * zs / 6.0
    return np.where(small, series, exact)


def discretize(A_diag, B_t, delta_t):
    """Zero-order-hold discretization of a diagonal continuous system.

    Returns ``A_bar = exp(delta*A)`` and
    ``B_bar = (delta*A)^-1 (exp(delta*A) - 1) * delta * B``, elementwise.
    Arguments broadcast against each other.
    """
    delta_t = np.asarray(delta_t, dtype=np.float64)
    A_diag = np.asarray(A_diag, dtype=np.float64)
    if np.any(~(delta_t > 0)):
        raise InvalidParameterError("delta must be strictly positive")
    if np.any(A_diag == 0):
        raise InvalidParameterError("A_diag entries must be nonzero")
    z = delta_t * A_diag
    A_bar = np.exp(z)
    B_bar = _expm1_over_z(z) * delta_t * np.asarray(B_t, dtype=np.float64)
    return A_bar, B_bar


def selective_params(x, weights):
    """Per-token ``(delta [b,L,E], B [b,L,N], C [b,L,N])`` from projected input."""
    x = np.asarray(x, dtype=np.float64)
    delta = softplus(x @ weights.delta_proj.T.astype(np.float64)
                     + weights.delta_bias.astype(np.float64))
    B = x @ weights.B_proj.T.astype(np.float64) + weights.B_bias.astype(np.float64)
    C = x @ weights.C_proj.T.astype(np.float64) + weights.C_bias.astype(np.float64)
    return delta, B, C


def scan(x, delta, A_diag, B, C, h0=None):
    """Left-to-right recurrence ``h_t = A_bar h_{t-1} + B_bar x_t``, ``y_t = C_t h_t``.

    x, delta: ``[b, L, E]``; A_diag: ``[E, N]``; B, C: ``[b, L, N]``.
    Returns ``(y [b, L, E], h_last [b, E, N])``.
    """
    b, L, E = x.shape
    A = np.asarray(A_diag, dtype=np.float64)
    h = np.zeros((b, E, A.shape[-1])) if h0 is None else np.array(h0, dtype=np.float64)
    y = np.empty((b, L, E))
    # discretize for the whole sequence at once, the loop only carries state
    A_bar, B_bar = discretize(A, B[:, :, None, :], delta[..., None])
    Bx = B_bar * x[..., None]
    for t in range(L):
        h = A_bar[:, t] * h + Bx[:, t]
        y[:, t] = np.einsum("ben,bn->be", h, C[:, t])
    return y, h


def selective_scan(x, weights, *, return_state=False, h0=None):
    """Run the selective SSM over projected input ``x [b, L, E]``; ``h_0 = 0``."""
    x = check_tokens(x, "x", dim=weights.in_proj.shape[0])
    delta, B, C = selective_params(x, weights)
    y, h = scan(x, delta, weights.A_diag, B, C, h0=h0)
    return (y, h) if return_state else y


def kernel_convolve(x, A_bar, B_bar, C):
    """Output of a time-invariant SSM through its global convolution kernel.

    ``K[k] = C A_bar^k B_bar`` per channel and ``y = x * K`` (causal).
    A_bar, B_bar: ``[E, N]`` (or ``[L, E, N]`` if constant over time); C:
    ``[N]`` or ``[L, N]`` likewise. x: ``[b, L, E]``.
    """
    x = check_tokens(x, "x")
    L = x.shape[1]
    A_bar, B_bar, C = (_time_invariant(v, name, nd) for v, name, nd in
                       ((A_bar, "A_bar", 2), (B_bar, "B_bar", 2), (C, "C", 1)))
    powers = A_bar[None] ** np.arange(L)[:, None, None]  # [L, E, N]
    K = np.einsum("n,ken->ke", C, powers * B_bar[None])  # [L, E]
    y = np.zeros_like(x)
    for t in range(L):
        # y_t = sum_k K[k] x_{t-k}
        y[:, t] = np.einsum("ke,bke->be", K[: t + 1], x[:, t::-1])
    return y


def _time_invariant(v, name, nd):
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == nd:
        return v
    if v.ndim == nd + 1:
        if not np.all(v == v[:1]):
            raise UnsupportedModeError(
                f"kernel_convolve needs time-invariant parameters; {name} varies over time")
        return v[0]
    if v.ndim == nd + 2:
        # batch + time axes, as produced by selective_params
        if not np.all(v == v.reshape(-1, *v.shape[2:])[:1]):
            raise UnsupportedModeError(
                f"kernel_convolve needs time-invariant parameters; {name} varies over time")
        return v[0, 0]
    raise InvalidParameterError(f"{name} has unexpected shape {v.shape}")


def block_forward(T_prev, weights):
    """One block. Returns ``(T_next, y)``; ``y`` is the scan output."""
    data = T_prev.data if isinstance(T_prev, TokenSequence) else np.asarray(T_prev)
    D = weights.in_proj.shape[1]
    if data.ndim != 3 or data.shape[-1] != D:
        raise InvalidParameterError(f"tokens have shape {data.shape}, expected [..., {D}]")
    x = data @ weights.in_proj.T.astype(np.float64)
    y = selective_scan(x, weights)
    T_next = y @ weights.out_proj.T.astype(np.float64) + data
    if isinstance(T_prev, TokenSequence):
        T_next = TokenSequence(T_next, T_prev.positions)
    return T_next, y


def init_layer_weights(config, rng):
    """Draw one layer's parameters from ``rng`` in ``LAYER_TENSORS`` order.

    Every tensor is uniform in ``+-1/sqrt(fan_in)`` (biases use the fan-in of
    their projection) except ``A_diag = -exp(u)`` with ``u`` uniform in
    ``[0, ln 16]``. Values are drawn row-major, one tensor after another.
    """
    out = {}
    for name, shape in config.layer_shapes().items():
        if name == "A_diag":
            val = -np.exp(rng.uniform(0.0, math.log(16.0), shape))
        else:
            fan_in = shape[1] if len(shape) == 2 else config.inner_dim
            bound = 1.0 / math.sqrt(fan_in)
            val = rng.uniform(-bound, bound, shape)
        out[name] = val.astype(np.float32)
    return LayerWeights(**out)


def init_weights(config):
    rng = Xoshiro256StarStar(int(config.seed))
    return [init_layer_weights(config, rng) for _ in range(config.num_layers)]


def recurrent_step(token, weights, h):
    """Advance one block by a single token ``[b, D]`` given its state ``h [b, E, N]``."""
    token = np.asarray(token, dtype=np.float64)
    x = token @ weights.in_proj.T.astype(np.float64)
    delta, B, C = selective_params(x[:, None], weights)
    y, h = scan(x[:, None], delta, weights.A_diag, B, C, h0=h)
    return y[:, 0] @ weights.out_proj.T.astype(np.float64) + token, h
