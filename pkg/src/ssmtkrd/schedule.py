"""Hierarchical reduction schedules and the analytical FLOPS / memory model."""

from __future__ import annotations

from dataclasses import dataclass, field

from ._validation import check_fraction
from .exceptions import InfeasibleTargetError, InvalidParameterError

# elementwise FLOPs per (channel, state) pair per token: discretize, update, read out
SCAN_FLOPS_PER_STATE = 6
SOLVER_TOLERANCE = 1e-3
SOLVER_ITERATIONS = 40

# reduction layers used for the 64-layer (2.7B/2.8B) and 48-layer (1.3B/1.4B) models
LAYERS_64 = (12, 17, 22, 27, 32, 37, 42)
LAYERS_48 = (10, 15, 20, 25, 30, 35)
# location ablation lists, evaluated on a 64-layer model
LOCATION_LISTS = (
    (20, 25, 30, 35, 40, 45, 50),
    (18, 23, 28, 33, 38, 43, 48),
    (16, 21, 26, 31, 36, 41, 46),
    (14, 19, 24, 29, 34, 39, 44),
    (10, 15, 20, 25, 30, 35, 40),
    (12, 17, 22, 27, 32, 37, 42),
)


@dataclass(frozen=True)
class ReductionSchedule:
    layers: tuple
    per_layer_keep: float = 1.0
    reducer_config: dict = field(default_factory=lambda: {"reducer": "utrc"})
    min_start_layer: int = 10
    stride: int = 5

    def __post_init__(self):
        layers = tuple(int(v) for v in self.layers)
        object.__setattr__(self, "layers", layers)
        check_fraction(self.per_layer_keep, "per_layer_keep", low_open=True)
        if any(b <= a for a, b in zip(layers, layers[1:])):
            raise InvalidParameterError(f"schedule layers must be strictly increasing: {layers}")
        if layers and layers[0] < self.min_start_layer:
            raise InvalidParameterError(
                f"first reduction layer {layers[0]} is before min_start_layer={self.min_start_layer}")
        if any(b - a < self.stride for a, b in zip(layers, layers[1:])):
            raise InvalidParameterError(f"schedule layers closer than stride={self.stride}: {layers}")

    @classmethod
    def from_dict(cls, d, **kwargs):
        """Accepts ``{"layers": [...], "per_layer_keep": r}`` plus optional reducer keys."""
        d = dict(d)
        layers = d.pop("layers")
        keep = d.pop("per_layer_keep", 1.0)
        d.pop("target_flops_reduction", None)
        opts = {k: d.pop(k) for k in ("min_start_layer", "stride") if k in d}
        reducer = d.pop("reducer_config", None) or {k: v for k, v in d.items()}
        if "reducer" not in reducer:
            reducer["reducer"] = "utrc"
        return cls(tuple(layers), keep, reducer, **{**opts, **kwargs})


@dataclass(frozen=True)
class FlopsReport:
    per_layer_flops: tuple  # (layer, tokens_in, flops)
    total_baseline: float
    total_reduced: float

    @property
    def reduction_fraction(self):
        return 1.0 - self.total_reduced / self.total_baseline


@dataclass(frozen=True)
class MemoryReport:
    peak_reduced: float
    peak_baseline: float

    @property
    def ratio(self):
        return self.peak_reduced / self.peak_baseline


def estimate_layer_flops(tokens, config):
    """Matmul-dominant FLOPs of one block for ``tokens`` tokens (2 FLOPs per MAC)."""
    D, E, N = config.model_dim, config.inner_dim, config.state_dim
    return tokens * (2 * D * E + 2 * E * D + SCAN_FLOPS_PER_STATE * E * N)


def hierarchical_layers(num_layers, start=10, stride=5, count=None):
    """Every ``stride`` layers from ``start`` while inside the model."""
    layers = list(range(start, num_layers, stride))
    return tuple(layers[:count] if count is not None else layers)


def scale_layers(layers, to_depth, from_depth=64):
    """Rescale a layer list defined for ``from_depth`` layers onto a shallower model.

    Start and stride are scaled separately so the list stays evenly spaced.
    Indices that fall past the last layer are dropped.
    """
    layers = list(layers)
    if to_depth == from_depth:
        return tuple(layers)
    f = to_depth / from_depth
    start = int(round(layers[0] * f))
    stride = max(1, int(round((layers[1] - layers[0]) * f))) if len(layers) > 1 else 1
    return tuple(v for v in (start + i * stride for i in range(len(layers))) if v < to_depth)


def simulate_trace(seq_len, num_layers, layers, keep_ratio):
    """Continuous token counts entering each layer when every schedule layer keeps ``keep_ratio``."""
    tokens = float(seq_len)
    trace = []
    layers = set(layers)
    for layer in range(num_layers):
        trace.append(tokens)
        if layer in layers:
            tokens *= keep_ratio
    return trace


def flops_report(trace, config, seq_len=None):
    """FLOPs of a token trace against an unreduced pass of ``seq_len`` tokens."""
    seq_len = trace[0] if seq_len is None else seq_len
    per_layer = tuple((i, t, estimate_layer_flops(t, config)) for i, t in enumerate(trace))
    return FlopsReport(
        per_layer_flops=per_layer,
        total_baseline=float(sum(estimate_layer_flops(seq_len, config) for _ in trace)),
        total_reduced=float(sum(f for _, _, f in per_layer)),
    )


def simulated_reduction(keep_ratio, layers, config, seq_len):
    trace = simulate_trace(seq_len, config.num_layers, layers, keep_ratio)
    return flops_report(trace, config).reduction_fraction


def max_achievable_reduction(layers, config, seq_len):
    """Supremum of the FLOPS reduction as the keep ratio goes to zero."""
    return simulated_reduction(0.0, layers, config, seq_len)


def solve_keep_ratio(target_reduction, schedule_layers, config, seq_len):
    """Per-layer keep ratio whose simulated FLOPS reduction hits ``target_reduction``.

    Bisection on ``r`` in ``(0, 1]``; the reduction decreases monotonically in
    ``r``. Raises :class:`InfeasibleTargetError` when the target is not below
    the reduction reachable as ``r -> 0``.
    """
    target = float(target_reduction)
    if not 0.0 <= target < 1.0:
        raise InvalidParameterError(f"target reduction must lie in [0, 1), got {target}")
    if target == 0.0:
        return 1.0
    layers = [l for l in schedule_layers if l < config.num_layers]
    best = max_achievable_reduction(layers, config, seq_len)
    if target >= best:
        raise InfeasibleTargetError(
            f"target reduction {target:.4f} is not reachable with layers {list(schedule_layers)}; "
            f"achievable maximum is {best:.4f}", best)
    lo, hi = 0.0, 1.0  # reduction(lo) > target >= reduction(hi)
    for _ in range(SOLVER_ITERATIONS):
        mid = 0.5 * (lo + hi)
        if simulated_reduction(mid, layers, config, seq_len) > target:
            lo = mid
        else:
            hi = mid
    r = hi
    achieved = simulated_reduction(r, layers, config, seq_len)
    if abs(achieved - target) > SOLVER_TOLERANCE:  # pragma: no cover - bisection guarantees this
        raise InfeasibleTargetError(f"solver did not converge: {achieved} vs {target}", best)
    return r


def estimate_activation_memory(trace, config):
    """Peak activation units, ``max_l tokens_l * (D + D')``, against the unreduced peak."""
    if not len(trace):
        raise InvalidParameterError("trace must be nonempty")
    width = config.model_dim + config.inner_dim
    return MemoryReport(
        peak_reduced=float(max(trace) * width),
        peak_baseline=float(trace[0] * width),
    )
