"""Token reducers: importance-classified hybrid prune/merge (UTRC) and baselines.

A reducer is fitted on one layer's SSM output ``y`` (``[batch, L, E]``).
Fitting produces, per batch item, the surviving positions and the merge
pairs for each branch. ``transform`` applies the plan to the hidden branch
and ``transform_residual`` to the residual branch; both keep the same
positions, so the branches can be added back together.

Merging follows a group mean: a kept token ``b`` that absorbs the tokens
``a_1..a_m`` becomes ``(b + a_1 + ... + a_m) / (m + 1)``, which is the
pairwise average ``(a + b) / 2`` when a single token is merged into it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_fraction, check_tokens
from .exceptions import InvalidInputError, InvalidParameterError, InvalidPlanError
from .metrics import MetricKind, importance, rank_tokens
from .ssm_core import TokenSequence

PRUNE = "prune"
MERGE = "merge"
RESIDUAL_MODES = ("merge", "prune", "hybrid")

_EPS = 1e-9


def keep_count(n, keep_ratio):
    """Number of tokens that survive a keep ratio: ``ceil(keep_ratio * n)``."""
    return max(0, min(n, math.ceil(keep_ratio * n - _EPS)))


def _round_half_up(x):
    return int(math.floor(x + 0.5 + _EPS))


@dataclass(frozen=True)
class TokenClassification:
    """Positions split into the less important ``set_a`` and the rest ``set_b``.

    Both are sorted by position.
    """

    set_a: np.ndarray
    set_b: np.ndarray


@dataclass(frozen=True)
class Connection:
    a_index: int
    b_index: int
    similarity: float


@dataclass(frozen=True)
class ReductionPlan:
    """Which connections remove a token, and how each branch treats them.

    ``a_index``/``b_index`` of a connection are token positions within the
    layer input. ``kept_positions`` is shared by both branches.
    """

    seq_len: int
    connections_retained: tuple
    assignment: tuple
    residual_assignment: tuple
    kept_positions: np.ndarray
    p: float
    q: float
    residual_mode: str = "merge"

    @property
    def removed_positions(self):
        return np.array(sorted(c.a_index for c in self.connections_retained), dtype=np.int64)

    @property
    def hidden_merges(self):
        return [(c.a_index, c.b_index)
                for c, mode in zip(self.connections_retained, self.assignment) if mode == MERGE]

    @property
    def residual_merges(self):
        return [(c.a_index, c.b_index)
                for c, mode in zip(self.connections_retained, self.residual_assignment)
                if mode == MERGE]


def classify(s):
    """Split positions by ascending importance: the first ``L // 2`` form ``set_a``.

    With an odd length the extra token lands in ``set_b``.
    """
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 1:
        raise InvalidParameterError(f"classify expects a 1-D score row, got shape {s.shape}")
    if s.shape[0] < 2:
        raise InvalidInputError(f"need at least 2 tokens to classify, got {s.shape[0]}")
    order = rank_tokens(s)
    half = s.shape[0] // 2
    return TokenClassification(np.sort(order[:half]), np.sort(order[half:]))


def normalize_rows(X):
    X = np.asarray(X, dtype=np.float64)
    norms = np.sqrt((X * X).sum(axis=-1, keepdims=True))
    # zero vectors stay zero, giving similarity 0 to everything
    return np.divide(X, norms, out=np.zeros_like(X), where=norms > 0)


def cosine_similarity(A, B):
    """Pairwise cosine similarity ``[len(A), len(B)]``.

    Computed as an elementwise product summed over features rather than a
    matrix product, so identical rows always give bit-identical values.
    """
    An, Bn = normalize_rows(A), normalize_rows(B)
    return (An[:, None, :] * Bn[None, :, :]).sum(axis=-1)


def _best_matches(sim):
    # argmax returns the first maximum, i.e. the smallest column index on ties
    best = np.argmax(sim, axis=1)
    return best, sim[np.arange(sim.shape[0]), best]


def build_connections(tokens, cls):
    """Connect every ``set_a`` token to its most similar ``set_b`` token."""
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 2:
        raise InvalidParameterError(f"tokens must be [seq_len, dim], got shape {tokens.shape}")
    set_a, set_b = np.asarray(cls.set_a), np.asarray(cls.set_b)
    if set_a.size == 0:
        return []
    sim = cosine_similarity(tokens[set_a], tokens[set_b])
    best, best_sim = _best_matches(sim)
    return [Connection(int(a), int(set_b[j]), float(g))
            for a, j, g in zip(set_a, best, best_sim)]


def _assign(retained, q, s):
    """Prune the ``round(q * k)`` retained connections with the least important a-token."""
    k = len(retained)
    n_prune = _round_half_up(q * k)
    a_idx = np.array([c.a_index for c in retained], dtype=np.int64)
    order = np.lexsort((a_idx, s[a_idx])) if k else np.array([], dtype=np.int64)
    modes = [MERGE] * k
    for i in order[:n_prune]:
        modes[i] = PRUNE
    return tuple(modes)


def retain_and_assign(conns, p, q, s, *, residual_mode="merge", residual_q=None):
    """Keep the ``ceil(p * len(conns))`` most similar connections and label them.

    Similarity ties are resolved towards the smaller a-position. ``s`` is the
    full score row of the layer (its length is the sequence length).
    """
    p = check_fraction(p, "p")
    q = check_fraction(q, "q")
    s = np.asarray(s, dtype=np.float64)
    if residual_mode not in RESIDUAL_MODES:
        raise InvalidParameterError(f"residual_mode must be one of {RESIDUAL_MODES}")
    conns = list(conns)
    k = math.ceil(p * len(conns) - _EPS)
    if conns:
        sims = np.array([c.similarity for c in conns])
        a_idx = np.array([c.a_index for c in conns])
        order = np.lexsort((a_idx, -sims))[:k]
    else:
        order = []
    retained = tuple(conns[i] for i in order)
    assignment = _assign(retained, q, s)
    if residual_mode == "merge":
        residual = (MERGE,) * len(retained)
    elif residual_mode == "prune":
        residual = (PRUNE,) * len(retained)
    else:
        residual = _assign(retained, check_fraction(residual_q, "residual_q"), s)
    removed = {c.a_index for c in retained}
    kept = np.array([i for i in range(s.shape[-1]) if i not in removed], dtype=np.int64)
    return ReductionPlan(
        seq_len=int(s.shape[-1]),
        connections_retained=retained,
        assignment=assignment,
        residual_assignment=residual,
        kept_positions=kept,
        p=p,
        q=q,
        residual_mode=residual_mode,
    )


def merge_and_select(X, kept_positions, merges):
    """Average each merged token into its target, then keep ``kept_positions`` rows."""
    X = np.asarray(X, dtype=np.float64)
    kept_positions = np.asarray(kept_positions, dtype=np.int64)
    if merges:
        out = X.copy()
        groups = {}
        for a, b in merges:
            groups.setdefault(b, []).append(a)
        for b, sources in groups.items():
            acc = X[b].copy()
            for a in sources:
                acc = acc + X[a]
            out[b] = acc / (len(sources) + 1)
        X = out
    return X[kept_positions]


def _check_plan_len(X, plan):
    if np.shape(X)[0] != plan.seq_len:
        raise InvalidPlanError(
            f"plan built for {plan.seq_len} tokens applied to {np.shape(X)[0]}")


def apply_plan_hidden(y_branch, plan):
    _check_plan_len(y_branch, plan)
    return merge_and_select(y_branch, plan.kept_positions, plan.hidden_merges)


def apply_plan_residual(T_prev_branch, plan):
    _check_plan_len(T_prev_branch, plan)
    return merge_and_select(T_prev_branch, plan.kept_positions, plan.residual_merges)


def reassemble(hidden_reduced, residual_reduced, out_proj, positions=None,
               kept_positions=None, residual_kept_positions=None):
    """Recombine the two reduced branches: ``out_proj(hidden) + residual``.

    ``positions`` are the original indices of the layer input; the output
    keeps ``positions[kept_positions]``.
    """
    hidden = np.asarray(hidden_reduced, dtype=np.float64)
    residual = np.asarray(residual_reduced, dtype=np.float64)
    if hidden.ndim == 2:
        hidden, residual = hidden[None], residual[None]
    if hidden.shape[:2] != residual.shape[:2]:
        raise InvalidPlanError(
            f"branch length mismatch: hidden {hidden.shape[:2]} vs residual {residual.shape[:2]}")
    if residual_kept_positions is not None and not np.array_equal(
            kept_positions, residual_kept_positions):
        raise InvalidPlanError("hidden and residual branches removed different positions")
    data = hidden @ np.asarray(out_proj, dtype=np.float64).T + residual
    if positions is None:
        return TokenSequence(data)
    positions = np.asarray(positions, dtype=np.int64)
    if positions.ndim == 1:
        positions = positions[None]
    if kept_positions is None:
        new_positions = positions
    else:
        kept = np.asarray(kept_positions, dtype=np.int64).reshape(hidden.shape[:2])
        new_positions = np.take_along_axis(positions, kept, axis=1)
    return TokenSequence(data, new_positions)


def baseline_evit_prune(s, keep_ratio):
    """Positions of the ``ceil(keep_ratio * L)`` most important tokens, in order."""
    keep_ratio = check_fraction(keep_ratio, "keep_ratio", low_open=True)
    s = np.asarray(s, dtype=np.float64)
    n = s.shape[-1]
    order = rank_tokens(s)
    return np.sort(order[n - keep_count(n, keep_ratio):])


def _bipartite_plan(tokens, keep_ratio):
    tokens = np.asarray(tokens, dtype=np.float64)
    n = tokens.shape[0]
    n_remove = n - keep_count(n, keep_ratio)
    if n_remove == 0:
        return np.arange(n), []
    set_a, set_b = np.arange(0, n, 2), np.arange(1, n, 2)
    if n_remove > set_a.size or set_b.size == 0:
        raise InvalidPlanError(
            f"bipartite merge can remove at most {set_a.size if set_b.size else 0} "
            f"of {n} tokens, asked for {n_remove}")
    sim = cosine_similarity(tokens[set_a], tokens[set_b])
    best, best_sim = _best_matches(sim)
    order = np.lexsort((set_a, -best_sim))[:n_remove]
    merges = [(int(set_a[i]), int(set_b[best[i]])) for i in order]
    removed = {a for a, _ in merges}
    kept = np.array([i for i in range(n) if i not in removed], dtype=np.int64)
    return kept, merges


def baseline_bipartite_merge(tokens, keep_ratio):
    """Importance-blind even/odd bipartite merging.

    Even positions connect to their most similar odd position; the most
    similar ``L - ceil(keep_ratio * L)`` connections are merged.
    Returns ``(reduced_tokens, kept_positions)``.
    """
    keep_ratio = check_fraction(keep_ratio, "keep_ratio", low_open=True)
    kept, merges = _bipartite_plan(tokens, keep_ratio)
    return merge_and_select(tokens, kept, merges), kept


class _BaseReducer(TransformerMixin, BaseEstimator):
    """Shared fit/transform plumbing.

    Subclasses implement ``_plan_row(y_row)`` returning
    ``(kept_positions, hidden_merges, residual_merges)``.
    """

    def fit(self, X, y=None):
        X = check_tokens(X, "hidden states")
        check_fraction(self.keep_ratio, "keep_ratio", low_open=True)
        rows = [self._plan_row(row) for row in X]
        self.kept_positions_ = np.stack([r[0] for r in rows])
        self.residual_kept_positions_ = self.kept_positions_
        self.hidden_merges_ = [r[1] for r in rows]
        self.residual_merges_ = [r[2] for r in rows]
        self.n_tokens_in_ = X.shape[1]
        return self

    def _apply(self, X, attr):
        check_is_fitted(self, "kept_positions_")
        merges = getattr(self, attr)
        X = check_tokens(X)
        if X.shape[:2] != (len(self.hidden_merges_), self.n_tokens_in_):
            raise InvalidPlanError(
                f"reducer fitted on {len(self.hidden_merges_)}x{self.n_tokens_in_} tokens, "
                f"got {X.shape[:2]}")
        return np.stack([merge_and_select(row, kept, m)
                         for row, kept, m in zip(X, self.kept_positions_, merges)])

    def transform(self, X):
        """Reduce the hidden-state branch."""
        return self._apply(X, "hidden_merges_")

    def transform_residual(self, X):
        """Reduce the residual branch with the same surviving positions."""
        return self._apply(X, "residual_merges_")

    @property
    def removed_positions_(self):
        check_is_fitted(self, "kept_positions_")
        all_pos = np.arange(self.n_tokens_in_)
        return [np.setdiff1d(all_pos, kept) for kept in self.kept_positions_]


class UTRCReducer(_BaseReducer):
    """Importance-classified hybrid token pruning and merging.

    Parameters
    ----------
    keep_ratio : float, default=1.0
        Fraction of tokens that survive. At most half the tokens can be
        removed, since only the less important half is ever removed.
    p : float or None, default=None
        Fraction of connections to retain. Overrides ``keep_ratio`` when set.
    q : float, default=0.5
        Fraction of retained connections pruned on the hidden branch; the
        rest are merged. ``q=0`` is merge-only, ``q=1`` prune-only.
    metric : {"clip", "l1", "l2", "raw"}, default="clip"
    residual_mode : {"merge", "prune", "hybrid"}, default="merge"
    residual_q : float or None
        Prune fraction on the residual branch when ``residual_mode="hybrid"``.
    """

    def __init__(self, keep_ratio=1.0, p=None, q=0.5, metric="clip",
                 residual_mode="merge", residual_q=None):
        self.keep_ratio = keep_ratio
        self.p = p
        self.q = q
        self.metric = metric
        self.residual_mode = residual_mode
        self.residual_q = residual_q

    def fit(self, X, y=None):
        MetricKind.parse(self.metric)
        self.plans_ = []
        self.scores_ = []
        self.classifications_ = []
        return super().fit(X, y)

    def _plan_row(self, y_row):
        s = importance(y_row, self.metric)
        n = s.shape[0]
        self.scores_.append(s)
        if self.p is None:
            n_remove = n - keep_count(n, self.keep_ratio)
            if n_remove == 0:
                plan = retain_and_assign([], 0.0, self.q, s, residual_mode=self.residual_mode,
                                         residual_q=self.residual_q)
                self.plans_.append(plan)
                self.classifications_.append(None)
                return plan.kept_positions, [], []
            if n_remove > n // 2:
                raise InvalidPlanError(
                    f"UTRC removes at most {n // 2} of {n} tokens, asked for {n_remove}")
            p = n_remove / (n // 2)
        else:
            p = self.p
        cls = classify(s)
        conns = build_connections(y_row, cls)
        plan = retain_and_assign(conns, p, self.q, s, residual_mode=self.residual_mode,
                                 residual_q=self.residual_q)
        self.plans_.append(plan)
        self.classifications_.append(cls)
        return plan.kept_positions, plan.hidden_merges, plan.residual_merges


class EViTReducer(_BaseReducer):
    """Keep the most important tokens and drop the rest on both branches."""

    def __init__(self, keep_ratio=1.0, metric="clip"):
        self.keep_ratio = keep_ratio
        self.metric = metric

    def _plan_row(self, y_row):
        kept = baseline_evit_prune(importance(y_row, self.metric), self.keep_ratio)
        return kept, [], []


class BipartiteMergeReducer(_BaseReducer):
    """Even/odd bipartite merging on both branches, ignoring importance."""

    def __init__(self, keep_ratio=1.0):
        self.keep_ratio = keep_ratio

    def _plan_row(self, y_row):
        kept, merges = _bipartite_plan(y_row, self.keep_ratio)
        return kept, merges, merges


REDUCERS = {"utrc": UTRCReducer, "evit": EViTReducer, "bipartite": BipartiteMergeReducer}


def make_reducer(config=None):
    """Build a reducer from a config blob such as ``{"reducer": "utrc", "q": 0.5}``."""
    config = dict(config or {})
    name = config.pop("reducer", "utrc")
    if name not in REDUCERS:
        raise InvalidParameterError(f"unknown reducer {name!r}; choose from {sorted(REDUCERS)}")
    cls = REDUCERS[name]
    valid = cls().get_params()
    unknown = set(config) - set(valid)
    if unknown:
        raise InvalidParameterError(f"unknown options for {name}: {sorted(unknown)}")
    return cls(**config)


def check_importance_protected(reducer):
    """True when a fitted UTRC reducer removed no token from its ``set_b``."""
    for cls, kept in zip(reducer.classifications_, reducer.kept_positions_):
        if cls is not None and not np.isin(cls.set_b, kept).all():
            return False
    return True


__all__ = [
    "BipartiteMergeReducer", "Connection", "EViTReducer", "ReductionPlan",
    "TokenClassification", "UTRCReducer", "apply_plan_hidden", "apply_plan_residual",
    "baseline_bipartite_merge", "baseline_evit_prune", "build_connections", "classify",
    "check_importance_protected", "keep_count", "make_reducer", "merge_and_select", "reassemble",
    "retain_and_assign",
]
