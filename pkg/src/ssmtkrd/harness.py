"""Experiment harness: adjusted evaluation, throughput, ablation sweeps, reports.

The toy models have no trained language-model head, so scoring uses a
fixed seeded embedding and readout over a 256-symbol vocabulary. Absolute
pseudo-perplexities are only meaningful relative to each other.
"""

from __future__ import annotations

import csv
import io
import math
import os
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .exceptions import InvalidParameterError
from .metrics import MetricKind
from .model import model_forward
from .reduction import check_importance_protected, UTRCReducer
from .schedule import (
    LAYERS_64,
    LOCATION_LISTS,
    FlopsReport,
    ReductionSchedule,
    estimate_activation_memory,
    flops_report,
    scale_layers,
    solve_keep_ratio,
)
from .ssm_core import ModelConfig, init_weights, recurrent_step

VOCAB = 256
# deep random stacks without normalisation blow up for some seeds at unit scale
EMBED_SCALE = 0.5
DEFAULT_CONFIG = ModelConfig(num_layers=64, model_dim=16, inner_dim=32, state_dim=8,
                             seq_len_max=4096, seed=0)

# hidden-branch / residual-branch settings of the design-choice ablation
DESIGN_CHOICES = (
    ("M-only", "M-only"),
    ("P-only", "P-only"),
    ("q=0.8", "q=0.2"),
    ("q=0.2", "q=0.8"),
    ("q=0.5", "q=0.5"),
    ("q=0.5", "P-only"),
    ("q=0.5", "M-only"),
)
METRIC_ROWS = ("l1", "l2", "raw", "clip")

RESULT_COLUMNS = (
    "label", "reducer", "metric", "q", "residual_mode", "residual_q", "layers",
    "target_reduction", "keep_ratio", "flops_reduction", "output_reduction",
    "pseudo_ppl", "pseudo_ppl_aligned", "divergence", "memory_ratio",
    "throughput_tok_s", "error",
)


def max_threads():
    """Worker cap from ``SSMTKRD_THREADS`` (default: CPU count)."""
    env = os.environ.get("SSMTKRD_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise InvalidParameterError(f"SSMTKRD_THREADS must be an integer, got {env!r}")
    return os.cpu_count() or 1


# -- corpus and readout -------------------------------------------------------

def synthetic_corpus(seed, n_sequences, length, vocab=VOCAB):
    """Seeded integer sequences with spans copied from earlier in the sequence.

    Roughly one span of 4-8 tokens is copied per 16 positions, so some tokens
    are redundant and some carry information needed later.
    """
    rng = np.random.default_rng(seed)
    ids = rng.integers(0, vocab, size=(n_sequences, length))
    for row in ids:
        for _ in range(max(1, length // 16)):
            span = int(rng.integers(4, 9))
            if length < 3 * span:
                break
            src = int(rng.integers(0, length // 2 - span + 1)) if length // 2 > span else 0
            dst = int(rng.integers(src + span, length - span + 1))
            row[dst:dst + span] = row[src:src + span]
    return ids


def load_corpus(path):
    """Whitespace-separated integer ids, one sequence per line; ragged lines are cut
    to the shortest length."""
    with open(path) as fh:
        rows = [[int(v) for v in line.split()] for line in fh if line.strip()]
    if not rows:
        raise InvalidParameterError(f"corpus {path} is empty")
    n = min(len(r) for r in rows)
    return np.array([r[:n] for r in rows], dtype=np.int64)


@dataclass(frozen=True)
class ToyLM:
    """Weights plus a fixed embedding and readout derived from ``config.seed``."""

    config: ModelConfig
    weights: list
    embedding: np.ndarray
    readout: np.ndarray

    @classmethod
    def build(cls, config, weights=None):
        weights = init_weights(config) if weights is None else weights
        rng = np.random.default_rng([int(config.seed), 0x5EED])
        embedding = EMBED_SCALE * rng.standard_normal((VOCAB, config.model_dim))
        readout = rng.standard_normal((config.model_dim, VOCAB)) / math.sqrt(config.model_dim)
        return cls(config, weights, embedding, readout)

    def embed(self, ids):
        return self.embedding[np.asarray(ids)]

    def log_probs(self, hidden):
        logits = hidden @ self.readout
        logits = logits - logits.max(axis=-1, keepdims=True)
        return logits - np.log(np.exp(logits).sum(axis=-1, keepdims=True))


# -- evaluation ---------------------------------------------------------------

@dataclass
class EvalResult:
    pseudo_ppl: float
    pseudo_ppl_aligned: float
    output_reduction: float
    divergence: float
    flops_report: FlopsReport
    memory_ratio: float
    token_counts: list
    target_length: int
    importance_protected: bool = True
    throughput: float | None = None
    extras: dict = field(default_factory=dict)


def _nll(log_probs, labels):
    picked = np.take_along_axis(log_probs, labels[..., None], axis=-1)[..., 0]
    return float(-picked.mean())


def eval_adjusted(lm, schedule, corpus, reducer=None):
    """Score a reduced forward pass with the label-truncation adjustment.

    ``corpus`` holds ``L + 1`` ids per sequence: the first ``L`` are the input
    and ids ``1..L`` the next-token labels. When the output shrinks to ``k``
    tokens (rate ``m = 1 - k / L``) the labels are cut to their first ``k``
    entries. ``pseudo_ppl_aligned`` instead scores each surviving token
    against the label of its original position.
    """
    corpus = np.asarray(corpus, dtype=np.int64)
    if corpus.ndim != 2 or corpus.shape[1] < 3:
        raise InvalidParameterError("corpus must be [n_sequences, L + 1] with L >= 2")
    inputs, labels = corpus[:, :-1], corpus[:, 1:]
    L = inputs.shape[1]
    if L > lm.config.seq_len_max:
        raise InvalidParameterError(f"sequence length {L} exceeds seq_len_max {lm.config.seq_len_max}")
    x = lm.embed(inputs)
    base, _ = model_forward(x, lm.weights)
    if schedule is None or schedule.per_layer_keep >= 1.0 or not schedule.layers:
        out, trace = base, None
        token_counts = [L] * lm.config.num_layers
    else:
        out, trace = model_forward(x, lm.weights, schedule, reducer)
        token_counts = trace.token_counts
    k = out.seq_len
    m = 1.0 - k / L
    if k == 0:
        raise InvalidParameterError("output reduction of 100% leaves nothing to score")
    logp = lm.log_probs(out.data)
    ppl = math.exp(_nll(logp, labels[:, :k]))
    aligned = np.take_along_axis(labels, out.positions, axis=1)
    ppl_aligned = math.exp(_nll(logp, aligned))
    ref = np.take_along_axis(base.data, out.positions[..., None], axis=1)
    div = np.linalg.norm(out.data - ref, axis=-1) / np.linalg.norm(ref, axis=-1)
    protected = True
    if trace is not None:
        protected = all(check_importance_protected(r) for r in trace.reductions.values()
                        if isinstance(r, UTRCReducer))
    return EvalResult(
        pseudo_ppl=ppl,
        pseudo_ppl_aligned=ppl_aligned,
        output_reduction=m,
        divergence=float(div.mean()),
        flops_report=flops_report(token_counts, lm.config, L),
        memory_ratio=estimate_activation_memory(token_counts, lm.config).ratio,
        token_counts=list(token_counts),
        target_length=k,
        importance_protected=protected,
    )


# -- throughput ---------------------------------------------------------------

def generate(lm, prompt_ids, gen_len, schedule=None, reducer=None):
    """Greedy decoding after a (possibly reduced) prefill; returns new ids ``[b, gen_len]``."""
    if gen_len < 1:
        raise InvalidParameterError("generation length must be >= 1")
    out, trace = model_forward(lm.embed(prompt_ids), lm.weights, schedule, reducer,
                               collect_states=True)
    states = list(trace.states)
    nxt = lm.log_probs(out.data[:, -1]).argmax(axis=-1)
    produced = [nxt]
    for _ in range(gen_len - 1):
        h = lm.embed(nxt)
        for layer, w in enumerate(lm.weights):
            h, states[layer] = recurrent_step(h, w, states[layer])
        nxt = lm.log_probs(h).argmax(axis=-1)
        produced.append(nxt)
    return np.stack(produced, axis=1)


def _median_seconds(fn, repeats):
    fn()  # warmup
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def bench_throughput(lm, schedule, batch, prompt_len, gen_len, repeats=3, seed=0,
                     reducer=None):
    """Median tokens/s (prompt + generated) for the reduced and unreduced model."""
    if gen_len < 1:
        raise InvalidParameterError("generation length must be >= 1")
    if repeats < 3:
        raise InvalidParameterError("repeats must be >= 3")
    ids = synthetic_corpus(seed, batch, prompt_len)
    n_tokens = batch * (prompt_len + gen_len)
    t_red = _median_seconds(lambda: generate(lm, ids, gen_len, schedule, reducer), repeats)
    t_base = _median_seconds(lambda: generate(lm, ids, gen_len), repeats)
    return {
        "tokens_per_s": n_tokens / t_red,
        "baseline_tokens_per_s": n_tokens / t_base,
        "speedup": t_base / t_red,
    }


def measure_forward_throughput(lm, schedule, corpus, repeats=3, reducer=None):
    x = lm.embed(np.asarray(corpus)[:, :-1])
    seconds = _median_seconds(lambda: model_forward(x, lm.weights, schedule, reducer), repeats)
    return x.shape[0] * x.shape[1] / seconds


# -- configured runs ----------------------------------------------------------

@dataclass(frozen=True)
class RunSpec:
    """One row of an experiment: reducer settings plus schedule."""

    label: str = ""
    reducer: str = "utrc"
    metric: str = "clip"
    q: float = 0.5
    residual_mode: str = "merge"
    residual_q: float | None = None
    layers: tuple = LAYERS_64
    target_reduction: float | None = 0.2
    keep_ratio: float | None = None

    def reducer_config(self):
        if self.reducer == "utrc":
            cfg = {"reducer": "utrc", "metric": self.metric, "q": self.q,
                   "residual_mode": self.residual_mode}
            if self.residual_mode == "hybrid":
                cfg["residual_q"] = self.residual_q
            return cfg
        if self.reducer == "evit":
            return {"reducer": "evit", "metric": self.metric}
        if self.reducer == "bipartite":
            return {"reducer": "bipartite"}
        if self.reducer == "none":
            return {"reducer": "utrc"}
        raise InvalidParameterError(f"unknown reducer {self.reducer!r}")

    def schedule(self, config, seq_len):
        if self.reducer == "none":
            return None, 1.0
        layers = tuple(l for l in self.layers if l < config.num_layers)
        if self.keep_ratio is not None:
            keep = float(self.keep_ratio)
        else:
            keep = solve_keep_ratio(self.target_reduction or 0.0, layers, config, seq_len)
        sched = ReductionSchedule(layers, keep, self.reducer_config(), min_start_layer=0, stride=1)
        return sched, keep


def run_one(spec, lm, corpus, measure_throughput=False, repeats=3):
    """Evaluate one spec; failures are reported in the row's ``error`` column."""
    row = {
        "label": spec.label or spec.reducer,
        "reducer": spec.reducer,
        "metric": MetricKind.parse(spec.metric).value if spec.reducer != "bipartite" else "",
        "q": spec.q if spec.reducer == "utrc" else "",
        "residual_mode": spec.residual_mode if spec.reducer == "utrc" else "",
        "residual_q": spec.residual_q if spec.residual_mode == "hybrid" else "",
        "layers": " ".join(str(l) for l in spec.layers),
        "target_reduction": "" if spec.target_reduction is None else spec.target_reduction,
    }
    try:
        schedule, keep = spec.schedule(lm.config, np.asarray(corpus).shape[1] - 1)
        res = eval_adjusted(lm, schedule, corpus)
        row.update(
            keep_ratio=keep,
            flops_reduction=res.flops_report.reduction_fraction,
            output_reduction=res.output_reduction,
            pseudo_ppl=res.pseudo_ppl,
            pseudo_ppl_aligned=res.pseudo_ppl_aligned,
            divergence=res.divergence,
            memory_ratio=res.memory_ratio,
        )
        if measure_throughput:
            row["throughput_tok_s"] = measure_forward_throughput(lm, schedule, corpus, repeats)
    except Exception as exc:  # one failing configuration must not abort a sweep
        row["error"] = f"{type(exc).__name__}: {exc}"
    return row


def run_many(specs, lm, corpus, **kwargs):
    """Evaluate specs (in parallel up to ``SSMTKRD_THREADS``); rows keep input order."""
    specs = list(specs)
    workers = min(max_threads(), len(specs)) or 1
    if workers == 1:
        return [run_one(s, lm, corpus, **kwargs) for s in specs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda s: run_one(s, lm, corpus, **kwargs), specs))


def _branch_setting(label):
    if label == "M-only":
        return 0.0
    if label == "P-only":
        return 1.0
    return float(label.split("=")[1])


def ablation_specs(sweep, base=None, num_layers=None):
    """Rows of one ablation: ``metric``, ``q`` (design choices) or ``location``."""
    base = base or RunSpec()
    if sweep == "metric":
        return [replace(base, label=f"metric={m}", reducer="utrc", metric=m) for m in METRIC_ROWS]
    if sweep == "q":
        specs = []
        for hidden, residual in DESIGN_CHOICES:
            hq, rq = _branch_setting(hidden), _branch_setting(residual)
            mode = {"M-only": "merge", "P-only": "prune"}.get(residual, "hybrid")
            specs.append(replace(base, label=f"hidden {hidden} / residual {residual}",
                                 reducer="utrc", q=hq, residual_mode=mode,
                                 residual_q=rq if mode == "hybrid" else None))
        return specs
    if sweep == "location":
        depth = num_layers or 64
        return [replace(base, label="layers " + " ".join(map(str, lst)), reducer="utrc",
                        layers=scale_layers(lst, depth))
                for lst in LOCATION_LISTS]
    raise InvalidParameterError(f"unknown sweep {sweep!r}; choose metric, q or location")


def run_ablation(sweep, lm, corpus, base=None):
    return run_many(ablation_specs(sweep, base, lm.config.num_layers), lm, corpus)


def compare_reducers(fixture_seeds, target_reduction=0.2, config=DEFAULT_CONFIG,
                     n_sequences=1, seq_len=64, layers=LAYERS_64):
    """Output divergence of UTRC and both baselines on independently seeded fixtures.

    Each fixture seeds its own model weights and corpus. Returns a list of
    ``{"seed", "utrc", "evit", "bipartite"}`` dicts.
    """
    out = []
    for seed in fixture_seeds:
        lm = ToyLM.build(replace(config, seed=int(seed)))
        corpus = synthetic_corpus(int(seed), n_sequences, seq_len + 1)
        row = {"seed": int(seed)}
        for name in ("utrc", "evit", "bipartite"):
            spec = RunSpec(reducer=name, layers=layers, target_reduction=target_reduction)
            result = run_one(spec, lm, corpus)
            if result.get("error"):
                raise RuntimeError(result["error"])
            row[name] = result["divergence"]
        out.append(row)
    return out


# -- reports ------------------------------------------------------------------

def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.10g}"
    return str(v)


def rows_to_csv(rows, columns=RESULT_COLUMNS):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row.get(c)) for c in columns])
    return buf.getvalue()


def rows_to_text(rows, columns=RESULT_COLUMNS):
    cols = [c for c in columns if any(_fmt(r.get(c)) for r in rows)] or list(columns)
    cells = [[_fmt(r.get(c)) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines.extend("  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells)
    return "\n".join(line.rstrip() for line in lines) + "\n"


def report(rows, out_prefix, columns=RESULT_COLUMNS):
    """Write ``<prefix>.csv`` and ``<prefix>.txt``; returns both paths."""
    if not rows:
        raise InvalidParameterError("no results to report")
    out_prefix = os.fspath(out_prefix)
    if out_prefix.endswith(".csv"):
        out_prefix = out_prefix[:-4]
    paths = (out_prefix + ".csv", out_prefix + ".txt")
    try:
        with open(paths[0], "w", newline="") as fh:
            fh.write(rows_to_csv(rows, columns))
        with open(paths[1], "w") as fh:
            fh.write(rows_to_text(rows, columns))
    except OSError as exc:
        raise OSError(f"cannot write report {out_prefix!r}: {exc}") from exc
    return paths
