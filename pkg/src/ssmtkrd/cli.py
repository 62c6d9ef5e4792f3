"""Command-line entry point: ``ssmtkrd <subcommand> [options]``."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, replace


from . import __version__
from .checkpoint import generate_checkpoint, load_checkpoint, sha256_file
from .exceptions import SSMTokenReductionError
from .harness import (
    DEFAULT_CONFIG,
    RESULT_COLUMNS,
    RunSpec,
    ToyLM,
    ablation_specs,
    bench_throughput,
    eval_adjusted,
    load_corpus,
    report,
    rows_to_text,
    run_many,
    synthetic_corpus,
)
from .schedule import (
    LAYERS_64,
    estimate_activation_memory,
    flops_report,
    max_achievable_reduction,
    simulate_trace,
    solve_keep_ratio,
)
from .reduction import keep_count
from .ssm_core import ModelConfig


def _layers(text):
    return tuple(int(v) for v in text.replace(",", " ").split())


def _add_model_args(p):
    p.add_argument("--checkpoint", help="model checkpoint; a seeded toy model is built if omitted")
    p.add_argument("--num-layers", type=int, default=DEFAULT_CONFIG.num_layers)
    p.add_argument("--model-dim", type=int, default=DEFAULT_CONFIG.model_dim)
    p.add_argument("--inner-dim", type=int, default=DEFAULT_CONFIG.inner_dim)
    p.add_argument("--state-dim", type=int, default=DEFAULT_CONFIG.state_dim)
    p.add_argument("--seed", type=int, default=0)


def _add_run_args(p):
    _add_model_args(p)
    p.add_argument("--config", help="experiment JSON (reducer / schedule / corpus keys)")
    p.add_argument("--corpus", help="corpus file: one whitespace-separated id sequence per line")
    p.add_argument("--corpus-seed", type=int, default=None)
    p.add_argument("--sequences", type=int, default=4)
    p.add_argument("--seq-len", type=int, default=64)
    p.add_argument("--reducer", default="utrc",
                   help="utrc, evit, bipartite or none; comma-separate to run several")
    p.add_argument("--metric", default="clip", choices=["clip", "l1", "l2", "raw"])
    p.add_argument("--q", type=float, default=0.5)
    p.add_argument("--residual-mode", default="merge", choices=["merge", "prune", "hybrid"])
    p.add_argument("--residual-q", type=float, default=None)
    p.add_argument("--target-reduction", type=float, default=0.2)
    p.add_argument("--keep-ratio", type=float, default=None,
                   help="explicit per-layer keep ratio (overrides --target-reduction)")
    p.add_argument("--layers", type=_layers, default=LAYERS_64)
    p.add_argument("--out", help="output prefix; writes <out>.csv and <out>.txt")


def build_parser():
    parser = argparse.ArgumentParser(prog="ssmtkrd", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-model", help="write a seeded checkpoint")
    _add_model_args(p)
    p.add_argument("--seq-len-max", type=int, default=DEFAULT_CONFIG.seq_len_max)
    p.add_argument("--out", required=True)

    p = sub.add_parser("run", help="evaluate reducers and write a result table")
    _add_run_args(p)
    p.add_argument("--fixtures", type=int, default=1,
                   help="repeat over this many seeded model/corpus fixtures")
    p.add_argument("--repeat", type=int, default=3, help="timing repeats for throughput")

    p = sub.add_parser("eval", help="adjusted evaluation of one configuration (JSON output)")
    _add_run_args(p)

    p = sub.add_parser("bench", help="generation throughput, reduced vs unreduced")
    _add_run_args(p)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--prompt-len", type=int, default=256)
    p.add_argument("--gen-len", type=int, default=16)
    p.add_argument("--repeat", type=int, default=3)

    p = sub.add_parser("ablate", help="metric / design-choice / location sweeps")
    _add_run_args(p)
    p.add_argument("--sweep", required=True, choices=["metric", "q", "location"])

    p = sub.add_parser("solve-schedule", help="per-layer keep ratio for a FLOPS target")
    _add_model_args(p)
    p.add_argument("--target-reduction", type=float, required=True)
    p.add_argument("--layers", type=_layers, default=LAYERS_64)
    p.add_argument("--seq-len", type=int, default=2048)
    p.add_argument("--config", help="schedule JSON with target_flops_reduction / layers")
    return parser


def _load_lm(args, seed=None):
    if args.checkpoint:
        config, weights = load_checkpoint(args.checkpoint)
        return ToyLM.build(config, weights)
    config = ModelConfig(args.num_layers, args.model_dim, args.inner_dim, args.state_dim,
                         seq_len_max=DEFAULT_CONFIG.seq_len_max,
                         seed=args.seed if seed is None else seed)
    return ToyLM.build(config)


def _apply_config_file(args):
    if not getattr(args, "config", None):
        return args
    with open(args.config) as fh:
        cfg = json.load(fh)
    mapping = {
        "reducer": "reducer", "q": "q", "metric": "metric", "residual_mode": "residual_mode",
        "residual_q": "residual_q", "target_flops_reduction": "target_reduction",
        "per_layer_keep": "keep_ratio", "layers": "layers", "checkpoint": "checkpoint",
        "corpus": "corpus", "corpus_seed": "corpus_seed", "seed": "seed",
        "sequences": "sequences", "seq_len": "seq_len", "out": "out", "repeat": "repeat",
    }
    for key, value in cfg.items():
        if key not in mapping:
            raise SSMTokenReductionError(f"unknown key {key!r} in {args.config}")
        if key == "layers":
            value = tuple(value)
        setattr(args, mapping[key], value)
    return args


def _corpus(args, seed):
    if args.corpus:
        return load_corpus(args.corpus)
    corpus_seed = args.corpus_seed if args.corpus_seed is not None else seed
    return synthetic_corpus(corpus_seed, args.sequences, args.seq_len + 1)


def _specs(args):
    return [
        RunSpec(label=name, reducer=name, metric=args.metric, q=args.q,
                residual_mode=args.residual_mode, residual_q=args.residual_q,
                layers=tuple(args.layers), target_reduction=args.target_reduction,
                keep_ratio=args.keep_ratio)
        for name in str(args.reducer).split(",")
    ]


def _emit(rows, args, columns=RESULT_COLUMNS):
    if args.out:
        for path in report(rows, args.out, columns):
            print(f"wrote {path}", file=sys.stderr)
    sys.stdout.write(rows_to_text(rows, columns))


def cmd_gen_model(args):
    config = ModelConfig(args.num_layers, args.model_dim, args.inner_dim, args.state_dim,
                         seq_len_max=args.seq_len_max, seed=args.seed)
    generate_checkpoint(config, args.out)
    print(f"{args.out} sha256={sha256_file(args.out)}")


def cmd_run(args):
    rows = []
    for i in range(args.fixtures):
        seed = args.seed + i
        lm = _load_lm(args, seed)
        corpus = _corpus(args, seed)
        for row in run_many(_specs(args), lm, corpus, measure_throughput=True,
                            repeats=args.repeat):
            rows.append({"fixture": seed, **row})
    _emit(rows, args, ("fixture",) + RESULT_COLUMNS)


def cmd_eval(args):
    lm = _load_lm(args)
    corpus = _corpus(args, args.seed)
    out = []
    for spec in _specs(args):
        schedule, keep = spec.schedule(lm.config, corpus.shape[1] - 1)
        res = eval_adjusted(lm, schedule, corpus)
        d = asdict(res)
        d["flops_report"] = {"total_baseline": res.flops_report.total_baseline,
                             "total_reduced": res.flops_report.total_reduced,
                             "reduction_fraction": res.flops_report.reduction_fraction}
        d.update(reducer=spec.reducer, keep_ratio=keep)
        d.pop("throughput")
        d.pop("extras")
        out.append(d)
    text = json.dumps(out if len(out) > 1 else out[0], indent=2, sort_keys=True)
    if args.out:
        with open(args.out if args.out.endswith(".json") else args.out + ".json", "w") as fh:
            fh.write(text + "\n")
    print(text)


def cmd_bench(args):
    lm = _load_lm(args)
    rows = []
    for spec in _specs(args):
        schedule, keep = spec.schedule(lm.config, args.prompt_len)
        res = bench_throughput(lm, schedule, args.batch, args.prompt_len, args.gen_len,
                               args.repeat, seed=args.seed)
        rows.append({"reducer": spec.reducer, "keep_ratio": keep, **res})
    _emit(rows, args, ("reducer", "keep_ratio", "tokens_per_s", "baseline_tokens_per_s",
                       "speedup"))


def cmd_ablate(args):
    lm = _load_lm(args)
    corpus = _corpus(args, args.seed)
    base = _specs(args)[0]
    rows = run_many(ablation_specs(args.sweep, replace(base, reducer="utrc"),
                                   lm.config.num_layers), lm, corpus)
    columns = tuple(c for c in RESULT_COLUMNS if c != "throughput_tok_s")
    _emit(rows, args, columns)


def cmd_solve_schedule(args):
    if args.config:
        with open(args.config) as fh:
            cfg = json.load(fh)
        args.target_reduction = cfg.get("target_flops_reduction", args.target_reduction)
        args.layers = tuple(cfg.get("layers", args.layers))
    if args.checkpoint:
        config, _ = load_checkpoint(args.checkpoint)
    else:
        config = ModelConfig(args.num_layers, args.model_dim, args.inner_dim, args.state_dim)
    layers = tuple(args.layers)
    r = solve_keep_ratio(args.target_reduction, layers, config, args.seq_len)
    simulated = flops_report(simulate_trace(args.seq_len, config.num_layers, layers, r), config)
    counts, n = [], args.seq_len
    for layer in range(config.num_layers):
        counts.append(n)
        if layer in layers:
            n = keep_count(n, r)
    realized = flops_report(counts, config)
    result = {
        "layers": list(layers),
        "target_flops_reduction": args.target_reduction,
        "per_layer_keep": r,
        "simulated_reduction": simulated.reduction_fraction,
        "integer_trace_reduction": realized.reduction_fraction,
        "max_achievable_reduction": max_achievable_reduction(layers, config, args.seq_len),
        "memory_ratio": estimate_activation_memory(counts, config).ratio,
        "token_trace": counts,
    }
    print(json.dumps(result, indent=2))


COMMANDS = {
    "gen-model": cmd_gen_model,
    "run": cmd_run,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "ablate": cmd_ablate,
    "solve-schedule": cmd_solve_schedule,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        _apply_config_file(args)
        COMMANDS[args.command](args)
    except (SSMTokenReductionError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
