"""Command-line harness: build, train, eval, bench, update-sim, inspect (plus generators)."""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from pathlib import Path
from typing import Callable, Sequence

from .classifier import Classifier, oracle_predictor, stats_row, write_stats_csv
from .model import (FormatError, ModelConfig, ResidualMlp, TrainingConfig, label_packets, load_model,
                    save_model, train, write_log)
from .pipeline import (SIM_EXTRA_FIELDS, CostClock, PipelineConfig, UpdateEngine, parse_update_script,
                       run_pipeline, simulate_updates, write_report)
from .ruleset import (FIVE_TUPLE, TABLE1_SCHEMA, ParseError, Ruleset, generate_ruleset, generate_traffic,
                      linear_scan_batch, parse_ruleset, read_trace, serialize_ruleset, write_trace)
from .tss import InsertionError, MatchResult, TssIndex

SCHEMAS = {"5tuple": FIVE_TUPLE, "table1": TABLE1_SCHEMA}
OUT_ENV = "NEUROTSS_OUT"


class CliError(Exception):
    pass


# Baselines ####################################################################

def _pstss(tss: TssIndex, packets: Sequence[Sequence[int]]) -> list[int | None]:
    out = []
    for p in packets:
        r = tss.ordered_search(p)
        out.append(None if r is None else r.rule_id)
    return out


def _linear(tss: TssIndex, packets: Sequence[Sequence[int]]) -> list[int | None]:
    won = linear_scan_batch(tss.ruleset(), packets) if len(packets) else []
    return [int(w) if w >= 0 else None for w in won]


BASELINES: dict[str, Callable[[TssIndex, Sequence[Sequence[int]]], list[int | None]]] = {
    "pstss": _pstss,
    "linear": _linear,
}


def _ids(results: Sequence[MatchResult | None]) -> list[int | None]:
    return [None if r is None else r.rule_id for r in results]


# helpers ######################################################################

def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get(OUT_ENV) or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _read_text(path: str) -> str:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"no such file: {path}")
    return p.read_text()


def _load_ruleset(args) -> Ruleset:
    if not args.rules:
        raise CliError("need --rules")
    rs = parse_ruleset(_read_text(args.rules), SCHEMAS[args.schema])
    if not len(rs):
        raise CliError(f"ruleset {args.rules} is empty")
    return rs


def _load_tss(args) -> TssIndex:
    if getattr(args, "index", None):
        return TssIndex.from_json(_read_text(args.index))
    if not getattr(args, "rules", None):
        raise CliError("need --rules or --index")
    return TssIndex.build(_load_ruleset(args))


def _load_model_file(path: str) -> ResidualMlp:
    if not Path(path).is_file():
        raise CliError(f"no such model file: {path}")
    with open(path, "rb") as f:
        return load_model(f)


def _load_classifier(args, tss: TssIndex) -> Classifier:
    strict = getattr(args, "strict", False)
    if getattr(args, "oracle", False):
        return Classifier(None, tss, strict, predictor=oracle_predictor(tss))
    if not args.model:
        raise CliError("need --model (or --oracle)")
    return Classifier(_load_model_file(args.model), tss, strict)


def _load_trace(args, tss: TssIndex):
    if getattr(args, "trace", None):
        trace = read_trace(_read_text(args.trace), tss.schema)
        if any(t is None for t in trace.truth):
            # fill missing ground truth from the reference scan
            won = linear_scan_batch(tss.ruleset(), trace.packets)
            trace.truth = [t if t is not None else (int(w) if w >= 0 else None)
                           for t, w in zip(trace.truth, won)]
        return trace
    return generate_traffic(tss.ruleset(), args.packets, args.seed)


def _training_config(args) -> TrainingConfig:
    return TrainingConfig(alpha=args.alpha, beta=args.beta, batch_size=args.train_batch,
                          epochs_per_round=args.epochs, lr=args.lr, lr_decay_every=args.lr_decay_every,
                          max_rounds=args.max_rounds, seed=args.seed)


# subcommands ##################################################################

def cmd_gen_rules(args) -> int:
    rs = generate_ruleset(args.n, args.seed)
    text = serialize_ruleset(rs)
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_gen_trace(args) -> int:
    rs = _load_ruleset(args)
    trace = generate_traffic(rs, args.packets, args.seed)
    if args.output:
        with open(args.output, "w") as f:
            write_trace(trace, f)
    else:
        write_trace(trace, sys.stdout)
    return 0


def cmd_build(args) -> int:
    tss = TssIndex.build(_load_ruleset(args))
    out = _out_dir(args)
    (out / "index.json").write_text(tss.to_json())
    sys.stdout.write(f"tuples: {len(tss)}\n")
    sys.stdout.write(tss.summary())
    return 0


def cmd_inspect(args) -> int:
    tss = _load_tss(args)
    sys.stdout.write(f"tuples: {len(tss)}\nrules: {len(tss.rules())}\nmismatch_count: {tss.mismatch_count}\n")
    sys.stdout.write(tss.summary())
    return 0


def cmd_train(args) -> int:
    tss = _load_tss(args)
    trace = _load_trace(args, tss)
    raw = label_packets(tss, trace.packets)
    if not len(raw):
        raise CliError("no training packet matches any rule")
    S = raw.features.shape[1]
    model = ResidualMlp(ModelConfig(S, len(tss), args.neurons, args.blocks), args.seed)
    eval_set = None
    if args.eval_packets:
        eval_set = label_packets(tss, generate_traffic(tss.ruleset(), args.eval_packets, args.seed + 1).packets)
    result = train(model, raw, _training_config(args), eval_set)
    out = _out_dir(args)
    with open(out / "model.bin", "wb") as f:
        save_model(result.model, f)
    with open(out / "train_log.csv", "w") as f:
        write_log(result.log, f)
    summary = {"accuracy": result.accuracy, "rounds": result.rounds, "converged": result.converged,
               "below_threshold": result.below_threshold, "tuple_count": len(tss)}
    (out / "train_summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    flag = "  below_threshold" if result.below_threshold else ""
    sys.stdout.write(f"accuracy {result.accuracy:.6f} after {result.rounds} round(s){flag}\n")
    return 0


def cmd_eval(args) -> int:
    tss = _load_tss(args)
    clf = _load_classifier(args, tss)
    trace = _load_trace(args, tss)
    stats = clf.evaluate(trace)
    row = stats_row(args.name or Path(args.rules or args.index).stem, stats, len(tss))
    out = _out_dir(args)
    with open(out / "eval.csv", "w") as f:
        write_stats_csv([row], f)
    write_stats_csv([row], sys.stdout)
    sys.stderr.write(f"fallbacks {stats.fallbacks} scenario1_errors {stats.scenario1_errors}\n")
    return 0


BENCH_FIELDS = ["method", "lanes", "batch_size", "packets", "elapsed", "throughput"]


def cmd_bench(args) -> int:
    tss = _load_tss(args)
    clf = _load_classifier(args, tss)
    trace = _load_trace(args, tss)
    baselines = [b for b in (args.baseline or "").split(",") if b]
    for b in baselines:
        if b not in BASELINES:
            raise CliError(f"unknown baseline {b!r}; choose from {sorted(BASELINES)}")
    lanes_list = [int(x) for x in str(args.lanes).split(",")]
    strict = clf.with_strict()
    reference = _ids(strict.classify_batch(trace.packets))
    for b in baselines:
        if BASELINES[b](tss, trace.packets) != reference:
            raise CliError(f"baseline {b} disagrees with strict-mode classification")
    rows = []
    for lanes in lanes_list:
        cfg = PipelineConfig(batch_size=args.batch_size, lanes=lanes, window_seconds=float("inf"))
        check = run_pipeline(strict, trace.packets, cfg)
        if _ids(check.results) != reference:
            raise CliError(f"pipeline with {lanes} lanes disagrees with sequential classification")
        t0 = time.perf_counter()
        run_pipeline(clf, trace.packets, cfg)
        el = time.perf_counter() - t0
        rows.append(["model", lanes, args.batch_size, len(trace), el, len(trace) / el if el > 0 else 0.0])
    for b in baselines:
        t0 = time.perf_counter()
        BASELINES[b](tss, trace.packets)
        el = time.perf_counter() - t0
        rows.append([b, "", "", len(trace), el, len(trace) / el if el > 0 else 0.0])
    out = _out_dir(args)
    for dst in (open(out / "bench.csv", "w"), sys.stdout):
        w = csv.writer(dst, lineterminator="\n")
        w.writerow(BENCH_FIELDS)
        for r in rows:
            w.writerow([f"{v:.6g}" if isinstance(v, float) else v for v in r])
        if dst is not sys.stdout:
            dst.close()
    return 0


def cmd_update_sim(args) -> int:
    tss = _load_tss(args)
    clf = _load_classifier(args, tss)
    script = parse_update_script(_read_text(args.script), tss.schema) if args.script else []
    if args.windows is not None:
        script = list(script[:args.windows]) + [[] for _ in range(max(0, args.windows - len(script)))]
    engine = None
    if args.deferred:
        engine = UpdateEngine(theta=args.theta, tau=args.tau, incremental_epochs=args.incremental_epochs,
                              proportional=args.proportional, training=_training_config(args))
    injected = [float(x) for x in args.inject_throughput.split(",")] if args.inject_throughput else None
    clock = None if args.clock == "wall" else CostClock()
    records = simulate_updates(clf, script, engine, args.packets_per_window, args.seed,
                               PipelineConfig(batch_size=args.batch_size, lanes=1), clock, injected)
    out = _out_dir(args)
    with open(out / "update_sim.csv", "w") as f:
        write_report(records, f, SIM_EXTRA_FIELDS)
    write_report(records, sys.stdout, SIM_EXTRA_FIELDS)
    return 0


# parser #######################################################################

def _add_common(p: argparse.ArgumentParser, rules: bool = True, index: bool = False) -> None:
    p.add_argument("--schema", choices=sorted(SCHEMAS), default="5tuple")
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or .)")
    p.add_argument("--seed", type=int, default=0)
    if rules:
        p.add_argument("--rules", help="ClassBench rule file")
    if index:
        p.add_argument("--index", help="serialized index from `build`")


def _add_traffic(p: argparse.ArgumentParser) -> None:
    p.add_argument("--trace", help="trace file; generated from the ruleset when omitted")
    p.add_argument("--packets", type=int, default=10000, help="generated trace size")


def _add_training(p: argparse.ArgumentParser) -> None:
    d = TrainingConfig()
    p.add_argument("--alpha", type=int, default=d.alpha)
    p.add_argument("--beta", type=float, default=d.beta)
    p.add_argument("--train-batch", type=int, default=d.batch_size)
    p.add_argument("--epochs", type=int, default=d.epochs_per_round, help="epochs per round")
    p.add_argument("--lr", type=float, default=d.lr)
    p.add_argument("--lr-decay-every", type=int, default=d.lr_decay_every)
    p.add_argument("--max-rounds", type=int, default=d.max_rounds)


def _add_classifier(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", help="model file from `train`")
    p.add_argument("--oracle", action="store_true", help="use a perfect tuple predictor instead of a model")
    p.add_argument("--strict", action="store_true", help="verify every result with a full ordered search")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="neurotss", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-rules", help="write a synthetic ClassBench-style ruleset")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_gen_rules)

    p = sub.add_parser("gen-trace", help="write a trace of packets sampled inside rules")
    _add_common(p)
    p.add_argument("--packets", type=int, default=10000)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_gen_trace)

    p = sub.add_parser("build", help="build the tuple index and print its summary")
    _add_common(p)
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("inspect", help="print the summary of a ruleset or serialized index")
    _add_common(p, index=True)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("train", help="train the tuple predictor")
    _add_common(p, index=True)
    _add_traffic(p)
    _add_training(p)
    p.add_argument("--neurons", type=int, default=64)
    p.add_argument("--blocks", type=int, default=2)
    p.add_argument("--eval-packets", type=int, default=0,
                   help="size of a fresh held-out evaluation trace (default: evaluate on the training pool)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="model/classification accuracy and memory accesses as CSV")
    _add_common(p, index=True)
    _add_traffic(p)
    _add_classifier(p)
    p.add_argument("--name", help="ruleset column value")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="throughput of the pipeline and baselines")
    _add_common(p, index=True)
    _add_traffic(p)
    _add_classifier(p)
    p.add_argument("--batch-size", type=int, default=8192)
    p.add_argument("--lanes", default="4", help="comma-separated lane counts")
    p.add_argument("--baseline", help="comma-separated: " + ",".join(BASELINES))
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("update-sim", help="replay an update script window by window")
    _add_common(p, index=True)
    _add_classifier(p)
    _add_training(p)
    p.add_argument("--script", help="update script ('=' window, '+[prio] @rule', '-id')")
    p.add_argument("--windows", type=int, help="pad or cut the script to this many windows")
    p.add_argument("--packets-per-window", type=int, default=5000)
    p.add_argument("--batch-size", type=int, default=1024)
    p.add_argument("--deferred", action="store_true", help="enable deferred updates (IU+DU)")
    p.add_argument("--theta", type=float, default=10_000)
    p.add_argument("--tau", type=float, default=0.05)
    p.add_argument("--proportional", action="store_true", help="compare theta with mismatches / rules")
    p.add_argument("--incremental-epochs", type=int, default=50)
    p.add_argument("--inject-throughput", help="comma-separated per-window throughputs overriding the clock")
    p.add_argument("--clock", choices=["cost", "wall"], default="cost")
    p.set_defaults(func=cmd_update_sim)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ParseError, FormatError, InsertionError, ValueError, OSError) as e:
        sys.stderr.write(f"error: {type(e).__name__}: {e}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
