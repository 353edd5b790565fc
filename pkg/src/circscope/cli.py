"""Command-line front end.

Exit codes: 0 success, 1 usage error, 2 data/validation error, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys
import warnings
from pathlib import Path

from . import __version__
from .acdc import AcdcConfig, acdc_prune, eap_then_acdc
from .core import CircscopeError, NonFiniteError
from .eap import Circuit, EdgeScoreTable, ZeroGradientWarning, eap_scores, threshold_circuit, top_k_circuit
from .evaluation import (
    GroundTruthCircuit,
    roc_from_circuit_family,
    roc_from_ranking,
    score_distribution,
    write_grid_csv,
    write_histogram_csv,
    write_roc_csv,
    youden_grid,
    youden_j,
)
from .model import ModelConfig, PassBudgetExceeded, build_graph, init_weights, load_model, save_weights
from .patching import activation_patch_scores, default_lambdas, interpolation_sweep, write_sweep_csv
from .tasks import MetricSpec, load_task

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
METHODS = ("eap", "actpatch", "acdc", "eap+acdc")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _add_run_args(p, task=True):
    p.add_argument("--model", required=True, help="model config JSON")
    p.add_argument("--weights", required=True, help="CIRCWT01 weight container")
    if task:
        p.add_argument("--task", required=True, help="task JSON")
    p.add_argument("--metric", choices=["logit_diff", "prob_diff", "kl"], help="override the task metric")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pass-budget", type=int, help="abort after this many forward passes")
    p.add_argument("--out", required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="circscope", description="Circuit discovery by edge attribution patching.")
    parser.add_argument("--version", action="version", version=f"circscope {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    d = sub.add_parser("discover", help="score edges and extract a circuit")
    _add_run_args(d)
    d.add_argument("--method", choices=METHODS, default="eap")
    sel = d.add_mutually_exclusive_group()
    sel.add_argument("--top-k", type=int)
    sel.add_argument("--threshold", type=float)
    d.add_argument("--tau-eap", type=float)
    d.add_argument("--tau-acdc", type=float)
    d.add_argument("--aggregation", choices=["signed_mean", "abs_mean"], default="signed_mean")

    e = sub.add_parser("evaluate", help="compare scores or circuits with a ground truth")
    e.add_argument("--mode", choices=["roc", "grid", "hist"], default="roc")
    e.add_argument("--truth", required=True, help="ground-truth circuit JSON")
    e.add_argument("--scores", help="score CSV")
    e.add_argument("--circuit", action="append", default=[], help="circuit JSON (repeatable)")
    e.add_argument("--model", help="model config JSON (edge universe)")
    e.add_argument("--weights")
    e.add_argument("--task")
    e.add_argument("--metric", choices=["logit_diff", "prob_diff", "kl"])
    e.add_argument("--tau-eap", type=_floats, help="comma-separated thresholds")
    e.add_argument("--tau-acdc", type=_floats, help="comma-separated thresholds")
    e.add_argument("--bins", type=int, default=20)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True)

    s = sub.add_parser("sweep", help="lambda-interpolated patching of one edge")
    _add_run_args(s)
    s.add_argument("--edge", required=True)
    s.add_argument("--lambdas", type=int, default=21, help="number of uniform grid points in [0, 1]")

    i = sub.add_parser("init-weights", help="write random weights for a config")
    i.add_argument("--model", required=True)
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--zero", action="store_true")
    i.add_argument("--out", required=True, help="output weight file")
    return parser


# ---------------------------------------------------------------------------


def _load(args):
    model = load_model(args.model, args.weights)
    model.counter.budget = getattr(args, "pass_budget", None)
    task = load_task(args.task, model.config.vocab_size)
    if args.metric:
        task = task.with_metric(MetricSpec(args.metric))
    return model, task


def _outdir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_discover(args) -> int:
    model, task = _load(args)
    out = _outdir(args.out)
    method = args.method
    table = None
    circuit = None
    if method in ("eap", "actpatch"):
        if args.tau_eap is not None or args.tau_acdc is not None:
            raise UsageError(f"--tau-eap/--tau-acdc do not apply to --method {method}")
        table = eap_scores(model, task, aggregation=args.aggregation) if method == "eap" \
            else activation_patch_scores(model, task)
        if args.top_k is not None:
            circuit = top_k_circuit(table, args.top_k)
        elif args.threshold is not None:
            circuit = threshold_circuit(table, args.threshold)
    elif method == "acdc":
        tau = args.tau_acdc if args.tau_acdc is not None else args.threshold
        if tau is None:
            raise UsageError("--method acdc needs --threshold or --tau-acdc")
        circuit = acdc_prune(model, task, AcdcConfig(tau))
    else:
        if args.tau_eap is None or args.tau_acdc is None:
            raise UsageError("--method eap+acdc needs --tau-eap and --tau-acdc")
        table = eap_scores(model, task)
        circuit = eap_then_acdc(model, task, args.tau_eap, args.tau_acdc, table=table)
    if table is not None:
        table.save_csv(out / "scores.csv")
    if circuit is not None:
        circuit.save(out / "circuit.json")
    report = {
        "method": method,
        "pairs": len(task),
        "edges": len(model.graph),
        **model.counter.as_dict(),
    }
    _write_json(out / "passes.json", report)
    _write_json(out / "manifest.json", {
        "model": str(args.model), "weights": str(args.weights), "task": str(args.task),
        "method": method, "metric": task.metric.kind, "top_k": args.top_k, "threshold": args.threshold,
        "tau_eap": args.tau_eap, "tau_acdc": args.tau_acdc, "seed": args.seed,
    })
    n = "-" if circuit is None else len(circuit)
    print(f"{method}: {len(model.graph)} edges, circuit {n}; "
          f"{model.counter.forwards} forward / {model.counter.backwards} backward passes")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    truth = GroundTruthCircuit.load(args.truth)
    out = _outdir(args.out)
    graph = build_graph(ModelConfig.load(args.model)) if args.model else None
    if graph is not None:
        truth.check_against(graph)

    def scores():
        if not args.scores:
            raise UsageError(f"--mode {args.mode} needs --scores")
        table = EdgeScoreTable.load_csv(args.scores)
        if graph is not None and set(table.edge_ids) != set(graph.edge_ids):
            raise CircscopeError("score table edges do not match the model graph")
        return table

    if args.mode == "roc":
        if args.circuit:
            if graph is None:
                raise UsageError("--circuit needs --model to define the edge universe")
            family = []
            for path in args.circuit:
                c = Circuit.load(path)
                family.append((c.parameter if c.parameter is not None else path, c))
            curve = roc_from_circuit_family(family, truth, graph.edge_ids)
        else:
            curve = roc_from_ranking(scores(), truth)
        write_roc_csv(out / "roc.csv", curve)
        print(f"auc={curve.auc!r} youden_j={youden_j(curve)!r}")
    elif args.mode == "hist":
        hists = score_distribution(scores(), truth, args.bins)
        write_histogram_csv(out / "histogram.csv", hists)
        print(", ".join(f"{h.group}: {h.total}" for h in hists))
    else:
        if not (args.weights and args.task and args.model and args.tau_eap and args.tau_acdc):
            raise UsageError("--mode grid needs --model, --weights, --task, --tau-eap and --tau-acdc")
        model, task = _load(args)
        cells = youden_grid(model, task, truth, args.tau_eap, args.tau_acdc)
        write_grid_csv(out / "grid.csv", cells)
        best = max(cells, key=lambda c: c.youden_j)
        print(f"best youden_j={best.youden_j!r} at tau_eap={best.tau_eap} tau_acdc={best.tau_acdc}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    model, task = _load(args)
    if args.edge not in model.graph:
        raise CircscopeError(f"unknown edge {args.edge!r}")
    out = _outdir(args.out)
    points = interpolation_sweep(model, task, args.edge, default_lambdas(args.lambdas))
    write_sweep_csv(out / "sweep.csv", points)
    print(f"{len(points)} points written; delta(1)={points[-1].metric_delta!r}")
    return EXIT_OK


def cmd_init_weights(args) -> int:
    config = ModelConfig.load(args.model)
    save_weights(args.out, init_weights(config, args.seed, zero=args.zero))
    return EXIT_OK


COMMANDS = {"discover": cmd_discover, "evaluate": cmd_evaluate, "sweep": cmd_sweep, "init-weights": cmd_init_weights}


def _show_warning(message, category, filename, lineno, file=None, line=None):
    print(f"circscope: warning: {message}", file=sys.stderr)


def _thread_limit():
    n = os.environ.get("CIRCSCOPE_THREADS")
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, int(n)))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    with warnings.catch_warnings():
        warnings.simplefilter("always", ZeroGradientWarning)
        warnings.showwarning = _show_warning
        try:
            with _thread_limit():
                return COMMANDS[args.command](args)
        except UsageError as exc:
            print(f"circscope: error: {exc}", file=sys.stderr)
            return EXIT_USAGE
        except NonFiniteError as exc:
            print(f"circscope: numerical failure: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
        except (CircscopeError, PassBudgetExceeded, OSError, ValueError, KeyError) as exc:
            print(f"circscope: error: {exc}", file=sys.stderr)
            return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
