"""Command-line entry point: ``hybridplan <subcommand> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import cli_io
from .allocator import GaParams
from .errors import InfeasibleInstanceError, InvalidClusterError, InvalidPlanError, InvalidSpecError, NumericError, SchemaError
from .model_graph import PartitionPolicy, partition_network
from .simulator import simulate

EXIT_OK = 0
EXIT_SCHEMA = 2
EXIT_INFEASIBLE = 3
EXIT_NUMERIC = 4

logger = logging.getLogger("hybridplan")


def _budget(text):
    if text == "auto":
        return "auto"
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError("budget must be a positive number or 'auto'") from None
    if not value > 0:
        raise argparse.ArgumentTypeError("budget must be positive")
    return value


def _seed(text):
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hybridplan", description="Plan and simulate hybrid-parallel training.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def model_args(p):
        p.add_argument("--model", required=True, help="model spec file (YAML or JSON)")
        p.add_argument("--alpha", type=float, default=1.0, help="heavy-layer threshold as a multiple of the mean cost")
        p.add_argument("--max-merge-load", type=float, default=None, help="upper bound on a merged light run")

    def ga_args(p):
        p.add_argument("--cluster", required=True, help="cluster spec file (YAML or JSON)")
        p.add_argument("--seed", type=_seed, default=None, help="GA seed; overrides the cluster file")
        p.add_argument("--pop", type=int, default=None, help="GA population size")
        p.add_argument("--gens", type=int, default=None, help="GA generations (t_max)")
        p.add_argument("--budget", type=_budget, default=None, help="step budget in seconds, or 'auto'")
        p.add_argument("--inverse-profit", action="store_true", help="use d_j / p_i as the profit")

    def sim_args(p):
        p.add_argument("--mode", choices=("sync", "async"), default=None)
        p.add_argument("--batch-size", type=int, default=None)
        p.add_argument("--dataset-size", type=int, default=None)
        p.add_argument("--epochs", type=int, default=None)

    def out_args(p, formats=True):
        p.add_argument("--out", default=None, help="write the result here instead of stdout")
        if formats:
            p.add_argument("--format", choices=cli_io.REPORT_FORMATS, default="table")

    p = sub.add_parser("cost", help="per-layer compute cost and heavy flags")
    model_args(p)
    out_args(p)

    p = sub.add_parser("partition", help="split the layer graph into partitions")
    model_args(p)
    out_args(p)

    p = sub.add_parser("allocate", help="assign partitions to devices and write a plan document")
    model_args(p)
    ga_args(p)
    sim_args(p)
    out_args(p, formats=False)

    p = sub.add_parser("simulate", help="predict training time for a plan, or run the whole pipeline")
    p.add_argument("--plan", default=None, help="plan document written by 'allocate'")
    p.add_argument("--model", default=None)
    p.add_argument("--cluster", default=None)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--max-merge-load", type=float, default=None)
    p.add_argument("--seed", type=_seed, default=None)
    p.add_argument("--pop", type=int, default=None)
    p.add_argument("--gens", type=int, default=None)
    p.add_argument("--budget", type=_budget, default=None)
    p.add_argument("--inverse-profit", action="store_true")
    sim_args(p)
    out_args(p)

    p = sub.add_parser("sweep", help="simulate every device count m = 1..M")
    model_args(p)
    ga_args(p)
    sim_args(p)
    p.add_argument("--max-devices", type=int, default=None)
    out_args(p)

    p = sub.add_parser("verify-gradients", help="check the gradient identities numerically")
    p.add_argument("--seed", type=_seed, default=0)
    out_args(p)
    return parser


def _options(args) -> cli_io.PipelineOptions:
    mode = getattr(args, "mode", None)
    return cli_io.PipelineOptions(
        seed=getattr(args, "seed", None),
        alpha=getattr(args, "alpha", 1.0),
        max_merge_load=getattr(args, "max_merge_load", None),
        population_size=getattr(args, "pop", None),
        t_max=getattr(args, "gens", None),
        sync_mode={"sync": "synchronous", "async": "asynchronous", None: None}[mode],
        batch_size=getattr(args, "batch_size", None),
        dataset_size=getattr(args, "dataset_size", None),
        epochs=getattr(args, "epochs", None),
        step_budget=getattr(args, "budget", None),
        inverse_profit=getattr(args, "inverse_profit", False),
    )


def _emit(text, out):
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _table(header, rows):
    widths = [max(len(str(h)), *(len(str(r[k])) for r in rows)) for k, h in enumerate(header)]
    lines = ["  ".join(str(h).rjust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(str(c).rjust(w) for c, w in zip(r, widths)) for r in rows]
    return "\n".join(lines) + "\n"


def cmd_cost(args):
    net = cli_io.parse_model_spec(args.model)
    rows = cli_io.cost_table(net, args.alpha)
    if args.format == "structured":
        text = cli_io.dumps({"network": net.name, "alpha": args.alpha, "layers": rows})
    else:
        header = ("index", "name", "kind", "mac_ops", "heavy")
        text = _table(header, [[r[h] for h in header] for r in rows])
    _emit(text, args.out)


def cmd_partition(args):
    net = cli_io.parse_model_spec(args.model)
    plan = partition_network(net, PartitionPolicy(args.alpha, args.max_merge_load))
    parts = [
        {"layers": [a, b], "load": load, "params": params}
        for (a, b), load, params in zip(plan.partitions, plan.loads, plan.params)
    ]
    if args.format == "structured":
        text = cli_io.dumps({"network": net.name, "digest": cli_io.network_digest(net), "partitions": parts})
    else:
        rows = [[k + 1, f"{p['layers'][0]}-{p['layers'][1]}", p["load"], p["params"]] for k, p in enumerate(parts)]
        text = _table(("partition", "layers", "load", "params"), rows)
    _emit(text, args.out)


def cmd_allocate(args):
    net = cli_io.parse_model_spec(args.model)
    cfg = cli_io.parse_cluster_spec(args.cluster)
    _warn_missing_seed(cfg, args)
    doc, _ = cli_io.run_pipeline_objects(net, cfg, _options(args))
    _emit(cli_io.dumps(doc), args.out)


def _warn_missing_seed(cfg, args):
    if args.seed is None and "seed" not in cfg.ga:
        logger.warning("no GA seed given; using %d", GaParams().seed)


def cmd_simulate(args):
    if args.plan:
        doc = cli_io.load_plan_document(args.plan)
        problems = cli_io.validate_plan_document(doc)
        if problems:
            raise InvalidPlanError("; ".join(problems))
        plan, allocation, cluster = cli_io.plan_from_document(doc)
        cfg = cli_io.ClusterConfig(cluster=cluster, training=doc.get("training") or {})
        training = cli_io.resolve_training(cfg, _options(args))
        report = simulate(plan, allocation, cluster, training)
    else:
        if not (args.model and args.cluster):
            raise SchemaError([cli_io.Violation("<arguments>", "simulate needs --plan, or both --model and --cluster")])
        cfg = cli_io.parse_cluster_spec(args.cluster)
        _warn_missing_seed(cfg, args)
        _, report = cli_io.run_pipeline_objects(cli_io.parse_model_spec(args.model), cfg, _options(args))
    _emit(cli_io.emit_report(report, args.format), args.out)


def cmd_sweep(args):
    net = cli_io.parse_model_spec(args.model)
    cfg = cli_io.parse_cluster_spec(args.cluster)
    _warn_missing_seed(cfg, args)
    reports = cli_io.sweep(net, cfg, _options(args), args.max_devices)
    _emit(cli_io.emit_report(reports, args.format), args.out)


def cmd_verify(args):
    report = cli_io.verify_gradients(seed=args.seed)
    _emit(cli_io.render_gradient_report(report, args.format), args.out)
    return EXIT_OK if report["passed"] else EXIT_NUMERIC


COMMANDS = {
    "cost": cmd_cost,
    "partition": cmd_partition,
    "allocate": cmd_allocate,
    "simulate": cmd_simulate,
    "sweep": cmd_sweep,
    "verify-gradients": cmd_verify,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        status = COMMANDS[args.command](args)
    except SchemaError as exc:
        for v in exc.violations:
            print(f"error: {v}", file=sys.stderr)
        return EXIT_SCHEMA
    except InfeasibleInstanceError as exc:
        print(f"infeasible: {exc}\n  {exc.diagnostic}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InvalidSpecError, InvalidPlanError, InvalidClusterError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    return EXIT_OK if status is None else status


if __name__ == "__main__":
    sys.exit(main())
