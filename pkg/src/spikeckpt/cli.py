"""``spikeckpt`` command line: run, verify, sweep, gen-task, pareto and plot-hints.

Exit codes: 0 success, 2 configuration error, 3 verification failure,
4 simulated OOM in ``run --strict``.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

from .engine import measure_m_others
from .errors import ConfigError, NoFeasiblePolicy
from .memory import LEDGER_COLUMNS
from .planner import enumerate_pareto, predicted_row
from .harness.config import ExperimentConfig, load_config, parse_config
from .harness.runner import RUN_COLUMNS, SWEEP_COLUMNS, parse_axis, render_csv, run_rows, sweep_rows, write_atomic
from .harness.task import gen_task
from .harness.verify import default_verify_config, run_verify

EXIT_OK, EXIT_CONFIG, EXIT_VERIFY, EXIT_OOM = 0, 2, 3, 4

TASK_COLUMNS = ("kind", "t", "batch", "neuron", "value")
PARETO_COLUMNS = LEDGER_COLUMNS + ("predicted",)


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits with 2 already; keep the message on stderr
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _load(args, require_policy: bool) -> ExperimentConfig:
    if args.config is None:
        if require_policy:
            raise ConfigError("--config is required")
        exp = parse_config(json.dumps(default_verify_config()), require_policy=False, source="<default>")
    else:
        exp = load_config(args.config, require_policy=require_policy)
    if getattr(args, "seed", None) is not None:
        exp.network = {**exp.network, "seed": args.seed}
    return exp


def _capacity(args, exp: ExperimentConfig):
    cap = getattr(args, "capacity_slots", None)
    return exp.capacity_slots if cap is None else cap


def _emit(text: str, args, exp: ExperimentConfig | None) -> None:
    out = args.out or (exp.output_path if exp is not None else None)
    if out:
        write_atomic(out, text)
    else:
        sys.stdout.write(text)


def cmd_run(args) -> int:
    exp = _load(args, require_policy=True)
    rows = run_rows(exp, _capacity(args, exp))
    _emit(render_csv(RUN_COLUMNS, rows), args, exp)
    if args.strict and any(r["oom"] for r in rows):
        return EXIT_OOM
    return EXIT_OK


def cmd_verify(args) -> int:
    exp = _load(args, require_policy=False)
    checks = run_verify(exp, inject_fault=args.inject_fault)
    text = "".join(c.line() + "\n" for c in checks)
    failed = [c for c in checks if not c.passed]
    text += f"{len(checks) - len(failed)}/{len(checks)} checks passed\n"
    _emit(text, args, None)
    return EXIT_VERIFY if failed else EXIT_OK


def cmd_sweep(args) -> int:
    exp = _load(args, require_policy=True)
    if not args.axis:
        raise ConfigError("sweep needs at least one --axis name=v1,v2,...")
    try:
        axes = [parse_axis(a) for a in args.axis]
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    rows = sweep_rows(exp, axes, _capacity(args, exp), jobs=args.jobs)
    _emit(render_csv(SWEEP_COLUMNS, rows), args, exp)
    return EXIT_OK


def cmd_gen_task(args) -> int:
    exp = _load(args, require_policy=False)
    cfg = exp.network_config()
    inputs, targets = gen_task(exp.task_seed(cfg), cfg, exp.task.poisson_rate)
    rows = [
        {"kind": "spike", "t": t, "batch": int(b), "neuron": int(n)}
        for t, sl in enumerate(inputs)
        for b, n in sl[0]
    ]
    rows += [{"kind": "target", "neuron": j, "value": float(x)} for j, x in enumerate(targets)]
    _emit(render_csv(TASK_COLUMNS, rows), args, exp)
    return EXIT_OK


def cmd_pareto(args) -> int:
    exp = _load(args, require_policy=False)
    cfg = exp.network_config()
    front = enumerate_pareto(cfg.seq_len, cfg, exp.cost_model, m_others=measure_m_others(cfg))
    rows = [predicted_row(p, cfg, cfg.seq_len) for p in front]
    _emit(render_csv(PARETO_COLUMNS, rows), args, exp)
    return EXIT_OK


def cmd_plot_hints(args) -> int:
    """gnuplot snippets addressing the columns of an emitted CSV by index."""
    with open(args.csv, newline="", encoding="utf-8") as fh:
        header = next(csv.reader(fh), None)
    if not header:
        raise ConfigError(f"{args.csv}: empty CSV")
    col = {name: i + 1 for i, name in enumerate(header)}
    lines = ['set datafile separator ","', "set key autotitle columnhead"]
    lines += [f"# column {i}: {name}" for name, i in col.items()]
    x = next((c for c in ("chunk_size", "remote_chunk_size", "T") if c in col), None)
    for y in ("peak_local_slots", "modeled_time", "n_transfers"):
        if x and y in col:
            lines.append(f"plot '{args.csv}' using {col[x]}:{col[y]} with linespoints title '{y}'")
    if "peak_local_slots" in col and "modeled_time" in col:
        lines.append(f"plot '{args.csv}' using {col['peak_local_slots']}:{col['modeled_time']} with points title 'memory vs time'")
    sys.stdout.write("\n".join(lines) + "\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="spikeckpt", description="Checkpointed SNN training experiments on a simulated device.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="experiment JSON file")
        p.add_argument("--out", help="output file (default: config output_path, else stdout)")
        p.add_argument("--seed", type=int, help="override network.seed")

    p = sub.add_parser("run", help="run the configured policy and emit one CSV row per repetition")
    common(p)
    p.add_argument("--capacity-slots", type=int, dest="capacity_slots")
    p.add_argument("--strict", action="store_true", help="exit 4 when any repetition hits the capacity")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("verify", help="oracle battery over all five strategies (T <= 512)")
    common(p, config_required=False)
    p.add_argument("--inject-fault", action="store_true", help="drop one cached spike before the backward pass")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("sweep", help="cross product over one or more axes, measured and predicted columns")
    common(p)
    p.add_argument("--axis", action="append", default=[], help="name=v1,v2,... (T, chunk_size, nb_local, remote_chunk_size, neurons_per_layer)")
    p.add_argument("--capacity-slots", type=int, dest="capacity_slots")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gen-task", help="emit the synthetic input events and target rates as CSV")
    common(p)
    p.set_defaults(func=cmd_gen_task)

    p = sub.add_parser("pareto", help="predicted Pareto front over every strategy for the configured network")
    common(p)
    p.set_defaults(func=cmd_pareto)

    p = sub.add_parser("plot-hints", help="gnuplot column hints for an emitted CSV")
    p.add_argument("csv", type=Path)
    p.set_defaults(func=cmd_plot_hints)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, NoFeasiblePolicy) as exc:
        print(f"spikeckpt: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BrokenPipeError:
        # reader closed early (e.g. `| head`); silence the flush at interpreter exit
        os.dup2(os.open(os.devnull, os.O_WRONLY), sys.stdout.fileno())
        return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
