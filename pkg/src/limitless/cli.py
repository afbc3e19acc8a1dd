"""Command line entry point.

    limitless bench run --workload counter --args '[[40],[70],[120]]' --trigger-ms 50 --timeout-ms 90
    limitless gateway serve
    limitless action-server serve
    limitless workload run counter 70
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import Optional, Sequence

from .stores import LatencyModel


def _on_off(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected on or off")
    return value == "on"


def _sweep(value: str) -> list:
    try:
        data = json.loads(value)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"--args is not JSON: {exc}") from None
    if not isinstance(data, list) or not data:
        raise argparse.ArgumentTypeError("--args must be a non-empty JSON list")
    # a flat list is a sweep over single arguments
    return [a if isinstance(a, list) else [a] for a in data]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="limitless")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True)

    bench = sub.add_parser("bench", help="benchmark harness")
    bsub = bench.add_subparsers(dest="bench_command", required=True)
    run = bsub.add_parser("run", help="run a sweep and write CSV")
    run.add_argument("--workload", required=True)
    run.add_argument("--args", type=_sweep, required=True, dest="sweep",
                     help='JSON list of argument lists, e.g. [[40],[70]] (or [40,70])')
    run.add_argument("--reps", type=int, default=20)
    run.add_argument("--timeout-ms", type=int, default=90_000)
    run.add_argument("--trigger-ms", type=int, default=50_000)
    run.add_argument("--clock", choices=("simulated", "real"), default="simulated")
    run.add_argument("--fencing", type=_on_off, default=True)
    run.add_argument("--unit-ms", type=int, default=None,
                     help="ms per work unit (default 1 simulated, 1000 real)")
    run.add_argument("--termination-delay-ms", type=int, default=None)
    run.add_argument("--backend", choices=("memory", "local_fs", "stub_remote"), default="memory")
    run.add_argument("--latency-fixed-ms", type=int, default=0)
    run.add_argument("--latency-ms-per-mib", type=int, default=0)
    run.add_argument("--parallel", type=int, default=1)
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--out", default="-")
    run.add_argument("--summary", action="store_true", help="print the summary JSON to stderr")

    gw = sub.add_parser("gateway", help="FaaS gateway simulator")
    gw.add_subparsers(dest="gateway_command", required=True).add_parser("serve")

    act = sub.add_parser("action-server", help="action interface server")
    act.add_subparsers(dest="action_command").add_parser("serve")

    wl = sub.add_parser("workload", help="standalone workload executable")
    wsub = wl.add_subparsers(dest="workload_command", required=True)
    wrun = wsub.add_parser("run")
    wrun.add_argument("name")
    wrun.add_argument("args", nargs="*")
    return p


def _bench(ns: argparse.Namespace) -> int:
    from .bench import BenchPlan, emit_csv, format_csv, run_plan

    unit_ms = ns.unit_ms if ns.unit_ms is not None else (1 if ns.clock == "simulated" else 1000)
    try:
        plan = BenchPlan(
            workload=ns.workload, args_sweep=ns.sweep, repetitions=ns.reps, timeout_ms=ns.timeout_ms,
            trigger_ms=ns.trigger_ms, clock_mode=ns.clock, fencing=ns.fencing, unit_ms=unit_ms,
            termination_delay_ms=ns.termination_delay_ms, backend=ns.backend,
            latency=LatencyModel(put_ms_per_mib=ns.latency_ms_per_mib, get_ms_per_mib=ns.latency_ms_per_mib,
                                  fixed_ms=ns.latency_fixed_ms), parallel=ns.parallel,
            seed=ns.seed,
        )
    except ValueError as exc:
        print(f"limitless bench: {exc}", file=sys.stderr)
        return 2
    result = run_plan(plan)
    if ns.out == "-":
        sys.stdout.write(format_csv(result.samples))
    else:
        emit_csv(result.samples, ns.out)
    if ns.summary:
        print(json.dumps(result.summary, indent=2), file=sys.stderr)
    if result.exit_code:
        print(f"limitless bench: {result.failure_ratio:.0%} of runs failed", file=sys.stderr)
    return result.exit_code


def main(argv: Optional[Sequence[str]] = None) -> int:
    ns = build_parser().parse_args(argv)
    logging.basicConfig(level=ns.log_level.upper())
    if ns.command == "bench":
        return _bench(ns)
    if ns.command == "gateway":
        from .gateway import serve

        serve()
        return 0
    if ns.command == "action-server":
        from .action_server import serve

        serve()
        return 0
    from .workloads.__main__ import main as workload_main

    return workload_main([ns.name, *ns.args])


if __name__ == "__main__":
    sys.exit(main())
