"""Benchmark harness: repeated chains over an argument sweep, CSV out.

Every run gets a fresh clock, fresh repositories and a fresh gateway, so runs
never share state and a simulated plan always produces the same CSV.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import statistics
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Optional, Sequence

from .clock import RealClock, SimulatedClock
from .gateway import DEFAULT_ACTION, GatewayError, local_platform
from .model import CHAIN_ID_PARAM, SEQ_PARAM, ChainStatus
from .runner import RunnerConfig
from .stores import LatencyModel, RepoConfig, make_repos

log = logging.getLogger(__name__)

STATUS_OK = "ok"
STATUS_FAILED = "failed"


@dataclass(frozen=True)
class BenchPlan:
    workload: str
    args_sweep: tuple[tuple, ...]
    repetitions: int = 20
    timeout_ms: int = 90_000
    trigger_ms: int = 50_000
    clock_mode: str = "simulated"
    fencing: bool = True
    # virtual ms per work unit; 1 makes execution_ms count work units
    unit_ms: int = 1
    termination_delay_ms: Optional[int] = None
    backend: str = "memory"
    latency: LatencyModel = field(default_factory=LatencyModel)
    parallel: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "args_sweep", tuple(tuple(a) for a in self.args_sweep))
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if not 0 < self.trigger_ms < self.timeout_ms:
            raise ValueError("need 0 < trigger_ms < timeout_ms")
        if self.clock_mode not in ("simulated", "real"):
            raise ValueError("clock_mode must be simulated or real")
        if not self.args_sweep:
            raise ValueError("args_sweep is empty")
        if self.parallel < 1:
            raise ValueError("parallel must be >= 1")


@dataclass(frozen=True)
class BenchSample:
    workload: str
    args: tuple
    run_index: int
    execution_ms: int
    invocation_count: int
    checkpoint_ms_total: int
    upload_ms_total: int
    duplicate_finals: int
    status: str = STATUS_OK


@dataclass
class BenchResult:
    samples: list[BenchSample]
    summary: dict

    @property
    def failure_ratio(self) -> float:
        return sum(s.status != STATUS_OK for s in self.samples) / len(self.samples)

    @property
    def exit_code(self) -> int:
        return 1 if self.failure_ratio > 0.5 else 0


def run_one(plan: BenchPlan, args: Sequence, run_index: int) -> tuple[BenchSample, dict]:
    """Run a single chain to the end and measure it."""
    simulated = plan.clock_mode == "simulated"
    clock = SimulatedClock() if simulated else RealClock()
    with tempfile.TemporaryDirectory(prefix="lf-bench-") as tmp:
        root = Path(tmp)
        repo_root = root / "repo" if plan.backend == "local_fs" else None
        ckpt, results = make_repos(RepoConfig(plan.backend, repo_root, plan.latency), clock)
        config = RunnerConfig(
            checkpoint_trigger_ms=plan.trigger_ms,
            fencing_enabled=plan.fencing,
            work_unit_ms=plan.unit_ms,
            termination_delay_ms=plan.termination_delay_ms,
        )
        seed = plan.seed * 1_000_003 + run_index if simulated else None
        gateway = local_platform(clock, config, ckpt_repo=ckpt, results_repo=results,
                                 timeout_ms=plan.timeout_ms, seed=seed, work_dir=root / "work")
        chain_id = f"bench-{run_index}"
        params = {"bin": plan.workload, "bin_args": list(args), CHAIN_ID_PARAM: chain_id, SEQ_PARAM: 1}
        try:
            gateway.invoke(DEFAULT_ACTION, params, blocking=False)
            gateway.drain()
            report = gateway.chain_report(chain_id)
        except GatewayError as exc:
            log.warning("run %d %s failed: %s", run_index, list(args), exc)
            report = None
        record = results.get(chain_id)
    ok = report is not None and record is not None and record.status == ChainStatus.COMPLETED
    if not ok:
        rec_count = record.invocation_count if record is not None else 0
        sample = BenchSample(plan.workload, tuple(args), run_index, 0, rec_count, 0, 0,
                             record.duplicate_finals if record is not None else 0, STATUS_FAILED)
        return sample, report or {}
    sample = BenchSample(
        workload=plan.workload,
        args=tuple(args),
        run_index=run_index,
        execution_ms=report["execution_ms"],
        invocation_count=report["invocation_count"],
        checkpoint_ms_total=report["checkpoint_ms_total"],
        upload_ms_total=report["upload_ms_total"],
        duplicate_finals=report["duplicate_finals"],
    )
    return sample, report


def _summarize(samples: list[BenchSample], reports: list[dict]) -> dict:
    per_arg: dict[str, dict] = {}
    for key in dict.fromkeys(json.dumps(list(s.args)) for s in samples):
        ok = [s for s in samples if json.dumps(list(s.args)) == key and s.status == STATUS_OK]
        ex = [s.execution_ms for s in ok]
        ic = [s.invocation_count for s in ok]
        per_arg[key] = {
            "runs": sum(json.dumps(list(s.args)) == key for s in samples),
            "failed": sum(json.dumps(list(s.args)) == key and s.status != STATUS_OK for s in samples),
            "execution_ms_mean": statistics.fmean(ex) if ex else None,
            "execution_ms_stdev": statistics.pstdev(ex) if ex else None,
            "invocation_count_mean": statistics.fmean(ic) if ic else None,
            "invocation_count_stdev": statistics.pstdev(ic) if ic else None,
            "invocation_count_max": max(ic) if ic else None,
        }
    chain_ms = sum(r.get("execution_ms", 0) for r in reports)
    single = sum(r.get("single_shot_ms_estimate", 0) for r in reports)
    return {"per_args": per_arg, "overhead_ratio": chain_ms / single if single else None}


def run_plan(plan: BenchPlan) -> BenchResult:
    jobs = [(args, rep) for args in plan.args_sweep for rep in range(plan.repetitions)]
    if plan.parallel > 1:
        with ThreadPoolExecutor(plan.parallel) as pool:
            results = list(pool.map(lambda job: run_one(plan, job[0], job[1]), jobs))
    else:
        results = [run_one(plan, args, rep) for args, rep in jobs]
    samples = [s for s, _ in results]
    reports = [r for s, r in results if s.status == STATUS_OK]
    return BenchResult(samples, _summarize(samples, reports))


# --------------------------------------------------------------------------
# CSV

COLUMNS = [f.name for f in fields(BenchSample)]
_INT_COLUMNS = {"run_index", "execution_ms", "invocation_count", "checkpoint_ms_total",
                "upload_ms_total", "duplicate_finals"}


def _row(sample: BenchSample) -> list[Any]:
    row = []
    for name in COLUMNS:
        value = getattr(sample, name)
        row.append(json.dumps(list(value), separators=(",", ":")) if name == "args" else value)
    return row


def format_csv(samples: Sequence[BenchSample]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(COLUMNS)
    writer.writerows(_row(s) for s in samples)
    return buf.getvalue()


def emit_csv(samples: Sequence[BenchSample], path: Path | str) -> Path:
    if not samples:
        raise ValueError("no samples to write")
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(format_csv(samples))
    return path


def parse_csv(text: str) -> list[BenchSample]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != COLUMNS:
        raise ValueError(f"unexpected header {rows[:1]}")
    out = []
    for row in rows[1:]:
        kw: dict[str, Any] = dict(zip(COLUMNS, row))
        kw["args"] = _tuplify(json.loads(kw["args"]))
        for name in _INT_COLUMNS:
            kw[name] = int(kw[name])
        out.append(BenchSample(**kw))
    return out


def _tuplify(value: Any) -> Any:
    if isinstance(value, list):
        return tuple(_tuplify(v) for v in value)
    return value
