"""Per-invocation orchestration: restore, run, checkpoint-and-reinvoke, finalize.

One call to :func:`execute_invocation` is one link of a chain.  The
checkpoint timer and the workload race for a single-assignment cell; the
winner (COMPLETING or CHECKPOINTING) does all the work that follows.
"""

from __future__ import annotations

import enum
import logging
import tempfile
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Protocol

from .checkpoint import AlreadyCompleted, CheckpointError, ManagedWorkload, RunStatus
from .clock import ActivationKilled, Clock
from .logs import EventLog
from .model import CheckpointManifest, InvocationContext, advance_context, verify_manifest
from .stores import ACCEPTED, CheckpointRepo, CorruptCheckpoint, ResultsRepo, StoreError
from .workloads import UnknownWorkload, WorkloadError

log = logging.getLogger(__name__)


class RestorePolicy(str, enum.Enum):
    FAIL_CHAIN = "fail_chain"
    RESTART_FROM_SCRATCH = "restart_from_scratch"


@dataclass(frozen=True)
class RunnerConfig:
    checkpoint_trigger_ms: int = 50_000
    fencing_enabled: bool = True
    max_chain_length: int = 64
    restore_policy: RestorePolicy = RestorePolicy.FAIL_CHAIN
    # False runs the workload single-shot with no timer (the unmodified baseline)
    chaining_enabled: bool = True
    # virtual ms per declared work unit; in real mode only paced workloads sleep it
    work_unit_ms: int = 1000
    # None: terminate right after the checkpoint.  Otherwise the workload keeps
    # running this long after re-invocation (reproduces the duplicate-result race).
    termination_delay_ms: Optional[int] = None

    def __post_init__(self) -> None:
        if self.checkpoint_trigger_ms <= 0:
            raise ValueError("checkpoint_trigger_ms must be positive")
        if self.max_chain_length < 1:
            raise ValueError("max_chain_length must be >= 1")
        if self.work_unit_ms < 0:
            raise ValueError("work_unit_ms must be >= 0")
        object.__setattr__(self, "restore_policy", RestorePolicy(self.restore_policy))


class Invoker(Protocol):
    def invoke(self, action: str, params: dict, blocking: bool = False) -> Any: ...


@dataclass
class RunnerDeps:
    checkpointer: Any
    ckpt_repo: CheckpointRepo
    results_repo: ResultsRepo
    invoker: Optional[Invoker]
    clock: Clock
    action_name: str = "limitless"
    work_dir: Optional[Path] = None
    events: Optional[EventLog] = None

    def __post_init__(self) -> None:
        if self.work_dir is None:
            self.work_dir = Path(tempfile.mkdtemp(prefix="limitless-"))
        if self.events is None:
            self.events = EventLog(clock=self.clock)


class Kind(str, enum.Enum):
    COMPLETED = "completed"
    CHECKPOINTED_AND_REINVOKED = "checkpointed_and_reinvoked"
    FAILED = "failed"


@dataclass
class Timings:
    restore_ms: int = 0
    work_ms: int = 0
    checkpoint_ms: int = 0
    upload_ms: int = 0
    invoke_ms: int = 0

    def to_json(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class InvocationOutcome:
    kind: Kind
    chain_id: str
    seq: int
    result: Any = None
    manifest: Optional[CheckpointManifest] = None
    next_activation_id: Optional[str] = None
    timings: Timings = field(default_factory=Timings)
    finalize: Optional[str] = None
    restore: str = "fresh"
    error: str = ""
    trigger_ms: int = 0

    def __post_init__(self) -> None:
        if self.kind == Kind.COMPLETED and self.manifest is not None:
            raise ValueError("a completed outcome carries no manifest")
        if self.kind == Kind.CHECKPOINTED_AND_REINVOKED and (self.manifest is None or not self.next_activation_id):
            raise ValueError("a reinvoked outcome needs a manifest and the next activation id")

    def to_json(self) -> dict:
        return {
            "kind": self.kind.value,
            "chain_id": self.chain_id,
            "seq": self.seq,
            "result": self.result,
            "manifest": self.manifest.to_json() if self.manifest else None,
            "next_activation_id": self.next_activation_id,
            "timings": self.timings.to_json(),
            "finalize": self.finalize,
            "restore": self.restore,
            "error": self.error,
            "trigger_ms": self.trigger_ms,
        }


@dataclass(frozen=True)
class RestoreDecision:
    kind: str  # fresh | resumed | failed
    from_seq: Optional[int] = None
    reason: str = ""
    handle: Optional[ManagedWorkload] = field(default=None, compare=False, repr=False)

    def __str__(self) -> str:
        if self.kind == "resumed":
            return f"resumed({self.from_seq})"
        if self.kind == "failed":
            return f"failed({self.reason})"
        return "fresh"


class TransitionCell:
    """Single-assignment state: the first claim wins, later claims fail."""

    COMPLETING = "COMPLETING"
    CHECKPOINTING = "CHECKPOINTING"

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.state: Optional[str] = None

    def claim(self, state: str) -> bool:
        with self._lock:
            if self.state is None:
                self.state = state
            return self.state == state


def restore_if_available(ctx: InvocationContext, ckpt_repo: CheckpointRepo, checkpointer: Any, *,
                         work_dir: Path, policy: RestorePolicy = RestorePolicy.FAIL_CHAIN,
                         emit=None, events: Optional[EventLog] = None) -> RestoreDecision:
    """Download, verify and restore the chain's latest checkpoint, if any."""

    def degrade(reason: str, detail: str) -> RestoreDecision:
        if policy == RestorePolicy.RESTART_FROM_SCRATCH:
            if events:
                events.emit("restore", level=logging.WARNING, chain_id=ctx.chain_id, seq=ctx.seq,
                            decision="fresh", degraded_from=reason, detail=detail)
            return RestoreDecision("fresh", reason=reason)
        return RestoreDecision("failed", reason=reason)

    try:
        found = ckpt_repo.get_latest(ctx.chain_id)
    except CorruptCheckpoint as exc:
        return degrade("corrupt", str(exc))
    except StoreError as exc:
        return degrade("restore-error", str(exc))
    if found is None:
        return RestoreDecision("fresh")
    manifest, reader = found
    in_dir = Path(work_dir) / ctx.chain_id / f"{ctx.seq}-restore"
    in_dir.mkdir(parents=True, exist_ok=True)
    for entry in manifest.files:
        data = reader(entry.relative_path)
        if data is None:
            return degrade("corrupt", f"{entry.relative_path} absent")
        target = in_dir / entry.relative_path
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(data)

    def local(rel: str) -> Optional[bytes]:
        p = in_dir / rel
        return p.read_bytes() if p.is_file() else None

    report = verify_manifest(manifest, local)
    if not report.ok:
        return degrade("corrupt", "; ".join(f"{f.relative_path}: {f.reason}" for f in report.failures))
    try:
        handle = checkpointer.restore(manifest, in_dir, seq=ctx.seq, emit=emit)
    except (CheckpointError, OSError) as exc:
        return degrade("restore-error", str(exc))
    return RestoreDecision("resumed", from_seq=manifest.seq, handle=handle)


def finalize(ctx: InvocationContext, result: Any, results_repo: ResultsRepo, config: RunnerConfig,
             finished_at: int = 0) -> str:
    """Record the chain's final result; returns ``accepted`` or ``duplicate_rejected``."""
    return results_repo.finalize(ctx.chain_id, ctx.seq, result, fencing=config.fencing_enabled,
                                 finished_at=finished_at)


def execute_invocation(ctx: InvocationContext, config: RunnerConfig, deps: RunnerDeps) -> InvocationOutcome:
    clock, ev = deps.clock, deps.events
    start = clock.now_ms()
    timings = Timings()
    base = dict(chain_id=ctx.chain_id, seq=ctx.seq)

    def failed(reason: str, manifest=None, restore="fresh") -> InvocationOutcome:
        try:
            deps.results_repo.mark_failed(ctx.chain_id, reason)
        except StoreError as exc:
            log.error("could not mark chain %s failed: %s", ctx.chain_id, exc)
        ev.emit("failed", level=logging.ERROR, reason=reason, **base)
        # a failed outcome may keep its manifest (re-invocation failed after upload)
        return InvocationOutcome(Kind.FAILED, ctx.chain_id, ctx.seq, manifest=manifest, timings=timings,
                                 restore=restore, error=reason, trigger_ms=ctx.checkpoint_trigger_ms)

    try:
        deps.results_repo.observe_invocation(ctx.chain_id, ctx.seq)
    except StoreError as exc:
        return failed(f"results repository unavailable: {exc}")
    if ctx.seq > config.max_chain_length:
        return failed(f"chain exceeded max_chain_length={config.max_chain_length}")

    def emit(payload: Any) -> None:
        deps.results_repo.put_partial(ctx.chain_id, ctx.seq, payload)

    t0 = clock.now_ms()
    decision = restore_if_available(ctx, deps.ckpt_repo, deps.checkpointer, work_dir=deps.work_dir,
                                    policy=config.restore_policy, emit=emit, events=ev)
    timings.restore_ms = clock.now_ms() - t0
    ev.emit("restore", decision=str(decision), restore_ms=timings.restore_ms, **base)
    if decision.kind == "failed":
        return failed(decision.reason, restore=str(decision))
    handle = decision.handle
    if handle is None:
        try:
            handle = deps.checkpointer.launch(ctx.spec, chain_id=ctx.chain_id, seq=ctx.seq, emit=emit)
        except (UnknownWorkload, WorkloadError, CheckpointError) as exc:
            return failed(str(exc))

    cell = TransitionCell()
    timer = None
    if config.chaining_enabled:
        trigger_at = start + ctx.checkpoint_trigger_ms
        timer = clock.call_at(trigger_at, lambda: cell.claim(TransitionCell.CHECKPOINTING))
        ev.emit("trigger-armed", at=trigger_at, **base)

    paced = getattr(getattr(handle, "workload", None), "paced", False)
    simulated = clock.mode == "simulated"

    def hook(units: int) -> None:
        if units and (simulated or paced):
            clock.spend(units * config.work_unit_ms)
        else:
            clock.check()

    def pause_requested() -> bool:
        clock.poll()
        return cell.state == TransitionCell.CHECKPOINTING

    def cancel_timer() -> None:
        if timer is not None:
            timer.cancel()

    t0 = clock.now_ms()
    ev.emit("work-start", restore=str(decision), **base)
    try:
        status = handle.run(hook, pause_requested)
    except ActivationKilled:
        cancel_timer()
        handle.terminate()
        raise
    except Exception as exc:  # noqa: BLE001 - any workload failure fails the chain
        cancel_timer()
        handle.terminate()
        timings.work_ms = clock.now_ms() - t0
        return failed(f"workload error: {exc}", restore=str(decision))
    timings.work_ms = clock.now_ms() - t0

    out_dir = Path(deps.work_dir) / ctx.chain_id / f"{ctx.seq}-checkpoint"

    def complete() -> InvocationOutcome:
        try:
            verdict = finalize(ctx, handle.result, deps.results_repo, config, finished_at=clock.now_ms())
        except StoreError as exc:
            return failed(f"results repository unavailable: {exc}", restore=str(decision))
        ev.emit("finalized", verdict=verdict, **base)
        return InvocationOutcome(Kind.COMPLETED, ctx.chain_id, ctx.seq, result=handle.result, timings=timings,
                                 finalize=verdict, restore=str(decision), trigger_ms=ctx.checkpoint_trigger_ms)

    if status == RunStatus.COMPLETED:
        cancel_timer()
        if not cell.claim(TransitionCell.COMPLETING):
            # the timer fired but the workload finished before pausing
            try:
                deps.checkpointer.checkpoint(handle, out_dir)
            except AlreadyCompleted:
                ev.emit("checkpoint-skipped", reason="already-completed", **base)
        return complete()

    t0 = clock.now_ms()
    ev.emit("checkpoint-start", **base)
    try:
        manifest = deps.checkpointer.checkpoint(handle, out_dir)
    except AlreadyCompleted:
        cancel_timer()
        ev.emit("checkpoint-skipped", reason="already-completed", **base)
        return complete()
    except (CheckpointError, OSError) as exc:
        handle.terminate()
        return failed(f"checkpoint failed: {exc}", restore=str(decision))
    timings.checkpoint_ms = clock.now_ms() - t0
    ev.emit("checkpoint-done", checkpoint_ms=timings.checkpoint_ms, bytes=manifest.total_bytes, **base)

    t0 = clock.now_ms()
    try:
        blobs = {f.relative_path: (out_dir / f.relative_path).read_bytes() for f in manifest.files}
        deps.ckpt_repo.put(manifest, blobs)
    except (StoreError, OSError) as exc:
        handle.terminate()
        return failed(f"upload failed: {exc}", restore=str(decision))
    timings.upload_ms = clock.now_ms() - t0
    ev.emit("upload-done", upload_ms=timings.upload_ms, **base)

    t0 = clock.now_ms()
    nxt = advance_context(ctx)
    try:
        if deps.invoker is None:
            raise RuntimeError("no invoker configured")
        next_id = deps.invoker.invoke(deps.action_name, nxt.to_params(), blocking=False)
    except Exception as exc:  # noqa: BLE001 - invoker transports raise anything
        handle.terminate()
        return failed(f"re-invocation failed (checkpoint {ctx.chain_id}/{ctx.seq} retained): {exc}",
                      manifest=manifest, restore=str(decision))
    if isinstance(next_id, tuple):
        next_id = next_id[0]
    timings.invoke_ms = clock.now_ms() - t0
    ev.emit("reinvoked", next_activation_id=next_id, next_seq=nxt.seq, invoke_ms=timings.invoke_ms, **base)

    cost = timings.checkpoint_ms + timings.upload_ms + timings.invoke_ms
    margin = ctx.timeout_ms - ctx.checkpoint_trigger_ms
    if margin < 2 * cost:
        ev.emit("margin-warning", level=logging.WARNING, margin_ms=margin, observed_cost_ms=cost, **base)

    shadow = None
    if config.termination_delay_ms is None:
        handle.terminate()
    else:
        shadow = _run_shadow(ctx, config, deps, handle, hook, base)
    return InvocationOutcome(Kind.CHECKPOINTED_AND_REINVOKED, ctx.chain_id, ctx.seq, manifest=manifest,
                             next_activation_id=next_id, timings=timings, restore=str(decision),
                             finalize=shadow, trigger_ms=ctx.checkpoint_trigger_ms)


def _run_shadow(ctx, config, deps, handle, hook, base) -> Optional[str]:
    """Keep the checkpointed workload alive for ``termination_delay_ms``.

    If it completes in that window it finalizes too, racing its successor.
    """
    clock = deps.clock
    kill_at = clock.now_ms() + config.termination_delay_ms
    try:
        try:
            status = handle.run(hook, lambda: clock.now_ms() >= kill_at)
        except Exception as exc:  # noqa: BLE001
            deps.events.emit("shadow-error", error=str(exc), **base)
            return None
        if status != RunStatus.COMPLETED:
            return None
        verdict = finalize(ctx, handle.result, deps.results_repo, config, finished_at=clock.now_ms())
        deps.events.emit("finalized", verdict=verdict, shadow=True, **base)
        return verdict
    finally:
        handle.terminate()


__all__ = [
    "ACCEPTED", "InvocationOutcome", "Kind", "RestoreDecision", "RestorePolicy", "RunnerConfig",
    "RunnerDeps", "Timings", "TransitionCell", "execute_invocation", "finalize", "restore_if_available",
]
