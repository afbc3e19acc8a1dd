"""The counting test function: increments to a limit, posting every tenth."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence

from .base import PartialSink, StepHook, Workload, WorkloadError, drive

DEFAULT_LIMIT = 70
POST_EVERY = 10


@dataclass
class CounterState:
    limit: int = DEFAULT_LIMIT
    count: int = 0
    # highest multiple of POST_EVERY already posted; survives restores so
    # a resumed run never re-posts
    last_posted: int = 0


class Counter(Workload):
    name = "counter"
    paced = True

    def initial_state(self, args: Sequence[str], simulated: bool = False) -> dict:
        limit = int(args[0]) if args else DEFAULT_LIMIT
        if limit < 0:
            raise WorkloadError("counter limit must be >= 0")
        return asdict(CounterState(limit=limit))

    def step(self, state: dict, emit: PartialSink) -> int:
        state["count"] += 1
        c = state["count"]
        if c % POST_EVERY == 0 and c > state["last_posted"]:
            emit({"count": c})
            state["last_posted"] = c
        return 1

    def is_done(self, state: dict) -> bool:
        return state["count"] >= state["limit"]

    def result(self, state: dict) -> dict:
        return {"count": state["count"]}


def counter_run(limit: int, state: Optional[CounterState] = None,
                partial_sink: Optional[PartialSink] = None,
                step_hook: Optional[StepHook] = None) -> int:
    if limit < 0:
        raise WorkloadError("counter limit must be >= 0")
    st = asdict(state) if state is not None else asdict(CounterState(limit=limit))
    st["limit"] = limit
    drive(Counter(), st, partial_sink, step_hook)
    return st["count"]
