"""Step-machine protocol shared by the cooperative workloads."""

from __future__ import annotations

from typing import Any, Callable, Optional, Sequence

PartialSink = Callable[[dict], None]
StepHook = Callable[[int], None]


class WorkloadError(Exception):
    """Raised by a workload for invalid arguments or a failed step."""


class UnknownWorkload(LookupError):
    def __init__(self, name: str) -> None:
        super().__init__(f"unknown workload {name!r}")
        self.name = name


class Workload:
    """A deterministic computation that can stop at any step boundary.

    ``state`` objects are JSON-compatible dicts owned by whoever drives the
    steps; ``step`` mutates them in place and returns the number of work
    units it consumed.  Resuming from a serialized state must reproduce the
    uninterrupted run exactly, including the partials it emits.
    """

    name = ""
    version = 1
    # In real-clock mode a paced workload waits one unit length per unit.
    paced = False

    def initial_state(self, args: Sequence[str], simulated: bool = False) -> dict:
        raise NotImplementedError

    def step(self, state: dict, emit: PartialSink) -> int:
        raise NotImplementedError

    def is_done(self, state: dict) -> bool:
        raise NotImplementedError

    def result(self, state: dict) -> Any:
        raise NotImplementedError


def drive(workload: Workload, state: dict, emit: Optional[PartialSink] = None,
          step_hook: Optional[StepHook] = None, max_steps: Optional[int] = None) -> int:
    """Step ``state`` until done (or ``max_steps``); returns the steps taken."""
    emit = emit or (lambda _payload: None)
    steps = 0
    while not workload.is_done(state):
        if max_steps is not None and steps >= max_steps:
            break
        units = workload.step(state, emit)
        steps += 1
        if step_hook is not None:
            step_hook(units)
    return steps
