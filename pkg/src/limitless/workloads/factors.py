"""Integer factorization by trial division."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

from . import kernels
from .base import PartialSink, StepHook, Workload, WorkloadError, drive

REAL_BLOCK = 1_000_000
SIMULATED_BLOCK = 1


@dataclass
class FactorsState:
    n: int
    n_remaining: int
    divisor: int = 2
    factors_found: list[int] = field(default_factory=list)
    work_units_done: int = 0
    block: int = REAL_BLOCK


class Factors(Workload):
    """One step runs one block of divisor probes and costs one work unit."""

    name = "factors"

    def initial_state(self, args: Sequence[str], simulated: bool = False) -> dict:
        if not args:
            raise WorkloadError("factors needs an integer argument")
        n = int(args[0])
        if n < 1:
            raise WorkloadError("factors argument must be >= 1")
        if len(args) > 1:
            block = int(args[1])
        else:
            block = int(os.environ.get("LF_FACTORS_BLOCK", SIMULATED_BLOCK if simulated else REAL_BLOCK))
        if block < 1:
            raise WorkloadError("block size must be >= 1")
        return asdict(FactorsState(n=n, n_remaining=n, block=block))

    def step(self, state: dict, emit: PartialSink) -> int:
        n, d, found, _ = kernels.factor_block(state["n_remaining"], state["divisor"], state["block"])
        state["n_remaining"] = n
        state["divisor"] = d
        state["factors_found"].extend(found)
        state["work_units_done"] += 1
        return 1

    def is_done(self, state: dict) -> bool:
        return state["n_remaining"] == 1

    def result(self, state: dict) -> dict:
        return {"n": state["n"], "factors": sorted(state["factors_found"])}


def factors_run(n: int, state: Optional[FactorsState] = None,
                step_hook: Optional[StepHook] = None, block: int = SIMULATED_BLOCK) -> list[int]:
    """Sorted prime factors of ``n`` with multiplicity."""
    if n < 1:
        raise WorkloadError("n must be >= 1")
    st = asdict(state) if state is not None else asdict(FactorsState(n=n, n_remaining=n, block=block))
    drive(Factors(), st, None, step_hook)
    return sorted(st["factors_found"])
