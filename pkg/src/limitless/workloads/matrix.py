"""Seeded integer matrix multiplication, one output row per step.

Operands are 32-bit signed integers from a splitmix64 stream: the first
``size*size`` values fill A, the next fill B.  Products and the checksum
(the sum of every product entry) are reduced modulo 2**64.
"""

from __future__ import annotations

import functools
from array import array
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

from . import kernels
from .base import PartialSink, StepHook, Workload, WorkloadError, drive

MASK64 = (1 << 64) - 1


@dataclass
class MatrixState:
    size: int
    seed: int = 0
    next_row: int = 0
    partial_product_rows: list[list[int]] = field(default_factory=list)
    checksum_partial: int = 0


@functools.lru_cache(maxsize=8)
def operands(size: int, seed: int):
    values = kernels.splitmix_int32(seed, 2 * size * size)
    cut = size * size
    return values[:cut], values[cut:]


def product_rows(a, b, size: int) -> list[list[int]]:
    # the compiled kernel wants typed buffers
    a, b = array("q", a), array("q", b)
    return [kernels.matmul_row(a, b, size, i) for i in range(size)]


def checksum(rows: Sequence[Sequence[int]]) -> int:
    return sum(sum(r) for r in rows) & MASK64


class Matrix(Workload):
    name = "matrix"

    def initial_state(self, args: Sequence[str], simulated: bool = False) -> dict:
        if not args:
            raise WorkloadError("matrix needs a size argument")
        size = int(args[0])
        seed = int(args[1]) if len(args) > 1 else 0
        if size < 1:
            raise WorkloadError("matrix size must be >= 1")
        return asdict(MatrixState(size=size, seed=seed))

    def step(self, state: dict, emit: PartialSink) -> int:
        size = state["size"]
        a, b = operands(size, state["seed"])
        row = kernels.matmul_row(a, b, size, state["next_row"])
        state["partial_product_rows"].append(row)
        state["checksum_partial"] = (state["checksum_partial"] + sum(row)) & MASK64
        state["next_row"] += 1
        return 1

    def is_done(self, state: dict) -> bool:
        return state["next_row"] >= state["size"]

    def result(self, state: dict) -> dict:
        return {"rows": state["size"], "cols": state["size"], "checksum": state["checksum_partial"]}


def matrix_run(size: int, seed: int, state: Optional[MatrixState] = None,
               step_hook: Optional[StepHook] = None) -> dict:
    """Checksum and dimensions of the seeded ``size``-square product."""
    if size < 1:
        raise WorkloadError("size must be >= 1")
    st = asdict(state) if state is not None else asdict(MatrixState(size=size, seed=seed))
    m = Matrix()
    drive(m, st, None, step_hook)
    return m.result(st)
