"""Checkpointable benchmark workloads and their registry."""

from __future__ import annotations

from .base import UnknownWorkload, Workload, WorkloadError, drive
from .counter import Counter, CounterState, counter_run
from .factors import Factors, FactorsState, factors_run
from .matrix import Matrix, MatrixState, matrix_run

_REGISTRY: dict[str, Workload] = {}


def register(workload: Workload) -> None:
    _REGISTRY[workload.name] = workload


def unregister(name: str) -> None:
    _REGISTRY.pop(name, None)


def get_workload(name: str) -> Workload:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise UnknownWorkload(name) from None


def registered() -> list[str]:
    return sorted(_REGISTRY)


for _w in (Counter(), Factors(), Matrix()):
    register(_w)

__all__ = [
    "Counter", "CounterState", "Factors", "FactorsState", "Matrix", "MatrixState",
    "UnknownWorkload", "Workload", "WorkloadError", "counter_run", "drive",
    "factors_run", "get_workload", "matrix_run", "register", "registered", "unregister",
]
