from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))

from limitless.clock import SimulatedClock  # noqa: E402
from limitless.gateway import DEFAULT_ACTION, local_platform  # noqa: E402
from limitless.model import CHAIN_ID_PARAM, SEQ_PARAM  # noqa: E402
from limitless.runner import RunnerConfig  # noqa: E402
from limitless.stores import MemoryCheckpointRepo, MemoryResultsRepo  # noqa: E402

_ACCEPTANCE: dict[int, list[str]] = {}


class SimPlatform:
    """Simulated clock, in-memory stores and a gateway wired to one runner action."""

    def __init__(self, tmp_path: Path, timeout_ms: int = 60_000, **config) -> None:
        self.clock = SimulatedClock()
        self.ckpt = MemoryCheckpointRepo()
        self.results = MemoryResultsRepo()
        self.config = RunnerConfig(**config)
        self.gateway = local_platform(self.clock, self.config, ckpt_repo=self.ckpt, results_repo=self.results,
                                      timeout_ms=timeout_ms, work_dir=tmp_path / "work")

    def run_chain(self, bin_: str, args, chain_id: str = "c1", **extra):
        params = {"bin": bin_, "bin_args": list(args), CHAIN_ID_PARAM: chain_id, SEQ_PARAM: 1, **extra}
        aid, response = self.gateway.invoke(DEFAULT_ACTION, params, blocking=True)
        self.gateway.drain()
        return aid, response, self.results.get(chain_id)


@pytest.fixture
def platform(tmp_path):
    def make(**kw) -> SimPlatform:
        return SimPlatform(tmp_path, **kw)

    return make


def pytest_runtest_logreport(report):
    # count the call phase, or a setup that skipped or errored
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    n = getattr(report, "acceptance", None)
    if n is None:
        return
    _ACCEPTANCE.setdefault(n, []).append(report.outcome)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is not None:
        report.acceptance = marker.args[0]


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        outcomes = _ACCEPTANCE[n]
        if "failed" in outcomes:
            verdict = "FAIL"
        elif all(o == "skipped" for o in outcomes):
            verdict = "SKIP"
        else:
            verdict = "PASS"
        terminalreporter.write_line(f"criterion {n:2d}: {verdict} ({len(outcomes)} checks)")
