import json
import threading
import time
import urllib.error
import urllib.request

import pytest

from limitless.clock import RealClock, SimulatedClock
from limitless.gateway import (
    DEFAULT_ACTION,
    ActionConfig,
    ChainNotFinished,
    Gateway,
    GatewayError,
    HttpInvoker,
    PlainAction,
    ProcessAction,
    Throttled,
    UnknownAction,
    UnknownActivation,
    UnknownChain,
    local_platform,
    make_http_server,
)
from limitless.model import Outcome
from limitless.runner import RunnerConfig
from limitless.stores import LocalFsResultsRepo, MemoryCheckpointRepo, MemoryResultsRepo


@pytest.mark.parametrize("kw", [dict(timeout_ms=0), dict(timeout_ms=300_001), dict(memory_mb=513),
                                dict(memory_mb=0), dict(concurrency_limit=0)])
def test_action_config_limits(kw):
    with pytest.raises(ValueError):
        ActionConfig("a", **kw)


def test_action_config_defaults():
    c = ActionConfig("a")
    assert (c.timeout_ms, c.memory_mb) == (60_000, 256)
    assert ActionConfig("b", timeout_ms=300_000, memory_mb=512).timeout_ms == 300_000


def test_unknown_action():
    with pytest.raises(UnknownAction):
        Gateway(SimulatedClock()).invoke("ghost", {}, blocking=True)


def test_invoke_counter_40_blocking(platform):
    p = platform()
    aid, response, rec = p.run_chain("counter", [40])
    assert response["result"]["result"] == {"count": 40}
    assert len(p.gateway.activations()) == 1
    assert p.gateway.activation(aid).billed_ms == 40_000


def test_blocking_returns_own_outcome_not_chain(platform):
    p = platform()
    aid, response, rec = p.run_chain("counter", [70])
    assert response["result"]["kind"] == "checkpointed_and_reinvoked"
    assert response["result"]["seq"] == 1
    assert rec.final.winner_seq == 2


def test_work_120_trigger_50_needs_three(platform):
    p = platform(checkpoint_trigger_ms=50, work_unit_ms=1, timeout_ms=60)
    p.run_chain("counter", [120])
    assert p.gateway.chain_report("c1")["invocation_count"] == 3


def _sleeper(clock, ms):
    def fn(params):
        clock.spend(ms)
        return {"slept": ms}

    return PlainAction(fn)


def test_completion_one_ms_before_timeout_is_billed_exactly():
    clock = SimulatedClock()
    gw = Gateway(clock)
    gw.register(ActionConfig("s"), _sleeper(clock, 59_999))
    aid, response = gw.invoke("s", {}, blocking=True)
    rec = gw.activation(aid)
    assert rec.outcome == Outcome.SUCCESS and rec.billed_ms == 59_999
    assert response == {"result": {"slept": 59_999}}


def test_simulated_timeout_kill():
    clock = SimulatedClock()
    gw = Gateway(clock)
    gw.register(ActionConfig("s", timeout_ms=1_000), _sleeper(clock, 5_000))
    aid, response = gw.invoke("s", {}, blocking=True)
    rec = gw.activation(aid)
    assert rec.outcome == Outcome.TIMEOUT_KILLED and rec.billed_ms == 1_000 and rec.end == 1_000
    assert response is None


def test_action_exception_is_error_outcome():
    gw = Gateway(SimulatedClock())
    gw.register(ActionConfig("bad"), PlainAction(lambda p: 1 / 0))
    aid, response = gw.invoke("bad", {}, blocking=True)
    assert gw.activation(aid).outcome == Outcome.ERROR
    assert "division" in response["error"]


def test_throttling_rejects_instead_of_queueing():
    clock = SimulatedClock()
    gw = Gateway(clock)
    gw.register(ActionConfig("s", concurrency_limit=1), _sleeper(clock, 10))
    gw.invoke("s", {})
    with pytest.raises(Throttled, match="throttled"):
        gw.invoke("s", {})
    gw.drain()
    gw.invoke("s", {})


def test_queries_on_unknown_ids(platform):
    gw = platform().gateway
    with pytest.raises(UnknownActivation):
        gw.activation("nope")
    with pytest.raises(UnknownChain):
        gw.chain_report("nope")


def test_report_of_running_chain_is_refused():
    clock = SimulatedClock()
    results = MemoryResultsRepo()
    gw = local_platform(clock, RunnerConfig(), ckpt_repo=MemoryCheckpointRepo(), results_repo=results)
    gw.invoke(DEFAULT_ACTION, {"bin": "counter", "bin_args": [70], "__chain_id": "r", "__seq": 1})
    results.observe_invocation("r", 1)
    with pytest.raises(ChainNotFinished):
        gw.chain_report("r")
    gw.drain()
    assert gw.chain_report("r")["status"] == "completed"


def test_activation_ids_unique_and_billing_sums(platform):
    p = platform(checkpoint_trigger_ms=50, work_unit_ms=1, timeout_ms=60)
    p.run_chain("counter", [230])
    acts = p.gateway.activations("c1")
    assert len({a.activation_id for a in acts}) == len(acts) == 5
    assert all(a.billed_ms <= 60 for a in acts)
    report = p.gateway.chain_report("c1")
    assert report["total_billed_ms"] == sum(a.billed_ms for a in acts) == 230
    assert report["double_billed_ms"] == 0
    assert report["single_shot_ms_estimate"] == 230


def test_simulated_runs_are_bit_identical(tmp_path):
    def records():
        from conftest import SimPlatform

        p = SimPlatform(tmp_path, checkpoint_trigger_ms=50, work_unit_ms=1, timeout_ms=60)
        p.run_chain("factors", [999_983, 32])
        return [a.to_json() for a in p.gateway.activations()]

    assert records() == records()


# real clock ------------------------------------------------------------------


def test_real_timeout_kills_uncooperative_action():
    gw = Gateway(RealClock())
    release = threading.Event()

    def stubborn(params):
        release.wait(5)  # ignores the kill signal
        return "late"

    gw.register(ActionConfig("s", timeout_ms=100), PlainAction(stubborn))
    t0 = time.monotonic()
    aid, response = gw.invoke("s", {}, blocking=True)
    assert time.monotonic() - t0 < 2
    release.set()
    rec = gw.activation(aid)
    assert rec.outcome == Outcome.TIMEOUT_KILLED and rec.billed_ms == 100
    assert response is None


def test_real_timeout_stops_cooperative_spend():
    clock = RealClock()
    gw = Gateway(clock)
    gw.register(ActionConfig("s", timeout_ms=100), _sleeper(clock, 10_000))
    aid, _ = gw.invoke("s", {}, blocking=True)
    gw.drain()
    assert gw.activation(aid).outcome == Outcome.TIMEOUT_KILLED


def test_real_throttle():
    clock = RealClock()
    gw = Gateway(clock)
    gw.register(ActionConfig("s", timeout_ms=2_000, concurrency_limit=1), _sleeper(clock, 200))
    gw.invoke("s", {})
    with pytest.raises(Throttled):
        gw.invoke("s", {})
    gw.drain()


@pytest.mark.slow
def test_real_clock_chain():
    clock = RealClock()
    results = MemoryResultsRepo()
    gw = local_platform(clock, RunnerConfig(checkpoint_trigger_ms=300, work_unit_ms=20), ckpt_repo=MemoryCheckpointRepo(),
                        results_repo=results, timeout_ms=600, seed=None)
    gw.invoke(DEFAULT_ACTION, {"bin": "counter", "bin_args": [25], "__chain_id": "rc", "__seq": 1})
    gw.drain()
    report = gw.chain_report("rc")
    assert report["invocation_count"] == 2
    assert report["final"] == {"count": 25}
    assert report["trilemma"]["double_billing_violated"] is True


# HTTP ------------------------------------------------------------------------------


def _get(url):
    try:
        with urllib.request.urlopen(url, timeout=10) as r:
            return r.status, json.loads(r.read())
    except urllib.error.HTTPError as e:
        return e.code, json.loads(e.read())


@pytest.fixture
def http_gateway():
    clock = SimulatedClock()
    gw = local_platform(clock, RunnerConfig(), ckpt_repo=MemoryCheckpointRepo(), results_repo=MemoryResultsRepo())
    httpd = make_http_server(gw, port=0, host="127.0.0.1")
    threading.Thread(target=httpd.serve_forever, daemon=True).start()
    yield gw, f"http://127.0.0.1:{httpd.server_address[1]}"
    httpd.shutdown()
    httpd.server_close()


def test_http_invoke_and_report(http_gateway):
    gw, base = http_gateway
    inv = HttpInvoker(base)
    aid, response = inv.invoke(DEFAULT_ACTION, {"bin": "counter", "bin_args": [70], "__chain_id": "h", "__seq": 1},
                               blocking=True)
    assert response["result"]["kind"] == "checkpointed_and_reinvoked"
    status, act = _get(f"{base}/api/activations/{aid}")
    assert status == 200 and act["outcome"] == "success" and act["billed_ms"] == 50_000
    status, report = _get(f"{base}/api/chains/h/report")
    assert status == 200 and report["invocation_count"] == 2 and report["final"] == {"count": 70}


def test_http_non_blocking_returns_id(http_gateway):
    gw, base = http_gateway
    aid = HttpInvoker(base).invoke(DEFAULT_ACTION, {"bin": "counter", "bin_args": [3]})
    assert aid.startswith("act-")
    assert gw.activation(aid).outcome == Outcome.SUCCESS


def test_http_errors(http_gateway):
    gw, base = http_gateway
    assert _get(f"{base}/api/activations/none")[0] == 404
    assert _get(f"{base}/api/chains/none/report")[0] == 404
    assert _get(f"{base}/elsewhere")[0] == 404
    with pytest.raises(GatewayError, match="unknown action"):
        HttpInvoker(base).invoke("ghost", {})
    req = urllib.request.Request(f"{base}/api/actions/{DEFAULT_ACTION}/invoke", data=b"[1]", method="POST")
    with pytest.raises(urllib.error.HTTPError) as info:
        urllib.request.urlopen(req, timeout=10)
    assert info.value.code == 400


@pytest.mark.slow
def test_process_actions_chain_through_http(tmp_path):
    clock = RealClock()
    results = LocalFsResultsRepo(tmp_path)
    gw = Gateway(clock, results)
    httpd = make_http_server(gw, port=0, host="127.0.0.1")
    threading.Thread(target=httpd.serve_forever, daemon=True).start()
    url = f"http://127.0.0.1:{httpd.server_address[1]}"
    env = {"LF_CKPT_DIR": str(tmp_path), "LF_GATEWAY_URL": url, "LF_TRIGGER_MS": "800",
           "LF_WORK_UNIT_MS": "50", "LF_LOG_LEVEL": "WARNING"}
    gw.register(ActionConfig(DEFAULT_ACTION, timeout_ms=3_000), ProcessAction(env))
    try:
        gw.invoke(DEFAULT_ACTION, {"bin": "counter", "bin_args": [25], "__chain_id": "p", "__seq": 1})
        gw.drain()
        report = gw.chain_report("p")
    finally:
        httpd.shutdown()
        httpd.server_close()
    assert report["final"] == {"count": 25}
    assert report["invocation_count"] == 2
    assert report["activations"] == 2
