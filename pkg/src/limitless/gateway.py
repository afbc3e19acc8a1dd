"""Mini FaaS platform: action registry, invocation, timeout enforcement, billing.

In simulated mode invocations are queued and executed one at a time on the
virtual clock, which makes whole chains reproducible.  In real mode every
activation runs on its own thread (or child process) and a timer kills it at
``start + timeout_ms``.
"""

from __future__ import annotations

import json
import logging
import os
import socket
import subprocess
import sys
import threading
import time
import urllib.error
import urllib.parse
import urllib.request
from collections import deque
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Any, Callable, Optional

from .action_server import ActionEnvironment, ActionServer
from .clock import ActivationKilled, Clock, RealClock, SimulatedClock
from .model import (
    PLATFORM_MAX_TIMEOUT_MS,
    ActivationRecord,
    ChainStatus,
    IdFactory,
    InvocationContext,
    Outcome,
    params_digest,
    split_params,
)
from .stores import ResultsRepo

log = logging.getLogger(__name__)

MAX_MEMORY_MB = 512


class GatewayError(Exception):
    status = 400


class UnknownAction(GatewayError):
    status = 404


class Throttled(GatewayError):
    status = 429


class UnknownActivation(GatewayError):
    status = 404


class UnknownChain(GatewayError):
    status = 404


class ChainNotFinished(GatewayError):
    status = 409


@dataclass(frozen=True)
class ActionConfig:
    name: str
    timeout_ms: int = 60_000
    memory_mb: int = 256
    concurrency_limit: int = 64

    def __post_init__(self) -> None:
        if not 0 < self.timeout_ms <= PLATFORM_MAX_TIMEOUT_MS:
            raise ValueError(f"timeout_ms must be in (0, {PLATFORM_MAX_TIMEOUT_MS}]")
        if not 0 < self.memory_mb <= MAX_MEMORY_MB:
            raise ValueError(f"memory_mb must be in (0, {MAX_MEMORY_MB}]")
        if self.concurrency_limit < 1:
            raise ValueError("concurrency_limit must be >= 1")


@dataclass
class ActivationInfo:
    activation_id: str
    action: ActionConfig
    start: int
    deadline: int
    kill: threading.Event = field(default_factory=threading.Event)
    chain_id: Optional[str] = None
    seq: Optional[int] = None
    on_kill: list[Callable[[], None]] = field(default_factory=list)

    def label(self, ctx: InvocationContext) -> None:
        self.chain_id, self.seq = ctx.chain_id, ctx.seq


# --------------------------------------------------------------------------
# action backends


class InProcessAction:
    """A fresh :class:`ActionServer` per activation, driven through /init and /run."""

    def __init__(self, env: ActionEnvironment) -> None:
        self.env = env

    def __call__(self, params: dict, info: ActivationInfo) -> dict:
        server = ActionServer(self.env)
        status, body = server.handle_init({"value": {"name": info.action.name}})
        if status != 200:
            return body
        _, body = server.handle_run(
            {"value": params, "activation_id": info.activation_id, "deadline": info.deadline},
            on_context=info.label,
        )
        return body


class PlainAction:
    """Wraps a bare callable ``fn(params) -> result`` (no action interface)."""

    def __init__(self, fn: Callable[[dict], Any]) -> None:
        self.fn = fn

    def __call__(self, params: dict, info: ActivationInfo) -> dict:
        return {"result": self.fn(params)}


def _post_json(url: str, payload: Any, timeout: Optional[float] = None) -> tuple[int, dict]:
    req = urllib.request.Request(url, data=json.dumps(payload).encode(), method="POST",
                                 headers={"Content-Type": "application/json"})
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            return resp.status, json.loads(resp.read() or b"{}")
    except urllib.error.HTTPError as exc:
        body = exc.read()
        try:
            return exc.code, json.loads(body or b"{}")
        except ValueError:
            return exc.code, {"error": body.decode(errors="replace")}


def _free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


class ProcessAction:
    """Spawns an action-server child process per activation (container analog).

    The gateway's timeout kills the child; ``environ`` configures it with the
    ``LF_*`` variables.  Real clock only.
    """

    def __init__(self, environ: Optional[dict] = None, startup_timeout_s: float = 15.0) -> None:
        self.environ = dict(environ or {})
        self.startup_timeout_s = startup_timeout_s

    def __call__(self, params: dict, info: ActivationInfo) -> dict:
        port = _free_port()
        env = {**os.environ, **self.environ, "LF_PORT": str(port), "LF_ACTION_NAME": info.action.name,
               "LF_TIMEOUT_MS": str(info.action.timeout_ms)}
        src = str(Path(__file__).resolve().parent.parent)
        env["PYTHONPATH"] = os.pathsep.join(p for p in (src, env.get("PYTHONPATH", "")) if p)
        proc = subprocess.Popen([sys.executable, "-m", "limitless", "action-server"], env=env,
                                stdin=subprocess.DEVNULL, start_new_session=True)
        info.on_kill.append(proc.kill)
        base = f"http://127.0.0.1:{port}"
        try:
            give_up = time.monotonic() + self.startup_timeout_s
            while True:
                if info.kill.is_set():
                    raise ActivationKilled("killed during startup")
                try:
                    status, body = _post_json(base + "/init", {"value": {"name": info.action.name}}, timeout=2)
                    break
                except (urllib.error.URLError, ConnectionError):
                    if proc.poll() is not None or time.monotonic() > give_up:
                        return {"error": "action process failed to start"}
                    time.sleep(0.05)
            if status != 200:
                return body
            remaining = max(0.1, (info.deadline - RealClock().now_ms()) / 1000)
            try:
                _, body = _post_json(base + "/run", {"value": params, "activation_id": info.activation_id,
                                                     "deadline": info.deadline}, timeout=remaining + 1)
            except (urllib.error.URLError, ConnectionError, TimeoutError, OSError) as exc:
                if info.kill.is_set():
                    raise ActivationKilled("killed") from exc
                return {"error": f"action connection failed: {exc}"}
            return body
        finally:
            if proc.poll() is None:
                proc.kill()
            proc.wait()


# --------------------------------------------------------------------------
# the gateway


@dataclass
class _Activation:
    info: ActivationInfo
    params: dict
    record: Optional[ActivationRecord] = None
    response: Optional[dict] = None
    done: threading.Event = field(default_factory=threading.Event)


class Gateway:
    def __init__(self, clock: Optional[Clock] = None, results_repo: Optional[ResultsRepo] = None,
                 ids: Optional[IdFactory] = None) -> None:
        self.clock = clock or RealClock()
        self.simulated = isinstance(self.clock, SimulatedClock)
        self.results_repo = results_repo
        self.ids = ids or IdFactory(0 if self.simulated else None)
        self._actions: dict[str, tuple[ActionConfig, Callable]] = {}
        self._activations: dict[str, _Activation] = {}
        self._order: list[str] = []
        self._queue: deque[str] = deque()
        self._lock = threading.RLock()
        self._pumping = False

    # registry -------------------------------------------------------------

    def register(self, config: ActionConfig, backend: Callable[[dict, ActivationInfo], dict]) -> None:
        with self._lock:
            self._actions[config.name] = (config, backend)

    def action(self, name: str) -> ActionConfig:
        try:
            return self._actions[name][0]
        except KeyError:
            raise UnknownAction(f"unknown action {name!r}") from None

    # invocation -------------------------------------------------------------

    def invoke(self, action: str, params: dict, blocking: bool = False):
        """Start an activation.  Returns its id, or ``(id, response)`` when blocking."""
        with self._lock:
            config = self.action(action)
            in_flight = sum(1 for a in self._activations.values()
                            if a.info.action.name == action and not a.done.is_set())
            if in_flight >= config.concurrency_limit:
                raise Throttled(f"throttled: {action} has {in_flight} activations in flight")
            aid = self.ids.new("act-")
            _, chain_id, seq = split_params(params)
            info = ActivationInfo(aid, config, start=-1, deadline=-1, chain_id=chain_id, seq=seq)
            act = _Activation(info, dict(params))
            self._activations[aid] = act
            self._order.append(aid)
            if self.simulated:
                self._queue.append(aid)
        if not self.simulated:
            threading.Thread(target=self._execute_real, args=(aid,), daemon=True, name=aid).start()
        if not blocking:
            return aid
        if self.simulated:
            self._pump(until=aid)
        else:
            act.done.wait()
        return aid, act.response

    def invoker(self) -> "GatewayInvoker":
        return GatewayInvoker(self)

    def _backend(self, act: _Activation):
        return self._actions[act.info.action.name][1]

    def _finish(self, act: _Activation, outcome: Outcome, end: int, response: Optional[dict]) -> None:
        info = act.info
        with self._lock:
            if act.done.is_set():
                return
            billed = info.action.timeout_ms if outcome == Outcome.TIMEOUT_KILLED else end - info.start
            if response and isinstance(response.get("result"), dict) and info.chain_id is None:
                info.chain_id = response["result"].get("chain_id")
                info.seq = response["result"].get("seq")
            act.record = ActivationRecord(
                activation_id=info.activation_id,
                action_name=info.action.name,
                start=info.start,
                end=end,
                outcome=outcome,
                billed_ms=billed,
                params_digest=params_digest(act.params),
                chain_id=info.chain_id,
                seq=info.seq,
            )
            act.response = response
            act.done.set()

    def _run_backend(self, act: _Activation) -> tuple[Outcome, Optional[dict]]:
        try:
            response = self._backend(act)(act.params, act.info)
        except ActivationKilled:
            return Outcome.TIMEOUT_KILLED, None
        except Exception as exc:  # noqa: BLE001 - an action error is an activation outcome
            log.exception("activation %s raised", act.info.activation_id)
            return Outcome.ERROR, {"error": str(exc)}
        if not isinstance(response, dict) or "error" in response:
            return Outcome.ERROR, response if isinstance(response, dict) else {"error": repr(response)}
        return Outcome.SUCCESS, response

    def _pump(self, until: Optional[str] = None) -> None:
        """Run queued simulated activations in FIFO order."""
        while True:
            with self._lock:
                if until is not None and self._activations[until].done.is_set():
                    return
                if not self._queue:
                    return
                aid = self._queue.popleft()
            self._execute_simulated(self._activations[aid])

    def drain(self) -> None:
        """Simulated: run until the queue is empty.  Real: wait for all activations."""
        if self.simulated:
            self._pump()
            return
        while True:
            with self._lock:
                pending = [a for a in self._activations.values() if not a.done.is_set()]
            if not pending:
                return
            for act in pending:
                act.done.wait()

    def _execute_simulated(self, act: _Activation) -> None:
        info = act.info
        info.start = self.clock.now_ms()
        info.deadline = info.start + info.action.timeout_ms
        with self.clock.guard(info.deadline, info.kill):
            outcome, response = self._run_backend(act)
        end = info.deadline if outcome == Outcome.TIMEOUT_KILLED else self.clock.now_ms()
        self.clock.advance_to(end)
        self._finish(act, outcome, end, response)

    def _execute_real(self, aid: str) -> None:
        act = self._activations[aid]
        info = act.info
        info.start = self.clock.now_ms()
        info.deadline = info.start + info.action.timeout_ms

        def enforce() -> None:
            if act.done.is_set():
                return
            info.kill.set()
            for cb in info.on_kill:
                try:
                    cb()
                except Exception:  # noqa: BLE001
                    log.exception("kill callback failed")
            self._finish(act, Outcome.TIMEOUT_KILLED, info.deadline, None)

        timer = self.clock.call_at(info.deadline, enforce)
        try:
            with self.clock.guard(info.deadline, info.kill):
                outcome, response = self._run_backend(act)
        finally:
            timer.cancel()
        end = self.clock.now_ms()
        if outcome == Outcome.TIMEOUT_KILLED or end > info.deadline:
            enforce()
        else:
            self._finish(act, outcome, end, response)

    # queries ---------------------------------------------------------------

    def activation(self, aid: str) -> ActivationRecord:
        act = self._activations.get(aid)
        if act is None:
            raise UnknownActivation(f"unknown activation {aid!r}")
        if act.record is None:
            raise ChainNotFinished(f"activation {aid} still running")
        return act.record

    def response(self, aid: str) -> Optional[dict]:
        act = self._activations.get(aid)
        if act is None:
            raise UnknownActivation(f"unknown activation {aid!r}")
        return act.response

    def activations(self, chain_id: Optional[str] = None) -> list[ActivationRecord]:
        with self._lock:
            acts = [self._activations[a] for a in self._order]
        return [a.record for a in acts if a.record is not None
                and (chain_id is None or a.record.chain_id == chain_id)]

    def chain_report(self, chain_id: str) -> dict:
        if self.results_repo is None:
            raise GatewayError("gateway has no results repository")
        rec = self.results_repo.get(chain_id)
        if rec is None:
            raise UnknownChain(f"unknown chain {chain_id!r}")
        if rec.status == ChainStatus.RUNNING:
            raise ChainNotFinished(f"chain {chain_id} is still running")
        with self._lock:
            acts = [self._activations[a] for a in self._order]
        acts = [a for a in acts if a.record is not None and a.record.chain_id == chain_id]
        total_billed = sum(a.record.billed_ms for a in acts)
        work = checkpoint = upload = 0
        trigger = 0
        for a in acts:
            outcome = _outcome_of(a.response)
            if outcome is None:
                continue
            t = outcome.get("timings") or {}
            work += int(t.get("work_ms", 0))
            checkpoint += int(t.get("checkpoint_ms", 0))
            upload += int(t.get("upload_ms", 0))
            trigger = trigger or int(outcome.get("trigger_ms") or 0)
        completed = rec.status == ChainStatus.COMPLETED
        execution_ms = 0
        if acts and rec.final is not None:
            execution_ms = max(f.finished_at for f in rec.finals) - min(a.record.start for a in acts)
        return {
            "chain_id": chain_id,
            "status": rec.status.value,
            "invocation_count": rec.invocation_count,
            "activations": len(acts),
            "total_billed_ms": total_billed,
            "single_shot_ms_estimate": work,
            "double_billed_ms": total_billed - work,
            "checkpoint_ms_total": checkpoint,
            "upload_ms_total": upload,
            "execution_ms": execution_ms,
            "duplicate_finals": rec.duplicate_finals,
            "final": rec.final.payload if rec.final else None,
            "trilemma": {
                "double_billing_violated": rec.invocation_count > 1,
                # a workload that fits under the trigger must behave as one plain function
                "substitution_satisfied": completed and (rec.invocation_count == 1 or work >= trigger > 0),
            },
        }


def _outcome_of(response: Optional[dict]) -> Optional[dict]:
    if not response:
        return None
    outcome = response.get("result") if isinstance(response.get("result"), dict) else response.get("outcome")
    return outcome if isinstance(outcome, dict) and "timings" in outcome else None


class GatewayInvoker:
    """In-process invoker client bound to a gateway."""

    def __init__(self, gateway: Gateway) -> None:
        self.gateway = gateway

    def invoke(self, action: str, params: dict, blocking: bool = False):
        return self.gateway.invoke(action, params, blocking=blocking)


class HttpInvoker:
    """REST client for the gateway's invoke endpoint."""

    def __init__(self, base_url: str, timeout_s: float = 30.0) -> None:
        self.base_url = base_url.rstrip("/")
        self.timeout_s = timeout_s

    def invoke(self, action: str, params: dict, blocking: bool = False):
        url = (f"{self.base_url}/api/actions/{urllib.parse.quote(action)}/invoke"
               f"?blocking={'true' if blocking else 'false'}")
        status, body = _post_json(url, params, timeout=None if blocking else self.timeout_s)
        if status != 200:
            raise GatewayError(body.get("error", f"HTTP {status}"))
        if blocking:
            return body["activation_id"], body.get("response")
        return body["activation_id"]


# --------------------------------------------------------------------------
# HTTP front end


def _make_handler(gateway: Gateway):
    sim_lock = threading.Lock()

    class Handler(BaseHTTPRequestHandler):
        def _reply(self, status: int, payload: Any) -> None:
            data = json.dumps(payload).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def _guarded(self, fn: Callable[[], Any]) -> None:
            try:
                if gateway.simulated:
                    with sim_lock:
                        result = fn()
                        gateway.drain()
                else:
                    result = fn()
                self._reply(200, result)
            except GatewayError as exc:
                self._reply(exc.status, {"error": str(exc)})

        def do_POST(self) -> None:  # noqa: N802
            url = urllib.parse.urlsplit(self.path)
            parts = url.path.strip("/").split("/")
            if len(parts) != 4 or parts[:2] != ["api", "actions"] or parts[3] != "invoke":
                self._reply(404, {"error": f"no route {url.path}"})
                return
            name = urllib.parse.unquote(parts[2])
            blocking = urllib.parse.parse_qs(url.query).get("blocking", ["false"])[0].lower() == "true"
            length = int(self.headers.get("Content-Length") or 0)
            try:
                params = json.loads(self.rfile.read(length) or b"{}")
            except ValueError:
                self._reply(400, {"error": "body is not JSON"})
                return
            if not isinstance(params, dict):
                self._reply(400, {"error": "params must be a JSON object"})
                return

            def invoke():
                res = gateway.invoke(name, params, blocking=blocking)
                if blocking:
                    aid, response = res
                    return {"activation_id": aid, "response": response}
                return {"activation_id": res}

            self._guarded(invoke)

        def do_GET(self) -> None:  # noqa: N802
            parts = urllib.parse.urlsplit(self.path).path.strip("/").split("/")
            if len(parts) == 3 and parts[:2] == ["api", "activations"]:
                aid = parts[2]
                self._guarded(lambda: {**gateway.activation(aid).to_json(), "response": gateway.response(aid)})
            elif len(parts) == 4 and parts[:2] == ["api", "chains"] and parts[3] == "report":
                self._guarded(lambda: gateway.chain_report(parts[2]))
            else:
                self._reply(404, {"error": "no route"})

        def log_message(self, fmt: str, *args) -> None:
            log.debug("%s " + fmt, self.address_string(), *args)

    return Handler


def make_http_server(gateway: Gateway, port: int = 8090, host: str = "0.0.0.0") -> ThreadingHTTPServer:
    httpd = ThreadingHTTPServer((host, port), _make_handler(gateway))
    httpd.daemon_threads = True
    return httpd


DEFAULT_ACTION = "limitless"


def local_platform(clock: Clock, runner_config, *, ckpt_repo, results_repo, timeout_ms: int = 60_000,
                   action_name: str = DEFAULT_ACTION, seed: Optional[int] = 0, work_dir: Optional[Path] = None,
                   log_dir: Optional[Path] = None, concurrency_limit: int = 64, external=None) -> Gateway:
    """A gateway with one in-process runner action wired back to itself."""
    gateway = Gateway(clock, results_repo, IdFactory(seed))
    env = ActionEnvironment(
        clock=clock,
        ckpt_repo=ckpt_repo,
        results_repo=results_repo,
        invoker=gateway.invoker(),
        config=runner_config,
        action_name=action_name,
        default_timeout_ms=timeout_ms,
        ids=IdFactory(None if seed is None else seed + 1),
        work_dir=work_dir,
        log_dir=log_dir,
        external=external,
    )
    gateway.register(ActionConfig(action_name, timeout_ms=timeout_ms, concurrency_limit=concurrency_limit),
                     InProcessAction(env))
    return gateway


def serve(environ: Optional[dict] = None) -> None:
    """Run the gateway HTTP front end with one in-process runner action.

    ``LF_CLOCK_MODE`` picks the clock (``real`` by default); the runner reads
    the same ``LF_*`` variables as the standalone action server.
    """
    from .runner import RunnerConfig
    from .stores import LocalFsCheckpointRepo, LocalFsResultsRepo, MemoryCheckpointRepo, MemoryResultsRepo

    e = dict(os.environ if environ is None else environ)
    logging.basicConfig(level=e.get("LF_LOG_LEVEL", "INFO").upper())
    clock = SimulatedClock() if e.get("LF_CLOCK_MODE", "real") == "simulated" else RealClock()
    if e.get("LF_CKPT_DIR"):
        root = Path(e["LF_CKPT_DIR"])
        ckpt, results = LocalFsCheckpointRepo(root), LocalFsResultsRepo(root)
    else:
        ckpt, results = MemoryCheckpointRepo(), MemoryResultsRepo()
    config = RunnerConfig(
        checkpoint_trigger_ms=int(e.get("LF_TRIGGER_MS", 50_000)),
        fencing_enabled=e.get("LF_FENCING", "on").lower() not in ("off", "0", "false"),
        max_chain_length=int(e.get("LF_MAX_CHAIN", 64)),
        work_unit_ms=int(e.get("LF_WORK_UNIT_MS", 1000)),
        restore_policy=e.get("LF_RESTORE_POLICY", "fail_chain"),
    )
    gateway = local_platform(
        clock, config, ckpt_repo=ckpt, results_repo=results,
        timeout_ms=int(e.get("LF_TIMEOUT_MS", 60_000)),
        action_name=e.get("LF_ACTION_NAME", DEFAULT_ACTION),
        seed=0 if clock.mode == "simulated" else None,
        log_dir=Path(e["LF_LOG_DIR"]) if e.get("LF_LOG_DIR") else None,
    )
    httpd = make_http_server(gateway, int(e.get("LF_GATEWAY_PORT", 8090)))
    log.info("gateway listening on %d (%s clock)", httpd.server_address[1], clock.mode)
    try:
        httpd.serve_forever()
    finally:
        httpd.server_close()
