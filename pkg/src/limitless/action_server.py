"""The platform action interface: ``POST /init`` and ``POST /run``.

:class:`ActionServer` holds the protocol logic and is usable in process
(the gateway simulator drives it directly); :func:`serve` puts it behind a
stdlib HTTP server.  Status codes:

========  =====================================================
/init     200 ok, 400 malformed body, 403 already initialized
/run      200 ``{"result": outcome}``; 400 malformed or unknown
          workload; 502 ``{"error": ...}`` for uninitialized, busy,
          failed invocations and runner exceptions
========  =====================================================
"""

from __future__ import annotations

import json
import logging
import os
import threading
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Any, Callable, Optional

from .checkpoint import CooperativeCheckpointer, ExternalCheckpointer, ExternalToolConfig, workload_argv
from .clock import ActivationKilled, Clock, RealClock
from .logs import EventLog
from .model import IdFactory, InvocationContext, Mode, ValidationError, WorkloadSpec, split_params
from .runner import Kind, RunnerConfig, RunnerDeps, execute_invocation
from .stores import CheckpointRepo, LocalFsCheckpointRepo, LocalFsResultsRepo, ResultsRepo
from .workloads import UnknownWorkload, get_workload

log = logging.getLogger(__name__)

DEFAULT_PORT = 8080


@dataclass
class ActionEnvironment:
    """Everything an action instance needs beyond the request itself."""

    clock: Clock
    ckpt_repo: CheckpointRepo
    results_repo: ResultsRepo
    invoker: Any
    config: RunnerConfig = field(default_factory=RunnerConfig)
    action_name: str = "limitless"
    default_timeout_ms: int = 60_000
    ids: IdFactory = field(default_factory=IdFactory)
    work_dir: Optional[Path] = None
    log_dir: Optional[Path] = None
    external: Optional[ExternalToolConfig] = None

    def checkpointer(self, mode: Mode):
        if mode == Mode.COOPERATIVE:
            return CooperativeCheckpointer(self.clock)
        tool = self.external or ExternalToolConfig.dmtcp()
        root = Path(self.work_dir or ".") / "external"
        root.mkdir(parents=True, exist_ok=True)
        return ExternalCheckpointer(tool, root, self.clock)


class ActionServer:
    def __init__(self, env: ActionEnvironment) -> None:
        self.env = env
        self._init_lock = threading.Lock()
        self._run_lock = threading.Lock()
        self.init_payload: Optional[dict] = None
        self.events = EventLog(env.log_dir, env.clock)

    @property
    def initialized(self) -> bool:
        return self.init_payload is not None

    def handle_init(self, body: Any) -> tuple[int, dict]:
        if not isinstance(body, dict) or not isinstance(body.get("value"), dict):
            return 400, {"error": "bad request: body must be an object with a 'value' object"}
        value = body["value"]
        # code/binary are accepted and ignored: workloads ship with the image
        with self._init_lock:
            if self.init_payload is not None:
                return 403, {"error": "already initialized"}
            self.init_payload = {
                "name": str(value.get("name", self.env.action_name)),
                "main": str(value.get("main", "main")),
                "code": value.get("code", ""),
                "binary": bool(value.get("binary", False)),
            }
        return 200, {"ok": True}

    def decode(self, body: Any) -> InvocationContext:
        """Turn a run payload into an invocation context (``ValueError`` if malformed)."""
        if not isinstance(body, dict) or not isinstance(body.get("value"), dict):
            raise ValueError("body must be an object with a 'value' object")
        visible, chain_id, seq = split_params(body["value"])
        if "bin" not in visible:
            raise ValueError("parameter 'bin' is required")
        spec = WorkloadSpec.from_json(visible)
        if spec.mode == Mode.COOPERATIVE:
            get_workload(spec.bin)
        else:
            workload_argv(spec)
        deadline = body.get("deadline")
        if deadline is not None:
            timeout_ms = int(deadline) - self.env.clock.now_ms()
            if timeout_ms <= 0:
                raise ValueError("deadline already passed")
            timeout_ms = min(timeout_ms, self.env.default_timeout_ms)
        else:
            timeout_ms = self.env.default_timeout_ms
        return InvocationContext(
            chain_id=chain_id or self.env.ids.new("chain-"),
            seq=seq or 1,
            spec=spec,
            timeout_ms=timeout_ms,
            checkpoint_trigger_ms=self.env.config.checkpoint_trigger_ms,
            activation_id=str(body.get("activation_id", "")),
        )

    def handle_run(self, body: Any, on_context: Optional[Callable[[InvocationContext], None]] = None
                   ) -> tuple[int, dict]:
        if not self.initialized:
            return 502, {"error": "not initialized"}
        if not self._run_lock.acquire(blocking=False):
            return 502, {"error": "busy"}
        try:
            try:
                ctx = self.decode(body)
            except UnknownWorkload as exc:
                return 400, {"error": f"unknown workload: {exc.name}"}
            except (ValueError, KeyError, TypeError, ValidationError) as exc:
                return 400, {"error": f"bad request: {exc}"}
            if on_context is not None:
                on_context(ctx)
            clock = self.env.clock
            own_guard = clock.current_guard() is None
            deadline = clock.now_ms() + ctx.timeout_ms
            try:
                if own_guard:
                    with clock.guard(deadline):
                        outcome = self._execute(ctx)
                else:
                    outcome = self._execute(ctx)
            except ActivationKilled:
                if not own_guard:
                    raise
                return 502, {"error": "timeout: activation deadline reached"}
            except Exception as exc:  # noqa: BLE001 - never hang the connection
                log.exception("runner failure")
                return 502, {"error": f"runner failure: {exc}"}
            if outcome.kind == Kind.FAILED:
                return 502, {"error": outcome.error, "outcome": outcome.to_json()}
            return 200, {"result": outcome.to_json()}
        finally:
            self._run_lock.release()

    def _execute(self, ctx: InvocationContext):
        env = self.env
        deps = RunnerDeps(
            checkpointer=env.checkpointer(ctx.spec.mode),
            ckpt_repo=env.ckpt_repo,
            results_repo=env.results_repo,
            invoker=env.invoker,
            clock=env.clock,
            action_name=(self.init_payload or {}).get("name") or env.action_name,
            work_dir=env.work_dir,
            events=self.events,
        )
        return execute_invocation(ctx, env.config, deps)


def _make_handler(server: ActionServer):
    class Handler(BaseHTTPRequestHandler):
        def _reply(self, status: int, payload: dict) -> None:
            data = json.dumps(payload).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def do_POST(self) -> None:  # noqa: N802
            length = int(self.headers.get("Content-Length") or 0)
            try:
                body = json.loads(self.rfile.read(length) or b"null")
            except ValueError:
                self._reply(400, {"error": "bad request: body is not JSON"})
                return
            if self.path == "/init":
                self._reply(*server.handle_init(body))
            elif self.path == "/run":
                self._reply(*server.handle_run(body))
            else:
                self._reply(404, {"error": f"no route {self.path}"})

        def log_message(self, fmt: str, *args) -> None:
            log.debug("%s " + fmt, self.address_string(), *args)

    return Handler


def make_http_server(server: ActionServer, port: int = DEFAULT_PORT, host: str = "0.0.0.0") -> ThreadingHTTPServer:
    httpd = ThreadingHTTPServer((host, port), _make_handler(server))
    httpd.daemon_threads = True
    return httpd


def env_from_environ(environ: Optional[dict] = None) -> ActionEnvironment:
    """Build an action environment from ``LF_*`` variables.

    Checkpoints and chain records go to ``LF_CKPT_DIR`` (local filesystem);
    re-invocations go to the gateway at ``LF_GATEWAY_URL``.
    """
    from .gateway import HttpInvoker

    e = dict(os.environ if environ is None else environ)
    root = Path(e.get("LF_CKPT_DIR", "./lf-data"))
    clock = RealClock()
    gateway_url = e.get("LF_GATEWAY_URL")
    config = RunnerConfig(
        checkpoint_trigger_ms=int(e.get("LF_TRIGGER_MS", 50_000)),
        fencing_enabled=e.get("LF_FENCING", "on").lower() not in ("off", "0", "false"),
        max_chain_length=int(e.get("LF_MAX_CHAIN", 64)),
        work_unit_ms=int(e.get("LF_WORK_UNIT_MS", 1000)),
        restore_policy=e.get("LF_RESTORE_POLICY", "fail_chain"),
    )
    return ActionEnvironment(
        clock=clock,
        ckpt_repo=LocalFsCheckpointRepo(root),
        results_repo=LocalFsResultsRepo(root),
        invoker=HttpInvoker(gateway_url) if gateway_url else None,
        config=config,
        action_name=e.get("LF_ACTION_NAME", "limitless"),
        default_timeout_ms=int(e.get("LF_TIMEOUT_MS", 60_000)),
        work_dir=root / "work",
        log_dir=Path(e["LF_LOG_DIR"]) if e.get("LF_LOG_DIR") else None,
    )


def serve(environ: Optional[dict] = None) -> None:
    e = dict(os.environ if environ is None else environ)
    logging.basicConfig(level=e.get("LF_LOG_LEVEL", "INFO").upper())
    app = ActionServer(env_from_environ(e))
    port = int(e.get("LF_PORT", DEFAULT_PORT))
    httpd = make_http_server(app, port)
    log.info("action server listening on %d", httpd.server_address[1])
    try:
        httpd.serve_forever()
    finally:
        httpd.server_close()
