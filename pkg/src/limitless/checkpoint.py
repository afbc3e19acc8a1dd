"""Checkpoint-and-restore backends.

``CooperativeCheckpointer`` drives registered step-machine workloads in
process and serializes their state at step boundaries.  ``ExternalCheckpointer``
runs a workload as a child process under an external checkpointing tool
(DMTCP by default) whose command lines are configuration templates.

Both hand out :class:`ManagedWorkload` handles with the same ``run`` loop,
so the runner does not care which backend it is talking to.
"""

from __future__ import annotations

import enum
import json
import logging
import os
import shutil
import signal
import subprocess
import sys
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

from .clock import Clock
from .model import CheckpointManifest, FileEntry, Mode, WorkloadSpec, canonical_json, verify_manifest
from .workloads import UnknownWorkload, Workload, WorkloadError, get_workload, registered

log = logging.getLogger(__name__)

STATE_FILE = "state.json"

Emit = Callable[[Any], None]
Hook = Callable[[int], None]


class CheckpointError(Exception):
    pass


class AlreadyCompleted(CheckpointError):
    """The workload finished before it acknowledged the pause."""


class DeadHandle(CheckpointError):
    pass


class IncompatibleState(CheckpointError):
    pass


class RestoreRefused(CheckpointError):
    """Restore precondition failed: the image does not verify."""


class ToolUnavailable(CheckpointError):
    pass


class ToolFailure(CheckpointError):
    def __init__(self, message: str, output: str = "") -> None:
        super().__init__(f"{message}\n{output}".rstrip())
        self.output = output


class RunStatus(str, enum.Enum):
    COMPLETED = "completed"
    PAUSED = "paused"


@dataclass(frozen=True)
class CooperativeState:
    workload_name: str
    version: int
    payload: Any

    def to_json(self) -> dict:
        return {"workload_name": self.workload_name, "version": self.version, "payload": self.payload}

    @classmethod
    def from_json(cls, data: dict) -> "CooperativeState":
        return cls(data["workload_name"], int(data["version"]), data["payload"])

    def encode(self) -> bytes:
        return canonical_json(self.to_json())


class ManagedWorkload:
    mode: Mode
    chain_id = ""
    seq = 0

    @property
    def done(self) -> bool:
        raise NotImplementedError

    @property
    def live(self) -> bool:
        raise NotImplementedError

    @property
    def result(self) -> Any:
        raise NotImplementedError

    def run(self, hook: Hook, pause_requested: Callable[[], bool]) -> RunStatus:
        """Advance until completion or until a pause is requested at a boundary."""
        raise NotImplementedError

    def terminate(self) -> None:
        raise NotImplementedError


# --------------------------------------------------------------------------
# cooperative backend


class CooperativeHandle(ManagedWorkload):
    mode = Mode.COOPERATIVE

    def __init__(self, workload: Workload, state: dict, emit: Optional[Emit] = None,
                 chain_id: str = "", seq: int = 0) -> None:
        self.workload = workload
        self.state = state
        self.emit: Emit = emit or (lambda _p: None)
        self.chain_id = chain_id
        self.seq = seq
        self._cond = threading.Condition()
        self._running = False
        self._pause_req = False
        self._paused = True
        self._terminated = False

    @property
    def done(self) -> bool:
        return self.workload.is_done(self.state)

    @property
    def live(self) -> bool:
        return not self._terminated and not self.done

    @property
    def result(self) -> Any:
        if not self.done:
            raise WorkloadError("workload has not completed")
        return self.workload.result(self.state)

    def run(self, hook, pause_requested):
        with self._cond:
            if self._terminated:
                raise DeadHandle("workload was terminated")
            self._running, self._paused, self._pause_req = True, False, False
        try:
            while True:
                if self.done:
                    return RunStatus.COMPLETED
                units = self.workload.step(self.state, self.emit)
                hook(units)
                if self.done:
                    return RunStatus.COMPLETED
                with self._cond:
                    external = self._pause_req
                if external or pause_requested():
                    return RunStatus.PAUSED
        finally:
            with self._cond:
                self._running = False
                self._paused = True
                self._cond.notify_all()

    def snapshot(self) -> CooperativeState:
        with self._cond:
            if self._terminated:
                raise DeadHandle("workload was terminated")
            if self._running:
                # ask the stepping thread to stop at its next boundary
                self._pause_req = True
                self._cond.wait_for(lambda: self._paused)
            if self.done:
                raise AlreadyCompleted("workload completed before the pause was acknowledged")
            payload = json.loads(canonical_json(self.state))
        return CooperativeState(self.workload.name, self.workload.version, payload)

    def terminate(self) -> None:
        with self._cond:
            self._terminated = True


class CooperativeCheckpointer:
    mode = Mode.COOPERATIVE

    def __init__(self, clock: Optional[Clock] = None, simulated: Optional[bool] = None) -> None:
        self.clock = clock
        self.simulated = simulated if simulated is not None else (clock is not None and clock.mode == "simulated")

    def launch(self, spec: WorkloadSpec, initial: Optional[CooperativeState] = None, *,
               chain_id: str = "", seq: int = 0, emit: Optional[Emit] = None) -> CooperativeHandle:
        workload = get_workload(spec.bin)
        if initial is not None:
            self._check_compatible(workload, initial)
            state = json.loads(canonical_json(initial.payload))
        else:
            state = workload.initial_state(spec.bin_args, simulated=self.simulated)
        return CooperativeHandle(workload, state, emit, chain_id, seq)

    @staticmethod
    def _check_compatible(workload: Workload, state: CooperativeState) -> None:
        if state.workload_name != workload.name or state.version != workload.version:
            raise IncompatibleState(
                f"incompatible-state: image is {state.workload_name} v{state.version}, "
                f"workload is {workload.name} v{workload.version}")

    def checkpoint(self, handle: CooperativeHandle, out_dir: Path | str) -> CheckpointManifest:
        state = handle.snapshot()
        data = state.encode()
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / STATE_FILE).write_bytes(data)
        return CheckpointManifest(
            chain_id=handle.chain_id,
            seq=handle.seq,
            created_at=self.clock.now_ms() if self.clock else 0,
            files=(FileEntry.of(STATE_FILE, data),),
            restart={"mode": Mode.COOPERATIVE.value, "state_file": STATE_FILE},
        )

    def restore(self, manifest: CheckpointManifest, work_dir: Path | str, *, seq: int = 0,
                emit: Optional[Emit] = None) -> CooperativeHandle:
        work = Path(work_dir)
        _require_verified(manifest, work)
        state_file = manifest.restart.get("state_file", STATE_FILE)
        try:
            state = CooperativeState.from_json(json.loads((work / state_file).read_bytes()))
        except (ValueError, KeyError, TypeError) as exc:
            raise IncompatibleState(f"incompatible-state: unreadable image ({exc})") from exc
        try:
            workload = get_workload(state.workload_name)
        except UnknownWorkload as exc:
            raise IncompatibleState(f"incompatible-state: {exc}") from exc
        self._check_compatible(workload, state)
        return CooperativeHandle(workload, json.loads(canonical_json(state.payload)), emit,
                                 manifest.chain_id, seq or manifest.seq + 1)


def _require_verified(manifest: CheckpointManifest, work: Path) -> None:
    def reader(rel: str) -> Optional[bytes]:
        p = work / rel
        return p.read_bytes() if p.is_file() else None

    report = verify_manifest(manifest, reader)
    if not report.ok:
        bad = ", ".join(f"{f.relative_path}: {f.reason}" for f in report.failures)
        raise RestoreRefused(f"image does not verify ({bad})")


# --------------------------------------------------------------------------
# external-tool backend


@dataclass
class ExternalToolConfig:
    """Command templates for an external checkpoint/restart tool.

    Placeholders: ``{ckpt_dir}``, ``{work_dir}``, ``{coord_port}`` inside any
    argument; an argument that is exactly ``{argv}`` or ``{images}`` expands
    to the workload command line or the list of image files.
    """

    launch_cmd: list[str]
    checkpoint_cmd: list[str]
    restart_cmd: list[str]
    image_glob: str = "ckpt_*.dmtcp"
    restart_script: str = "dmtcp_restart_script.sh"
    probe: str = "dmtcp_launch"
    env: dict[str, str] = field(default_factory=lambda: {"DMTCP_COORD_HOST": "127.0.0.1"})
    port_file: Optional[str] = "coord.port"
    checkpoint_timeout_s: float = 60.0
    poll_ms: int = 20

    @classmethod
    def dmtcp(cls) -> "ExternalToolConfig":
        coord = ["--new-coordinator", "--coord-port", "0", "--port-file", "{work_dir}/coord.port"]
        return cls(
            launch_cmd=["dmtcp_launch", *coord, "--ckptdir", "{ckpt_dir}", "{argv}"],
            checkpoint_cmd=["dmtcp_command", "--coord-port", "{coord_port}", "--bcheckpoint"],
            restart_cmd=["dmtcp_restart", *coord, "--ckptdir", "{ckpt_dir}", "{images}"],
        )

    def available(self) -> bool:
        return shutil.which(self.probe) is not None or Path(self.probe).is_file()


def _expand(template: Sequence[str], values: dict[str, str], lists: dict[str, list[str]]) -> list[str]:
    out: list[str] = []
    for arg in template:
        key = arg[1:-1] if arg.startswith("{") and arg.endswith("}") else None
        if key in lists:
            out.extend(lists[key])
        else:
            out.append(arg.format(**values))
    return out


def workload_argv(spec: WorkloadSpec) -> list[str]:
    """Command line for a workload in standalone-executable form."""
    if spec.bin in registered():
        return [sys.executable, "-m", "limitless.workloads", spec.bin, *spec.bin_args]
    path = shutil.which(spec.bin)
    if path is None:
        raise UnknownWorkload(spec.bin)
    return [path, *spec.bin_args]


class ExternalHandle(ManagedWorkload):
    mode = Mode.EXTERNAL

    def __init__(self, proc: subprocess.Popen, work_dir: Path, ckpt_dir: Path, stdout_path: Path,
                 stderr_path: Path, clock: Clock, poll_ms: int, emit: Optional[Emit] = None,
                 chain_id: str = "", seq: int = 0) -> None:
        self.proc = proc
        self.work_dir = work_dir
        self.ckpt_dir = ckpt_dir
        self.stdout_path = stdout_path
        self.stderr_path = stderr_path
        self.clock = clock
        self.poll_ms = poll_ms
        self.emit: Emit = emit or (lambda _p: None)
        self.chain_id = chain_id
        self.seq = seq
        self._offset = 0
        self._result: Any = None
        self._have_result = False
        self._terminated = False
        self._lock = threading.Lock()
        # workload env, replayed on restart for tools that re-exec
        self.env: dict[str, str] = {}

    def _drain_stdout(self) -> None:
        """Forward complete JSON lines the child printed since the last call."""
        with self._lock:
            try:
                with open(self.stdout_path, "rb") as fh:
                    fh.seek(self._offset)
                    chunk = fh.read()
            except FileNotFoundError:
                return
            end = chunk.rfind(b"\n")
            if end < 0:
                return
            self._offset += end + 1
            lines = chunk[:end].splitlines()
        for line in lines:
            try:
                msg = json.loads(line)
            except ValueError:
                log.info("workload stdout: %s", line.decode(errors="replace"))
                continue
            if isinstance(msg, dict) and "partial" in msg:
                self.emit(msg["partial"])
            elif isinstance(msg, dict) and "result" in msg:
                self._result = msg["result"]
                self._have_result = True
            else:
                log.info("workload stdout: %s", line.decode(errors="replace"))

    def stderr_tail(self, limit: int = 4000) -> str:
        try:
            return self.stderr_path.read_text(errors="replace")[-limit:]
        except FileNotFoundError:
            return ""

    def _check_exit(self) -> bool:
        code = self.proc.poll()
        if code is None:
            return False
        self._drain_stdout()
        if self._terminated:
            raise DeadHandle("workload was terminated")
        if code != 0 or not self._have_result:
            raise WorkloadError(f"workload exited with status {code}: {self.stderr_tail()}")
        return True

    @property
    def done(self) -> bool:
        return self.proc.poll() is not None and self._have_result

    @property
    def live(self) -> bool:
        return self.proc.poll() is None and not self._terminated

    @property
    def result(self) -> Any:
        self._drain_stdout()
        if not self._have_result:
            raise WorkloadError("workload has not completed")
        return self._result

    def run(self, hook, pause_requested):
        if self._terminated:
            raise DeadHandle("workload was terminated")
        while True:
            self._drain_stdout()
            if self._check_exit():
                return RunStatus.COMPLETED
            hook(0)
            self.clock.spend(self.poll_ms)
            if self._check_exit():
                return RunStatus.COMPLETED
            if pause_requested():
                return RunStatus.PAUSED

    def terminate(self) -> None:
        self._terminated = True
        if self.proc.poll() is None:
            try:
                os.killpg(self.proc.pid, signal.SIGKILL)
            except ProcessLookupError:
                pass
        try:
            self.proc.wait(timeout=10)
        except subprocess.TimeoutExpired:  # pragma: no cover - defensive
            self.proc.kill()


class ExternalCheckpointer:
    mode = Mode.EXTERNAL

    def __init__(self, config: ExternalToolConfig, work_root: Path | str, clock: Clock) -> None:
        self.config = config
        self.work_root = Path(work_root)
        self.clock = clock
        self._counter = 0
        self._lock = threading.Lock()

    def _fresh_dir(self, prefix: str) -> Path:
        with self._lock:
            self._counter += 1
            n = self._counter
        d = self.work_root / f"{prefix}-{os.getpid()}-{n}"
        d.mkdir(parents=True, exist_ok=False)
        return d

    def _require_tool(self) -> None:
        if not self.config.available():
            raise ToolUnavailable(f"tool unavailable: {self.config.probe!r} not found on PATH")

    def _env(self, spec: WorkloadSpec, ckpt_dir: Path) -> dict[str, str]:
        env = dict(os.environ)
        env.update(spec.env_dict)
        env.update(self.config.env)
        env.setdefault("LF_CKPT_DIR", str(ckpt_dir))
        src = str(Path(__file__).resolve().parent.parent)
        env["PYTHONPATH"] = os.pathsep.join(p for p in (src, env.get("PYTHONPATH", "")) if p)
        return env

    def _spawn(self, cmd: list[str], work: Path, ckpt: Path, env: dict[str, str], emit, chain_id, seq,
               tag: str) -> ExternalHandle:
        out, err = work / f"{tag}.stdout", work / f"{tag}.stderr"
        with open(out, "wb") as o, open(err, "wb") as e:
            try:
                proc = subprocess.Popen(cmd, stdout=o, stderr=e, stdin=subprocess.DEVNULL, cwd=work,
                                        env=env, start_new_session=True)
            except OSError as exc:
                raise ToolUnavailable(f"tool unavailable: {exc}") from exc
        return ExternalHandle(proc, work, ckpt, out, err, self.clock, self.config.poll_ms, emit, chain_id, seq)

    def launch(self, spec: WorkloadSpec, initial: Any = None, *, chain_id: str = "", seq: int = 0,
               emit: Optional[Emit] = None) -> ExternalHandle:
        if initial is not None:
            raise CheckpointError("external launch resumes through restore(), not an initial state")
        self._require_tool()
        argv = workload_argv(spec)
        work = self._fresh_dir("run")
        ckpt = work / "ckpt"
        ckpt.mkdir()
        cmd = _expand(self.config.launch_cmd, {"ckpt_dir": str(ckpt), "work_dir": str(work)}, {"argv": argv})
        log.info("launching %s", cmd)
        handle = self._spawn(cmd, work, ckpt, self._env(spec, ckpt), emit, chain_id, seq, "workload")
        handle.env = dict(spec.env_dict)
        return handle

    def _coord_port(self, handle: ExternalHandle) -> str:
        if not self.config.port_file:
            return ""
        path = handle.work_dir / self.config.port_file
        return path.read_text().strip() if path.is_file() else ""

    def checkpoint(self, handle: ExternalHandle, out_dir: Path | str) -> CheckpointManifest:
        if handle._terminated:
            raise DeadHandle("workload was terminated")
        if handle.proc.poll() is not None:
            handle._drain_stdout()
            raise AlreadyCompleted("workload exited before the checkpoint")
        values = {"ckpt_dir": str(handle.ckpt_dir), "work_dir": str(handle.work_dir),
                  "coord_port": self._coord_port(handle)}
        cmd = _expand(self.config.checkpoint_cmd, values, {})
        try:
            proc = subprocess.run(cmd, capture_output=True, text=True, cwd=handle.work_dir,
                                  timeout=self.config.checkpoint_timeout_s, env={**os.environ, **self.config.env})
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise ToolFailure(f"checkpoint command failed: {exc}") from exc
        if proc.returncode != 0:
            if handle.proc.poll() is not None:
                handle._drain_stdout()
                raise AlreadyCompleted("workload exited during the checkpoint")
            raise ToolFailure(f"checkpoint command exited {proc.returncode}", proc.stdout + proc.stderr)
        images = sorted(handle.ckpt_dir.glob(self.config.image_glob))
        if not images:
            raise ToolFailure("checkpoint produced no image files", proc.stdout + proc.stderr)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        entries = []
        names = []
        for img in images:
            data = img.read_bytes()
            (out / img.name).write_bytes(data)
            entries.append(FileEntry.of(img.name, data))
            names.append(img.name)
        script = handle.ckpt_dir / self.config.restart_script
        restart = {"mode": Mode.EXTERNAL.value, "images": names, "restart_script": None,
                   "env": dict(handle.env)}
        if script.is_file():
            data = script.read_bytes()
            (out / script.name).write_bytes(data)
            entries.append(FileEntry.of(script.name, data))
            restart["restart_script"] = script.name
        return CheckpointManifest(handle.chain_id, handle.seq, self.clock.now_ms(), tuple(entries), restart)

    def restore(self, manifest: CheckpointManifest, work_dir: Path | str, *, seq: int = 0,
                emit: Optional[Emit] = None) -> ExternalHandle:
        src = Path(work_dir)
        _require_verified(manifest, src)
        self._require_tool()
        work = self._fresh_dir("restart")
        ckpt = work / "ckpt"
        ckpt.mkdir()
        for entry in manifest.files:
            shutil.copyfile(src / entry.relative_path, work / entry.relative_path)
        images = [str(work / name) for name in manifest.restart.get("images", [])]
        values = {"ckpt_dir": str(ckpt), "work_dir": str(work),
                  "restart_script": str(work / (manifest.restart.get("restart_script") or ""))}
        cmd = _expand(self.config.restart_cmd, values, {"images": images})
        log.info("restarting %s", cmd)
        saved_env = dict(manifest.restart.get("env") or {})
        env = self._env(WorkloadSpec(bin="restart", env=saved_env), ckpt)
        handle = self._spawn(cmd, work, ckpt, env, emit, manifest.chain_id, seq or manifest.seq + 1, "restart")
        handle.env = saved_env
        return handle
