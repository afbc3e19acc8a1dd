import json
import subprocess
import sys
import threading
import time
from http.server import BaseHTTPRequestHandler, HTTPServer
from pathlib import Path

import pytest

from limitless.checkpoint import (
    STATE_FILE,
    AlreadyCompleted,
    CooperativeCheckpointer,
    DeadHandle,
    ExternalCheckpointer,
    ExternalToolConfig,
    IncompatibleState,
    RestoreRefused,
    RunStatus,
    ToolUnavailable,
    workload_argv,
)
from limitless.clock import RealClock, SimulatedClock
from limitless.model import Mode, WorkloadSpec, sha256_hex
from limitless.workloads import UnknownWorkload

FAKECR = str(Path(__file__).with_name("fakecr.py"))


def run_steps(handle, n):
    count = 0

    def hook(_u):
        nonlocal count
        count += 1

    return handle.run(hook, lambda: count >= n)


@pytest.fixture
def coop():
    return CooperativeCheckpointer(SimulatedClock())


def test_checkpoint_writes_verified_state(coop, tmp_path):
    h = coop.launch(WorkloadSpec("counter", ["70"]), chain_id="c", seq=1)
    assert run_steps(h, 50) == RunStatus.PAUSED
    m = coop.checkpoint(h, tmp_path)
    data = (tmp_path / STATE_FILE).read_bytes()
    assert m.files[0].sha256_hex == sha256_hex(data)
    assert m.restart == {"mode": "cooperative", "state_file": STATE_FILE}
    assert json.loads(data)["payload"] == {"limit": 70, "count": 50, "last_posted": 50}
    assert (m.chain_id, m.seq) == ("c", 1)


def test_restore_resumes_where_it_stopped(coop, tmp_path):
    posts = []
    h = coop.launch(WorkloadSpec("counter", ["70"]), chain_id="c", seq=1, emit=posts.append)
    run_steps(h, 50)
    m = coop.checkpoint(h, tmp_path)
    h.terminate()
    r = coop.restore(m, tmp_path, emit=posts.append)
    assert r.seq == 2
    assert r.run(lambda _u: None, lambda: False) == RunStatus.COMPLETED
    assert r.result == {"count": 70}
    assert [p["count"] for p in posts] == [10, 20, 30, 40, 50, 60, 70]


def test_checkpoint_of_finished_workload(coop, tmp_path):
    h = coop.launch(WorkloadSpec("counter", ["3"]))
    assert h.run(lambda _u: None, lambda: False) == RunStatus.COMPLETED
    with pytest.raises(AlreadyCompleted):
        coop.checkpoint(h, tmp_path)


def test_terminated_handle_is_dead(coop, tmp_path):
    h = coop.launch(WorkloadSpec("counter", ["3"]))
    h.terminate()
    with pytest.raises(DeadHandle):
        coop.checkpoint(h, tmp_path)
    with pytest.raises(DeadHandle):
        h.run(lambda _u: None, lambda: False)


def test_tampered_image_is_refused(coop, tmp_path):
    h = coop.launch(WorkloadSpec("counter", ["70"]), chain_id="c", seq=1)
    run_steps(h, 5)
    m = coop.checkpoint(h, tmp_path)
    (tmp_path / STATE_FILE).write_bytes(b'{"garbage": true}')
    with pytest.raises(RestoreRefused):
        coop.restore(m, tmp_path)
    (tmp_path / STATE_FILE).unlink()
    with pytest.raises(RestoreRefused):
        coop.restore(m, tmp_path)


def test_version_mismatch_is_incompatible(coop, tmp_path):
    h = coop.launch(WorkloadSpec("counter", ["70"]), chain_id="c", seq=1)
    run_steps(h, 5)
    coop.checkpoint(h, tmp_path)
    image = json.loads((tmp_path / STATE_FILE).read_bytes())
    image["version"] = 99
    data = json.dumps(image).encode()
    (tmp_path / STATE_FILE).write_bytes(data)
    from limitless.model import CheckpointManifest, FileEntry

    m = CheckpointManifest("c", 1, 0, (FileEntry.of(STATE_FILE, data),), {"mode": "cooperative"})
    with pytest.raises(IncompatibleState):
        coop.restore(m, tmp_path)


def test_unknown_workload(coop):
    with pytest.raises(UnknownWorkload):
        coop.launch(WorkloadSpec("nope"))


def test_snapshot_from_another_thread_pauses_at_a_boundary(tmp_path):
    cp = CooperativeCheckpointer(RealClock())
    h = cp.launch(WorkloadSpec("counter", ["1000000"]), chain_id="c", seq=1)
    result = {}
    t = threading.Thread(target=lambda: result.setdefault("status", h.run(lambda _u: time.sleep(0.0005),
                                                                           lambda: False)))
    t.start()
    time.sleep(0.05)
    m = cp.checkpoint(h, tmp_path)
    t.join(5)
    assert result["status"] == RunStatus.PAUSED
    payload = json.loads((tmp_path / STATE_FILE).read_bytes())["payload"]
    assert payload["count"] == h.state["count"] > 0
    assert m.total_bytes == len((tmp_path / STATE_FILE).read_bytes())


# standalone executables ---------------------------------------------------------


def _run_workload(args, env=None, timeout=30):
    import os

    src = str(Path(__file__).resolve().parents[1] / "src")
    full_env = {**os.environ, "PYTHONPATH": src, "LF_WORK_UNIT_MS": "0", **(env or {})}
    return subprocess.run([sys.executable, "-m", "limitless.workloads", *args], capture_output=True, text=True,
                          env=full_env, timeout=timeout)


def test_standalone_counter_output():
    proc = _run_workload(["counter", "25"])
    assert proc.returncode == 0, proc.stderr
    lines = [json.loads(x) for x in proc.stdout.splitlines()]
    assert lines == [{"partial": {"count": 10}}, {"partial": {"count": 20}}, {"result": {"count": 25}}]


def test_standalone_factors_and_matrix():
    out = json.loads(_run_workload(["factors", "360"]).stdout.splitlines()[-1])
    assert out == {"result": {"n": 360, "factors": [2, 2, 2, 3, 3, 5]}}
    from oracles import matrix_checksum

    out = json.loads(_run_workload(["matrix", "4", "2"]).stdout.splitlines()[-1])
    assert out["result"]["checksum"] == matrix_checksum(4, 2)


def test_standalone_resumes_from_state_file(tmp_path):
    state = tmp_path / "s.json"
    state.write_text(json.dumps({"workload_name": "counter", "version": 1,
                                 "payload": {"limit": 25, "count": 15, "last_posted": 10}}))
    proc = _run_workload(["counter", "25"], {"LF_STATE_FILE": str(state)})
    assert [json.loads(x) for x in proc.stdout.splitlines()] == [{"partial": {"count": 20}},
                                                               {"result": {"count": 25}}]


def test_standalone_rejects_incompatible_state(tmp_path):
    state = tmp_path / "s.json"
    state.write_text(json.dumps({"workload_name": "matrix", "version": 1, "payload": {}}))
    proc = _run_workload(["counter", "5"], {"LF_STATE_FILE": str(state)})
    assert proc.returncode == 3 and "incompatible-state" in proc.stderr


def test_standalone_usage_errors():
    assert _run_workload([]).returncode == 2
    assert _run_workload(["nope"]).returncode == 2
    assert _run_workload(["counter", "-1"]).returncode == 2


def test_standalone_posts_partials(tmp_path):
    got = []

    class H(BaseHTTPRequestHandler):
        def do_POST(self):
            got.append(json.loads(self.rfile.read(int(self.headers["Content-Length"]))))
            self.send_response(204)
            self.end_headers()

        def log_message(self, *a):
            pass

    srv = HTTPServer(("127.0.0.1", 0), H)
    threading.Thread(target=srv.serve_forever, daemon=True).start()
    try:
        url = f"http://127.0.0.1:{srv.server_address[1]}/count"
        assert _run_workload(["counter", "20"], {"LF_PARTIALS_URL": url}).returncode == 0
    finally:
        srv.shutdown()
    assert got == [{"count": 10}, {"count": 20}]


# external adapter ---------------------------------------------------------------------


def fake_tool() -> ExternalToolConfig:
    py = sys.executable
    dirs = ["--ckpt-dir", "{ckpt_dir}", "--work-dir", "{work_dir}"]
    return ExternalToolConfig(
        launch_cmd=[py, FAKECR, "launch", *dirs, "--", "{argv}"],
        checkpoint_cmd=[py, FAKECR, "checkpoint", *dirs],
        restart_cmd=[py, FAKECR, "restart", *dirs, "--", "{images}"],
        image_glob="ckpt_*.json",
        probe=FAKECR,
        env={},
        port_file=None,
        poll_ms=10,
    )


def test_workload_argv():
    argv = workload_argv(WorkloadSpec("counter", ["5"], mode=Mode.EXTERNAL))
    assert argv[1:] == ["-m", "limitless.workloads", "counter", "5"]
    assert workload_argv(WorkloadSpec("true"))[0].endswith("true")
    with pytest.raises(UnknownWorkload):
        workload_argv(WorkloadSpec("definitely-not-a-binary-xyz"))


def test_missing_tool_is_reported(tmp_path):
    cfg = fake_tool()
    cfg.probe = "no-such-cr-tool"
    cp = ExternalCheckpointer(cfg, tmp_path, RealClock())
    with pytest.raises(ToolUnavailable):
        cp.launch(WorkloadSpec("counter", ["5"], mode=Mode.EXTERNAL))


@pytest.mark.slow
def test_external_launch_checkpoint_kill_restore(tmp_path):
    clock = RealClock()
    cp = ExternalCheckpointer(fake_tool(), tmp_path / "ext", clock)
    posts = []
    spec = WorkloadSpec("counter", ["25"], mode=Mode.EXTERNAL, env={"LF_WORK_UNIT_MS": "40"})
    h = cp.launch(spec, chain_id="x", seq=1, emit=posts.append)
    stop = clock.now_ms() + 550
    assert h.run(lambda _u: None, lambda: clock.now_ms() >= stop) == RunStatus.PAUSED
    m = cp.checkpoint(h, tmp_path / "image")
    h.terminate()
    assert not h.live
    assert sorted(f.relative_path for f in m.files) == ["ckpt_argv.json", "ckpt_state.json"]
    saved = json.loads((tmp_path / "image" / "ckpt_state.json").read_text())["payload"]
    assert 0 < saved["count"] < 25

    r = cp.restore(m, tmp_path / "image", emit=posts.append)
    assert r.seq == 2
    assert r.run(lambda _u: None, lambda: False) == RunStatus.COMPLETED
    assert r.result == {"count": 25}
    assert posts == [{"count": 10}, {"count": 20}]


def test_external_checkpoint_after_exit_is_already_completed(tmp_path):
    clock = RealClock()
    cp = ExternalCheckpointer(fake_tool(), tmp_path / "ext", clock)
    h = cp.launch(WorkloadSpec("counter", ["2"], mode=Mode.EXTERNAL, env={"LF_WORK_UNIT_MS": "0"}))
    assert h.run(lambda _u: None, lambda: False) == RunStatus.COMPLETED
    assert h.result == {"count": 2}
    with pytest.raises(AlreadyCompleted):
        cp.checkpoint(h, tmp_path / "img")


def test_dmtcp_templates():
    cfg = ExternalToolConfig.dmtcp()
    assert cfg.launch_cmd[0] == "dmtcp_launch" and "{argv}" in cfg.launch_cmd
    assert "--bcheckpoint" in cfg.checkpoint_cmd
    assert cfg.restart_cmd[0] == "dmtcp_restart" and "{images}" in cfg.restart_cmd
