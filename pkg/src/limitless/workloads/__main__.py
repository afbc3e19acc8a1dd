"""Standalone executable form of the workloads.

    python -m limitless.workloads counter 70

Prints one JSON line per partial (``{"partial": ...}``) and a final
``{"result": ...}`` line.  With ``LF_PARTIALS_URL`` set, partials are also
POSTed there.  ``LF_STATE_FILE`` names the state image: it is loaded at start
when present, and rewritten at the next step boundary after SIGUSR1.
``LF_WORK_UNIT_MS`` paces the counter (default 1000 ms per increment).
"""

from __future__ import annotations

import json
import os
import signal
import sys
import time
import urllib.request
from pathlib import Path

from ..model import canonical_json
from . import UnknownWorkload, WorkloadError, get_workload


def _post(url: str, payload) -> None:
    req = urllib.request.Request(url, data=json.dumps(payload).encode(), method="POST",
                                 headers={"Content-Type": "application/json"})
    try:
        urllib.request.urlopen(req, timeout=5).close()
    except OSError as exc:
        print(f"partial post failed: {exc}", file=sys.stderr, flush=True)


def _write_state(path: Path, name: str, version: int, state: dict) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(canonical_json({"workload_name": name, "version": version, "payload": state}))
    os.replace(tmp, path)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv:
        print("usage: python -m limitless.workloads <name> [args...]", file=sys.stderr)
        return 2
    try:
        workload = get_workload(argv[0])
    except UnknownWorkload as exc:
        print(str(exc), file=sys.stderr)
        return 2

    state_file = Path(os.environ["LF_STATE_FILE"]) if os.environ.get("LF_STATE_FILE") else None
    partials_url = os.environ.get("LF_PARTIALS_URL")
    unit_s = int(os.environ.get("LF_WORK_UNIT_MS", "1000")) / 1000

    try:
        if state_file is not None and state_file.is_file():
            image = json.loads(state_file.read_bytes())
            if image["workload_name"] != workload.name or image["version"] != workload.version:
                print("incompatible-state", file=sys.stderr)
                return 3
            state = image["payload"]
        else:
            state = workload.initial_state(argv[1:])
    except WorkloadError as exc:
        print(str(exc), file=sys.stderr)
        return 2

    wanted = {"dump": False}

    def on_signal(_signum, _frame):
        wanted["dump"] = True

    signal.signal(signal.SIGUSR1, on_signal)

    def emit(payload) -> None:
        print(json.dumps({"partial": payload}), flush=True)
        if partials_url:
            _post(partials_url, payload)

    while not workload.is_done(state):
        workload.step(state, emit)
        if workload.paced and unit_s:
            time.sleep(unit_s)
        if wanted["dump"] and state_file is not None:
            wanted["dump"] = False
            _write_state(state_file, workload.name, workload.version, state)

    print(json.dumps({"result": workload.result(state)}), flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
