"""Structured JSON event lines, one per runner state transition."""

from __future__ import annotations

import json
import logging
import threading
from collections import deque
from pathlib import Path
from typing import Optional

from .clock import Clock

log = logging.getLogger("limitless.events")


class EventLog:
    def __init__(self, log_dir: Optional[Path | str] = None, clock: Optional[Clock] = None) -> None:
        self.path = None
        if log_dir:
            Path(log_dir).mkdir(parents=True, exist_ok=True)
            self.path = Path(log_dir) / "events.jsonl"
        self.clock = clock
        self._lock = threading.Lock()
        self.events: deque[dict] = deque(maxlen=10_000)

    def emit(self, event: str, level: int = logging.INFO, **fields) -> dict:
        record = {"event": event, **fields}
        if self.clock is not None:
            record["t"] = self.clock.now_ms()
        # serialize only when something will read the line
        line = None
        if self.path is not None or log.isEnabledFor(level):
            line = json.dumps(record, sort_keys=True, default=str)
            log.log(level, line)
        with self._lock:
            self.events.append(record)
            if line is not None and self.path is not None:
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(line + "\n")
        return record

    def names(self) -> list[str]:
        with self._lock:
            return [e["event"] for e in self.events]
