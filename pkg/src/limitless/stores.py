"""Checkpoint and results repositories.

Three interchangeable backends:

``memory``
    process-local dicts, for tests and simulated runs.
``local_fs``
    files under a root directory; checkpoints are committed by renaming a
    fully written temporary directory, chain records by write-then-rename
    under an exclusive ``flock``, so several processes can share a root.
``stub_remote``
    wraps another backend and charges transfer latency on a clock, standing
    in for a remote object store.

Chain records are updated with an optimistic read / compare-and-set loop.
Finalization with fencing is first-writer-wins on ``ChainRecord.final``.
"""

from __future__ import annotations

import fcntl
import json
import os
import re
import threading
import uuid
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Generator, Mapping, Optional

from .clock import Clock
from .model import (
    ChainRecord,
    ChainStatus,
    CheckpointManifest,
    FinalResult,
    Partial,
    canonical_json,
    sha256_hex,
    verify_manifest,
)

MIB = 1 << 20
ACCEPTED = "accepted"
DUPLICATE_REJECTED = "duplicate_rejected"

BlobReader = Callable[[str], Optional[bytes]]

_SAFE_ID = re.compile(r"^[A-Za-z0-9_.-]+$")


class StoreError(Exception):
    pass


class CorruptCheckpoint(StoreError):
    reason = "corrupt"


class DuplicateCheckpoint(StoreError):
    pass


def _check_id(chain_id: str) -> str:
    if not chain_id or not _SAFE_ID.match(chain_id) or chain_id in (".", ".."):
        raise StoreError(f"chain id {chain_id!r} is not URL-safe")
    return chain_id


def _check_relpath(rel: str) -> str:
    p = Path(rel)
    if p.is_absolute() or ".." in p.parts or not rel:
        raise StoreError(f"illegal blob path {rel!r}")
    return rel


@dataclass(frozen=True)
class LatencyModel:
    put_ms_per_mib: float = 0.0
    get_ms_per_mib: float = 0.0
    fixed_ms: float = 0.0

    def __post_init__(self) -> None:
        if min(self.put_ms_per_mib, self.get_ms_per_mib, self.fixed_ms) < 0:
            raise ValueError("latency parameters must be >= 0")

    def put_ms(self, nbytes: int) -> int:
        return round(self.fixed_ms + self.put_ms_per_mib * nbytes / MIB)

    def get_ms(self, nbytes: int) -> int:
        return round(self.fixed_ms + self.get_ms_per_mib * nbytes / MIB)


@dataclass(frozen=True)
class RepoConfig:
    backend: str = "memory"
    root: Optional[Path] = None
    latency: LatencyModel = field(default_factory=LatencyModel)

    def __post_init__(self) -> None:
        if self.backend not in ("memory", "local_fs", "stub_remote"):
            raise ValueError(f"unknown backend {self.backend!r}")
        if self.backend == "local_fs" and self.root is None:
            raise ValueError("local_fs backend needs a root directory")


# --------------------------------------------------------------------------
# checkpoint repositories


class CheckpointRepo:
    def put(self, manifest: CheckpointManifest, blobs: Mapping[str, bytes]) -> str:
        raise NotImplementedError

    def get_latest(self, chain_id: str) -> Optional[tuple[CheckpointManifest, BlobReader]]:
        raise NotImplementedError

    def seqs(self, chain_id: str) -> list[int]:
        raise NotImplementedError

    def manifests(self, chain_id: str) -> list[CheckpointManifest]:
        raise NotImplementedError

    @staticmethod
    def _validate(manifest: CheckpointManifest, blobs: Mapping[str, bytes]) -> None:
        _check_id(manifest.chain_id)
        for entry in manifest.files:
            _check_relpath(entry.relative_path)
        report = verify_manifest(manifest, blobs.get)
        if not report.ok:
            bad = ", ".join(f"{f.relative_path}: {f.reason}" for f in report.failures)
            raise StoreError(f"blobs do not match manifest ({bad})")

    @staticmethod
    def key(chain_id: str, seq: int) -> str:
        return f"{chain_id}/{seq}"


class MemoryCheckpointRepo(CheckpointRepo):
    def __init__(self) -> None:
        self._lock = threading.Lock()
        # chain -> seq -> (manifest bytes, blobs)
        self._data: dict[str, dict[int, tuple[bytes, dict[str, bytes]]]] = {}

    def put(self, manifest, blobs):
        self._validate(manifest, blobs)
        wanted = {f.relative_path: bytes(blobs[f.relative_path]) for f in manifest.files}
        with self._lock:
            chain = self._data.setdefault(manifest.chain_id, {})
            if manifest.seq in chain:
                raise DuplicateCheckpoint(f"checkpoint {manifest.chain_id}/{manifest.seq} exists")
            chain[manifest.seq] = (canonical_json(manifest.to_json()), wanted)
        return self.key(manifest.chain_id, manifest.seq)

    def seqs(self, chain_id):
        with self._lock:
            return sorted(self._data.get(chain_id, {}))

    def _load(self, chain_id: str, seq: int):
        with self._lock:
            raw, blobs = self._data[chain_id][seq]
        try:
            return CheckpointManifest.from_json(json.loads(raw)), blobs
        except (ValueError, KeyError, TypeError) as exc:
            raise CorruptCheckpoint(f"manifest {chain_id}/{seq} unreadable: {exc}") from exc

    def get_latest(self, chain_id):
        seqs = self.seqs(chain_id)
        if not seqs:
            return None
        manifest, blobs = self._load(chain_id, seqs[-1])
        return manifest, blobs.get

    def manifests(self, chain_id):
        return [self._load(chain_id, s)[0] for s in self.seqs(chain_id)]

    def corrupt(self, chain_id: str, seq: int, raw: Optional[bytes] = None,
                blob: Optional[tuple[str, bytes]] = None) -> None:
        """Test hook: overwrite stored bytes in place."""
        with self._lock:
            old_raw, blobs = self._data[chain_id][seq]
            if blob is not None:
                blobs[blob[0]] = blob[1]
            self._data[chain_id][seq] = (raw if raw is not None else old_raw, blobs)


def _fsync_write(path: Path, data: bytes) -> None:
    with open(path, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())


class LocalFsCheckpointRepo(CheckpointRepo):
    """``<root>/checkpoints/<chain_id>/<seq>/manifest.json`` plus blob files."""

    MANIFEST = "manifest.json"

    def __init__(self, root: Path | str) -> None:
        self.root = Path(root) / "checkpoints"
        self.root.mkdir(parents=True, exist_ok=True)

    def _chain_dir(self, chain_id: str) -> Path:
        return self.root / _check_id(chain_id)

    def put(self, manifest, blobs):
        self._validate(manifest, blobs)
        chain_dir = self._chain_dir(manifest.chain_id)
        chain_dir.mkdir(parents=True, exist_ok=True)
        final = chain_dir / str(manifest.seq)
        if final.exists():
            raise DuplicateCheckpoint(f"checkpoint {manifest.chain_id}/{manifest.seq} exists")
        tmp = chain_dir / f".tmp-{manifest.seq}-{uuid.uuid4().hex}"
        tmp.mkdir()
        try:
            for entry in manifest.files:
                target = tmp / entry.relative_path
                target.parent.mkdir(parents=True, exist_ok=True)
                _fsync_write(target, blobs[entry.relative_path])
            _fsync_write(tmp / self.MANIFEST, canonical_json(manifest.to_json()))
            try:
                os.rename(tmp, final)
            except OSError as exc:
                raise DuplicateCheckpoint(f"checkpoint {manifest.chain_id}/{manifest.seq} exists") from exc
        except BaseException:
            _rmtree(tmp)
            raise
        return self.key(manifest.chain_id, manifest.seq)

    def seqs(self, chain_id):
        d = self._chain_dir(chain_id)
        if not d.is_dir():
            return []
        return sorted(int(p.name) for p in d.iterdir() if p.is_dir() and p.name.isdigit())

    def _load(self, chain_id: str, seq: int) -> CheckpointManifest:
        path = self._chain_dir(chain_id) / str(seq) / self.MANIFEST
        try:
            manifest = CheckpointManifest.from_json(json.loads(path.read_bytes()))
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise CorruptCheckpoint(f"manifest {chain_id}/{seq} unreadable: {exc}") from exc
        if manifest.chain_id != chain_id or manifest.seq != seq:
            raise CorruptCheckpoint(f"manifest {chain_id}/{seq} describes another checkpoint")
        return manifest

    def get_latest(self, chain_id):
        seqs = self.seqs(chain_id)
        if not seqs:
            return None
        seq = seqs[-1]
        manifest = self._load(chain_id, seq)
        base = self._chain_dir(chain_id) / str(seq)

        def reader(rel: str) -> Optional[bytes]:
            p = base / _check_relpath(rel)
            return p.read_bytes() if p.is_file() else None

        return manifest, reader

    def manifests(self, chain_id):
        return [self._load(chain_id, s) for s in self.seqs(chain_id)]


def _rmtree(path: Path) -> None:
    import shutil

    shutil.rmtree(path, ignore_errors=True)


class StubRemoteCheckpointRepo(CheckpointRepo):
    """Delegates storage and charges transfer latency on ``clock``."""

    def __init__(self, inner: CheckpointRepo, clock: Clock, latency: LatencyModel) -> None:
        self.inner = inner
        self.clock = clock
        self.latency = latency

    def put(self, manifest, blobs):
        self._validate(manifest, blobs)
        nbytes = sum(len(blobs[f.relative_path]) for f in manifest.files)
        # latency is paid before the commit: an upload cut off by a deadline stores nothing
        self.clock.spend(self.latency.put_ms(nbytes))
        return self.inner.put(manifest, blobs)

    def get_latest(self, chain_id):
        self.clock.spend(round(self.latency.fixed_ms))
        found = self.inner.get_latest(chain_id)
        if found is None:
            return None
        manifest, inner_reader = found

        def reader(rel: str) -> Optional[bytes]:
            data = inner_reader(rel)
            if data is not None:
                self.clock.spend(round(self.latency.get_ms_per_mib * len(data) / MIB))
            return data

        return manifest, reader

    def seqs(self, chain_id):
        return self.inner.seqs(chain_id)

    def manifests(self, chain_id):
        return self.inner.manifests(chain_id)


# --------------------------------------------------------------------------
# results repositories


class ResultsRepo:
    """Chain records behind an optimistic compare-and-set primitive.

    Subclasses supply ``_load`` (record and an opaque version) and
    ``_store_if`` (write only if the version is unchanged).
    """

    def _load(self, chain_id: str) -> tuple[Optional[ChainRecord], Any]:
        raise NotImplementedError

    def _store_if(self, record: ChainRecord, expected_version: Any) -> bool:
        raise NotImplementedError

    def get(self, chain_id: str) -> Optional[ChainRecord]:
        return self._load(_check_id(chain_id))[0]

    def chains(self) -> list[str]:
        raise NotImplementedError

    def _update(self, chain_id: str, fn: Callable[[ChainRecord], tuple[ChainRecord, Any]]) -> Any:
        _check_id(chain_id)
        while True:
            current, version = self._load(chain_id)
            new, verdict = fn(current or ChainRecord(chain_id=chain_id))
            if self._store_if(new, version):
                return verdict

    def observe_invocation(self, chain_id: str, seq: int) -> ChainRecord:
        def fn(rec: ChainRecord):
            if seq in rec.seqs:
                return rec, rec
            seqs = tuple(sorted(rec.seqs + (seq,)))
            new = replace(rec, seqs=seqs, invocation_count=len(seqs))
            return new, new

        return self._update(chain_id, fn)

    def put_partial(self, chain_id: str, seq: int, payload: Any) -> None:
        item = Partial(seq, payload)

        def fn(rec: ChainRecord):
            if item in rec.partials:
                return rec, None
            return replace(rec, partials=rec.partials + (item,)), None

        self._update(chain_id, fn)

    def finalize_steps(self, chain_id: str, seq: int, payload: Any, fencing: bool,
                       finished_at: int) -> Generator[None, None, str]:
        """The finalize protocol as a generator yielding between its atomic steps.

        Step 1 reads the record, step 2 attempts the compare-and-set; a lost
        race loops back to step 1.  The generator's return value is the
        verdict.  :meth:`finalize` simply exhausts it.
        """
        _check_id(chain_id)
        entry = FinalResult(payload, finished_at, seq)
        while True:
            current, version = self._load(chain_id)
            yield
            rec = current or ChainRecord(chain_id=chain_id)
            if rec.final is None:
                new = replace(rec, final=entry, status=ChainStatus.COMPLETED, failure="")
                verdict = ACCEPTED
            elif fencing:
                new = replace(rec, rejected=rec.rejected + (entry,))
                verdict = DUPLICATE_REJECTED
            else:
                new = replace(rec, extra_finals=rec.extra_finals + (entry,))
                verdict = ACCEPTED
            if self._store_if(new, version):
                return verdict
            yield

    def finalize(self, chain_id: str, seq: int, payload: Any, fencing: bool = True,
                 finished_at: int = 0) -> str:
        gen = self.finalize_steps(chain_id, seq, payload, fencing, finished_at)
        while True:
            try:
                next(gen)
            except StopIteration as stop:
                return stop.value

    def mark_failed(self, chain_id: str, reason: str) -> None:
        def fn(rec: ChainRecord):
            if rec.status == ChainStatus.COMPLETED:
                return rec, None
            return replace(rec, status=ChainStatus.FAILED, failure=reason), None

        self._update(chain_id, fn)


class MemoryResultsRepo(ResultsRepo):
    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._records: dict[str, tuple[ChainRecord, int]] = {}

    def _load(self, chain_id):
        with self._lock:
            rec, version = self._records.get(chain_id, (None, 0))
        return rec, version

    def _store_if(self, record, expected_version):
        with self._lock:
            _, version = self._records.get(record.chain_id, (None, 0))
            if version != expected_version:
                return False
            self._records[record.chain_id] = (record, version + 1)
            return True

    def chains(self):
        with self._lock:
            return sorted(self._records)


class LocalFsResultsRepo(ResultsRepo):
    """``<root>/chains/<chain_id>.json``; the version is the file's digest."""

    def __init__(self, root: Path | str) -> None:
        self.root = Path(root) / "chains"
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, chain_id: str) -> Path:
        return self.root / f"{_check_id(chain_id)}.json"

    def _read(self, chain_id: str) -> tuple[Optional[bytes], str]:
        try:
            raw = self._path(chain_id).read_bytes()
        except FileNotFoundError:
            return None, ""
        return raw, sha256_hex(raw)

    def _load(self, chain_id):
        raw, version = self._read(chain_id)
        if raw is None:
            return None, version
        try:
            return ChainRecord.from_json(json.loads(raw)), version
        except (ValueError, KeyError, TypeError) as exc:
            raise StoreError(f"chain record {chain_id} unreadable: {exc}") from exc

    def _store_if(self, record, expected_version):
        lock_path = self.root / f".{record.chain_id}.lock"
        with open(lock_path, "a+b") as lock:
            fcntl.flock(lock.fileno(), fcntl.LOCK_EX)
            try:
                _, version = self._read(record.chain_id)
                if version != expected_version:
                    return False
                tmp = self.root / f".{record.chain_id}.{uuid.uuid4().hex}.tmp"
                _fsync_write(tmp, canonical_json(record.to_json()))
                os.replace(tmp, self._path(record.chain_id))
                return True
            finally:
                fcntl.flock(lock.fileno(), fcntl.LOCK_UN)

    def chains(self):
        return sorted(p.stem for p in self.root.glob("*.json"))


class StubRemoteResultsRepo(ResultsRepo):
    """Charges ``fixed_ms`` per round trip, then delegates."""

    def __init__(self, inner: ResultsRepo, clock: Clock, latency: LatencyModel) -> None:
        self.inner = inner
        self.clock = clock
        self.latency = latency

    def _load(self, chain_id):
        self.clock.spend(round(self.latency.fixed_ms))
        return self.inner._load(chain_id)

    def _store_if(self, record, expected_version):
        self.clock.spend(round(self.latency.fixed_ms))
        return self.inner._store_if(record, expected_version)

    def get(self, chain_id):
        # reads for reporting are not charged
        return self.inner.get(chain_id)

    def chains(self):
        return self.inner.chains()


def make_repos(config: RepoConfig, clock: Clock) -> tuple[CheckpointRepo, ResultsRepo]:
    if config.backend == "memory":
        return MemoryCheckpointRepo(), MemoryResultsRepo()
    if config.backend == "local_fs":
        return LocalFsCheckpointRepo(config.root), LocalFsResultsRepo(config.root)
    if config.root is not None:
        ckpt, results = LocalFsCheckpointRepo(config.root), LocalFsResultsRepo(config.root)
    else:
        ckpt, results = MemoryCheckpointRepo(), MemoryResultsRepo()
    return (StubRemoteCheckpointRepo(ckpt, clock, config.latency),
            StubRemoteResultsRepo(results, clock, config.latency))
