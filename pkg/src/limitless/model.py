"""Shared domain types for checkpoint-chained function execution.

Every type is an immutable value with a canonical JSON encoding
(``to_json`` / ``from_json``).  The encodings are the wire and file format
used by the stores, the action interface and the gateway.
"""

from __future__ import annotations

import enum
import hashlib
import json
import random
import uuid
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Optional

PLATFORM_MAX_TIMEOUT_MS = 300_000

# Reserved invocation parameters carrying chain identity between links.
CHAIN_ID_PARAM = "__chain_id"
SEQ_PARAM = "__seq"
RESERVED_PARAMS = (CHAIN_ID_PARAM, SEQ_PARAM)


class ValidationError(ValueError):
    """A value violates a domain invariant."""


def canonical_json(obj: Any) -> bytes:
    """Deterministic UTF-8 JSON encoding (sorted keys, no whitespace)."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


class IdFactory:
    """Mints URL-safe opaque identifiers.

    With a seed the sequence is reproducible, which simulated runs rely on.
    """

    def __init__(self, seed: Optional[int] = None) -> None:
        self._rng = random.Random(seed) if seed is not None else None

    def new(self, prefix: str = "") -> str:
        if self._rng is None:
            token = uuid.uuid4().hex
        else:
            token = "%032x" % self._rng.getrandbits(128)
        return f"{prefix}{token}"


class Mode(str, enum.Enum):
    COOPERATIVE = "cooperative"
    EXTERNAL = "external-process"


@dataclass(frozen=True)
class WorkloadSpec:
    bin: str
    bin_args: tuple[str, ...] = ()
    mode: Mode = Mode.COOPERATIVE
    env: tuple[tuple[str, str], ...] = ()

    def __post_init__(self) -> None:
        if not isinstance(self.bin, str) or not self.bin:
            raise ValidationError("bin must be a non-empty string")
        object.__setattr__(self, "bin_args", tuple(str(a) for a in self.bin_args))
        object.__setattr__(self, "mode", Mode(self.mode))
        env = self.env.items() if isinstance(self.env, dict) else self.env
        object.__setattr__(self, "env", tuple(sorted((str(k), str(v)) for k, v in env)))

    @property
    def env_dict(self) -> dict[str, str]:
        return dict(self.env)

    def to_json(self) -> dict:
        return {
            "bin": self.bin,
            "bin_args": list(self.bin_args),
            "mode": self.mode.value,
            "env": self.env_dict,
        }

    @classmethod
    def from_json(cls, data: dict) -> "WorkloadSpec":
        args = data.get("bin_args", [])
        if isinstance(args, str):
            # wsk-style `--param bin_args [1]` arrives as a JSON string
            args = json.loads(args)
        if not isinstance(args, (list, tuple)):
            args = [args]
        return cls(
            bin=data["bin"],
            bin_args=tuple(str(a) for a in args),
            mode=Mode(data.get("mode", Mode.COOPERATIVE.value)),
            env=data.get("env") or {},
        )


@dataclass(frozen=True)
class InvocationContext:
    chain_id: str
    seq: int
    spec: WorkloadSpec
    timeout_ms: int
    checkpoint_trigger_ms: int
    activation_id: str = ""

    def __post_init__(self) -> None:
        if not self.chain_id:
            raise ValidationError("chain_id must be non-empty")
        if self.seq < 1:
            raise ValidationError("seq must be >= 1")
        if not 0 < self.timeout_ms <= PLATFORM_MAX_TIMEOUT_MS:
            raise ValidationError(f"timeout_ms must be in (0, {PLATFORM_MAX_TIMEOUT_MS}]")
        if not 0 < self.checkpoint_trigger_ms < self.timeout_ms:
            raise ValidationError("checkpoint_trigger_ms must satisfy 0 < trigger < timeout")

    def to_json(self) -> dict:
        return {
            "chain_id": self.chain_id,
            "seq": self.seq,
            "spec": self.spec.to_json(),
            "timeout_ms": self.timeout_ms,
            "checkpoint_trigger_ms": self.checkpoint_trigger_ms,
            "activation_id": self.activation_id,
        }

    @classmethod
    def from_json(cls, data: dict) -> "InvocationContext":
        return cls(
            chain_id=data["chain_id"],
            seq=int(data["seq"]),
            spec=WorkloadSpec.from_json(data["spec"]),
            timeout_ms=int(data["timeout_ms"]),
            checkpoint_trigger_ms=int(data["checkpoint_trigger_ms"]),
            activation_id=data.get("activation_id", ""),
        )

    def to_params(self) -> dict:
        """Invocation parameters that make the next link resume this chain."""
        params = self.spec.to_json()
        params[CHAIN_ID_PARAM] = self.chain_id
        params[SEQ_PARAM] = self.seq
        return params


def advance_context(ctx: InvocationContext) -> InvocationContext:
    """Context for the next link of the chain; the gateway assigns the activation id."""
    return replace(ctx, seq=ctx.seq + 1, activation_id="")


@dataclass(frozen=True)
class FileEntry:
    relative_path: str
    size_bytes: int
    sha256_hex: str

    def to_json(self) -> dict:
        return {"relative_path": self.relative_path, "size_bytes": self.size_bytes, "sha256_hex": self.sha256_hex}

    @classmethod
    def from_json(cls, data: dict) -> "FileEntry":
        return cls(data["relative_path"], int(data["size_bytes"]), data["sha256_hex"])

    @classmethod
    def of(cls, relative_path: str, data: bytes) -> "FileEntry":
        return cls(relative_path, len(data), sha256_hex(data))


@dataclass(frozen=True)
class CheckpointManifest:
    chain_id: str
    seq: int
    created_at: int
    files: tuple[FileEntry, ...]
    restart: dict = field(default_factory=dict, hash=False, compare=True)

    @property
    def total_bytes(self) -> int:
        return sum(f.size_bytes for f in self.files)

    def to_json(self) -> dict:
        return {
            "chain_id": self.chain_id,
            "seq": self.seq,
            "created_at": self.created_at,
            "files": [f.to_json() for f in self.files],
            "restart": dict(self.restart),
        }

    @classmethod
    def from_json(cls, data: dict) -> "CheckpointManifest":
        return cls(
            chain_id=data["chain_id"],
            seq=int(data["seq"]),
            created_at=int(data["created_at"]),
            files=tuple(FileEntry.from_json(f) for f in data["files"]),
            restart=dict(data.get("restart") or {}),
        )


@dataclass(frozen=True)
class FileCheck:
    relative_path: str
    ok: bool
    reason: str = ""


@dataclass(frozen=True)
class VerificationReport:
    files: tuple[FileCheck, ...]

    @property
    def ok(self) -> bool:
        return all(f.ok for f in self.files)

    @property
    def failures(self) -> list[FileCheck]:
        return [f for f in self.files if not f.ok]


def verify_manifest(manifest: CheckpointManifest, blob_reader: Callable[[str], Optional[bytes]]) -> VerificationReport:
    """Recompute every listed digest through ``blob_reader``.

    ``blob_reader`` returns the bytes for a relative path or ``None`` when
    absent.  Reader exceptions are reported as failures; this never raises.
    """
    checks = []
    for entry in manifest.files:
        try:
            data = blob_reader(entry.relative_path)
        except Exception as exc:  # noqa: BLE001 - report, never raise
            checks.append(FileCheck(entry.relative_path, False, f"unreadable: {exc}"))
            continue
        if data is None:
            checks.append(FileCheck(entry.relative_path, False, "absent"))
        elif len(data) != entry.size_bytes:
            checks.append(FileCheck(entry.relative_path, False, "size mismatch"))
        elif sha256_hex(data) != entry.sha256_hex:
            checks.append(FileCheck(entry.relative_path, False, "digest mismatch"))
        else:
            checks.append(FileCheck(entry.relative_path, True))
    return VerificationReport(tuple(checks))


class ChainStatus(str, enum.Enum):
    RUNNING = "running"
    COMPLETED = "completed"
    FAILED = "failed"


@dataclass(frozen=True)
class Partial:
    seq: int
    payload: Any

    def to_json(self) -> dict:
        return {"seq": self.seq, "payload": self.payload}


@dataclass(frozen=True)
class FinalResult:
    payload: Any
    finished_at: int
    winner_seq: int

    def to_json(self) -> dict:
        return {"payload": self.payload, "finished_at": self.finished_at, "winner_seq": self.winner_seq}

    @classmethod
    def from_json(cls, data: dict) -> "FinalResult":
        return cls(data["payload"], int(data["finished_at"]), int(data["winner_seq"]))


@dataclass(frozen=True)
class ChainRecord:
    """Authoritative per-chain state held by the results repository.

    ``final`` is the first accepted result.  ``extra_finals`` only fills up
    when fencing is off; ``rejected`` logs fenced-out duplicates.
    """

    chain_id: str
    status: ChainStatus = ChainStatus.RUNNING
    partials: tuple[Partial, ...] = ()
    final: Optional[FinalResult] = None
    invocation_count: int = 0
    seqs: tuple[int, ...] = ()
    extra_finals: tuple[FinalResult, ...] = ()
    rejected: tuple[FinalResult, ...] = ()
    failure: str = ""

    @property
    def finals(self) -> list[FinalResult]:
        return ([self.final] if self.final else []) + list(self.extra_finals)

    @property
    def duplicate_finals(self) -> int:
        n = len(self.finals)
        return n if n > 1 else 0

    def to_json(self) -> dict:
        return {
            "chain_id": self.chain_id,
            "status": self.status.value,
            "partials": [p.to_json() for p in self.partials],
            "final": self.final.to_json() if self.final else None,
            "invocation_count": self.invocation_count,
            "seqs": list(self.seqs),
            "extra_finals": [f.to_json() for f in self.extra_finals],
            "rejected": [f.to_json() for f in self.rejected],
            "failure": self.failure,
        }

    @classmethod
    def from_json(cls, data: dict) -> "ChainRecord":
        final = data.get("final")
        return cls(
            chain_id=data["chain_id"],
            status=ChainStatus(data["status"]),
            partials=tuple(Partial(p["seq"], p["payload"]) for p in data.get("partials", [])),
            final=FinalResult.from_json(final) if final else None,
            invocation_count=int(data.get("invocation_count", 0)),
            seqs=tuple(int(s) for s in data.get("seqs", [])),
            extra_finals=tuple(FinalResult.from_json(f) for f in data.get("extra_finals", [])),
            rejected=tuple(FinalResult.from_json(f) for f in data.get("rejected", [])),
            failure=data.get("failure", ""),
        )


class Outcome(str, enum.Enum):
    SUCCESS = "success"
    TIMEOUT_KILLED = "timeout_killed"
    ERROR = "error"


@dataclass(frozen=True)
class ActivationRecord:
    activation_id: str
    action_name: str
    start: int
    end: int
    outcome: Outcome
    billed_ms: int
    params_digest: str
    chain_id: Optional[str] = None
    seq: Optional[int] = None

    def to_json(self) -> dict:
        return {
            "activation_id": self.activation_id,
            "action_name": self.action_name,
            "start": self.start,
            "end": self.end,
            "outcome": self.outcome.value,
            "billed_ms": self.billed_ms,
            "params_digest": self.params_digest,
            "chain_id": self.chain_id,
            "seq": self.seq,
        }

    @classmethod
    def from_json(cls, data: dict) -> "ActivationRecord":
        return cls(
            activation_id=data["activation_id"],
            action_name=data["action_name"],
            start=int(data["start"]),
            end=int(data["end"]),
            outcome=Outcome(data["outcome"]),
            billed_ms=int(data["billed_ms"]),
            params_digest=data["params_digest"],
            chain_id=data.get("chain_id"),
            seq=data.get("seq"),
        )


def params_digest(params: dict) -> str:
    return sha256_hex(canonical_json(params))


def split_params(params: dict) -> tuple[dict, Optional[str], Optional[int]]:
    """Separate reserved chain parameters from the workload-visible ones."""
    visible = {k: v for k, v in params.items() if k not in RESERVED_PARAMS}
    chain_id = params.get(CHAIN_ID_PARAM)
    seq = params.get(SEQ_PARAM)
    return visible, chain_id, int(seq) if seq is not None else None
