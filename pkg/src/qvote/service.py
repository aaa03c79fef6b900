"""Election committee server: key vault, JSONL ledger, tally and audit."""

from __future__ import annotations

import base64
import binascii
import logging
import os
import threading
import time
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import orjson

from .bb84 import as_bits
from .crypto import SymmetricKey, KeyOrigin, key_digest_bits, receipt_hash, xor_apply
from .errors import BadKey, LedgerError, NotFound
from .protocol import MAX_FIELD_BYTES, ElectionConfig, StageTimer, committee_handle, reply_topic, session_seed
from .transport import Channel, Envelope, committee_filters

log = logging.getLogger(__name__)


@dataclass
class LedgerEntry:
    session_id: str
    e_vote_b64: str
    e_id_b64: str
    receipt_hex: str
    decrypted_vote: str | None
    valid: bool
    recorded_at: float
    audit: dict | None = None

    @property
    def e_vote(self) -> bytes:
        return base64.b64decode(self.e_vote_b64)

    @property
    def e_id(self) -> bytes:
        return base64.b64decode(self.e_id_b64)

    def receipt_ok(self) -> bool:
        try:
            return receipt_hash(self.e_vote, self.e_id).hex() == self.receipt_hex
        except (ValueError, binascii.Error):
            return False

    def to_record(self) -> dict:
        return {
            "kind": "vote",
            "session_id": self.session_id,
            "e_vote_b64": self.e_vote_b64,
            "e_id_b64": self.e_id_b64,
            "receipt_hex": self.receipt_hex,
            "decrypted_vote": self.decrypted_vote,
            "valid": self.valid,
            "recorded_at": self.recorded_at,
        }

    @classmethod
    def from_record(cls, rec: dict) -> LedgerEntry:
        return cls(
            session_id=str(rec["session_id"]),
            e_vote_b64=str(rec["e_vote_b64"]),
            e_id_b64=str(rec["e_id_b64"]),
            receipt_hex=str(rec["receipt_hex"]),
            decrypted_vote=rec.get("decrypted_vote"),
            valid=bool(rec["valid"]),
            recorded_at=float(rec["recorded_at"]),
        )


def _parse_lines(data: bytes):
    """Yield ``(lineno, record | None)``; ``None`` marks an unreadable line."""
    for lineno, raw in enumerate(data.split(b"\n"), start=1):
        if not raw.strip():
            continue
        try:
            rec = orjson.loads(raw)
            if not isinstance(rec, dict) or rec.get("kind") not in ("vote", "audit"):
                raise ValueError("unknown record")
            if rec["kind"] == "vote":
                LedgerEntry.from_record(rec)
            yield lineno, rec
        except (ValueError, KeyError, TypeError):
            yield lineno, None


class Ledger:
    """Append-only JSONL ledger with a single serialised writer.

    Opening the file truncates an unterminated (torn) final line into
    ``<path>.quarantine``. Every append is fsynced before it returns.
    """

    def __init__(self, path: str | os.PathLike, fsync: bool = True) -> None:
        self.path = Path(path)
        self.fsync = fsync
        self._lock = threading.Lock()
        self._entries: dict[str, LedgerEntry] = {}
        self.corrupt_lines: list[int] = []
        self.quarantined: bytes | None = None
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._recover()
            self._fd = os.open(self.path, os.O_WRONLY | os.O_APPEND | os.O_CREAT, 0o644)
        except OSError as exc:
            raise LedgerError(f"ledger {self.path} not writable: {exc}") from exc

    def _recover(self) -> None:
        if not self.path.exists():
            return
        data = self.path.read_bytes()
        keep = len(data)
        if data and not data.endswith(b"\n"):
            keep = data.rfind(b"\n") + 1
        else:
            last_start = data.rfind(b"\n", 0, len(data) - 1) + 1
            tail = data[last_start:]
            if tail.strip() and next(_parse_lines(tail))[1] is None:
                keep = last_start
        if keep < len(data):
            self.quarantined = data[keep:]
            with open(f"{self.path}.quarantine", "ab") as q:
                q.write(self.quarantined.rstrip(b"\n") + b"\n")
                q.flush()
                os.fsync(q.fileno())
            with open(self.path, "r+b") as f:
                f.truncate(keep)
                f.flush()
                os.fsync(f.fileno())
            log.warning("quarantined torn ledger tail (%d bytes)", len(data) - keep)
            data = data[:keep]
        for lineno, rec in _parse_lines(data):
            if rec is None:
                self.corrupt_lines.append(lineno)
                log.warning("corrupt ledger line %d in %s", lineno, self.path)
            else:
                self._apply(rec)

    def _apply(self, rec: dict) -> None:
        if rec["kind"] == "vote":
            entry = LedgerEntry.from_record(rec)
            self._entries.setdefault(entry.session_id, entry)
        else:
            entry = self._entries.get(rec["session_id"])
            if entry is not None:
                entry.audit = {k: v for k, v in rec.items() if k not in ("kind", "session_id")}

    def _write(self, rec: dict) -> None:
        line = orjson.dumps(rec, option=orjson.OPT_SORT_KEYS | orjson.OPT_APPEND_NEWLINE)
        os.write(self._fd, line)
        if self.fsync:
            os.fsync(self._fd)

    def append_vote(self, entry: LedgerEntry) -> bool:
        """Durably append ``entry``; returns False (and writes nothing) for a known session."""
        with self._lock:
            if entry.session_id in self._entries:
                return False
            self._write(entry.to_record())
            self._entries[entry.session_id] = entry
            return True

    def append_audit(self, session_id: str, audit: dict) -> None:
        with self._lock:
            entry = self._entries.get(session_id)
            if entry is None:
                raise NotFound(f"no ledger entry for session {session_id}")
            self._write({"kind": "audit", "session_id": session_id, **audit})
            entry.audit = dict(audit)

    def get(self, session_id: str) -> LedgerEntry | None:
        return self._entries.get(session_id)

    def entries(self) -> list[LedgerEntry]:
        with self._lock:
            return list(self._entries.values())

    def __len__(self) -> int:
        return len(self._entries)

    def close(self) -> None:
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None


class _SealedIdentityKey:
    """Holds only a digest and length of ``K_id``; the bits are unrecoverable here."""

    __slots__ = ("_digest", "nbits")

    def __init__(self, bits) -> None:
        self._digest = key_digest_bits(bits)
        self.nbits = len(bits)

    def matches(self, bits) -> bool:
        bits = as_bits(bits)
        return len(bits) == self.nbits and key_digest_bits(bits) == self._digest

    def __repr__(self) -> str:
        return f"<sealed identity key, {self.nbits} bits>"


class KeyVault:
    """Per-session key store. Only ``K_vote`` can leave the vault."""

    def __init__(self) -> None:
        self._vote: dict[str, SymmetricKey] = {}
        self._sealed: dict[str, _SealedIdentityKey] = {}
        self._lock = threading.Lock()

    def deposit(self, session_id: str, sifted_bits, vote_bits: int, id_bits: int) -> None:
        bits = as_bits(sifted_bits)
        with self._lock:
            self._vote[session_id] = SymmetricKey(bits[:vote_bits].copy(), KeyOrigin(session_id, "vote"))
            self._sealed[session_id] = _SealedIdentityKey(bits[vote_bits : vote_bits + id_bits])

    def has(self, session_id: str) -> bool:
        return session_id in self._vote

    def vote_key(self, session_id: str) -> SymmetricKey:
        try:
            return self._vote[session_id]
        except KeyError:
            raise NotFound(f"no key for session {session_id}") from None

    def identity_key_matches(self, session_id: str, bits) -> bool | None:
        sealed = self._sealed.get(session_id)
        return None if sealed is None else sealed.matches(bits)

    def identity_key_bits(self, session_id: str) -> int | None:
        sealed = self._sealed.get(session_id)
        return None if sealed is None else sealed.nbits


@dataclass
class TallyResult:
    counts: dict[str, int] = field(default_factory=dict)
    invalid: int = 0
    total: int = 0
    verified: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def tally(ledger: Ledger | str | os.PathLike, candidates: tuple[str, ...] | None = None) -> TallyResult:
    """Count decrypted votes over a snapshot of the ledger file.

    Unreadable lines count as invalid. ``verified`` counts entries whose stored
    receipt reproduces from the stored ciphertexts.
    """
    path = ledger.path if isinstance(ledger, Ledger) else Path(ledger)
    data = path.read_bytes() if path.exists() else b""
    if data and not data.endswith(b"\n"):
        data = data[: data.rfind(b"\n") + 1]
    counts: Counter[str] = Counter({c: 0 for c in candidates or ()})
    result = TallyResult()
    seen: set[str] = set()
    for lineno, rec in _parse_lines(data):
        if rec is None:
            log.warning("tally: corrupt ledger line %d counted as invalid", lineno)
            result.invalid += 1
            result.total += 1
            continue
        if rec["kind"] != "vote" or rec["session_id"] in seen:
            continue
        seen.add(rec["session_id"])
        entry = LedgerEntry.from_record(rec)
        result.total += 1
        result.verified += entry.receipt_ok()
        if entry.valid and entry.decrypted_vote is not None:
            counts[entry.decrypted_vote] += 1
        else:
            result.invalid += 1
    result.counts = dict(counts)
    return result


@dataclass
class CheckReport:
    entries: int
    problems: list[str]
    corrupt_lines: list[int]
    quarantined_bytes: int

    @property
    def ok(self) -> bool:
        return not self.problems and not self.corrupt_lines


def ledger_check(path: str | os.PathLike) -> CheckReport:
    """Recompute every receipt from the stored ciphertexts."""
    ledger = Ledger(path)
    try:
        problems = [
            f"session {e.session_id}: stored receipt does not match ciphertexts"
            for e in ledger.entries()
            if not e.receipt_ok()
        ]
        return CheckReport(
            len(ledger), problems, list(ledger.corrupt_lines),
            len(ledger.quarantined or b""),
        )
    finally:
        ledger.close()


def audit_open(
    entry: LedgerEntry | None,
    k_id,
    *,
    ledger: Ledger | None = None,
    expected_bits: int | None = None,
    key_matches: bool | None = None,
) -> bytes:
    """Decrypt the sealed voter identity with the voter-supplied ``K_id``.

    A reveal that passes the structural checks but disagrees with the vault's
    sealed digest (``key_matches`` False) is still recorded, flagged for review.
    """
    if entry is None:
        raise NotFound("no ledger entry for this session")
    bits = as_bits(k_id)
    if len(bits) == 0:
        raise BadKey("empty identity key")
    if expected_bits is not None and len(bits) != expected_bits:
        raise BadKey(f"identity key must be {expected_bits} bits, got {len(bits)}")
    voter_id = xor_apply(entry.e_id, bits)
    if not 1 <= len(voter_id) <= MAX_FIELD_BYTES:
        raise BadKey("revealed identity fails length bounds")
    if ledger is not None:
        audit = {
            "revealed_voter_id_b64": base64.b64encode(voter_id).decode("ascii"),
            "revealed_at": time.time(),
            "needs_review": None if key_matches is None else not key_matches,
        }
        if audit["needs_review"]:
            log.warning("audit for %s: revealed key disagrees with sealed key", entry.session_id)
        ledger.append_audit(entry.session_id, audit)
    return voter_id


class CommitteeStore:
    """State the committee handler works against."""

    def __init__(self, config: ElectionConfig, ledger: Ledger, timer: StageTimer | None = None) -> None:
        self.config = config
        self.ledger = ledger
        self.vault = KeyVault()
        self.qkd_sessions: dict = {}
        self.timer = timer
        self._entropy = config.seed if config.seed is not None else int(np.random.SeedSequence().entropy)

    def session_rng(self, session_id: str, attempt) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(session_seed(self._entropy, session_id, attempt)))

    def record_vote(self, session_id, e_vote, e_id, receipt_hex, candidate, valid) -> bool:
        entry = LedgerEntry(
            session_id=session_id,
            e_vote_b64=base64.b64encode(e_vote).decode("ascii"),
            e_id_b64=base64.b64encode(e_id).decode("ascii"),
            receipt_hex=receipt_hex,
            decrypted_vote=candidate,
            valid=valid,
            recorded_at=time.time(),
        )
        if self.timer is None:
            return self.ledger.append_vote(entry)
        with self.timer.stage("ledger"):
            return self.ledger.append_vote(entry)


class CommitteeService:
    """Subscribes the committee to an election's topics on ``channel``."""

    def __init__(
        self,
        config: ElectionConfig,
        channel: Channel,
        ledger_path: str | os.PathLike,
        timer: StageTimer | None = None,
        fsync: bool = True,
    ) -> None:
        self.config = config
        self.channel = channel
        self.ledger = Ledger(ledger_path, fsync=fsync)
        self.store = CommitteeStore(config, self.ledger, timer)
        self._subs = []
        self._locks: dict[str, threading.Lock] = {}
        self._locks_guard = threading.Lock()
        self.dropped = 0

    def _session_lock(self, session_id: str) -> threading.Lock:
        with self._locks_guard:
            return self._locks.setdefault(session_id, threading.Lock())

    def handle(self, topic: str, envelope: Envelope) -> None:
        try:
            with self._session_lock(envelope.session_id):
                reply = committee_handle(envelope, self.store)
        except Exception:
            self.dropped += 1
            log.exception("dropping message %s on %s", envelope.msg_type, topic)
            return
        if reply is not None:
            self.channel.publish(reply_topic(reply), reply)

    def start(self) -> CommitteeService:
        self._subs = [self.channel.subscribe(f, self.handle) for f in committee_filters(self.config.election_id)]
        return self

    def stop(self) -> None:
        for sub in self._subs:
            self.channel.unsubscribe(sub)
        self._subs = []
        self.ledger.close()

    def __enter__(self) -> CommitteeService:
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


def serve(config: ElectionConfig, channel: Channel, ledger_path: str | os.PathLike, **kw) -> CommitteeService:
    """Start a committee service; raises :class:`LedgerError` if the ledger is unusable."""
    return CommitteeService(config, channel, ledger_path, **kw).start()

