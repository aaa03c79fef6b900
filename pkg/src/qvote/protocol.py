"""Voter and committee sides of the dual-key voting protocol.

Voter: QKD session, split the confirmed key into ``K_vote``/``K_id``, encrypt
both ballot fields, keep the local receipt, submit, compare against the
committee's receipt. Committee: mirror the QKD steps, decrypt only the vote,
persist the sealed identity ciphertext, answer with a receipt, and open the
identity only when the voter reveals ``K_id``.
"""

from __future__ import annotations

import base64
import binascii
import hashlib
import hmac
import logging
import threading
import time
import uuid
from contextlib import contextmanager, nullcontext
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable

import numpy as np

from . import qasm
from .bb84 import (
    CommitteeQkd,
    NoiseModel,
    QkdConfig,
    as_bases,
    as_bits,
    bases_to_symbols,
    bits_to_str,
    run_session,
)
from .crypto import Receipt, key_digest_bits, receipt_hash, split_key, xor_apply
from .errors import (
    BadKey,
    ChannelError,
    InvalidArgument,
    InvalidReceipt,
    NotFound,
    QasmParseError,
    SessionFailed,
)
from .transport import Channel, Envelope, Inbox, MsgType, topics

log = logging.getLogger(__name__)

MAX_FIELD_BYTES = 64
MAX_RAW_LENGTH = 4096


def _b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def _unb64(text: str) -> bytes:
    return base64.b64decode(text.encode("ascii"), validate=True)


@dataclass(frozen=True)
class Ballot:
    vote: bytes
    voter_id: bytes

    def __post_init__(self) -> None:
        for name in ("vote", "voter_id"):
            value = getattr(self, name)
            if isinstance(value, str):
                value = value.encode("utf-8")
                object.__setattr__(self, name, value)
            if not 1 <= len(value) <= MAX_FIELD_BYTES:
                raise InvalidArgument(f"{name} must be 1-{MAX_FIELD_BYTES} bytes")


@dataclass(frozen=True)
class ElectionConfig:
    election_id: str = "e1"
    candidates: tuple[str, ...] = ("A", "B")
    vote_key_bits: int = 4
    id_key_bits: int = 4
    noise: NoiseModel = field(default_factory=NoiseModel.uniform)
    shots: int = 10_000
    seed: int | None = None

    def __post_init__(self) -> None:
        if self.vote_key_bits < 1 or self.id_key_bits < 1:
            raise InvalidArgument("key lengths must be >= 1")
        object.__setattr__(self, "candidates", tuple(self.candidates))


@dataclass(frozen=True)
class VoterConfig:
    qkd: QkdConfig = field(default_factory=QkdConfig)
    vote_key_bits: int = 4
    id_key_bits: int = 4
    receipt_timeout: float = 10.0
    max_resizes: int = 2

    @property
    def key_bits(self) -> int:
        return self.vote_key_bits + self.id_key_bits


class State(str, Enum):
    INIT = "Init"
    QUANTUM_SENT = "QuantumSent"
    BASES_EXCHANGED = "BasesExchanged"
    KEY_CONFIRMED = "KeyConfirmed"
    VOTE_SENT = "VoteSent"
    VERIFIED = "Verified"
    FAILED = "Failed"


_ORDER = list(State)


@dataclass
class VoterState:
    """Voter-side record; serialisable so verification outlives the process."""

    election_id: str
    session_id: str | None = None
    state: State = State.INIT
    failure: str | None = None
    transcript: Any = None
    e_vote: bytes | None = None
    e_id: bytes | None = None
    local_receipt: Receipt | None = None
    remote_receipt: Receipt | None = None
    id_key: str | None = None
    history: list[State] = field(default_factory=lambda: [State.INIT])

    def advance(self, new: State) -> None:
        if self.state in (State.VERIFIED, State.FAILED):
            raise InvalidArgument(f"session already {self.state.value}")
        if new is not State.FAILED and _ORDER.index(new) < _ORDER.index(self.state):
            raise InvalidArgument(f"illegal transition {self.state.value} -> {new.value}")
        self.state = new
        self.history.append(new)

    def fail(self, reason: str) -> None:
        self.advance(State.FAILED)
        self.failure = reason

    def to_dict(self) -> dict:
        return {
            "election_id": self.election_id,
            "session_id": self.session_id,
            "state": self.state.value,
            "failure": self.failure,
            "e_vote_b64": None if self.e_vote is None else _b64(self.e_vote),
            "e_id_b64": None if self.e_id is None else _b64(self.e_id),
            "local_receipt": None if self.local_receipt is None else self.local_receipt.hex,
            "remote_receipt": None if self.remote_receipt is None else self.remote_receipt.hex,
            "id_key": self.id_key,
            "history": [s.value for s in self.history],
        }

    @classmethod
    def from_dict(cls, obj: dict) -> VoterState:
        sid = obj.get("session_id")

        def receipt(key):
            return None if obj.get(key) is None else Receipt.from_hex(obj[key], sid)

        return cls(
            election_id=obj["election_id"],
            session_id=sid,
            state=State(obj["state"]),
            failure=obj.get("failure"),
            e_vote=None if obj.get("e_vote_b64") is None else _unb64(obj["e_vote_b64"]),
            e_id=None if obj.get("e_id_b64") is None else _unb64(obj["e_id_b64"]),
            local_receipt=receipt("local_receipt"),
            remote_receipt=receipt("remote_receipt"),
            id_key=obj.get("id_key"),
            history=[State(s) for s in obj.get("history", [obj["state"]])],
        )


class StageTimer:
    """Accumulates wall time per named stage."""

    def __init__(self) -> None:
        self.totals: dict[str, float] = {}
        self._lock = threading.Lock()

    @contextmanager
    def stage(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            dt = time.perf_counter() - t0
            with self._lock:
                self.totals[name] = self.totals.get(name, 0.0) + dt


def _stage(timer: StageTimer | None, name: str):
    return nullcontext() if timer is None else timer.stage(name)


def new_session_id(rng: np.random.Generator) -> str:
    return str(uuid.UUID(bytes=rng.bytes(16), version=4))


def _as_receipt(value: Receipt | str | bytes) -> Receipt:
    if isinstance(value, Receipt):
        return value
    if isinstance(value, bytes):
        return Receipt(value)
    if isinstance(value, str):
        return Receipt.from_hex(value.strip().lower())
    raise InvalidReceipt(f"cannot read a receipt from {type(value).__name__}")


def verify_receipt(local: Receipt | str, remote: Receipt | str) -> bool:
    """Constant-time digest comparison; hex input is case-normalised."""
    return hmac.compare_digest(_as_receipt(local).digest, _as_receipt(remote).digest)


def voter_cast(
    ballot: Ballot,
    config: VoterConfig,
    channel: Channel,
    election_id: str,
    rng: np.random.Generator | None = None,
    timer: StageTimer | None = None,
) -> tuple[Receipt | None, VoterState]:
    """Cast one ballot end to end. Never raises for protocol failures.

    The returned state is ``Verified`` or ``Failed``; ``state.failure`` is one
    of ``qkd``, ``channel``, ``timeout``, ``receipt-mismatch`` or
    ``rejected:<reason>``.
    """
    if rng is None:
        rng = np.random.default_rng(config.qkd.rng_seed)
    state = VoterState(election_id)
    needed = config.key_bits
    raw = max(config.qkd.raw_length, 4 * needed)

    def on_qkd_state(step: str) -> None:
        target = State.QUANTUM_SENT if step == "quantum-sent" else State.BASES_EXCHANGED
        if _ORDER.index(target) > _ORDER.index(state.state):
            state.advance(target)

    transcript = None
    for _ in range(config.max_resizes + 1):
        state.session_id = new_session_id(rng)
        qkd = QkdConfig(
            raw_length=raw,
            shots=config.qkd.shots,
            min_sifted_bits=min(needed, raw),
            max_attempts=config.qkd.max_attempts,
            timeout=config.qkd.timeout,
        )
        try:
            with _stage(timer, "qkd"):
                transcript = run_session(qkd, channel, rng, election_id, state.session_id, on_qkd_state)
            break
        except SessionFailed as exc:
            if all(r == "short" for r in exc.reasons):
                raw *= 2
                continue
            state.fail("qkd")
            return None, state
        except ChannelError:
            state.fail("channel")
            return None, state
    if transcript is None:
        state.fail("qkd")
        return None, state
    state.transcript = transcript
    if state.state is State.QUANTUM_SENT:
        state.advance(State.BASES_EXCHANGED)
    state.advance(State.KEY_CONFIRMED)

    with _stage(timer, "encrypt"):
        k_vote, k_id = split_key(transcript.voter_key, config.vote_key_bits, config.id_key_bits, state.session_id)
        state.e_vote = k_vote.encrypt(ballot.vote)
        state.e_id = k_id.encrypt(ballot.voter_id)
        state.id_key = bits_to_str(k_id.bits)
        state.local_receipt = Receipt.of(state.e_vote, state.e_id, state.session_id)

    t = topics(election_id, state.session_id)
    with _stage(timer, "submit"), Inbox(channel, [t.receipt]) as inbox:
        channel.publish(
            t.vote,
            Envelope.make(election_id, state.session_id, MsgType.VOTE_SUBMIT, {
                "role": "voter",
                "e_vote": _b64(state.e_vote),
                "e_id": _b64(state.e_id),
            }),
        )
        state.advance(State.VOTE_SENT)
        try:
            reply = inbox.expect(
                lambda e: e.msg_type == MsgType.RECEIPT, config.receipt_timeout, "receipt"
            )
        except ChannelError:
            state.fail("timeout")
            return None, state
    return _conclude(state, reply)


def _conclude(state: VoterState, reply: Envelope) -> tuple[Receipt | None, VoterState]:
    status, reason = reply.payload.get("status"), reply.payload.get("reason")
    # A replay is rejected as a duplicate but still carries the ledger's receipt.
    replayed = status == "rejected" and reason == "duplicate"
    if (status != "ok" and not replayed) or "receipt" not in reply.payload:
        state.fail(f"rejected:{reason or 'unknown'}")
        return None, state
    try:
        state.remote_receipt = Receipt.from_hex(str(reply.payload["receipt"]).lower(), state.session_id)
    except InvalidReceipt:
        state.fail("receipt-mismatch")
        return None, state
    if verify_receipt(state.local_receipt, state.remote_receipt):
        state.advance(State.VERIFIED)
        return state.local_receipt, state
    state.fail("receipt-mismatch")
    return None, state


def requery_receipt(
    state: VoterState, channel: Channel, timeout: float = 10.0
) -> tuple[Receipt | None, VoterState]:
    """Resubmit the stored ciphertexts after a lost RECEIPT.

    The committee never records a session twice; it answers a replay with the
    receipt derived from its ledger, which is then checked as usual.
    """
    if state.e_vote is None or state.e_id is None or state.session_id is None:
        raise InvalidArgument("no submitted ballot to re-query")
    retry = VoterState(
        state.election_id,
        state.session_id,
        state=State.VOTE_SENT,
        transcript=state.transcript,
        e_vote=state.e_vote,
        e_id=state.e_id,
        local_receipt=state.local_receipt,
        id_key=state.id_key,
        history=[s for s in state.history if s is not State.FAILED],
    )
    t = topics(state.election_id, state.session_id)
    with Inbox(channel, [t.receipt]) as inbox:
        channel.publish(
            t.vote,
            Envelope.make(state.election_id, state.session_id, MsgType.VOTE_SUBMIT, {
                "role": "voter", "e_vote": _b64(state.e_vote), "e_id": _b64(state.e_id),
            }),
        )
        try:
            reply = inbox.expect(lambda e: e.msg_type == MsgType.RECEIPT, timeout, "receipt")
        except ChannelError:
            retry.fail("timeout")
            return None, retry
    return _conclude(retry, reply)


def reveal_identity_key(
    state: VoterState, channel: Channel, timeout: float = 10.0
) -> dict:
    """Send AUDIT_REVEAL with the voter's ``K_id`` and return the committee's answer."""
    if state.id_key is None or state.session_id is None:
        raise InvalidArgument("voter state holds no identity key")
    t = topics(state.election_id, state.session_id)
    with Inbox(channel, [t.audit]) as inbox:
        channel.publish(
            t.audit,
            Envelope.make(state.election_id, state.session_id, MsgType.AUDIT_REVEAL, {
                "role": "voter", "k_id": state.id_key,
            }),
        )
        reply = inbox.expect(
            lambda e: e.msg_type == MsgType.AUDIT_REVEAL and e.payload.get("role") == "committee",
            timeout,
            "audit answer",
        )
    return reply.payload


# ---------------------------------------------------------------- committee side


_REPLY_TOPIC = {
    MsgType.QKD_BASES_COMMITTEE: "bases_committee",
    MsgType.KEY_CONFIRM: "confirm",
    MsgType.KEY_RETRY: "confirm",
    MsgType.RECEIPT: "receipt",
    MsgType.AUDIT_REVEAL: "audit",
    MsgType.AUDIT_REQUEST: "audit",
}


def reply_topic(envelope: Envelope) -> str:
    return getattr(topics(envelope.election_id, envelope.session_id), _REPLY_TOPIC[envelope.msg_type])


@dataclass
class _QkdSession:
    attempts: dict[int, CommitteeQkd] = field(default_factory=dict)
    confirmed: bool = False


def committee_handle(msg: Envelope, store) -> Envelope | None:
    """Process one inbound message against ``store`` and return the reply, if any.

    ``store`` is a :class:`qvote.service.CommitteeStore`. Rejections come back
    as replies carrying ``status: "rejected"`` and a ``reason``.
    """
    if msg.payload.get("role") == "committee" or msg.election_id != store.config.election_id:
        return None
    handler = _HANDLERS.get(msg.msg_type)
    if handler is None:
        return None
    return handler(msg, store)


def _reply(msg: Envelope, msg_type: MsgType, **payload) -> Envelope:
    payload["role"] = "committee"
    return Envelope.make(msg.election_id, msg.session_id, msg_type, payload)


def _retry(msg: Envelope, attempt, reason: str) -> Envelope:
    return _reply(msg, MsgType.KEY_RETRY, attempt=attempt, reason=reason, status="rejected")


def _on_quantum(msg: Envelope, store) -> Envelope | None:
    attempt = msg.payload.get("attempt")
    sess = store.qkd_sessions.setdefault(msg.session_id, _QkdSession())
    if sess.confirmed or store.vault.has(msg.session_id) or store.ledger.get(msg.session_id):
        return _retry(msg, attempt, "session-closed")
    try:
        frame = qasm.parse_prep(_unb64(msg.payload["qasm"]).decode("utf-8"))
    except (KeyError, ValueError, binascii.Error, QasmParseError) as exc:
        log.warning("bad QKD frame for %s: %s", msg.session_id, exc)
        return _retry(msg, attempt, "bad-frame")
    if len(frame) > MAX_RAW_LENGTH:
        return _retry(msg, attempt, "frame-too-long")
    party = CommitteeQkd(store.config.noise, store.config.shots, store.session_rng(msg.session_id, attempt))
    bases = party.receive(frame)
    sess.attempts = {attempt: party}
    return _reply(msg, MsgType.QKD_BASES_COMMITTEE, attempt=attempt, bases=bases_to_symbols(bases))


def _attempt_state(msg: Envelope, store) -> CommitteeQkd | None:
    sess = store.qkd_sessions.get(msg.session_id)
    if sess is None:
        return None
    return sess.attempts.get(msg.payload.get("attempt"))


def _on_voter_bases(msg: Envelope, store) -> Envelope | None:
    party = _attempt_state(msg, store)
    if party is None:
        return _retry(msg, msg.payload.get("attempt"), "unknown-session")
    try:
        bases = as_bases(msg.payload["bases"])
        party.reconcile(bases)
    except (KeyError, InvalidArgument):
        return _retry(msg, msg.payload.get("attempt"), "bad-bases")
    return None


def _on_key_retry(msg: Envelope, store) -> Envelope | None:
    sess = store.qkd_sessions.get(msg.session_id)
    if sess is not None:
        sess.attempts.pop(msg.payload.get("attempt"), None)
    return None


def _on_key_confirm(msg: Envelope, store) -> Envelope | None:
    attempt = msg.payload.get("attempt")
    party = _attempt_state(msg, store)
    if party is None or party.key is None:
        return _retry(msg, attempt, "unknown-session")
    cfg = store.config
    key = party.key
    sess = store.qkd_sessions[msg.session_id]
    sess.attempts.pop(attempt, None)
    if len(key) < cfg.vote_key_bits + cfg.id_key_bits:
        return _retry(msg, attempt, "short")
    ours = key_digest_bits(key.bits).hex()
    if not hmac.compare_digest(ours, str(msg.payload.get("digest", ""))):
        return _retry(msg, attempt, "digest-mismatch")
    store.vault.deposit(msg.session_id, key.bits, cfg.vote_key_bits, cfg.id_key_bits)
    sess.confirmed = True
    sess.attempts.clear()
    return _reply(msg, MsgType.KEY_CONFIRM, attempt=attempt, status="ok")


def _on_vote(msg: Envelope, store) -> Envelope | None:
    def reject(reason: str, **extra) -> Envelope:
        return _reply(msg, MsgType.RECEIPT, status="rejected", reason=reason, **extra)

    existing = store.ledger.get(msg.session_id)
    if existing is not None:
        return reject("duplicate", receipt=existing.receipt_hex)
    if not store.vault.has(msg.session_id):
        return reject("unknown-session")
    try:
        e_vote = _unb64(msg.payload["e_vote"])
        e_id = _unb64(msg.payload["e_id"])
    except (KeyError, ValueError, binascii.Error):
        return reject("malformed")
    if not (1 <= len(e_vote) <= MAX_FIELD_BYTES and 1 <= len(e_id) <= MAX_FIELD_BYTES):
        return reject("malformed")
    vote = xor_apply(e_vote, store.vault.vote_key(msg.session_id))
    try:
        candidate = vote.decode("utf-8")
    except UnicodeDecodeError:
        candidate = None
    valid = candidate in store.config.candidates
    digest = receipt_hash(e_vote, e_id).hex()
    store.record_vote(msg.session_id, e_vote, e_id, digest, candidate if valid else None, valid)
    store.qkd_sessions.pop(msg.session_id, None)
    return _reply(msg, MsgType.RECEIPT, status="ok", receipt=digest)


def _on_audit_reveal(msg: Envelope, store) -> Envelope | None:
    from .service import audit_open

    def answer(status: str, **extra) -> Envelope:
        return _reply(msg, MsgType.AUDIT_REVEAL, status=status, **extra)

    entry = store.ledger.get(msg.session_id)
    if entry is None:
        return answer("rejected", reason="not-found")
    try:
        k_id = as_bits(str(msg.payload.get("k_id", "")))
        audit_open(
            entry,
            k_id,
            ledger=store.ledger,
            expected_bits=store.config.id_key_bits,
            key_matches=store.vault.identity_key_matches(msg.session_id, k_id),
        )
    except (BadKey, InvalidArgument):
        return answer("rejected", reason="bad-key")
    except NotFound:
        return answer("rejected", reason="not-found")
    audit = store.ledger.get(msg.session_id).audit
    return answer("ok", needs_review=audit.get("needs_review"))


_HANDLERS: dict[MsgType, Callable[[Envelope, Any], Envelope | None]] = {
    MsgType.QKD_QUANTUM: _on_quantum,
    MsgType.QKD_BASES_VOTER: _on_voter_bases,
    MsgType.KEY_RETRY: _on_key_retry,
    MsgType.KEY_CONFIRM: _on_key_confirm,
    MsgType.VOTE_SUBMIT: _on_vote,
    MsgType.AUDIT_REVEAL: _on_audit_reveal,
}


def session_seed(seed_entropy: int, session_id: str, attempt) -> int:
    h = hashlib.sha256(f"{seed_entropy}/{session_id}/{attempt}".encode()).digest()
    return int.from_bytes(h[:16], "big")
