"""Simulated BB84 key exchange between a voter and the election committee.

Bits and bases are carried as 1-D ``uint8`` numpy arrays. A basis value of
0 is rectilinear, 1 is diagonal. The simulation is classical: a qubit
measured in its preparation basis returns the transmitted bit, a qubit
measured in the other basis returns a uniformly random bit.
"""

from __future__ import annotations

import base64
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .errors import InvalidArgument, SessionFailed

BitString = np.ndarray


class Basis(IntEnum):
    RECTILINEAR = 0
    DIAGONAL = 1

    @property
    def symbol(self) -> str:
        return "R" if self is Basis.RECTILINEAR else "D"

    @classmethod
    def from_symbol(cls, symbol: str) -> Basis:
        try:
            return {"R": cls.RECTILINEAR, "D": cls.DIAGONAL}[symbol]
        except KeyError:
            raise InvalidArgument(f"unknown basis symbol {symbol!r}") from None


class QubitPrep(NamedTuple):
    bit: int
    basis: Basis


def as_bits(bits: str | Sequence[int] | np.ndarray) -> BitString:
    """Coerce ``"1011"``, ``[1, 0, 1, 1]`` or an array into a uint8 bit array."""
    if isinstance(bits, str):
        if bits.strip("01"):
            raise InvalidArgument(f"not a bit string: {bits!r}")
        return np.frombuffer(bits.encode("ascii"), dtype=np.uint8) - ord("0")
    if isinstance(bits, np.ndarray) and bits.dtype == np.uint8 and bits.ndim == 1:
        if bits.tobytes().strip(b"\x00\x01"):
            raise InvalidArgument("bits must be 0 or 1")
        return bits
    arr = np.asarray(bits, dtype=np.int64).reshape(-1)
    if arr.size and (arr.min() < 0 or arr.max() > 1):
        raise InvalidArgument("bits must be 0 or 1")
    return arr.astype(np.uint8)


def bits_to_str(bits: BitString) -> str:
    return (np.asarray(bits, dtype=np.uint8) + ord("0")).tobytes().decode("ascii")


def as_bases(bases: str | Sequence[Basis | str | int] | np.ndarray) -> np.ndarray:
    """Coerce bases given as ``"RD.."``, symbols, enums or ints into a uint8 array."""
    if isinstance(bases, np.ndarray):
        arr = bases.reshape(-1)
        if arr.dtype == np.uint8:
            if arr.tobytes().strip(b"\x00\x01"):
                raise InvalidArgument("basis values must be 0 (R) or 1 (D)")
            return arr
        arr = arr.astype(np.int64)
    elif isinstance(bases, str) or (bases and isinstance(bases[0], str)):
        text = "".join(bases)
        if text.strip("RD"):
            raise InvalidArgument(f"unknown basis symbol in {text[:16]!r}")
        return (np.frombuffer(text.encode("ascii"), dtype=np.uint8) == ord("D")).astype(np.uint8)
    else:
        arr = np.array([int(b) for b in bases], dtype=np.int64)
    if arr.size and (arr.min() < 0 or arr.max() > 1):
        raise InvalidArgument("basis values must be 0 (R) or 1 (D)")
    return arr.astype(np.uint8, copy=False)


def bases_to_symbols(bases: np.ndarray) -> list[str]:
    return ["D" if b else "R" for b in np.asarray(bases).tolist()]


@dataclass(frozen=True, eq=False)
class PreparedFrame:
    """The voter's qubit preparations, one (bit, basis) pair per raw key position."""

    bits: BitString
    bases: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "bits", as_bits(self.bits))
        object.__setattr__(self, "bases", as_bases(self.bases))
        if len(self.bits) != len(self.bases):
            raise InvalidArgument(
                f"{len(self.bits)} bits but {len(self.bases)} bases in frame"
            )
        if len(self.bits) == 0:
            raise InvalidArgument("frame must hold at least one qubit")

    @classmethod
    def from_preps(cls, preps: Sequence[tuple[int, Basis | int]]) -> PreparedFrame:
        return cls(
            np.array([p[0] for p in preps], dtype=np.int64),
            np.array([int(p[1]) for p in preps], dtype=np.int64),
        )

    @property
    def preps(self) -> list[QubitPrep]:
        return [QubitPrep(int(b), Basis(int(s))) for b, s in zip(self.bits, self.bases)]

    def __len__(self) -> int:
        return len(self.bits)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PreparedFrame):
            return NotImplemented
        return np.array_equal(self.bits, other.bits) and np.array_equal(
            self.bases, other.bases
        )

    def __repr__(self) -> str:
        return f"PreparedFrame({bits_to_str(self.bits)!r}, {''.join(bases_to_symbols(self.bases))!r})"


@dataclass(frozen=True)
class NoiseModel:
    """Bit-flip channel whose flip probability is drawn from U(low, high) per session.

    ``low == high`` gives a fixed flip probability. With ``eavesdropper`` set,
    an intercept-resend attacker sits on the line ahead of the noise.
    """

    low: float = 0.0
    high: float = 0.0
    eavesdropper: bool = False

    def __post_init__(self) -> None:
        if not (0.0 <= self.low <= self.high <= 1.0):
            raise InvalidArgument(f"need 0 <= low <= high <= 1, got {self.low}, {self.high}")

    @classmethod
    def fixed(cls, p: float, eavesdropper: bool = False) -> NoiseModel:
        return cls(p, p, eavesdropper)

    @classmethod
    def uniform(cls, high: float = 0.2, eavesdropper: bool = False) -> NoiseModel:
        return cls(0.0, high, eavesdropper)

    @property
    def is_fixed(self) -> bool:
        return self.low == self.high

    def draw(self, rng: np.random.Generator, size: int | None = None):
        if self.is_fixed:
            return self.low if size is None else np.full(size, self.low)
        return rng.uniform(self.low, self.high, size)

    def to_dict(self) -> dict:
        return {"low": self.low, "high": self.high, "eavesdropper": self.eavesdropper}


@dataclass(frozen=True)
class QkdConfig:
    raw_length: int = 32
    shots: int = 10_000
    rng_seed: int | None = None
    min_sifted_bits: int = 1
    max_attempts: int = 3
    timeout: float = 10.0

    def __post_init__(self) -> None:
        if self.raw_length < 1:
            raise InvalidArgument("raw_length must be >= 1")
        if self.shots < 1:
            raise InvalidArgument("shots must be >= 1")
        if not 0 <= self.min_sifted_bits <= self.raw_length:
            raise InvalidArgument("min_sifted_bits must lie in [0, raw_length]")
        if self.max_attempts < 1:
            raise InvalidArgument("max_attempts must be >= 1")


@dataclass(frozen=True, eq=False)
class SiftedKey:
    bits: BitString
    positions: np.ndarray

    def __len__(self) -> int:
        return len(self.bits)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SiftedKey):
            return NotImplemented
        return np.array_equal(self.bits, other.bits) and np.array_equal(
            self.positions, other.positions
        )

    def __repr__(self) -> str:
        return f"SiftedKey({bits_to_str(self.bits)!r}, positions={self.positions.tolist()})"


@dataclass(eq=False)
class SessionTranscript:
    """Per-session QKD state of the final attempt.

    Over a real channel the voter never learns the committee's measurements,
    sifted key or noise draw; those fields stay ``None`` in the voter's copy.
    """

    voter_bits: BitString
    voter_bases: np.ndarray
    committee_bases: np.ndarray
    voter_key: SiftedKey
    attempts: int
    committee_measurements: BitString | None = None
    committee_key: SiftedKey | None = None
    noise_draw: float | None = None
    session_id: str | None = None
    failures: list[str] = field(default_factory=list)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SessionTranscript):
            return NotImplemented

        def same(a, b):
            if a is None or b is None:
                return a is b
            if isinstance(a, np.ndarray):
                return np.array_equal(a, b)
            return a == b

        return all(
            same(getattr(self, f), getattr(other, f))
            for f in (
                "voter_bits", "voter_bases", "committee_bases", "voter_key", "attempts",
                "committee_measurements", "committee_key", "noise_draw", "session_id",
                "failures",
            )
        )


def _check_n(n: int) -> None:
    if not isinstance(n, (int, np.integer)) or isinstance(n, bool) or n < 1:
        raise InvalidArgument(f"length must be a positive integer, got {n!r}")


def random_bits(n: int, rng: np.random.Generator) -> BitString:
    _check_n(n)
    return rng.integers(0, 2, size=n, dtype=np.uint8)


def random_bases(n: int, rng: np.random.Generator) -> np.ndarray:
    _check_n(n)
    return rng.integers(0, 2, size=n, dtype=np.uint8)


def prepare_frame(bits, bases) -> PreparedFrame:
    return PreparedFrame(bits, bases)


def _majority_of_random_shots(count: int, shots: int, rng: np.random.Generator) -> BitString:
    # Majority of `shots` fair coin flips; Binomial(shots, 1/2) is the same law.
    if count == 0:
        return np.zeros(0, dtype=np.uint8)
    if shots == 1:
        return rng.integers(0, 2, size=count, dtype=np.uint8)
    ones = rng.binomial(shots, 0.5, size=count)
    out = (2 * ones > shots).astype(np.uint8)
    ties = 2 * ones == shots
    if ties.any():
        out[ties] = rng.integers(0, 2, size=int(ties.sum()), dtype=np.uint8)
    return out


def measure_frame(
    frame: PreparedFrame, bases, shots: int, rng: np.random.Generator
) -> BitString:
    """Measure every qubit of ``frame`` in ``bases``, aggregating ``shots`` trials by majority."""
    bases = as_bases(bases)
    if len(bases) != len(frame):
        raise InvalidArgument(f"{len(bases)} measurement bases for {len(frame)} qubits")
    if shots < 1:
        raise InvalidArgument("shots must be >= 1")
    out = frame.bits.copy()
    mismatch = bases != frame.bases
    out[mismatch] = _majority_of_random_shots(int(mismatch.sum()), shots, rng)
    return out


def apply_channel(
    frame: PreparedFrame, noise: NoiseModel, rng: np.random.Generator, p: float | None = None
) -> PreparedFrame:
    """Send ``frame`` through the quantum channel.

    ``p`` overrides the flip probability; otherwise a fixed-noise model uses its
    value and a ranged model draws one.
    """
    if p is None:
        p = noise.draw(rng)
    if noise.eavesdropper:
        eve_bases = random_bases(len(frame), rng)
        frame = PreparedFrame(measure_frame(frame, eve_bases, 1, rng), eve_bases)
    if p <= 0.0:
        return frame
    if p >= 1.0:
        return PreparedFrame(frame.bits ^ 1, frame.bases)
    flips = (rng.random(len(frame)) < p).astype(np.uint8)
    return PreparedFrame(frame.bits ^ flips, frame.bases)


def sift(my_bases, their_bases, my_bits) -> SiftedKey:
    my_bases = as_bases(my_bases)
    their_bases = as_bases(their_bases)
    my_bits = as_bits(my_bits)
    if not len(my_bases) == len(their_bases) == len(my_bits):
        raise InvalidArgument(
            f"length mismatch: {len(my_bases)} / {len(their_bases)} bases, {len(my_bits)} bits"
        )
    positions = np.flatnonzero(my_bases == their_bases)
    return SiftedKey(my_bits[positions], positions)


class VoterQkd:
    """Voter half of one QKD attempt: steps 1-3, then sifting after the announcements."""

    def __init__(self, raw_length: int, rng: np.random.Generator) -> None:
        self.bits = random_bits(raw_length, rng)
        self.bases = random_bases(raw_length, rng)
        self.frame = prepare_frame(self.bits, self.bases)
        self.committee_bases: np.ndarray | None = None
        self.key: SiftedKey | None = None

    def reconcile(self, committee_bases) -> SiftedKey:
        self.committee_bases = as_bases(committee_bases)
        self.key = sift(self.bases, self.committee_bases, self.bits)
        return self.key


class CommitteeQkd:
    """Committee half of one QKD attempt: noisy reception, measurement, sifting."""

    def __init__(self, noise: NoiseModel, shots: int, rng: np.random.Generator) -> None:
        self.noise = noise
        self.shots = shots
        self.rng = rng
        self.noise_draw: float | None = None
        self.bases: np.ndarray | None = None
        self.measurements: BitString | None = None
        self.key: SiftedKey | None = None

    def receive(self, frame: PreparedFrame) -> np.ndarray:
        self.noise_draw = float(self.noise.draw(self.rng))
        received = apply_channel(frame, self.noise, self.rng, p=self.noise_draw)
        self.bases = random_bases(len(frame), self.rng)
        self.measurements = measure_frame(received, self.bases, self.shots, self.rng)
        return self.bases

    def reconcile(self, voter_bases) -> SiftedKey:
        if self.bases is None:
            raise InvalidArgument("no frame received yet")
        self.key = sift(self.bases, voter_bases, self.measurements)
        return self.key


def _transcript(voter: VoterQkd, committee: CommitteeQkd | None, attempts: int, **kw) -> SessionTranscript:
    return SessionTranscript(
        voter_bits=voter.bits,
        voter_bases=voter.bases,
        committee_bases=voter.committee_bases,
        voter_key=voter.key,
        attempts=attempts,
        committee_measurements=None if committee is None else committee.measurements,
        committee_key=None if committee is None else committee.key,
        noise_draw=None if committee is None else committee.noise_draw,
        **kw,
    )


def simulate_session(
    config: QkdConfig, noise: NoiseModel, rng: np.random.Generator | None = None
) -> SessionTranscript:
    """Run both parties in-process, with key confirmation and retries.

    Raises :class:`SessionFailed` once ``config.max_attempts`` is exhausted.
    """
    from .crypto import key_digest_bits

    if rng is None:
        rng = np.random.default_rng(config.rng_seed)
    failures: list[str] = []
    for attempt in range(1, config.max_attempts + 1):
        voter = VoterQkd(config.raw_length, rng)
        committee = CommitteeQkd(noise, config.shots, rng)
        committee_bases = committee.receive(voter.frame)
        key = voter.reconcile(committee_bases)
        committee.reconcile(voter.bases)
        if len(key) < max(config.min_sifted_bits, 1):
            failures.append("short")
            continue
        if key_digest_bits(key.bits) != key_digest_bits(committee.key.bits):
            failures.append("digest-mismatch")
            continue
        return _transcript(voter, committee, attempt, failures=failures)
    raise SessionFailed(config.max_attempts, failures)


def run_session(
    config: QkdConfig,
    channel,
    rng: np.random.Generator,
    election_id: str,
    session_id: str,
    on_state: Callable[[str], None] | None = None,
) -> SessionTranscript:
    """Voter side of a QKD session against a committee listening on ``channel``.

    Each attempt sends the frame as a QASM document, exchanges basis
    announcements and confirms the sifted key by digest. Short sifts and
    digest mismatches start a fresh attempt; after ``config.max_attempts``
    failures :class:`SessionFailed` is raised. Missing replies raise
    :class:`~qvote.errors.ChannelError`. ``on_state`` is told ``"quantum-sent"``
    and ``"bases-exchanged"`` as each attempt progresses.
    """
    from . import qasm
    from .crypto import key_digest_bits
    from .transport import Envelope, Inbox, MsgType, topics

    t = topics(election_id, session_id)
    failures: list[str] = []
    with Inbox(channel, [t.bases_committee, t.confirm]) as inbox:
        for attempt in range(1, config.max_attempts + 1):
            voter = VoterQkd(config.raw_length, rng)
            doc = qasm.emit_prep(voter.frame)
            channel.publish(
                t.quantum,
                Envelope.make(election_id, session_id, MsgType.QKD_QUANTUM, {
                    "role": "voter",
                    "attempt": attempt,
                    "qasm": base64.b64encode(doc.encode("utf-8")).decode("ascii"),
                }),
            )
            if on_state:
                on_state("quantum-sent")
            reply = inbox.expect(
                lambda e: e.msg_type == MsgType.QKD_BASES_COMMITTEE
                and e.payload.get("attempt") == attempt,
                config.timeout,
                "committee bases",
            )
            key = voter.reconcile(as_bases(reply.payload["bases"]))
            channel.publish(
                t.bases_voter,
                Envelope.make(election_id, session_id, MsgType.QKD_BASES_VOTER, {
                    "role": "voter",
                    "attempt": attempt,
                    "bases": bases_to_symbols(voter.bases),
                }),
            )
            if on_state:
                on_state("bases-exchanged")
            if len(key) < max(config.min_sifted_bits, 1):
                failures.append("short")
                channel.publish(
                    t.confirm,
                    Envelope.make(election_id, session_id, MsgType.KEY_RETRY, {
                        "role": "voter", "attempt": attempt, "reason": "short",
                    }),
                )
                continue
            channel.publish(
                t.confirm,
                Envelope.make(election_id, session_id, MsgType.KEY_CONFIRM, {
                    "role": "voter",
                    "attempt": attempt,
                    "digest": key_digest_bits(key.bits).hex(),
                    "sifted_bits": len(key),
                }),
            )
            answer = inbox.expect(
                lambda e: e.payload.get("role") == "committee"
                and e.payload.get("attempt") == attempt
                and e.msg_type in (MsgType.KEY_CONFIRM, MsgType.KEY_RETRY),
                config.timeout,
                "key confirmation",
            )
            if answer.msg_type == MsgType.KEY_CONFIRM:
                return _transcript(voter, None, attempt, session_id=session_id, failures=failures)
            failures.append(answer.payload.get("reason", "digest-mismatch"))
    raise SessionFailed(config.max_attempts, failures)


def simulate_batch(
    raw_length: int,
    trials: int,
    noise: NoiseModel,
    rng: np.random.Generator,
    shots: int = 1,
    masks: bool = False,
) -> dict[str, np.ndarray]:
    """Vectorised single-attempt sessions for statistics.

    Returns per-trial ``sifted`` lengths, ``errors`` (sifted positions where the
    committee's measurement differs from the voter's bit) and the ``p`` drawn.
    With ``masks`` the per-position ``matched`` and ``wrong`` arrays are added.
    """
    _check_n(raw_length)
    _check_n(trials)
    shape = (trials, raw_length)
    bits = rng.integers(0, 2, size=shape, dtype=np.uint8)
    vbases = rng.integers(0, 2, size=shape, dtype=np.uint8)
    cbases = rng.integers(0, 2, size=shape, dtype=np.uint8)
    p = np.asarray(noise.draw(rng, trials), dtype=float)
    sent_bits, sent_bases = bits, vbases
    if noise.eavesdropper:
        eve = rng.integers(0, 2, size=shape, dtype=np.uint8)
        guess = rng.integers(0, 2, size=shape, dtype=np.uint8)
        sent_bits = np.where(eve == vbases, bits, guess).astype(np.uint8)
        sent_bases = eve
    flips = (rng.random(shape) < p[:, None]).astype(np.uint8)
    received = sent_bits ^ flips
    mismatch = cbases != sent_bases
    random_out = _majority_of_random_shots(trials * raw_length, shots, rng).reshape(shape)
    measured = np.where(mismatch, random_out, received)
    matched = vbases == cbases
    wrong = matched & (measured != bits)
    out = {"sifted": matched.sum(axis=1), "errors": wrong.sum(axis=1), "p": p}
    if masks:
        out["matched"] = matched
        out["wrong"] = wrong
    return out
