"""Throughput and key-size stability benchmarks, with a closed-form oracle.

A QKD attempt is *stable* when its sifted key is non-empty and every sifted
bit agrees between the parties, so the key-confirmation digest matches on the
first try. The sweep reports two readings of "key size":

* raw length ``n``: ``n`` qubits are sent and the whole sifted key is used;
* sifted length ``m``: ``4m`` qubits are sent (the voter's sizing rule) and the
  first ``m`` sifted bits form the key, so the attempt is stable when at least
  ``m`` bits survive sifting and those ``m`` are error-free.
"""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import tempfile
import threading
import time
from dataclasses import asdict, dataclass, field
from math import comb
from pathlib import Path

import numpy as np

from .bb84 import NoiseModel, simulate_batch
from .errors import InvalidArgument
from .protocol import Ballot, ElectionConfig, StageTimer, State, VoterConfig, voter_cast
from .service import serve
from .transport import LoopbackChannel

log = logging.getLogger(__name__)

# Published single-machine figure (about 1e-4 s per vote), reported beside measurements.
REFERENCE_VOTES_PER_SEC = 10_000.0
DEFAULT_SIZES = (2, 4, 8, 16, 32)
_TRIAL_CHUNK = 20_000


# ------------------------------------------------------------------ analytic oracle


def _survival(noise: NoiseModel) -> tuple[float, float]:
    """Per-sifted-bit survival probability as ``a - b*p`` for the channel's flip rate ``p``."""
    # Intercept-resend: half the sifted bits were re-prepared in the wrong basis
    # and come out random, so a bit survives with 1/2*(1-p) + 1/2*1/2.
    return (0.75, 0.5) if noise.eavesdropper else (1.0, 1.0)


def expected_bit_survival(k: int, noise: NoiseModel) -> float:
    """``E_p[q^k]`` where ``q`` is the chance a sifted bit arrives intact."""
    if k < 0:
        raise InvalidArgument("k must be >= 0")
    a, b = _survival(noise)
    lo, hi = noise.low, noise.high
    if noise.is_fixed:
        return (a - b * lo) ** k
    return ((a - b * lo) ** (k + 1) - (a - b * hi) ** (k + 1)) / (b * (k + 1) * (hi - lo))


def analytic_success(n: int, noise: NoiseModel) -> float:
    """Probability that one attempt at raw length ``n`` sifts a non-empty, error-free key."""
    if n < 1:
        raise InvalidArgument("raw length must be >= 1")
    return sum(comb(n, k) * 0.5**n * expected_bit_survival(k, noise) for k in range(1, n + 1))


def analytic_sifted_success(m: int, noise: NoiseModel, raw_length: int | None = None) -> float:
    """Probability that ``raw_length`` qubits (default ``4m``) sift at least ``m`` bits, the first ``m`` intact."""
    if m < 1:
        raise InvalidArgument("sifted length must be >= 1")
    n = 4 * m if raw_length is None else raw_length
    enough = sum(comb(n, k) for k in range(m, n + 1)) * 0.5**n
    return enough * expected_bit_survival(m, noise)


# ------------------------------------------------------------------ key-size sweep


@dataclass
class SweepPoint:
    size: int
    interpretation: str  # "raw" or "sifted"
    raw_length: int
    trials: int
    first_attempt_success_rate: float
    mean_attempts: float
    mean_sifted_bits: float
    end_to_end_vote_accuracy: float
    analytic_success: float

    @property
    def oracle_gap(self) -> float:
        return abs(self.first_attempt_success_rate - self.analytic_success)


@dataclass
class SweepReport:
    noise: dict
    trials: int
    max_attempts: int
    shots: int
    seed: int | None
    points: list[SweepPoint] = field(default_factory=list)

    def point(self, size: int, interpretation: str = "raw") -> SweepPoint:
        for p in self.points:
            if p.size == size and p.interpretation == interpretation:
                return p
        raise KeyError((size, interpretation))

    def to_dict(self) -> dict:
        d = asdict(self)
        for row, p in zip(d["points"], self.points):
            row["oracle_gap"] = p.oracle_gap
        return d

    def to_csv(self) -> str:
        buf = io.StringIO()
        rows = self.to_dict()["points"]
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]) if rows else ["size"], lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
        return buf.getvalue()

    def to_table(self) -> str:
        head = ("interp", "size", "raw", "trials", "stable", "analytic", "attempts", "sifted", "e2e")
        rows = [
            (
                p.interpretation, str(p.size), str(p.raw_length), str(p.trials),
                f"{p.first_attempt_success_rate:.4f}", f"{p.analytic_success:.4f}",
                f"{p.mean_attempts:.3f}", f"{p.mean_sifted_bits:.2f}", f"{p.end_to_end_vote_accuracy:.4f}",
            )
            for p in self.points
        ]
        return _table(head, rows)


def _table(head: tuple[str, ...], rows: list[tuple[str, ...]]) -> str:
    widths = [max(len(r[i]) for r in [head, *rows]) for i in range(len(head))]
    fmt = "  ".join(f"{{:>{w}}}" for w in widths)
    return "\n".join(fmt.format(*r) for r in [head, *rows])


def _stable_attempts(size: int, interpretation: str, trials: int, noise, rng, shots: int):
    """One attempt per trial: ``(stable, sifted)`` arrays."""
    if interpretation == "raw":
        out = simulate_batch(size, trials, noise, rng, shots=shots)
        return (out["sifted"] > 0) & (out["errors"] == 0), out["sifted"]
    out = simulate_batch(4 * size, trials, noise, rng, shots=shots, masks=True)
    matched, wrong = out["matched"], out["wrong"]
    # Errors among the first `size` sifted positions only.
    rank = np.cumsum(matched, axis=1)
    early_errors = (wrong & (rank <= size)).sum(axis=1)
    return (out["sifted"] >= size) & (early_errors == 0), out["sifted"]


def _sweep_point(size, interpretation, trials, noise, rng, shots, max_attempts) -> SweepPoint:
    first = np.zeros(trials, dtype=bool)
    done = np.zeros(trials, dtype=bool)
    attempts = np.zeros(trials, dtype=np.int64)
    sifted_first = np.zeros(trials, dtype=np.int64)
    for lo in range(0, trials, _TRIAL_CHUNK):
        hi = min(trials, lo + _TRIAL_CHUNK)
        pending = np.ones(hi - lo, dtype=bool)
        used = np.zeros(hi - lo, dtype=np.int64)
        for attempt in range(1, max_attempts + 1):
            stable, sifted = _stable_attempts(size, interpretation, hi - lo, noise, rng, shots)
            if attempt == 1:
                first[lo:hi] = stable
                sifted_first[lo:hi] = sifted
            used[pending] = attempt
            pending &= ~stable
        attempts[lo:hi] = used
        done[lo:hi] = ~pending
    oracle = analytic_success(size, noise) if interpretation == "raw" else analytic_sifted_success(size, noise)
    return SweepPoint(
        size=size,
        interpretation=interpretation,
        raw_length=size if interpretation == "raw" else 4 * size,
        trials=trials,
        first_attempt_success_rate=float(first.mean()),
        mean_attempts=float(attempts.mean()),
        mean_sifted_bits=float(sifted_first.mean()),
        end_to_end_vote_accuracy=float(done.mean()),
        analytic_success=oracle,
    )


def key_size_sweep(
    sizes=DEFAULT_SIZES,
    trials: int = 100_000,
    noise: NoiseModel | None = None,
    seed: int | None = 0,
    *,
    max_attempts: int = 3,
    shots: int = 1,
    interpretations: tuple[str, ...] = ("raw", "sifted"),
) -> SweepReport:
    """Monte Carlo stability per key size under ``noise`` (default ``p ~ U(0, 0.2)``).

    ``end_to_end_vote_accuracy`` is the share of trials that confirm a key
    within ``max_attempts``; a confirmed key always carries the vote intact
    because digest confirmation rejects any disagreement. Mismatched-basis
    outcomes are discarded by sifting, so ``shots=1`` gives the same statistics
    as the protocol default at a fraction of the cost.
    """
    if trials < 1:
        raise InvalidArgument("trials must be >= 1")
    if max_attempts < 1:
        raise InvalidArgument("max_attempts must be >= 1")
    noise = NoiseModel.uniform() if noise is None else noise
    unknown = set(interpretations) - {"raw", "sifted"}
    if unknown:
        raise InvalidArgument(f"unknown interpretation(s): {sorted(unknown)}")
    sizes = sorted({int(n) for n in sizes})
    if not sizes or sizes[0] < 1:
        raise InvalidArgument("sizes must be positive integers")
    log.info("key_size_sweep seed=%s trials=%d sizes=%s", seed, trials, sizes)
    rng = np.random.default_rng(seed)
    report = SweepReport(noise.to_dict(), trials, max_attempts, shots, seed)
    for interpretation in interpretations:
        for n in sizes:
            report.points.append(_sweep_point(n, interpretation, trials, noise, rng, shots, max_attempts))
    return report


# ------------------------------------------------------------------ throughput


STAGES = ("qkd", "encrypt", "transport", "ledger")


@dataclass
class ThroughputReport:
    votes: int
    wall_time: float
    votes_per_sec: float
    stages: dict[str, float]
    verified: int
    failed: int
    workers: int
    seed: int | None
    outcome_digest: str
    reference_votes_per_sec: float = REFERENCE_VOTES_PER_SEC

    @property
    def seconds_per_vote(self) -> float:
        return self.wall_time / self.votes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seconds_per_vote"] = self.seconds_per_vote
        return d

    def to_table(self) -> str:
        rows = [
            ("votes", str(self.votes)),
            ("workers", str(self.workers)),
            ("wall time (s)", f"{self.wall_time:.3f}"),
            ("votes/sec", f"{self.votes_per_sec:.1f}"),
            ("reference votes/sec", f"{self.reference_votes_per_sec:.0f}"),
            ("verified", str(self.verified)),
            ("failed", str(self.failed)),
            *((f"{name} (s)", f"{self.stages.get(name, 0.0):.3f}") for name in STAGES),
        ]
        return _table(("metric", "value"), rows)


def _run_worker(worker: int, n_votes: int, seed: int | None, directory: Path, fsync: bool, candidates):
    timer = StageTimer()
    channel = LoopbackChannel()
    election = ElectionConfig(
        noise=NoiseModel.fixed(0.0),
        seed=None if seed is None else seed * 1_000 + worker,
        candidates=candidates,
    )
    rng = np.random.default_rng(None if seed is None else [seed, worker])
    voter_cfg = VoterConfig()
    choices = rng.integers(0, len(candidates), size=n_votes)
    outcomes: list[tuple[int, str, str]] = []
    with serve(election, channel, directory / f"ledger-{worker}.jsonl", timer=timer, fsync=fsync):
        for i in range(n_votes):
            ballot = Ballot(candidates[choices[i]], f"w{worker}-v{i}")
            receipt, state = voter_cast(ballot, voter_cfg, channel, election.election_id, rng, timer=timer)
            outcomes.append((i, state.state.value, receipt.hex if receipt else ""))
    return timer.totals, outcomes


def throughput_bench(
    n_votes: int = 10_000,
    seed: int | None = 0,
    workers: int = 1,
    *,
    fsync: bool = True,
    ledger_dir: str | Path | None = None,
    candidates: tuple[str, ...] = ("A", "B"),
) -> ThroughputReport:
    """Cast ``n_votes`` noiseless ballots through the full loopback pipeline.

    Each worker gets its own channel, committee and ledger file, so sessions
    never cross workers. Stage times are summed over workers: ``qkd`` covers
    the key exchange including the committee's side, ``ledger`` the durable
    append, and ``transport`` the rest of the submit round trip.
    """
    if n_votes < 1 or workers < 1:
        raise InvalidArgument("n_votes and workers must be >= 1")
    share = [n_votes // workers + (w < n_votes % workers) for w in range(workers)]
    results: list = [None] * workers
    errors: list[BaseException] = []
    with tempfile.TemporaryDirectory(prefix="qvote-bench-") as tmp:
        directory = Path(ledger_dir) if ledger_dir is not None else Path(tmp)
        directory.mkdir(parents=True, exist_ok=True)

        def run(w: int) -> None:
            try:
                results[w] = _run_worker(w, share[w], seed, directory, fsync, tuple(candidates))
            except BaseException as exc:  # surfaced after join
                errors.append(exc)

        t0 = time.perf_counter()
        if workers == 1:
            run(0)
        else:
            threads = [threading.Thread(target=run, args=(w,)) for w in range(workers) if share[w]]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
        wall = time.perf_counter() - t0
    if errors:
        raise errors[0]
    totals = {name: 0.0 for name in STAGES}
    digest = hashlib.sha256()
    verified = failed = 0
    for w, result in enumerate(results):
        if result is None:
            continue
        stage_totals, outcomes = result
        for name in ("qkd", "encrypt", "ledger"):
            totals[name] += stage_totals.get(name, 0.0)
        totals["transport"] += stage_totals.get("submit", 0.0) - stage_totals.get("ledger", 0.0)
        for i, status, receipt in outcomes:
            digest.update(f"{w}/{i}/{status}/{receipt}\n".encode())
            if status == State.VERIFIED.value:
                verified += 1
            else:
                failed += 1
    return ThroughputReport(
        votes=n_votes,
        wall_time=wall,
        votes_per_sec=n_votes / wall,
        stages=totals,
        verified=verified,
        failed=failed,
        workers=workers,
        seed=seed,
        outcome_digest=digest.hexdigest(),
    )
