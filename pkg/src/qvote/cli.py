"""Command-line driver: ``qvote <subcommand> [flags]``.

Exit codes: 0 success, 1 vote failed or receipt mismatch, 2 usage or startup
error, 3 channel error, 4 session not found or audit rejected, 5 ledger check
failed. Without a broker URI (``--broker`` or ``QVOTE_BROKER_URI``) the
loopback binding is used and ``vote``/``audit`` run an in-process committee on
``--ledger``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import sys
import threading
from pathlib import Path

import numpy as np

from . import __version__
from .bb84 import CommitteeQkd, NoiseModel, QkdConfig, VoterQkd, bases_to_symbols, bits_to_str
from .bench import DEFAULT_SIZES, key_size_sweep, throughput_bench
from .crypto import Receipt
from .errors import ChannelError, InvalidArgument, LedgerError, QVoteError
from .protocol import (
    Ballot,
    ElectionConfig,
    State,
    VoterConfig,
    VoterState,
    reveal_identity_key,
    verify_receipt,
    voter_cast,
)
from .service import Ledger, ledger_check, serve, tally
from .transport import ChannelConfig, open_channel

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2
EXIT_CHANNEL = 3
EXIT_NOT_FOUND = 4
EXIT_LEDGER = 5

DEFAULT_LEDGER = "qvote-ledger.jsonl"
DEFAULT_STATE = "qvote-voter.json"


class _Fail(Exception):
    def __init__(self, code: int, message: str, payload: dict | None = None) -> None:
        super().__init__(message)
        self.code = code
        self.payload = payload or {}


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _probability(text: str) -> float:
    value = float(text)
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"expected a value in [0, 1], got {text}")
    return value


def _positive_float(text: str) -> float:
    value = float(text)
    if value <= 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", help="machine-readable output")
    common.add_argument("--seed", type=int, default=None, help="RNG seed for reproducible runs")
    common.add_argument("--election-id", default="e1")
    common.add_argument("--broker", default=None, help="MQTT broker URI; default $QVOTE_BROKER_URI, else loopback")
    common.add_argument("--ledger", default=DEFAULT_LEDGER, help="committee ledger path")
    common.add_argument("--state-file", default=DEFAULT_STATE, help="voter state file")
    common.add_argument("--candidates", default="A,B", help="comma-separated candidate list")
    noise = common.add_argument_group("channel noise")
    noise.add_argument("--noise-max", type=_probability, default=0.2, help="flip probability drawn from U(0, max)")
    noise.add_argument("--noise-off", action="store_true", help="noiseless quantum channel")
    noise.add_argument("--eve", action="store_true", help="intercept-resend eavesdropper on the line")
    keys = common.add_argument_group("keys and retries")
    keys.add_argument("--vote-key-bits", type=_positive_int, default=4)
    keys.add_argument("--id-key-bits", type=_positive_int, default=4)
    keys.add_argument("--shots", type=_positive_int, default=10_000)
    keys.add_argument("--raw-length", type=_positive_int, default=32)
    keys.add_argument("--max-attempts", type=_positive_int, default=3, help="QKD retry cap")
    keys.add_argument("--timeout", type=_positive_float, default=10.0, help="per-reply timeout in seconds")

    parser = argparse.ArgumentParser(prog="qvote", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"qvote {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", parents=[common], help="run the committee service")
    p.add_argument("--duration", type=_positive_float, default=None, help="stop after this many seconds")
    p.add_argument("--no-fsync", action="store_true", help="skip fsync on ledger appends")

    p = sub.add_parser("vote", parents=[common], help="cast one ballot")
    p.add_argument("--candidate", required=True)
    p.add_argument("--voter-id", required=True)
    p.add_argument("--recast-on-failure", action="store_true", help="retry once in a fresh session if the vote fails")

    sub.add_parser("verify", parents=[common], help="recompute the receipt from the voter state file")

    sub.add_parser("tally", parents=[common], help="count votes in the ledger")

    sub.add_parser("audit", parents=[common], help="reveal K_id so the committee can open the identity")

    sub.add_parser("qkd-demo", parents=[common], help="print a step-by-step BB84 trace")

    p = sub.add_parser("bench-throughput", parents=[common], help="loopback pipeline throughput")
    p.add_argument("--votes", type=_positive_int, default=10_000)
    p.add_argument("--workers", type=_positive_int, default=1)
    p.add_argument("--no-fsync", action="store_true")

    p = sub.add_parser("bench-sweep", parents=[common], help="key-size stability sweep")
    p.add_argument("--sizes", default=",".join(map(str, DEFAULT_SIZES)))
    p.add_argument("--trials", type=_positive_int, default=100_000)
    p.add_argument("--csv", action="store_true", help="emit CSV instead of a table")

    sub.add_parser("ledger-check", parents=[common], help="recompute every stored receipt")
    return parser


# ------------------------------------------------------------------ helpers


def _noise(args) -> NoiseModel:
    if args.noise_off:
        return NoiseModel.fixed(0.0, eavesdropper=args.eve)
    return NoiseModel.uniform(args.noise_max, eavesdropper=args.eve)


def _candidates(args) -> tuple[str, ...]:
    names = tuple(c.strip() for c in args.candidates.split(",") if c.strip())
    if not names:
        raise _Fail(EXIT_USAGE, "no candidates given")
    return names


def _election(args) -> ElectionConfig:
    return ElectionConfig(
        election_id=args.election_id,
        candidates=_candidates(args),
        vote_key_bits=args.vote_key_bits,
        id_key_bits=args.id_key_bits,
        noise=_noise(args),
        shots=args.shots,
        seed=args.seed,
    )


def _voter_config(args) -> VoterConfig:
    return VoterConfig(
        qkd=QkdConfig(
            raw_length=args.raw_length,
            shots=args.shots,
            max_attempts=args.max_attempts,
            timeout=args.timeout,
        ),
        vote_key_bits=args.vote_key_bits,
        id_key_bits=args.id_key_bits,
        receipt_timeout=args.timeout,
    )


def _channel_config(args) -> ChannelConfig:
    return ChannelConfig.from_env(args.broker, seed=args.seed)


class _Session:
    """Channel plus, on loopback, an in-process committee over ``--ledger``."""

    def __init__(self, args, fsync: bool = True) -> None:
        self.config = _channel_config(args)
        self.channel = None
        self.service = None
        self.args = args
        self.fsync = fsync

    def __enter__(self):
        try:
            self.channel = open_channel(self.config)
        except ChannelError as exc:
            raise _Fail(EXIT_CHANNEL, f"cannot reach broker: {exc}") from exc
        if self.config.binding == "loopback":
            try:
                self.service = serve(_election(self.args), self.channel, self.args.ledger, fsync=self.fsync)
            except (LedgerError, OSError) as exc:
                self.channel.close()
                raise _Fail(EXIT_USAGE, f"cannot open ledger: {exc}") from exc
        return self

    def __exit__(self, *exc) -> None:
        if self.service is not None:
            self.service.stop()
        if self.channel is not None:
            self.channel.close()


def _load_state(path: str) -> VoterState:
    try:
        return VoterState.from_dict(json.loads(Path(path).read_text()))
    except FileNotFoundError:
        raise _Fail(EXIT_NOT_FOUND, f"no voter state at {path}") from None
    except (ValueError, KeyError, TypeError, QVoteError) as exc:
        raise _Fail(EXIT_USAGE, f"unreadable voter state {path}: {exc}") from None


def _save_state(path: str, state: VoterState) -> None:
    tmp = Path(f"{path}.tmp")
    tmp.write_text(json.dumps(state.to_dict(), indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


# ------------------------------------------------------------------ subcommands


def cmd_serve(args) -> tuple[int, dict, str]:
    channel = open_channel(_channel_config(args))
    stop = threading.Event()
    previous = signal.signal(signal.SIGINT, lambda *_: stop.set())
    try:
        with serve(_election(args), channel, args.ledger, fsync=not args.no_fsync) as service:
            logging.getLogger(__name__).info("committee serving %s on %s", args.election_id, channel)
            stop.wait(args.duration)
            entries = len(service.ledger)
    finally:
        signal.signal(signal.SIGINT, previous)
        channel.close()
    out = {"election_id": args.election_id, "ledger": args.ledger, "entries": entries}
    return EXIT_OK, out, f"committee stopped; ledger {args.ledger} holds {entries} entries"


def cmd_vote(args) -> tuple[int, dict, str]:
    ballot = Ballot(args.candidate, args.voter_id)
    rng = np.random.default_rng(args.seed)
    config = _voter_config(args)
    casts = 2 if args.recast_on_failure else 1
    with _Session(args) as session:
        for _ in range(casts):
            receipt, state = voter_cast(ballot, config, session.channel, args.election_id, rng)
            if state.state is State.VERIFIED:
                break
    _save_state(args.state_file, state)
    out = {
        "session_id": state.session_id,
        "state": state.state.value,
        "failure": state.failure,
        "receipt": receipt.hex if receipt else None,
    }
    if receipt is None:
        code = EXIT_CHANNEL if state.failure == "channel" else EXIT_FAILED
        return code, out, f"vote failed: {state.failure} (session {state.session_id})"
    return EXIT_OK, out, f"session {state.session_id}\nreceipt {receipt.hex}"


def cmd_verify(args) -> tuple[int, dict, str]:
    state = _load_state(args.state_file)
    if state.e_vote is None or state.e_id is None:
        raise _Fail(EXIT_FAILED, "voter state holds no submitted ballot", {"session_id": state.session_id})
    recomputed = Receipt.of(state.e_vote, state.e_id, state.session_id)
    held = state.remote_receipt or state.local_receipt
    ok = held is not None and verify_receipt(recomputed, held)
    in_ledger = None
    if Path(args.ledger).exists():
        ledger = Ledger(args.ledger, fsync=False)
        try:
            entry = ledger.get(state.session_id)
        finally:
            ledger.close()
        if entry is not None:
            in_ledger = verify_receipt(recomputed, entry.receipt_hex)
            ok = ok and in_ledger
    out = {
        "session_id": state.session_id,
        "receipt": recomputed.hex,
        "match": ok,
        "ledger_match": in_ledger,
    }
    verdict = "receipt verified" if ok else "receipt MISMATCH"
    return (EXIT_OK if ok else EXIT_FAILED), out, f"{verdict}: {recomputed.hex}"


def cmd_tally(args) -> tuple[int, dict, str]:
    if not Path(args.ledger).exists():
        raise _Fail(EXIT_NOT_FOUND, f"no ledger at {args.ledger}")
    result = tally(args.ledger, _candidates(args))
    lines = [f"{name}: {count}" for name, count in result.counts.items()]
    lines.append(f"invalid: {result.invalid}  total: {result.total}  verified: {result.verified}")
    return EXIT_OK, result.to_dict(), "\n".join(lines)


def cmd_audit(args) -> tuple[int, dict, str]:
    state = _load_state(args.state_file)
    with _Session(args) as session:
        answer = reveal_identity_key(state, session.channel, args.timeout)
    if answer.get("status") != "ok":
        return EXIT_NOT_FOUND, answer, f"audit rejected: {answer.get('reason')}"
    return EXIT_OK, answer, f"audit recorded for {state.session_id}; needs_review={answer.get('needs_review')}"


def qkd_trace(raw_length: int, noise: NoiseModel, shots: int, seed: int | None) -> dict:
    """One QKD attempt, step by step; identical output for identical arguments."""
    rng = np.random.default_rng(seed)
    voter = VoterQkd(raw_length, rng)
    committee = CommitteeQkd(noise, shots, rng)
    committee_bases = committee.receive(voter.frame)
    key = voter.reconcile(committee_bases)
    committee_key = committee.reconcile(voter.bases)
    matches = (voter.bases == committee_bases).astype(np.uint8)
    return {
        "raw_length": raw_length,
        "noise": noise.to_dict(),
        "noise_draw": committee.noise_draw,
        "seed": seed,
        "steps": {
            "1_voter_bits": bits_to_str(voter.bits),
            "2_voter_bases": "".join(bases_to_symbols(voter.bases)),
            "3_committee_bases": "".join(bases_to_symbols(committee_bases)),
            "4_committee_measurements": bits_to_str(committee.measurements),
            "5_basis_matches": bits_to_str(matches),
            "6_sifted_key": {"voter": bits_to_str(key.bits), "committee": bits_to_str(committee_key.bits)},
        },
        "keys_agree": bool(np.array_equal(key.bits, committee_key.bits)),
    }


def cmd_qkd_demo(args) -> tuple[int, dict, str]:
    trace = qkd_trace(args.raw_length, _noise(args), args.shots, args.seed)
    s = trace["steps"]
    text = "\n".join([
        f"1. voter bits           {s['1_voter_bits']}",
        f"2. voter bases          {s['2_voter_bases']}",
        f"3. committee bases      {s['3_committee_bases']}",
        f"4. committee measures   {s['4_committee_measurements']}",
        f"5. bases match          {s['5_basis_matches']}",
        f"6. sifted key (voter)   {s['6_sifted_key']['voter']}",
        f"   sifted key (comm.)   {s['6_sifted_key']['committee']}",
        f"   keys agree: {trace['keys_agree']}  (p = {trace['noise_draw']:.4f})",
    ])
    return EXIT_OK, trace, text


def cmd_bench_throughput(args) -> tuple[int, dict, str]:
    report = throughput_bench(args.votes, seed=args.seed, workers=args.workers, fsync=not args.no_fsync)
    return EXIT_OK, report.to_dict(), report.to_table()


def cmd_bench_sweep(args) -> tuple[int, dict, str]:
    try:
        sizes = [int(x) for x in args.sizes.split(",") if x.strip()]
    except ValueError:
        raise _Fail(EXIT_USAGE, f"bad --sizes {args.sizes!r}") from None
    report = key_size_sweep(
        sizes, args.trials, _noise(args), args.seed if args.seed is not None else 0,
        max_attempts=args.max_attempts,
    )
    return EXIT_OK, report.to_dict(), report.to_csv().rstrip("\n") if args.csv else report.to_table()


def cmd_ledger_check(args) -> tuple[int, dict, str]:
    if not Path(args.ledger).exists():
        raise _Fail(EXIT_NOT_FOUND, f"no ledger at {args.ledger}")
    report = ledger_check(args.ledger)
    out = {
        "ok": report.ok,
        "entries": report.entries,
        "problems": report.problems,
        "corrupt_lines": report.corrupt_lines,
        "quarantined_bytes": report.quarantined_bytes,
    }
    text = f"ledger {'OK' if report.ok else 'FAILED'}: {report.entries} entries"
    if not report.ok:
        text += "".join(f"\n  {p}" for p in report.problems)
        text += "".join(f"\n  corrupt line {n}" for n in report.corrupt_lines)
    return (EXIT_OK if report.ok else EXIT_LEDGER), out, text


COMMANDS = {
    "serve": cmd_serve,
    "vote": cmd_vote,
    "verify": cmd_verify,
    "tally": cmd_tally,
    "audit": cmd_audit,
    "qkd-demo": cmd_qkd_demo,
    "bench-throughput": cmd_bench_throughput,
    "bench-sweep": cmd_bench_sweep,
    "ledger-check": cmd_ledger_check,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        code, payload, text = COMMANDS[args.command](args)
    except _Fail as exc:
        code, payload, text = exc.code, {"error": str(exc), **exc.payload}, f"error: {exc}"
    except ChannelError as exc:
        code, payload, text = EXIT_CHANNEL, {"error": str(exc)}, f"channel error: {exc}"
    except (InvalidArgument, LedgerError) as exc:
        code, payload, text = EXIT_USAGE, {"error": str(exc)}, f"error: {exc}"
    if args.json:
        payload = {"command": args.command, "exit_code": code, **payload}
        print(json.dumps(payload, sort_keys=True))
    else:
        print(text, file=sys.stdout if code == EXIT_OK else sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
