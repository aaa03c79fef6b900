"""Preparation-only OpenQASM 3 documents for the quantum channel.

A frame is written as one ``qubit[n] q;`` register plus, per qubit, an
optional ``x`` (bit 1) followed by an optional ``h`` (diagonal basis)::

    OPENQASM 3.0;
    qubit[2] q;
    x q[0];
    h q[0];
    h q[1];

The parser accepts exactly that subset, with free whitespace and ``//``
comments, and rejects everything else with a line number.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .bb84 import PreparedFrame
from .errors import InvalidArgument, QasmParseError

HEADER = "OPENQASM 3.0;"

_VERSION = re.compile(r"OPENQASM\s+(\S+)")
_DECL = re.compile(r"qubit\s*\[\s*(\d+)\s*\]\s*([A-Za-z_]\w*)")
_GATE = re.compile(r"([A-Za-z_]\w*)\s+([A-Za-z_]\w*)\s*\[\s*(\d+)\s*\]")
_SUPPORTED_GATES = {"x": "X", "h": "H"}


@dataclass(frozen=True)
class PrepProgram:
    text: str
    qubit_count: int
    gates: tuple[tuple[str, int], ...]


def emit_prep(frame: PreparedFrame) -> str:
    if frame is None or len(frame) == 0:
        raise InvalidArgument("cannot emit an empty frame")
    lines = [HEADER, f"qubit[{len(frame)}] q;"]
    for i, (bit, basis) in enumerate(zip(frame.bits.tolist(), frame.bases.tolist())):
        if bit:
            lines.append(f"x q[{i}];")
        if basis:
            lines.append(f"h q[{i}];")
    return "\n".join(lines) + "\n"


_COMMENT = re.compile(r"//[^\n]*")
_STATEMENT = re.compile(r"([^;]*);")


def _statements(text: str):
    """Yield ``(line_number, statement)`` with comments removed and ';' stripped."""
    # Comments are blanked in place so offsets still map to the source lines.
    body = _COMMENT.sub(lambda m: " " * len(m.group()), text)
    end = pos = 0
    line = 1
    for m in _STATEMENT.finditer(body):
        raw = m.group(1)
        stmt = raw.strip()
        start = m.start() + len(raw) - len(raw.lstrip())
        line += body.count("\n", pos, start)
        pos = start
        if not stmt:
            raise QasmParseError("syntax", "empty statement", line)
        yield line, stmt
        end = m.end()
    rest = body[end:]
    if rest.strip():
        lead = len(rest) - len(rest.lstrip())
        raise QasmParseError("syntax", "statement not terminated by ';'", body.count("\n", 0, end + lead) + 1)


_FAST_HEAD = re.compile(
    r"\s*OPENQASM\s+(3|3\.0)\s*;\s*qubit\s*\[\s*(\d+)\s*\]\s*([A-Za-z_]\w*)\s*;"
)
_FAST_GATE = r"\s*([xh])\s+([A-Za-z_]\w*)\s*\[\s*(\d+)\s*\]\s*;"
_FAST_BODY = re.compile(rf"(?:{_FAST_GATE})*\s*")
_FAST_GATES = re.compile(_FAST_GATE)


def _parse_fast(text: str) -> PrepProgram | None:
    """Well-formed documents in one regex pass; ``None`` defers to the line-aware parser."""
    if "//" in text:
        return None
    head = _FAST_HEAD.match(text)
    if head is None:
        return None
    count, register = int(head.group(2)), head.group(3)
    if count < 1 or not _FAST_BODY.fullmatch(text, head.end()):
        return None
    gates = []
    seen: dict[int, str] = {}
    for op, reg, index in _FAST_GATES.findall(text, head.end()):
        i = int(index)
        name = "X" if op == "x" else "H"
        prev = seen.get(i)
        if reg != register or i >= count or (prev is not None and (prev == "H" or name == "X")):
            return None
        seen[i] = name
        gates.append((name, i))
    return PrepProgram(text, count, tuple(gates))


def parse_program(text: str) -> PrepProgram:
    """Validate ``text`` against the preparation subset and return its gate list."""
    fast = _parse_fast(text)
    if fast is not None:
        return fast
    stmts = _statements(text)
    first = next(stmts, None)
    if first is None:
        raise QasmParseError("header", "missing OPENQASM version header", 1)
    line, stmt = first
    m = _VERSION.fullmatch(stmt)
    if m is None:
        raise QasmParseError("header", "document must start with 'OPENQASM 3.0;'", line)
    if m.group(1) not in ("3", "3.0"):
        raise QasmParseError("header", f"unsupported version {m.group(1)}", line)

    register: str | None = None
    count = 0
    gates: list[tuple[str, int]] = []
    seen: dict[int, str] = {}
    for line, stmt in stmts:
        gate = _GATE.fullmatch(stmt)
        if gate is None:
            decl = _DECL.fullmatch(stmt)
            if decl is None:
                raise QasmParseError("unsupported-statement", repr(stmt), line)
            if register is not None:
                raise QasmParseError("unsupported-statement", "second register declaration", line)
            count = int(decl.group(1))
            if count < 1:
                raise QasmParseError("out-of-range", "register must hold at least one qubit", line)
            register = decl.group(2)
            continue
        op, reg, index = gate.groups()
        name = _SUPPORTED_GATES.get(op)
        if name is None:
            raise QasmParseError("unsupported-statement", repr(stmt), line)
        index = int(index)
        if register is None or reg != register:
            raise QasmParseError("undeclared-register", f"register {reg!r} not declared", line)
        if index >= count:
            raise QasmParseError("out-of-range", f"index {index} outside {reg}[{count}]", line)
        prev = seen.get(index)
        if prev is not None and (prev == "H" or name == "X"):
            raise QasmParseError("gate-order", f"{prev} then {name} on {reg}[{index}]; only x then h allowed", line)
        seen[index] = name
        gates.append((name, index))
    if register is None:
        raise QasmParseError("undeclared-register", "no qubit register declared", line)
    return PrepProgram(text, count, tuple(gates))


def parse_prep(text: str) -> PreparedFrame:
    program = parse_program(text)
    bits = [0] * program.qubit_count
    bases = [0] * program.qubit_count
    for name, index in program.gates:
        if name == "X":
            bits[index] = 1
        else:
            bases[index] = 1
    return PreparedFrame(np.array(bits, dtype=np.uint8), np.array(bases, dtype=np.uint8))
