from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qvote.bb84 import PreparedFrame, prepare_frame
from qvote.errors import InvalidArgument, QasmParseError
from qvote.qasm import HEADER, emit_prep, parse_prep, parse_program


@st.composite
def frames(draw, max_n: int = 256) -> PreparedFrame:
    n = draw(st.integers(1, max_n))
    bits = draw(st.lists(st.integers(0, 1), min_size=n, max_size=n))
    bases = draw(st.lists(st.integers(0, 1), min_size=n, max_size=n))
    return prepare_frame(bits, bases)


class TestEmit:
    def test_single_x(self):
        assert emit_prep(prepare_frame("1", "R")) == "OPENQASM 3.0;\nqubit[1] q;\nx q[0];\n"

    def test_no_gates(self):
        assert emit_prep(prepare_frame("0", "R")) == "OPENQASM 3.0;\nqubit[1] q;\n"

    def test_gate_order(self):
        text = emit_prep(prepare_frame("10", "DD"))
        assert text.splitlines()[2:] == ["x q[0];", "h q[0];", "h q[1];"]

    def test_empty_frame(self):
        with pytest.raises(InvalidArgument):
            emit_prep(None)


class TestParse:
    def test_h_only(self):
        assert parse_prep("OPENQASM 3.0;\nqubit[2] q;\nh q[1];") == prepare_frame("00", "RD")

    def test_whitespace_and_comments(self):
        text = "// prep\n  OPENQASM   3.0 ;\nqubit [ 2 ]  q ; // reg\n x  q [ 0 ] ;h q[0];\n\n"
        assert parse_prep(text) == prepare_frame("10", "DR")

    def test_register_name_is_free(self):
        assert parse_prep("OPENQASM 3;\nqubit[1] reg;\nx reg[0];") == prepare_frame("1", "R")

    @pytest.mark.parametrize(
        "text, kind, line",
        [
            ("", "header", 1),
            ("qubit[1] q;", "header", 1),
            ("OPENQASM 2.0;\nqubit[1] q;", "header", 1),
            ("OPENQASM 3.0;\nx q[0];", "undeclared-register", 2),
            ("OPENQASM 3.0;\nqubit[2] q;\nx r[0];", "undeclared-register", 3),
            ("OPENQASM 3.0;\nqubit[2] q;\nx q[2];", "out-of-range", 3),
            ("OPENQASM 3.0;\nqubit[0] q;", "out-of-range", 2),
            ("OPENQASM 3.0;\nqubit[2] q;\ncx q[0], q[1];", "unsupported-statement", 3),
            ("OPENQASM 3.0;\nqubit[2] q;\nbit[2] c;", "unsupported-statement", 3),
            ("OPENQASM 3.0;\nqubit[2] q;\n\nmeasure q[0];", "unsupported-statement", 4),
            ("OPENQASM 3.0;\nqubit[2] q;\nbarrier q;", "unsupported-statement", 3),
            ("OPENQASM 3.0;\nqubit[2] q;\nz q[0];", "unsupported-statement", 3),
            ("OPENQASM 3.0;\nqubit[2] q;\nqubit[1] r;", "unsupported-statement", 3),
            ("OPENQASM 3.0;\nqubit[2] q;\nh q[0];\nx q[0];", "gate-order", 4),
            ("OPENQASM 3.0;\nqubit[2] q;\nx q[1];\nx q[1];", "gate-order", 4),
            ("OPENQASM 3.0;\nqubit[2] q;\nh q[1];\nh q[1];", "gate-order", 4),
            ("OPENQASM 3.0;\nqubit[2] q;\nx q[0]", "syntax", 3),
            ("OPENQASM 3.0;\nqubit[2] q;\n;", "syntax", 3),
        ],
    )
    def test_errors_carry_kind_and_line(self, text, kind, line):
        with pytest.raises(QasmParseError) as err:
            parse_prep(text)
        assert err.value.kind == kind
        assert err.value.line == line

    def test_comment_does_not_shift_lines(self):
        with pytest.raises(QasmParseError) as err:
            parse_prep("OPENQASM 3.0; // a; b;\nqubit[1] q;\n// x q[5];\nx q[5];")
        assert (err.value.kind, err.value.line) == ("out-of-range", 4)

    def test_program_gates(self):
        prog = parse_program(emit_prep(prepare_frame("11", "DR")))
        assert prog.qubit_count == 2
        assert prog.gates == (("X", 0), ("H", 0), ("X", 1))


@given(frames())
def test_roundtrip(frame):
    assert parse_prep(emit_prep(frame)) == frame


@given(frames(max_n=24), st.data())
def test_single_token_mutation_is_never_silent(frame, data):
    """Changing one gate token either changes the decoded frame or fails to parse."""
    text = emit_prep(frame)
    lines = text.splitlines()
    gate_lines = [i for i, line in enumerate(lines) if i >= 2]
    if not gate_lines:
        return
    i = data.draw(st.sampled_from(gate_lines))
    op, target = lines[i].split(" ", 1)
    replacement = data.draw(st.sampled_from([o for o in ("x", "h", "z", "cx", "measure") if o != op]))
    lines[i] = f"{replacement} {target}"
    try:
        decoded = parse_prep("\n".join(lines) + "\n")
    except QasmParseError:
        return
    assert decoded != frame


def test_header_constant():
    assert HEADER == "OPENQASM 3.0;"
    assert isinstance(parse_prep(emit_prep(prepare_frame(np.ones(3, np.uint8), "RRR"))), PreparedFrame)
