from __future__ import annotations

import hashlib
import threading

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qvote.bb84 import as_bits, bits_to_str, sift
from qvote.crypto import (
    Receipt,
    SymmetricKey,
    key_digest,
    key_digest_bits,
    pack_bits,
    receipt_hash,
    split_key,
    unpack_bits,
    xor_apply,
)
from qvote.errors import InvalidArgument, InvalidKey, InvalidReceipt, KeyReuseError, KeyTooShort

EMPTY_SHA256 = "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"

keys = st.lists(st.integers(0, 1), min_size=1, max_size=300).map(lambda b: np.array(b, dtype=np.uint8))


def bits_of(message: bytes) -> str:
    return bits_to_str(unpack_bits(message))


class TestXor:
    def test_bitwise_example(self):
        # 1010 xor 0110 -> 1100, in the high nibble of one byte.
        assert bits_of(xor_apply(pack_bits("1010"), "01100000"))[:4] == "1100"

    def test_zero_key_is_identity(self):
        assert xor_apply(b"hello", "0000") == b"hello"

    def test_key_cycles(self):
        # 1010 with key 01 cycled to 0101 -> 1111.
        assert bits_of(xor_apply(pack_bits("1010"), "01"))[:4] == "1111"

    def test_empty_key(self):
        with pytest.raises(InvalidKey):
            xor_apply(b"x", "")

    def test_empty_message(self):
        assert xor_apply(b"", "1") == b""

    @given(st.binary(max_size=200), keys)
    def test_roundtrip(self, message, key):
        assert xor_apply(xor_apply(message, key), key) == message

    @given(st.binary(min_size=1, max_size=40), keys)
    def test_matches_bit_level_definition(self, message, key):
        nbits = 8 * len(message)
        stream = np.resize(key, nbits)
        expected = np.packbits(unpack_bits(message) ^ stream).tobytes()
        assert xor_apply(message, key) == expected

    @given(st.binary(min_size=4, max_size=4), st.binary(min_size=4, max_size=4))
    def test_bijection_for_long_keys(self, a, b):
        key = unpack_bits(b"\x5a\xc3\x0f\x99")
        assert (xor_apply(a, key) == xor_apply(b, key)) == (a == b)


class TestSymmetricKey:
    def test_single_use(self):
        key = SymmetricKey(as_bits("1011"))
        key.encrypt(b"A")
        assert key.used
        with pytest.raises(KeyReuseError):
            key.encrypt(b"A")

    def test_single_use_under_threads(self):
        key = SymmetricKey(as_bits("1011"))
        wins, errors = [], []

        def go():
            try:
                wins.append(key.encrypt(b"A"))
            except KeyReuseError:
                errors.append(1)

        threads = [threading.Thread(target=go) for _ in range(16)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert len(wins) == 1 and len(errors) == 15

    def test_empty_rejected(self):
        with pytest.raises(InvalidKey):
            SymmetricKey(np.zeros(0, np.uint8))


class TestSplit:
    def test_example(self):
        k_vote, k_id = split_key("110100", 3, 3)
        assert (k_vote.to_str(), k_id.to_str()) == ("110", "100")
        assert (k_vote.origin.half, k_id.origin.half) == ("vote", "id")

    def test_too_short(self):
        with pytest.raises(KeyTooShort):
            split_key("1101", 4, 1)

    def test_zero_length_half(self):
        with pytest.raises(InvalidArgument):
            split_key("1101", 4, 0)

    def test_accepts_sifted_key(self):
        k_vote, k_id = split_key(sift("RRRR", "RRRR", "1001"), 2, 2, session_id="s")
        assert (k_vote.to_str(), k_id.to_str(), k_id.origin.session_id) == ("10", "01", "s")

    @given(st.integers(1, 16), st.integers(1, 16), st.integers(0, 16))
    def test_halves_are_disjoint_prefix(self, v, i, extra):
        bits = np.arange(v + i + extra) % 2
        k_vote, k_id = split_key(bits.astype(np.uint8), v, i)
        assert np.array_equal(np.concatenate([k_vote.bits, k_id.bits]), bits[: v + i])


class TestDigests:
    def test_sha256_anchor(self):
        assert hashlib.sha256(b"").hexdigest() == EMPTY_SHA256

    def test_receipt_is_plain_concatenation(self):
        assert receipt_hash(b"ab", b"c") == hashlib.sha256(b"abc").digest()
        assert receipt_hash(b"ab", b"c") == receipt_hash(b"a", b"bc")

    def test_receipt_rejects_empty(self):
        with pytest.raises(InvalidArgument):
            receipt_hash(b"", b"x")

    def test_single_bit_flips_change_receipt(self):
        rng = np.random.default_rng(1)
        for _ in range(1_000):
            e_vote, e_id = rng.bytes(int(rng.integers(1, 9))), rng.bytes(int(rng.integers(1, 9)))
            base = receipt_hash(e_vote, e_id)
            fields = [bytearray(e_vote), bytearray(e_id)]
            which = int(rng.integers(0, 2))
            pos = int(rng.integers(0, 8 * len(fields[which])))
            fields[which][pos // 8] ^= 0x80 >> (pos % 8)
            flipped = (bytes(fields[0]), bytes(fields[1]))
            assert receipt_hash(*flipped) != base

    def test_key_digest_packing(self):
        assert key_digest(SymmetricKey(as_bits("1011"))) == hashlib.sha256(b"\xb0").digest()

    def test_key_digest_empty(self):
        with pytest.raises(InvalidKey):
            key_digest_bits("")

    def test_key_digest_avalanche(self):
        rng = np.random.default_rng(2)
        for _ in range(1_000):
            bits = rng.integers(0, 2, size=int(rng.integers(1, 64)), dtype=np.uint8)
            other = bits.copy()
            other[rng.integers(0, len(bits))] ^= 1
            assert key_digest_bits(bits) != key_digest_bits(other)
            assert key_digest_bits(bits) == key_digest_bits(bits.copy())


class TestReceipt:
    def test_hex_roundtrip(self):
        r = Receipt.of(b"a", b"b")
        assert Receipt.from_hex(r.hex) == r
        assert r.hex == r.hex.lower() and len(r.hex) == 64

    @pytest.mark.parametrize("text", ["", "zz" * 32, "ab" * 31, 42])
    def test_malformed(self, text):
        with pytest.raises(InvalidReceipt):
            Receipt.from_hex(text)

    def test_digest_length(self):
        with pytest.raises(InvalidReceipt):
            Receipt(b"short")
