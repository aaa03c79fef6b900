"""Quantum-secured voting: simulated BB84 keys, dual-key XOR ballots, SHA-256 receipts."""

__version__ = "0.1.0"
