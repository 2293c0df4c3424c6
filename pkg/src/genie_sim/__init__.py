"""Deterministic simulator of an enclave-backed genomic data marketplace.

Modules: ``crypto`` (hashing, signatures, sealed boxes), ``ledger`` (signed
block chain), ``contracts`` (registry and token escrow), ``attestation``,
``repository``, ``p2p``, ``enclave``, ``vm`` (gated stack machine),
``actors`` (flows A-E) and ``harness`` (scenarios and invariants).
"""

__version__ = "0.1.0"
