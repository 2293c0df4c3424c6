"""Canonical byte encodings shared by the ledger, contracts and reports."""
from __future__ import annotations

import json
import struct


def canonical_json(obj) -> bytes:
    """Sorted keys, no whitespace; bytes must already be hex strings."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()


def u64(n: int) -> bytes:
    return struct.pack(">Q", n)


def framed(*parts: bytes) -> bytes:
    """Length-prefix each part so concatenation is unambiguous."""
    return b"".join(struct.pack(">I", len(p)) + p for p in parts)


def unframe(blob: bytes) -> list[bytes]:
    out, i = [], 0
    while i < len(blob):
        if i + 4 > len(blob):
            raise ValueError("truncated frame header")
        (n,) = struct.unpack(">I", blob[i : i + 4])
        i += 4
        if i + n > len(blob):
            raise ValueError("truncated frame body")
        out.append(blob[i : i + n])
        i += n
    return out
