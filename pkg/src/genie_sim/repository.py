"""Off-chain content-addressed storage with mirrors.

Every object is named by its SHA-256 digest; a mirror whose copy no longer
re-hashes is skipped on read and flagged in ``corruptions``.
"""
from __future__ import annotations

from pathlib import Path

from . import crypto

DEFAULT_STORES = ("primary", "mirror-a", "mirror-b")


class Repository:
    def __init__(self, store_names=DEFAULT_STORES):
        if not store_names:
            raise ValueError("need at least one store")
        self.stores: dict[str, dict[bytes, bytes]] = {n: {} for n in store_names}
        self.corruptions: list[tuple[str, bytes]] = []

    def put(self, data: bytes, mirror_count: int = 1) -> crypto.Digest:
        if not 1 <= mirror_count <= len(self.stores):
            raise ValueError(f"mirror_count must be in [1, {len(self.stores)}]")
        h = crypto.digest(data)
        for name in list(self.stores)[:mirror_count]:
            self.stores[name][h.value] = bytes(data)
        return h

    def mirrors(self, h: crypto.Digest) -> set[str]:
        return {n for n, s in self.stores.items() if h.value in s}

    def get(self, h: crypto.Digest) -> bytes | None:
        for name, store in self.stores.items():
            data = store.get(h.value)
            if data is None:
                continue
            if crypto.digest(data) == h:
                return data
            self.corruptions.append((name, h.value))
        return None

    def corrupt(self, store: str, h: crypto.Digest, data: bytes) -> None:
        """Fault injection: overwrite one mirror's copy."""
        self.stores[store][h.value] = data

    def export_dir(self, path: str | Path) -> None:
        """Write every intact object to ``path/<hex-hash>``."""
        root = Path(path)
        root.mkdir(parents=True, exist_ok=True)
        seen = set()
        for store in self.stores.values():
            for key in sorted(store):
                if key in seen:
                    continue
                data = self.get(crypto.Digest(key))
                if data is not None:
                    (root / key.hex()).write_bytes(data)
                    seen.add(key)


class DirectoryStore:
    """Read-only view of an exported repository directory."""

    def __init__(self, path: str | Path):
        self.root = Path(path)

    def get(self, h: crypto.Digest) -> bytes | None:
        f = self.root / h.hex()
        if not f.is_file():
            return None
        data = f.read_bytes()
        return data if crypto.digest(data) == h else None

    def list(self) -> list[str]:
        return sorted(p.name for p in self.root.iterdir() if p.is_file())


def verify_anchored(h: crypto.Digest | bytes, chain) -> bool:
    """True iff the hash occurs in a successful mined registry call (arguments or result)."""
    target = (h.value if isinstance(h, crypto.Digest) else h).hex()

    def contains(v) -> bool:
        if isinstance(v, str):
            return v == target
        if isinstance(v, dict):
            return any(contains(x) for x in v.values())
        if isinstance(v, list):
            return any(contains(x) for x in v)
        return False

    for rec in chain.records():
        call = rec.tx.call
        if not (rec.ok and call and call.get("contract") == "registry"):
            continue
        if contains(call.get("args")) or contains(chain.outputs.get(rec.tx.signature, {})):
            return True
    return False
