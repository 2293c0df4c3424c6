"""In-process hash-linked ledger with signed transactions and blocks.

Mining is "the scheduled miner signs the block": miners take turns in a fixed
round-robin order and there is no difficulty target.  Contract calls are
executed in block order; a failing call is recorded as a failed transaction
and leaves contract state untouched.

Chain dump format (text, one record per line, LF):

    #genie-chain v1 <alloc-hex> <miners-hex> <n_miners>
    <index> <timestamp> <prev_hash> <miner> <miner_sig> <block_hash> <txs> <results>

All byte fields are lowercase hex; ``txs`` and ``results`` are hex of framed
binary blobs (see ``encode_txs``).  A block line with no transactions carries
``-`` in the ``txs``/``results`` columns.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

from . import crypto
from .contracts import ContractError, Contracts, model_id_for
from .encoding import canonical_json, framed, u64, unframe

ZERO32 = bytes(32)
ZERO_SIG = bytes(crypto.SIG_SIZE)
DUMP_MAGIC = "#genie-chain"


class LogicalClock:
    """Harness tick counter; mined blocks and traces stamp with it."""

    def __init__(self, start: int = 0):
        self.now = start

    def tick(self) -> int:
        self.now += 1
        return self.now


@dataclass
class ChainAccount:
    keypair: crypto.KeyPair
    nonce: int = 0

    @property
    def public(self) -> bytes:
        return self.keypair.public

    def transact(self, contract: str | None = None, op: str | None = None, **args) -> "Transaction":
        """Build and sign the next transaction; ``contract=None`` yields a no-op."""
        payload = b"" if contract is None else canonical_json({"contract": contract, "op": op, "args": args})
        tx = Transaction.signed(self.keypair, self.nonce, payload)
        self.nonce += 1
        return tx


def create_account(rng: crypto.Rng) -> ChainAccount:
    return ChainAccount(crypto.keygen(rng))


@dataclass(frozen=True)
class Transaction:
    sender: bytes
    nonce: int
    payload: bytes
    signature: bytes

    @staticmethod
    def body(sender: bytes, nonce: int, payload: bytes) -> bytes:
        return b"genie-tx|" + sender + u64(nonce) + payload

    @classmethod
    def signed(cls, kp: crypto.KeyPair, nonce: int, payload: bytes) -> "Transaction":
        sig = crypto.sign(kp.secret, cls.body(kp.public, nonce, payload))
        return cls(kp.public, nonce, payload, sig.value)

    def signature_ok(self) -> bool:
        return crypto.verify(self.sender, self.body(self.sender, self.nonce, self.payload), self.signature)

    @property
    def call(self) -> dict | None:
        if not self.payload:
            return None
        try:
            call = json.loads(self.payload)
        except (ValueError, UnicodeDecodeError):
            return None
        return call if isinstance(call, dict) else None

    def encode(self) -> bytes:
        return framed(self.sender, u64(self.nonce), self.payload, self.signature)

    @classmethod
    def decode(cls, blob: bytes) -> "Transaction":
        sender, nonce, payload, sig = unframe(blob)
        return cls(sender, int.from_bytes(nonce, "big"), payload, sig)


def encode_txs(txs) -> bytes:
    return framed(*(t.encode() for t in txs))


def decode_txs(blob: bytes) -> tuple[Transaction, ...]:
    return tuple(Transaction.decode(b) for b in unframe(blob))


def encode_results(results) -> bytes:
    return framed(*(r.encode() for r in results))


@dataclass(frozen=True)
class Block:
    index: int
    prev_hash: bytes
    timestamp: int
    txs: tuple[Transaction, ...]
    results: tuple[str, ...]
    miner: bytes
    miner_signature: bytes
    block_hash: bytes

    def header(self) -> bytes:
        return header_bytes(self.index, self.prev_hash, self.timestamp, self.miner, self.txs, self.results)

    def computed_hash(self) -> bytes:
        return crypto.digest(self.header() + self.miner_signature).value


def header_bytes(index, prev_hash, timestamp, miner, txs, results) -> bytes:
    return framed(
        b"genie-block", u64(index), prev_hash, u64(timestamp), miner, encode_txs(txs), encode_results(results)
    )


def genesis_block(allocation: dict[bytes, int], miners: list[bytes]) -> Block:
    h = crypto.digest(b"genie-genesis|" + encode_allocation(allocation) + b"".join(miners)).value
    return Block(0, ZERO32, 0, (), (), ZERO32, ZERO_SIG, h)


def encode_allocation(allocation: dict[bytes, int]) -> bytes:
    return framed(*(k + u64(v) for k, v in sorted(allocation.items())))


def decode_allocation(blob: bytes) -> dict[bytes, int]:
    return {p[:32]: int.from_bytes(p[32:], "big") for p in unframe(blob)}


@dataclass(frozen=True)
class ChainCheck:
    ok: bool
    index: int | None = None
    reason: str = ""

    def __bool__(self) -> bool:
        return self.ok


def validate_chain(blocks, miners: list[bytes], allocation: dict[bytes, int]) -> ChainCheck:
    """Return the first failing block and reason; never raises."""
    try:
        return _validate(blocks, miners, allocation)
    except Exception as exc:  # malformed field types from tampering
        return ChainCheck(False, None, f"malformed: {exc}")


def _validate(blocks, miners, allocation) -> ChainCheck:
    if not blocks:
        return ChainCheck(False, 0, "empty")
    if blocks[0] != genesis_block(allocation, miners):
        return ChainCheck(False, 0, "genesis")
    nonces: dict[bytes, int] = {}
    prev = blocks[0]
    for i, b in enumerate(blocks[1:], start=1):
        try:
            if b.index != i:
                return ChainCheck(False, i, "index")
            if b.prev_hash != prev.block_hash:
                return ChainCheck(False, i, "link")
            if b.computed_hash() != b.block_hash:
                return ChainCheck(False, i, "hash")
            if b.miner != miners[(i - 1) % len(miners)]:
                return ChainCheck(False, i, "miner")
            if not crypto.verify(b.miner, b.header(), b.miner_signature):
                return ChainCheck(False, i, "signature")
            if len(b.results) != len(b.txs):
                return ChainCheck(False, i, "results")
            for tx in b.txs:
                if not tx.signature_ok():
                    return ChainCheck(False, i, "tx_signature")
                if tx.nonce != nonces.get(tx.sender, 0):
                    return ChainCheck(False, i, "nonce")
                nonces[tx.sender] = tx.nonce + 1
        except Exception as exc:
            return ChainCheck(False, i, f"malformed: {exc}")
        prev = b
    return ChainCheck(True)


@dataclass(frozen=True)
class SubmitResult:
    accepted: bool
    reason: str = ""

    def __bool__(self) -> bool:
        return self.accepted


@dataclass(frozen=True)
class TxRecord:
    block: int
    tx: Transaction
    result: str

    @property
    def ok(self) -> bool:
        return self.result == "ok"


@dataclass
class Chain:
    """Single authoritative chain; the owner serializes all writes."""

    miners: list[bytes]
    allocation: dict[bytes, int] = field(default_factory=dict)
    max_txs_per_block: int = 64
    clock: LogicalClock | None = None

    def __post_init__(self):
        if not self.miners:
            raise ValueError("at least one miner required")
        self.contracts = Contracts(self.allocation)
        self.blocks: list[Block] = [genesis_block(self.allocation, self.miners)]
        self.pending: list[Transaction] = []
        self._expected_nonce: dict[bytes, int] = {}
        self.outputs: dict[bytes, dict] = {}  # tx signature -> contract return value

    # --- writes ------------------------------------------------------------

    def submit_tx(self, tx: Transaction) -> SubmitResult:
        if not tx.signature_ok():
            return SubmitResult(False, "signature")
        if tx.nonce != self._expected_nonce.get(tx.sender, 0):
            return SubmitResult(False, "nonce")
        if tx.payload:
            call = tx.call
            if call is None or not self.contracts.knows(call.get("contract"), call.get("op")):
                return SubmitResult(False, "unknown_operation")
        self._expected_nonce[tx.sender] = tx.nonce + 1
        self.pending.append(tx)
        return SubmitResult(True)

    def scheduled_miner(self) -> bytes:
        return self.miners[(len(self.blocks) - 1) % len(self.miners)]

    def mine_block(self, miner: ChainAccount) -> Block:
        if miner.public != self.scheduled_miner():
            raise ValueError("miner is not scheduled for this height")
        txs = tuple(self.pending[: self.max_txs_per_block])
        del self.pending[: len(txs)]
        results = []
        for tx in txs:
            call = tx.call
            if call is None:
                results.append("ok")
                continue
            try:
                self.outputs[tx.signature] = self.contracts.execute(tx.sender, call)
                results.append("ok")
            except ContractError as exc:
                results.append(f"fail:{exc}")
        prev = self.blocks[-1]
        tick = self.clock.tick() if self.clock is not None else prev.timestamp + 1
        idx = len(self.blocks)
        header = header_bytes(idx, prev.block_hash, tick, miner.public, txs, tuple(results))
        sig = crypto.sign(miner.keypair.secret, header).value
        block = Block(idx, prev.block_hash, tick, txs, tuple(results), miner.public, sig, crypto.digest(header + sig).value)
        self.blocks.append(block)
        return block

    # --- reads -------------------------------------------------------------

    def validate(self) -> ChainCheck:
        return validate_chain(self.blocks, self.miners, self.allocation)

    @property
    def height(self) -> int:
        return len(self.blocks) - 1

    def records(self):
        for b in self.blocks[1:]:
            for tx, res in zip(b.txs, b.results):
                yield TxRecord(b.index, tx, res)

    def result_of(self, tx: Transaction) -> str | None:
        for r in self.records():
            if r.tx.signature == tx.signature:
                return r.result
        return None

    def query_txs(self, sender=None, contract=None, operation=None, model_id=None, ok_only=False) -> list[TxRecord]:
        mid = model_id.hex() if isinstance(model_id, bytes) else model_id
        code_owner: dict[str, str] = {}
        out = []
        for r in self.records():
            call = r.tx.call or {}
            args = call.get("args") or {}
            tx_model = _tx_model(r.tx, call, args, code_owner)
            if sender is not None and r.tx.sender != sender:
                continue
            if contract is not None and call.get("contract") != contract:
                continue
            if operation is not None and call.get("op") != operation:
                continue
            if mid is not None and tx_model != mid:
                continue
            if ok_only and not r.ok:
                continue
            out.append(r)
        return out

    def dump(self) -> str:
        return dump_blocks(self.blocks, self.miners, self.allocation)


def _tx_model(tx, call, args, code_owner) -> str | None:
    op = call.get("op")
    try:
        if op == "register_model":
            return model_id_for(bytes.fromhex(args["whitepaper_hash"]), tx.sender).hex()
        if op == "purchase_access_code":
            code_owner[args["code_hash"]] = args["model_id"]
            return args["model_id"]
        if op == "consume_and_distribute":
            return code_owner.get(args["code_hash"])
        return args.get("model_id") if isinstance(args.get("model_id"), str) else None
    except (KeyError, TypeError, ValueError):
        return None


# --- dump / parse -----------------------------------------------------------


def _block_line(b: Block) -> str:
    txs = encode_txs(b.txs).hex() or "-"
    res = encode_results(b.results).hex() or "-"
    return " ".join(
        [str(b.index), str(b.timestamp), b.prev_hash.hex(), b.miner.hex(), b.miner_signature.hex(), b.block_hash.hex(), txs, res]
    )


def dump_blocks(blocks, miners, allocation) -> str:
    head = f"{DUMP_MAGIC} v1 {encode_allocation(allocation).hex() or '-'} {b''.join(miners).hex()} {len(miners)}"
    return "\n".join([head] + [_block_line(b) for b in blocks]) + "\n"


class DumpParseError(ValueError):
    def __init__(self, line: int, msg: str):
        super().__init__(f"line {line}: {msg}")
        self.line = line


def parse_dump(text: str):
    """Return (blocks, miners, allocation); raise DumpParseError with a line number."""
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    else:
        raise DumpParseError(len(lines), "missing trailing newline (truncated dump?)")
    if not lines or not lines[0].startswith(DUMP_MAGIC + " "):
        raise DumpParseError(1, "missing chain header")
    head = lines[0].split(" ")
    try:
        if len(head) != 5 or head[1] != "v1":
            raise ValueError("bad header fields")
        allocation = {} if head[2] == "-" else decode_allocation(bytes.fromhex(head[2]))
        mraw = bytes.fromhex(head[3])
        n = int(head[4])
        if len(mraw) != 32 * n or n < 1:
            raise ValueError("miner list length mismatch")
        miners = [mraw[i * 32 : (i + 1) * 32] for i in range(n)]
    except ValueError as exc:
        raise DumpParseError(1, str(exc)) from exc
    blocks = []
    for lineno, line in enumerate(lines[1:], start=2):
        f = line.split(" ")
        if len(f) != 8:
            raise DumpParseError(lineno, f"expected 8 fields, got {len(f)}")
        try:
            txs = () if f[6] == "-" else decode_txs(bytes.fromhex(f[6]))
            res = () if f[7] == "-" else tuple(p.decode() for p in unframe(bytes.fromhex(f[7])))
            blocks.append(
                Block(
                    int(f[0]), bytes.fromhex(f[2]), int(f[1]), txs, res,
                    bytes.fromhex(f[3]), bytes.fromhex(f[4]), bytes.fromhex(f[5]),
                )
            )
        except (ValueError, UnicodeDecodeError) as exc:
            raise DumpParseError(lineno, str(exc)) from exc
    if not blocks:
        raise DumpParseError(len(lines), "no blocks")
    return blocks, miners, allocation


def verify_dump(text: str) -> ChainCheck:
    """Re-validate a dump from its bytes alone."""
    try:
        blocks, miners, allocation = parse_dump(text)
    except DumpParseError as exc:
        return ChainCheck(False, None, f"parse error at {exc}")
    return validate_chain(blocks, miners, allocation)


def tamper_bit(block: Block, rng: crypto.Rng) -> tuple[Block, str]:
    """Flip one random bit in one field of ``block``; used by fault injection."""
    fields = ["index", "prev_hash", "timestamp", "miner", "miner_signature", "block_hash"]
    if block.txs:
        fields += ["tx_sender", "tx_nonce", "tx_payload", "tx_signature"]
    if block.results:
        fields.append("result")
    name = rng.choice(fields)

    def flip(raw: bytes) -> bytes:
        if not raw:
            return b"\x01"
        buf = bytearray(raw)
        bit = rng.randint(0, len(buf) * 8 - 1)
        buf[bit // 8] ^= 1 << (bit % 8)
        return bytes(buf)

    def flip_int(v: int) -> int:
        return v ^ (1 << rng.randint(0, 62))

    if name in ("index", "timestamp"):
        return replace(block, **{name: flip_int(getattr(block, name))}), name
    if name in ("prev_hash", "miner", "miner_signature", "block_hash"):
        return replace(block, **{name: flip(getattr(block, name))}), name
    if name == "result":
        i = rng.randint(0, len(block.results) - 1)
        res = list(block.results)
        res[i] = flip(res[i].encode()).decode("latin-1")
        return replace(block, results=tuple(res)), name
    i = rng.randint(0, len(block.txs) - 1)
    tx = block.txs[i]
    if name == "tx_nonce":
        tx = replace(tx, nonce=flip_int(tx.nonce))
    else:
        attr = name[3:]
        tx = replace(tx, **{attr: flip(getattr(tx, attr))})
    txs = list(block.txs)
    txs[i] = tx
    return replace(block, txs=tuple(txs)), name
