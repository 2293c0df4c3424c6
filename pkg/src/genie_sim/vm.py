"""Sandboxed stack machine that runs model programs inside an enclave.

Values on the stack are floats (scalars) or tuples of floats (vectors).  The
machine talks to the outside only through three objects:

* ``InputChannel``: records are staged through a buffer whose depth is drawn
  per session, so the refill pattern is not a function of the data;
* ``ObjectStore``: transactional name -> value store, optionally shared by
  several machines running the same program;
* ``OutputGate``: ``EMIT`` succeeds only for Query programs whose hash is
  registered on chain.

Randomness is split into named streams: ``algorithm`` (record order),
``buffer`` (buffer depth) and ``dummy`` (dummy-operation injection).  The
last two never influence results.
"""
from __future__ import annotations

import math
import re
from collections import deque
from dataclasses import dataclass, field

from . import crypto

DEFAULT_STEP_BUDGET = 1_000_000

# opcode -> operand kind
OPCODES = {
    "CONST": "float",
    "VCONST": "floats",
    "INPUT": "addr",
    "DOT": None,
    "ADD": None,
    "SUB": None,
    "MUL": None,
    "VADD": None,
    "VSCALE": None,
    "SIGMOID": None,
    "DUP": None,
    "SWAP": None,
    "POP": None,
    "LOAD": "name",
    "STORE": "name",
    "BEGIN": None,
    "COMMIT": None,
    "ABORT": None,
    "JMP": "addr",
    "JZ": "addr",
    "EMIT": None,
    "HALT": None,
}

HALTED = "Halted"
BUDGET_EXCEEDED = "BudgetExceeded"
TRAP = "Trap"

# every gate that saw an execution, for the suite-wide soundness audit
GATE_AUDIT: list[tuple[str, str, bool, int]] = []


class AssemblyError(ValueError):
    def __init__(self, line: int, msg: str):
        super().__init__(f"line {line}: {msg}")
        self.line = line


class Trap(Exception):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


class GateRefusal(Exception):
    pass


class StoreAttachDenied(Exception):
    pass


@dataclass(frozen=True)
class Program:
    instructions: tuple[tuple[str, object], ...]
    kind: str
    program_hash: crypto.Digest
    text: str

    def __len__(self) -> int:
        return len(self.instructions)


def canonical_text(text: str) -> str:
    lines = []
    for raw in text.splitlines():
        code = raw.split(";", 1)[0]
        toks = code.split()
        if toks:
            lines.append(" ".join(toks))
    return "\n".join(lines) + "\n"


def _float(tok: str, lineno: int) -> float:
    try:
        v = float(tok)
    except ValueError:
        raise AssemblyError(lineno, f"malformed literal {tok!r}") from None
    if not math.isfinite(v):
        raise AssemblyError(lineno, f"non-finite literal {tok!r}")
    return v


def assemble(text: str, kind: str = "Training") -> Program:
    """Parse assembly; one instruction per non-blank line, ``;`` starts a comment.

    Jump addresses are instruction indices (blank and comment lines do not
    count).  Errors carry the 1-based source line.
    """
    if kind not in ("Training", "Query"):
        raise ValueError(f"unknown program kind {kind!r}")
    parsed = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        toks = raw.split(";", 1)[0].split()
        if not toks:
            continue
        op, rest = toks[0], toks[1:]
        if op not in OPCODES:
            raise AssemblyError(lineno, f"unknown opcode {op!r}")
        want = OPCODES[op]
        if want is None:
            if rest:
                raise AssemblyError(lineno, f"{op} takes no operand")
            arg = None
        elif not rest:
            raise AssemblyError(lineno, f"{op} needs an operand")
        elif want == "floats":
            parts = re.split(r"[,\s]+", " ".join(rest).strip(", "))
            arg = tuple(_float(p, lineno) for p in parts)
        elif len(rest) != 1:
            raise AssemblyError(lineno, f"{op} takes one operand")
        elif want == "float":
            arg = _float(rest[0], lineno)
        elif want == "addr":
            if not rest[0].isdigit():
                raise AssemblyError(lineno, f"malformed address {rest[0]!r}")
            arg = int(rest[0])
        else:
            arg = rest[0]
        parsed.append((lineno, op, arg))
    n = len(parsed)
    for lineno, op, arg in parsed:
        if OPCODES[op] == "addr" and not 0 <= arg < n:
            raise AssemblyError(lineno, f"jump target {arg} out of range [0, {n})")
    canon = canonical_text(text)
    return Program(
        tuple((op, arg) for _, op, arg in parsed), kind, crypto.digest(canon.encode()), canon
    )


# --- environment ------------------------------------------------------------


class OpTrace:
    """Externally observable operation log, with optional dummy injection."""

    def __init__(self, dummy_p: float = 0.0, rng: crypto.Rng | None = None, store=None):
        if not 0.0 <= dummy_p <= 1.0:
            raise ValueError("dummy probability must be in [0, 1]")
        self.p = dummy_p
        self.rng = rng if rng is not None else crypto.Rng(0)
        self.store = store
        self.events: list[str] = []
        self.real = 0

    def record(self, event: str) -> None:
        self.events.append(event)
        self.real += 1
        if self.p and (self.p >= 1.0 or self.rng.random() < self.p):
            kind = self.rng.choice(("store_read", "page_access"))
            if kind == "store_read" and self.store is not None:
                self.store.peek_any(self.rng)
            self.events.append("dummy_" + kind)


class InputChannel:
    """FIFO record queue staged through a buffer of session-random depth."""

    def __init__(self, records, depth_range=(1, 8), rng: crypto.Rng | None = None, trace: OpTrace | None = None):
        lo, hi = depth_range
        if not 1 <= lo <= hi:
            raise ValueError("bad buffer depth range")
        self.queue = deque(records)
        self.buffer: deque = deque()
        self.depth = (rng or crypto.Rng(0)).randint(lo, hi)
        self.trace = trace
        self.delivered = 0

    def next(self):
        if not self.buffer:
            while self.queue and len(self.buffer) < self.depth:
                self.buffer.append(self.queue.popleft())
            if self.trace is not None and self.buffer:
                self.trace.record(f"refill {len(self.buffer)}")
        if not self.buffer:
            return None
        self.delivered += 1
        if self.trace is not None:
            self.trace.record("input")
        return self.buffer.popleft()


class OutputGate:
    def __init__(self, program: Program, registered_hashes=()):
        self.program = program
        self.registered = program.program_hash.hex() in set(registered_hashes)
        self.emitted = bytearray()

    @property
    def open(self) -> bool:
        return self.program.kind == "Query" and self.registered

    def emit(self, value) -> None:
        if not self.open:
            raise Trap("gate")
        self.emitted += (_render(value) + "\n").encode()

    def close(self) -> None:
        GATE_AUDIT.append((self.program.kind, self.program.program_hash.hex(), self.registered, len(self.emitted)))


def _render(value) -> str:
    if isinstance(value, tuple):
        return ",".join(repr(v) for v in value)
    return repr(value)


def parse_emitted(data: bytes) -> list:
    out = []
    for line in data.decode().splitlines():
        vals = tuple(float(v) for v in line.split(","))
        out.append(vals[0] if len(vals) == 1 and "," not in line else vals)
    return out


class ObjectStore:
    """Transactional store; one open transaction at a time (serializable by locking).

    ``history`` keeps a copy of the committed state after every commit.
    """

    def __init__(self, initial: dict | None = None):
        self.committed: dict = dict(initial or {})
        self.history: list[dict] = [dict(self.committed)]
        self._owner = None
        self._writes: dict = {}
        self.program_hash: str | None = None
        self.commits = 0

    def attach(self, program: Program) -> None:
        h = program.program_hash.hex()
        if self.program_hash is None:
            self.program_hash = h
        elif self.program_hash != h:
            raise StoreAttachDenied("store is bound to a different program")

    def in_txn(self, owner) -> bool:
        return self._owner is owner

    def try_begin(self, owner) -> bool:
        if self._owner is owner:
            raise Trap("nested BEGIN")
        if self._owner is not None:
            return False
        self._owner = owner
        self._writes = {}
        return True

    def read(self, owner, name: str):
        if self._owner is not owner:
            raise Trap("LOAD outside transaction")
        if name in self._writes:
            return self._writes[name]
        if name not in self.committed:
            raise Trap(f"undefined name {name!r}")
        return self.committed[name]

    def write(self, owner, name: str, value) -> None:
        if self._owner is not owner:
            raise Trap("STORE outside transaction")
        self._writes[name] = value

    def commit(self, owner) -> None:
        if self._owner is not owner:
            raise Trap("COMMIT without BEGIN")
        self.committed.update(self._writes)
        self.history.append(dict(self.committed))
        self.commits += 1
        self._owner, self._writes = None, {}

    def abort(self, owner) -> None:
        if self._owner is not owner:
            raise Trap("ABORT without BEGIN")
        self._owner, self._writes = None, {}

    def crash(self) -> None:
        """Lose every uncommitted write, as after a process crash."""
        self._owner, self._writes = None, {}

    def peek_any(self, rng: crypto.Rng) -> None:
        if self.committed:
            self.committed.get(rng.choice(sorted(self.committed)))

    def params(self) -> dict:
        return {k: v for k, v in self.committed.items() if not k.startswith("_")}


def crash_during_txn(store: ObjectStore) -> None:
    store.crash()


@dataclass
class ExecResult:
    status: str
    steps: int
    reason: str = ""
    stack: list = field(default_factory=list)

    @property
    def top(self):
        return self.stack[-1] if self.stack else None


# --- machine ----------------------------------------------------------------


def _scalar(v):
    if not isinstance(v, float):
        raise Trap("type mismatch: expected scalar")
    return v


def _vector(v):
    if not isinstance(v, tuple):
        raise Trap("type mismatch: expected vector")
    return v


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


class Machine:
    """One VM instance; ``step`` executes at most one instruction."""

    def __init__(self, program, inputs, store, gate, step_budget=DEFAULT_STEP_BUDGET, trace=None, crash_at=None):
        if step_budget < 1:
            raise ValueError("step_budget must be >= 1")
        self.program = program
        self.inputs = inputs
        self.store = store
        self.gate = gate
        self.budget = step_budget
        self.trace = trace if trace is not None else OpTrace()
        self.crash_at = crash_at
        self.stack: list = []
        self.pc = 0
        self.steps = 0
        self.result: ExecResult | None = None

    def _pop(self):
        if not self.stack:
            raise Trap("stack underflow")
        return self.stack.pop()

    def _finish(self, status, reason=""):
        if self.store.in_txn(self):
            self.store.abort(self)
        self.result = ExecResult(status, self.steps, reason, list(self.stack))
        return False

    def step(self) -> bool:
        """Run one instruction.  Returns False once finished; blocked BEGIN is a no-op."""
        if self.result is not None:
            return False
        if self.crash_at is not None and self.steps == self.crash_at:
            self.store.crash()
            return self._finish(TRAP, "crash")
        if self.steps >= self.budget:
            return self._finish(BUDGET_EXCEEDED)
        if self.pc >= len(self.program):
            return self._finish(HALTED)
        op, arg = self.program.instructions[self.pc]
        if op == "BEGIN" and not self.store.in_txn(self) and self.store._owner is not None:
            return True  # wait for the other transaction
        self.steps += 1
        try:
            halted = self._exec(op, arg)
        except Trap as t:
            return self._finish(TRAP, t.reason)
        if halted:
            return self._finish(HALTED)
        return True

    def run(self) -> ExecResult:
        while self.step():
            pass
        return self.result

    def _exec(self, op, arg) -> bool:
        s = self.stack
        nxt = self.pc + 1
        if op == "CONST":
            s.append(arg)
        elif op == "VCONST":
            s.append(arg)
        elif op == "INPUT":
            rec = self.inputs.next()
            if rec is None:
                nxt = arg
            else:
                feats, label = rec
                s.append(tuple(float(v) for v in feats))
                s.append(float(label))
        elif op == "DOT":
            b, a = _vector(self._pop()), _vector(self._pop())
            if len(a) != len(b):
                raise Trap("dimension mismatch")
            s.append(math.fsum(x * y for x, y in zip(a, b)))
        elif op in ("ADD", "SUB", "MUL"):
            b, a = _scalar(self._pop()), _scalar(self._pop())
            s.append(a + b if op == "ADD" else a - b if op == "SUB" else a * b)
        elif op == "VADD":
            b, a = _vector(self._pop()), _vector(self._pop())
            if len(a) != len(b):
                raise Trap("dimension mismatch")
            s.append(tuple(x + y for x, y in zip(a, b)))
        elif op == "VSCALE":
            k, v = _scalar(self._pop()), _vector(self._pop())
            s.append(tuple(x * k for x in v))
        elif op == "SIGMOID":
            s.append(_sigmoid(_scalar(self._pop())))
        elif op == "DUP":
            v = self._pop()
            s += [v, v]
        elif op == "SWAP":
            b, a = self._pop(), self._pop()
            s += [b, a]
        elif op == "POP":
            self._pop()
        elif op == "LOAD":
            s.append(self.store.read(self, arg))
            self.trace.record("store_read")
        elif op == "STORE":
            self.store.write(self, arg, self._pop())
            self.trace.record("store_write")
        elif op == "BEGIN":
            if not self.store.try_begin(self):
                raise Trap("store locked")
        elif op == "COMMIT":
            self.store.commit(self)
            self.trace.record("commit")
        elif op == "ABORT":
            self.store.abort(self)
        elif op == "JMP":
            nxt = arg
        elif op == "JZ":
            if _scalar(self._pop()) == 0.0:
                nxt = arg
        elif op == "EMIT":
            self.gate.emit(self._pop())
            self.trace.record("emit")
        elif op == "HALT":
            return True
        self.pc = nxt
        return False


@dataclass
class VMEnv:
    inputs: InputChannel
    store: ObjectStore
    gate: OutputGate
    step_budget: int = DEFAULT_STEP_BUDGET
    trace: OpTrace | None = None
    crash_at: int | None = None


def execute(program: Program, env: VMEnv) -> ExecResult:
    m = Machine(program, env.inputs, env.store, env.gate, env.step_budget, env.trace, env.crash_at)
    try:
        return m.run()
    finally:
        env.gate.close()


# --- training / query drivers ------------------------------------------------


@dataclass
class TrainingRun:
    params: dict
    status: str
    steps: int
    reason: str
    trace: OpTrace
    depths: list[int]
    emitted: bytes


def zero_init(program: Program, records) -> dict:
    """Zero vectors (feature dimension) for every name the program LOADs."""
    dim = len(records[0][0]) if records else 0
    return {arg: (0.0,) * dim for op, arg in program.instructions if op == "LOAD"}


def run_training(
    program: Program,
    records,
    epochs: int,
    rng: crypto.Rng,
    *,
    store: ObjectStore | None = None,
    init: dict | None = None,
    dummy_p: float = 0.0,
    depth_range=(1, 8),
    step_budget: int = DEFAULT_STEP_BUDGET,
    crash_at: int | None = None,
) -> TrainingRun:
    """Run ``program`` once per epoch over the records (order shuffled per epoch).

    ``rng`` is split into the ``algorithm``, ``buffer`` and ``dummy`` streams.
    """
    if program.kind != "Training":
        raise GateRefusal("run_training needs a Training program")
    records = [(tuple(float(v) for v in x), float(y)) for x, y in records]
    algo, buf, dummy = rng.split("algorithm"), rng.split("buffer"), rng.split("dummy")
    if store is None:
        store = ObjectStore(zero_init(program, records) if init is None else init)
    store.attach(program)
    trace = OpTrace(dummy_p, dummy, store)
    gate = OutputGate(program)
    steps, depths = 0, []
    res = ExecResult(HALTED, 0)
    for _ in range(epochs):
        order = list(records)
        algo.shuffle(order)
        channel = InputChannel(order, depth_range, buf, trace)
        depths.append(channel.depth)
        remaining_crash = None if crash_at is None else crash_at - steps
        m = Machine(program, channel, store, gate, step_budget, trace, remaining_crash)
        res = m.run()
        steps += res.steps
        if res.status != HALTED:
            break
    gate.close()
    return TrainingRun(store.params(), res.status, steps, res.reason, trace, depths, bytes(gate.emitted))


def run_query(program: Program, records, params: dict, registered_hashes, *, rng: crypto.Rng | None = None,
              step_budget: int = DEFAULT_STEP_BUDGET) -> tuple[ExecResult, bytes]:
    """Execute a registered Query program; refuse before running otherwise."""
    gate = OutputGate(program, registered_hashes)
    if not gate.open:
        gate.close()
        raise GateRefusal("query program is not registered on chain")
    rng = rng or crypto.Rng(0)
    store = ObjectStore(params)
    trace = OpTrace(0.0, rng.split("dummy"), store)
    channel = InputChannel(records, (1, 8), rng.split("buffer"), trace)
    res = execute(program, VMEnv(channel, store, gate, step_budget, trace))
    return res, bytes(gate.emitted)


def shared_store_training(programs, shards, store: ObjectStore, epochs: int, rng: crypto.Rng,
                          step_budget: int = DEFAULT_STEP_BUDGET) -> dict:
    """k machines, one per shard, interleaved by a seeded scheduler over one store."""
    if len(programs) != len(shards):
        raise ValueError("one program per shard")
    for p in programs:
        store.attach(p)
    sched = rng.split("scheduler")
    for e in range(epochs):
        machines = []
        for i, (p, shard) in enumerate(zip(programs, shards)):
            sub = rng.split(f"instance-{i}-epoch-{e}")
            order = [(tuple(float(v) for v in x), float(y)) for x, y in shard]
            sub.split("algorithm").shuffle(order)
            trace = OpTrace(0.0, sub.split("dummy"), store)
            machines.append(
                Machine(p, InputChannel(order, (1, 8), sub.split("buffer"), trace), store, OutputGate(p), step_budget, trace)
            )
        live = list(machines)
        while live:
            m = sched.choice(live)
            if not m.step():
                live.remove(m)
        for m in machines:
            m.gate.close()
            if m.result.status != HALTED:
                raise Trap(f"instance failed: {m.result.status} {m.result.reason}")
    return store.params()
