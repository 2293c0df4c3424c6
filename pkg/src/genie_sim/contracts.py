"""Registry and token/escrow contracts executed by the ledger.

Contract calls are JSON records ``{"contract", "op", "args"}`` with all byte
values hex-encoded.  Arguments per operation (sorted-key JSON on the wire):

registry
  register_package   source_hash, measurement
  register_audit     measurement, report_hash
  register_instance  measurement, enclave_pubkey, ias_report_hash, kind
  register_data      report (ValidationReport fields, see ``report_fields``)
  withdraw_data      report_hash
  register_model     whitepaper_hash, training_enclave, price, split,
                     query_program_hash
  register_donor     model_id, owner, quality, enclave_sig
  withdraw_donor     model_id
  set_model_status   model_id, new_status, runner_enclave (optional)
token
  purchase_access_code  model_id, code_hash, amount
  consume_and_distribute code_hash, enclave_sig

Operations raise :class:`ContractError`; the ledger rolls the state back.
"""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

from . import crypto
from .encoding import canonical_json

KINDS = ("Validation", "Training", "Query")
STATUS_ORDER = ("Recruiting", "Training", "Trained")
BP_TOTAL = 10_000

REPORT_FIELDS = (
    "data_fingerprint",
    "quality",
    "verdict",
    "validator_pubkey",
    "validator_measurement",
    "enclave_sig",
)


class ContractError(Exception):
    pass


# signed message formats; enclaves produce them, contracts verify them


def receipt_message(model_id: bytes, owner: bytes, quality: int) -> bytes:
    return b"genie-receipt|" + model_id + owner + bytes([quality])


def consume_message(code_hash: bytes) -> bytes:
    return b"genie-consume|" + code_hash


def validation_message(fields: dict) -> bytes:
    body = {k: fields[k] for k in REPORT_FIELDS if k != "enclave_sig"}
    return b"genie-validation|" + canonical_json(body)


def report_hash(fields: dict) -> bytes:
    return crypto.digest(canonical_json({k: fields[k] for k in REPORT_FIELDS})).value


def model_id_for(whitepaper_hash: bytes, trainer: bytes) -> bytes:
    return crypto.digest(b"genie-model|" + whitepaper_hash + trainer).value


@dataclass
class SplitSpec:
    trainer_bp: int
    runner_bp: int
    donor_pool_bp: int

    def check(self) -> None:
        parts = (self.trainer_bp, self.runner_bp, self.donor_pool_bp)
        if any(not isinstance(p, int) or p < 0 for p in parts):
            raise ContractError("split parts must be non-negative integers")
        if sum(parts) != BP_TOTAL:
            raise ContractError(f"split sums to {sum(parts)}, expected {BP_TOTAL}")


def distribute(amount: int, split: SplitSpec, qualities: list[int]) -> tuple[int, int, list[int]]:
    """Return (trainer, runner, per-donor) credits; flooring remainder goes to the trainer.

    ``qualities`` lists active donors only.  With no active donors the pool
    falls through to the trainer as remainder.
    """
    trainer = amount * split.trainer_bp // BP_TOTAL
    runner = amount * split.runner_bp // BP_TOTAL
    pool = amount * split.donor_pool_bp // BP_TOTAL
    total_q = sum(qualities)
    donors = [pool * q // total_q for q in qualities] if total_q else []
    trainer += amount - trainer - runner - sum(donors)
    return trainer, runner, donors


@dataclass
class Donor:
    owner: str
    quality: int
    receipt_hash: str
    withdrawn: bool = False


@dataclass
class ModelRecord:
    model_id: str
    trainer: str
    whitepaper_hash: str
    status: str
    training_enclave: str
    price: int
    split: SplitSpec
    query_program_hash: str
    runner_enclave: str | None = None
    donors: list[Donor] = field(default_factory=list)


@dataclass
class ContractState:
    packages: dict = field(default_factory=dict)  # measurement -> {source_hash, developer, audits}
    instances: dict = field(default_factory=dict)  # enclave_pubkey -> {...}
    data: list = field(default_factory=list)  # {owner, report_hash, status, report}
    models: dict = field(default_factory=dict)  # model_id -> ModelRecord
    balances: dict = field(default_factory=dict)
    escrow: dict = field(default_factory=dict)
    codes: dict = field(default_factory=dict)  # code_hash -> AccessCode dict
    distributions: dict = field(default_factory=dict)  # code_hash -> [credit]


def _hex(args: dict, key: str, size: int = 32) -> str:
    v = args.get(key)
    if not isinstance(v, str):
        raise ContractError(f"missing argument {key}")
    try:
        raw = bytes.fromhex(v)
    except ValueError as exc:
        raise ContractError(f"argument {key} is not hex") from exc
    if len(raw) != size:
        raise ContractError(f"argument {key} must be {size} bytes")
    return v


def _int(args: dict, key: str) -> int:
    v = args.get(key)
    if not isinstance(v, int) or isinstance(v, bool):
        raise ContractError(f"argument {key} must be an integer")
    return v


class Contracts:
    """Deterministic state machine for both contracts."""

    OPS = {
        "registry": (
            "register_package",
            "register_audit",
            "register_instance",
            "register_data",
            "withdraw_data",
            "register_model",
            "register_donor",
            "withdraw_donor",
            "set_model_status",
        ),
        "token": ("purchase_access_code", "consume_and_distribute"),
    }

    def __init__(self, allocation: dict[bytes, int] | None = None):
        self.state = ContractState()
        for acct, amount in (allocation or {}).items():
            if amount < 0:
                raise ValueError("allocation must be non-negative")
            self.state.balances[acct.hex()] = amount
        self.initial_mint = sum(self.state.balances.values())

    def knows(self, contract: str, op: str) -> bool:
        return op in self.OPS.get(contract, ())

    def snapshot(self) -> ContractState:
        return copy.deepcopy(self.state)

    def restore(self, snap: ContractState) -> None:
        self.state = snap

    def state_bytes(self) -> bytes:
        return canonical_json(asdict(self.state))

    def execute(self, sender: bytes, call: dict) -> dict:
        """Apply one call; on error the state is left untouched."""
        contract, op = call.get("contract"), call.get("op")
        if not self.knows(contract, op):
            raise ContractError(f"unknown operation {contract}.{op}")
        args = call.get("args")
        if not isinstance(args, dict):
            raise ContractError("args must be a record")
        snap = self.snapshot()
        try:
            return getattr(self, "_" + op)(sender.hex(), args) or {}
        except ContractError:
            self.restore(snap)
            raise
        except (KeyError, TypeError, ValueError) as exc:
            self.restore(snap)
            raise ContractError(f"malformed call: {exc}") from exc

    # --- registry ---------------------------------------------------------

    def _register_package(self, caller, args):
        m = _hex(args, "measurement")
        src = _hex(args, "source_hash")
        if m in self.state.packages:
            raise ContractError("duplicate measurement")
        self.state.packages[m] = {"source_hash": src, "developer": caller, "audits": []}

    def _register_audit(self, caller, args):
        m = _hex(args, "measurement")
        rh = _hex(args, "report_hash")
        if m not in self.state.packages:
            raise ContractError("unknown measurement")
        self.state.packages[m]["audits"].append({"auditor": caller, "report_hash": rh})

    def _register_instance(self, caller, args):
        m = _hex(args, "measurement")
        pk = _hex(args, "enclave_pubkey")
        ias = _hex(args, "ias_report_hash")
        kind = args.get("kind")
        if kind not in KINDS:
            raise ContractError(f"unknown enclave kind {kind!r}")
        pkg = self.state.packages.get(m)
        if pkg is None:
            raise ContractError("unknown measurement")
        if not pkg["audits"]:
            raise ContractError("package has no audit")
        if pk in self.state.instances:
            raise ContractError("duplicate enclave_pubkey")
        self.state.instances[pk] = {
            "measurement": m,
            "runner": caller,
            "ias_report_hash": ias,
            "kind": kind,
        }

    def _register_data(self, caller, args):
        report = args.get("report")
        if not isinstance(report, dict) or set(report) != set(REPORT_FIELDS):
            raise ContractError("report must carry exactly the validation report fields")
        if report["verdict"] != "Valid":
            raise ContractError("only Valid reports are registrable")
        validator = self.instance(report["validator_pubkey"])
        if validator is None or validator["kind"] != "Validation":
            raise ContractError("report signer is not a registered Validation enclave")
        if validator["measurement"] != report["validator_measurement"]:
            raise ContractError("validator measurement mismatch")
        sig = bytes.fromhex(report["enclave_sig"])
        if not crypto.verify(bytes.fromhex(report["validator_pubkey"]), validation_message(report), sig):
            raise ContractError("bad validation report signature")
        rh = report_hash(report).hex()
        if self.active_registration(caller, rh) is not None:
            raise ContractError("registration already active")
        self.state.data.append({"owner": caller, "report_hash": rh, "status": "Active", "report": report})
        return {"report_hash": rh}

    def _withdraw_data(self, caller, args):
        rh = _hex(args, "report_hash")
        rec = next(
            (d for d in self.state.data if d["report_hash"] == rh and d["status"] == "Active"),
            None,
        )
        if rec is None:
            raise ContractError("no active registration")
        if rec["owner"] != caller:
            raise ContractError("only the owner may withdraw")
        rec["status"] = "Withdrawn"

    def _register_model(self, caller, args):
        wp = _hex(args, "whitepaper_hash")
        te = _hex(args, "training_enclave")
        qh = _hex(args, "query_program_hash")
        price = _int(args, "price")
        if price < 0:
            raise ContractError("negative price")
        s = args.get("split")
        if not isinstance(s, dict):
            raise ContractError("split must be a record")
        split = SplitSpec(s.get("trainer_bp"), s.get("runner_bp"), s.get("donor_pool_bp"))
        split.check()
        inst = self.state.instances.get(te)
        if inst is None or inst["kind"] != "Training":
            raise ContractError("training_enclave is not a registered Training instance")
        mid = model_id_for(bytes.fromhex(wp), bytes.fromhex(caller)).hex()
        if mid in self.state.models:
            raise ContractError("duplicate model")
        self.state.models[mid] = ModelRecord(mid, caller, wp, "Recruiting", te, price, split, qh)
        return {"model_id": mid}

    def _register_donor(self, caller, args):
        mid = _hex(args, "model_id")
        owner = _hex(args, "owner")
        quality = _int(args, "quality")
        sig = _hex(args, "enclave_sig", crypto.SIG_SIZE)
        model = self._model(mid)
        if model.status not in ("Recruiting", "Training"):
            raise ContractError("model is not accepting donors")
        if caller != owner:
            raise ContractError("caller is not the receipt owner")
        if not 1 <= quality <= 5:
            raise ContractError("quality out of range")
        if not any(d["owner"] == caller and d["status"] == "Active" for d in self.state.data):
            raise ContractError("owner has no active data registration")
        msg = receipt_message(bytes.fromhex(mid), bytes.fromhex(owner), quality)
        if not crypto.verify(bytes.fromhex(model.training_enclave), msg, bytes.fromhex(sig)):
            raise ContractError("bad receipt signature")
        if any(d.owner == caller and not d.withdrawn for d in model.donors):
            raise ContractError("duplicate donor")
        receipt_hash = crypto.digest(msg + bytes.fromhex(sig)).hex()
        model.donors.append(Donor(caller, quality, receipt_hash))

    def _withdraw_donor(self, caller, args):
        model = self._model(_hex(args, "model_id"))
        if model.status == "Trained":
            raise ContractError("model already trained; data effects cannot be removed")
        donor = next((d for d in model.donors if d.owner == caller and not d.withdrawn), None)
        if donor is None:
            raise ContractError("caller is not an active donor")
        donor.withdrawn = True

    def _set_model_status(self, caller, args):
        model = self._model(_hex(args, "model_id"))
        new = args.get("new_status")
        if caller != model.trainer:
            raise ContractError("only the trainer may change status")
        if new not in STATUS_ORDER or STATUS_ORDER.index(new) != STATUS_ORDER.index(model.status) + 1:
            raise ContractError(f"illegal transition {model.status} -> {new}")
        if new == "Trained":
            runner = _hex(args, "runner_enclave")
            inst = self.state.instances.get(runner)
            if inst is None or inst["kind"] != "Query":
                raise ContractError("runner_enclave is not a registered Query instance")
            model.runner_enclave = runner
        model.status = new

    # --- token -------------------------------------------------------------

    def _purchase_access_code(self, caller, args):
        mid = _hex(args, "model_id")
        code = _hex(args, "code_hash")
        amount = _int(args, "amount")
        model = self._model(mid)
        if model.status not in ("Training", "Trained"):
            raise ContractError("model is not serving queries")
        if code in self.state.codes:
            raise ContractError("duplicate code_hash")
        if amount < model.price:
            raise ContractError("amount below price")
        if self.state.balances.get(caller, 0) < amount:
            raise ContractError("insufficient balance")
        self.state.balances[caller] -= amount
        self.state.escrow[code] = amount
        self.state.codes[code] = {
            "code_hash": code,
            "model_id": mid,
            "payer": caller,
            "amount": amount,
            "status": "Paid",
        }

    def _consume_and_distribute(self, caller, args):
        code = _hex(args, "code_hash")
        sig = _hex(args, "enclave_sig", crypto.SIG_SIZE)
        rec = self.state.codes.get(code)
        if rec is None or rec["status"] != "Paid":
            raise ContractError("access code is not Paid")
        model = self._model(rec["model_id"])
        signer = model.runner_enclave if model.status == "Trained" else model.training_enclave
        if not crypto.verify(bytes.fromhex(signer), consume_message(bytes.fromhex(code)), bytes.fromhex(sig)):
            raise ContractError("bad enclave signature")
        amount = self.state.escrow.pop(code)
        active = [d for d in model.donors if not d.withdrawn]
        t, r, ds = distribute(amount, model.split, [d.quality for d in active])
        credits = [{"to": model.trainer, "role": "trainer", "amount": t}]
        credits.append({"to": self.state.instances[signer]["runner"], "role": "runner", "amount": r})
        credits += [{"to": d.owner, "role": "donor", "amount": a} for d, a in zip(active, ds)]
        for c in credits:
            self.state.balances[c["to"]] = self.state.balances.get(c["to"], 0) + c["amount"]
        rec["status"] = "Consumed"
        self.state.distributions[code] = credits
        return {"credits": credits}

    # --- read-only views ---------------------------------------------------

    def _model(self, mid: str) -> ModelRecord:
        model = self.state.models.get(mid)
        if model is None:
            raise ContractError("unknown model")
        return model

    def model(self, model_id: bytes | str) -> ModelRecord | None:
        key = model_id.hex() if isinstance(model_id, bytes) else model_id
        return self.state.models.get(key)

    def instance(self, pubkey: bytes | str) -> dict | None:
        key = pubkey.hex() if isinstance(pubkey, bytes) else pubkey
        return self.state.instances.get(key)

    def package(self, measurement: bytes | str) -> dict | None:
        key = measurement.hex() if isinstance(measurement, bytes) else measurement
        return self.state.packages.get(key)

    def active_registration(self, owner: str, rh: str) -> dict | None:
        return next(
            (
                d
                for d in self.state.data
                if d["owner"] == owner and d["report_hash"] == rh and d["status"] == "Active"
            ),
            None,
        )

    def verify_payment(self, code_hash: bytes) -> dict | None:
        rec = self.state.codes.get(code_hash.hex())
        return dict(rec) if rec else None

    def is_trainer(self, account: bytes) -> bool:
        return any(m.trainer == account.hex() for m in self.state.models.values())

    def registered_query_hashes(self) -> set[str]:
        return {m.query_program_hash for m in self.state.models.values()}

    def total_tokens(self) -> int:
        return sum(self.state.balances.values()) + sum(self.state.escrow.values())

    def balance(self, account: bytes) -> int:
        return self.state.balances.get(account.hex(), 0)
