"""Simulated enclaves: identity, sealing, encrypted paging, secure channels and
the Validation / Training / Query state machines.

Everything that leaves an enclave goes through ``Wire`` so tests can scan all
inter-module traffic for plaintext.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

from . import crypto, vm
from .attestation import CpuIdentity, generate_quote
from .contracts import (
    REPORT_FIELDS,
    consume_message,
    receipt_message,
    report_hash,
    validation_message,
)
from .encoding import canonical_json, framed, unframe

PAGE_SIZE = 4096
KINDS = ("Validation", "Training", "Query")
DATASET_MAGIC = "#genie-dataset v1"


class ChannelError(Exception):
    pass


class EnclaveError(Exception):
    pass


class IngestRejected(EnclaveError):
    pass


class QueryRefused(EnclaveError):
    pass


class Wire:
    """Log of every byte string crossing an enclave or actor boundary."""

    def __init__(self):
        self.records: list[tuple[str, bytes]] = []

    def record(self, channel: str, data: bytes) -> bytes:
        self.records.append((channel, bytes(data)))
        return data

    def contains(self, needle: bytes) -> bool:
        return any(needle in d for _, d in self.records)


# --- data types -------------------------------------------------------------


@dataclass(frozen=True)
class Dataset:
    genotype: tuple[tuple[str, int], ...]
    phenotype: tuple[tuple[str, float], ...]
    owner_tag: str = ""

    @classmethod
    def build(cls, genotype: dict, phenotype: dict, owner_tag: str = "") -> "Dataset":
        return cls(
            tuple(sorted((str(k), int(v)) for k, v in genotype.items())),
            tuple(sorted((str(k), float(v)) for k, v in phenotype.items())),
            owner_tag,
        )

    def canonical(self) -> bytes:
        """Header, ``rsid<TAB>dosage`` lines sorted by rsid, ``trait<TAB>value`` lines sorted by trait."""
        lines = [f"{DATASET_MAGIC} snps={len(self.genotype)} traits={len(self.phenotype)}"]
        lines += [f"{r}\t{d}" for r, d in sorted(self.genotype)]
        lines += [f"{t}\t{v!r}" for t, v in sorted(self.phenotype)]
        return ("\n".join(lines) + "\n").encode()

    @classmethod
    def parse(cls, data: bytes, owner_tag: str = "") -> "Dataset":
        lines = data.decode().split("\n")
        if lines[-1] != "":
            raise ValueError("dataset must end with LF")
        head = lines[0].split(" ")
        if " ".join(head[:2]) != DATASET_MAGIC or len(head) != 4:
            raise ValueError("bad dataset header")
        n = int(head[2].removeprefix("snps="))
        m = int(head[3].removeprefix("traits="))
        body = lines[1:-1]
        if len(body) != n + m:
            raise ValueError("line count does not match header")
        geno = tuple((r, int(d)) for r, d in (ln.split("\t") for ln in body[:n]))
        pheno = tuple((t, float(v)) for t, v in (ln.split("\t") for ln in body[n:]))
        return cls(geno, pheno, owner_tag)

    def fingerprint(self) -> crypto.Digest:
        return crypto.digest(self.canonical())

    def dosages(self) -> dict[str, int]:
        return dict(self.genotype)

    def traits(self) -> dict[str, float]:
        return dict(self.phenotype)

    def record(self, panel, trait: str | None):
        g = self.dosages()
        label = self.traits().get(trait, 0.0) if trait else 0.0
        return tuple(float(g[r]) for r in panel), float(label)

    def covers(self, panel, traits) -> bool:
        g, p = self.dosages(), self.traits()
        return all(r in g for r in panel) and all(t in p for t in traits)


@dataclass(frozen=True)
class EnclaveImage:
    """Enclave binary.  One image may support several enclave kinds."""

    kinds: tuple[str, ...]
    code: bytes
    version: str = "1"

    def to_bytes(self) -> bytes:
        return framed(b"genie-enclave-image", self.version.encode(), ",".join(self.kinds).encode(), self.code)

    @property
    def measurement(self) -> bytes:
        return crypto.digest(self.to_bytes()).value


@dataclass(frozen=True)
class ValidationReport:
    data_fingerprint: bytes
    quality: int
    verdict: str
    validator_pubkey: bytes
    validator_measurement: bytes
    enclave_sig: bytes

    def fields(self) -> dict:
        return {
            "data_fingerprint": self.data_fingerprint.hex(),
            "quality": self.quality,
            "verdict": self.verdict,
            "validator_pubkey": self.validator_pubkey.hex(),
            "validator_measurement": self.validator_measurement.hex(),
            "enclave_sig": self.enclave_sig.hex(),
        }

    @classmethod
    def from_fields(cls, f: dict) -> "ValidationReport":
        if set(f) != set(REPORT_FIELDS):
            raise ValueError("report fields mismatch")
        return cls(
            bytes.fromhex(f["data_fingerprint"]), int(f["quality"]), f["verdict"],
            bytes.fromhex(f["validator_pubkey"]), bytes.fromhex(f["validator_measurement"]),
            bytes.fromhex(f["enclave_sig"]),
        )

    @property
    def report_hash(self) -> bytes:
        return report_hash(self.fields())

    def signature_ok(self) -> bool:
        return crypto.verify(self.validator_pubkey, validation_message(self.fields()), self.enclave_sig)


@dataclass(frozen=True)
class DonorReceipt:
    model_id: bytes
    owner: bytes
    quality: int
    enclave_sig: bytes


@dataclass(frozen=True)
class SealedBlob:
    ciphertext: bytes
    measurement_tag: bytes


@dataclass(frozen=True)
class TrainingGrant:
    """Trainer's authorization to move a trained model into an enclave of ``measurement``."""

    model_id: bytes
    measurement: bytes
    trainer: bytes
    signature: bytes

    @staticmethod
    def message(model_id: bytes, measurement: bytes) -> bytes:
        return b"genie-grant|" + model_id + measurement

    @classmethod
    def issue(cls, trainer_kp: crypto.KeyPair, model_id: bytes, measurement: bytes) -> "TrainingGrant":
        sig = crypto.sign(trainer_kp.secret, cls.message(model_id, measurement)).value
        return cls(model_id, measurement, trainer_kp.public, sig)


@dataclass
class ValidatorConfig:
    heterozygosity: tuple[float, float] = (0.15, 0.60)
    trait_ranges: dict = field(default_factory=dict)  # trait -> (lo, hi); unlisted traits unchecked
    requested_traits: tuple[str, ...] = ()
    quality_thresholds: tuple[float, ...] = (0.2, 0.4, 0.6, 0.8)


def quality_level(completeness: float, thresholds=(0.2, 0.4, 0.6, 0.8)) -> int:
    return 1 + sum(completeness >= t for t in thresholds)


def seal_to(pubkey: bytes, plaintext: bytes, rng: crypto.Rng, wire: Wire | None = None) -> bytes:
    """Client side of the secure channel: encrypt to an attested enclave key."""
    ct = crypto.pk_encrypt(pubkey, plaintext, rng)
    if wire is not None:
        wire.record("channel", ct)
    return ct


# --- the enclave ------------------------------------------------------------


class Enclave:
    """One launched enclave instance; single-threaded, one request at a time."""

    def __init__(self, cpu: CpuIdentity, image: EnclaveImage, kind: str, rng: crypto.Rng, *,
                 chain=None, wire: Wire | None = None, validator: ValidatorConfig | None = None, submit=None):
        if kind not in image.kinds:
            raise EnclaveError(f"image does not support kind {kind}")
        self.kind = kind
        self.image = image
        self._cpu = cpu
        self.measurement = image.measurement
        self._rng = rng
        self._identity = crypto.keygen(rng.split("identity"))
        self.session_mem_key = crypto.kdf(rng.split("memory").bytes(32), "memory")
        self._sealing_key = crypto.kdf(cpu.cpu_secret + self.measurement, "seal")
        self._nonces = rng.split("nonces")
        self.chain = chain
        self.wire = wire if wire is not None else Wire()
        self.validator = validator or ValidatorConfig()
        self._submit = submit
        self._held: dict[bytes, Dataset] = {}
        self._params: dict | None = None
        self._query_program: vm.Program | None = None
        self.model_id: bytes | None = None
        self.features: tuple[str, ...] = ()
        self.validated: set[bytes] = set()
        self.receipts: list[tuple[DonorReceipt, ValidationReport]] = []
        self.query_log: list[bytes] = []  # code hashes answered
        self.external_out = 0
        self.vm_steps = 0

    @property
    def pubkey(self) -> bytes:
        return self._identity.public

    def quote(self, nonce: bytes):
        return generate_quote(self._cpu, self.image.to_bytes(), self.pubkey, nonce)

    # internal helpers

    def _out(self, channel: str, data: bytes) -> bytes:
        self.external_out += len(data)
        return self.wire.record(channel, data)

    def _open(self, ciphertext: bytes) -> bytes:
        self.wire.record("channel", ciphertext)
        try:
            return crypto.pk_decrypt(self._identity.secret, ciphertext)
        except crypto.DecryptionError as exc:
            raise ChannelError("cannot open secure-channel message") from exc

    def _sign(self, message: bytes) -> bytes:
        return crypto.sign(self._identity.secret, message).value

    def _require(self, *kinds):
        if self.kind not in kinds:
            raise EnclaveError(f"operation not available in a {self.kind} enclave")

    @property
    def contracts(self):
        if self.chain is None:
            raise EnclaveError("enclave has no chain access")
        return self.chain.contracts

    # --- validation ---------------------------------------------------------

    def validate_data(self, ciphertext: bytes) -> tuple[bytes, ValidationReport]:
        """Request: framed(reply_pubkey, canonical dataset).

        Returns the processed dataset encrypted to the reply key, and a signed
        report.  A Fake verdict is a normal outcome.
        """
        self._require("Validation")
        reply, raw = unframe(self._open(ciphertext))
        verdict, ds = "Valid", None
        try:
            ds = Dataset.parse(raw)
        except (ValueError, UnicodeDecodeError):
            verdict = "Fake"
        fp = crypto.digest(raw)
        if ds is not None and not self._plausible(ds):
            verdict = "Fake"
        if ds is not None and ds.canonical() != raw:
            verdict = "Fake"
        if fp.value in self.validated:
            verdict = "Fake"
        cfg = self.validator
        if ds is not None and cfg.requested_traits:
            present = sum(t in ds.traits() for t in cfg.requested_traits)
            completeness = present / len(cfg.requested_traits)
        else:
            completeness = 1.0 if ds is not None else 0.0
        quality = quality_level(completeness, cfg.quality_thresholds)
        if verdict == "Valid":
            self.validated.add(fp.value)
        fields = {
            "data_fingerprint": fp.hex(),
            "quality": quality,
            "verdict": verdict,
            "validator_pubkey": self.pubkey.hex(),
            "validator_measurement": self.measurement.hex(),
        }
        sig = self._sign(validation_message(fields))
        report = ValidationReport(fp.value, quality, verdict, self.pubkey, self.measurement, sig)
        self._out("report", canonical_json(report.fields()))
        processed = crypto.pk_encrypt(reply, raw, self._nonces)
        return self._out("channel", processed), report

    def _plausible(self, ds: Dataset) -> bool:
        rsids = [r for r, _ in ds.genotype]
        if not rsids or len(set(rsids)) != len(rsids):
            return False
        if any(d not in (0, 1, 2) for _, d in ds.genotype):
            return False
        het = sum(d == 1 for _, d in ds.genotype) / len(ds.genotype)
        lo, hi = self.validator.heterozygosity
        if not lo <= het <= hi:
            return False
        for trait, v in ds.phenotype:
            rng = self.validator.trait_ranges.get(trait)
            if rng is not None and not rng[0] <= v <= rng[1]:
                return False
        return True

    # --- training -----------------------------------------------------------

    def ingest_donor_data(self, ciphertext: bytes, report: ValidationReport, model_id: bytes) -> DonorReceipt:
        """Request: framed(owner chain id, canonical dataset)."""
        self._require("Training")
        owner, raw = unframe(self._open(ciphertext))
        if not report.signature_ok():
            raise IngestRejected("validation report signature invalid")
        if report.verdict != "Valid":
            raise IngestRejected("report verdict is not Valid")
        signer = self.contracts.instance(report.validator_pubkey)
        if signer is None or signer["kind"] != "Validation":
            raise IngestRejected("report not signed by a registered Validation enclave")
        if self.contracts.active_registration(owner.hex(), report.report_hash.hex()) is None:
            raise IngestRejected("data registration is not active")
        if crypto.digest(raw).value != report.data_fingerprint:
            raise IngestRejected("dataset does not match the validated fingerprint")
        model = self.contracts.model(model_id)
        if model is None or model.training_enclave != self.pubkey.hex():
            raise IngestRejected("model is not bound to this enclave")
        self._held[owner] = Dataset.parse(raw)
        self.model_id = model_id
        sig = self._sign(receipt_message(model_id, owner, report.quality))
        receipt = DonorReceipt(model_id, owner, report.quality, sig)
        self.receipts.append((receipt, report))
        self._out("receipt", framed(model_id, owner, bytes([report.quality]), sig))
        return receipt

    def held_count(self) -> int:
        """Test hook: number of donor datasets currently inside the enclave."""
        return len(self._held)

    def drop_donor(self, owner: bytes) -> None:
        self._held.pop(owner, None)

    def train(self, program: vm.Program, epochs: int, rng: crypto.Rng, *, features, label: str,
              query_program: vm.Program | None = None, dummy_p: float = 0.1, depth_range=(1, 8)) -> dict:
        """Train on every held dataset, then purge them whatever the outcome."""
        self._require("Training")
        if not self._held:
            raise EnclaveError("no donor data held")
        if program.kind != "Training":
            raise EnclaveError("training needs a Training program")
        out_before = self.external_out
        try:
            model = self.contracts.model(self.model_id) if self.model_id else None
            if model is not None:
                # donors who withdrew since ingest are dropped before any use
                active = {bytes.fromhex(d.owner) for d in model.donors if not d.withdrawn}
                for owner in [o for o in self._held if o not in active]:
                    del self._held[owner]
            if not self._held:
                raise EnclaveError("every donor withdrew")
            records = [self._held[o].record(features, label) for o in sorted(self._held)]
            run = vm.run_training(program, records, epochs, rng, dummy_p=dummy_p, depth_range=depth_range)
            if run.emitted or self.external_out != out_before:
                raise EnclaveError("training produced external output")
            summary = {"status": run.status, "reason": run.reason, "steps": run.steps, "donors_used": len(records)}
            if run.status == vm.HALTED:
                self._params = run.params
                self.features = tuple(features)
                self._query_program = query_program
        finally:
            self._held.clear()
        return summary

    def trained(self) -> bool:
        return self._params is not None

    def load_query_program(self, program: vm.Program) -> None:
        self._query_program = program

    def export_trained(self) -> SealedBlob:
        if self._params is None:
            raise EnclaveError("no trained model")
        body = canonical_json(
            {
                "model_id": self.model_id.hex(),
                "features": list(self.features),
                "params": {k: list(v) if isinstance(v, tuple) else v for k, v in self._params.items()},
            }
        )
        return self.seal(body)

    def import_trained(self, blob: SealedBlob, grant: TrainingGrant) -> None:
        if grant.measurement != self.measurement:
            raise EnclaveError("grant names a different measurement")
        model = self.contracts.model(grant.model_id)
        if model is None or model.trainer != grant.trainer.hex():
            raise EnclaveError("grant not issued by the model trainer")
        if not crypto.verify(grant.trainer, TrainingGrant.message(grant.model_id, grant.measurement), grant.signature):
            raise EnclaveError("bad grant signature")
        body = json.loads(self.unseal(blob))
        if bytes.fromhex(body["model_id"]) != grant.model_id:
            raise EnclaveError("sealed model does not match grant")
        self.model_id = grant.model_id
        self.features = tuple(body["features"])
        self._params = {k: tuple(v) if isinstance(v, list) else v for k, v in body["params"].items()}

    def params_digest(self) -> bytes:
        """Test hook: digest of the in-enclave parameters."""
        return crypto.digest(canonical_json({k: list(v) if isinstance(v, tuple) else v for k, v in (self._params or {}).items()})).value

    # --- query --------------------------------------------------------------

    def query(self, ciphertext: bytes) -> bytes:
        """Request: framed(access code secret, canonical dataset, reply pubkey).

        Pays out through ``consume_and_distribute`` submitted via the host.
        """
        self._require("Query", "Training")
        secret, raw, reply = unframe(self._open(ciphertext))
        if self._params is None:
            raise QueryRefused("no trained model")
        code_hash = crypto.digest(secret).value
        rec = self.contracts.verify_payment(code_hash)
        if rec is None or rec["status"] != "Paid":
            raise QueryRefused("access code not paid")
        if rec["model_id"] != self.model_id.hex():
            raise QueryRefused("access code is for another model")
        if self._query_program is None:
            raise QueryRefused("no query program loaded")
        ds = Dataset.parse(raw)
        if not ds.covers(self.features, ()):
            raise QueryRefused("dataset lacks the model's features")
        try:
            res, emitted = vm.run_query(
                self._query_program, [ds.record(self.features, None)], self._params,
                self.contracts.registered_query_hashes(), rng=self._rng.split(f"query-{code_hash.hex()}"),
            )
        except vm.GateRefusal as exc:
            raise QueryRefused(str(exc)) from exc
        self.vm_steps += res.steps
        if res.status != vm.HALTED:
            raise QueryRefused(f"query program failed: {res.status} {res.reason}")
        sig = self._sign(consume_message(code_hash))
        if self._submit is not None:
            self._submit("token", "consume_and_distribute", {"code_hash": code_hash.hex(), "enclave_sig": sig.hex()})
        self.query_log.append(code_hash)
        reply_ct = crypto.pk_encrypt(reply, emitted, self._nonces)
        return self._out("channel", reply_ct)

    def consume_signature(self, code_hash: bytes) -> bytes:
        return self._sign(consume_message(code_hash))

    # --- sealing and paging -------------------------------------------------

    def seal(self, data: bytes) -> SealedBlob:
        ct = crypto.sym_encrypt(self._sealing_key, data, self._nonces)
        self.wire.record("sealed", ct)
        return SealedBlob(ct, self.measurement)

    def unseal(self, blob: SealedBlob) -> bytes:
        try:
            return crypto.sym_decrypt(self._sealing_key, blob.ciphertext)
        except crypto.DecryptionError as exc:
            raise EnclaveError("unseal failed: wrong enclave or CPU") from exc

    def page_out(self, page: bytes) -> bytes:
        if len(page) != PAGE_SIZE:
            raise ValueError(f"page must be {PAGE_SIZE} bytes")
        ct = crypto.sym_encrypt(self.session_mem_key, page, self._nonces)
        return self.wire.record("page", ct)

    def page_in(self, ciphertext: bytes) -> bytes:
        try:
            return crypto.sym_decrypt(self.session_mem_key, ciphertext)
        except crypto.DecryptionError as exc:
            raise EnclaveError("page_in failed: stale or tampered page") from exc


def launch(cpu: CpuIdentity, image: EnclaveImage, kind: str, rng: crypto.Rng, **kw) -> Enclave:
    return Enclave(cpu, image, kind, rng, **kw)
