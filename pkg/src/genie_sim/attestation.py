"""Simulated SGX trust root: CPUs, quotes, the IAS and the service-provider proxy.

EPID group signatures are modelled as per-CPU Ed25519 keys whose public
halves are known only to the attestation service.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

from . import crypto
from .encoding import framed, u64

OK = "OK"
INVALID = "INVALID"


@dataclass(frozen=True)
class CpuIdentity:
    cpu_id: int
    cpu_secret: bytes = field(repr=False)
    cpu_public: bytes = field(repr=False)


@dataclass(frozen=True)
class Quote:
    measurement: bytes
    enclave_pubkey: bytes
    nonce: bytes
    cpu_signature: bytes

    @staticmethod
    def body(measurement: bytes, enclave_pubkey: bytes, nonce: bytes) -> bytes:
        return framed(b"genie-quote", measurement, enclave_pubkey, nonce)


@dataclass(frozen=True)
class AttestationReport:
    measurement: bytes
    enclave_pubkey: bytes
    nonce: bytes
    verdict: str
    timestamp: int
    ias_signature: bytes

    def body(self) -> bytes:
        return framed(
            b"genie-ias-report", self.measurement, self.enclave_pubkey, self.nonce,
            self.verdict.encode(), u64(self.timestamp),
        )

    def serialize(self) -> bytes:
        """Fixed-field hex text record, one ``name=value`` per line."""
        lines = [
            f"measurement={self.measurement.hex()}",
            f"enclave_pubkey={self.enclave_pubkey.hex()}",
            f"nonce={self.nonce.hex()}",
            f"verdict={self.verdict}",
            f"timestamp={self.timestamp}",
            f"ias_signature={self.ias_signature.hex()}",
        ]
        return ("\n".join(lines) + "\n").encode()

    @classmethod
    def parse(cls, data: bytes) -> "AttestationReport":
        kv = dict(line.split("=", 1) for line in data.decode().splitlines())
        return cls(
            bytes.fromhex(kv["measurement"]),
            bytes.fromhex(kv["enclave_pubkey"]),
            bytes.fromhex(kv["nonce"]),
            kv["verdict"],
            int(kv["timestamp"]),
            bytes.fromhex(kv["ias_signature"]),
        )

    def digest(self) -> crypto.Digest:
        return crypto.digest(self.serialize())


class AttestationService:
    """Mock IAS.  Holds the private CPU registry and the report-signing key."""

    def __init__(self, rng: crypto.Rng, clock=None):
        self._key = crypto.keygen(rng)
        self._cpus: dict[int, bytes] = {}
        self._clock = clock

    @property
    def public(self) -> bytes:
        return self._key.public

    def manufacture_cpu(self, rng: crypto.Rng) -> CpuIdentity:
        kp = crypto.keygen(rng)
        cpu = CpuIdentity(len(self._cpus), kp.secret, kp.public)
        self._cpus[cpu.cpu_id] = kp.public
        return cpu

    def _registered_cpu_publics(self) -> list[bytes]:
        # test hook: the only place CPU public keys are visible
        return list(self._cpus.values())

    def ias_verify(self, quote: Quote) -> AttestationReport:
        body = Quote.body(quote.measurement, quote.enclave_pubkey, quote.nonce)
        genuine = any(crypto.verify(pk, body, quote.cpu_signature) for pk in self._cpus.values())
        ts = self._clock.now if self._clock is not None else 0
        unsigned = AttestationReport(
            quote.measurement, quote.enclave_pubkey, quote.nonce, OK if genuine else INVALID, ts, b""
        )
        return replace(unsigned, ias_signature=crypto.sign(self._key.secret, unsigned.body()).value)


def manufacture_cpu(ias: AttestationService, rng: crypto.Rng) -> CpuIdentity:
    return ias.manufacture_cpu(rng)


def generate_quote(cpu: CpuIdentity, image: bytes, enclave_pubkey: bytes, nonce: bytes) -> Quote:
    if not image:
        raise ValueError("enclave image must be non-empty")
    m = crypto.digest(image).value
    sig = crypto.sign(cpu.cpu_secret, Quote.body(m, enclave_pubkey, nonce)).value
    return Quote(m, enclave_pubkey, nonce, sig)


class ServiceProvider:
    """Pure proxy in front of the IAS; keeps a log of exchanges."""

    def __init__(self, ias: AttestationService):
        self._ias = ias
        self.log: list[tuple[Quote, AttestationReport]] = []

    def sp_forward(self, quote: Quote) -> AttestationReport:
        report = self._ias.ias_verify(quote)
        self.log.append((quote, report))
        return report


def verify_report(
    report: AttestationReport,
    ias_public: bytes,
    *,
    nonce: bytes | None = None,
    enclave_pubkey: bytes | None = None,
    measurement: bytes | None = None,
) -> bool:
    """True iff the IAS signature is valid, the verdict is OK and optional bindings match."""
    if not crypto.verify(ias_public, report.body(), report.ias_signature):
        return False
    if report.verdict != OK:
        return False
    if nonce is not None and report.nonce != nonce:
        return False
    if enclave_pubkey is not None and report.enclave_pubkey != enclave_pubkey:
        return False
    if measurement is not None and report.measurement != measurement:
        return False
    return True
