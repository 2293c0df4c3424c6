from dataclasses import replace

from genie_sim import crypto
from genie_sim.attestation import (
    INVALID,
    OK,
    AttestationReport,
    AttestationService,
    CpuIdentity,
    ServiceProvider,
    generate_quote,
    manufacture_cpu,
    verify_report,
)
from genie_sim.ledger import LogicalClock

IMAGE = b"enclave image v1"


def setup(seed=0):
    r = crypto.Rng(seed)
    ias = AttestationService(r.split("ias"), LogicalClock())
    return ias, manufacture_cpu(ias, r.split("cpu")), r


def test_genuine_quote_gets_ok():
    ias, cpu, r = setup()
    pk, nonce = r.bytes(32), r.bytes(16)
    rep = ServiceProvider(ias).sp_forward(generate_quote(cpu, IMAGE, pk, nonce))
    assert rep.verdict == OK
    assert verify_report(rep, ias.public, nonce=nonce, enclave_pubkey=pk, measurement=crypto.digest(IMAGE).value)


def test_unregistered_cpu_gets_invalid():
    ias, _, r = setup()
    kp = crypto.keygen(r.split("rogue"))
    rogue = CpuIdentity(99, kp.secret, kp.public)
    rep = ias.ias_verify(generate_quote(rogue, IMAGE, r.bytes(32), r.bytes(16)))
    assert rep.verdict == INVALID
    assert not verify_report(rep, ias.public)


def test_report_bindings_checked():
    ias, cpu, r = setup()
    pk, nonce = r.bytes(32), r.bytes(16)
    rep = ias.ias_verify(generate_quote(cpu, IMAGE, pk, nonce))
    assert not verify_report(rep, ias.public, nonce=r.bytes(16))
    assert not verify_report(rep, ias.public, enclave_pubkey=r.bytes(32))
    assert not verify_report(rep, ias.public, measurement=crypto.digest(b"other").value)


def test_verdict_flip_breaks_signature():
    ias, _, r = setup()
    kp = crypto.keygen(r.split("rogue"))
    rep = ias.ias_verify(generate_quote(CpuIdentity(5, kp.secret, kp.public), IMAGE, r.bytes(32), r.bytes(16)))
    assert not verify_report(replace(rep, verdict=OK), ias.public)


def test_serialize_roundtrip():
    ias, cpu, r = setup()
    rep = ias.ias_verify(generate_quote(cpu, IMAGE, r.bytes(32), r.bytes(16)))
    again = AttestationReport.parse(rep.serialize())
    assert again == rep and again.digest() == rep.digest()


def test_cpu_keys_are_distinct():
    ias, cpu, r = setup()
    other = ias.manufacture_cpu(r.split("cpu2"))
    assert other.cpu_public != cpu.cpu_public
    assert sorted(ias._registered_cpu_publics()) == sorted([cpu.cpu_public, other.cpu_public])
