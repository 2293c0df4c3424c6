import pytest

from genie_sim import crypto
from genie_sim.attestation import AttestationService
from genie_sim.encoding import framed, unframe
from genie_sim.enclave import (
    PAGE_SIZE,
    ChannelError,
    Dataset,
    EnclaveError,
    EnclaveImage,
    ValidationReport,
    ValidatorConfig,
    launch,
    quality_level,
    seal_to,
)

IMAGE = EnclaveImage(("Validation", "Training", "Query"), b"runtime")


@pytest.fixture
def cpus():
    ias = AttestationService(crypto.Rng(0))
    return ias.manufacture_cpu(crypto.Rng(1)), ias.manufacture_cpu(crypto.Rng(2))


def sample_dataset(het=True, **pheno):
    geno = {f"rs{i:04d}": (1 if het and i % 3 == 0 else 0 if i % 2 else 2) for i in range(1, 31)}
    return Dataset.build(geno, pheno or {"score": 1.0, "height": 170.0})


def test_dataset_canonical_roundtrip():
    ds = sample_dataset()
    again = Dataset.parse(ds.canonical())
    assert again.canonical() == ds.canonical()
    assert again.fingerprint() == ds.fingerprint()
    assert ds.canonical().startswith(b"#genie-dataset v1 snps=30 traits=2\n")
    assert ds.record(("rs0002", "rs0003"), "score") == ((2.0, 1.0), 1.0)


def test_owner_tag_not_in_canonical_bytes():
    a = Dataset.build({"rs0001": 1}, {"t": 1.0}, owner_tag="alice")
    b = Dataset.build({"rs0001": 1}, {"t": 1.0}, owner_tag="bob")
    assert a.canonical() == b.canonical()


@pytest.mark.parametrize("c,level", [(0.0, 1), (0.2, 2), (0.5, 3), (0.79, 4), (1.0, 5)])
def test_quality_level(c, level):
    assert quality_level(c) == level


def validate(enc, ds, rng):
    reply = crypto.keygen(rng.split("reply"))
    processed, report = enc.validate_data(seal_to(enc.pubkey, framed(reply.public, ds.canonical()), rng))
    return crypto.pk_decrypt(reply.secret, processed), report


def test_validation_valid_and_fake(cpus):
    cfg = ValidatorConfig(trait_ranges={"height": (140, 200)})
    enc = launch(cpus[0], IMAGE, "Validation", crypto.Rng(3), validator=cfg)
    r = crypto.Rng(4)
    _, good = validate(enc, sample_dataset(), r.split("a"))
    assert good.verdict == "Valid" and good.signature_ok()
    _, dup = validate(enc, sample_dataset(), r.split("b"))
    assert dup.verdict == "Fake"  # same data twice
    _, homo = validate(enc, sample_dataset(het=False), r.split("c"))
    assert homo.verdict == "Fake"
    _, wild = validate(enc, sample_dataset(score=1.0, height=900.0), r.split("d"))
    assert wild.verdict == "Fake"


def test_report_fields_roundtrip(cpus):
    enc = launch(cpus[0], IMAGE, "Validation", crypto.Rng(3))
    _, rep = validate(enc, sample_dataset(), crypto.Rng(5))
    assert ValidationReport.from_fields(rep.fields()) == rep
    tampered = ValidationReport.from_fields({**rep.fields(), "quality": 5 if rep.quality != 5 else 4})
    assert not tampered.signature_ok()


def test_kind_restrictions(cpus):
    enc = launch(cpus[0], IMAGE, "Query", crypto.Rng(3))
    with pytest.raises(EnclaveError):
        enc.validate_data(b"")
    with pytest.raises(EnclaveError):
        launch(cpus[0], EnclaveImage(("Query",), b"q"), "Training", crypto.Rng(3))


def test_channel_rejects_foreign_ciphertext(cpus):
    a = launch(cpus[0], IMAGE, "Validation", crypto.Rng(3))
    b = launch(cpus[0], IMAGE, "Validation", crypto.Rng(4))
    ct = seal_to(b.pubkey, framed(b"x" * 32, b"data"), crypto.Rng(5))
    with pytest.raises(ChannelError):
        a.validate_data(ct)


def test_sealing_bound_to_cpu_and_measurement(cpus):
    a = launch(cpus[0], IMAGE, "Training", crypto.Rng(3))
    same = launch(cpus[0], IMAGE, "Query", crypto.Rng(9))
    other_cpu = launch(cpus[1], IMAGE, "Query", crypto.Rng(9))
    other_code = launch(cpus[0], EnclaveImage(IMAGE.kinds, b"runtime2"), "Query", crypto.Rng(9))
    blob = a.seal(b"model")
    assert same.unseal(blob) == b"model"
    for enc in (other_cpu, other_code):
        with pytest.raises(EnclaveError):
            enc.unseal(blob)


def test_paging_uses_session_key(cpus):
    a = launch(cpus[0], IMAGE, "Training", crypto.Rng(3))
    page = bytes(range(256)) * (PAGE_SIZE // 256)
    ct = a.page_out(page)
    assert page not in ct and a.page_in(ct) == page
    relaunched = launch(cpus[0], IMAGE, "Training", crypto.Rng(4))
    with pytest.raises(EnclaveError):
        relaunched.page_in(ct)
    with pytest.raises(ValueError):
        a.page_out(b"short")


def test_quote_binds_identity(cpus):
    enc = launch(cpus[0], IMAGE, "Query", crypto.Rng(3))
    q = enc.quote(b"n" * 16)
    assert q.enclave_pubkey == enc.pubkey and q.measurement == IMAGE.measurement


def test_framing_of_requests():
    assert unframe(framed(b"a", b"")) == [b"a", b""]
