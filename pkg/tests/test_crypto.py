import hashlib

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from genie_sim import crypto
from genie_sim.encoding import canonical_json, framed, unframe


def test_digest_matches_hashlib_vectors():
    assert crypto.digest(b"").hex() == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
    assert crypto.digest(b"abc").value == hashlib.sha256(b"abc").digest()


@given(st.binary(max_size=256))
def test_digest_roundtrip_hex(data):
    d = crypto.digest(data)
    assert crypto.Digest.fromhex(d.hex()) == d


def test_sign_verify(rng):
    kp = crypto.keygen(rng)
    sig = crypto.sign(kp.secret, b"hello")
    assert crypto.verify(kp.public, b"hello", sig)
    assert not crypto.verify(kp.public, b"hellp", sig)
    other = crypto.keygen(rng)
    assert not crypto.verify(other.public, b"hello", sig)


@pytest.mark.parametrize("pub,sig", [(b"short", b"x" * 64), (b"\x00" * 32, b"short"), (b"", b"")])
def test_verify_never_raises_on_garbage(pub, sig):
    assert crypto.verify(pub, b"m", sig) is False


def test_keygen_is_seeded():
    assert crypto.keygen(crypto.Rng(5)).public == crypto.keygen(crypto.Rng(5)).public
    assert crypto.keygen(crypto.Rng(5)).public != crypto.keygen(crypto.Rng(6)).public


@settings(max_examples=30)
@given(st.binary(max_size=512))
def test_pk_roundtrip(pt):
    r = crypto.Rng(9)
    kp = crypto.keygen(r)
    assert crypto.pk_decrypt(kp.secret, crypto.pk_encrypt(kp.public, pt, r)) == pt


def test_pk_wrong_key_and_tamper(rng):
    a, b = crypto.keygen(rng), crypto.keygen(rng)
    ct = crypto.pk_encrypt(a.public, b"secret", rng)
    with pytest.raises(crypto.DecryptionError):
        crypto.pk_decrypt(b.secret, ct)
    bad = bytearray(ct)
    bad[-1] ^= 1
    with pytest.raises(crypto.DecryptionError):
        crypto.pk_decrypt(a.secret, bytes(bad))


def test_sym_context_binding(rng):
    k1 = crypto.kdf(b"root", "seal")
    k2 = crypto.kdf(b"root", "other")
    assert k1.value != k2.value
    ct = crypto.sym_encrypt(k1, b"payload", rng)
    assert crypto.sym_decrypt(k1, ct) == b"payload"
    with pytest.raises(crypto.DecryptionError):
        crypto.sym_decrypt(k2, ct)


def test_rng_split_is_independent_of_parent_use():
    a, b = crypto.Rng(3), crypto.Rng(3)
    a.bytes(100)
    assert a.split("x").bytes(16) == b.split("x").bytes(16)
    assert b.split("x").bytes(16) != b.split("y").bytes(16)


@given(st.lists(st.binary(max_size=40), max_size=8))
def test_framing_roundtrip(parts):
    assert unframe(framed(*parts)) == parts


def test_canonical_json_sorted():
    assert canonical_json({"b": 1, "a": [2, 3]}) == b'{"a":[2,3],"b":1}'
