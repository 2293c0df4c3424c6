import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from genie_sim import crypto
from genie_sim.contracts import (
    BP_TOTAL,
    ContractError,
    Contracts,
    SplitSpec,
    consume_message,
    distribute,
    receipt_message,
    validation_message,
)
from oracles import distribute as oracle_distribute

splits = st.tuples(st.integers(0, BP_TOTAL), st.integers(0, BP_TOTAL)).filter(lambda t: sum(t) <= BP_TOTAL).map(
    lambda t: (t[0], t[1], BP_TOTAL - t[0] - t[1]))


@settings(max_examples=300)
@given(st.integers(0, 10**9), splits, st.lists(st.integers(1, 5), min_size=1, max_size=12))
def test_distribute_matches_oracle(amount, bps, qualities):
    t, r, ds = distribute(amount, SplitSpec(*bps), qualities)
    assert (t, r, ds) == oracle_distribute(amount, bps, qualities)
    assert t + r + sum(ds) == amount
    assert min((t, r, *ds)) >= 0


def test_distribute_no_donors_goes_to_trainer():
    assert distribute(100, SplitSpec(5000, 1000, 4000), []) == (90, 10, [])


def test_distribute_quality_weighting():
    _, _, ds = distribute(1000, SplitSpec(0, 0, 10000), [1, 3])
    assert ds == [250, 750]


@pytest.mark.parametrize("parts", [(5000, 1000, 3000), (5000, 5000, 1), (-1, 5001, 5000)])
def test_split_must_total_10000(parts):
    with pytest.raises(ContractError):
        SplitSpec(*parts).check()


class Market:
    """Minimal registry fixture with real signing keys."""

    def __init__(self):
        r = crypto.Rng(77)
        self.keys = {n: crypto.keygen(r.split(n)) for n in
                     ("dev", "aud", "runner", "owner", "owner2", "trainer", "user", "val", "train", "query")}
        self.c = Contracts({self.keys[n].public: 1000 for n in ("owner", "owner2", "trainer", "user")})
        self.m = "ab" * 32
        self.ok("dev", "registry", "register_package", measurement=self.m, source_hash="cd" * 32)
        self.ok("aud", "registry", "register_audit", measurement=self.m, report_hash="ef" * 32)
        for kind, key in (("Validation", "val"), ("Training", "train"), ("Query", "query")):
            self.ok("runner", "registry", "register_instance", measurement=self.m,
                    enclave_pubkey=self.pub(key), ias_report_hash="01" * 32, kind=kind)

    def pub(self, n):
        return self.keys[n].public.hex()

    def call(self, who, contract, op, **args):
        return self.c.execute(self.keys[who].public, {"contract": contract, "op": op, "args": args})

    def ok(self, *a, **kw):
        return self.call(*a, **kw)

    def report(self, owner="owner", signer="val"):
        fields = {"data_fingerprint": crypto.digest(owner.encode()).hex(), "quality": 3, "verdict": "Valid",
                  "validator_pubkey": self.pub(signer), "validator_measurement": self.m}
        fields["enclave_sig"] = crypto.sign(self.keys[signer].secret, validation_message(fields)).hex()
        return fields

    def receipt(self, mid, owner, q=3, signer="train"):
        return crypto.sign(self.keys[signer].secret, receipt_message(bytes.fromhex(mid), self.keys[owner].public, q)).hex()


@pytest.fixture
def market():
    return Market()


def _model(mk, price=100):
    mk.ok("owner", "registry", "register_data", report=mk.report())
    mk.ok("owner2", "registry", "register_data", report=mk.report("owner2"))
    mid = mk.ok("trainer", "registry", "register_model", whitepaper_hash="aa" * 32, training_enclave=mk.pub("train"),
                price=price, split={"trainer_bp": 5000, "runner_bp": 1000, "donor_pool_bp": 4000},
                query_program_hash="bb" * 32)["model_id"]
    for o, q in (("owner", 1), ("owner2", 3)):
        mk.ok(o, "registry", "register_donor", model_id=mid, owner=mk.pub(o), quality=q, enclave_sig=mk.receipt(mid, o, q))
    return mid


def test_instance_requires_audit():
    mk = Market()
    mk.ok("dev", "registry", "register_package", measurement="11" * 32, source_hash="cd" * 32)
    with pytest.raises(ContractError, match="audit"):
        mk.call("runner", "registry", "register_instance", measurement="11" * 32, enclave_pubkey="22" * 32,
                ias_report_hash="01" * 32, kind="Query")


def test_forged_report_rejected(market):
    with pytest.raises(ContractError, match="Validation"):
        market.call("owner", "registry", "register_data", report=market.report(signer="owner"))
    # a real enclave key of the wrong kind is no better
    with pytest.raises(ContractError, match="Validation"):
        market.call("owner", "registry", "register_data", report=market.report(signer="train"))
    assert market.c.state.data == []


def test_donor_needs_enclave_receipt(market):
    mid = _model(market)
    market.ok("owner", "registry", "withdraw_donor", model_id=mid)
    with pytest.raises(ContractError, match="receipt"):
        market.call("owner", "registry", "register_donor", model_id=mid, owner=market.pub("owner"), quality=5,
                    enclave_sig=market.receipt(mid, "owner", 3))


def test_status_only_forward(market):
    mid = _model(market)
    with pytest.raises(ContractError):
        market.call("trainer", "registry", "set_model_status", model_id=mid, new_status="Trained",
                    runner_enclave=market.pub("query"))
    with pytest.raises(ContractError, match="trainer"):
        market.call("owner", "registry", "set_model_status", model_id=mid, new_status="Training")
    market.ok("trainer", "registry", "set_model_status", model_id=mid, new_status="Training")
    market.ok("trainer", "registry", "set_model_status", model_id=mid, new_status="Trained",
              runner_enclave=market.pub("query"))
    with pytest.raises(ContractError):
        market.call("trainer", "registry", "set_model_status", model_id=mid, new_status="Recruiting")


def test_pay_consume_distribute(market):
    mid = _model(market)
    market.ok("trainer", "registry", "set_model_status", model_id=mid, new_status="Training")
    market.ok("trainer", "registry", "set_model_status", model_id=mid, new_status="Trained",
              runner_enclave=market.pub("query"))
    secret = b"s" * 32
    code = crypto.digest(secret).hex()
    with pytest.raises(ContractError, match="price"):
        market.call("user", "token", "purchase_access_code", model_id=mid, code_hash=code, amount=99)
    market.ok("user", "token", "purchase_access_code", model_id=mid, code_hash=code, amount=100)
    assert market.c.total_tokens() == market.c.initial_mint
    bad = crypto.sign(market.keys["train"].secret, consume_message(bytes.fromhex(code))).hex()
    with pytest.raises(ContractError, match="signature"):
        market.call("runner", "token", "consume_and_distribute", code_hash=code, enclave_sig=bad)
    sig = crypto.sign(market.keys["query"].secret, consume_message(bytes.fromhex(code))).hex()
    credits = market.ok("runner", "token", "consume_and_distribute", code_hash=code, enclave_sig=sig)["credits"]
    assert [c["amount"] for c in credits] == [50, 10, 10, 30]
    assert market.c.balance(market.keys["owner2"].public) == 1030
    assert market.c.total_tokens() == market.c.initial_mint
    with pytest.raises(ContractError, match="Paid"):
        market.call("runner", "token", "consume_and_distribute", code_hash=code, enclave_sig=sig)


def test_withdrawn_donor_excluded(market):
    mid = _model(market)
    market.ok("trainer", "registry", "set_model_status", model_id=mid, new_status="Training")
    market.ok("owner", "registry", "withdraw_donor", model_id=mid)
    code = crypto.digest(b"c").hex()
    market.ok("trainer", "token", "purchase_access_code", model_id=mid, code_hash=code, amount=100)
    sig = crypto.sign(market.keys["train"].secret, consume_message(bytes.fromhex(code))).hex()
    credits = market.ok("runner", "token", "consume_and_distribute", code_hash=code, enclave_sig=sig)["credits"]
    assert {c["to"] for c in credits if c["role"] == "donor"} == {market.pub("owner2")}


def test_failure_leaves_state_untouched(market):
    before = market.c.state_bytes()
    with pytest.raises(ContractError):
        market.call("owner", "token", "purchase_access_code", model_id="00" * 32, code_hash="11" * 32, amount=1)
    with pytest.raises(ContractError):
        market.call("owner", "registry", "register_data", report={"junk": 1})
    assert market.c.state_bytes() == before
