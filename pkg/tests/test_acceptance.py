"""Acceptance criteria 1-10.  Each test prints one PASS/FAIL line."""
import random
import time
from dataclasses import replace

import numpy as np
import pytest

from genie_sim import crypto, harness, programs, vm
from genie_sim.attestation import OK, AttestationService, CpuIdentity, Quote, ServiceProvider, generate_quote, verify_report
from genie_sim.contracts import SplitSpec, distribute
from genie_sim.ledger import LogicalClock, tamper_bit, validate_chain
from oracles import distribute as oracle_distribute
from oracles import least_squares

# tolerances pinned by the criteria
WALL_TIME_S = 10.0
SGD_TOL = 1e-3


@pytest.fixture
def verdict(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {n:2d} {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail

    return emit


@pytest.fixture(scope="module")
def baseline_run(tmp_path_factory):
    t0 = time.perf_counter()
    report, state = harness.run(harness.load_scenario(harness.bundled("baseline.json")), tmp_path_factory.mktemp("base"))
    return report, state, time.perf_counter() - t0


@pytest.fixture(scope="module")
def adversarial_run(tmp_path_factory):
    return harness.run(harness.load_scenario(harness.bundled("adversarial.json")), tmp_path_factory.mktemp("adv"))


def test_1_end_to_end_baseline(baseline_run, verdict):
    report, state, wall = baseline_run
    k = len(state.donors["score-linear"])
    users_registered = len(state.end_users)  # the end user's data must be registered before querying
    expected = {
        "register_package": 1,
        "register_audit": 1,
        "register_instance": 3,
        "register_data": len(state.owners) + users_registered,
        "register_model": 1,
        "register_donor": k,
        "set_model_status": 2,
        "purchase_access_code": 2,
        "consume_and_distribute": 2,
    }
    counts = harness.tx_counts(state)
    c = state.world.contracts
    roster = (len(state.owners), 1, 1, len(state.end_users)) == (3, 1, 1, 1)
    ok = (
        roster
        and counts == expected
        and k == 3
        and expected["register_instance"] >= 2
        and c.total_tokens() == c.initial_mint
        and report.passed
        and wall < WALL_TIME_S
    )
    verdict(1, ok, f"tx multiset {counts}; tokens {c.total_tokens()}/{c.initial_mint}; "
                   f"invariants {'ok' if report.passed else 'FAILED'}; wall {wall:.2f}s")


def test_2_rule_suite(baseline_run, adversarial_run, verdict):
    inv_names = ("rule1_no_training_output", "rule2_data_purged", "rule3_validated_inputs", "rule4_queries_recorded")
    runs = {"baseline": baseline_run[0], "adversarial": adversarial_run[0]}
    per_run = all(r.invariants[n]["passed"] for r in runs.values() for n in inv_names)
    adv = adversarial_run[1].events
    leaky = adv["leaky_program"]
    trap_purged = leaky["status"] == vm.TRAP and leaky["held_after"] == 0 and leaky["external_bytes"] == 0
    forged = adv["forge_report"]["contract"].startswith("fail") and adv["forge_report"]["enclave"].startswith("rejected")
    out_bytes = sum(adversarial_run[1].world.training_output) + sum(baseline_run[1].world.training_output)
    ok = per_run and trap_purged and forged and out_bytes == 0
    verdict(2, ok, f"rules 1-4 on every run {per_run}; training output bytes {out_bytes}; "
                   f"purged on trap {trap_purged}; forged report rejected by enclave and contract {forged}")


def test_3_immutability(baseline_run, verdict):
    chain = baseline_run[1].world.chain
    blocks = list(chain.blocks[:20])
    assert len(blocks) == 20
    assert validate_chain(blocks, chain.miners, chain.allocation).ok
    rng = crypto.Rng(2024)
    hits = 0
    for _ in range(100):
        i = rng.randint(0, 19)
        bad = list(blocks)
        bad[i], _ = tamper_bit(bad[i], rng)
        check = validate_chain(bad, chain.miners, chain.allocation)
        hits += (not check.ok) and i <= check.index <= i + 1
    verdict(3, hits == 100, f"{hits}/100 single-bit tamperings detected within one block")


def test_4_attestation_soundness(verdict):
    r = crypto.Rng(99)
    ias = AttestationService(r.split("ias"), LogicalClock())
    sp = ServiceProvider(ias)
    cpu = ias.manufacture_cpu(r.split("cpu"))
    honest_image, evil_image = b"honest enclave", b"honest enclave; exfiltrate"
    m_honest, m_evil = crypto.digest(honest_image).value, crypto.digest(evil_image).value
    attacker = crypto.keygen(r.split("attacker"))
    ok_obtained, attempts = 0, 0

    def accepted(report, **bind):
        return verify_report(report, ias.public, **bind)

    for i in range(250):
        a = r.split(f"a{i}")
        # forged CPU key: attacker-made CPU identity the IAS never manufactured
        kp = crypto.keygen(a.split("cpu"))
        rogue = CpuIdentity(1000 + i, kp.secret, kp.public)
        pk, nonce = a.bytes(32), a.bytes(16)
        ok_obtained += accepted(sp.sp_forward(generate_quote(rogue, evil_image, pk, nonce)), nonce=nonce)
        # post-quote image tampering: genuine quote re-labelled with the tampered measurement
        q = generate_quote(cpu, honest_image, pk, nonce)
        relabelled = Quote(m_evil, q.enclave_pubkey, q.nonce, q.cpu_signature)
        ok_obtained += accepted(sp.sp_forward(relabelled), measurement=m_evil)
        # verdict flipping: an INVALID report edited to OK, with and without re-signing
        bad = sp.sp_forward(generate_quote(rogue, evil_image, pk, nonce))
        flipped = replace(bad, verdict=OK)
        resigned = replace(flipped, ias_signature=crypto.sign(attacker.secret, flipped.body()).value)
        ok_obtained += accepted(flipped) + accepted(resigned)
        # cross-enclave replay: a genuine OK report for enclave X offered for enclave Y or a new challenge
        genuine = sp.sp_forward(q)
        assert accepted(genuine, nonce=nonce, enclave_pubkey=pk, measurement=m_honest)
        other_pk, fresh = a.bytes(32), a.bytes(16)
        ok_obtained += accepted(genuine, nonce=nonce, enclave_pubkey=other_pk)
        ok_obtained += accepted(genuine, nonce=fresh, enclave_pubkey=pk)
        attempts += 6
    ok = ok_obtained == 0 and attempts >= 1000
    verdict(4, ok, f"{ok_obtained} OK-verdict reports from {attempts} adversarial attempts")


def test_5_output_gating(adversarial_run, verdict):
    q = vm.assemble(programs.LINEAR_QUERY, "Query")
    refused = False
    try:
        vm.run_query(q, [((1.0, 1.0), 0.0)], {"w": (2.0, -1.0)}, registered_hashes=())
    except vm.GateRefusal:
        refused = True
    leaky = vm.run_training(vm.assemble(programs.LEAKY_TRAINING), [((1.0,), 42.0)], 1, crypto.Rng(0))
    registered = adversarial_run[1].world.contracts.registered_query_hashes()
    violations = [e for e in vm.GATE_AUDIT if e[3] and not (e[0] == "Query" and e[2])]
    ok = refused and leaky.emitted == b"" and leaky.status == vm.TRAP and not violations and registered
    verdict(5, ok, f"unregistered query refused {refused}; training EMIT bytes {len(leaky.emitted)}; "
                   f"{len(vm.GATE_AUDIT)} audited executions, {len(violations)} violations")


def _linreg(n=200, seed=0):
    rng = random.Random(seed)
    recs = []
    for _ in range(n):
        x = (rng.uniform(-1, 1), rng.uniform(-1, 1))
        recs.append((x, 2 * x[0] - x[1]))
    return recs


def test_6_training_correctness(verdict):
    recs = _linreg()
    prog = vm.assemble(programs.sgd_linreg())
    a = vm.run_training(prog, recs, 50, crypto.Rng(6))
    b = vm.run_training(prog, recs, 50, crypto.Rng(6))
    w_star = least_squares(recs)
    err = float(np.max(np.abs(np.array(a.params["w"]) - w_star)))
    identical = a.params == b.params
    shards = [((0.0,), float(i * i % 17)) for i in range(40)]
    avg = vm.assemble(programs.AVERAGE)
    single = vm.run_training(avg, shards, 1, crypto.Rng(1), init={"sum": 0.0, "n": 0.0}).params
    parallel = vm.shared_store_training([avg, avg], [shards[:20], shards[20:]], vm.ObjectStore({"sum": 0.0, "n": 0.0}),
                                        1, crypto.Rng(2))
    ok = err <= SGD_TOL and identical and parallel == single
    verdict(6, ok, f"max |w - w_lstsq| = {err:.2e} (oracle {w_star.round(6).tolist()}); "
                   f"same-seed identical {identical}; 2-shard aggregate {parallel} vs {single}")


def test_7_randomization_neutrality(verdict):
    recs = _linreg(60, seed=7)
    prog = vm.assemble(programs.sgd_linreg())
    depths = set()
    for s in range(100):
        run = vm.run_training(prog, recs, 1, crypto.Rng(s), depth_range=(1, 8))
        depths.update(run.depths)
    neutral = True
    for s in range(5):
        params = [vm.run_training(prog, recs, 3, crypto.Rng(s), dummy_p=p).params for p in (0.0, 0.5, 1.0)]
        neutral &= params[0] == params[1] == params[2]
    ok = len(depths) >= 2 and depths <= set(range(1, 9)) and neutral
    verdict(7, ok, f"buffer depths seen {sorted(depths)}; params bit-identical across p in {{0, 0.5, 1}}: {neutral}")


def test_8_escrow_arithmetic(verdict):
    rng = random.Random(8)
    mismatches = 0
    for _ in range(1000):
        amount = rng.randint(0, 10**7)
        t = rng.randint(0, 10_000)
        r_ = rng.randint(0, 10_000 - t)
        bps = (t, r_, 10_000 - t - r_)
        qualities = [rng.randint(1, 5) for _ in range(rng.randint(0, 10))]
        got = distribute(amount, SplitSpec(*bps), qualities)
        mismatches += got != oracle_distribute(amount, bps, qualities) or got[0] + got[1] + sum(got[2]) != amount
    verdict(8, mismatches == 0, f"{1000 - mismatches}/1000 cases match the oracle and sum to the escrow exactly")


def test_9_transactional_store(verdict):
    rng = random.Random(9)
    prog = vm.assemble(programs.sgd_linreg())
    unreachable = 0
    crashed_runs = 0
    clean_cache = {}
    for i in range(1000):
        seed = rng.randint(0, 19)
        if seed not in clean_cache:
            store = vm.ObjectStore({"w": (0.0, 0.0)})
            vm.run_training(prog, _linreg(10, seed), 2, crypto.Rng(seed), store=store)
            clean_cache[seed] = store.history
        history = clean_cache[seed]
        store = vm.ObjectStore({"w": (0.0, 0.0)})
        run = vm.run_training(prog, _linreg(10, seed), 2, crypto.Rng(seed), store=store, crash_at=rng.randint(1, 400))
        crashed_runs += run.reason == "crash"
        unreachable += store.committed not in history
    ok = unreachable == 0 and crashed_runs > 0
    verdict(9, ok, f"{unreachable} unreachable committed states over 1000 crash injections ({crashed_runs} mid-run)")


def test_10_determinism(tmp_path, verdict):
    diffs = []
    names = []
    for path in harness.bundled_scenarios():
        sc = harness.load_scenario(path)
        names.append(sc.name)
        harness.run(sc, tmp_path / sc.name / "a")
        harness.run(sc, tmp_path / sc.name / "b")
        for f in ("chain.dump", "messages.trace"):
            if (tmp_path / sc.name / "a" / f).read_bytes() != (tmp_path / sc.name / "b" / f).read_bytes():
                diffs.append(f"{sc.name}/{f}")
    verdict(10, not diffs, f"scenarios {names}: {'byte-identical' if not diffs else 'differ: ' + ', '.join(diffs)}")
