import pytest

from genie_sim import crypto, vm


@pytest.fixture
def rng():
    return crypto.Rng(1234)


def pytest_sessionfinish(session, exitstatus):
    # every gated execution across the suite: only registered Query programs may emit
    bad = [e for e in vm.GATE_AUDIT if e[3] and e[0] != "Query"]
    if bad:
        session.exitstatus = 1
        print(f"\nGATE AUDIT FAILED: {len(bad)} non-query executions emitted bytes")
