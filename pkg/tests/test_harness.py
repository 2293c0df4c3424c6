import json

import pytest

from genie_sim import harness
from genie_sim.cli import main


def raw_baseline():
    return json.loads(harness.bundled("baseline.json").read_text())


def test_bundled_scenarios_load():
    names = {harness.load_scenario(p).name for p in harness.bundled_scenarios()}
    assert {"baseline", "recruiting", "adversarial", "tamper_chain"} <= names


def test_bad_split_names_field():
    raw = raw_baseline()
    raw["models"][0]["split"]["trainer_bp"] = 4000
    with pytest.raises(harness.ScenarioError) as exc:
        harness.parse_scenario(raw)
    assert exc.value.path == "$.models[0].split"


def test_missing_seed_is_schema_error():
    raw = raw_baseline()
    del raw["seed"]
    with pytest.raises(harness.ScenarioError) as exc:
        harness.parse_scenario(raw)
    assert exc.value.path == "$.seed"


def test_nested_type_error_path():
    raw = raw_baseline()
    raw["owners"][1]["policy"] = {"consent": "Maybe"}
    with pytest.raises(harness.ScenarioError) as exc:
        harness.parse_scenario(raw)
    assert exc.value.path == "$.owners[1].policy.consent"


def test_invalid_json(tmp_path):
    p = tmp_path / "s.json"
    p.write_text("{")
    with pytest.raises(harness.ScenarioError):
        harness.load_scenario(p)


def test_baseline_report_passes(tmp_path):
    report, _ = harness.run(harness.load_scenario(harness.bundled("baseline.json")), tmp_path)
    assert report.passed and report.as_expected
    body = json.loads((tmp_path / "report.json").read_text())
    assert body["tokens"]["final_total"] == body["tokens"]["initial_mint"]
    assert (tmp_path / "chain.dump").exists() and (tmp_path / "messages.trace").exists()


def test_report_regenerates_identically(tmp_path):
    sc = harness.load_scenario(harness.bundled("recruiting.json"))
    harness.run(sc, tmp_path / "a")
    harness.run(sc, tmp_path / "b")
    for f in ("chain.dump", "messages.trace", "report.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_seed_changes_output(tmp_path):
    sc = harness.load_scenario(harness.bundled("baseline.json"))
    harness.run(sc, tmp_path / "a")
    harness.run(sc.with_seed(sc.seed + 1), tmp_path / "b")
    assert (tmp_path / "a" / "chain.dump").read_bytes() != (tmp_path / "b" / "chain.dump").read_bytes()


def test_tamper_scenario_reports_index(tmp_path):
    report, _ = harness.run(harness.load_scenario(harness.bundled("tamper_chain.json")), tmp_path)
    assert not report.invariants["chain_valid"]["passed"]
    assert report.assertions["tamper_located"]["passed"]
    check = harness.verify(tmp_path / "chain.dump")
    assert not check.ok and check.index in (6, 7)


def test_cli_run_verify_inspect(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["run", "--scenario", str(harness.bundled("baseline.json")), "--seed", "3", "--out", str(out)]) == 0
    assert main(["verify", "--chain", str(out / "chain.dump")]) == 0
    blob = sorted((out / "repo").iterdir())[0]
    capsys.readouterr()
    assert main(["inspect", "--repo", str(out / "repo"), "--hash", blob.name]) == 0
    assert capsys.readouterr().out.strip()
    assert main(["inspect", "--repo", str(out / "repo"), "--hash", "00" * 32]) == 1


def test_cli_verify_detects_edit_and_truncation(tmp_path):
    out = tmp_path / "run"
    main(["run", "--scenario", str(harness.bundled("baseline.json")), "--out", str(out)])
    text = (out / "chain.dump").read_text()
    (tmp_path / "trunc.dump").write_text(text[: len(text) - 10])
    assert main(["verify", "--chain", str(tmp_path / "trunc.dump")]) == 1
    lines = text.split("\n")
    lines[3] = lines[3][:-1] + ("a" if lines[3][-1] != "a" else "b")
    (tmp_path / "edit.dump").write_text("\n".join(lines))
    assert main(["verify", "--chain", str(tmp_path / "edit.dump")]) == 1


def test_cli_tamper_exit_code_and_bad_scenario(tmp_path):
    assert main(["run", "--scenario", str(harness.bundled("tamper_chain.json")), "--out", str(tmp_path / "t")]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"name": "x"}))
    assert main(["run", "--scenario", str(bad), "--out", str(tmp_path / "b")]) == 2
