import json

import pytest

from gjnet.cli import main

EXP = {"family": "exponential", "params": {"rate": 1.0}}


def reference_config(**sections):
    doc = {"schema_version": 1,
           "network": {"P": [[0.5, 0.5], [0.3, 0.3]], "V": [0.1, 0.1], "N": 10,
                       "services": [EXP, EXP]}}
    doc.update(sections)
    return doc


def write(tmp_path, doc, name="cfg.json"):
    path = tmp_path / name
    path.write_text(doc if isinstance(doc, str) else json.dumps(doc))
    return str(path)


def run(tmp_path, command, doc, *extra):
    out = tmp_path / "out"
    code = main([command, "--config", write(tmp_path, doc), "--out", str(out), "--quiet", *extra])
    return code, out


def test_malformed_json_reports_position(tmp_path, capsys):
    code, _ = run(tmp_path, "traffic", '{"schema_version": 1,\n "network": {"P" [[1]]}}')
    assert code == 2
    assert "line 2, column" in capsys.readouterr().err


def test_unknown_keys_and_version_rejected(tmp_path):
    assert run(tmp_path, "traffic", {**reference_config(), "extra": 1})[0] == 2
    assert run(tmp_path, "traffic", {**reference_config(), "schema_version": 2})[0] == 2
    bad = reference_config()
    bad["network"]["colour"] = "red"
    assert run(tmp_path, "traffic", bad)[0] == 2


def test_traffic_command(tmp_path):
    code, out = run(tmp_path, "traffic", reference_config())
    assert code == 0
    doc = json.loads((out / "traffic.json").read_text())
    assert doc["load"]["rho"] == pytest.approx([0.5, 0.5])
    manifest = json.loads((out / "manifest.json").read_text())
    assert {"config_hash", "seed", "versions", "timestamp"} <= set(manifest)


def test_chain_command_downward_chain(tmp_path):
    doc = {"schema_version": 1, "chain": {
        "spec": {"kind": "banded", "up": 0.7, "down": 0.3, "exit_at_1": 0.3},
        "K_schedule": [100, 200]}}
    code, out = run(tmp_path, "chain", doc)
    assert code == 0
    verdict = json.loads((out / "chain.json").read_text())["verdict"]
    assert verdict["zero_only_invariant"] == "yes"


def test_chain_command_finite_example(tmp_path):
    doc = {"schema_version": 1, "chain": {"spec": {"m": 2, "rows": [
        [[1, 0.5], [2, 0.5]], [[1, 0.3], [2, 0.3]]]}}}
    code, out = run(tmp_path, "chain", doc)
    est = json.loads((out / "chain.json").read_text())["lambda_star"]["estimates"][-1]
    assert code == 0 and est == pytest.approx([0.0, 0.0], abs=1e-9)


def test_validate_dist_exit_codes(tmp_path):
    assert run(tmp_path, "validate-dist", reference_config())[0] == 0
    doc = reference_config()
    doc["network"]["services"][1] = {"family": "uniform", "params": {"low": 0.0, "high": 2.0}}
    assert run(tmp_path, "validate-dist", doc)[0] == 1


def test_overload_refuses_simulation(tmp_path):
    doc = reference_config(simulate={"horizon": 200.0})
    doc["network"]["V"] = [0.24, 0.24]
    code, out = run(tmp_path, "pipeline", doc)
    assert code == 1
    assert json.loads((out / "pipeline.json").read_text())["failed_stage"] == "underload"
    assert not (out / "sim_summary.json").exists()
    forced = tmp_path / "forced"
    code = main(["simulate", "--config", write(tmp_path, doc), "--out", str(forced), "--quiet",
                 "--force"])
    assert code == 0 and (forced / "sim_summary.json").exists()


def test_overload_without_simulation_is_a_verdict(tmp_path):
    doc = reference_config()
    doc["network"]["V"] = [0.24, 0.24]
    code, out = run(tmp_path, "pipeline", doc)
    assert code == 0
    assert json.loads((out / "pipeline.json").read_text())["verdict"] == "overloaded"


def test_pipeline_reference_network(tmp_path):
    doc = reference_config(simulate={"horizon": 600.0, "bin_width": 5.0},
                           nlmp={"T": 300.0, "dt": 0.02, "window": 50.0, "tol": 1e-3})
    code, out = run(tmp_path, "pipeline", doc)
    assert code == 0
    conv = json.loads((out / "nlmp_convergence.json").read_text())
    assert conv["flattening"]["lambda_hat"] == pytest.approx([0.5, 0.5], rel=0.01)
    report = json.loads((out / "ph_report.json").read_text())
    assert report["N"] == 10 and report["ks"] and report["tv"]
    for name in ("sim_rates.csv", "nlmp_rates.csv", "nlmp_measures.csv", "ph_summary.csv"):
        assert (out / name).exists()
