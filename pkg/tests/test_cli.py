import json

import pytest

from qlinksim import cli
from qlinksim.config import ConfigError, apply_override, load, parse_complex


def write(tmp_path, text, name="run.json"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_parse_complex_forms():
    assert parse_complex([1, -2]) == 1 - 2j
    assert parse_complex(0.5) == 0.5
    assert parse_complex("-0.29+0.25i") == -0.29 + 0.25j
    with pytest.raises(ValueError):
        parse_complex(True)


def test_override_nesting():
    doc = {}
    apply_override(doc, "noise.p_nojump=0.5")
    apply_override(doc, "out=results")
    assert doc == {"noise": {"p_nojump": 0.5}, "out": "results"}
    with pytest.raises(ConfigError):
        apply_override(doc, "noise")


def test_config_errors_name_the_line(tmp_path, capsys):
    p = write(tmp_path, '{\n  "mode": "protocol",\n  "seed": 1,\n  "noise": {"p_nojump": 1.5}\n}\n')
    with pytest.raises(ConfigError) as exc:
        load(p)
    assert exc.value.line == 4
    assert cli.main(["protocol", "--config", str(p), "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG
    assert ":4:" in capsys.readouterr().err


def test_invalid_json_and_missing_seed(tmp_path):
    with pytest.raises(ConfigError) as exc:
        load(write(tmp_path, '{\n "mode": "protocol",\n "seed": 1,,\n}'))
    assert exc.value.line == 3
    with pytest.raises(ConfigError):
        load(write(tmp_path, '{"mode": "protocol"}', "b.json"))
    with pytest.raises(ConfigError):
        load(write(tmp_path, '{"mode": "protocol", "seed": 1, "physical": {"chi": 1}}', "c.json"))


def test_mode_mismatch(tmp_path):
    p = write(tmp_path, '{"mode": "physical", "seed": 0}')
    assert cli.main(["protocol", "--config", str(p)]) == cli.EXIT_CONFIG


def test_qubit_scaled_form(tmp_path):
    p = write(tmp_path, json.dumps({"mode": "protocol", "seed": 0, "qubit": {
        "c0_over_sqrt2": "-0.29+0.25i", "c1_over_sqrt2": "0.36+0.473i"}}))
    q = load(p).qubit
    assert abs(q.c0) ** 2 + abs(q.c1) ** 2 == pytest.approx(1.0)


def test_protocol_run_is_deterministic(tmp_path):
    p = write(tmp_path, json.dumps({"mode": "protocol", "seed": 3, "n_runs": 30, "noise": {"p_nojump": 0.6}}))
    outs = []
    for k in range(2):
        out = tmp_path / f"o{k}"
        assert cli.main(["protocol", "--config", str(p), "--out", str(out)]) == cli.EXIT_OK
        outs.append((out / "runs.jsonl").read_bytes())
    assert outs[0] == outs[1]
    lines = outs[0].decode().splitlines()
    assert len(lines) == 30
    summary = json.loads((tmp_path / "o0" / "summary.json").read_text())
    assert summary["passed"] and summary["min_retry_backup_fidelity"] >= 1 - 1e-10


def test_ideal_protocol_summary(tmp_path):
    p = write(tmp_path, json.dumps({"mode": "protocol", "seed": 0, "n_runs": 20,
                                    "noise": {"sampler": {"fixed": {"alpha": 1, "beta": 1}}}}))
    assert cli.main(["protocol", "--config", str(p), "--out", str(tmp_path)]) == 0
    s = json.loads((tmp_path / "summary.json").read_text())
    assert s["success_rate"] == 1.0 and s["mean_rounds"] == 1.0


def test_seed_and_runs_flags(tmp_path):
    cfg = load(None, ["seed=5", "n_runs=3"], mode="protocol")
    assert cfg.seed == 5 and cfg.n_runs == 3


def test_env_check(tmp_path):
    assert cli.main(["env-check", "--seed", "0", "--n-runs", "5", "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "env_check.json").read_text())
    by_name = {m["name"]: m for m in report["models"]}
    assert by_name["independent_reservoirs"]["commuting"]
    assert by_name["independent_reservoirs"]["min_fidelity"] >= 1 - 1e-9
    assert not by_name["non_commuting"]["commuting"]
    assert by_name["non_commuting"]["min_fidelity"] < 1


def test_pulse_design_failure_exit_code(tmp_path):
    code = cli.main(["pulse-design", "--seed", "0", "--override", "physical.g=0", "--out", str(tmp_path)])
    assert code == cli.EXIT_THRESHOLD
    assert json.loads((tmp_path / "pulse_design.json").read_text())["passed"] is False


def test_oracle_compare_small(tmp_path):
    code = cli.main(["oracle-compare", "--seed", "1", "--n-runs", "400", "--override", "oracle.tolerance=0.1",
                     "--override", "integrator.dt=0.002", "--out", str(tmp_path)])
    assert code == 0
    rows = (tmp_path / "oracle_compare.csv").read_text().splitlines()
    assert rows[0] == "t,trace_distance" and len(rows) == 6


@pytest.mark.slow
def test_physical_mode_with_pulse_file(tmp_path, pulses):
    pulses.to_csv(tmp_path / "pulses.csv")
    cfg = {"mode": "physical", "seed": 0, "n_runs": 1, "max_rounds": 1, "pulse_file": str(tmp_path / "pulses.csv"),
           "integrator": {"dt": 0.002}, "jump_cases": [1.0],
           "physical_cases": [{"name": "ideal"}, {"name": "loss10", "kappa_loss": 10.0}]}
    p = write(tmp_path, json.dumps(cfg))
    assert cli.main(["physical", "--config", str(p), "--out", str(tmp_path / "out")]) == 0
    s = json.loads((tmp_path / "out" / "summary.json").read_text())
    assert s["cases"]["ideal"]["overlap_after_step_ii"] >= 0.98
    assert s["cases"]["loss10"]["no_jump_final_fidelity"] >= 0.99
    header = (tmp_path / "out" / "nojump_loss10.csv").read_text().splitlines()[0]
    assert header == "t,overlap_after_step_ii_target,overlap_final_target,backup_overlap,norm2"
