import csv
import json
from pathlib import Path

import numpy as np
import pytest

from ensemble_teleport import analysis, cli, config, tomography

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
NOISELESS = str(CONFIGS / "noiseless.cfg")
PAPER = str(CONFIGS / "paper.cfg")


def run(tmp_path, *args, name="out"):
    out = tmp_path / name
    code = cli.main([*args, "--out", str(out), "--quiet"])
    return code, out


def write_cfg(tmp_path, text, name="c.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_teleport_noiseless_outputs(tmp_path):
    code, out = run(tmp_path, "teleport", "--config", NOISELESS, "--cycles", "20")
    assert code == cli.EXIT_OK
    assert {p.name for p in out.iterdir()} == {"summary.json", "fidelities.csv", "bloch.csv"}
    doc = json.loads((out / "summary.json").read_text())
    assert doc["config_hash"] == config.load(NOISELESS).with_cycles(20).hash
    assert doc["mean_teleport_fidelity"] > 0.99
    assert doc["budget"]["success_probability"] == pytest.approx(0.25)
    rows = list(csv.DictReader((out / "fidelities.csv").open()))
    assert len(rows) == 12 and {r["kind"] for r in rows} == {"prepared", "teleported"}
    bloch = list(csv.DictReader((out / "bloch.csv").open()))
    assert all(float(r["length"]) > 0.98 for r in bloch)


def test_process_tomo_writes_chi(tmp_path):
    code, out = run(tmp_path, "process-tomo", "--config", NOISELESS, "--cycles", "20")
    assert code == cli.EXIT_OK
    re_rows = list(csv.reader((out / "chi_re.csv").open()))
    assert re_rows[0] == ["", "I", "X", "Y", "Z"]
    assert float(re_rows[1][1]) > 0.99
    im = np.array([[float(x) for x in r[1:]] for r in list(csv.reader((out / "chi_im.csv").open()))[1:]])
    assert np.allclose(np.diag(im), 0)
    doc = json.loads((out / "summary.json").read_text())
    assert doc["process"]["process_fidelity"] > 0.99


def test_injected_sigma_z_dominates_chi(tmp_path):
    text = Path(NOISELESS).read_text().replace("[timing]", "inject_sigma_z = true\n\n[timing]")
    code, out = run(tmp_path, "process-tomo", "--config", write_cfg(tmp_path, text), "--cycles", "20")
    assert code == cli.EXIT_OK
    chi = json.loads((out / "summary.json").read_text())["process"]["chi"]
    assert chi[3][3][0] > 0.99


def test_summary_is_byte_identical_across_runs_and_workers(tmp_path):
    base = Path(PAPER).read_text().replace("prep_cycles = 20000000", "prep_cycles = 300000")
    one = write_cfg(tmp_path, base, "one.cfg")
    many = write_cfg(tmp_path, base.replace("workers = 1", "workers = 3"), "many.cfg")
    outs = []
    for i, cfg in enumerate((one, one, many)):
        code, out = run(tmp_path, "teleport", "--config", cfg, "--cycles", "1000000", name=f"r{i}")
        assert code == cli.EXIT_OK
        outs.append(out)
    a, b, c = ((o / "summary.json").read_bytes() for o in outs)
    assert a == b == c
    assert (outs[0] / "trials.log").read_bytes() == (outs[2] / "trials.log").read_bytes()


def test_trials_log_format(tmp_path):
    code, out = run(tmp_path, "teleport", "--config", PAPER, "--cycles", "300000")
    assert code == cli.EXIT_OK
    lines = (out / "trials.log").read_text().splitlines()
    assert lines[0].split("\t")[:4] == ["cycle", "attempt", "target", "t_prep_us"]
    doc = json.loads((out / "summary.json").read_text())
    assert len(lines) - 1 == doc["run_summary"]["n_heralds"]
    assert all(line.split("\t")[8].startswith("Herald_") for line in lines[1:])


def test_config_errors_exit_2(tmp_path, capsys):
    bad = write_cfg(tmp_path, "[run]\nseed = 1\n[schedule]\nUp = 10\n[noise]\neta_A = 2\n")
    code, _ = run(tmp_path, "teleport", "--config", bad)
    assert code == cli.EXIT_CONFIG
    assert ":6:" in capsys.readouterr().err
    code, _ = run(tmp_path, "teleport", "--config", str(tmp_path / "missing.cfg"))
    assert code == cli.EXIT_CONFIG
    partial = write_cfg(tmp_path, "[run]\nseed = 1\n[schedule]\nUp = 10\n", "partial.cfg")
    code, _ = run(tmp_path, "process-tomo", "--config", partial)
    assert code == cli.EXIT_CONFIG
    empty = write_cfg(tmp_path, "[run]\nseed = 1\n[schedule]\n", "empty.cfg")
    code, _ = run(tmp_path, "prepare", "--config", empty)
    assert code == cli.EXIT_CONFIG


def test_insufficient_data_exit_3(tmp_path):
    text = Path(NOISELESS).read_text().replace("eta_B = 1", "eta_B = 0")
    code, _ = run(tmp_path, "teleport", "--config", write_cfg(tmp_path, text), "--cycles", "5")
    assert code == cli.EXIT_INSUFFICIENT


def test_non_convergence_exit_4(tmp_path, monkeypatch):
    real = tomography.mle_state

    def stubborn(data, *a, **k):
        rep = real(data, *a, **k)
        rep.converged = False
        return rep

    monkeypatch.setattr(analysis.tomography, "mle_state", stubborn)
    code, out = run(tmp_path, "prepare", "--config", NOISELESS, "--cycles", "5")
    assert code == cli.EXIT_NOT_CONVERGED
    assert json.loads((out / "summary.json").read_text())["converged"] is False


def test_rates_shipped_budget(tmp_path):
    code, out = run(tmp_path, "rates", "--config", PAPER, "--cycles", "2000000")
    assert code == cli.EXIT_OK
    b = json.loads((out / "summary.json").read_text())["budget"]
    assert b["success_probability"] == pytest.approx(1.05e-4)
    assert b["memory_margin"] == pytest.approx(129 / 97.5)
    assert b["regime"]["pass_P_A<<P_B"] is False


def test_rates_all_zero_budget(tmp_path):
    text = "[noise]\neta_A = 0\nP_A = 1e-3\nP_B = 0\n[run]\nseed = 1\n[schedule]\nUp = 1000\n"
    code, out = run(tmp_path, "rates", "--config", write_cfg(tmp_path, text))
    assert code == cli.EXIT_OK
    b = json.loads((out / "summary.json").read_text())["budget"]
    assert b["success_probability"] == 0
    assert b["bsm_contributions"] == {"AB": 0, "AA": 0, "BB": 0}
    assert b["mc_success_probability"] == 0


def test_sweep_single_point_equals_teleport(tmp_path):
    code, tel = run(tmp_path, "teleport", "--config", NOISELESS, "--cycles", "10", name="tel")
    code2, sw = run(tmp_path, "sweep", "--config", NOISELESS, "--cycles", "10", "lifetime_tau", "1e12", name="sw")
    assert code == code2 == cli.EXIT_OK
    row = next(csv.DictReader((sw / "sweep.csv").open()))
    doc = json.loads((tel / "summary.json").read_text())
    assert float(row["mean_teleport_fidelity"]) == doc["mean_teleport_fidelity"]
    assert float(row["mc_success_probability"]) == doc["budget"]["mc_success_probability"]


def test_sweep_errors(tmp_path):
    assert run(tmp_path, "sweep", "--config", NOISELESS, "lifetime_tau")[0] == cli.EXIT_CONFIG
    assert run(tmp_path, "sweep", "--config", NOISELESS, "no_such_key", "1")[0] == cli.EXIT_CONFIG
    assert run(tmp_path, "sweep", "--config", NOISELESS, "eta_A", "1.5")[0] == cli.EXIT_CONFIG


def test_tau_sweep_is_monotone(tmp_path):
    # fidelity to the ideal targets; the reference-based column need not be monotone (both sides dephase)
    text = Path(PAPER).read_text().replace("prep_cycles = 20000000", "prep_cycles = 2000000")
    cfg = write_cfg(tmp_path, text)
    code, out = run(tmp_path, "sweep", "--config", cfg, "--cycles", "20000000", "lifetime_tau", "50", "129", "500")
    assert code == cli.EXIT_OK
    f = [float(r["mean_target_fidelity"]) for r in csv.DictReader((out / "sweep.csv").open())]
    assert f[0] <= f[1] <= f[2]


def test_decay_law_flag_changes_config(tmp_path):
    code, out = run(tmp_path, "rates", "--config", NOISELESS, "--decay-law", "gauss")
    assert code == cli.EXIT_OK
    doc = json.loads((out / "summary.json").read_text())
    assert doc["config"]["timing"]["decay_law"] == "gauss"


def test_console_table(tmp_path, capsys):
    assert cli.main(["prepare", "--config", NOISELESS, "--cycles", "5", "--out", str(tmp_path / "o")]) == 0
    text = capsys.readouterr().out
    assert "F_prep" in text and "Plus" in text and "outputs written" in text


def test_env_output_directory(tmp_path, monkeypatch):
    monkeypatch.setenv(config.ENV_OUT, str(tmp_path / "env"))
    assert cli.main(["rates", "--config", NOISELESS, "--quiet"]) == 0
    assert (tmp_path / "env" / "summary.json").exists()
