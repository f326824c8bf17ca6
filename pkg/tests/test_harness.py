"""CLI and reporting tests for the harness."""
import json
from pathlib import Path

import numpy as np
import pytest

from apil_lab.agent import PersonaAgent
from apil_lab.envs import make_env
from apil_lab.harness import (EXIT_OK, EXIT_RUN_FAILURE, EXIT_USAGE,
                              TABLE1_REFERENCE, UNCERTAINTY_COLUMNS,
                              _teacher_of_file, main, make_table1,
                              visited_state_weights)
from apil_lab.nncore import load_checkpoint
from apil_lab.teachers import make_committee
from apil_lab.training import read_csv, write_csv

FAST = ["--episodes", "2", "--probe-every", "0"]


def _train(tmp_path, *extra):
    out = tmp_path / "metrics.csv"
    ckpt = tmp_path / "agent.ckpt"
    code = main(["train", *FAST, "--out", str(out), "--save", str(ckpt),
                 *extra])
    assert code == EXIT_OK
    return out, ckpt


def _mean_row(intrinsic, extrinsic):
    behavioral = intrinsic + extrinsic
    return {"state_id": "mean", "intrinsic": intrinsic, "extrinsic": extrinsic,
            "behavioral": behavioral, "total": behavioral, "model": 0.0,
            "n1": 5, "n2": 10}


def test_usage_errors_exit_1(capsys):
    assert main([]) == EXIT_USAGE
    assert main(["frobnicate"]) == EXIT_USAGE
    assert "usage error" in capsys.readouterr().err


def test_config_file_defaults_and_precedence(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"episodes": 3, "teacher": "rand"}))
    out = tmp_path / "a.csv"
    assert main(["--config", str(cfg), "train", "--probe-every", "0",
                 "--out", str(out)]) == EXIT_OK
    rows = read_csv(out)
    assert len(rows) == 3
    assert all(r["teacher"] == "rand" for r in rows)
    capsys.readouterr()

    out2 = tmp_path / "b.csv"
    assert main(["--config", str(cfg), "train", "--probe-every", "0",
                 "--episodes", "2", "--out", str(out2)]) == EXIT_OK
    assert len(read_csv(out2)) == 2  # explicit flag beats the config file
    capsys.readouterr()


def test_config_file_failure_modes(tmp_path, capsys):
    bad_key = tmp_path / "bad.json"
    bad_key.write_text(json.dumps({"bogus": 1}))
    assert main(["--config", str(bad_key), "gradcheck"]) == EXIT_USAGE
    malformed = tmp_path / "malformed.json"
    malformed.write_text("{not json")
    assert main(["--config", str(malformed), "gradcheck"]) == EXIT_USAGE
    assert main(["--config", str(tmp_path / "missing.json"),
                 "gradcheck"]) == EXIT_USAGE
    capsys.readouterr()


def test_train_writes_csv_checkpoint_and_summary(tmp_path, capsys):
    out, ckpt = _train(tmp_path)
    rows = read_csv(out)
    assert len(rows) == 2
    arrays = load_checkpoint(ckpt)
    prefixes = {name.split(".")[0] for name in arrays}
    assert prefixes == {"exe", "id", "ask"}  # agent plus the learned ask net
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert {"final_query_rate", "final_success_rate"} <= set(summary)


def test_eval_loads_a_checkpoint(tmp_path, capsys):
    _, ckpt = _train(tmp_path)
    capsys.readouterr()
    assert main(["eval", "--load", str(ckpt), "--episodes", "3"]) == EXIT_OK
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert set(summary) == {"query_rate", "success_rate", "mean_final_dist"}
    assert main(["eval", "--load", str(tmp_path / "nope.ckpt"),
                 "--episodes", "1"]) == EXIT_RUN_FAILURE


def test_sweep_manifest_and_outputs(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("APIL_LAB_THREADS", "1")
    outdir = tmp_path / "sweep"
    code = main(["sweep", *FAST, "--methods", "never", "--teachers",
                 "detm,rand", "--seeds", "0", "--outdir", str(outdir),
                 "--jobs", "1"])
    assert code == EXIT_OK
    assert (outdir / "never_detm_s0.csv").exists()
    assert (outdir / "never_rand_s0.csv").exists()
    manifest = json.loads((outdir / "manifest.json").read_text())
    assert set(manifest) == {"version", "base_config", "cells"}
    assert manifest["base_config"]["method"] == "never"
    keys = [(c["method"], c["teacher"], c["seed"]) for c in manifest["cells"]]
    assert keys == sorted(keys)
    assert all(c["status"] == "ok" for c in manifest["cells"])
    capsys.readouterr()


def test_sweep_rejects_empty_lists(tmp_path, capsys):
    code = main(["sweep", "--methods", "", "--outdir", str(tmp_path / "s")])
    assert code == EXIT_RUN_FAILURE
    assert "at least one" in capsys.readouterr().err


def test_sweep_records_failed_cells(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("APIL_LAB_THREADS", "1")
    outdir = tmp_path / "sweep"
    code = main(["sweep", *FAST, "--env", "maze", "--map",
                 str(tmp_path / "missing_map.txt"), "--methods", "never",
                 "--teachers", "detm", "--seeds", "0",
                 "--outdir", str(outdir), "--jobs", "1"])
    assert code == EXIT_RUN_FAILURE
    manifest = json.loads((outdir / "manifest.json").read_text())
    cell = manifest["cells"][0]
    assert cell["status"] == "failed"
    assert "error" in cell
    capsys.readouterr()


def test_teacher_of_file_tokenizing():
    assert _teacher_of_file(Path("uncrep_tworand_s0.csv")) == "tworand"
    assert _teacher_of_file(Path("apil_rand_s1.csv")) == "rand"
    assert _teacher_of_file(Path("nomatch.csv")) is None


def test_make_table1_requires_every_teacher(tmp_path):
    for teacher in ("detm", "rand", "tworand"):
        write_csv(tmp_path / f"uncrep_{teacher}_s0.csv", UNCERTAINTY_COLUMNS,
                  [_mean_row(0.1, 0.0)])
    with pytest.raises(ValueError, match="twodifdetm"):
        make_table1(sorted(tmp_path.glob("*.csv")))


def test_report_table1(tmp_path, capsys):
    values = {"detm": (0.1, 0.0), "rand": (0.5, 0.01), "tworand": (0.55, 0.0),
              "twodifdetm": (0.05, 0.4)}
    for teacher, (intr, extr) in values.items():
        write_csv(tmp_path / f"uncrep_{teacher}_s0.csv", UNCERTAINTY_COLUMNS,
                  [_mean_row(intr, extr)])
    # second detm seed: table entries are means across files
    write_csv(tmp_path / "uncrep_detm_s1.csv", UNCERTAINTY_COLUMNS,
              [_mean_row(0.3, 0.0)])
    out = tmp_path / "table1.csv"
    assert main(["report", "--kind", "table1", "--in",
                 str(tmp_path / "uncrep_*.csv"), "--out", str(out)]) == EXIT_OK
    rows = {r["teacher"]: r for r in read_csv(out)}
    assert float(rows["detm"]["intrinsic"]) == pytest.approx(0.2)
    assert float(rows["rand"]["intrinsic"]) == pytest.approx(0.5)
    for teacher, (ref_intr, ref_extr) in TABLE1_REFERENCE.items():
        assert float(rows[teacher]["ref_intrinsic"]) == ref_intr
        assert float(rows[teacher]["ref_extrinsic"]) == ref_extr
    capsys.readouterr()


def test_report_fig4(tmp_path, capsys):
    cols = ("method", "teacher", "episode", "query_rate")
    write_csv(tmp_path / "apil_detm_s0.csv", cols, [
        {"method": "apil", "teacher": "detm", "episode": 0, "query_rate": 1.0},
        {"method": "apil", "teacher": "detm", "episode": 1, "query_rate": 0.5}])
    write_csv(tmp_path / "apil_detm_s1.csv", cols, [
        {"method": "apil", "teacher": "detm", "episode": 0, "query_rate": 0.0},
        {"method": "apil", "teacher": "detm", "episode": 1, "query_rate": 0.5}])
    out = tmp_path / "fig4.csv"
    assert main(["report", "--kind", "fig4", "--in",
                 str(tmp_path / "apil_*.csv"), "--out", str(out)]) == EXIT_OK
    rows = read_csv(out)
    assert [float(r["query_rate"]) for r in rows] == [0.5, 0.5]
    assert [int(r["episode"]) for r in rows] == [0, 1]
    capsys.readouterr()


def test_report_fig5(tmp_path, capsys):
    cols = ("n1", "episode", "model")
    write_csv(tmp_path / "infl_s0.csv", cols, [
        {"n1": 5, "episode": 0, "model": 0.1},
        {"n1": 5, "episode": 25, "model": 0.3}])
    write_csv(tmp_path / "infl_s1.csv", cols, [
        {"n1": 5, "episode": 0, "model": 0.3},
        {"n1": 5, "episode": 25, "model": 0.5}])
    out = tmp_path / "fig5.csv"
    assert main(["report", "--kind", "fig5", "--in",
                 str(tmp_path / "infl_*.csv"), "--out", str(out)]) == EXIT_OK
    rows = read_csv(out)
    assert [(int(r["n1"]), int(r["episode"]), float(r["model"]))
            for r in rows] == [(5, 0, 0.2), (5, 25, 0.4)]
    capsys.readouterr()


def test_report_empty_glob(tmp_path, capsys):
    code = main(["report", "--kind", "fig4", "--in",
                 str(tmp_path / "none_*.csv"), "--out", str(tmp_path / "o")])
    assert code == EXIT_RUN_FAILURE
    assert "no files match" in capsys.readouterr().err


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--cases", "2"]) == EXIT_OK
    lines = [ln for ln in capsys.readouterr().out.splitlines() if ln.strip()]
    assert len(lines) == 6
    assert all(ln.endswith("ok") for ln in lines)


def test_uncertainty_report_cli(tmp_path, capsys):
    _, ckpt = _train(tmp_path)
    out = tmp_path / "uncrep.csv"
    code = main(["uncertainty-report", "--load", str(ckpt),
                 "--eval-episodes", "3", "--n1", "3", "--n2", "4",
                 "--out", str(out)])
    assert code == EXIT_OK
    rows = read_csv(out)
    assert rows[-1]["state_id"] == "mean"
    for row in rows:  # identities survive the round trip through repr
        intr, extr = float(row["intrinsic"]), float(row["extrinsic"])
        behv, total = float(row["behavioral"]), float(row["total"])
        assert abs(behv - (intr + extr)) <= 1e-12
        assert abs(total - (float(row["model"]) + behv)) <= 1e-12
    capsys.readouterr()


def test_visited_state_weights_counts():
    env = make_env("grid", None)
    committee = make_committee("detm")
    rng = np.random.default_rng(0)
    agent = PersonaAgent(env.state_dim, env.n_actions, committee.size, rng)
    visited = visited_state_weights(agent, env, committee, 3, rng)
    assert sum(count for _, _, count in visited) == 3 * env.horizon
    assert all(sid[0] == "r" and "c" in sid for _, sid, _ in visited)


def test_uncertainty_columns_constant():
    assert UNCERTAINTY_COLUMNS == ("state_id", "intrinsic", "extrinsic",
                                   "behavioral", "total", "model", "n1", "n2")
