import json

import pytest

from ssmtkrd.cli import main

SMALL = ["--num-layers", "6", "--model-dim", "8", "--inner-dim", "16", "--state-dim", "4"]
RUN = SMALL + ["--layers", "1,3", "--sequences", "2", "--seq-len", "32"]


def test_gen_model_and_load(tmp_path, capsys):
    out = tmp_path / "m.bin"
    assert main(["gen-model", *SMALL, "--seed", "4", "--out", str(out)]) == 0
    assert "sha256=" in capsys.readouterr().out
    assert main(["eval", "--checkpoint", str(out), "--layers", "1", "--keep-ratio", "0.75",
                 "--seq-len", "32", "--sequences", "1"]) == 0
    result = json.loads(capsys.readouterr().out)
    assert result["target_length"] == 24
    assert result["importance_protected"] is True


def test_run_writes_tables(tmp_path, capsys):
    prefix = tmp_path / "res"
    assert main(["run", *RUN, "--reducer", "utrc,evit,bipartite,none",
                 "--target-reduction", "0.1", "--out", str(prefix)]) == 0
    lines = (tmp_path / "res.csv").read_text().splitlines()
    assert len(lines) == 5
    assert lines[0].startswith("fixture,label,reducer")
    assert (tmp_path / "res.txt").exists()


def test_run_config_file(tmp_path):
    cfg = tmp_path / "exp.json"
    cfg.write_text(json.dumps({"reducer": "evit", "per_layer_keep": 0.5, "layers": [2],
                               "out": str(tmp_path / "cfg")}))
    assert main(["run", *RUN, "--config", str(cfg)]) == 0
    assert ",evit," in (tmp_path / "cfg.csv").read_text()


def test_bad_config_key(tmp_path, capsys):
    cfg = tmp_path / "exp.json"
    cfg.write_text('{"colour": 1}')
    assert main(["run", *RUN, "--config", str(cfg)]) == 2
    assert "colour" in capsys.readouterr().err


@pytest.mark.parametrize("sweep, rows", [("metric", 4), ("q", 7), ("location", 6)])
def test_ablate(tmp_path, sweep, rows):
    prefix = tmp_path / sweep
    assert main(["ablate", *RUN, "--sweep", sweep, "--target-reduction", "0.05",
                 "--out", str(prefix)]) == 0
    assert len((tmp_path / f"{sweep}.csv").read_text().splitlines()) == rows + 1


def test_solve_schedule(capsys):
    assert main(["solve-schedule", "--num-layers", "64", "--target-reduction", "0.2"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert abs(out["simulated_reduction"] - 0.2) <= 1e-3
    assert len(out["token_trace"]) == 64


def test_solve_schedule_infeasible(capsys):
    assert main(["solve-schedule", "--num-layers", "64", "--target-reduction", "0.9"]) == 2
    assert "achievable maximum" in capsys.readouterr().err


def test_bench(capsys):
    assert main(["bench", *SMALL, "--layers", "1", "--keep-ratio", "0.5", "--batch", "1",
                 "--prompt-len", "16", "--gen-len", "2"]) == 0
    assert "speedup" in capsys.readouterr().out


def test_missing_checkpoint(tmp_path, capsys):
    assert main(["eval", "--checkpoint", str(tmp_path / "none.bin")]) == 2
    assert "none.bin" in capsys.readouterr().err
