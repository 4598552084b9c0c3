import json

import pytest

from pcmoe.cli import build_parser, main
from pcmoe.experiment import ExperimentConfig, save_config


def _small_config(tmp_path):
    path = tmp_path / "cfg.txt"
    save_config(ExperimentConfig(n=2, epochs=2, batch_size=4, examples_per_party=8, test_size=8), path)
    return str(path)


def test_train_requires_seed():
    with pytest.raises(SystemExit):
        build_parser().parse_args(["train"])


def test_train_and_audit(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--config", _small_config(tmp_path), "--seed", "4", "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "seed=4" in text and "audit: ok" in text
    assert main(["audit", str(out), "--json"]) == 0
    record = json.loads(capsys.readouterr().out)
    assert record["violations"] == []


def test_audit_flags_forged_transcript(tmp_path, capsys):
    out = tmp_path / "run"
    main(["train", "--config", _small_config(tmp_path), "--seed", "0", "--out", str(out)])
    lines = (out / "transcript.ndjson").read_text().splitlines()
    rec = json.loads(lines[0])
    rec["dim"] = 16
    (out / "transcript.ndjson").write_text("\n".join(lines + [json.dumps(rec)]) + "\n")
    capsys.readouterr()
    assert main(["audit", str(out)]) == 1
    assert "violations=1" in capsys.readouterr().out


def test_risk(capsys):
    assert main(["risk", "--n", "8", "--k", "2", "--gamma", "0.5", "--q", "0.1"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert json.loads(lines[-1])["reduction_factor"] == 4.0
    assert main(["risk", "--n", "8", "--k", "2", "--gamma", "1.5", "--q", "0.1"]) == 2


def test_sweep(tmp_path, capsys):
    out = tmp_path / "sweep"
    args = ["sweep", "--config", _small_config(tmp_path), "--axis", "n_s_last", "--values", "0,2", "--seeds", "0", "--out", str(out)]
    assert main(args) == 0
    assert (out / "sweep_n_s_last.csv").exists() and (out / "accuracy_n_s_last2.png").exists()
    odd = ["sweep", "--axis", "n_s_both", "--values", "1", "--seeds", "0", "--out", str(out)]
    assert main(odd) == 2


def test_config_command(capsys):
    assert main(["config"]) == 0
    assert "schema = pcmoe-config/1" in capsys.readouterr().out
