import json

import pytest
import yaml

from fedstab.cli import main
from fedstab.experiment import read_csv

TINY = {
    "seed": 4,
    "test_size": 300,
    "oracle_size": 300,
    "data": {"rho": 1.0, "num_clients": 10, "num_classes": 10, "feature_dim": 5, "samples_per_client": 8},
    "algorithms": [
        {"variant": "fedavg", "rounds": 3, "local_steps": 2},
        {"variant": "fedprox", "rounds": 3, "schedule": {"kind": "constant", "alpha0": 0.5}},
    ],
    "stability": {"probe_clients": [0, 1], "probes_per_client": 2, "repeats": 2},
    "sweep": {"rhos": [0.0, 1.0], "algorithms": ["fedavg"], "levels": [2.2, 2.0], "rounds": 4, "repeats": 2,
              "checkpoints": [0, 4]},
}


@pytest.fixture
def cfg_path(tmp_path, monkeypatch):
    monkeypatch.delenv("FEDSTAB_OUT", raising=False)
    p = tmp_path / "exp.yaml"
    p.write_text(yaml.safe_dump(TINY))
    return p


def only_dir(root):
    (d,) = [p for p in root.iterdir() if p.is_dir()]
    return d


def test_generate_prints_tv(cfg_path, tmp_path, capsys):
    assert main(["generate", "--config", str(cfg_path), "--out", str(tmp_path / "o")]) == 0
    out = capsys.readouterr().out
    lines = [l for l in out.splitlines() if l.strip() and l.split()[0].isdigit()]
    assert len(lines) == 10
    assert all(l.split()[2] == "0.8000" for l in lines)


def test_config_errors_name_field(tmp_path, capsys):
    p = tmp_path / "bad.yaml"
    p.write_text(yaml.safe_dump({"seed": 1, "data": {"rhoo": 0.5}}))
    assert main(["generate", "--config", str(p), "--out", str(tmp_path)]) == 2
    err = json.loads(capsys.readouterr().err.strip())
    assert err["error"] == "config" and err["field"] == "data.rhoo"
    p.write_text(yaml.safe_dump({"seed": 1, "data": {"num_clients": 3}}))
    assert main(["generate", "--config", str(p), "--out", str(tmp_path)]) == 2
    assert json.loads(capsys.readouterr().err.strip())["field"] == "data.rho"


def test_missing_file(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "none.yaml")]) == 2
    assert json.loads(capsys.readouterr().err)["error"] == "io"


def test_same_config_same_manifest(cfg_path, tmp_path):
    for k in ("a", "b"):
        assert main(["train", "--config", str(cfg_path), "--out", str(tmp_path / k)]) == 0
    da, db = only_dir(tmp_path / "a"), only_dir(tmp_path / "b")
    assert (da / "manifest.json").read_text() == (db / "manifest.json").read_text()
    assert (da / "results.csv").read_text() == (db / "results.csv").read_text()


def test_train_zero_rounds(tmp_path, monkeypatch):
    monkeypatch.delenv("FEDSTAB_OUT", raising=False)
    raw = dict(TINY, algorithms=[{"variant": "fedavg", "rounds": 0}])
    p = tmp_path / "t0.yaml"
    p.write_text(yaml.safe_dump(raw))
    assert main(["train", "--config", str(p), "--out", str(tmp_path / "o")]) == 0
    man = json.loads((only_dir(tmp_path / "o") / "manifest.json").read_text())
    run = man["runs"]["fedavg"]
    assert run["rounds"] == 0 and len(run["train_loss"]) == 1
    assert run["initial_model"] == run["final_model"]


def test_env_overrides_out(cfg_path, tmp_path, monkeypatch):
    monkeypatch.setenv("FEDSTAB_OUT", str(tmp_path / "env"))
    assert main(["generate", "--config", str(cfg_path), "--out", str(tmp_path / "flag")]) == 0
    assert (tmp_path / "env").exists() and not (tmp_path / "flag").exists()


def test_seed_override_changes_hash(cfg_path, tmp_path):
    main(["generate", "--config", str(cfg_path), "--out", str(tmp_path / "a")])
    main(["generate", "--config", str(cfg_path), "--out", str(tmp_path / "b"), "--seed", "99"])
    assert only_dir(tmp_path / "a").name != only_dir(tmp_path / "b").name


def test_stability_and_bounds(cfg_path, tmp_path, capsys):
    assert main(["stability", "--config", str(cfg_path), "--out", str(tmp_path / "s")]) == 0
    rows = read_csv(only_dir(tmp_path / "s") / "results.csv")
    assert {r["algo"] for r in rows} == {"fedavg", "fedprox"}
    assert main(["bounds", "--config", str(cfg_path), "--out", str(tmp_path / "b")]) == 0
    out = capsys.readouterr().out
    assert "verdict" in out
    rows = read_csv(only_dir(tmp_path / "b") / "results.csv")
    assert all(float(r["bound_rhs"]) > 0 for r in rows)


def test_sweep_and_report(cfg_path, tmp_path, capsys):
    assert main(["sweep", "--config", str(cfg_path), "--out", str(tmp_path / "w")]) == 0
    d = only_dir(tmp_path / "w")
    assert (d / "gap_vs_rho_fedavg.svg").exists()
    rows = read_csv(d / "results.csv")
    assert len(rows) == 2 * 1 * 4
    capsys.readouterr()
    assert main(["report", str(d)]) == 0
    assert "trend fedavg" in capsys.readouterr().out


def test_verify_single_suite(capsys):
    assert main(["verify", "--suite", "algorithm_identities"]) == 0
    assert capsys.readouterr().out.startswith("PASS")


def test_bad_jobs(cfg_path, capsys):
    assert main(["sweep", "--config", str(cfg_path), "--jobs", "0"]) == 2
    assert json.loads(capsys.readouterr().err)["field"] == "jobs"
