import csv
import json

import numpy as np
import pytest

from conftest import random_dataset
from utopia.cli import main
from utopia.tabular import (FeatureSpec, Schema, difference, fit_standardizer, load_csv,
                            mixed_norm, save_schema, write_csv)


@pytest.fixture
def files(tmp_path):
    rng = np.random.default_rng(0)
    schema = Schema((FeatureSpec.numeric("a", -3, 3), FeatureSpec.numeric("b", -3, 3),
                     FeatureSpec.numeric("c", -3, 3), FeatureSpec.categorical("k", ["p", "q", "r"])), 2)
    d = random_dataset(rng, schema, 80)
    x = d.numeric.copy()
    x[:, 1] = np.clip(x[:, 0] + 0.1 * rng.normal(size=80), -3, 3)
    d = d.replace(numeric=x)
    write_csv(d, tmp_path / "d.csv")
    save_schema(schema, tmp_path / "s.json")
    return tmp_path, d


FAST = ["--epochs", "2", "--iterations", "3", "--surrogate-hidden", "4"]


def run(tmp, cmd, out, *extra):
    return main([cmd, "--data", str(tmp / "d.csv"), "--schema", str(tmp / "s.json"),
                 "--out", str(tmp / out), *FAST, *extra])


def read(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_protect_outputs_and_budget(files, capsys):
    tmp, d = files
    assert run(tmp, "protect", "o") == 0
    for name in ("protected.csv", "feasibility.json", "decoupling.json", "resolved_config.json"):
        assert (tmp / "o" / name).exists()
    prot = load_csv(tmp / "o" / "protected.csv", d.schema)
    linf, ham = mixed_norm(difference(d, prot, fit_standardizer(d)))
    assert linf <= 0.03 + 1e-12 and ham <= 1
    echo = json.loads((tmp / "o" / "resolved_config.json").read_text())
    assert echo["command"] == "protect" and echo["amplification"] == 5.0 and echo["tau"] == 0.5
    assert echo["epochs"] == 2 and echo["lr"] == 1e-3
    assert json.loads(capsys.readouterr().out.splitlines()[0])["iterations"] == 3


def test_protect_is_byte_reproducible(files):
    tmp, _ = files
    assert run(tmp, "protect", "o1") == 0 and run(tmp, "protect", "o2") == 0
    for name in ("protected.csv", "feasibility.json", "decoupling.json"):
        assert (tmp / "o1" / name).read_bytes() == (tmp / "o2" / name).read_bytes()


def test_exit_codes(files, capsys):
    tmp, _ = files
    assert main(["protect", "--data", str(tmp / "d.csv"), "--schema", str(tmp / "nope.json"),
                 "--out", str(tmp / "x")]) == 2
    assert capsys.readouterr().err.startswith("error=config")
    assert run(tmp, "protect", "x", "--iterations", "0") == 2
    assert run(tmp, "eval", "x", "--defense", "dropout") == 2
    assert run(tmp, "eval", "x", "--defense", "mixup=0") == 2
    assert run(tmp, "eval", "x", "--defense", "mixup=abc") == 2
    assert run(tmp, "protect", "x", "--eps-num", "abc") == 2
    assert main(["bogus"]) == 2
    (tmp / "bad.csv").write_text("a,b,c,k,label\n1,2,3,zzz,0\n")
    assert main(["protect", "--data", str(tmp / "bad.csv"), "--schema", str(tmp / "s.json"),
                 "--out", str(tmp / "x")]) == 4
    assert capsys.readouterr().err.strip().splitlines()[-1].startswith("error=io")


def test_config_precedence_and_env_seed(files, monkeypatch):
    tmp, _ = files
    (tmp / "cfg.json").write_text(json.dumps({"tau": 0.7, "seed": 5, "eps_num": 0.02}))
    assert run(tmp, "protect", "c", "--config", str(tmp / "cfg.json"), "--eps-num", "0.01") == 0
    echo = json.loads((tmp / "c" / "resolved_config.json").read_text())
    assert (echo["tau"], echo["seed"], echo["eps_num"]) == (0.7, 5, 0.01)
    monkeypatch.setenv("UTOPIA_SEED", "11")
    assert run(tmp, "protect", "e", "--seed", "3") == 0
    assert json.loads((tmp / "e" / "resolved_config.json").read_text())["seed"] == 11


def test_eval_clean_only_and_with_protected(files):
    tmp, _ = files
    assert run(tmp, "eval", "e1", "--victim", "logistic") == 0
    rows = read(tmp / "e1" / "eval_report.csv")
    assert rows[0][:3] == ["variant", "defense", "mean_accuracy"] and len(rows) == 2
    assert run(tmp, "protect", "p") == 0
    args = ["--protected", str(tmp / "p" / "protected.csv"), "--defense", "mixup=0.4",
            "--defense", "quantization", "--threads", "2"]
    assert run(tmp, "eval", "e2", *args) == 0
    assert run(tmp, "eval", "e3", *args[:-2]) == 0
    rows = read(tmp / "e2" / "eval_report.csv")
    assert [r[:2] for r in rows[1:]] == [["clean", "none"], ["protected", "none"],
                                         ["protected", "mixup=0.4"], ["protected", "quantization"]]
    assert (tmp / "e2" / "eval_report.csv").read_bytes() == (tmp / "e3" / "eval_report.csv").read_bytes()


def test_diagnose_outputs(files):
    tmp, _ = files
    assert run(tmp, "protect", "p") == 0
    assert run(tmp, "diagnose", "g", "--protected", str(tmp / "p" / "protected.csv"), "--grid", "5") == 0
    diag = {k: float(v) for k, v in read(tmp / "g" / "diagnostics.csv")[1:]}
    land = read(tmp / "g" / "landscape.csv")
    assert float(land[3][3]) == diag["train_loss"]
    rob = read(tmp / "g" / "robustness.csv")
    assert float(rob[1][0]) == 0.0 and float(rob[1][1]) == diag["train_loss"]
    assert "kappa_hat" in diag
    assert len(read(tmp / "g" / "ablation.csv")) == 1 + 3 + 1


def test_theory_outputs(tmp_path):
    out = tmp_path / "t"
    assert main(["theory", "--out", str(out), "--kappa-grid", "1,10,100,1000", "--trials", "100"]) == 0
    rows = read(out / "certified.csv")[1:]
    assert [float(r[0]) for r in rows] == [1.0, 10.0, 100.0, 1000.0]
    norms = [float(r[1]) for r in rows]
    bounds = [float(r[2]) for r in rows]
    assert all(b < a for a, b in zip(norms, norms[1:]))
    assert all(b <= a for a, b in zip(bounds, bounds[1:])) and abs(bounds[-1] - 0.5) < 0.01
    assert main(["theory", "--out", str(out), "--kappa-grid", "10,1"]) == 2
