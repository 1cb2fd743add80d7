import json

import pytest

from greenlab.cli import main
from greenlab.config import ConfigError, config_hash, load_config, validate
from greenlab.experiments import asymmetric_identity, rows_to_csv, verify_suite
from greenlab.coeff import validate_tensor_axioms
from greenlab.lattice import build_domain


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_toml_and_json_agree(tmp_path):
    t = write(tmp_path, "a.toml", 'kind = "identity-regression"\nseed = 5\n[domain]\nd = 2\nextents = [5, 5]\n')
    j = write(tmp_path, "a.json", json.dumps({"kind": "identity-regression", "seed": 5,
                                              "domain": {"d": 2, "extents": [5, 5]}}))
    a, b = validate(load_config(t)), validate(load_config(j))
    assert a.raw == b.raw and a.hash == b.hash and len(a.hash) == 16
    assert validate(load_config(t), seed=6).hash != a.hash


def test_hash_ignores_key_order():
    assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})


@pytest.mark.parametrize("raw,key", [
    ({"kind": "nope"}, "kind"),
    ({"kind": "corollary2-annealed", "estimates": {"N": 0}}, "estimates.N"),
    ({"kind": "theorem1-bounds", "estimates": {"radii_B": [8, 4, 16]}}, "estimates.radii_B"),
    ({"kind": "theorem1-bounds", "domain": {"d": 5, "extents": [9] * 5}}, "domain.d"),
    ({"kind": "identity-regression", "solver": {"rel_tol": 0.1}}, "solver.rel_tol"),
    ({"kind": "identity-regression", "seed": -1}, "seed"),
    ({"kind": "identity-regression", "field": {"kind": "two-phase", "low": 0, "high": 1}}, "field.low"),
    ({"kind": "corollary1-strip", "domain": {"d": 2, "extents": [9, 9], "shape": "box"}}, "domain.shape"),
])
def test_validation_names_key(raw, key):
    with pytest.raises(ConfigError) as exc:
        validate(raw)
    assert exc.value.key == key


def test_run_golden_and_deterministic(tmp_path, capsys):
    cfg = write(tmp_path, "ir.toml", 'kind = "identity-regression"\n')
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o1")]) == 0
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o2")]) == 0
    (c1,) = (tmp_path / "o1").glob("*.csv")
    (c2,) = (tmp_path / "o2").glob("*.csv")
    assert c1.read_bytes() == c2.read_bytes()
    text = c1.read_text()
    assert '"G(c,c) 5x5:golden",0.375' in text
    header = text.splitlines()[0].split(",")
    assert header[-2:] == ["config_hash", "seed"]
    summary = json.loads(c1.with_suffix(".json").read_text())
    assert summary["pass"] and summary["config"]["kind"] == "identity-regression"
    assert len(summary["rows"]) == len(text.splitlines()) - 1
    log = c1.with_suffix(".log").read_text()
    assert "iterations=" in log and "residual=" in log


def test_exit_codes(tmp_path, capsys):
    bad = write(tmp_path, "bad.toml", 'kind = "corollary2-annealed"\n[estimates]\nN = 0\n')
    assert main(["run", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "estimates.N" in capsys.readouterr().err
    broken = write(tmp_path, "broken.toml", "kind = = 1\n")
    assert main(["run", "--config", str(broken), "--out", str(tmp_path / "o")]) == 2
    assert main(["run", "--config", str(tmp_path / "missing.toml"), "--out", str(tmp_path / "o")]) == 2
    starve = write(tmp_path, "s.toml", 'kind = "identity-regression"\n[solver]\nmax_iter = 1\n')
    assert main(["run", "--config", str(starve), "--out", str(tmp_path / "o")]) == 3
    fail = write(tmp_path, "f.toml", 'kind = "corollary1-strip"\n[estimates]\noracle_band = 0.001\n')
    assert main(["run", "--config", str(fail), "--out", str(tmp_path / "o")]) == 1


def test_report_command(tmp_path, capsys):
    cfg = write(tmp_path, "c.toml", 'kind = "corollary1-strip"\n')
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    capsys.readouterr()
    assert main(["report", "--in", str(tmp_path / "o")]) == 0
    out = capsys.readouterr().out
    assert "rate:fit" in out and "Teo1E" in out
    assert main(["report", "--in", str(tmp_path / "empty")]) == 2


def test_annealed_rows_independent_of_jobs(tmp_path, monkeypatch):
    cfg = write(tmp_path, "c2.toml", 'kind = "corollary2-annealed"\n[domain]\nd = 3\nextents = [17, 17, 17]\n'
                                     '[estimates]\nN = 3\nradii = [1, 2, 4]\n')
    main(["run", "--config", str(cfg), "--out", str(tmp_path / "j1"), "--jobs", "1"])
    monkeypatch.setenv("GREENLAB_JOBS", "2")
    main(["run", "--config", str(cfg), "--out", str(tmp_path / "j2")])
    (a,) = (tmp_path / "j1").glob("*.csv")
    (b,) = (tmp_path / "j2").glob("*.csv")
    assert a.read_bytes() == b.read_bytes()


def test_seed_override(tmp_path):
    cfg = write(tmp_path, "c.toml", 'kind = "identity-regression"\n')
    main(["run", "--config", str(cfg), "--out", str(tmp_path / "o"), "--seed", "77"])
    (c,) = (tmp_path / "o").glob("*.csv")
    assert all(line.endswith(",77") for line in c.read_text().splitlines()[1:])


def test_verify_suite_default_passes():
    verdicts = verify_suite()
    assert all(v.passed for v in verdicts), [v.line() for v in verdicts if not v.passed]
    ids = [v.inequality_id for v in verdicts]
    assert {"Sym", "bdd", "StE", "KC", "Ex.28a", "repr", "Ca", "PSI", "B10/D10"} <= set(ids)


def test_verify_fault_injection_hits_only_sym(tmp_path, capsys):
    cfg = write(tmp_path, "v.json", '{"inject_asymmetry": true}')
    assert main(["verify", "--config", str(cfg)]) == 1
    lines = capsys.readouterr().out.splitlines()
    failing = [l.split()[0] for l in lines if " FAIL " in l]
    assert failing == ["Sym"]


def test_asymmetric_injection_keeps_other_axioms():
    rep = validate_tensor_axioms(asymmetric_identity(build_domain({"d": 2, "extents": [9, 9]})))
    assert not rep["Sym"].passed and rep["bdd"].passed and rep["StE"].passed


def test_csv_formatting():
    text = rows_to_csv([{"experiment_id": "e", "inequality_id": "i", "value": 0.1, "pass": True}])
    assert text.splitlines()[1] == "e,i,,,0.1,,,,,,true,,"
