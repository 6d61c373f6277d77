import json

import pytest

from geoxray.cli import ConfigError, load_config, main, parse_config


def test_list_examples(capsys):
    assert main(["list-examples"]) == 0
    out = capsys.readouterr().out
    for key in ("flat_torus_example2", "euclidean_disc", "sphere_cap", "hyperbolic_disc",
                "conjugate_strip_example1", "euclidean_probe"):
        assert key in out


def test_probe_run_and_determinism(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", "euclidean_probe", "-o", str(a)]) == 0
    assert main(["run", "euclidean_probe", "-o", str(b)]) == 0
    assert "sigma_min" in (a / "injectivity.txt").read_text()
    for p in a.iterdir():
        if p.name != "manifest.json":
            assert p.read_bytes() == (b / p.name).read_bytes(), p.name
    ma = json.loads((a / "manifest.json").read_text())
    mb = json.loads((b / "manifest.json").read_text())
    assert ma["status"] == "ok" and ma["metrics"] == mb["metrics"]
    assert ma["config_sha256"] == mb["config_sha256"] and len(ma["steps"]) == 4


def test_unknown_manifold_exit_2(tmp_path, capsys):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[experiment]\nmanifold = klein_bottle\noperations = family\n")
    assert main(["run", str(cfg), "-o", str(tmp_path / "out")]) == 2
    assert "klein_bottle" in capsys.readouterr().err
    assert "config error" in json.loads((tmp_path / "out" / "manifest.json").read_text())["status"]
    assert main(["validate", str(cfg)]) == 2


def test_degraded_family_exit_1(tmp_path, capsys):
    assert main(["run", "euclidean_degraded", "-o", str(tmp_path)]) == 1
    assert "FAIL regression" in capsys.readouterr().out
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["status"].startswith("assertion failed: regression")


@pytest.mark.parametrize("text, match", [
    ("[experiment]\nmanifold = euclidean_disc\ngrid = -3\n", "positive"),
    ("[experiment]\nmanifold = euclidean_disc\noperations = probe\n", r"\[family\]"),
    ("[experiment]\nmanifold = euclidean_disc\noperations = dance\n", "unknown operation"),
    ("[experiment\nmanifold = x\n", "parse error"),
    ("[experiment]\nmanifold = euclidean_disc\n[tolerances]\nfoo = 1\n", "unknown tolerance"),
    ("[experiment]\nmanifold = euclidean_disc\n[assert]\na = sigma_min ~ 3\n", "expected"),
])
def test_config_errors(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(text)


def test_bundled_configs_validate():
    for name in ("euclidean_probe", "euclidean_degraded", "gapped_stability", "disc_stability",
                 "sphere_conjugate", "disc_symbols", "torus_example2"):
        cfg = load_config(name)
        assert cfg.seed == 0 and cfg.operations


def test_runtime_error_still_writes_manifest(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[experiment]\nmanifold = euclidean_disc\norder = 0\noperations = decompose\n")
    assert main(["run", str(cfg), "-o", str(tmp_path / "o")]) == 2
    assert (tmp_path / "o" / "manifest.json").exists()


def test_trace_config(tmp_path):
    assert main(["run", "sphere_conjugate", "-o", str(tmp_path)]) == 0
    header = (tmp_path / "path.csv").read_text().splitlines()[0]
    assert header == "t,x1,x2,xi1,xi2,E_g"
