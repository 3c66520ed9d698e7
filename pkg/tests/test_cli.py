import json
import subprocess
import sys

import pytest

from detlab import __version__
from detlab.cli import load_config, main, run, ConfigError

SMALL = """scenario: ginibre
resolution: 32
k_list: [3, 6]
n_samples: 1000
"""


@pytest.fixture
def small_cfg(tmp_path):
    p = tmp_path / "small.yaml"
    p.write_text(SMALL)
    return p


def test_equilibrium_pipeline(tmp_path):
    cfg = tmp_path / "g.yaml"
    cfg.write_text("scenario: ginibre\nresolution: 64\n")
    assert run("equilibrium", cfg, tmp_path / "out") == 0
    rep = json.loads((tmp_path / "out" / "energy_report.json").read_text())
    assert rep["I"] <= 1e-3
    header = (tmp_path / "out" / "measure.csv").read_text().splitlines()[0]
    assert header == "re,im,mass"


def test_unknown_subcommand_usage():
    p = subprocess.run([sys.executable, "-m", "detlab.cli", "bogus", "x.yaml"], capture_output=True, text=True)
    assert p.returncode != 0
    assert "usage:" in p.stderr


def test_run_unknown_subcommand_returns_nonzero(small_cfg, tmp_path, capsys):
    assert run("bogus", small_cfg, tmp_path / "o") != 0
    assert "usage:" in capsys.readouterr().err


def test_rerun_is_byte_identical(small_cfg, tmp_path):
    for d in ("a", "b"):
        assert run("sample", small_cfg, tmp_path / d) == 0
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert "samples_k3.jsonl" in names and "sample_summary.csv" in names
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()


@pytest.mark.parametrize("sub", ["equilibrium", "sample", "fekete", "free-energy", "ldp", "rate"])
def test_every_subcommand_writes_manifest(sub, small_cfg, tmp_path):
    assert run(sub, small_cfg, tmp_path / sub) == 0
    manifest = (tmp_path / sub / "manifest.txt").read_text()
    assert f"detlab_version: {__version__}" in manifest
    assert "schema: detlab-output 1" in manifest
    assert "threads:" in manifest
    line = next(ln for ln in manifest.splitlines() if ln.startswith("config: "))
    cfg = json.loads(line[len("config: "):])
    assert cfg["resolution"] == 32 and cfg["k_list"] == [3, 6] and cfg["weight"] == "ginibre"
    arts = json.loads(next(ln for ln in manifest.splitlines() if ln.startswith("artifacts: "))[11:])
    for a in arts:
        assert (tmp_path / sub / a).exists()


def test_threads_recorded(small_cfg, tmp_path, monkeypatch):
    monkeypatch.setenv("DETLAB_THREADS", "3")
    assert run("free-energy", small_cfg, tmp_path / "o") == 0
    assert "threads: 3" in (tmp_path / "o" / "manifest.txt").read_text()


def test_yaml_syntax_error_reports_line(tmp_path, capsys):
    p = tmp_path / "bad.yaml"
    p.write_text("scenario: ginibre\nresolution: [64\nseed: 1\n")
    assert run("equilibrium", p, tmp_path / "o") == 2
    assert "line" in capsys.readouterr().err


@pytest.mark.parametrize("text,field", [
    ("scenario: ginibre\nresolutoin: 64\n", "resolutoin"),
    ("scenario: ginibre\nresolution: many\n", "resolution"),
    ("scenario: ginibre\nweight: cubic\n", "weight"),
    ("scenario: nowhere\n", "scenario"),
    ("weight: ginibre\n", "name"),
    ("scenario: ginibre\nk_list: []\n", "k_list"),
])
def test_config_field_diagnostics(tmp_path, capsys, text, field):
    p = tmp_path / "c.yaml"
    p.write_text(text)
    assert run("equilibrium", p, tmp_path / "o") == 2
    assert field in capsys.readouterr().err


def test_numeric_error_exit_code(tmp_path, capsys):
    p = tmp_path / "c.yaml"
    p.write_text("scenario: ginibre\nresolution: 32\nk_list: [3]\nepsilon: 10.0\n")
    assert run("ldp", p, tmp_path / "o") == 3
    assert "infeasible-deviation" in capsys.readouterr().err


def test_config_overrides_merge(small_cfg):
    sc = load_config(small_cfg)
    assert sc.name == "ginibre" and sc.region["kind"] == "disk" and sc.resolution == 32
    assert sc.extra["n_samples"] == 1000


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "none.yaml")


def test_main_entry(small_cfg, tmp_path):
    assert main(["rate", str(small_cfg), "-o", str(tmp_path / "r")]) == 0
    reports = json.loads((tmp_path / "r" / "energy_report.json").read_text())
    assert {r["route"] for r in reports} == {"green-double-integral", "dirichlet-form"}


def test_builtin_scenarios_load(tmp_path):
    for name in ("ginibre", "quartic", "zero-on-circle"):
        p = tmp_path / f"{name}.yaml"
        p.write_text(f"scenario: {name}\n")
        sc = load_config(p)
        assert sc.name == name
