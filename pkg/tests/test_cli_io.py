from __future__ import annotations

import hashlib
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from dynkin_filter import cli_io
from dynkin_filter.errors import ConfigError

BASE = """\
[model]
r = 0.08
delta0 = 0.05
sigma = 0.3
strike = 1
penalty = {penalty}

[grid]
n_z = 200
n_y = 100

[sim]
dt = 0.01
horizon = 1
n_paths = 500
seed = 42
start_x = 1.6
start_y = 0.5
dump_paths = 3

[outputs]
directory = {out}

[checks]
geometry = default
roots = default
"""


def _config(tmp_path: Path, penalty: str = "0.1", name: str = "run.ini", out: str = "out") -> Path:
    path = tmp_path / name
    path.write_text(BASE.format(penalty=penalty, out=tmp_path / out), encoding="utf-8")
    return path


# parsing ------------------------------------------------------------------------------------------


def test_parse_valid(tmp_path):
    cfg = cli_io.load_config(_config(tmp_path))
    assert cfg.model.sigma == 0.3 and cfg.grid["n_z"] == 200
    assert cfg.sim.seed == 42 and cfg.sim.n_paths == 500
    assert list(cfg.checks) == ["geometry", "roots"]
    assert all(v is None for v in cfg.checks.values())


def test_missing_sigma_names_key(tmp_path, capsys):
    text = BASE.format(penalty="0.1", out=tmp_path / "o").replace("sigma = 0.3\n", "")
    path = tmp_path / "nosig.ini"
    path.write_text(text, encoding="utf-8")
    assert cli_io.main(["solve", "--config", str(path)]) == cli_io.EXIT_USAGE
    err = capsys.readouterr().err
    assert "sigma" in err and "line" in err


@pytest.mark.parametrize(
    "edit, needle",
    [
        (("r = 0.08", "r = 0.08\nr = 0.09"), "line"),
        (("r = 0.08", "r = 2/25"), "r"),
        (("[grid]", "[grid]\ncolour = red"), "colour"),
        (("[outputs]", "[extras]\na = 1\n\n[outputs]"), "extras"),
        (("geometry = default", "geometry = tight"), "geometry"),
        (("sigma = 0.3", "sigma = -0.3"), "sigma"),
    ],
)
def test_malformed_configs(tmp_path, edit, needle):
    text = BASE.format(penalty="0.1", out=tmp_path / "o").replace(*edit, 1)
    with pytest.raises(ConfigError) as exc:
        cli_io.parse_config(text)
    assert needle in str(exc.value)


def test_unknown_check_rejected(tmp_path):
    text = BASE.format(penalty="0.1", out=tmp_path / "o") + "astrology = default\n"
    with pytest.raises(ConfigError):
        cli_io.parse_config(text)


@pytest.mark.parametrize("argv", [["solve"], ["bake", "--config", "x.ini"], ["solve", "--config", "x.ini", "--grid", "20"],
                                  ["solve", "--config", "x.ini", "--seed", "-4"]])
def test_usage_errors(argv, capsys):
    assert cli_io.main(argv) == cli_io.EXIT_USAGE


def test_missing_config_file(tmp_path, capsys):
    assert cli_io.main(["solve", "--config", str(tmp_path / "absent.ini")]) == cli_io.EXIT_USAGE


def test_overrides(tmp_path):
    cfg = cli_io.load_config(_config(tmp_path), {"grid": (64, 32), "seed": 7, "out": str(tmp_path / "elsewhere")})
    assert cfg.grid["n_z"] == 64 and cfg.grid["n_y"] == 32
    assert cfg.sim.seed == 7
    assert cfg.outputs == tmp_path / "elsewhere"


# runs ---------------------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("desk")
    path = _config(tmp)
    code = cli_io.main(["all", "--config", str(path)])
    return tmp, path, code


def test_all_succeeds(desk_run):
    tmp, _, code = desk_run
    assert code == cli_io.EXIT_OK
    out = tmp / "out"
    for name in ("surface.csv", "boundaries_z.csv", "boundaries_y.csv", "solve.json", "benchmark.csv",
                 "benchmark.json", "paths.csv", "simulate.json", "checks.json", "manifest.json"):
        assert (out / name).exists(), name


def test_csv_headers(desk_run):
    out = desk_run[0] / "out"
    heads = {n: (out / n).read_text(encoding="utf-8").splitlines()[0] for n in
             ("surface.csv", "boundaries_z.csv", "boundaries_y.csv", "benchmark.csv", "paths.csv")}
    assert heads == {
        "surface.csv": "z,y,v,region",
        "boundaries_z.csv": "z,c1,c2,yK",
        "boundaries_y.csv": "y,b1,b2",
        "benchmark.csv": "x,V0,V1",
        "paths.csv": "t,path_id,y,z,x",
    }


def test_manifest_hashes(desk_run):
    tmp, path, _ = desk_run
    man = json.loads((tmp / "out" / "manifest.json").read_text(encoding="utf-8"))
    assert man["config_sha256"] == hashlib.sha256(path.read_bytes()).hexdigest()
    assert man["seed"] == 42
    for name, digest in man["artifacts"].items():
        assert hashlib.sha256((tmp / "out" / name).read_bytes()).hexdigest() == digest
    for name in ("solve.json", "checks.json", "simulate.json"):
        rec = json.loads((tmp / "out" / name).read_text(encoding="utf-8"))
        assert rec["config_sha256"] == man["config_sha256"]


def test_replay_from_manifest_is_byte_identical(desk_run):
    tmp, _, _ = desk_run
    out, again = tmp / "out", tmp / "again"
    code = cli_io.main(["all", "--config", str(out / "manifest.json"), "--out", str(again)])
    assert code == cli_io.EXIT_OK
    for name in ("surface.csv", "boundaries_z.csv", "boundaries_y.csv", "benchmark.csv", "paths.csv"):
        assert (out / name).read_bytes() == (again / name).read_bytes(), name


def test_seed_override_changes_paths_only(desk_run):
    tmp, path, _ = desk_run
    other = tmp / "seed7"
    assert cli_io.main(["simulate", "--config", str(path), "--out", str(other), "--seed", "7"]) == cli_io.EXIT_OK
    assert (other / "paths.csv").read_bytes() != (tmp / "out" / "paths.csv").read_bytes()
    man = json.loads((other / "manifest.json").read_text(encoding="utf-8"))
    assert man["seed"] == 7 and man["overrides"]["seed"] == 7


def test_boundary_table_largest_at_small_y(desk_run):
    out = desk_run[0] / "out"
    data = np.genfromtxt(out / "boundaries_y.csv", delimiter=",", names=True, missing_values="", filling_values=np.nan)
    b1, b2 = data["b1"][1:-1], data["b2"][1:-1]
    assert b1[0] == np.nanmax(b1)
    assert b2[~np.isnan(b2)][0] == np.nanmax(b2)


def test_export_bundle(desk_run, tmp_path):
    out = desk_run[0] / "out"
    files = cli_io.export_bundle(out, tmp_path / "bundle")
    assert sorted(f.name for f in files) == sorted(cli_io.BUNDLE_FILES)
    assert all(f.exists() for f in files)


def test_export_bundle_detects_tampering(desk_run, tmp_path):
    out = desk_run[0] / "out"
    cli_io.export_bundle(out, tmp_path / "copy")
    copy = tmp_path / "copy"
    with open(copy / "surface.csv", "a", encoding="utf-8") as fh:
        fh.write("0,0,0,C\n")
    with pytest.raises(ValueError):
        cli_io.export_bundle(copy)


def test_case1_check_exits_zero(tmp_path):
    path = _config(tmp_path, penalty="2")
    assert cli_io.main(["check", "--config", str(path)]) == cli_io.EXIT_OK
    rep = json.loads((tmp_path / "out" / "checks.json").read_text(encoding="utf-8"))
    geo = next(c for c in rep["checks"] if c["name"] == "geometry")
    assert geo["detail"]["s2_empty"] is True
    assert geo["detail"]["flags"]["s2_empty_iff_penalty_ge_strike"] is True


def test_failing_check_exits_one(tmp_path):
    text = BASE.format(penalty="0.1", out=tmp_path / "out") + "truncation = 1e-12\n"
    path = tmp_path / "strict.ini"
    path.write_text(text, encoding="utf-8")
    assert cli_io.main(["check", "--config", str(path)]) == cli_io.EXIT_CHECK_FAILED


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "dynkin_filter", "solve", "--config", str(tmp_path / "none.ini")],
                          capture_output=True, text=True)
    assert proc.returncode == cli_io.EXIT_USAGE
    assert "config error" in proc.stderr
