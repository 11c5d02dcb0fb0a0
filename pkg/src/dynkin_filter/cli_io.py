"""Run configuration, orchestration and artifact persistence.

A run is driven by an INI file with the sections ``model``, ``grid``,
``sim``, ``outputs`` and ``checks``.  Values are decimal literals (or a
bare word for ``scheme`` and a path for ``directory``); nothing is
evaluated.  Unknown sections or keys are errors that name the offending
line.

Every run writes a ``manifest.json`` carrying the sha256 of the
configuration text, the seed, library versions and the sha256 of each
artifact.  Passing a manifest back as ``--config`` replays the run.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import io
import json
import math
import platform
import re
import shutil
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy

from . import __version__
from . import checks as ck
from . import closed_form as cf
from . import game_eval as ge
from . import path_engine as pe
from . import vi_solver as vs
from .errors import ConfigError, DynkinError
from .model_core import ModelParams, StatePoint

EXIT_OK, EXIT_CHECK_FAILED, EXIT_USAGE = 0, 1, 2
SUBCOMMANDS = ("solve", "benchmark", "simulate", "check", "all")

DECIMAL = re.compile(r"^[+-]?(\d+(\.\d*)?|\.\d+)([eE][+-]?\d+)?$")
INTEGER = re.compile(r"^\d+$")
GRID_FLAG = re.compile(r"^(\d+)[xX](\d+)$")

MODEL_KEYS = ("r", "delta0", "sigma", "strike", "penalty")
GRID_KEYS = {"n_z": int, "n_y": int, "y_min": float}
SIM_KEYS = {
    "dt": float,
    "horizon": float,
    "n_paths": int,
    "seed": int,
    "scheme": str,
    "block_size": int,
    "start_x": float,
    "start_y": float,
    "dump_paths": int,
}
SECTIONS = ("model", "grid", "sim", "outputs", "checks")

SURFACE_CSV = "surface.csv"
BOUNDARY_Z_CSV = "boundaries_z.csv"
BOUNDARY_Y_CSV = "boundaries_y.csv"
SOLVE_JSON = "solve.json"
BENCHMARK_CSV = "benchmark.csv"
BENCHMARK_JSON = "benchmark.json"
PATHS_CSV = "paths.csv"
SIMULATE_JSON = "simulate.json"
CHECKS_JSON = "checks.json"
MANIFEST_JSON = "manifest.json"


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------


@dataclass
class RunConfig:
    """Parsed run configuration.

    ``checks`` maps a check name to its tolerance override (None keeps the
    default tolerance).
    """

    model: ModelParams
    grid: dict[str, float | int]
    sim: pe.SimConfig
    start: StatePoint
    dump_paths: int
    outputs: Path
    checks: dict[str, float | None]
    text: str = ""
    overrides: dict[str, object] = field(default_factory=dict)

    @property
    def config_sha256(self) -> str:
        return hashlib.sha256(self.text.encode("utf-8")).hexdigest()

    def grid_spec(self) -> vs.GridSpec:
        return vs.default_grid(self.model, n_z=int(self.grid["n_z"]), n_y=int(self.grid["n_y"]), y_min=float(self.grid["y_min"]))

    def to_dict(self) -> dict[str, object]:
        return {
            "model": self.model.to_dict(),
            "grid": dict(self.grid),
            "sim": self.sim.to_dict(),
            "start": {"x": self.start.x, "y": self.start.y},
            "dump_paths": self.dump_paths,
            "outputs": str(self.outputs),
            "checks": dict(self.checks),
        }


def _line_of(text: str, section: str, key: str | None = None) -> int | None:
    """1-based line of ``[section]`` or of ``key`` inside it."""
    current = None
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        m = re.match(r"^\[([^\]]+)\]$", line)
        if m:
            current = m.group(1).strip()
            if key is None and current == section:
                return n
            continue
        if current == section and key is not None and re.match(rf"^{re.escape(key)}\s*[=:]", line):
            return n
    return None


def _where(text: str, section: str, key: str | None = None) -> str:
    n = _line_of(text, section, key)
    loc = f"[{section}]" if key is None else f"[{section}] {key}"
    return f"line {n}: {loc}" if n is not None else loc


def _number(text: str, section: str, key: str, raw: str, kind: type):
    value = raw.strip()
    if kind is int:
        if not INTEGER.match(value):
            raise ConfigError(f"{_where(text, section, key)}: expected an integer literal, got {value!r}")
        return int(value)
    if not DECIMAL.match(value):
        raise ConfigError(f"{_where(text, section, key)}: expected a decimal literal, got {value!r}")
    return float(value)


def parse_config(text: str, overrides: dict[str, object] | None = None) -> RunConfig:
    """Parse configuration text strictly.

    ``overrides`` may hold ``seed``, ``grid`` (n_z, n_y) and ``out`` from
    the command line.
    """
    overrides = dict(overrides or {})
    parser = configparser.ConfigParser(strict=True, interpolation=None, default_section="__none__")
    parser.optionxform = str  # keys are case sensitive
    try:
        parser.read_string(text)
    except configparser.DuplicateOptionError as exc:
        raise ConfigError(f"line {exc.lineno}: [{exc.section}] {exc.option}: duplicate key") from None
    except configparser.DuplicateSectionError as exc:
        raise ConfigError(f"line {exc.lineno}: [{exc.section}]: duplicate section") from None
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError(f"line {exc.lineno}: key outside any section") from None
    except configparser.ParsingError as exc:
        lines = ", ".join(str(n) for n, _ in exc.errors)
        raise ConfigError(f"line {lines}: cannot parse") from None

    for sec in parser.sections():
        if sec not in SECTIONS:
            raise ConfigError(f"{_where(text, sec)}: unknown section (expected one of {', '.join(SECTIONS)})")
    if not parser.has_section("model"):
        raise ConfigError("[model]: missing section")

    model = parser["model"]
    for key in model:
        if key not in MODEL_KEYS:
            raise ConfigError(f"{_where(text, 'model', key)}: unknown key")
    raw = {key: _number(text, "model", key, model[key], float) for key in model}
    for key in MODEL_KEYS:
        if key not in raw:
            raise ConfigError(f"{_where(text, 'model')}: missing key {key!r}")
    try:
        params = ModelParams(**raw)
    except DynkinError as exc:
        raise ConfigError(f"{_where(text, 'model')}: {exc}") from None

    grid: dict[str, float | int] = {"n_z": 400, "n_y": 200, "y_min": 1e-3}
    if parser.has_section("grid"):
        for key, value in parser["grid"].items():
            if key not in GRID_KEYS:
                raise ConfigError(f"{_where(text, 'grid', key)}: unknown key")
            grid[key] = _number(text, "grid", key, value, GRID_KEYS[key])
    if "grid" in overrides:
        grid["n_z"], grid["n_y"] = overrides["grid"]
    try:
        vs.GridSpec(0.0, 1.0, int(grid["n_z"]), float(grid["y_min"]), int(grid["n_y"]))
    except ValueError as exc:
        raise ConfigError(f"{_where(text, 'grid')}: {exc}") from None

    sim_raw: dict[str, object] = {}
    if parser.has_section("sim"):
        for key, value in parser["sim"].items():
            if key not in SIM_KEYS:
                raise ConfigError(f"{_where(text, 'sim', key)}: unknown key")
            if SIM_KEYS[key] is str:
                sim_raw[key] = value.strip()
            else:
                sim_raw[key] = _number(text, "sim", key, value, SIM_KEYS[key])
    if "seed" in overrides:
        sim_raw["seed"] = int(overrides["seed"])
    start = StatePoint(float(sim_raw.pop("start_x", params.strike)), float(sim_raw.pop("start_y", 0.5)))
    dump_paths = int(sim_raw.pop("dump_paths", 16))
    try:
        sim = pe.SimConfig(**sim_raw)
    except ConfigError as exc:
        raise ConfigError(f"{_where(text, 'sim')}: {exc}") from None

    out_dir = Path("out")
    if parser.has_section("outputs"):
        for key, value in parser["outputs"].items():
            if key != "directory":
                raise ConfigError(f"{_where(text, 'outputs', key)}: unknown key")
            out_dir = Path(value.strip())
    if "out" in overrides:
        out_dir = Path(str(overrides["out"]))
    _check_creatable(out_dir)

    checks: dict[str, float | None] = {}
    if parser.has_section("checks"):
        for key, value in parser["checks"].items():
            if key not in ck.CHECK_NAMES:
                raise ConfigError(f"{_where(text, 'checks', key)}: unknown check (expected one of {', '.join(ck.CHECK_NAMES)})")
            value = value.strip()
            checks[key] = None if value == "default" else _number(text, "checks", key, value, float)
    else:
        checks = {name: None for name in ("geometry", "roots", "edge_agreement", "complete_info")}

    return RunConfig(params, grid, sim, start, dump_paths, out_dir, checks, text, overrides)


def _check_creatable(path: Path) -> None:
    probe = path
    while not probe.exists():
        if probe.parent == probe:
            break
        probe = probe.parent
    if probe.exists() and not probe.is_dir():
        raise ConfigError(f"[outputs] directory: {path} cannot be created ({probe} is a file)")


def load_config(path: str | Path, overrides: dict[str, object] | None = None) -> RunConfig:
    """Read an INI file, or the configuration stored in a manifest."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    overrides = dict(overrides or {})
    if path.suffix == ".json":
        try:
            man = json.loads(text)
            text = man["config_text"]
        except (ValueError, KeyError, TypeError):
            raise ConfigError(f"{path}: not a run manifest (no config_text)") from None
        recorded = man.get("overrides", {})
        for key, value in recorded.items():
            overrides.setdefault(key, tuple(value) if key == "grid" else value)
    return parse_config(text, overrides)


# --------------------------------------------------------------------------
# writers
# --------------------------------------------------------------------------


def _fmt(v) -> str:
    v = float(v)
    return "" if math.isnan(v) else format(v, ".17g")


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([c if isinstance(c, str) else _fmt(c) for c in row])
    path.write_bytes(buf.getvalue().encode("utf-8"))


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(ck._jsonable(obj), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_surface(s: vs.ValueSurface, fb: vs.FreeBoundaries, out: Path) -> list[Path]:
    """Surface and boundary CSVs."""
    out.mkdir(parents=True, exist_ok=True)
    labels = np.vectorize(vs.LABEL_NAMES.get)(s.region)
    rows = ((s.z[j], s.y[i], s.v[j, i], labels[j, i]) for j in range(len(s.z)) for i in range(len(s.y)))
    paths = [out / SURFACE_CSV, out / BOUNDARY_Z_CSV, out / BOUNDARY_Y_CSV]
    _write_csv(paths[0], ("z", "y", "v", "region"), rows)
    _write_csv(paths[1], ("z", "c1", "c2", "yK"), zip(fb.z, fb.c1, fb.c2, fb.yk))
    _write_csv(paths[2], ("y", "b1", "b2"), zip(fb.y, fb.b1, fb.b2))
    return paths


def benchmark_record(p: ModelParams) -> dict[str, object]:
    sol = cf.classify_case(p)
    out = sol.to_dict()
    out["perpetual_threshold"] = cf.perpetual_call(p).threshold
    return out


def write_benchmark(p: ModelParams, out: Path, n_points: int = 201) -> list[Path]:
    """JSON record of the complete-information case plus V0, V1 on a log grid."""
    out.mkdir(parents=True, exist_ok=True)
    xs = p.strike * np.geomspace(1e-2, 1e2, n_points)
    v0 = cf.edge_value("y0_edge", p)(xs)
    v1 = cf.edge_value("y1_edge", p)(xs)
    _write_csv(out / BENCHMARK_CSV, ("x", "V0", "V1"), zip(xs, v0, v1))
    _write_json(out / BENCHMARK_JSON, benchmark_record(p))
    return [out / BENCHMARK_CSV, out / BENCHMARK_JSON]


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


@dataclass
class RunState:
    cfg: RunConfig
    surface: vs.ValueSurface | None = None
    boundaries: vs.FreeBoundaries | None = None
    artifacts: list[Path] = field(default_factory=list)
    failures: list[str] = field(default_factory=list)

    def solved(self) -> tuple[vs.ValueSurface, vs.FreeBoundaries]:
        if self.surface is None:
            self.surface = vs.solve(self.cfg.model, self.cfg.grid_spec())
            self.boundaries = vs.extract_boundaries(self.surface)
        return self.surface, self.boundaries


def _do_solve(st: RunState) -> None:
    cfg = st.cfg
    s, fb = st.solved()
    st.artifacts += write_surface(s, fb, cfg.outputs)
    geo = ck.geometry(s, fb)
    meta = {
        "config_sha256": cfg.config_sha256,
        "params": cfg.model.to_dict(),
        "grid": s.grid.to_dict(),
        "dz": fb.dz,
        "tolerances": {"complementarity": 1e-9, "tol_active": s.tol_active},
        "diagnostics": s.diagnostics,
        "pde_residual": vs.pde_residual(s),
        "surface_invariants": vs.surface_invariants(s),
        "boundary_invariants": vs.boundary_invariants(fb),
        "z_K": fb.z_K,
        "y_bar_K": fb.y_bar_K,
        "b2_at_K": fb.b2_at_K,
        "s2_empty": fb.s2_empty,
        "geometry": geo.to_dict(),
    }
    path = cfg.outputs / SOLVE_JSON
    _write_json(path, meta)
    st.artifacts.append(path)
    if not geo.passed:
        st.failures.append("geometry")


def _do_benchmark(st: RunState) -> None:
    paths = write_benchmark(st.cfg.model, st.cfg.outputs)
    rec = json.loads(paths[1].read_text(encoding="utf-8"))
    rec["config_sha256"] = st.cfg.config_sha256
    _write_json(paths[1], rec)
    st.artifacts += paths


def _do_simulate(st: RunState) -> None:
    cfg = st.cfg
    p, sim, start = cfg.model, cfg.sim, cfg.start
    out = cfg.outputs
    out.mkdir(parents=True, exist_ok=True)
    n_dump = min(cfg.dump_paths, sim.n_paths)
    dump_cfg = sim.replace(n_paths=max(n_dump, 1))
    batch = pe.simulate_filtered(p, start, dump_cfg, keep_increments=False)
    rows = (
        (batch.times[i], str(q), batch.y_paths[q, i], batch.z_values[i], batch.x_paths[q, i])
        for q in range(n_dump)
        for i in range(len(batch.times))
    )
    _write_csv(out / PATHS_CSV, ("t", "path_id", "y", "z", "x"), rows)
    report: dict[str, object] = {
        "config_sha256": cfg.config_sha256,
        "batch": {**sim.to_dict(), "n_steps": sim.n_steps, "dumped_paths": n_dump},
        "start": {"x": start.x, "y": start.y},
    }
    s, fb = st.solved()
    if 0.0 < start.y < 1.0:
        try:
            est = ge.evaluate_pair(p, start, ge.StrategySpec.optimal(), ge.StrategySpec.optimal(), fb, sim)
            report["equilibrium"] = est.to_dict()
            report["surface_value"] = float(s.interpolator().value_xy(start.x, start.y))
        except DynkinError as exc:
            report["equilibrium"] = {"skipped": str(exc)}
    _write_json(out / SIMULATE_JSON, report)
    st.artifacts += [out / PATHS_CSV, out / SIMULATE_JSON]


def _do_check(st: RunState) -> None:
    cfg = st.cfg
    s, fb = st.solved()
    results = []
    for name, tol in cfg.checks.items():
        res = ck.run_named(name, cfg.model, s, fb, tol, seed=cfg.overrides.get("seed"), sim=cfg.sim)
        results.append(res)
        print(res.line())
        if not res.passed:
            st.failures.append(name)
    verdict = ge.FAIL if any(not r.passed for r in results) else ge.PASS
    path = cfg.outputs / CHECKS_JSON
    cfg.outputs.mkdir(parents=True, exist_ok=True)
    _write_json(path, {"config_sha256": cfg.config_sha256, "verdict": verdict, "checks": [r.to_dict() for r in results]})
    st.artifacts.append(path)


STEPS = {"solve": _do_solve, "benchmark": _do_benchmark, "simulate": _do_simulate, "check": _do_check}


def write_manifest(st: RunState, subcommand: str) -> Path:
    cfg = st.cfg
    arts = {}
    for path in st.artifacts:
        arts[path.name] = sha256_file(path)
    man = {
        "subcommand": subcommand,
        "config_sha256": cfg.config_sha256,
        "config_text": cfg.text,
        "overrides": {k: (list(v) if isinstance(v, tuple) else v) for k, v in cfg.overrides.items() if k != "out"},
        "seed": cfg.sim.seed,
        "versions": {
            "dynkin_filter": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
        "artifacts": dict(sorted(arts.items())),
        "failures": st.failures,
    }
    path = cfg.outputs / MANIFEST_JSON
    _write_json(path, man)
    return path


def run(subcommand: str, cfg: RunConfig) -> int:
    """Run one subcommand; returns the exit status."""
    if subcommand not in SUBCOMMANDS:
        raise ConfigError(f"unknown subcommand {subcommand!r}")
    cfg.outputs.mkdir(parents=True, exist_ok=True)
    st = RunState(cfg)
    steps = ("solve", "benchmark", "simulate", "check") if subcommand == "all" else (subcommand,)
    for step in steps:
        STEPS[step](st)
    write_manifest(st, subcommand)
    return EXIT_CHECK_FAILED if st.failures else EXIT_OK


# --------------------------------------------------------------------------
# bundle
# --------------------------------------------------------------------------

BUNDLE_FILES = (SURFACE_CSV, BOUNDARY_Z_CSV, BOUNDARY_Y_CSV, SOLVE_JSON, BENCHMARK_JSON, BENCHMARK_CSV, CHECKS_JSON, MANIFEST_JSON)


def _read_boundary_y(path: Path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    data = np.genfromtxt(path, delimiter=",", names=True, dtype=float, missing_values="", filling_values=np.nan)
    return data["y"], data["b1"], data["b2"]


def export_bundle(run_dir: str | Path, bundle_dir: str | Path | None = None) -> list[Path]:
    """Collect the reproduction package of a completed run.

    Re-asserts on the exported boundary table that b1 and b2 are
    nonincreasing in y (up to one z cell of the solve, read from the solve
    metadata) and that the manifest hashes match the files.
    """
    run_dir = Path(run_dir)
    missing = [name for name in BUNDLE_FILES if not (run_dir / name).exists()]
    if missing:
        raise FileNotFoundError(f"run directory {run_dir} lacks {', '.join(missing)}")
    man = json.loads((run_dir / MANIFEST_JSON).read_text(encoding="utf-8"))
    for name, digest in man["artifacts"].items():
        # a bundle omits the path dump; every bundle file is required above
        if name not in BUNDLE_FILES and not (run_dir / name).exists():
            continue
        if sha256_file(run_dir / name) != digest:
            raise ValueError(f"{name} does not match its manifest hash")
    meta = json.loads((run_dir / SOLVE_JSON).read_text(encoding="utf-8"))
    K = float(meta["params"]["strike"])
    y, b1, b2 = _read_boundary_y(run_dir / BOUNDARY_Y_CSV)
    slack = float(meta["dz"])
    for name, b in (("b1", b1[1:-1]), ("b2", b2[1:-1])):
        lb = np.log(b[~np.isnan(b)] / K)
        if np.any(np.diff(lb) > slack):
            raise ValueError(f"exported {name} is not nonincreasing in y")
    target = run_dir if bundle_dir is None else Path(bundle_dir)
    if target != run_dir:
        target.mkdir(parents=True, exist_ok=True)
        for name in BUNDLE_FILES:
            shutil.copyfile(run_dir / name, target / name)
    return [target / name for name in BUNDLE_FILES]


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------


def _grid_flag(value: str) -> tuple[int, int]:
    m = GRID_FLAG.match(value.strip())
    if not m:
        raise argparse.ArgumentTypeError(f"expected NZxNY, got {value!r}")
    return int(m.group(1)), int(m.group(2))


def _seed_flag(value: str) -> int:
    if not INTEGER.match(value.strip()):
        raise argparse.ArgumentTypeError(f"expected a nonnegative integer seed, got {value!r}")
    return int(value)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dynkin-filter", description="Game call option with a hidden dividend: solve, simulate and verify.")
    ap.add_argument("subcommand", choices=SUBCOMMANDS)
    ap.add_argument("--config", required=True, help="INI configuration, or a manifest.json to replay")
    ap.add_argument("--out", help="output directory (overrides [outputs] directory)")
    ap.add_argument("--seed", type=_seed_flag, help="master seed (overrides [sim] seed)")
    ap.add_argument("--grid", type=_grid_flag, help="grid size NZxNY (overrides [grid])")
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    overrides: dict[str, object] = {}
    if args.out is not None:
        overrides["out"] = args.out
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.grid is not None:
        overrides["grid"] = args.grid
    try:
        cfg = load_config(args.config, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return run(args.subcommand, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DynkinError as exc:
        print(f"run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CHECK_FAILED
