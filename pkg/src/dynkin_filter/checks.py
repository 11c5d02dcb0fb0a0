"""Named verification checks shared by the command line and the test suite.

Each check returns a :class:`CheckResult` holding the measured value, the
tolerance it is held to, a verdict and the raw diagnostics.  Defaults are
the settings of the acceptance runs.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import closed_form as cf
from . import game_eval as ge
from . import path_engine as pe
from . import vi_solver as vs
from .model_core import ModelParams, StatePoint, validate_params

PASS, FAIL, SKIPPED = ge.PASS, ge.FAIL, ge.SKIPPED

DESK = (0.08, 0.05, 0.3, 1.0, 0.1)
STRONG_NEGATIVE_K = (0.05, 0.05, 0.3, 1.0, 0.1)
SHIFTS = (-0.05, -0.02, 0.02, 0.05)


@dataclass
class CheckResult:
    """Outcome of one named check."""

    name: str
    verdict: str
    value: float
    tolerance: float
    detail: dict = field(default_factory=dict)
    runtime: float = 0.0

    @property
    def passed(self) -> bool:
        return self.verdict != FAIL

    def line(self) -> str:
        return f"{self.name}: {self.verdict.upper()} (value={self.value:.6g}, tolerance={self.tolerance:.6g}, {self.runtime:.1f}s)"

    def to_dict(self) -> dict[str, object]:
        return {
            "name": self.name,
            "verdict": self.verdict,
            "value": self.value,
            "tolerance": self.tolerance,
            "runtime": self.runtime,
            "detail": _jsonable(self.detail),
        }


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _timed(fn: Callable[[], CheckResult]) -> CheckResult:
    t0 = time.perf_counter()
    res = fn()
    res.runtime = time.perf_counter() - t0
    return res


def desk_params() -> ModelParams:
    return validate_params(*DESK)


# --------------------------------------------------------------------------
# closed forms
# --------------------------------------------------------------------------


def complete_info_consistency(p: ModelParams, n_z: int = 400, n_y: int = 200, tol: float = 1e-2, max_runtime: float = 120.0) -> CheckResult:
    """b1 on the top interior row against the y = 1 buyer boundary.

    The top row itself carries the edge data, so the first solved row is
    the one compared.
    """

    def run() -> CheckResult:
        name = "complete_info"
        if not (p.k > 0 and p.penalty < p.strike):
            return CheckResult(name, SKIPPED, float("nan"), tol, {"reason": "needs k > 0 and eps0 < K"})
        t0 = time.perf_counter()
        s = vs.solve(p, vs.default_grid(p, n_z=n_z, n_y=n_y))
        fb = vs.extract_boundaries(s)
        elapsed = time.perf_counter() - t0
        sol = cf.classify_case(p)
        ref = sol.buyer_boundary
        b1 = float(fb.b1[-2])
        err = abs(b1 / ref - 1.0)
        ok = err <= tol and elapsed <= max_runtime
        return CheckResult(
            name, PASS if ok else FAIL, err, tol,
            {"case": sol.case_id, "b1_top_row": b1, "reference": ref, "y_row": float(fb.y[-2]),
             "solve_seconds": elapsed, "max_seconds": max_runtime},
        )

    return _timed(run)


def edge_agreement(s: vs.ValueSurface, tol: float = 5e-3, overlap: tuple[float, float] = (1e-2, 1e2)) -> CheckResult:
    """Rows next to the edges against V0 and V1 for x in ``overlap`` (units of K)."""

    def run() -> CheckResult:
        p = s.params
        K = p.strike
        V0 = cf.edge_value("y0_edge", p)
        V1 = cf.edge_value("y1_edge", p)
        errs = {}
        for label, i, V in (("bottom", 1, V0), ("top", -2, V1)):
            x = s.x[:, i]
            m = (x >= overlap[0] * K) & (x <= overlap[1] * K)
            errs[label] = float(np.max(np.abs(s.v[m, i] - V(x[m])))) / K if np.any(m) else float("nan")
        worst = max(errs.values())
        return CheckResult("edge_agreement", PASS if worst <= tol else FAIL, worst, tol,
                           {"sup_error_over_K": errs, "overlap_over_K": overlap})

    return _timed(run)


def sweep_params(base: Sequence[float] = DESK) -> list[ModelParams]:
    """20 parameter points: 5 dividend rates times 4 penalties (one of them >= K)."""
    r, _, sigma, K, _ = base
    out = []
    for eps in (0.05, 0.1, 0.3, 1.5):
        for d0 in (0.01, 0.02, 0.035, 0.05, 0.1):
            out.append(validate_params(r, d0, sigma, K, eps * K))
    return out


def root_residuals(params: Sequence[ModelParams] | None = None, tol: float = 1e-8, max_runtime: float = 10.0) -> CheckResult:
    """Defining-equation residuals and the case partition over a sweep."""

    def run() -> CheckResult:
        pts = sweep_params() if params is None else list(params)
        worst = 0.0
        ordered = True
        exclusive = True
        cases: dict[str, int] = {}
        for p in pts:
            sol = cf.classify_case(p)
            cases[sol.case_id] = cases.get(sol.case_id, 0) + 1
            if p.penalty >= p.strike:
                fired = [sol.case_id == "Case1"]
            else:
                d1, d2 = sol.delta1, sol.delta2
                ordered &= d1 < d2
                fired = [
                    p.delta0 >= d2,
                    d1 <= p.delta0 < d2,
                    p.delta0 < d1,
                ]
                expect = ("Case2", "Case3", "Case4")[int(np.argmax(fired))]
                exclusive &= sum(fired) == 1 and expect == sol.case_id
            if sol.case_id == "Case3":
                worst = max(worst, abs(cf.alpha0_residual(sol.alpha0, p)))
            elif sol.case_id == "Case4":
                res = cf.system_residuals(sol.alpha1, sol.beta1, p)
                worst = max(worst, float(np.max(np.abs(res))))
            exclusive &= sum(sol.case_id == c for c in cf.CASES) == 1
        return CheckResult("roots", "", worst, tol,
                           {"n_points": len(pts), "delta1_lt_delta2": bool(ordered), "partition_exclusive": bool(exclusive),
                            "case_counts": cases, "max_seconds": max_runtime})

    res = _timed(run)
    ok = res.value < tol and res.detail["delta1_lt_delta2"] and res.detail["partition_exclusive"] and res.runtime <= max_runtime
    res.verdict = PASS if ok else FAIL
    return res


# --------------------------------------------------------------------------
# solver
# --------------------------------------------------------------------------

GEOMETRY_KEYS = (
    "c1_nondecreasing",
    "c2_nondecreasing",
    "b1_ge_b2",
    "b1_y_ge_rK_over_delta0",
    "b2_y_le_bound",
    "c1_positive",
    "s2_empty_iff_penalty_ge_strike",
)


def geometry(s: vs.ValueSurface, fb: vs.FreeBoundaries | None = None, tol: float = 1e-9) -> CheckResult:
    """Obstacle sandwich and the free-boundary geometry of one solve."""

    def run() -> CheckResult:
        f = vs.extract_boundaries(s) if fb is None else fb
        p = s.params
        K = p.strike
        below = float(max(0.0, -np.min(s.g))) / K
        above = float(max(0.0, np.max(s.g) - p.penalty)) / K
        inv = vs.boundary_invariants(f)
        flags = {k: bool(inv[k]) for k in GEOMETRY_KEYS}
        flags["slices_with_c1_on_grid"] = int(np.sum(~np.isnan(f.c1)))
        ok = max(below, above) <= tol and all(flags[k] for k in GEOMETRY_KEYS)
        return CheckResult("geometry", PASS if ok else FAIL, max(below, above), tol,
                           {"flags": flags, "s2_empty": f.s2_empty, "params": p.to_dict()})

    return _timed(run)


def truncation_ladder(p: ModelParams, grid: vs.GridSpec | None = None, levels: Sequence[float] = (2, 4, 8, 16),
                      tol: float = 1e-3, slack: float = 1e-9) -> CheckResult:
    """Monotone ladder v^(n) <= v^(n') <= v and the gap at the top level.

    The gap is measured on nodes with F <= n/2: above that the truncated
    payoff is flat and the two games differ by construction.
    """

    def run() -> CheckResult:
        g = vs.default_grid(p) if grid is None else grid
        K = p.strike
        s = vs.solve(p, g)
        prev = None
        mono = True
        dominated = True
        gaps = {}
        for n in levels:
            sn = vs.solve_truncated(p, g, n * K)
            dominated &= bool(np.all(sn.v <= s.v + slack * K))
            if prev is not None:
                mono &= bool(np.all(sn.v >= prev.v - slack * K))
            m = s.x <= 0.5 * n * K
            gaps[f"{n:g}"] = float(np.max((s.v - sn.v)[m])) / K
            prev = sn
        top = gaps[f"{levels[-1]:g}"]
        ok = mono and dominated and top <= tol
        return CheckResult("truncation", PASS if ok else FAIL, top, tol,
                           {"nondecreasing_in_n": mono, "dominated_by_v": dominated, "gap_over_K": gaps})

    return _timed(run)


def smoothfit_decay(p: ModelParams, n_ys: Sequence[int] = (101, 201, 401, 801), band: tuple[float, float] = (1.4, 2.8)) -> CheckResult:
    """Decay of the measured w_y jump across c1 and c2 under co-refinement.

    Each level halves dy and dz together (n_z = 2 (n_y - 1) + 1).
    """

    def run() -> CheckResult:
        rows = []
        for ny in n_ys:
            s = vs.solve(p, vs.default_grid(p, n_z=2 * (ny - 1) + 1, n_y=ny))
            fb = vs.extract_boundaries(s)
            rep = vs.smoothfit_report(s, fb)
            rows.append((rep["mean_jump_c1"], rep["mean_jump_c2"], rep["max_wy_inside_s2"]))
        jumps = np.array(rows)
        ratios = {}
        ok = True
        worst = float("inf")
        for c, label in ((0, "c1"), (1, "c2")):
            col = jumps[:, c]
            if np.all(np.isnan(col)):
                ratios[label] = []
                continue
            r = col[:-1] / col[1:]
            ratios[label] = r.tolist()
            ok &= bool(np.all((r >= band[0]) & (r <= band[1])))
            worst = min(worst, float(np.min(r)))
        return CheckResult("smoothfit", PASS if ok else FAIL, worst, band[0],
                           {"n_y": list(n_ys), "mean_jump_c1": jumps[:, 0], "mean_jump_c2": jumps[:, 1],
                            "ratios": ratios, "ratio_band": band, "max_wy_inside_s2": jumps[:, 2]})

    return _timed(run)


# --------------------------------------------------------------------------
# simulation
# --------------------------------------------------------------------------


def filter_identity(p: ModelParams, dts: Sequence[float] = (1e-3, 5e-4, 2.5e-4), n_paths: int = 1000, seed: int = 7,
                    scheme: str = "euler_y_exact_z", start: StatePoint | None = None, band: tuple[float, float] = (1.5, 3.0),
                    max_runtime: float = 60.0) -> CheckResult:
    """Gap between the exact filter of the simulated price and the stepped Y.

    The price fed to the filter is the exponential form of X driven by the
    same increments, not F(Z, Y), which would return Y exactly.
    """

    def run() -> CheckResult:
        st = StatePoint(p.strike, 0.5) if start is None else start
        gaps = []
        for dt in dts:
            cfg = pe.SimConfig(dt=dt, horizon=1.0, n_paths=n_paths, seed=seed, scheme=scheme)
            b = pe.simulate_filtered(p, st, cfg, keep_increments=False)
            yf = pe.exact_filter(p, b.x_exp_paths, st.x, st.y, b.times)
            gaps.append(float(np.max(np.abs(yf - b.y_paths))))
        ratios = [gaps[i] / gaps[i + 1] for i in range(len(gaps) - 1)]
        return CheckResult(f"filter[{scheme}]", "", min(ratios), band[0],
                           {"dts": list(dts), "max_gap": gaps, "ratios": ratios, "ratio_band": band, "max_seconds": max_runtime})

    res = _timed(run)
    r = res.detail["ratios"]
    ok = all(band[0] <= x <= band[1] for x in r) and res.runtime <= max_runtime
    res.verdict = PASS if ok else FAIL
    return res


def martingale(p: ModelParams, s: vs.ValueSurface, fb: vs.FreeBoundaries, ys: Sequence[float] = (0.3, 0.5, 0.7),
               checkpoints: Sequence[float] = (0.25, 0.5, 1.0), n_paths: int = 100_000, dt: float = 1e-3, seed: int = 5,
               block_size: int = 8192) -> CheckResult:
    """Stopped-value super-, sub- and martingale checks at interior starts."""

    def run() -> CheckResult:
        reports = []
        worst = -float("inf")
        ok = True
        for y in ys:
            st = ge.continuation_start(fb, y)
            cfg = pe.SimConfig(dt=dt, horizon=max(checkpoints), n_paths=n_paths, seed=seed, block_size=block_size)
            rep = ge.martingale_check(p, st, s, fb, checkpoints, cfg)
            reports.append(rep)
            ok &= rep["verdict"] == PASS
            for rec in rep["records"]:
                if rec["verdict"] != SKIPPED:
                    worst = max(worst, -rec["margin"])
        return CheckResult("martingale", PASS if ok else FAIL, worst, 0.0,
                           {"reports": reports, "value_is": "largest violation minus slack (<= 0 passes)"})

    return _timed(run)


def saddle(p: ModelParams, s: vs.ValueSurface | None = None, fb: vs.FreeBoundaries | None = None, y: float = 0.5,
           shifts: Sequence[float] = SHIFTS, n_paths: int = 100_000, dt: float = 1e-2, seed: int = 11,
           block_size: int = 8192, max_runtime: float = 600.0) -> CheckResult:
    """Shifted-boundary deviations from a continuation start at row ``y``."""

    def run() -> CheckResult:
        surf = vs.solve(p) if s is None else s
        f = vs.extract_boundaries(surf) if fb is None else fb
        st = ge.continuation_start(f, y)
        horizon = ge.default_horizon(p, st, f)
        cfg = pe.SimConfig(dt=dt, horizon=horizon, n_paths=n_paths, seed=seed, block_size=block_size)
        rep = ge.saddle_check(p, st, f, shifts, cfg, surface=surf)
        worst = max(-r["margin"] for r in rep["records"])
        return CheckResult(f"saddle[k={p.k:+.3g}]", rep["verdict"], worst, 0.0,
                           {"report": rep, "max_seconds": max_runtime,
                            "value_is": "largest violation minus slack (<= 0 passes)"})

    res = _timed(run)
    if res.runtime > max_runtime and res.verdict == PASS:
        res.verdict = FAIL
    return res


def regularity(p: ModelParams, fb: vs.FreeBoundaries, n_points: int = 10, n_paths: int = 2000, dt: float = 1e-4,
               seed: int = 3, budget: float = 0.05) -> CheckResult:
    """P(entry into the interior > 1e-2) from points on both boundaries."""

    def run() -> CheckResult:
        cfg = pe.SimConfig(dt=dt, horizon=1e-2, n_paths=n_paths, seed=seed)
        rep = ge.regularity_probe(p, fb, n_points, cfg, budget=budget)
        probs = [r["p_entry_after"]["0.01"] for r in rep["records"] if "p_entry_after" in r]
        worst = max(probs) if probs else float("nan")
        return CheckResult("regularity", rep["verdict"], worst, budget, {"report": rep})

    return _timed(run)


# --------------------------------------------------------------------------
# registry
# --------------------------------------------------------------------------

CHECK_NAMES = (
    "complete_info",
    "edge_agreement",
    "roots",
    "geometry",
    "truncation",
    "filter",
    "martingale",
    "saddle",
    "smoothfit",
    "regularity",
)


def run_named(name: str, p: ModelParams, s: vs.ValueSurface, fb: vs.FreeBoundaries | None, tol: float | None,
              seed: int | None = None, sim: pe.SimConfig | None = None) -> CheckResult:
    """Run one check by name on the configured model and surface.

    ``tol`` overrides the default tolerance where the check has one.
    Simulation checks take their path count from ``sim`` when given.
    """
    kw: dict = {}
    if tol is not None:
        kw["tol"] = tol
    if name == "complete_info":
        return complete_info_consistency(p, n_z=s.grid.n_z, n_y=s.grid.n_y, **kw)
    if name == "edge_agreement":
        return edge_agreement(s, **kw)
    if name == "roots":
        return root_residuals(**kw)
    if name == "geometry":
        return geometry(s, fb, **kw)
    if name == "truncation":
        return truncation_ladder(p, s.grid, **kw)
    if name == "smoothfit":
        return smoothfit_decay(p)
    if fb is None:
        fb = vs.extract_boundaries(s)
    sim_kw: dict = {}
    if sim is not None:
        sim_kw["n_paths"] = sim.n_paths
    if seed is not None:
        sim_kw["seed"] = seed
    if name == "filter":
        return filter_identity(p, **sim_kw)
    if name == "martingale":
        return martingale(p, s, fb, **sim_kw)
    if name == "saddle":
        return saddle(p, s, fb, **sim_kw)
    if name == "regularity":
        if sim is not None:
            sim_kw["n_paths"] = min(sim.n_paths, 2000)
        return regularity(p, fb, **sim_kw, **({"budget": tol} if tol is not None else {}))
    raise KeyError(f"unknown check {name!r}")
