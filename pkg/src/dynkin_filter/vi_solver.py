"""Double-obstacle solver for the game value in (z, y) coordinates.

The value v(z, y) = V(F(z, y), y) satisfies

    k v_z + D y^2 (1-y)^2 v_yy - r v = 0    between the obstacles,
    H1 <= v <= H2,

with D = delta0^2 / (2 sigma^2).  Since z moves deterministically as
z + k t, it plays the role of time: the scheme marches slice by slice in
the direction opposite to the motion of z, solving on each slice an
implicit one-dimensional obstacle problem in y.

Because H2 - H1 = eps0 everywhere, the unknown on each slice is the gap
g = v - H1, which lives in the fixed box [0, eps0].  This keeps the
arithmetic well scaled even where H1 is of order 1e11.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import solve_banded

from . import closed_form as cf
from .errors import DomainTooSmall, EmptyRegion, NoConvergenceAtSlice, OutOfDomain
from .model_core import ModelParams, expit, f_map, logit, y_k_curve, z_of

C_LABEL, S1_LABEL, S2_LABEL = 0, 1, 2
KINK_REL_TOL = 1e-10
LABEL_NAMES = {C_LABEL: "C", S1_LABEL: "S1", S2_LABEL: "S2"}


@dataclass(frozen=True)
class GridSpec:
    """Rectangular grid in (z, y).

    ``spacing`` selects how the y nodes are placed on [y_min, 1 - y_min]:
    "logit" spaces them uniformly in ln(y / (1 - y)), "uniform" uniformly
    in y.
    """

    z_min: float
    z_max: float
    n_z: int
    y_min: float = 1e-3
    n_y: int = 200
    spacing: str = "logit"

    def __post_init__(self) -> None:
        object.__setattr__(self, "z_min", float(self.z_min))
        object.__setattr__(self, "z_max", float(self.z_max))
        object.__setattr__(self, "y_min", float(self.y_min))
        object.__setattr__(self, "n_z", int(self.n_z))
        object.__setattr__(self, "n_y", int(self.n_y))
        if not self.z_min < self.z_max:
            raise ValueError("z_min must be below z_max")
        if self.n_z < 16 or self.n_y < 16:
            raise ValueError("n_z and n_y must be at least 16")
        if not 0.0 < self.y_min < 0.5:
            raise ValueError("y_min must lie in (0, 0.5)")
        if self.spacing not in ("logit", "uniform"):
            raise ValueError(f"unknown spacing {self.spacing!r}")

    def z_nodes(self) -> np.ndarray:
        return np.linspace(self.z_min, self.z_max, self.n_z)

    def y_nodes(self) -> np.ndarray:
        if self.spacing == "uniform":
            return np.linspace(self.y_min, 1.0 - self.y_min, self.n_y)
        lmax = float(logit(1.0 - self.y_min))
        y = expit(np.linspace(-lmax, lmax, self.n_y))
        y[0], y[-1] = self.y_min, 1.0 - self.y_min
        return y

    @property
    def dz(self) -> float:
        return (self.z_max - self.z_min) / (self.n_z - 1)

    def to_dict(self) -> dict[str, object]:
        return {
            "z_min": self.z_min,
            "z_max": self.z_max,
            "n_z": self.n_z,
            "y_min": self.y_min,
            "n_y": self.n_y,
            "spacing": self.spacing,
        }


def _required_z_range(p: ModelParams, y_min: float, x_low: float | None, buyer_margin: float) -> tuple[float, float]:
    K = p.strike
    if x_low is None:
        x_low = 1e-2 * K if p.k > 0 else 1e-3 * K
    lmax = float(logit(1.0 - y_min))
    z_lo = float(np.log(x_low) - p.ratio * lmax)
    needs = []
    for y in expit(np.linspace(-lmax, lmax, 64)):
        x_star = cf.perpetual_call(p, p.delta0 * y).threshold
        target = buyer_margin * max(x_star, p.r * K / (p.delta0 * y))
        needs.append(np.log(target) + p.ratio * float(logit(y)))
    return z_lo, float(max(needs))


def default_grid(
    p: ModelParams,
    n_z: int = 400,
    n_y: int = 200,
    y_min: float = 1e-3,
    spacing: str = "logit",
    x_low: float | None = None,
    buyer_margin: float = 3.0,
    aligned: bool = True,
) -> GridSpec:
    """Grid whose z range covers the relevant part of every y row.

    At z_min the bottom row satisfies F <= x_low (deep below K, where the
    value is negligible).  At z_max every row lies beyond ``buyer_margin``
    times the perpetual buyer threshold of the game frozen at dividend
    delta0*y, and beyond the bound rK / (delta0 y), so the top slice is
    deep inside the buyer's stopping set.

    With ``aligned`` (logit spacing only) the z step is ratio * dl / m for
    the largest integer m that still covers the range, and z_min is shifted
    so that the strike line F = K passes through grid nodes.  Every row then
    samples the same lattice in ln x and the kink of the obstacle sits on
    nodes.
    """
    z_lo, z_hi = _required_z_range(p, y_min, x_low, buyer_margin)
    if not (aligned and spacing == "logit"):
        return GridSpec(z_lo, z_hi, n_z, y_min, n_y, spacing)
    lmax = float(logit(1.0 - y_min))
    step = p.ratio * 2.0 * lmax / (n_y - 1)
    m = int(np.floor((n_z - 1) * step / (z_hi - z_lo)))
    if m < 1:
        return GridSpec(z_lo, z_hi, n_z, y_min, n_y, spacing)
    dz = step / m
    # shift so that ln K - ratio * lmax is a grid node, then center the slack
    anchor = np.log(p.strike) - p.ratio * lmax
    slack = (n_z - 1) * dz - (z_hi - z_lo)
    start = z_lo - 0.5 * slack
    n_shift = np.ceil((anchor - start) / dz - 1e-9)
    z_min = anchor - n_shift * dz
    if z_min > z_lo:
        z_min -= dz
    z_max = z_min + (n_z - 1) * dz
    if z_max < z_hi:
        return GridSpec(z_lo, z_hi, n_z, y_min, n_y, spacing)
    return GridSpec(z_min, z_max, n_z, y_min, n_y, spacing)


# --------------------------------------------------------------------------
# lateral data
# --------------------------------------------------------------------------


def edge_functions(p: ModelParams, grid: GridSpec, edge: str) -> tuple[Callable, Callable]:
    """Value functions of x used on the bottom and top rows.

    "closed_form" uses the complete-information values V0 and V1.
    "frozen" uses the complete-information game whose dividend rate is
    frozen at delta0 * y on the edge row, which converges to V0 and V1 as
    y_min -> 0 and keeps the right behaviour for large x on the bottom row.
    """
    if edge == "closed_form":
        return cf.edge_value("y0_edge", p), cf.edge_value("y1_edge", p)
    if edge == "frozen":
        lo = cf.complete_info_value(p, p.delta0 * grid.y_min, side="frozen_bottom")
        hi = cf.complete_info_value(p, p.delta0 * (1.0 - grid.y_min), side="frozen_top")
        return lo, hi
    raise ValueError(f"unknown edge mode {edge!r}")


# --------------------------------------------------------------------------
# surface container
# --------------------------------------------------------------------------


@dataclass
class ValueSurface:
    """Solved game value on a (z, y) grid.

    Arrays are indexed [z index, y index].  ``g`` is the gap v - H1, which
    lies in [0, eps0]; ``w`` equals u(F(z, y), y) with u = V - (x - K).
    """

    params: ModelParams
    grid: GridSpec
    z: np.ndarray
    y: np.ndarray
    v: np.ndarray
    g: np.ndarray
    h1: np.ndarray
    region: np.ndarray
    w: np.ndarray
    cap: float | None = None
    edge: str = "frozen"
    method: str = "psor"
    tol_active: float = 0.0
    diagnostics: dict = field(default_factory=dict)

    @property
    def u(self) -> np.ndarray:
        return self.w

    @property
    def x(self) -> np.ndarray:
        return f_map(self.z[:, None], self.y[None, :], self.params)

    @property
    def h2(self) -> np.ndarray:
        return self.h1 + self.params.penalty

    def interpolator(self) -> "SurfaceInterpolator":
        return SurfaceInterpolator(self)


def _operator_coefficients(p: ModelParams, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Weights of the 3-point approximation of D y^2 (1-y)^2 v_yy on a nonuniform grid."""
    n = len(y)
    lo = np.zeros(n)
    up = np.zeros(n)
    hm = y[1:-1] - y[:-2]
    hp = y[2:] - y[1:-1]
    coef = p.diffusion * (y[1:-1] * (1.0 - y[1:-1])) ** 2
    lo[1:-1] = 2.0 * coef / (hm * (hm + hp))
    up[1:-1] = 2.0 * coef / (hp * (hm + hp))
    return lo, up


def _h1(p: ModelParams, x: np.ndarray, cap: float | None) -> np.ndarray:
    if cap is not None:
        x = np.minimum(x, cap)
    return np.maximum(x - p.strike, 0.0)


def _generator_h1(p, y, x_j, x_prev, h1_j, h1_prev, lo, up, c_dt, cap):
    """Generator applied to the lower obstacle at the interior nodes of one slice.

    Where the four stencil points lie on one smooth branch of H1 the exact
    value is used (rK - delta0 y F on the linear branch, -r(n - K) on the
    capped branch, 0 below K).  Only stencils straddling a kink fall back to
    the discrete operator.  Applying the upwind z-difference to H1 ~ e^z
    would otherwise add an error k dz F / 2 that swamps rK - delta0 y F at
    small y.
    """
    K = p.strike
    yi = y[1:-1]
    pts = np.stack([x_j[:-2], x_j[1:-1], x_j[2:], x_prev[1:-1]])
    hj = h1_j
    discrete = (
        c_dt * (h1_prev[1:-1] - hj[1:-1])
        - p.r * hj[1:-1]
        + lo[1:-1] * (hj[:-2] - hj[1:-1])
        + up[1:-1] * (hj[2:] - hj[1:-1])
    )
    top = np.inf if cap is None else cap
    linear = np.all(pts > K, axis=0) & np.all(pts < top, axis=0)
    below = np.all(pts <= K, axis=0)
    flat = np.all(pts >= top, axis=0)
    exact = np.where(linear, p.r * K - p.delta0 * yi * x_j[1:-1], 0.0)
    if cap is not None:
        exact = np.where(flat, -p.r * (cap - K), exact)
    return np.where(linear | below | flat, exact, discrete)


def _slice_rhs(p, y, x_j, x_prev, h1_j, h1_prev, g_prev, lo, up, c_dt, cap):
    rhs = np.zeros(len(y))
    rhs[1:-1] = c_dt * g_prev[1:-1] + _generator_h1(p, y, x_j, x_prev, h1_j, h1_prev, lo, up, c_dt, cap)
    return rhs


def _complementarity_residual(g, rhs, diag, lo, up, cap) -> float:
    q = diag[1:-1] * g[1:-1] - lo[1:-1] * g[:-2] - up[1:-1] * g[2:] - rhs[1:-1]
    gi = g[1:-1]
    res = np.where(gi <= 0.0, np.maximum(-q, 0.0), np.where(gi >= cap, np.maximum(q, 0.0), np.abs(q)))
    return float(res.max()) if res.size else 0.0


def _psor_slice(g, rhs, diag, lo, up, cap, omega, tol, max_sweeps, check_every=4):
    """Projected SOR with red-black ordering; boundary entries of g stay fixed."""
    n = len(g)
    red = np.arange(1, n - 1, 2)
    black = np.arange(2, n - 1, 2)
    inv = np.zeros(n)
    inv[1:-1] = 1.0 / diag[1:-1]
    sweeps = 0
    res = _complementarity_residual(g, rhs, diag, lo, up, cap)
    while res >= tol:
        if sweeps >= max_sweeps:
            return g, sweeps, res, False
        for idx in (red, black):
            corr = rhs[idx] + lo[idx] * g[idx - 1] + up[idx] * g[idx + 1] - diag[idx] * g[idx]
            g[idx] = np.clip(g[idx] + omega * corr * inv[idx], 0.0, cap)
        sweeps += 1
        if sweeps % check_every == 0:
            res = _complementarity_residual(g, rhs, diag, lo, up, cap)
    return g, sweeps, res, True


def _policy_slice(g, rhs, diag, lo, up, cap, tol, max_iter=200):
    """Primal-dual active-set iteration for the box-constrained slice problem.

    Continuation nodes that leave [0, cap] are pinned to the violated bound;
    pinned nodes whose multiplier has the wrong sign are released.
    """
    n = len(g)
    g = np.clip(g.copy(), 0.0, cap)
    state = np.zeros(n, dtype=np.int8)
    q = np.zeros(n)
    q[1:-1] = diag[1:-1] * g[1:-1] - lo[1:-1] * g[:-2] - up[1:-1] * g[2:] - rhs[1:-1]
    state[(g <= 0.0) & (q > 0.0)] = 1
    state[(g >= cap) & (q < 0.0)] = 2
    state[0] = state[-1] = 3
    for it in range(1, max_iter + 1):
        ab = np.zeros((3, n))
        b = np.zeros(n)
        cont = state == 0
        ab[1] = 1.0
        ab[1, cont] = diag[cont]
        ab[0, 1:] = np.where(cont[:-1], -up[:-1], 0.0)
        ab[2, :-1] = np.where(cont[1:], -lo[1:], 0.0)
        b[cont] = rhs[cont]
        b[state == 2] = cap
        b[0], b[-1] = g[0], g[-1]
        g = solve_banded((1, 1), ab, b)
        q[1:-1] = diag[1:-1] * g[1:-1] - lo[1:-1] * g[:-2] - up[1:-1] * g[2:] - rhs[1:-1]
        new = state.copy()
        new[cont & (g < 0.0)] = 1
        new[cont & (g > cap)] = 2
        new[(state == 1) & (q < 0.0)] = 0
        new[(state == 2) & (q > 0.0)] = 0
        if np.array_equal(new, state):
            g = np.clip(g, 0.0, cap)
            g[state == 1] = 0.0
            g[state == 2] = cap
            return g, it, _complementarity_residual(g, rhs, diag, lo, up, cap), True
        state = new
    return g, max_iter, _complementarity_residual(g, rhs, diag, lo, up, cap), False


def _march(
    p: ModelParams,
    grid: GridSpec,
    cap: float | None,
    edge: str,
    method: str,
    omega: float,
    tol: float,
    max_sweeps: int,
    check_domain: bool,
) -> ValueSurface:
    t0 = time.perf_counter()
    K, eps = p.strike, p.penalty
    z = grid.z_nodes()
    y = grid.y_nodes()
    n_z, n_y = len(z), len(y)
    x = f_map(z[:, None], y[None, :], p)
    h1 = _h1(p, x, cap)
    lo, up = _operator_coefficients(p, y)
    c_dt = abs(p.k) / grid.dz
    diag = np.zeros(n_y)
    diag[1:-1] = c_dt + p.r + lo[1:-1] + up[1:-1]
    tol_abs = tol * K

    bottom_fn, top_fn = edge_functions(p, grid, edge)
    v_bottom = bottom_fn(x[:, 0])
    v_top = top_fn(x[:, -1])
    if cap is not None:
        h1b, h1t = h1[:, 0], h1[:, -1]
        v_bottom = np.minimum(np.clip(v_bottom, h1b, h1b + eps), cap - K)
        v_top = np.minimum(np.clip(v_top, h1t, h1t + eps), cap - K)
    g_bottom = np.clip(v_bottom - h1[:, 0], 0.0, eps)
    g_top = np.clip(v_top - h1[:, -1], 0.0, eps)

    order = range(n_z - 1, -1, -1) if p.k > 0 else range(n_z)
    order = list(order)
    g = np.zeros((n_z, n_y))
    sweeps = np.zeros(n_z, dtype=int)
    residuals = np.zeros(n_z)
    first = order[0]
    g[first, 0], g[first, -1] = g_bottom[first], g_top[first]
    for prev, j in zip(order[:-1], order[1:]):
        gj = g[prev].copy()
        gj[0], gj[-1] = g_bottom[j], g_top[j]
        rhs = _slice_rhs(p, y, x[j], x[prev], h1[j], h1[prev], g[prev], lo, up, c_dt, cap)
        if method == "psor":
            gj, n_it, res, ok = _psor_slice(gj, rhs, diag, lo, up, eps, omega, tol_abs, max_sweeps)
        elif method == "policy":
            gj, n_it, res, ok = _policy_slice(gj, rhs, diag, lo, up, eps, tol_abs)
        else:
            raise ValueError(f"unknown method {method!r}")
        if not ok:
            raise NoConvergenceAtSlice(
                f"slice {j} (z={z[j]:.4f}) did not converge: residual {res:.3e} after {n_it} iterations", res
            )
        g[j] = gj
        sweeps[j] = n_it
        residuals[j] = res

    tol_active = 1e-7 * K
    region = np.full((n_z, n_y), C_LABEL, dtype=np.int8)
    # the buyer never stops at zero payoff and the seller only at x >= K
    at_or_above = x >= K * (1.0 - KINK_REL_TOL)
    region[(g <= tol_active) & (x > K * (1.0 + KINK_REL_TOL))] = S1_LABEL
    region[(g >= eps - tol_active) & at_or_above] = S2_LABEL

    second = order[1]
    interior = region[second, 1:-1]
    if p.k > 0:
        active_fraction = float(np.mean(interior != C_LABEL))
        domain_ok = active_fraction >= 0.99
        domain_msg = f"first solved slice is {100 * active_fraction:.2f}% obstacle-active (need 99%)"
    else:
        worst = float(np.max(g[second]))
        domain_ok = worst <= 1e-3 * K
        domain_msg = f"first solved slice has gap {worst:.3e} above H1 (need <= 1e-3 K)"
    if check_domain and not domain_ok:
        raise DomainTooSmall(domain_msg + "; widen the z range")

    v = h1 + g
    w = np.where(x > K, g, g + K - x) if cap is None else v - x + K
    diagnostics = {
        "sweeps": sweeps,
        "slice_residuals": residuals,
        "max_residual": float(residuals.max()),
        "total_sweeps": int(sweeps.sum()),
        "runtime_s": time.perf_counter() - t0,
        "domain_ok": domain_ok,
        "domain_message": domain_msg,
        "tolerance": tol_abs,
        "omega": omega,
    }
    return ValueSurface(
        params=p,
        grid=grid,
        z=z,
        y=y,
        v=v,
        g=g,
        h1=h1,
        region=region,
        w=w,
        cap=cap,
        edge=edge,
        method=method,
        tol_active=tol_active,
        diagnostics=diagnostics,
    )


def solve(
    p: ModelParams,
    grid: GridSpec | None = None,
    *,
    edge: str = "frozen",
    method: str = "psor",
    omega: float = 1.5,
    tol: float = 1e-9,
    max_sweeps: int = 100_000,
    check_domain: bool = True,
) -> ValueSurface:
    """Solve the double-obstacle problem on ``grid``.

    Parameters
    ----------
    p : ModelParams
        Validated parameters.
    grid : GridSpec, optional
        Defaults to :func:`default_grid`.
    edge : {"frozen", "closed_form"}
        Lateral data on the rows y_min and 1 - y_min.
    method : {"psor", "policy"}
        Slice solver: projected SOR or policy iteration.
    tol : float
        Complementarity residual target, in units of K.
    """
    grid = default_grid(p) if grid is None else grid
    return _march(p, grid, None, edge, method, omega, tol, max_sweeps, check_domain)


def solve_truncated(
    p: ModelParams,
    grid: GridSpec | None,
    n: float,
    **kwargs,
) -> ValueSurface:
    """Solve the game with payoffs G_i(min(x, n)), n > K."""
    if not n > p.strike:
        raise ValueError("the truncation level must exceed K")
    grid = default_grid(p) if grid is None else grid
    opts = dict(edge="frozen", method="psor", omega=1.5, tol=1e-9, max_sweeps=100_000, check_domain=True)
    opts.update(kwargs)
    return _march(
        p,
        grid,
        float(n),
        opts["edge"],
        opts["method"],
        opts["omega"],
        opts["tol"],
        opts["max_sweeps"],
        opts["check_domain"],
    )


# --------------------------------------------------------------------------
# boundaries
# --------------------------------------------------------------------------


@dataclass
class FreeBoundaries:
    """Sampled stopping boundaries.

    ``c1``, ``c2`` are indexed by the z grid, ``b1``, ``b2`` by the y grid.
    NaN marks an absent value (no stopping node on that line of the grid).
    The ``*_node`` arrays hold the last stopping node itself; the plain
    arrays refine it inside the adjacent cell.
    """

    z: np.ndarray
    y: np.ndarray
    c1: np.ndarray
    c2: np.ndarray
    yk: np.ndarray
    b1: np.ndarray
    b2: np.ndarray
    z_K: float
    y_bar_K: float
    b2_at_K: float
    s2_empty: bool
    params: ModelParams
    c1_node: np.ndarray | None = None
    c2_node: np.ndarray | None = None
    b1_node: np.ndarray | None = None
    b2_node: np.ndarray | None = None
    dz: float = float("nan")

    def c1_at(self, z):
        return _interp_nan(z, self.z, self.c1)

    def c2_at(self, z):
        return _interp_nan(z, self.z, self.c2)

    def yk_at(self, z):
        return y_k_curve(z, self.params)


def _interp_nan(zq, zs, vals):
    """Linear interpolation; NaN where either neighbour is NaN or outside the grid."""
    zq = np.asarray(zq, dtype=float)
    j = np.clip(np.searchsorted(zs, zq, side="right") - 1, 0, len(zs) - 2)
    t = (zq - zs[j]) / (zs[j + 1] - zs[j])
    out = (1.0 - t) * vals[j] + t * vals[j + 1]
    out = np.where((zq < zs[0]) | (zq > zs[-1]), np.nan, out)
    return out


def _sqrt_crossing(pos, gaps, i_stop, step):
    """Position where a gap that grows quadratically away from a free boundary vanishes.

    ``i_stop`` is the last stopping node, ``step`` (+1 or -1) points into the
    continuation region.  sqrt(gap) is linear near the boundary, so the two
    nearest continuation nodes are extrapolated to zero.
    """
    i1, i2 = i_stop + step, i_stop + 2 * step
    n = len(pos)
    if not 0 <= i1 < n:
        return pos[i_stop]
    if not 0 <= i2 < n or gaps[i2] <= gaps[i1]:
        return 0.5 * (pos[i_stop] + pos[i1])
    s1, s2 = np.sqrt(max(gaps[i1], 0.0)), np.sqrt(max(gaps[i2], 0.0))
    cross = pos[i1] - s1 * (pos[i2] - pos[i1]) / (s2 - s1)
    lo, hi = sorted((pos[i_stop], pos[i1]))
    return float(min(max(cross, lo), hi))


def extract_boundaries(s: ValueSurface) -> FreeBoundaries:
    """Locate c1, c2 along z slices and b1, b2 along y rows."""
    p = s.params
    eps = p.penalty
    z, y = s.z, s.y
    n_z, n_y = len(z), len(y)
    reg = s.region
    gap_lo = s.g
    gap_hi = eps - s.g
    x = s.x
    inner = slice(1, n_y - 1)

    c1, c2 = np.full(n_z, np.nan), np.full(n_z, np.nan)
    c1n, c2n = np.full(n_z, np.nan), np.full(n_z, np.nan)
    for j in range(n_z):
        col = reg[j]
        s1 = np.nonzero(col[inner] == S1_LABEL)[0] + 1
        if s1.size:
            i = int(s1.max())
            c1n[j] = y[i]
            c1[j] = _sqrt_crossing(y, gap_lo[j], i, +1) if i < n_y - 1 else y[i]
        s2 = np.nonzero((col[inner] == S2_LABEL) & (x[j, inner] >= p.strike))[0] + 1
        if s2.size:
            i = int(s2.min())
            c2n[j] = y[i]
            c2[j] = _sqrt_crossing(y, gap_hi[j], i, -1) if i > 0 else y[i]

    b1, b2 = np.full(n_y, np.nan), np.full(n_y, np.nan)
    b1n, b2n = np.full(n_y, np.nan), np.full(n_y, np.nan)
    for i in range(n_y):
        row = reg[:, i]
        s1 = np.nonzero(row == S1_LABEL)[0]
        s1 = s1[x[s1, i] > p.strike]
        if s1.size:
            j = int(s1.min())
            b1n[i] = x[j, i]
            zc = _sqrt_crossing(z, gap_lo[:, i], j, -1) if j > 0 else z[j]
            b1[i] = float(f_map(zc, y[i], p))
        s2 = np.nonzero((row == S2_LABEL) & (x[:, i] >= p.strike))[0]
        if s2.size:
            j = int(s2.max())
            b2n[i] = x[j, i]
            zc = _sqrt_crossing(z, gap_hi[:, i], j, +1) if j < n_z - 1 else z[j]
            b2[i] = float(f_map(zc, y[i], p))

    s2_empty = bool(np.all(np.isnan(b2)))
    if s2_empty:
        z_K = y_bar = b2K = float("nan")
    else:
        has = np.nonzero(~np.isnan(c2))[0]
        z_K = float(z[has.max()])
        y_bar = float(y_k_curve(z_K, p))
        rows = np.nonzero(~np.isnan(b2))[0]
        top = int(rows.max())
        b2K = float(y[top])
        if top >= 1 and top + 1 < n_y and not np.isnan(b2[top - 1]):
            l1, l0 = np.log(b2[top] / p.strike), np.log(b2[top - 1] / p.strike)
            if l0 > l1 >= 0.0:
                t = l1 / (l0 - l1)
                b2K = float(min(y[top] + t * (y[top] - y[top - 1]), y[top + 1]))
    if np.all(np.isnan(c1)):
        raise EmptyRegion("the buyer's stopping region S1 has no node on the grid")
    return FreeBoundaries(
        z, y, c1, c2, y_k_curve(z, p), b1, b2, z_K, y_bar, b2K, s2_empty, p,
        c1_node=c1n, c2_node=c2n, b1_node=b1n, b2_node=b2n, dz=float(z[1] - z[0]),
    )


# --------------------------------------------------------------------------
# invariant checks
# --------------------------------------------------------------------------


def _nondecreasing(a: np.ndarray, slack: float) -> bool:
    a = a[~np.isnan(a)]
    return bool(np.all(np.diff(a) >= -slack))


def boundary_invariants(fb: FreeBoundaries, slack_y: float = 1e-12, rel_slack: float = 1e-9) -> dict[str, bool]:
    """FreeBoundaries invariants as a dict of named verdicts.

    The two edge rows carry Dirichlet data rather than solved values, so the
    row-indexed curves b1, b2 are checked on interior rows only.
    """
    p = fb.params
    K, eps = p.strike, p.penalty
    out: dict[str, bool] = {}
    # node-level curves obey the discrete comparison principle exactly
    out["c1_nondecreasing"] = _nondecreasing(fb.c1_node, slack_y)
    out["c2_nondecreasing"] = _nondecreasing(fb.c2_node, slack_y)
    y = fb.y[1:-1]
    b1, b2 = fb.b1[1:-1], fb.b2[1:-1]
    for name, b in (("b1", fb.b1_node[1:-1]), ("b2", fb.b2_node[1:-1])):
        out[f"{name}_nonincreasing"] = _nondecreasing(-np.log(b / K), rel_slack)
    # refined curves may wobble inside one cell
    cell_y = float(np.max(np.diff(fb.y)))
    out["c_refined_monotone_within_cell"] = (
        _nondecreasing(fb.c1, cell_y) and _nondecreasing(fb.c2, cell_y)
    )
    out["b_refined_monotone_within_cell"] = (
        _nondecreasing(-np.log(b1 / K), fb.dz) and _nondecreasing(-np.log(b2 / K), fb.dz)
    )
    both = ~np.isnan(b1) & ~np.isnan(b2)
    out["b1_ge_b2"] = bool(np.all(b1[both] >= b2[both] * (1.0 - rel_slack)))
    m1 = ~np.isnan(b1)
    out["b1_y_ge_rK_over_delta0"] = bool(np.all(b1[m1] * y[m1] >= p.r * K / p.delta0 * (1.0 - rel_slack)))
    m2 = ~np.isnan(b2) & (b2 > K * (1.0 + rel_slack))
    if eps < K:
        out["b2_y_le_bound"] = bool(np.all(b2[m2] * y[m2] <= p.r * (K - eps) / p.delta0 * (1.0 + rel_slack)))
    else:
        out["b2_y_le_bound"] = not np.any(m2)
    c1 = fb.c1
    m = ~np.isnan(c1)
    out["c1_positive"] = bool(np.all(c1[m] > 0.0))
    out["c1_le_yk"] = bool(np.all(c1[m] <= fb.yk[m] + slack_y))
    m = ~np.isnan(fb.c2)
    out["c2_le_yk"] = bool(np.all(fb.c2[m] <= fb.yk[m] + slack_y))
    mb = m & ~np.isnan(c1)
    out["c1_le_c2"] = bool(np.all(c1[mb] <= fb.c2[mb] + slack_y))
    out["s2_empty_iff_penalty_ge_strike"] = bool(fb.s2_empty == (eps >= K))
    return out


def surface_invariants(s: ValueSurface, slack: float = 1e-9) -> dict[str, bool]:
    """Sandwich and monotonicity properties of a solved surface."""
    p = s.params
    K = p.strike
    out: dict[str, bool] = {}
    out["sandwich"] = bool(np.all(s.g >= -slack * K) and np.all(s.g <= p.penalty + slack * K))
    # v nondecreasing in z: dv = dH1 + dg, dH1 >= 0 exactly
    dh = np.diff(s.h1, axis=0)
    dg = np.diff(s.g, axis=0)
    out["v_nondecreasing_in_z"] = bool(np.all(dh + dg >= -slack * K))
    if p.assumption_ratio_ok:
        # checked between interior rows; the edge rows hold Dirichlet data
        # v - F = g - min(F, K) up to the constant K, free of cancellation
        vf = (s.g - np.minimum(s.x, K))[:, 1:-1]
        out["v_minus_F_nondecreasing_in_y"] = bool(np.all(np.diff(vf, axis=1) >= -slack * K))
    else:
        out["v_minus_F_nondecreasing_in_y"] = True
    out["labels_exclusive"] = bool(np.all(np.isin(s.region, (C_LABEL, S1_LABEL, S2_LABEL))))
    return out


# --------------------------------------------------------------------------
# evaluation in (x, y)
# --------------------------------------------------------------------------


class SurfaceInterpolator:
    """Evaluates V(x, y) from a surface by interpolating the gap in (z, logit y)."""

    def __init__(self, s: ValueSurface):
        self.s = s
        self.p = s.params
        self.l = logit(s.y)
        self.z = s.z

    def in_domain(self, z, y):
        z = np.asarray(z, dtype=float)
        y = np.asarray(y, dtype=float)
        return (z >= self.z[0]) & (z <= self.z[-1]) & (y >= self.s.y[0]) & (y <= self.s.y[-1])

    def gap(self, z, y):
        """Bilinear gap at points (z, y); NaN outside the grid."""
        z = np.asarray(z, dtype=float)
        y = np.asarray(y, dtype=float)
        z, y = np.broadcast_arrays(z, y)
        ok = self.in_domain(z, y)
        out = np.full(z.shape, np.nan)
        if not np.any(ok):
            return out
        zq, lq = z[ok], logit(y[ok])
        j = np.clip(np.searchsorted(self.z, zq, side="right") - 1, 0, len(self.z) - 2)
        i = np.clip(np.searchsorted(self.l, lq, side="right") - 1, 0, len(self.l) - 2)
        tz = (zq - self.z[j]) / (self.z[j + 1] - self.z[j])
        ty = (lq - self.l[i]) / (self.l[i + 1] - self.l[i])
        g = self.s.g
        out[ok] = (
            (1 - tz) * (1 - ty) * g[j, i]
            + tz * (1 - ty) * g[j + 1, i]
            + (1 - tz) * ty * g[j, i + 1]
            + tz * ty * g[j + 1, i + 1]
        )
        return out

    def value_zy(self, z, y):
        z = np.asarray(z, dtype=float)
        y = np.asarray(y, dtype=float)
        x = np.full(np.broadcast(z, y).shape, np.nan)
        inside = (y > 0) & (y < 1)
        x = np.where(inside, f_map(np.where(inside, z, 0.0), np.where(inside, y, 0.5), self.p), np.nan)
        h1 = _h1(self.p, x, self.s.cap)
        return h1 + self.gap(z, y)

    def value_xy(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        z = z_of(x, y, self.p)
        return _h1(self.p, x, self.s.cap) + self.gap(z, y)


def surface_to_xy(s: ValueSurface, xs: Sequence[float], ys: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    """V on the product grid xs x ys; returns (values, out_of_domain mask).

    Entries whose (x, y) falls outside the solved rectangle are NaN and
    flagged in the mask rather than extrapolated.
    """
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    interp = s.interpolator()
    vals = interp.value_xy(X, Y)
    missing = np.isnan(vals)
    return vals, missing


# --------------------------------------------------------------------------
# diagnostics
# --------------------------------------------------------------------------


def _slice_operator(s: ValueSurface):
    """Yield (j, prev, q) with q = A g - b on the interior of each solved slice.

    For the scheme q equals minus the discrete generator applied to v.
    """
    p = s.params
    lo, up = _operator_coefficients(p, s.y)
    c_dt = abs(p.k) / s.grid.dz
    order = list(range(len(s.z) - 1, -1, -1)) if p.k > 0 else list(range(len(s.z)))
    x = s.x
    for prev, j in zip(order[:-1], order[1:]):
        gj = s.g[j]
        rhs = _slice_rhs(p, s.y, x[j], x[prev], s.h1[j], s.h1[prev], s.g[prev], lo, up, c_dt, s.cap)[1:-1]
        diag = c_dt + p.r + lo[1:-1] + up[1:-1]
        q = diag * gj[1:-1] - lo[1:-1] * gj[:-2] - up[1:-1] * gj[2:] - rhs
        yield j, prev, q


def pde_residual(s: ValueSurface) -> dict[str, float]:
    """Discrete operator residuals on continuation and stopping nodes.

    ``continuation`` is max |Lv| over interior C nodes.  ``s1_max`` is the
    largest Lv on S1 nodes (must be <= 0); ``s2_min`` the smallest Lv on S2
    nodes (must be >= 0).
    """
    cont = 0.0
    s1_max = -np.inf
    s2_min = np.inf
    for j, prev, q in _slice_operator(s):
        lv = -q
        reg = s.region[j, 1:-1]
        if np.any(reg == C_LABEL):
            cont = max(cont, float(np.max(np.abs(lv[reg == C_LABEL]))))
        if np.any(reg == S1_LABEL):
            s1_max = max(s1_max, float(np.max(lv[reg == S1_LABEL])))
        if np.any(reg == S2_LABEL):
            s2_min = min(s2_min, float(np.min(lv[reg == S2_LABEL])))
    return {"continuation": cont, "s1_max": s1_max, "s2_min": s2_min}


def analytic_obstacle_generator(p: ModelParams, z, y):
    """(G - r) applied to H1 and H2 where F > K: rK - delta0 y F and r(K - eps0) - delta0 y F."""
    x = f_map(z, y, p)
    l1 = p.r * p.strike - p.delta0 * np.asarray(y) * x
    l2 = p.r * (p.strike - p.penalty) - p.delta0 * np.asarray(y) * x
    return l1, l2


def smoothfit_report(
    s: ValueSurface,
    fb: FreeBoundaries,
    z_window: tuple[float, float] | None = None,
    y_margin: int = 3,
    exclusion: float = 0.5,
    band: tuple[float, float] = (0.1, 0.9),
) -> dict[str, object]:
    """One-sided estimates of w_y on the continuation side of c1 and c2.

    On the stopping side w is flat in y (w = 0 on S1, w = eps0 on S2 where
    x >= K), so the estimate measures the jump of w_y across the boundary.
    Slices within ``exclusion`` of z_K are skipped when k > 0.

    The summary means only use slices whose boundary lies inside ``band``:
    near y = 0 or 1 the factor 1/(y(1-y)) in w_y swamps the average.
    """
    p = s.params
    y = s.y
    n_y = len(y)
    w = s.w
    jumps1, jumps2, z1, z2 = [], [], [], []
    stop_flat = []
    excluded = []
    for j, zj in enumerate(s.z):
        if z_window is not None and not (z_window[0] <= zj <= z_window[1]):
            continue
        col = s.region[j]
        if not np.isnan(fb.c1[j]):
            i = int(np.max(np.nonzero(col[1:-1] == S1_LABEL)[0]) + 1)
            if y_margin <= i < n_y - 1 - y_margin and col[i + 1] == C_LABEL and s.x[j, i] > p.strike:
                jumps1.append((w[j, i + 1] - w[j, i]) / (y[i + 1] - y[i]))
                z1.append(zj)
        if not np.isnan(fb.c2[j]):
            if p.k > 0 and not np.isnan(fb.z_K) and abs(zj - fb.z_K) < exclusion:
                excluded.append(zj)
                continue
            s2 = np.nonzero((col[1:-1] == S2_LABEL) & (s.x[j, 1:-1] >= p.strike))[0] + 1
            i = int(s2.min())
            if y_margin <= i and col[i - 1] == C_LABEL and s2.size >= 2:
                jumps2.append((w[j, i] - w[j, i - 1]) / (y[i] - y[i - 1]))
                z2.append(zj)
                # interior of S2: w flat in y
                stop_flat.append(abs(w[j, i + 1] - w[j, i]) / (y[i + 1] - y[i]) if col[i + 1] == S2_LABEL else 0.0)
    jumps1 = np.abs(np.array(jumps1))
    jumps2 = np.abs(np.array(jumps2))
    z1, z2 = np.array(z1), np.array(z2)

    def band_mean(jumps, zs, curve):
        if not jumps.size:
            return float("nan"), 0
        c = curve(zs)
        m = (c > band[0]) & (c < band[1])
        return (float(jumps[m].mean()) if np.any(m) else float("nan")), int(m.sum())

    mean1, n1 = band_mean(jumps1, z1, fb.c1_at)
    mean2, n2 = band_mean(jumps2, z2, fb.c2_at)
    return {
        "z_c1": z1,
        "jump_c1": jumps1,
        "mean_jump_c1": mean1,
        "slices_c1": n1,
        "z_c2": z2,
        "jump_c2": jumps2,
        "mean_jump_c2": mean2,
        "slices_c2": n2,
        "max_wy_inside_s2": float(max(stop_flat)) if stop_flat else 0.0,
        "excluded_point": {"z_K": fb.z_K, "y_bar_K": fb.y_bar_K, "skipped_slices": len(excluded)},
        "dy_typical": float(np.median(np.diff(y))),
    }
