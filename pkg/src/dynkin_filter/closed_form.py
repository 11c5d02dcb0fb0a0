"""Complete-information benchmarks for the game call option.

When the dividend indicator is known the asset is a geometric Brownian
motion with dividend rate delta and the game is one-dimensional.  The
functions below build its value from the two fundamental solutions
psi(x) = x^lambda1 and phi(x) = x^lambda2 of

    (sigma^2/2) x^2 f'' + (r - delta) x f' - r f = 0.

They provide the lateral data of the two-dimensional solver and the
oracles used by the acceptance suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import brentq

from .errors import NoBracket, NoConvergence, NoRoot
from .model_core import ModelParams

PRICE_BRACKET = 1e6
DIVIDEND_BRACKET = (1e-6, 10.0)
DIVIDEND_XTOL = 1e-12
CASE_TIE_TOL = 1e-10
NEWTON_DAMPING = 0.5
NEWTON_MAX_ITER = 200

CASES = ("Case1", "Case2", "Case3", "Case4")


@dataclass(frozen=True)
class LambdaPair:
    lambda1: float
    lambda2: float


def lambda_roots(p: ModelParams, delta: float) -> LambdaPair:
    """Roots lambda2 < 0 < 1 <= lambda1 of (s^2/2) l^2 + (r - delta - s^2/2) l - r."""
    delta = float(delta)
    if delta < 0.0:
        raise ValueError(f"delta must be nonnegative, got {delta!r}")
    s2 = p.sigma ** 2
    if delta == 0.0:
        return LambdaPair(1.0, -2.0 * p.r / s2)
    a = 0.5 * s2
    b = p.r - delta - 0.5 * s2
    c = -p.r
    sq = np.sqrt(b * b - 4.0 * a * c)
    # cancellation-free form of the quadratic formula
    q = -0.5 * (b + np.copysign(sq, b))
    r1, r2 = q / a, c / q
    return LambdaPair(float(max(r1, r2)), float(min(r1, r2)))


def quadratic_residual(p: ModelParams, delta: float, lam: float) -> float:
    s2 = p.sigma ** 2
    return 0.5 * s2 * lam * lam + (p.r - delta - 0.5 * s2) * lam - p.r


# --------------------------------------------------------------------------
# perpetual call and the stopping problem killed at K
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PerpetualCall:
    """Buyer's perpetual call value when the seller never cancels."""

    strike: float
    lambda1: float
    threshold: float

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        below = (self.threshold - self.strike) * (x / self.threshold) ** self.lambda1
        return np.where(x >= self.threshold, x - self.strike, below)

    def derivative(self, x):
        x = np.asarray(x, dtype=float)
        below = (self.threshold - self.strike) * self.lambda1 * (x / self.threshold) ** (self.lambda1 - 1.0) / self.threshold
        return np.where(x >= self.threshold, 1.0, below)


def perpetual_call(p: ModelParams, delta: float | None = None) -> PerpetualCall:
    """Threshold lambda1 K / (lambda1 - 1) and the value of the perpetual call."""
    delta = p.delta0 if delta is None else float(delta)
    if delta <= 0.0:
        raise ValueError("the perpetual call needs a positive dividend rate")
    lam = lambda_roots(p, delta)
    threshold = lam.lambda1 * p.strike / (lam.lambda1 - 1.0)
    return PerpetualCall(p.strike, lam.lambda1, threshold)


def perpetual_value_at_strike(p: ModelParams, delta: float) -> float:
    """V_inf(K; delta) = (x* - K) (K / x*)^lambda1."""
    pc = perpetual_call(p, delta)
    return float((pc.threshold - p.strike) * (p.strike / pc.threshold) ** pc.lambda1)


def _tangent_coeffs(point: float, level: float, lam: LambdaPair) -> tuple[float, float]:
    """Scaled coefficients of A x^l1 + B x^l2 with value ``level`` and slope 1 at ``point``.

    Returns (a, b) such that the curve is a (x/point)^l1 + b (x/point)^l2.
    """
    l1, l2 = lam.lambda1, lam.lambda2
    a = (point - l2 * level) / (l1 - l2)
    b = (l1 * level - point) / (l1 - l2)
    return a, b


def _tangent_value(x, point: float, level: float, lam: LambdaPair):
    a, b = _tangent_coeffs(point, level, lam)
    s = np.asarray(x, dtype=float) / point
    return a * s ** lam.lambda1 + b * s ** lam.lambda2


def _tangent_slope(x, point: float, level: float, lam: LambdaPair):
    a, b = _tangent_coeffs(point, level, lam)
    s = np.asarray(x, dtype=float) / point
    return (a * lam.lambda1 * s ** (lam.lambda1 - 1.0) + b * lam.lambda2 * s ** (lam.lambda2 - 1.0)) / point


def _first_sign_change(values: np.ndarray, grid: np.ndarray) -> tuple[float, float] | None:
    for i in range(len(grid) - 1):
        if np.isfinite(values[i]) and np.isfinite(values[i + 1]) and values[i] < 0.0 <= values[i + 1]:
            return float(grid[i]), float(grid[i + 1])
    return None


def _vk_free_point(p: ModelParams, delta: float) -> float:
    """Free point b of V_K: the tangent curve at b takes the value eps0 at K."""
    lam = lambda_roots(p, delta)
    K, eps = p.strike, p.penalty

    def gap(b: float) -> float:
        return float(_tangent_value(K, b, b - K, lam)) - eps

    grid = K * (1.0 + np.geomspace(1e-9, PRICE_BRACKET - 1.0, 600))
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        values = _tangent_value(K, grid, grid - K, lam) - eps
    bracket = _first_sign_change(values, grid)
    if bracket is None:
        raise NoRoot(f"V_K smooth-fit equation has no root in [K, {PRICE_BRACKET:g} K] for delta={delta!r}")
    return float(brentq(gap, *bracket, xtol=1e-14 * K, rtol=1e-15, maxiter=500))


@dataclass(frozen=True)
class KilledCall:
    """V_K: buyer's value when the seller cancels at the first visit of K."""

    strike: float
    penalty: float
    free_point: float
    lam: LambdaPair

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        cont = _tangent_value(x, self.free_point, self.free_point - self.strike, self.lam)
        return np.where(x >= self.free_point, x - self.strike, cont)

    def slope_at_strike(self) -> float:
        return float(_tangent_slope(self.strike, self.free_point, self.free_point - self.strike, self.lam))


def killed_call(p: ModelParams, delta: float | None = None) -> KilledCall:
    delta = p.delta0 if delta is None else float(delta)
    b = _vk_free_point(p, delta)
    return KilledCall(p.strike, p.penalty, b, lambda_roots(p, delta))


def value_vk(p: ModelParams, x, delta: float | None = None):
    """Value of the buyer's problem on x >= K when the seller cancels at K."""
    x = np.asarray(x, dtype=float)
    if np.any(x < p.strike):
        raise ValueError("value_vk is defined for x >= K")
    return killed_call(p, delta)(x)


def vk_slope_at_strike(p: ModelParams, delta: float) -> float:
    """Right derivative of V_K at K, from the analytic two-solution form."""
    return killed_call(p, delta).slope_at_strike()


# --------------------------------------------------------------------------
# critical dividends and case classification
# --------------------------------------------------------------------------


def _dividend_root(fn: Callable[[float], float], p: ModelParams, name: str) -> float:
    lo, hi = DIVIDEND_BRACKET[0], DIVIDEND_BRACKET[1] * p.r
    grid = np.geomspace(lo, hi, 200)
    values = np.array([fn(d) for d in grid])
    idx = np.nonzero(np.sign(values[:-1]) * np.sign(values[1:]) <= 0.0)[0]
    if len(idx) == 0:
        raise NoBracket(f"{name}: no sign change on ({lo:g}, {hi:g})")
    i = int(idx[0])
    return float(brentq(fn, grid[i], grid[i + 1], xtol=DIVIDEND_XTOL, rtol=1e-15, maxiter=500))


def critical_dividends(p: ModelParams) -> tuple[float | None, float | None]:
    """(delta1, delta2); both absent when eps0 >= K."""
    if p.penalty >= p.strike:
        return None, None
    delta2 = _dividend_root(lambda d: perpetual_value_at_strike(p, d) - p.penalty, p, "delta2")
    delta1 = _dividend_root(lambda d: vk_slope_at_strike(p, d) - 1.0, p, "delta1")
    return delta1, delta2




def system_residuals(alpha: float, beta: float, p: ModelParams, lam: LambdaPair | None = None) -> np.ndarray:
    """Relative residuals of the two smooth-fit equations in (alpha, beta).

    Each equation is divided by alpha^(l1 - l2) and then by its largest
    term.  With beta = K the first entry is the equation defining alpha0.
    """
    lam = lambda_roots(p, p.delta0) if lam is None else lam
    K, eps = p.strike, p.penalty
    l1, l2 = lam.lambda1, lam.lambda2
    dl = l1 - l2
    a = (alpha - K) / alpha
    c = (beta - K + eps) / beta
    s = beta / alpha
    first = ((a * l1 - 1.0), -(a * l2 - 1.0) * s ** dl, -c * dl * s ** (1.0 - l2))
    second = ((c * l1 - 1.0) * s ** dl, -(c * l2 - 1.0), -a * dl * s ** (l1 - 1.0))
    out = np.empty(2)
    for i, terms in enumerate((first, second)):
        scale = max(abs(t) for t in terms)
        out[i] = sum(terms) / scale if scale > 0.0 else sum(terms)
    return out


def alpha0_residual(alpha: float, p: ModelParams, delta: float | None = None) -> float:
    """Relative residual of the scalar equation defining alpha0."""
    lam = lambda_roots(p, p.delta0 if delta is None else delta)
    return float(system_residuals(alpha, p.strike, p, lam)[0])


def _case_for(delta: float, delta1: float, delta2: float) -> str:
    # ties go to the higher-numbered case
    if delta > delta2 + CASE_TIE_TOL:
        return "Case2"
    if delta > delta1 + CASE_TIE_TOL:
        return "Case3"
    return "Case4"


def solve_alpha0(p: ModelParams, delta: float | None = None) -> float:
    """Buyer threshold alpha0 > K at y = 1 in Case 3.

    The equation says that the curve tangent to x - K at alpha0 takes the
    value eps0 at K, so alpha0 is the free point of V_K.
    """
    delta = p.delta0 if delta is None else float(delta)
    lam = lambda_roots(p, delta)
    K = p.strike

    def fn(alpha: float) -> float:
        return float(_tangent_value(K, alpha, alpha - K, lam)) - p.penalty

    grid = K * (1.0 + np.geomspace(1e-9, PRICE_BRACKET - 1.0, 600))
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        values = _tangent_value(K, grid, grid - K, lam) - p.penalty
    bracket = _first_sign_change(values, grid)
    if bracket is None:
        raise NoBracket("alpha0 equation has no sign change in (K, 1e6 K)")
    alpha = float(brentq(fn, *bracket, xtol=1e-15 * K, rtol=1e-15, maxiter=500))
    return _newton_polish_scalar(lambda a: alpha0_residual(a, p, delta), alpha, bracket)


def _newton_polish_scalar(fn: Callable[[float], float], x: float, bracket: tuple[float, float]) -> float:
    """A few safeguarded Newton steps in log x; keeps the iterate inside the bracket."""
    lo, hi = bracket
    best, best_res = x, abs(fn(x))
    for _ in range(20):
        if best_res < 1e-15:
            break
        h = 1e-7
        u = np.log(best)
        d = (fn(np.exp(u + h)) - fn(np.exp(u - h))) / (2 * h)
        if d == 0.0 or not np.isfinite(d):
            break
        step = -fn(best) / d
        accepted = False
        for _ in range(30):
            cand = float(np.exp(u + step))
            if lo <= cand <= hi:
                res = abs(fn(cand))
                if res < best_res:
                    best, best_res, accepted = cand, res, True
                    break
            step *= NEWTON_DAMPING
        if not accepted:
            break
    return best


def _case4_profile(alpha: float, p: ModelParams, lam: LambdaPair) -> tuple[float, float]:
    """For a trial alpha return (mismatch, beta) of the one-dimensional reduction.

    The curve tangent to x - K at alpha has, for alpha below the perpetual
    threshold, a second point of unit slope beta < alpha where f(x) - x has
    a local maximum.  The pair solves the system when f(beta) - beta = eps0 - K.
    """
    K, eps = p.strike, p.penalty
    l1, l2 = lam.lambda1, lam.lambda2
    a_c, b_c = _tangent_coeffs(alpha, alpha - K, lam)
    if b_c >= 0.0:
        return float("nan"), float("nan")
    s_infl = (-b_c * l2 * (l2 - 1.0) / (a_c * l1 * (l1 - 1.0))) ** (1.0 / (l1 - l2))

    def slope_gap(s: float) -> float:
        return (a_c * l1 * s ** (l1 - 1.0) + b_c * l2 * s ** (l2 - 1.0)) / alpha - 1.0

    s_lo = s_infl
    while slope_gap(s_lo) <= 0.0:
        s_lo *= 0.5
        if s_lo < 1e-300:
            return float("nan"), float("nan")
    s_beta = brentq(slope_gap, s_lo, s_infl, xtol=1e-16, rtol=1e-15, maxiter=500)
    beta = s_beta * alpha
    value = a_c * s_beta ** l1 + b_c * s_beta ** l2
    return float(value - beta - (eps - K)), float(beta)


def solve_alpha1_beta1(p: ModelParams, delta: float | None = None) -> tuple[float, float]:
    """Solve the Case 4 system for (alpha1, beta1) with K < beta1 < alpha1.

    A one-dimensional reduction in alpha supplies the starting point; a
    damped Newton iteration on the two displayed equations in log variables
    then drives both relative residuals to machine level.
    """
    delta = p.delta0 if delta is None else float(delta)
    lam = lambda_roots(p, delta)
    K = p.strike
    x_star = lam.lambda1 * K / (lam.lambda1 - 1.0)

    def mismatch(alpha: float) -> float:
        m, beta = _case4_profile(alpha, p, lam)
        return m

    grid = K + (x_star - K) * np.geomspace(1e-9, 1.0 - 1e-12, 800)
    vals = np.array([mismatch(a) for a in grid])
    guess = None
    for i in range(len(grid) - 1):
        if np.isfinite(vals[i]) and np.isfinite(vals[i + 1]) and np.sign(vals[i]) != np.sign(vals[i + 1]):
            alpha = float(brentq(mismatch, grid[i], grid[i + 1], xtol=1e-15 * K, rtol=1e-15, maxiter=500))
            beta = _case4_profile(alpha, p, lam)[1]
            if K < beta < alpha:
                guess = (alpha, beta)
                break
    if guess is None:
        guess = _coarse_scan(p, lam, x_star)
    return _damped_newton(p, lam, *guess)


def _coarse_scan(p: ModelParams, lam: LambdaPair, x_star: float) -> tuple[float, float]:
    K = p.strike
    alphas = K + (x_star - K) * np.geomspace(1e-6, 1.0, 120)
    best, best_norm = None, np.inf
    for alpha in alphas:
        for beta in K + (alpha - K) * np.geomspace(1e-6, 1.0 - 1e-6, 120):
            norm = float(np.max(np.abs(system_residuals(alpha, beta, p, lam))))
            if norm < best_norm:
                best, best_norm = (float(alpha), float(beta)), norm
    if best is None:
        raise NoConvergence("no starting point for the (alpha1, beta1) system")
    return best


def _damped_newton(p: ModelParams, lam: LambdaPair, alpha: float, beta: float) -> tuple[float, float]:
    u = np.log([alpha, beta])

    def res(v: np.ndarray) -> np.ndarray:
        return system_residuals(float(np.exp(v[0])), float(np.exp(v[1])), p, lam)

    r = res(u)
    norm = float(np.max(np.abs(r)))
    for _ in range(NEWTON_MAX_ITER):
        if norm < 1e-14:
            break
        h = 1e-7
        jac = np.empty((2, 2))
        for j in range(2):
            e = np.zeros(2)
            e[j] = h
            jac[:, j] = (res(u + e) - res(u - e)) / (2 * h)
        try:
            step = -np.linalg.solve(jac, r)
        except np.linalg.LinAlgError:
            break
        t = 1.0
        improved = False
        for _ in range(40):
            cand = u + t * step
            rc = res(cand)
            nc = float(np.max(np.abs(rc)))
            if np.isfinite(nc) and nc < norm:
                u, r, norm, improved = cand, rc, nc, True
                break
            t *= NEWTON_DAMPING
        if not improved:
            break
    if norm > 1e-8:
        raise NoConvergence(f"(alpha1, beta1) system not solved, best residual {norm:.3e}", norm)
    alpha, beta = float(np.exp(u[0])), float(np.exp(u[1]))
    return alpha, beta


# --------------------------------------------------------------------------
# full value functions on the edges
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Piece:
    """One analytic piece on [lo, hi).

    ``kind`` is "g1", "g2" or "combo"; a combo piece evaluates
    a (x/x0)^l1 + b (x/x0)^l2 with ``coeffs = (a, b, x0, l1, l2)``.
    """

    lo: float
    hi: float
    kind: str
    coeffs: tuple[float, ...] = ()


@dataclass(frozen=True)
class EdgeValueFn:
    """Piecewise analytic value of a complete-information game."""

    side: str
    strike: float
    penalty: float
    case_id: str
    pieces: tuple[Piece, ...]
    delta: float

    @property
    def breakpoints(self) -> list[float]:
        return [pc.lo for pc in self.pieces[1:]]

    def _eval(self, x, derivative: bool):
        x = np.asarray(x, dtype=float)
        out = np.full(x.shape, np.nan)
        for pc in self.pieces:
            mask = (x >= pc.lo) & (x < pc.hi)
            if not np.any(mask):
                continue
            xm = x[mask]
            if pc.kind == "g1":
                val = np.ones_like(xm) if derivative else xm - self.strike
            elif pc.kind == "g2":
                val = np.ones_like(xm) if derivative else xm - self.strike + self.penalty
            else:
                a, b, x0, l1, l2 = pc.coeffs
                s = xm / x0
                if derivative:
                    val = (a * l1 * s ** (l1 - 1.0) + (b * l2 * s ** (l2 - 1.0) if b != 0.0 else 0.0)) / x0
                else:
                    val = a * s ** l1 + (b * s ** l2 if b != 0.0 else 0.0)
            out[mask] = val
        return out

    def __call__(self, x):
        return self._eval(x, derivative=False)

    def derivative(self, x):
        return self._eval(x, derivative=True)

    def stop_sets(self) -> dict[str, list[tuple[float, float]]]:
        s1 = [(pc.lo, pc.hi) for pc in self.pieces if pc.kind == "g1"]
        s2 = [(pc.lo, pc.hi) for pc in self.pieces if pc.kind == "g2"]
        return {"S1": s1, "S2": s2}


@dataclass(frozen=True)
class CompleteInfoSolution:
    case_id: str
    delta1: float | None
    delta2: float | None
    alpha0: float | None
    alpha1: float | None
    beta1: float | None
    buyer_threshold_nodiv: float

    @property
    def buyer_boundary(self) -> float:
        """Left end of the buyer's stopping set on the y = 1 edge."""
        if self.case_id == "Case3":
            return float(self.alpha0)
        if self.case_id == "Case4":
            return float(self.alpha1)
        return self.buyer_threshold_nodiv

    def to_dict(self) -> dict[str, object]:
        return {
            "case_id": self.case_id,
            "delta1": self.delta1,
            "delta2": self.delta2,
            "alpha0": self.alpha0,
            "alpha1": self.alpha1,
            "beta1": self.beta1,
            "buyer_threshold_nodiv": self.buyer_threshold_nodiv,
        }


_CRIT_CACHE: dict[ModelParams, tuple[float | None, float | None]] = {}


def _critical_cached(p: ModelParams) -> tuple[float | None, float | None]:
    if p not in _CRIT_CACHE:
        _CRIT_CACHE[p] = critical_dividends(p)
    return _CRIT_CACHE[p]


def classify_delta(p: ModelParams, delta: float) -> CompleteInfoSolution:
    """Classify the complete-information game with dividend ``delta``."""
    pc = perpetual_call(p, delta)
    if p.penalty >= p.strike:
        return CompleteInfoSolution("Case1", None, None, None, None, None, pc.threshold)
    d1, d2 = _critical_cached(p)
    case = _case_for(delta, d1, d2)
    alpha0 = alpha1 = beta1 = None
    if case == "Case3":
        alpha0 = solve_alpha0(p, delta)
    elif case == "Case4":
        alpha1, beta1 = solve_alpha1_beta1(p, delta)
    return CompleteInfoSolution(case, d1, d2, alpha0, alpha1, beta1, pc.threshold)


def classify_case(p: ModelParams) -> CompleteInfoSolution:
    """Case of the y = 1 game and its thresholds."""
    return classify_delta(p, p.delta0)


def complete_info_value(p: ModelParams, delta: float, side: str = "frozen") -> EdgeValueFn:
    """Value function of the complete-information game with dividend ``delta`` > 0."""
    sol = classify_delta(p, delta)
    lam = lambda_roots(p, delta)
    l1, l2 = lam.lambda1, lam.lambda2
    K, eps = p.strike, p.penalty
    inf = np.inf
    if sol.case_id in ("Case1", "Case2"):
        x_star = sol.buyer_threshold_nodiv
        pieces = (
            Piece(0.0, x_star, "combo", (x_star - K, 0.0, x_star, l1, l2)),
            Piece(x_star, inf, "g1"),
        )
    elif sol.case_id == "Case3":
        a0 = sol.alpha0
        a_c, b_c = _tangent_coeffs(a0, a0 - K, lam)
        pieces = (
            Piece(0.0, K, "combo", (eps, 0.0, K, l1, l2)),
            Piece(K, a0, "combo", (a_c, b_c, a0, l1, l2)),
            Piece(a0, inf, "g1"),
        )
    else:
        a1, b1 = sol.alpha1, sol.beta1
        a_c, b_c = _tangent_coeffs(a1, a1 - K, lam)
        pieces = (
            Piece(0.0, K, "combo", (eps, 0.0, K, l1, l2)),
            Piece(K, b1, "g2"),
            Piece(b1, a1, "combo", (a_c, b_c, a1, l1, l2)),
            Piece(a1, inf, "g1"),
        )
    return EdgeValueFn(side, K, eps, sol.case_id, pieces, float(delta))


def edge_value(side: str, p: ModelParams) -> EdgeValueFn:
    """V1 (side "y1_edge") or V0 (side "y0_edge") as a piecewise function of x."""
    K, eps = p.strike, p.penalty
    if side == "y1_edge":
        return complete_info_value(p, p.delta0, side="y1_edge")
    if side != "y0_edge":
        raise ValueError(f"unknown edge {side!r}")
    if eps >= K:
        pieces = (Piece(0.0, np.inf, "combo", (1.0, 0.0, 1.0, 1.0, 0.0)),)
        return EdgeValueFn(side, K, eps, "Case1", pieces, 0.0)
    case = classify_case(p).case_id
    pieces = (
        Piece(0.0, K, "combo", (eps, 0.0, K, 1.0, 0.0)),
        Piece(K, np.inf, "g2"),
    )
    return EdgeValueFn(side, K, eps, case, pieces, 0.0)


def y_fundamental(p: ModelParams, y) -> tuple[np.ndarray, np.ndarray, float]:
    """Increasing and decreasing solutions psi, phi in y with exponent beta = ratio + 1."""
    y = np.asarray(y, dtype=float)
    beta = p.ratio + 1.0
    psi = y ** beta * (1.0 - y) ** (1.0 - beta)
    phi = y ** (1.0 - beta) * (1.0 - y) ** beta
    return psi, phi, beta


def case2_bound(p: ModelParams, z, y, c1_at_z):
    """Upper bound (1 - y) / (1 - c1(z)) * F(z, y) on the value for k < 0."""
    from .model_core import f_map

    return (1.0 - np.asarray(y)) / (1.0 - np.asarray(c1_at_z)) * f_map(z, y, p)
