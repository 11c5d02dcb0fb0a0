"""Monte Carlo paths of the filtered pair (X, Y) and of the raw scenario.

Y follows dY = -(delta0/sigma) Y (1-Y) dW under the innovation Brownian
motion W.  The transformed coordinate Z = ln X + (sigma^2/delta0) logit Y
is deterministic, Z_t = z0 + k t, so X is recovered as F(Z, Y) and never
discretized on its own.

Random numbers come from counter-based substreams: path ``i`` belongs to
block ``i // block_size`` and each block draws from
``SeedSequence(seed, spawn_key=(block,))``.  Results therefore do not depend
on the order in which blocks are processed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np

from .errors import ConfigError, OutOfDomain, SingularTransform
from .model_core import ModelParams, StatePoint, expit, f_map, logit, y_k_curve
from .vi_solver import FreeBoundaries

SCHEMES = ("euler_y_exact_z", "milstein_y_exact_z")
S1, S2 = "S1", "S2"
NEVER = np.inf


@dataclass(frozen=True)
class SimConfig:
    """Time grid, batch size and seed of a simulation."""

    dt: float = 1e-3
    horizon: float = 1.0
    n_paths: int = 10_000
    seed: int = 12345
    scheme: str = "euler_y_exact_z"
    block_size: int = 4096

    def __post_init__(self) -> None:
        if not (np.isfinite(self.dt) and self.dt > 0.0):
            raise ConfigError(f"dt must be positive, got {self.dt!r}")
        if not self.horizon >= self.dt * (1.0 - 1e-12):
            raise ConfigError(f"horizon {self.horizon!r} is shorter than dt {self.dt!r}")
        if int(self.n_paths) < 1:
            raise ConfigError("n_paths must be at least 1")
        if int(self.block_size) < 1:
            raise ConfigError("block_size must be at least 1")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        object.__setattr__(self, "n_paths", int(self.n_paths))
        object.__setattr__(self, "block_size", int(self.block_size))
        object.__setattr__(self, "seed", int(self.seed))

    @property
    def n_steps(self) -> int:
        ratio = self.horizon / self.dt
        return max(1, int(math.ceil(ratio - 1e-9)))

    @property
    def n_blocks(self) -> int:
        return -(-self.n_paths // self.block_size)

    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt

    def block_paths(self, block: int) -> range:
        lo = block * self.block_size
        return range(lo, min(lo + self.block_size, self.n_paths))

    def generator(self, block: int, stream: int | None = None) -> np.random.Generator:
        """Generator of one block; depends only on (seed, stream, block).

        ``stream`` separates independent experiments that share a config,
        such as the start points of one probe.
        """
        key = (block,) if stream is None else (int(stream), block)
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=key)))

    def replace(self, **changes) -> "SimConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict[str, object]:
        return {
            "dt": self.dt,
            "horizon": self.horizon,
            "n_paths": self.n_paths,
            "seed": self.seed,
            "scheme": self.scheme,
            "block_size": self.block_size,
        }


@dataclass(frozen=True)
class PathBatch:
    """Stored paths, shape (n_paths, n_steps + 1) for every path array.

    ``x_paths`` is F(Z, Y); ``x_exp_paths`` is the exponential form
    x0 exp(int (r - delta0 Y - sigma^2/2) ds + sigma W) with a left-point
    integral, driven by the same increments.  ``seeds`` holds the
    (block, lane) substream identifier of each path.
    """

    params: ModelParams
    cfg: SimConfig
    start: StatePoint
    times: np.ndarray
    y_paths: np.ndarray
    z_values: np.ndarray
    x_paths: np.ndarray
    x_exp_paths: np.ndarray
    seeds: np.ndarray
    dW: np.ndarray | None = None
    u_paths: np.ndarray | None = field(default=None)

    @property
    def n_paths(self) -> int:
        return self.y_paths.shape[0]


@dataclass(frozen=True)
class ScenarioBatch:
    """Observed price paths S under a fixed dividend indicator d."""

    times: np.ndarray
    s_paths: np.ndarray
    d: int
    x0: float


# --------------------------------------------------------------------------
# elementary steps
# --------------------------------------------------------------------------


def y_step(y: np.ndarray, dw: np.ndarray, dt: float, a: float, scheme: str) -> np.ndarray:
    """One step of dY = -a Y (1-Y) dW, clamped to [0, 1]."""
    b = -a * y * (1.0 - y)
    new = y + b * dw
    if scheme == "milstein_y_exact_z":
        new = new + 0.5 * b * (-a * (1.0 - 2.0 * y)) * (dw * dw - dt)
    return np.clip(new, 0.0, 1.0)


def z_start(p: ModelParams, start: StatePoint) -> float:
    """z0 of a start point; +-inf on the absorbing edges."""
    if start.y <= 0.0:
        return -np.inf
    if start.y >= 1.0:
        return np.inf
    return float(np.log(start.x) + p.ratio * logit(start.y))


def _x_from(z: np.ndarray, y: np.ndarray, p: ModelParams) -> np.ndarray:
    inside = (y > 0.0) & (y < 1.0) & np.isfinite(z)
    out = np.full(np.broadcast(z, y).shape, np.nan)
    zz = np.broadcast_to(z, out.shape)
    out[inside] = f_map(zz[inside], y[inside], p)
    return out


def y_paths_from_increments(p: ModelParams, y0: float, dW: np.ndarray, dt: float, scheme: str = SCHEMES[0]) -> np.ndarray:
    """Y paths driven by given increments, shape (n_paths, n_steps + 1)."""
    a = p.delta0 / p.sigma
    n, m = dW.shape
    out = np.empty((n, m + 1))
    out[:, 0] = y0
    y = np.full(n, float(y0))
    for i in range(m):
        y = y_step(y, dW[:, i], dt, a, scheme)
        out[:, i + 1] = y
    return out


# --------------------------------------------------------------------------
# stored batches
# --------------------------------------------------------------------------


def simulate_filtered(p: ModelParams, start: StatePoint, cfg: SimConfig, keep_increments: bool = True) -> PathBatch:
    """Simulate (X, Y) from ``start`` and keep every path in memory.

    For y0 in {0, 1} the indicator is known, Y stays constant and Z is
    infinite; X is then taken from the exponential form.
    """
    if not 0.0 <= start.y <= 1.0:
        raise ValueError(f"y0 must lie in [0, 1], got {start.y!r}")
    n, m, dt = cfg.n_paths, cfg.n_steps, cfg.dt
    times = cfg.times()
    z0 = z_start(p, start)
    z_values = z0 + p.k * times
    dW = np.empty((n, m))
    seeds = np.empty((n, 2), dtype=np.int64)
    for b in range(cfg.n_blocks):
        lanes = cfg.block_paths(b)
        dW[lanes.start:lanes.stop] = cfg.generator(b).standard_normal((m, len(lanes))).T * math.sqrt(dt)
        seeds[lanes.start:lanes.stop, 0] = b
        seeds[lanes.start:lanes.stop, 1] = np.arange(len(lanes))
    y = y_paths_from_increments(p, start.y, dW, dt, cfg.scheme)
    drift = (p.r - 0.5 * p.sigma ** 2 - p.delta0 * y[:, :-1]) * dt
    log_x = np.log(start.x) + np.concatenate([np.zeros((n, 1)), np.cumsum(drift + p.sigma * dW, axis=1)], axis=1)
    x_exp = np.exp(log_x)
    if np.isfinite(z0):
        x = _x_from(z_values[None, :], y, p)
        x[:, 0] = start.x
    else:
        x = x_exp.copy()
    return PathBatch(p, cfg, start, times, y, z_values, x, x_exp, seeds, dW if keep_increments else None)


def simulate_scenario(p: ModelParams, x0: float, d: int, cfg: SimConfig) -> ScenarioBatch:
    """Exact lognormal paths of the observed price with dividend indicator d."""
    if d not in (0, 1):
        raise ValueError(f"dividend indicator must be 0 or 1, got {d!r}")
    n, m, dt = cfg.n_paths, cfg.n_steps, cfg.dt
    log_s = np.empty((n, m + 1))
    log_s[:, 0] = np.log(x0)
    mu = (p.r - p.delta0 * d - 0.5 * p.sigma ** 2) * dt
    for b in range(cfg.n_blocks):
        lanes = cfg.block_paths(b)
        dB = cfg.generator(b).standard_normal((m, len(lanes))).T * math.sqrt(dt)
        log_s[lanes.start:lanes.stop, 1:] = np.log(x0) + np.cumsum(mu + p.sigma * dB, axis=1)
    return ScenarioBatch(cfg.times(), np.exp(log_s), int(d), float(x0))


def exact_filter(p: ModelParams, s_path, x0: float, y0: float, times) -> np.ndarray:
    """Posterior recovered from the observed price through the invariance of Z.

    logit Y_t = logit y0 + (delta0/sigma^2) (ln x0 + k t - ln S_t).
    """
    if not 0.0 < y0 < 1.0:
        raise SingularTransform(f"the filter identity needs 0 < y0 < 1, got {y0!r}")
    s_path = np.asarray(s_path, dtype=float)
    times = np.asarray(times, dtype=float)
    ell = logit(y0) + (np.log(x0) + p.k * times - np.log(s_path)) / p.ratio
    return expit(ell)


def flow_derivative(p: ModelParams, batch: PathBatch) -> np.ndarray:
    """Euler paths of dU = -(delta0/sigma)(1 - 2Y) U dW with U_0 = 1."""
    if batch.dW is None:
        raise ValueError("the batch was simulated without keeping its increments")
    a = p.delta0 / p.sigma
    n, m = batch.dW.shape
    u = np.empty((n, m + 1))
    u[:, 0] = 1.0
    for i in range(m):
        u[:, i + 1] = u[:, i] * (1.0 - a * (1.0 - 2.0 * batch.y_paths[:, i]) * batch.dW[:, i])
    return u


def flow_difference_quotient(p: ModelParams, batch: PathBatch, eps: float) -> np.ndarray:
    """(Y^{y+eps} - Y^{y-eps}) / (2 eps) with the batch's increments."""
    if batch.dW is None:
        raise ValueError("the batch was simulated without keeping its increments")
    y0 = batch.start.y
    up = y_paths_from_increments(p, y0 + eps, batch.dW, batch.cfg.dt, batch.cfg.scheme)
    dn = y_paths_from_increments(p, y0 - eps, batch.dW, batch.cfg.dt, batch.cfg.scheme)
    return (up - dn) / (2.0 * eps)


# --------------------------------------------------------------------------
# stopping regions
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class BoundaryView:
    """Boundary curves with optional additive y-shifts, evaluated at scalar z.

    Shifted curves are clipped to the solved y range.
    """

    fb: FreeBoundaries
    shift_c1: float = 0.0
    shift_c2: float = 0.0

    def _check(self, z: float) -> None:
        if not self.fb.z[0] <= z <= self.fb.z[-1]:
            raise OutOfDomain(f"z = {z:.4f} lies outside the boundary grid [{self.fb.z[0]:.4f}, {self.fb.z[-1]:.4f}]")

    def _clip(self, c):
        return np.clip(c, self.fb.y[0], self.fb.y[-1])

    def c1(self, z: float) -> float:
        self._check(z)
        c = float(self.fb.c1_at(z))
        return float(self._clip(c + self.shift_c1)) if np.isfinite(c) else np.nan

    def c2(self, z: float) -> float:
        self._check(z)
        c = float(self.fb.c2_at(z))
        return float(self._clip(c + self.shift_c2)) if np.isfinite(c) else np.nan

    def yk(self, z: float) -> float:
        return float(y_k_curve(z, self.fb.params))

    def in_s1(self, z: float, y: np.ndarray) -> np.ndarray:
        c = self.c1(z)
        if not np.isfinite(c):
            return np.zeros(np.shape(y), dtype=bool)
        return y <= c

    def in_s2(self, z: float, y: np.ndarray) -> np.ndarray:
        c = self.c2(z)
        if not np.isfinite(c):
            return np.zeros(np.shape(y), dtype=bool)
        return (y >= c) & (y <= self.yk(z))

    def crossed_strike(self, z_prev: float, y_prev: np.ndarray, z: float, y: np.ndarray) -> np.ndarray:
        """Step crossed the line x = K where S2 is non-empty.

        The part of S2 on x = K can be a bare line that grid monitoring
        misses; a sign change of y - y_K across the step detects it.
        """
        if not (np.isfinite(self.c2(z_prev)) or np.isfinite(self.c2(z))):
            return np.zeros(np.shape(y), dtype=bool)
        return (y_prev - self.yk(z_prev)) * (y - self.yk(z)) < 0.0


def hitting_time(batch: PathBatch, fb: FreeBoundaries, target: str, crossing: bool = False) -> np.ndarray:
    """First grid time at which each path lies in ``target``; inf if never.

    With ``crossing`` a step across the line x = K inside the S2 band also
    counts as entry to S2 (stop at the later grid time).
    """
    if target not in (S1, S2):
        raise ValueError(f"target must be 'S1' or 'S2', got {target!r}")
    z = batch.z_values
    if min(z[0], z[-1]) < fb.z[0] or max(z[0], z[-1]) > fb.z[-1]:
        raise OutOfDomain("path z range is not covered by the boundary grid")
    view = BoundaryView(fb)
    n = batch.n_paths
    out = np.full(n, NEVER)
    open_ = np.ones(n, dtype=bool)
    for i, t in enumerate(batch.times):
        y = batch.y_paths[:, i]
        hit = view.in_s1(z[i], y) if target == S1 else view.in_s2(z[i], y)
        if target == S2 and crossing and i > 0:
            hit = hit | view.crossed_strike(z[i - 1], batch.y_paths[:, i - 1], z[i], y)
        new = hit & open_
        out[new] = t
        open_ &= ~new
        if not open_.any():
            break
    return out


def iter_block_increments(cfg: SimConfig, block: int, n_lanes: int | None = None) -> Iterator[np.ndarray]:
    """Per-step increments of one block, drawn lazily for streaming use."""
    lanes = cfg.block_paths(block)
    m = len(lanes) if n_lanes is None else n_lanes
    gen = cfg.generator(block)
    sq = math.sqrt(cfg.dt)
    for _ in range(cfg.n_steps):
        yield gen.standard_normal(m) * sq
