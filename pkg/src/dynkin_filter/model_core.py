"""Market parameters, payoffs and the (x, y) <-> (z, y) coordinate change.

The asset X has drift r - delta0*Y and volatility sigma, where Y is the
posterior probability that the dividend is being paid.  Along every path
the combination

    z = ln x + (sigma^2/delta0) * ln(y / (1 - y))

moves deterministically as z + k*t with k = r - sigma^2/2 - delta0/2, so
the game is parabolic in (z, y) with z playing the role of time.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import DegenerateK, NonPositiveParameter, SingularTransform

K_ZERO_TOL = 1e-12
ROUND_TRIP_TOL = 1e-12


def drift_k(r: float, delta0: float, sigma: float) -> float:
    """Deterministic drift of the transformed coordinate z."""
    return r - 0.5 * sigma * sigma - 0.5 * delta0


@dataclass(frozen=True)
class ModelParams:
    """Market constants with the derived regime flags.

    Parameters
    ----------
    r : float
        Discount rate.
    delta0 : float
        Dividend rate paid when the hidden indicator equals one.
    sigma : float
        Volatility of the asset.
    strike : float
        Strike K of the call.
    penalty : float
        Cancellation penalty eps0 paid by the seller on top of the payoff.
    """

    r: float
    delta0: float
    sigma: float
    strike: float
    penalty: float
    k: float = field(init=False)
    ratio: float = field(init=False)
    assumption_ratio_ok: bool = field(init=False)
    assumption_ratio_strict: bool = field(init=False)
    strong_r: bool = field(init=False)

    def __post_init__(self) -> None:
        for name in ("r", "delta0", "sigma", "strike", "penalty"):
            value = float(getattr(self, name))
            if not np.isfinite(value) or value <= 0.0:
                raise NonPositiveParameter(f"{name} must be a positive finite number, got {value!r}")
            object.__setattr__(self, name, value)
        k = drift_k(self.r, self.delta0, self.sigma)
        if abs(k) < K_ZERO_TOL:
            raise DegenerateK(
                f"k = r - sigma^2/2 - delta0/2 = {k!r} is numerically zero; this case is not supported"
            )
        s2 = self.sigma * self.sigma
        ratio = s2 / self.delta0
        lower = (self.delta0 / s2) * (self.delta0 + s2) / 2.0
        upper = (self.delta0 + s2) / 2.0
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "ratio", ratio)
        object.__setattr__(self, "assumption_ratio_ok", bool(ratio >= 1.0))
        object.__setattr__(self, "assumption_ratio_strict", bool(ratio > 1.0))
        object.__setattr__(self, "strong_r", bool(lower < self.r < upper))

    @property
    def diffusion(self) -> float:
        """Coefficient D in the y-generator D * y^2 (1-y)^2 d^2/dy^2."""
        return self.delta0 ** 2 / (2.0 * self.sigma ** 2)

    @property
    def strong_r_bounds(self) -> tuple[float, float]:
        s2 = self.sigma * self.sigma
        return (self.delta0 / s2) * (self.delta0 + s2) / 2.0, (self.delta0 + s2) / 2.0

    def to_dict(self) -> dict[str, float]:
        return {
            "r": self.r,
            "delta0": self.delta0,
            "sigma": self.sigma,
            "strike": self.strike,
            "penalty": self.penalty,
        }

    @classmethod
    def from_mapping(cls, raw: Mapping[str, object]) -> "ModelParams":
        return validate_params(
            raw["r"], raw["delta0"], raw["sigma"], raw["strike"], raw["penalty"]
        )

    def replace(self, **changes: float) -> "ModelParams":
        data = self.to_dict()
        data.update(changes)
        return ModelParams(**data)


@dataclass(frozen=True)
class StatePoint:
    """Point (x, y) of the original state space."""

    x: float
    y: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        if not self.x > 0.0:
            raise NonPositiveParameter(f"x must be positive, got {self.x!r}")
        if not 0.0 <= self.y <= 1.0:
            raise ValueError(f"y must lie in [0, 1], got {self.y!r}")


@dataclass(frozen=True)
class TransformedPoint:
    """Point (z, y) of the transformed state space, 0 < y < 1."""

    z: float
    y: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "z", float(self.z))
        object.__setattr__(self, "y", float(self.y))
        if not 0.0 < self.y < 1.0:
            raise SingularTransform(f"transform is singular at y={self.y!r}")


def validate_params(r: float, delta0: float, sigma: float, strike: float, penalty: float) -> ModelParams:
    """Build a ModelParams, raising on non-positive input or k = 0."""
    try:
        values = [float(v) for v in (r, delta0, sigma, strike, penalty)]
    except (TypeError, ValueError) as exc:
        raise NonPositiveParameter(f"parameters must be real numbers: {exc}") from None
    return ModelParams(*values)


def payoff_g1(x, p: ModelParams):
    """Buyer's exercise payoff (x - K)^+."""
    return np.maximum(np.asarray(x, dtype=float) - p.strike, 0.0)


def payoff_g2(x, p: ModelParams):
    """Seller's cancellation cost (x - K)^+ + eps0."""
    return payoff_g1(x, p) + p.penalty


def _check_open_unit(y) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if np.any(~((y > 0.0) & (y < 1.0))):
        raise SingularTransform("transform is singular outside 0 < y < 1")
    return y


def logit(y):
    y = np.asarray(y, dtype=float)
    return np.log(y) - np.log1p(-y)


def expit(l):
    l = np.asarray(l, dtype=float)
    return 0.5 * (1.0 + np.tanh(0.5 * l))


def z_of(x, y, p: ModelParams):
    """Vectorised z = ln x + ratio * logit(y)."""
    y = _check_open_unit(y)
    return np.log(np.asarray(x, dtype=float)) + p.ratio * logit(y)


def f_map(z, y, p: ModelParams):
    """Vectorised F(z, y) = e^z ((1-y)/y)^ratio, the asset level at (z, y)."""
    y = _check_open_unit(y)
    return np.exp(np.asarray(z, dtype=float) - p.ratio * logit(y))


def y_of(z, x, p: ModelParams):
    """Vectorised inverse of F in y: the posterior that maps x to z."""
    return expit((np.asarray(z, dtype=float) - np.log(np.asarray(x, dtype=float))) / p.ratio)


def to_z(point: StatePoint, p: ModelParams) -> TransformedPoint:
    if not 0.0 < point.y < 1.0:
        raise SingularTransform(f"transform is singular at y={point.y!r}")
    return TransformedPoint(float(z_of(point.x, point.y, p)), point.y)


def from_z(point: TransformedPoint, p: ModelParams) -> StatePoint:
    return StatePoint(float(f_map(point.z, point.y, p)), point.y)


def y_k_curve(z, p: ModelParams):
    """The curve y_K(z) on which F(z, y_K(z)) = K."""
    a = p.delta0 / p.sigma ** 2
    return expit(a * (np.asarray(z, dtype=float) - np.log(p.strike)))


def z_k_of_y(y, p: ModelParams):
    """Inverse of y_k_curve: the z at which F(z, y) = K."""
    return np.log(p.strike) + p.ratio * logit(_check_open_unit(y))


def obstacle(i: int, point_or_z, y=None, p: ModelParams | None = None):
    """H_i(z, y) = G_i(F(z, y)).

    Accepts either ``obstacle(i, TransformedPoint, p=params)`` or the
    vectorised form ``obstacle(i, z, y, params)``.
    """
    if isinstance(point_or_z, TransformedPoint):
        if p is None:
            p = y
        z, yy = point_or_z.z, point_or_z.y
    else:
        z, yy = point_or_z, y
    if p is None:
        raise TypeError("model parameters are required")
    x = f_map(z, yy, p)
    if i == 1:
        return payoff_g1(x, p)
    if i == 2:
        return payoff_g2(x, p)
    raise ValueError(f"obstacle index must be 1 or 2, got {i!r}")


def clamp_y(y, eps: float = 1e-12):
    """Diagnostic helper that keeps y inside [eps, 1 - eps].  Never used by the solver."""
    return np.clip(np.asarray(y, dtype=float), eps, 1.0 - eps)
