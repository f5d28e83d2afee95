"""Volatility cost from a fluctuation stack and its blend with learned costs.

Each pixel's values across the stack (cover included) are modelled as a
Gaussian. The probability of a gray level ``v`` is the Gaussian mass on
``[v - 0.5, v + 0.5]``, and the cost of moving the cover value ``c`` to
``c +- 1`` is ``-ln(P(c +- 1) / P(c))`` floored at zero. Pixels whose
spread is below ``sigma_min`` are wet.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import log_ndtr

from .errors import ConfigError, DegenerateScalingError, ShapeError
from .maps import WET_COST, CostMap, is_wet

SIGMA_MIN = 0.1
DEFAULT_VC_BETA = 0.15


@dataclass(frozen=True)
class VolatilityCost(CostMap):
    mu: np.ndarray | None = None
    sigma: np.ndarray | None = None


@dataclass(frozen=True)
class CombineConfig:
    vc_beta: float = DEFAULT_VC_BETA

    def __post_init__(self):
        if not 0 <= self.vc_beta <= 1:
            raise ConfigError(f"vc_beta {self.vc_beta} outside [0, 1]")


def fit_gaussian(stack) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel mean and sample standard deviation (ddof=1) over axis 0."""
    stack = np.asarray(stack, dtype=np.float64)
    if stack.shape[0] < 2:
        raise ConfigError("need at least two samples per pixel")
    return stack.mean(axis=0), stack.std(axis=0, ddof=1)


def _log_bin_mass(v, mu, sigma):
    """log of the N(mu, sigma) mass on [v - 0.5, v + 0.5], computed in the tails safely."""
    a = (v - 0.5 - mu) / sigma
    b = (v + 0.5 - mu) / sigma
    # mirror to the lower tail where log_ndtr is accurate
    flip = a > 0
    lo = np.where(flip, -b, a)
    hi = np.where(flip, -a, b)
    la, lb = log_ndtr(lo), log_ndtr(hi)
    with np.errstate(divide="ignore"):
        return lb + np.log1p(-np.exp(np.minimum(la - lb, 0.0)))


def volatility_from_stack(cover, stack, sigma_min: float = SIGMA_MIN) -> VolatilityCost:
    cover = np.asarray(cover, dtype=np.float64)
    mu, sigma = fit_gaussian(stack)
    if mu.shape != cover.shape:
        raise ShapeError(f"stack {mu.shape} vs cover {cover.shape}")
    wet = sigma < sigma_min
    s = np.where(wet, 1.0, sigma)
    with np.errstate(invalid="ignore"):
        l0 = _log_bin_mass(cover, mu, s)
        planes = []
        for step in (1, -1):
            cost = l0 - _log_bin_mass(cover + step, mu, s)
            cost = np.where(np.isfinite(cost), np.maximum(cost, 0.0), WET_COST)
            out_of_range = (cover + step < 0) | (cover + step > 255)
            cost[wet | out_of_range] = WET_COST
            planes.append(np.minimum(cost, WET_COST))
    return VolatilityCost(planes[0], planes[1], mu=mu, sigma=sigma)


def estimate_volatility_cost(fset, sigma_min: float = SIGMA_MIN) -> VolatilityCost:
    """Volatility cost of ``fset.cover`` from the cover plus its fluctuations."""
    if fset.n < 2:
        raise ConfigError(f"need at least 2 fluctuations, got {fset.n}")
    return volatility_from_stack(fset.cover, fset.stack(), sigma_min)


def _dry_mean(planes):
    vals = np.concatenate([np.asarray(p, dtype=np.float64).ravel() for p in planes])
    dry = ~is_wet(vals)
    if not dry.any():
        return None
    return vals[dry].mean()


def scaling_factor(rho_o: CostMap, rho_v: CostMap) -> float:
    """Ratio of the mean dry volatility cost to the mean dry original cost."""
    mv = _dry_mean((rho_v.rho_plus, rho_v.rho_minus))
    mo = _dry_mean((rho_o.rho_plus, rho_o.rho_minus))
    if mv is None or mo is None:
        raise DegenerateScalingError("one of the cost maps has no dry pixels")
    if mo == 0:
        raise DegenerateScalingError("original costs average to zero; cannot rescale")
    return float(mv / mo)


def combine_costs(rho_o: CostMap, rho_v: CostMap, cfg: CombineConfig = CombineConfig()) -> CostMap:
    """``vc_beta * rho_v + (1 - vc_beta) * vc_alpha * rho_o`` per direction; wet stays wet."""
    if rho_o.shape != rho_v.shape:
        raise ShapeError(f"{rho_o.shape} vs {rho_v.shape}")
    alpha = scaling_factor(rho_o, rho_v)
    b = cfg.vc_beta
    out = []
    for o, v in ((rho_o.rho_plus, rho_v.rho_plus), (rho_o.rho_minus, rho_v.rho_minus)):
        o = np.asarray(o, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        wet = is_wet(o) | is_wet(v)
        c = np.where(wet, WET_COST, b * np.where(wet, 0, v) + (1 - b) * (alpha * np.where(wet, 0, o)))
        out.append(c)
    return CostMap(*out)
