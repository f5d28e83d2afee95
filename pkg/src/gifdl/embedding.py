"""Embedding simulators and the probability <-> cost conversion.

Both simulators accept numpy arrays; ``double_tanh_modify`` also accepts
torch tensors so it can sit inside the training graph.
"""
from __future__ import annotations

import math

import numpy as np

from .errors import DomainError, ShapeError
from .maps import WET_COST, CostMap, ProbabilityMap, is_wet

DEFAULT_GAMMA = 60.0


def noise_field(shape, seed) -> np.ndarray:
    """I.i.d. U[0, 1) noise, reproducible from ``seed``."""
    return np.random.default_rng(seed).random(shape)


def piecewise_modify(pm: ProbabilityMap, r) -> np.ndarray:
    """Discrete +-1 change map from probabilities and uniform noise.

    -1 where ``r < p_minus``, +1 where ``r > 1 - p_plus``, 0 otherwise
    (ties go to 0).
    """
    r = np.asarray(r)
    if r.shape != pm.shape:
        raise ShapeError(f"noise {r.shape} vs probabilities {pm.shape}")
    m = np.zeros(r.shape, dtype=np.int8)
    m[r > 1 - pm.p_plus] = 1
    m[r < pm.p_minus] = -1
    return m


def double_tanh_modify(p_plus, p_minus, r, gamma: float = DEFAULT_GAMMA):
    """Differentiable surrogate of :func:`piecewise_modify`, values in (-1, 1).

    ``0.5 tanh(g (p+ - (1 - r))) - 0.5 tanh(g (p- - r))``: close to -1 where
    ``r < p-`` and to +1 where ``r > 1 - p+``, so for the same noise it tracks
    the discrete map pixel by pixel. The textbook form
    ``0.5 tanh(g (p+ - r)) - 0.5 tanh(g (p- - (1 - r)))`` is this function
    evaluated at ``1 - r``; both have the same distribution for uniform noise.
    """
    if gamma <= 0:
        raise DomainError("gamma must be positive")
    if tuple(p_plus.shape) != tuple(r.shape) or tuple(p_minus.shape) != tuple(r.shape):
        raise ShapeError(f"shapes differ: {tuple(p_plus.shape)}, {tuple(p_minus.shape)}, {tuple(r.shape)}")
    tanh = _tanh_for(r)
    return 0.5 * tanh(gamma * (p_plus - (1 - r))) - 0.5 * tanh(gamma * (p_minus - r))


def _tanh_for(x):
    if type(x).__module__.startswith("torch"):
        import torch

        return torch.tanh
    return np.tanh


def probs_to_costs(pm: ProbabilityMap) -> CostMap:
    """rho = ln(1/p - 2) per direction; zero probability becomes wet."""
    out = []
    for p in (pm.p_plus, pm.p_minus):
        p = np.asarray(p, dtype=np.float64)
        if np.any(np.isnan(p)):
            raise DomainError("probability map contains NaN")
        if np.any(p >= 0.5):
            raise DomainError(f"cost undefined for p >= 0.5 (max {p.max():.6g})")
        rho = np.full(p.shape, WET_COST)
        ok = p > 0
        rho[ok] = np.log(1.0 / p[ok] - 2.0)
        out.append(rho)
    return CostMap(*out)


def costs_to_probs(costs: CostMap, lam: float = 1.0) -> ProbabilityMap:
    """Ternary Gibbs distribution p(m) ~ exp(-lam * rho(m)) with rho(0) = 0.

    For symmetric costs and ``lam == 1`` this is the exact inverse of
    :func:`probs_to_costs`: ``p_plus = 1 / (exp(rho) + 2)``. Wet entries get
    probability 0.
    """
    rp = np.asarray(costs.rho_plus, dtype=np.float64)
    rm = np.asarray(costs.rho_minus, dtype=np.float64)
    wp, wm = is_wet(rp), is_wet(rm)
    ep = np.where(wp, 0.0, np.exp(-lam * np.where(wp, 0.0, rp)))
    em = np.where(wm, 0.0, np.exp(-lam * np.where(wm, 0.0, rm)))
    z = 1.0 + ep + em
    return ProbabilityMap(ep / z, em / z)


def _xlog2x(p):
    p = np.asarray(p, dtype=np.float64)
    out = np.zeros_like(p)
    nz = p > 0
    out[nz] = p[nz] * np.log2(p[nz])
    return out


def ternary_entropy(pm: ProbabilityMap) -> float:
    """Expected message capacity in bits: sum of per-pixel ternary entropies."""
    p0 = 1.0 - pm.p_plus - pm.p_minus
    return float(-(_xlog2x(pm.p_plus) + _xlog2x(pm.p_minus) + _xlog2x(p0)).sum())


def binary_entropy(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return -(_xlog2x(p) + _xlog2x(1.0 - p))


def probs_for_payload(costs: CostMap, bits: float, tol: float = 1e-3) -> tuple[ProbabilityMap, float]:
    """Payload-limited sender: find lam so the Gibbs entropy equals ``bits``.

    Returns the probabilities and lam. Raises if ``bits`` exceeds what the
    dry pixels can carry.
    """
    dry = ~(is_wet(costs.rho_plus) & is_wet(costs.rho_minus))
    both = ~(is_wet(costs.rho_plus) | is_wet(costs.rho_minus))
    max_bits = both.sum() * math.log2(3) + (dry & ~both).sum()
    if bits > max_bits:
        raise DomainError(f"payload {bits:.1f} bits exceeds maximum {max_bits:.1f}")
    if bits <= 0:
        return costs_to_probs(costs, lam=1e300), math.inf
    lo, hi = 0.0, 1.0
    while ternary_entropy(costs_to_probs(costs, hi)) > bits:
        lo, hi = hi, hi * 2
        if hi > 1e12:
            break
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        h = ternary_entropy(costs_to_probs(costs, mid))
        if abs(h - bits) <= tol:
            break
        if h > bits:
            lo = mid
        else:
            hi = mid
    return costs_to_probs(costs, mid), mid
