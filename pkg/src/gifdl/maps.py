"""Probability and cost maps, plus their binary grid file format.

Grid files start with an 8-byte header (H, W as big-endian int32) followed
by one or more big-endian float32 planes of H*W values. A probability map
file holds one plane (total change probability ``p``); a cost map file holds
two (``rho_plus`` then ``rho_minus``).
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import PgmParseError, ShapeError

# Reserved "infinite" cost. Anything at or above WET_THRESHOLD is wet.
WET_COST = 1e13
WET_THRESHOLD = WET_COST * (1 - 1e-6)


def is_wet(rho) -> np.ndarray:
    rho = np.asarray(rho)
    return ~(rho < WET_THRESHOLD)


@dataclass(frozen=True)
class ProbabilityMap:
    """Per-pixel probabilities of a +1 and a -1 change."""

    p_plus: np.ndarray
    p_minus: np.ndarray

    def __post_init__(self):
        if self.p_plus.shape != self.p_minus.shape:
            raise ShapeError(f"{self.p_plus.shape} != {self.p_minus.shape}")

    @classmethod
    def symmetric(cls, p) -> "ProbabilityMap":
        p = np.asarray(p, dtype=np.float64)
        half = p / 2
        return cls(half, half.copy())

    @property
    def p(self) -> np.ndarray:
        return self.p_plus + self.p_minus

    @property
    def shape(self):
        return self.p_plus.shape


@dataclass(frozen=True)
class CostMap:
    """Ternary costs; the cost of leaving a pixel unchanged is always 0."""

    rho_plus: np.ndarray
    rho_minus: np.ndarray

    def __post_init__(self):
        if self.rho_plus.shape != self.rho_minus.shape:
            raise ShapeError(f"{self.rho_plus.shape} != {self.rho_minus.shape}")

    @classmethod
    def symmetric(cls, rho) -> "CostMap":
        rho = np.asarray(rho, dtype=np.float64)
        return cls(rho, rho.copy())

    @property
    def rho_zero(self) -> np.ndarray:
        return np.zeros(self.shape)

    @property
    def shape(self):
        return self.rho_plus.shape

    @property
    def wet(self) -> np.ndarray:
        return is_wet(self.rho_plus) & is_wet(self.rho_minus)

    def normalized(self) -> "CostMap":
        """Copy with every wet entry (inf, nan or >= threshold) set to WET_COST."""
        out = []
        for rho in (self.rho_plus, self.rho_minus):
            r = np.array(rho, dtype=np.float64)
            r[is_wet(r)] = WET_COST
            out.append(r)
        return CostMap(*out)


def write_grid(path, *planes) -> None:
    planes = [np.asarray(p, dtype=np.float64) for p in planes]
    if not planes:
        raise ShapeError("at least one plane is required")
    h, w = planes[0].shape
    if any(p.shape != (h, w) for p in planes):
        raise ShapeError("all planes must share one shape")
    body = b"".join(np.minimum(p, WET_COST).astype(">f4").tobytes() for p in planes)
    path = Path(path)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    tmp.write_bytes(struct.pack(">ii", h, w) + body)
    os.replace(tmp, path)


def read_grid(path) -> list[np.ndarray]:
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise PgmParseError("header", "grid file shorter than 8 bytes")
    h, w = struct.unpack(">ii", data[:8])
    if h <= 0 or w <= 0:
        raise PgmParseError("header", f"bad dimensions {h}x{w}")
    plane = 4 * h * w
    if (len(data) - 8) % plane or len(data) == 8:
        raise PgmParseError("payload", f"size {len(data) - 8} is not a multiple of {plane}")
    out = []
    for k in range((len(data) - 8) // plane):
        buf = data[8 + k * plane: 8 + (k + 1) * plane]
        g = np.frombuffer(buf, dtype=">f4").astype(np.float64).reshape(h, w)
        g[is_wet(g)] = WET_COST
        out.append(g)
    return out


def save_probability_map(pm: ProbabilityMap, path) -> None:
    write_grid(path, pm.p)


def load_probability_map(path) -> ProbabilityMap:
    planes = read_grid(path)
    if len(planes) != 1:
        raise PgmParseError("payload", f"expected 1 plane, found {len(planes)}")
    return ProbabilityMap.symmetric(planes[0])


def save_cost_map(cm: CostMap, path) -> None:
    write_grid(path, cm.rho_plus, cm.rho_minus)


def load_cost_map(path) -> CostMap:
    planes = read_grid(path)
    if len(planes) != 2:
        raise PgmParseError("payload", f"expected 2 planes, found {len(planes)}")
    return CostMap(*planes)
