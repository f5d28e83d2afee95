"""Generative-image-fluctuation driven embedding cost learning for grayscale steganography."""

__version__ = "0.1.0"

from .errors import GifdlError
from .maps import WET_COST, CostMap, ProbabilityMap
from .embedding import costs_to_probs, double_tanh_modify, piecewise_modify, probs_to_costs
from .stc import StcParams, stc_embed, stc_extract

__all__ = [
    "__version__",
    "GifdlError",
    "WET_COST",
    "CostMap",
    "ProbabilityMap",
    "costs_to_probs",
    "double_tanh_modify",
    "piecewise_modify",
    "probs_to_costs",
    "StcParams",
    "stc_embed",
    "stc_extract",
]
