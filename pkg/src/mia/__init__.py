"""Mutual Iterative Attention for aligning visual features with textual concepts."""

__version__ = "0.1.0"

from .mia import MiaConfig, MiaParams, accumulate_trace, mia_refine, mutual_round  # noqa: E402

__all__ = ["MiaConfig", "MiaParams", "accumulate_trace", "mia_refine", "mutual_round", "__version__"]
