"""Adaptive data collection under an observation budget.

A learned forecaster bridges gaps between observations, a recurrent
Q-network picks when to observe next, and a post-hoc estimator reconstructs
the full profile from what was collected.
"""

from .errors import CollectError

__version__ = "0.1.0"

__all__ = ["CollectError", "__version__"]
