"""Spatial divide-and-conquer object counting.

Counting is learned over a closed set of local count values; regions whose
counts overflow the set are recursively split into 2x2 sub-regions until
every local count falls back inside it. This package provides the grid
algebra and merge engine for that recursion, the supervision losses with
analytic gradients, ground-truth construction from dot annotations,
executable checks of the division-time and error bounds, a synthetic
cell-counting dataset, a small trainable model and the evaluation metrics.
"""

from sdcount.backend import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
