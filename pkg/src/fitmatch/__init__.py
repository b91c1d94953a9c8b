"""Joint feature matching and multi-homography fitting.

Feature-to-feature matching and match-to-model assignment are solved as one
integral optimization: an exact min-cost-max-flow reduction for a fixed label
set, local search over label subsets for the label-cost regularized energy,
and block-coordinate-descent drivers alternating model fitting with matching.
"""

__version__ = "0.1.0"
