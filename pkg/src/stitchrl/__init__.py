"""Desk-scale offline RL lab: an entropy-regularized return-conditioned
transformer with conservative-value RTG relabeling, plus the item-graph
world that makes trajectory stitching observable."""

__version__ = "0.1.0"
