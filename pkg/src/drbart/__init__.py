"""Density regression with Bayesian additive regression trees.

A latent uniform coordinate enters the trees as an extra split axis, so the
fitted conditional density of y given x is a finite location-scale mixture
of normals.
"""

__version__ = '0.1.0'
