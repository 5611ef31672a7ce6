"""Containers for posterior draws and the affine maps of the data frame."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .tree_core import Ensemble

__all__ = ['AffineMap', 'DrawRecord', 'PosteriorDraws']


@dataclass(frozen=True)
class AffineMap:
    """``standardized = (raw - shift) / scale``."""

    shift: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ValueError(f'scale must be positive, got {self.scale}')

    def to_std(self, raw):
        return (np.asarray(raw, dtype=float) - self.shift) / self.scale

    def to_raw(self, std):
        return np.asarray(std, dtype=float) * self.scale + self.shift


@dataclass
class DrawRecord:
    iteration: int
    mean: Ensemble
    var: Ensemble
    sigma0_sq: float
    latents: np.ndarray | None = None

    def __eq__(self, other):
        if not isinstance(other, DrawRecord):
            return NotImplemented
        same_latents = (self.latents is None and other.latents is None) or (
            self.latents is not None
            and other.latents is not None
            and np.array_equal(self.latents, other.latents)
        )
        return (
            self.iteration == other.iteration
            and self.mean == other.mean
            and self.var == other.var
            and self.sigma0_sq == other.sigma0_sq
            and same_latents
        )


@dataclass
class PosteriorDraws:
    """Retained draws plus what is needed to query them on the raw scale.

    ``y_map`` maps raw y to the sampler's frame; ``x_maps`` do the same per
    covariate. ``meta`` holds hyperparameters, seed and variant.
    """

    records: list[DrawRecord] = field(default_factory=list)
    y_map: AffineMap = field(default_factory=AffineMap)
    x_maps: list[AffineMap] = field(default_factory=list)
    meta: dict[str, Any] = field(default_factory=dict)
    columns: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def x_to_std(self, x_raw) -> np.ndarray:
        x_raw = np.atleast_1d(np.asarray(x_raw, dtype=float))
        if not self.x_maps:
            return x_raw
        if x_raw.shape[-1] != len(self.x_maps):
            raise ValueError(f'expected {len(self.x_maps)} covariates, got {x_raw.shape[-1]}')
        return np.array([m.to_std(v) for m, v in zip(self.x_maps, x_raw)])

    def thinned(self, max_draws: int) -> PosteriorDraws:
        """Evenly spaced subset of at most ``max_draws`` records."""
        n = len(self.records)
        if n <= max_draws:
            return self
        idx = np.unique(np.linspace(0, n - 1, max_draws).round().astype(int))
        return PosteriorDraws([self.records[i] for i in idx], self.y_map, self.x_maps, self.meta, self.columns)
