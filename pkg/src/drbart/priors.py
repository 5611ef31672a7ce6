"""Priors on trees and leaves, and their calibration.

Tree prior: a node at depth d splits with probability alpha * (1 + d)**-beta;
the split axis is uniform over the axes that admit a cut in the node and the
cutpoint is uniform over the admissible cuts (a grid of observed values for
x axes, the continuous node interval otherwise).

Mean leaves are N(0, sigma_mu**2). Variance leaves carry tau = exp(leaf) with
an equal mixture of Gamma(a, b) and InverseGamma(a, b), a = b = a0 * m_v.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from .tree_core import LEAF, Tree

__all__ = [
    'BartHyperParams',
    'VarianceHyperParams',
    'Sigma0Spec',
    'split_probability',
    'sample_prior_tree',
    'calibrate_sigma_mu',
    'calibrate_a0',
    'sample_leaf_scale_prior',
    'leaf_scale_prior_logpdf',
    'depth_node_counts',
    'MAX_DEPTH',
    'CheckResult',
    'prior_checks',
]

MAX_DEPTH = 64


def calibrate_sigma_mu(k: float, m: int) -> float:
    """Leaf standard deviation giving f a prior sd of 1/(2k) on data scaled to +-0.5."""
    if not (k > 0 and m >= 1):
        raise ValueError(f'need k > 0 and m >= 1, got k={k}, m={m}')
    return 1.0 / (2.0 * k * math.sqrt(m))


def calibrate_a0(d_range: float) -> float:
    """a0 such that exp(v) falls in (1/d, d) with prior probability about 0.95."""
    if not d_range > 1:
        raise ValueError(f'd_range must exceed 1, got {d_range}')
    return math.log(math.sqrt(d_range)) ** -2


@dataclass
class BartHyperParams:
    alpha: float = 0.95
    beta: float = 2.0
    k: float = 2.0
    m: int = 250
    sigma_mu: float | None = None
    min_leaf: int = 5

    def __post_init__(self):
        if not 0 <= self.alpha < 1:
            raise ValueError(f'alpha must lie in [0, 1), got {self.alpha}')
        if self.beta < 0:
            raise ValueError(f'beta must be non-negative, got {self.beta}')
        if self.m < 0 or self.min_leaf < 1:
            raise ValueError('m must be >= 0 and min_leaf >= 1')
        if self.sigma_mu is None:
            self.sigma_mu = calibrate_sigma_mu(self.k, max(self.m, 1))


@dataclass
class VarianceHyperParams:
    m_v: int = 100
    a0: float = field(default_factory=lambda: calibrate_a0(4.0))
    alpha: float = 0.95
    beta: float = 2.0

    @property
    def a(self) -> float:
        return self.a0 * self.m_v

    @property
    def b(self) -> float:
        return self.a0 * self.m_v


@dataclass
class Sigma0Spec:
    """How sigma_0**2 is handled: held fixed, or InverseGamma(nu0/2, nu0*xi0/2)."""

    mode: str = 'fixed'
    fixed_value: float | None = None
    nu0: float | None = None
    xi0: float | None = None

    def __post_init__(self):
        if self.mode == 'fixed':
            if self.fixed_value is None or not self.fixed_value > 0:
                raise ValueError('fixed sigma0 spec needs fixed_value > 0')
            if self.nu0 is not None or self.xi0 is not None:
                raise ValueError('nu0/xi0 only apply to the inverse-gamma mode')
        elif self.mode == 'inverse-gamma':
            if not (self.nu0 and self.nu0 > 0 and self.xi0 and self.xi0 > 0):
                raise ValueError('inverse-gamma sigma0 spec needs nu0 > 0 and xi0 > 0')
            if self.fixed_value is None:
                self.fixed_value = self.xi0
        else:
            raise ValueError(f'unknown sigma0 mode {self.mode!r}')


def split_probability(depth: int, hp) -> float:
    """Prior probability that a node at ``depth`` is internal."""
    if depth < 0:
        raise ValueError('depth must be non-negative')
    return hp.alpha * (1.0 + depth) ** (-hp.beta)


def _admissible(lo, hi, grids, axes):
    """Per allowed axis, the admissible cut set: an array, or None for continuous."""
    out = []
    for ax in axes:
        grid = None if grids is None else grids[ax]
        if grid is None:
            if hi[ax] > lo[ax]:
                out.append((ax, None))
        else:
            i0 = np.searchsorted(grid, lo[ax], side='right')
            i1 = np.searchsorted(grid, hi[ax], side='left')
            if i1 > i0:
                out.append((ax, grid[i0:i1]))
    return out


def sample_prior_tree(
    rng: np.random.Generator,
    hp,
    axis_count: int,
    *,
    cut_grids: Sequence[np.ndarray | None] | None = None,
    allowed_axes: Sequence[int] | None = None,
    leaf_sampler=None,
) -> Tree:
    """Draw a tree from the branching-process prior.

    Parameters
    ----------
    rng
        Random generator.
    hp
        Anything with ``alpha`` and ``beta`` attributes.
    axis_count
        Number of axes of the space; the last one is the latent axis with
        domain [0, 1). x axes default to [0, 1) as well.
    cut_grids
        Optional per-axis sorted arrays of admissible cutpoints; ``None``
        entries (or no argument) mean a continuous uniform cut on the node's
        interval.
    allowed_axes
        Axes eligible for splitting, default all.
    leaf_sampler
        Callable ``rng -> float`` for leaf values; leaves are 0 if omitted.

    Raises
    ------
    RuntimeError
        If a branch reaches depth 64.
    """
    if axis_count < 1:
        raise ValueError('axis_count must be >= 1')
    axes = list(range(axis_count)) if allowed_axes is None else list(allowed_axes)
    lo0 = np.zeros(axis_count)
    hi0 = np.ones(axis_count)
    if cut_grids is not None:
        for ax, grid in enumerate(cut_grids):
            if grid is not None:
                lo0[ax], hi0[ax] = -np.inf, np.inf
    axis, cut, left, right, value = [], [], [], [], []

    def new_node():
        axis.append(LEAF)
        cut.append(np.nan)
        left.append(LEAF)
        right.append(LEAF)
        value.append(np.nan)
        return len(axis) - 1

    root = new_node()
    stack = [(root, 0, lo0, hi0)]
    while stack:
        node, depth, lo, hi = stack.pop()
        if depth >= MAX_DEPTH:
            raise RuntimeError(f'prior tree exceeded the safety depth cap of {MAX_DEPTH}')
        rules = _admissible(lo, hi, cut_grids, axes)
        if rules and rng.random() < split_probability(depth, hp):
            ax, grid = rules[rng.integers(0, len(rules))]
            if grid is None:
                c = lo[ax] + (hi[ax] - lo[ax]) * rng.random()
            else:
                c = float(grid[rng.integers(0, grid.shape[0])])
            l, r = new_node(), new_node()
            axis[node], cut[node], left[node], right[node] = ax, c, l, r
            hi_l = hi.copy()
            hi_l[ax] = c
            lo_r = lo.copy()
            lo_r[ax] = c
            stack.append((r, depth + 1, lo_r, hi))
            stack.append((l, depth + 1, lo, hi_l))
        else:
            value[node] = 0.0 if leaf_sampler is None else float(leaf_sampler(rng))
    return Tree(axis, cut, left, right, value)


def depth_node_counts(tree: Tree, max_depth: int) -> np.ndarray:
    """Number of nodes at each depth 0..max_depth."""
    counts = np.zeros(max_depth + 1, dtype=np.int64)
    stack = [(0, 0)]
    while stack:
        k, d = stack.pop()
        if d <= max_depth:
            counts[d] += 1
        if tree.axis[k] >= 0:
            stack.append((int(tree.left[k]), d + 1))
            stack.append((int(tree.right[k]), d + 1))
    return counts


def sample_leaf_scale_prior(rng: np.random.Generator, a: float, b: float, size=None):
    """Draw tau from the equal Gamma / InverseGamma mixture (shape a, rate b)."""
    if not (a > 0 and b > 0):
        raise ValueError(f'a and b must be positive, got {a}, {b}')
    g = rng.gamma(a, 1.0 / b, size=size)
    flip = rng.random(size=size) < 0.5
    return np.where(flip, 1.0 / g, g) if size is not None else (1.0 / g if flip else g)


def leaf_scale_prior_logpdf(tau, a: float, b: float):
    """Log density of the Gamma / InverseGamma mixture at ``tau``."""
    tau = np.asarray(tau, dtype=float)
    lg = stats.gamma.logpdf(tau, a, scale=1.0 / b)
    lig = stats.invgamma.logpdf(tau, a, scale=b)
    return np.logaddexp(lg, lig) - math.log(2.0)


@dataclass
class CheckResult:
    name: str
    value: float
    target: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return abs(self.value - self.target) <= self.tolerance

    def line(self) -> str:
        verdict = 'PASS' if self.passed else 'FAIL'
        return f'{verdict} {self.name}: {self.value:.6g} (target {self.target:.6g} +- {self.tolerance:.3g})'


def prior_checks(
    rng: np.random.Generator,
    *,
    n_trees: int = 100_000,
    n_scale: int = 1_000_000,
    hp: BartHyperParams | None = None,
    a0: float = 1.0,
    m_v: int = 100,
    d_range: float = 4.0,
) -> list[CheckResult]:
    """Monte Carlo checks of the tree prior and the leaf-scale prior.

    * single-leaf fraction 1 - alpha and expected node counts
      (2 alpha)^d (d!)^-beta at depths 1 and 2 (3 Monte Carlo SE);
    * mean 0 and variance 1/(a0 m_v) of log tau (0.005 absolute, 2%);
    * KS distance below 0.02 between sqrt(a0) times a sum of m_v log tau and N(0, 1);
    * Pr(exp(v) in (1/d, d)) = 0.95 for v a sum of m_v log-scale leaves
      with a0 calibrated from d (0.01 absolute).
    """
    hp = BartHyperParams() if hp is None else hp
    counts = np.empty((n_trees, 3))
    for t in range(n_trees):
        counts[t] = depth_node_counts(sample_prior_tree(rng, hp, 2), 2)
    out = [CheckResult('single-leaf fraction', float(np.mean(counts[:, 1] == 0)), 1 - hp.alpha, 0.005)]
    for d in (1, 2):
        expected = (2 * hp.alpha) ** d * math.factorial(d) ** (-hp.beta)
        se = counts[:, d].std(ddof=1) / math.sqrt(n_trees)
        out.append(CheckResult(f'mean nodes at depth {d}', float(counts[:, d].mean()), expected, 3 * se))

    a = a0 * m_v
    log_tau = np.log(sample_leaf_scale_prior(rng, a, a, size=n_scale))
    out.append(CheckResult('mean log tau', float(log_tau.mean()), 0.0, 0.005))
    out.append(CheckResult('var log tau', float(log_tau.var()), 1 / a, 0.02 / a))

    # sums of m_v independent log tau have variance close to 1/a0
    n_sums = max(n_scale // m_v, 1000)
    sums = np.log(sample_leaf_scale_prior(rng, a, a, size=(n_sums, m_v))).sum(axis=1)
    ks = float(stats.kstest(sums * math.sqrt(a0), 'norm').statistic)
    out.append(CheckResult('KS of scaled sum of log tau vs N(0,1)', ks, 0.0, 0.02))

    a_cal = calibrate_a0(d_range) * m_v
    n_v = max(n_scale // m_v, 1000)
    v = np.log(sample_leaf_scale_prior(rng, a_cal, a_cal, size=(n_v, m_v))).sum(axis=1)
    inside = float(np.mean(np.abs(v) < math.log(d_range)))
    out.append(CheckResult(f'Pr(exp v in (1/{d_range:g}, {d_range:g}))', inside, 0.95, 0.01))
    return out
