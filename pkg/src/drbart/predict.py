"""Posterior predictive queries.

For one posterior draw and a covariate vector x, u -> (f(x, u), v(x, u)) is
piecewise constant, so the predictive density is the finite normal mixture

    p(y | x) = sum_h (b_{h+1} - b_h) * N(y; f_h, sigma0^2 exp(v_h))

over the breakpoint intervals [b_h, b_{h+1}). Draws live on the
standardized scale; densities and quantiles are mapped back to raw y here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numba
import numpy as np

from .draws import AffineMap, DrawRecord, PosteriorDraws
from .tree_core import interval_table

__all__ = [
    'DensityGrid',
    'CredibleBand',
    'ReturnsSummary',
    'draw_mixture',
    'density_one_draw',
    'cdf_one_draw',
    'quantile_one_draw',
    'density_grid',
    'quantile_matrix',
    'posterior_mean_density',
    'posterior_mean_density_many',
    'summarize',
    'hdr_mask',
    'hdr_interval',
    'returns_functional',
    'growth_quantile_curves',
    'default_y_grid',
]

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass
class DensityGrid:
    """Per-draw densities at one x on a raw-scale y grid (draws x grid)."""

    x: np.ndarray
    y_grid: np.ndarray
    values: np.ndarray


@dataclass
class CredibleBand:
    lower: np.ndarray
    upper: np.ndarray
    level: float


@dataclass
class ReturnsSummary:
    per_draw: np.ndarray
    mean: float
    lower: float
    upper: float
    level: float


# ---------------------------------------------------------------------------
# mixture kernels


_Z_CUT = 12.0


@numba.njit(cache=True)
def _mixture_pdf(w, mu, sd, y, out):
    n = y.shape[0]
    step = (y[n - 1] - y[0]) / (n - 1) if n > 1 else 0.0
    uniform = step > 0.0
    for j in range(1, n):
        if abs(y[j] - (y[0] + j * step)) > 1e-9 * step:
            uniform = False
            break
    if not uniform:
        for j in range(n):
            s = 0.0
            for c in range(w.shape[0]):
                z = (y[j] - mu[c]) / sd[c]
                if -_Z_CUT < z < _Z_CUT:
                    s += w[c] * math.exp(-0.5 * z * z) / sd[c]
            out[j] = s * _INV_SQRT_2PI
        return
    # uniform grid: each component only touches points within _Z_CUT sd
    for j in range(n):
        out[j] = 0.0
    for c in range(w.shape[0]):
        j0 = max(int(math.floor((mu[c] - _Z_CUT * sd[c] - y[0]) / step)), 0)
        j1 = min(int(math.ceil((mu[c] + _Z_CUT * sd[c] - y[0]) / step)), n - 1)
        scale = w[c] / sd[c]
        for j in range(j0, j1 + 1):
            z = (y[j] - mu[c]) / sd[c]
            if -_Z_CUT < z < _Z_CUT:
                out[j] += scale * math.exp(-0.5 * z * z)
    for j in range(n):
        out[j] *= _INV_SQRT_2PI


@numba.njit(cache=True)
def _mixture_cdf(w, mu, sd, y):
    s = 0.0
    for c in range(w.shape[0]):
        s += w[c] * 0.5 * math.erfc(-(y - mu[c]) / (sd[c] * _SQRT2))
    return s


@numba.njit(cache=True)
def _mixture_pdf1(w, mu, sd, y):
    s = 0.0
    for c in range(w.shape[0]):
        z = (y - mu[c]) / sd[c]
        s += w[c] * math.exp(-0.5 * z * z) / sd[c]
    return s * _INV_SQRT_2PI


@numba.njit(cache=True)
def _mixture_quantile(w, mu, sd, s, tol):
    """Invert the mixture CDF: Newton steps kept inside a shrinking bracket."""
    lo = math.inf
    hi = -math.inf
    for c in range(w.shape[0]):
        lo = min(lo, mu[c] - 40.0 * sd[c])
        hi = max(hi, mu[c] + 40.0 * sd[c])
    total = 0.0
    for c in range(w.shape[0]):
        total += w[c]
    target = s * total
    y = 0.0
    for c in range(w.shape[0]):
        y += w[c] * mu[c]
    y /= total
    g_prev = math.inf
    for _ in range(400):
        g = _mixture_cdf(w, mu, sd, y) - target
        if g == 0.0:
            return y
        if g > 0.0:
            hi = y
        else:
            lo = y
        # a tiny Newton step is no proof of convergence near a narrow
        # component, so only the bracket decides
        if hi - lo < tol * max(1.0, abs(y)):
            return 0.5 * (lo + hi)
        d = _mixture_pdf1(w, mu, sd, y)
        step_ok = False
        if d > 0.0 and abs(g) <= 0.5 * g_prev:
            y_new = y - g / d
            if lo < y_new < hi:
                step_ok = True
        if not step_ok:
            y_new = 0.5 * (lo + hi)
        g_prev = abs(g)
        y = y_new
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# one draw


def _draw_parts(draw):
    if isinstance(draw, DrawRecord):
        return draw.mean, draw.var, draw.sigma0_sq
    return draw


def draw_mixture(draw, x) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Mixture weights, means and standard deviations on the standardized scale.

    ``draw`` is a :class:`DrawRecord` or a ``(mean_ens, var_ens, sigma0_sq)``
    triple; ``x`` is on the standardized covariate scale.
    """
    mean_ens, var_ens, sigma0_sq = _draw_parts(draw)
    bps, f, v = interval_table(mean_ens, var_ens, x)
    return np.diff(bps), f, np.sqrt(sigma0_sq * np.exp(v))


def density_one_draw(draw, x, y_grid, y_map: AffineMap | None = None) -> np.ndarray:
    """Predictive density of one draw at standardized ``x`` on raw ``y_grid``."""
    y_map = AffineMap() if y_map is None else y_map
    w, mu, sd = draw_mixture(draw, x)
    ys = y_map.to_std(np.atleast_1d(y_grid))
    out = np.empty(ys.shape[0])
    _mixture_pdf(w, mu, sd, np.ascontiguousarray(ys), out)
    return out / y_map.scale


def cdf_one_draw(draw, x, y, y_map: AffineMap | None = None) -> np.ndarray:
    y_map = AffineMap() if y_map is None else y_map
    w, mu, sd = draw_mixture(draw, x)
    ys = np.atleast_1d(y_map.to_std(y))
    return np.array([_mixture_cdf(w, mu, sd, float(v)) for v in ys])


def quantile_one_draw(draw, x, s, y_map: AffineMap | None = None, tol: float = 1e-12):
    """Q(s | x) for one draw on the raw scale; ``s`` scalar or array in (0, 1)."""
    s_arr = np.atleast_1d(np.asarray(s, dtype=float))
    if np.any((s_arr <= 0) | (s_arr >= 1)):
        raise ValueError('quantile levels must lie strictly inside (0, 1)')
    y_map = AffineMap() if y_map is None else y_map
    w, mu, sd = draw_mixture(draw, x)
    q = np.array([_mixture_quantile(w, mu, sd, float(p), tol) for p in s_arr])
    q = y_map.to_raw(q)
    return float(q[0]) if np.ndim(s) == 0 else q


# ---------------------------------------------------------------------------
# many draws


def default_y_grid(y_raw_range: tuple[float, float], n: int = 512, expand: float = 0.25) -> np.ndarray:
    """``n`` points over the observed y range widened by ``expand`` of it each side."""
    lo, hi = y_raw_range
    pad = expand * (hi - lo)
    return np.linspace(lo - pad, hi + pad, n)


def density_grid(draws: PosteriorDraws, x_raw, y_grid) -> DensityGrid:
    x_std = draws.x_to_std(x_raw)
    y_grid = np.asarray(y_grid, dtype=float)
    values = np.empty((len(draws), y_grid.shape[0]))
    for d, rec in enumerate(draws):
        values[d] = density_one_draw(rec, x_std, y_grid, draws.y_map)
    return DensityGrid(np.atleast_1d(np.asarray(x_raw, dtype=float)), y_grid, values)


def quantile_matrix(draws: PosteriorDraws, x_raw, probs) -> np.ndarray:
    """Raw-scale quantiles, shape (n_draws, len(probs))."""
    x_std = draws.x_to_std(x_raw)
    probs = np.atleast_1d(np.asarray(probs, dtype=float))
    out = np.empty((len(draws), probs.shape[0]))
    for d, rec in enumerate(draws):
        out[d] = quantile_one_draw(rec, x_std, probs, draws.y_map)
    return out


def _pooled_mixture(draws: PosteriorDraws, x_std):
    ws, mus, sds = [], [], []
    for rec in draws:
        w, mu, sd = draw_mixture(rec, x_std)
        ws.append(w)
        mus.append(mu)
        sds.append(sd)
    w = np.concatenate(ws) / len(draws)
    return w, np.concatenate(mus), np.concatenate(sds)


def posterior_mean_density(draws: PosteriorDraws, x_raw, y_grid) -> np.ndarray:
    """Average of the per-draw densities at raw ``x_raw``."""
    return posterior_mean_density_many(draws, np.atleast_2d(np.asarray(x_raw, dtype=float)), y_grid)[0]


def posterior_mean_density_many(draws: PosteriorDraws, x_raw, y_grid) -> np.ndarray:
    """Posterior mean densities for each row of ``x_raw``, shape (n_x, grid)."""
    if len(draws) == 0:
        raise ValueError('no draws')
    x_raw = np.asarray(x_raw, dtype=float)
    if x_raw.ndim == 1:
        x_raw = x_raw[:, None]
    ys = np.ascontiguousarray(draws.y_map.to_std(np.asarray(y_grid, dtype=float)))
    out = np.empty((x_raw.shape[0], ys.shape[0]))
    for j in range(x_raw.shape[0]):
        w, mu, sd = _pooled_mixture(draws, draws.x_to_std(x_raw[j]))
        _mixture_pdf(w, mu, sd, ys, out[j])
    return out / draws.y_map.scale


# ---------------------------------------------------------------------------
# summaries


def summarize(values, level: float = 0.95) -> tuple[np.ndarray, CredibleBand]:
    """Pointwise posterior mean and equal-tailed band across draws (rows)."""
    if isinstance(values, DensityGrid):
        values = values.values
    values = np.asarray(values, dtype=float)
    if values.ndim != 2 or values.shape[0] == 0:
        raise ValueError('need a non-empty (draws x points) array')
    if not 0 <= level < 1:
        raise ValueError('level must lie in [0, 1)')
    tail = 0.5 * (1.0 - level)
    lower, upper = np.quantile(values, [tail, 1.0 - tail], axis=0)
    mean = values.mean(axis=0)
    # floating error in quantile interpolation must not break lower <= mean <= upper
    return mean, CredibleBand(np.minimum(lower, mean), np.maximum(upper, mean), level)


def _trapezoid_weights(y):
    dy = np.diff(y)
    w = np.zeros_like(y)
    w[:-1] += 0.5 * dy
    w[1:] += 0.5 * dy
    return w


def _hdr_threshold(y, dens, level):
    y = np.asarray(y, dtype=float)
    dens = np.asarray(dens, dtype=float)
    if y.shape != dens.shape or y.ndim != 1 or y.shape[0] < 2:
        raise ValueError('grid and density must be 1-d arrays of equal length >= 2')
    if not 0 < level < 1:
        raise ValueError('level must lie in (0, 1)')
    mass = _trapezoid_weights(y) * dens
    total = mass.sum()
    if total < level:
        raise ValueError(
            f'grid holds only {total:.4f} of the density mass, less than the level {level}; widen the grid'
        )
    order = np.argsort(-dens, kind='stable')
    cum = np.cumsum(mass[order])
    k = int(np.searchsorted(cum, level))
    if k == 0:
        return float(dens[order[0]])
    # interpolate between the last two sorted levels so the kept mass is `level`
    frac = (level - cum[k - 1]) / (cum[k] - cum[k - 1]) if cum[k] > cum[k - 1] else 1.0
    return float(dens[order[k - 1]] + frac * (dens[order[k]] - dens[order[k - 1]]))


def hdr_mask(y_grid, dens, level: float) -> np.ndarray:
    """Grid points inside the highest-density region of the given mass."""
    c = _hdr_threshold(y_grid, dens, level)
    return np.asarray(dens) >= c


def hdr_interval(y_grid, dens, level: float = 0.95) -> list[tuple[float, float]]:
    """Highest-density region as disjoint intervals.

    The threshold c is chosen so that {y : p(y) >= c} holds ``level`` of the
    mass; interval ends are placed where the linearly interpolated density
    crosses c.
    """
    y = np.asarray(y_grid, dtype=float)
    d = np.asarray(dens, dtype=float)
    c = _hdr_threshold(y, d, level)
    inside = d >= c
    out = []
    j = 0
    n = y.shape[0]

    def cross(i0, i1):
        if d[i1] == d[i0]:
            return 0.5 * (y[i0] + y[i1])
        t = (c - d[i0]) / (d[i1] - d[i0])
        return float(y[i0] + t * (y[i1] - y[i0]))

    while j < n:
        if not inside[j]:
            j += 1
            continue
        start = j
        while j + 1 < n and inside[j + 1]:
            j += 1
        lo = y[0] if start == 0 else cross(start - 1, start)
        hi = y[-1] if j == n - 1 else cross(j, j + 1)
        out.append((float(lo), float(hi)))
        j += 1
    return out


# ---------------------------------------------------------------------------
# applied functionals


def returns_functional(
    draws: PosteriorDraws, x1, x2, s: float, *, level: float = 0.95, exponentiate: bool = False
) -> ReturnsSummary:
    """Percentage change 100 (Q(s|x2) - Q(s|x1)) / Q(s|x1), per draw.

    With ``exponentiate`` the response is taken to be on the log scale and
    quantiles are exponentiated first (quantiles commute with monotone maps).
    """
    q1 = quantile_matrix(draws, x1, [s])[:, 0]
    q2 = quantile_matrix(draws, x2, [s])[:, 0]
    if exponentiate:
        q1, q2 = np.exp(q1), np.exp(q2)
    if np.any(q1 <= 0):
        raise ValueError('Q(s | x1) must be positive for a percentage change')
    per = 100.0 * (q2 - q1) / q1
    tail = 0.5 * (1 - level)
    lo, hi = np.quantile(per, [tail, 1 - tail])
    return ReturnsSummary(per, float(per.mean()), float(lo), float(hi), level)


def growth_quantile_curves(models: Sequence[PosteriorDraws], history, s_grid) -> np.ndarray:
    """Projected scores when a student sustains quantile growth s every period.

    ``models[t]`` predicts the period-t score from the covariates
    ``history`` followed by the scores of periods 0..t-1. For each draw
    index and each s, scores are projected forward by taking Q(s | ...) of
    each model in turn, feeding projections back in as covariates.

    Returns an array of shape (n_draws, len(s_grid), len(models)) on the raw
    score scale, with n_draws the smallest draw count among the models.
    """
    history = np.atleast_1d(np.asarray(history, dtype=float))
    s_grid = np.atleast_1d(np.asarray(s_grid, dtype=float))
    n_draws = min(len(mdl) for mdl in models)
    out = np.empty((n_draws, s_grid.shape[0], len(models)))
    for d in range(n_draws):
        for j, s in enumerate(s_grid):
            covars = list(history)
            for t, mdl in enumerate(models):
                x_std = mdl.x_to_std(np.array(covars))
                q = quantile_one_draw(mdl[d], x_std, float(s), mdl.y_map)
                out[d, j, t] = q
                covars.append(q)
    return out
