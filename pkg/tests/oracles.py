"""Independent numerical references shared by the unit and acceptance tests."""

import math

import numpy as np
from scipy import integrate


def log_quad(logf, lo, hi, points=None):
    """log of the integral of exp(logf) over (lo, hi), shifted for stability.

    ``logf`` must accept numpy arrays.
    """
    grid = np.linspace(lo, hi, 4001)
    with np.errstate(over='ignore', invalid='ignore'):
        top = float(np.nanmax(logf(grid)))
    val, _ = integrate.quad(
        lambda t: math.exp(float(logf(np.array(t))) - top), lo, hi,
        epsabs=0, epsrel=1e-13, limit=500, points=points,
    )
    return top + math.log(val)


def mean_leaf_log_marginal(r, w, sigma_mu):
    """log of int prod_i N(r_i; mu, 1/w_i) N(mu; 0, sigma_mu^2) dmu by quadrature."""
    r = np.asarray(r, dtype=float)
    w = np.asarray(w, dtype=float)
    if r.size == 0:
        return 0.0
    const = 0.5 * float(np.sum(np.log(w / (2 * np.pi)))) - 0.5 * math.log(2 * math.pi * sigma_mu**2)
    sw, swr, swr2 = float(w.sum()), float(w @ r), float(w @ (r * r))

    def logf(mu):
        return const - 0.5 * (swr2 - 2 * mu * swr + mu * mu * sw) - 0.5 * mu * mu / sigma_mu**2

    post_var = 1 / (1 / sigma_mu**2 + sw)
    centre = post_var * swr
    half = 40 * math.sqrt(post_var)
    return log_quad(logf, centre - half, centre + half, points=[centre])


def variance_leaf_log_marginal(r, sigma0_sq, a, b):
    """Integrate the variance-leaf likelihood over t = log tau.

    The prior on tau is the equal mixture of Gamma(a, b) and
    InverseGamma(a, b). Returns (log total, log IG part, log Gamma part).
    """
    r = np.asarray(r, dtype=float)
    n = r.size
    r2 = float(r @ r) / sigma0_sq
    base = -0.5 * n * math.log(2 * math.pi * sigma0_sq) + a * math.log(b) - math.lgamma(a) + math.log(0.5)

    # likelihood in tau times prior density times the Jacobian tau
    def lg(t):
        return base - 0.5 * n * t - 0.5 * r2 * np.exp(-t) + a * t - b * np.exp(t)

    def lig(t):
        return base - 0.5 * n * t - 0.5 * r2 * np.exp(-t) - a * t - b * np.exp(-t)

    grid = np.linspace(-60, 60, 24001)
    lo, hi = np.inf, -np.inf
    with np.errstate(over='ignore', invalid='ignore'):
        for f in (lg, lig):
            vals = np.nan_to_num(f(grid), nan=-np.inf, neginf=-np.inf)
            keep = grid[vals > vals.max() - 80]
            lo, hi = min(lo, keep[0]), max(hi, keep[-1])
    log_g = log_quad(lg, lo, hi)
    log_ig = log_quad(lig, lo, hi)
    return float(np.logaddexp(log_g, log_ig)), log_ig, log_g
