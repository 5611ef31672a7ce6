"""Simulation designs, accuracy metrics and the sampler self-check.

The base design draws x ~ U(0, 1) and

    y = f0(x) + eps,   f0(x) = 5 e^{15(x - .5)} / (1 + e^{15(x - .5)}) - 4x,

where eps is N(2x - 0.6, 0.3^2) with probability lambda(x) = exp(-10 (x - .8)^2)
and otherwise log G with G ~ Gamma(0.5 + x^2, 1). Variants add 14 correlated
irrelevant covariates, draw x from a mixture of uniforms with a sparse middle,
or replace f0 by a (x - 0.5)^2.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy import special, stats

from . import _kernels as K
from .predict import CredibleBand, hdr_mask, posterior_mean_density_many
from .priors import BartHyperParams, Sigma0Spec, VarianceHyperParams
from .sampler import ChainConfig, ModelState, Sampler

__all__ = [
    'DGP_VARIANTS',
    'DgpSpec',
    'f0',
    'mixing_weight',
    'dgp_sample',
    'dgp_true_density',
    'dgp_true_quantiles',
    'wasserstein1',
    'band_coverage',
    'predictive_coverage',
    'GewekeConfig',
    'GewekeResult',
    'geweke_harness',
    'write_csv',
]

DGP_VARIANTS = ('base', 'irrelevant14', 'gapX', 'quadratic')
N_IRRELEVANT = 14
IRRELEVANT_CORR = 0.3


@dataclass(frozen=True)
class DgpSpec:
    variant: str = 'base'
    n: int = 800
    seed: int = 0
    a: float = 0.0

    def __post_init__(self):
        if self.variant not in DGP_VARIANTS:
            raise ValueError(f'variant must be one of {DGP_VARIANTS}, got {self.variant!r}')
        if self.n < 1:
            raise ValueError('n must be >= 1')
        if self.variant == 'quadratic' and self.a < 0:
            raise ValueError('a must be non-negative')

    @property
    def n_covariates(self) -> int:
        return 1 + N_IRRELEVANT if self.variant == 'irrelevant14' else 1


def f0(x, spec: DgpSpec | None = None):
    """True mean function of the relevant covariate."""
    x = np.asarray(x, dtype=float)
    if spec is not None and spec.variant == 'quadratic':
        return spec.a * (x - 0.5) ** 2
    return 5.0 * special.expit(15.0 * (x - 0.5)) - 4.0 * x


def mixing_weight(x):
    """Probability that the error comes from the normal component."""
    x = np.asarray(x, dtype=float)
    return np.exp(-10.0 * (x - 0.8) ** 2)


def _sample_errors(rng: np.random.Generator, x: np.ndarray) -> np.ndarray:
    n = x.shape[0]
    normal = rng.random(n) < mixing_weight(x)
    shape = 0.5 + x * x
    # log G for small shapes: G = G' U^(1/k) with G' ~ Gamma(k + 1)
    log_g = np.log(rng.gamma(shape + 1.0)) + np.log(rng.random(n)) / shape
    gauss = 2.0 * x - 0.6 + 0.3 * rng.standard_normal(n)
    return np.where(normal, gauss, log_g)


def _irrelevant(rng: np.random.Generator, n: int) -> np.ndarray:
    # Gaussian copula: rho_g = 2 sin(pi r / 6) gives uniforms with Pearson correlation r
    rho = 2.0 * math.sin(math.pi * IRRELEVANT_CORR / 6.0)
    cov = np.full((N_IRRELEVANT, N_IRRELEVANT), rho)
    np.fill_diagonal(cov, 1.0)
    z = rng.standard_normal((n, N_IRRELEVANT)) @ np.linalg.cholesky(cov).T
    return special.ndtr(z)


def _gap_x(rng: np.random.Generator, n: int) -> np.ndarray:
    comp = rng.choice(3, size=n, p=[0.475, 0.05, 0.475])
    lo = np.array([0.0, 0.4, 0.6])[comp]
    hi = np.array([0.4, 0.6, 1.0])[comp]
    return lo + (hi - lo) * rng.random(n)


def dgp_sample(spec: DgpSpec, rng: np.random.Generator | None = None):
    """Draw ``(x, y)``; x has shape (n, p) with the relevant covariate first."""
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    n = spec.n
    x1 = _gap_x(rng, n) if spec.variant == 'gapX' else rng.random(n)
    y = f0(x1, spec) + _sample_errors(rng, x1)
    if spec.variant == 'irrelevant14':
        x = np.column_stack([x1, _irrelevant(rng, n)])
    else:
        x = x1[:, None]
    return x, y


def dgp_true_density(x, y_grid, spec: DgpSpec | None = None) -> np.ndarray:
    """True p(y | x) on ``y_grid``; ``x`` is the relevant covariate value."""
    x = float(np.atleast_1d(x)[0])
    y = np.asarray(y_grid, dtype=float)
    z = y - float(f0(x, spec))
    lam = float(mixing_weight(x))
    k = 0.5 + x * x
    normal = stats.norm.pdf(z, 2.0 * x - 0.6, 0.3)
    with np.errstate(over='ignore'):
        log_gamma = np.exp(k * z - np.exp(z) - special.gammaln(k))
    return lam * normal + (1.0 - lam) * log_gamma


def dgp_true_quantiles(x, probs, spec: DgpSpec | None = None) -> np.ndarray:
    """Quantiles of the true conditional law, by root-finding on its CDF."""
    from scipy import optimize

    x = float(np.atleast_1d(x)[0])
    lam = float(mixing_weight(x))
    k = 0.5 + x * x
    shift = float(f0(x, spec))

    def cdf(y):
        z = y - shift
        return lam * stats.norm.cdf(z, 2 * x - 0.6, 0.3) + (1 - lam) * special.gammainc(k, math.exp(min(z, 700.0)))

    out = []
    for s in np.atleast_1d(probs):
        out.append(optimize.brentq(lambda y: cdf(y) - s, shift - 60.0, shift + 10.0, xtol=1e-12))
    return np.array(out)


def wasserstein1(p, q, y_grid) -> float:
    """W1 between two densities on a common grid: integral of |F_p - F_q|.

    Both densities must hold unit trapezoid mass within 1% (otherwise the
    grid is too narrow to compare them); each is renormalized before
    integrating.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    y = np.asarray(y_grid, dtype=float)
    if not (p.shape == q.shape == y.shape) or y.ndim != 1:
        raise ValueError(f'grid mismatch: {p.shape}, {q.shape}, {y.shape}')
    dy = np.diff(y)

    def cdf(d):
        c = np.concatenate([[0.0], np.cumsum(0.5 * (d[1:] + d[:-1]) * dy)])
        if not abs(c[-1] - 1.0) <= 0.01:
            raise ValueError(f'density holds mass {c[-1]:.4f} on the grid; need 1 within 1%')
        return c / c[-1]

    diff = np.abs(cdf(p) - cdf(q))
    return float(np.sum(0.5 * (diff[1:] + diff[:-1]) * dy))


def band_coverage(band: CredibleBand, truth, y_grid, hdr_level: float = 0.95) -> bool:
    """True iff the band contains the truth at every grid point in the truth's HDR."""
    truth = np.asarray(truth, dtype=float)
    inside = hdr_mask(y_grid, truth, hdr_level)
    lower = np.asarray(band.lower)
    upper = np.asarray(band.upper)
    return bool(np.all((lower[inside] <= truth[inside]) & (truth[inside] <= upper[inside])))


def predictive_coverage(draws, x_test, y_test, level: float = 0.95, *, grid=None, max_draws: int = 100) -> float:
    """Fraction of test responses inside the HDR of the posterior mean density.

    ``x_test`` (raw scale, shape (n,) or (n, p)) and ``y_test`` (raw scale)
    are held-out points. The posterior mean density at each test x is the
    mixture over an evenly thinned subset of at most ``max_draws`` draws.
    """
    x_test = np.asarray(x_test, dtype=float)
    if x_test.ndim == 1:
        x_test = x_test[:, None]
    y_test = np.asarray(y_test, dtype=float)
    if grid is None:
        lo, hi = y_test.min(), y_test.max()
        pad = 0.5 * (hi - lo)
        grid = np.linspace(lo - pad, hi + pad, 512)
    sub = draws.thinned(max_draws)
    dens = posterior_mean_density_many(sub, x_test, grid)
    hits = 0
    for j in range(len(y_test)):
        mask = hdr_mask(grid, dens[j], level)
        hits += int(_inside_mask(grid, mask, dens[j], y_test[j]))
    return hits / len(y_test)


def _inside_mask(grid, mask, dens, y) -> bool:
    if y < grid[0] or y > grid[-1]:
        return False
    k = int(np.searchsorted(grid, y))
    if k == 0:
        return bool(mask[0])
    # the HDR is {p >= c}; interpolate p and c is the smallest masked value
    c = dens[mask].min()
    t = (y - grid[k - 1]) / (grid[k] - grid[k - 1])
    return bool((1 - t) * dens[k - 1] + t * dens[k] >= c)


def write_csv(path, header, rows) -> None:
    with open(path, 'w', newline='') as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow(row)


# ---------------------------------------------------------------------------
# Geweke self-check


@dataclass
class GewekeConfig:
    """Reduced model for the joint-distribution check.

    ``sweeps_per_round = 0`` swaps the MCMC transition for an independent
    prior draw, giving a baseline where both sides sample the same law by
    construction. ``log_bias`` is added to every birth log acceptance ratio.
    """

    n: int = 20
    m: int = 3
    m_v: int = 2
    variant: str = 'FULL'
    rounds: int = 10_000
    seed: int = 0
    sigma0_sq: float = 0.25
    k: float = 2.0
    min_leaf: int = 5
    latent_update: str = 'gibbs'
    log_bias: float = 0.0
    sweeps_per_round: int = 1
    batches: int = 50
    nu0: float = 5.0
    xi0: float = 0.25


@dataclass
class GewekeResult:
    names: list[str]
    z: np.ndarray
    prior_mean: np.ndarray
    chain_mean: np.ndarray
    prior_attempts: float = 0.0
    extra: dict = field(default_factory=dict)

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.names, self.z.tolist()))

    def max_abs_z(self) -> float:
        return float(np.max(np.abs(self.z)))


_PROBES = np.array([[0.25, 0.25], [0.75, 0.75], [0.25, 0.75], [0.75, 0.25]])


@numba.njit(cache=True)
def _geweke_stats(FM, FV, X, y, sigma0_sq, probes, out):
    n = X.shape[0]
    latent = X.shape[1] - 1
    pt = np.empty(X.shape[1])
    j = 0
    for r in range(probes.shape[0]):
        pt[0] = probes[r, 0]
        pt[latent] = probes[r, 1]
        out[j] = K.forest_eval(FM, pt)
        out[j + 1] = K.forest_eval(FV, pt)
        j += 2
    for F in (FM, FV):
        leaves = 0
        deepest = 0
        usplits = 0
        for h in range(F.n_nodes.shape[0]):
            for k in range(F.n_nodes[h]):
                if F.axis[h, k] < 0:
                    leaves += 1
                    if F.depth[h, k] > deepest:
                        deepest = F.depth[h, k]
            usplits += F.n_usplit[h]
        out[j] = leaves
        out[j + 1] = deepest
        out[j + 2] = usplits
        j += 3
    su = 0.0
    sy = 0.0
    syy = 0.0
    sscale = 0.0
    for i in range(n):
        su += X[i, latent]
        sy += y[i]
        syy += y[i] * y[i]
        sscale += math.sqrt(sigma0_sq * math.exp(K.forest_eval(FV, X[i])))
    out[j] = su / n
    out[j + 1] = sy / n
    out[j + 2] = syy / n
    out[j + 3] = sscale / n
    out[j + 4] = math.log(sigma0_sq)


_STAT_NAMES = (
    [f'{w}({x:g},{u:g})' for x, u in _PROBES for w in ('f', 'v')]
    + ['mean_leaves', 'mean_max_depth', 'mean_u_splits', 'var_leaves', 'var_max_depth', 'var_u_splits']
    + ['mean_u', 'mean_y', 'mean_y2', 'mean_sigma', 'log_sigma0_sq']
)


def _geweke_state(cfg: GewekeConfig, rng: np.random.Generator) -> ModelState:
    x = (np.arange(cfg.n) + 0.5) / cfg.n
    hp = BartHyperParams(m=cfg.m, k=cfg.k, min_leaf=cfg.min_leaf)
    vhp = VarianceHyperParams(m_v=cfg.m_v)
    if cfg.variant.upper() == 'L':
        s0 = Sigma0Spec(mode='inverse-gamma', nu0=cfg.nu0, xi0=cfg.xi0)
    else:
        s0 = Sigma0Spec(mode='fixed', fixed_value=cfg.sigma0_sq)
    config = ChainConfig(n_iter=0, n_burn=0, hp=hp, vhp=vhp, s0=s0, variant=cfg.variant, latent_update=cfg.latent_update)
    return ModelState(x[:, None], np.zeros(cfg.n), config, s0.fixed_value, rng)


def _draw_prior(state: ModelState, rng: np.random.Generator) -> int:
    hp, vhp = state.hp, state.vhp
    attempts = K.prior_draw(
        state.mean_forest, state.var_forest, state.X, state.grid, state.grid_len,
        state.mean_latent_ok, state.var_latent_ok, hp.alpha, hp.beta, vhp.alpha, vhp.beta,
        hp.min_leaf, hp.sigma_mu, vhp.a, vhp.b, state.config.use_latent, rng, state.lo, state.hi,
    )
    s0 = state.config.s0
    if state.variant == 'L':
        state.sigma0_sq = float(0.5 * s0.nu0 * s0.xi0 / rng.gamma(0.5 * s0.nu0))
    state.refresh_fit()
    return attempts


def _draw_y(state: ModelState, rng: np.random.Generator) -> None:
    state.refresh_fit()
    sd = np.sqrt(state.sigma0_sq * np.exp(state.vsum))
    state.y[:] = state.fmean + sd * rng.standard_normal(state.n)


def _batch_se(samples: np.ndarray, batches: int) -> np.ndarray:
    n = samples.shape[0] // batches * batches
    means = samples[:n].reshape(batches, -1, samples.shape[1]).mean(axis=1)
    return means.std(axis=0, ddof=1) / math.sqrt(batches)


def geweke_harness(cfg: GewekeConfig) -> GewekeResult:
    """Compare prior-predictive draws with a data-resampling MCMC chain.

    Side one draws (parameters, data) independently from the joint prior.
    Side two alternates sampler sweeps with fresh data given the current
    parameters. If the sampler leaves the posterior invariant both sides
    share one stationary law, so each tracked statistic gets a z-score
    (independent standard error for side one, batch means for side two).
    """
    if cfg.n > 30 or cfg.m > 5 or cfg.m_v > 5:
        raise ValueError('the Geweke check is meant for small models (n <= 30, m, m_v <= 5)')
    root = np.random.SeedSequence(cfg.seed)
    rng_a, rng_b = (np.random.default_rng(s) for s in root.spawn(2))
    probes = _PROBES
    n_stats = len(_STAT_NAMES)
    out = np.empty(n_stats)

    state = _geweke_state(cfg, rng_a)
    prior = np.empty((cfg.rounds, n_stats))
    attempts = 0
    for r in range(cfg.rounds):
        attempts += _draw_prior(state, rng_a)
        _draw_y(state, rng_a)
        _geweke_stats(state.mean_forest, state.var_forest, state.X, state.y, state.sigma0_sq, probes, out)
        prior[r] = out

    state = _geweke_state(cfg, rng_b)
    _draw_prior(state, rng_b)
    _draw_y(state, rng_b)
    sampler = Sampler(state, rng_b, log_bias=cfg.log_bias)
    chain = np.empty((cfg.rounds, n_stats))
    for r in range(cfg.rounds):
        if cfg.sweeps_per_round == 0:
            _draw_prior(state, rng_b)
        for _ in range(cfg.sweeps_per_round):
            sampler.sweep()
        _draw_y(state, rng_b)
        _geweke_stats(state.mean_forest, state.var_forest, state.X, state.y, state.sigma0_sq, probes, out)
        chain[r] = out

    keep = np.ones(n_stats, dtype=bool)
    if cfg.variant.upper() != 'FULL':
        keep &= ~np.array([name.startswith('var_u') for name in _STAT_NAMES])
    if cfg.variant.upper() == 'L':
        keep &= ~np.array([name.startswith(('v(', 'var_')) for name in _STAT_NAMES])
    else:
        keep &= np.array([name != 'log_sigma0_sq' for name in _STAT_NAMES])
    prior, chain = prior[:, keep], chain[:, keep]
    names = [nm for nm, k in zip(_STAT_NAMES, keep) if k]
    se_prior = prior.std(axis=0, ddof=1) / math.sqrt(cfg.rounds)
    se_chain = _batch_se(chain, cfg.batches)
    se = np.sqrt(se_prior**2 + se_chain**2)
    diff = prior.mean(axis=0) - chain.mean(axis=0)
    z = np.divide(diff, se, out=np.zeros_like(diff), where=se > 0)
    return GewekeResult(
        names=names,
        z=z,
        prior_mean=prior.mean(axis=0),
        chain_mean=chain.mean(axis=0),
        prior_attempts=attempts / cfg.rounds,
        extra={'acceptance': sampler.stats.acceptance()},
    )
