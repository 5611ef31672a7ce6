"""MCMC for BART, heteroscedastic BART and latent-variable density regression.

The model is ``y = f(x, u) + exp(v(x, u) / 2) * sigma0 * eps`` with ``f`` a
sum of mean trees, ``v`` a sum of log-variance trees and ``u ~ U(0, 1)`` a
latent coordinate per observation. Three variants:

``L``
    No variance trees; sigma0**2 gets an inverse-gamma prior and is updated.
``LH``
    Variance trees split on x only, so the bandwidth depends on x alone.
``FULL``
    Variance trees may split on u as well.

A sweep updates all mean trees, then all variance trees (not under ``L``),
then sigma0**2 (``L`` only), then every latent.
"""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .draws import AffineMap, DrawRecord, PosteriorDraws
from .priors import BartHyperParams, Sigma0Spec, VarianceHyperParams
from .tree_core import Ensemble

__all__ = [
    'VARIANTS',
    'ChainConfig',
    'MoveStats',
    'ModelState',
    'Sampler',
    'default_sigma0',
    'mean_tree_update',
    'variance_tree_update',
    'latent_update_gibbs',
    'latent_update_slice',
    'sigma0_update',
    'run_chain',
    'mean_leaf_log_marginal',
    'variance_leaf_log_marginal',
    'variance_leaf_mixture_weights',
]

log = logging.getLogger(__name__)

VARIANTS = ('L', 'LH', 'FULL')


@dataclass
class ChainConfig:
    """Run settings. ``n_iter`` counts post-burn-in sweeps, of which every
    ``thin``-th is kept. ``s0=None`` picks the default sigma0 handling for
    the variant (see :func:`default_sigma0`).
    """

    n_iter: int = 1000
    n_burn: int = 1000
    thin: int = 1
    seed: int = 0
    hp: BartHyperParams = field(default_factory=BartHyperParams)
    vhp: VarianceHyperParams = field(default_factory=VarianceHyperParams)
    s0: Sigma0Spec | None = None
    latent_update: str = 'gibbs'
    variant: str = 'FULL'
    use_latent: bool = True
    save_latents: bool = False

    def __post_init__(self):
        if self.n_iter < 0 or self.n_burn < 0:
            raise ValueError('n_iter and n_burn must be non-negative')
        if self.thin < 1:
            raise ValueError('thin must be >= 1')
        if self.latent_update not in ('gibbs', 'slice'):
            raise ValueError(f"latent_update must be 'gibbs' or 'slice', got {self.latent_update!r}")
        self.variant = self.variant.upper()
        if self.variant not in VARIANTS:
            raise ValueError(f'variant must be one of {VARIANTS}, got {self.variant!r}')
        if self.s0 is not None:
            if self.variant == 'L' and self.s0.mode != 'inverse-gamma':
                raise ValueError('variant L needs an inverse-gamma sigma0 spec')
            if self.variant != 'L' and self.s0.mode != 'fixed':
                raise ValueError(f'variant {self.variant} uses a fixed sigma0')

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class MoveStats:
    """Proposal and acceptance counts per ensemble, plus wall time per update type."""

    mean_birth: list[int] = field(default_factory=lambda: [0, 0])
    mean_death: list[int] = field(default_factory=lambda: [0, 0])
    var_birth: list[int] = field(default_factory=lambda: [0, 0])
    var_death: list[int] = field(default_factory=lambda: [0, 0])
    degenerate_leaves: int = 0
    seconds: dict[str, float] = field(
        default_factory=lambda: {'mean': 0.0, 'variance': 0.0, 'sigma0': 0.0, 'latent': 0.0}
    )

    def add(self, kind: str, counts: np.ndarray) -> None:
        birth, death = (self.mean_birth, self.mean_death) if kind == 'mean' else (self.var_birth, self.var_death)
        birth[0] += int(counts[0, 0])
        birth[1] += int(counts[0, 1])
        death[0] += int(counts[1, 0])
        death[1] += int(counts[1, 1])

    def acceptance(self) -> dict[str, float]:
        out = {}
        for name in ('mean_birth', 'mean_death', 'var_birth', 'var_death'):
            prop, acc = getattr(self, name)
            out[name] = acc / prop if prop else float('nan')
        return out


def default_sigma0(x: np.ndarray, y: np.ndarray) -> float:
    """Half the standard deviation of least-squares residuals of y on x."""
    design = np.column_stack([np.ones(len(y)), x])
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - design @ coef
    return 0.5 * float(np.std(resid, ddof=1))


def _cut_grid(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-axis admissible x cutpoints: observed values above the minimum."""
    p = x.shape[1]
    grids = [np.unique(x[:, j])[1:] for j in range(p)]
    width = max([len(g) for g in grids] + [1])
    grid = np.full((p, width), np.inf)
    lens = np.zeros(p, dtype=np.int64)
    for j, g in enumerate(grids):
        grid[j, : len(g)] = g
        lens[j] = len(g)
    return grid, lens


class ModelState:
    """Complete sampler state on the standardized scale.

    Parameters
    ----------
    x : array, shape (n, p)
        Covariates, conventionally scaled to [0, 1].
    y : array, shape (n,)
        Response, conventionally scaled to [-0.5, 0.5].
    config : ChainConfig
    sigma0_sq : float
        Initial (or fixed) sigma0**2.
    rng : numpy Generator
        Draws the initial latents.
    """

    def __init__(self, x, y, config: ChainConfig, sigma0_sq: float, rng: np.random.Generator):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        y = np.ascontiguousarray(y, dtype=np.float64)
        n, p = x.shape
        if y.shape != (n,):
            raise ValueError(f'y has shape {y.shape}, expected ({n},)')
        self.config = config
        self.variant = config.variant
        self.hp = config.hp
        self.vhp = config.vhp
        min_leaf = self.hp.min_leaf
        if n < 2 * min_leaf:
            raise ValueError(f'need at least {2 * min_leaf} observations, got {n}')
        self.n, self.p = n, p
        self.y = y
        self.X = np.empty((n, p + 1))
        self.X[:, :p] = x
        self.X[:, p] = rng.random(n) if config.use_latent else 0.5
        self.grid, self.grid_len = _cut_grid(x)
        self.cap = 2 * (n // min_leaf) + 1
        m_v = 0 if self.variant == 'L' else self.vhp.m_v
        self.mean_forest = K.new_forest(self.hp.m, n, self.cap)
        self.var_forest = K.new_forest(m_v, n, self.cap)
        self.mean_latent_ok = bool(config.use_latent)
        self.var_latent_ok = bool(config.use_latent and self.variant == 'FULL')
        self.sigma0_sq = float(sigma0_sq)
        self.fmean = np.zeros(n)
        self.vsum = np.zeros(n)
        self._alloc_workspace()

    def _alloc_workspace(self):
        n, cap = self.n, self.cap
        width = max(n, cap)
        self.work_f = np.zeros((5, width))
        self.scratch_i = np.zeros(3 * cap, dtype=np.int64)
        self.lo = np.zeros(self.p + 1)
        self.hi = np.zeros(self.p + 1)
        n_trees = self.mean_forest.n_nodes.shape[0] + self.var_forest.n_nodes.shape[0]
        events = max(n_trees * cap, cap) + 1
        self.bufs_f = np.zeros((9, events))
        self.bufs_i = np.zeros((1, events), dtype=np.int64)
        self.stack = np.zeros((cap + 1, 3))

    @property
    def latents(self) -> np.ndarray:
        return self.X[:, -1].copy()

    def mean_ensemble(self) -> Ensemble:
        return Ensemble(*K.flatten_preorder(self.mean_forest), kind='mean')

    def var_ensemble(self) -> Ensemble:
        return Ensemble(*K.flatten_preorder(self.var_forest), kind='variance')

    def refresh_fit(self) -> None:
        """Recompute the cached per-observation sums from scratch."""
        K.recompute_fit(self.mean_forest, self.fmean)
        K.recompute_fit(self.var_forest, self.vsum)

    def min_occupancy(self) -> int:
        """Smallest leaf count over all trees of both ensembles."""
        out = self.n
        for F in (self.mean_forest, self.var_forest):
            for h in range(F.n_nodes.shape[0]):
                leaves = F.axis[h, : F.n_nodes[h]] < 0
                out = min(out, int(F.count[h, : F.n_nodes[h]][leaves].min()))
        return out

    def copy(self) -> ModelState:
        new = object.__new__(ModelState)
        new.__dict__.update(self.__dict__)
        new.X = self.X.copy()
        new.fmean = self.fmean.copy()
        new.vsum = self.vsum.copy()
        new.mean_forest = K.copy_forest(self.mean_forest)
        new.var_forest = K.copy_forest(self.var_forest)
        new._alloc_workspace()
        return new


# ---------------------------------------------------------------------------
# single updates


def mean_tree_update(state: ModelState, h: int, rng: np.random.Generator, *, log_bias: float = 0.0) -> bool:
    """Birth/death move on mean tree ``h`` followed by fresh leaf means.

    ``log_bias`` is added to the log acceptance ratio of births; it exists
    only to check that a broken sampler is detectable.
    """
    hp = state.hp
    n = state.n
    _, accepted = K.update_mean_tree(
        state.mean_forest, h, state.X, state.y, state.fmean, state.vsum, state.sigma0_sq,
        state.grid, state.grid_len, state.mean_latent_ok, hp.alpha, hp.beta, hp.min_leaf, hp.sigma_mu,
        rng, log_bias, state.work_f[0, :n], state.work_f[1, :n], state.work_f[2, :n],
        state.work_f[3], state.work_f[4], state.scratch_i, state.lo, state.hi,
    )
    return bool(accepted)


def variance_tree_update(state: ModelState, h: int, rng: np.random.Generator, *, log_bias: float = 0.0) -> bool:
    """Birth/death move on variance tree ``h`` followed by fresh log-scales."""
    if state.variant == 'L':
        raise RuntimeError('variant L has no variance trees')
    vhp = state.vhp
    hp = state.hp
    n = state.n
    _, accepted, bad = K.update_var_tree(
        state.var_forest, h, state.X, state.y, state.fmean, state.vsum, state.sigma0_sq,
        state.grid, state.grid_len, state.var_latent_ok, vhp.alpha, vhp.beta, hp.min_leaf, vhp.a, vhp.b,
        rng, log_bias, state.work_f[0, :n], state.work_f[1, :n], state.work_f[2, :n],
        state.work_f[3], state.work_f[4], state.scratch_i, state.lo, state.hi,
    )
    if bad:
        log.warning('variance tree %d: %d leaves with zero residual sum; drew them from the prior', h, bad)
    return bool(accepted)


def latent_update_gibbs(state: ModelState, i: int, rng: np.random.Generator) -> float:
    """Exact draw of u_i from its piecewise-constant full conditional."""
    return float(K.latent_step_gibbs(
        state.mean_forest, state.var_forest, state.X, state.y, i, state.fmean, state.vsum,
        state.sigma0_sq, state.hp.min_leaf, rng, state.bufs_f, state.bufs_i, state.stack,
    ))


def latent_update_slice(state: ModelState, i: int, rng: np.random.Generator) -> float:
    """Slice-sampling update of u_i, shrinking within the feasible interval."""
    return float(K.latent_step_slice(
        state.mean_forest, state.var_forest, state.X, state.y, i, state.fmean, state.vsum,
        state.sigma0_sq, state.hp.min_leaf, rng,
    ))


def latent_conditional(state: ModelState, i: int) -> tuple[np.ndarray, np.ndarray]:
    """Breakpoints and normalized interval probabilities of u_i's full conditional."""
    n_int = K.gibbs_log_weights(
        state.mean_forest, state.var_forest, state.X, state.y, i, state.fmean, state.vsum,
        state.sigma0_sq, state.hp.min_leaf, state.bufs_f, state.bufs_i, state.stack,
    )
    lo = state.bufs_f[4, :n_int].copy()
    hi = state.bufs_f[5, :n_int].copy()
    lw = state.bufs_f[8, :n_int].copy()
    w = np.exp(lw - lw.max())
    return np.append(lo, hi[-1]), w / w.sum()


def sigma0_update(state: ModelState, rng: np.random.Generator) -> float:
    """Conjugate inverse-gamma draw of sigma0**2 (variant L only)."""
    s0 = state.config.s0
    if state.variant != 'L' or s0 is None or s0.mode != 'inverse-gamma':
        raise RuntimeError('sigma0 is only updated under variant L with an inverse-gamma prior')
    e = state.y - state.fmean
    shape = 0.5 * (s0.nu0 + state.n)
    rate = 0.5 * (s0.nu0 * s0.xi0 + float(e @ e))
    state.sigma0_sq = float(rate / rng.gamma(shape))
    return state.sigma0_sq


# ---------------------------------------------------------------------------
# leaf marginals in closed form (exposed for verification)


def mean_leaf_log_marginal(resid, weights, sigma_mu: float) -> float:
    """log of int prod_i N(R_i; mu, 1/w_i) N(mu; 0, sigma_mu^2) dmu."""
    r = np.asarray(resid, dtype=float)
    w = np.asarray(weights, dtype=float)
    const = 0.5 * np.sum(np.log(w / (2 * np.pi))) - 0.5 * float(np.sum(w * r * r))
    return const + K.mean_leaf_loglik(float(w.sum()), float(np.sum(w * r)), sigma_mu)


def variance_leaf_log_marginal(resid, sigma0_sq: float, a: float, b: float) -> float:
    """log of int prod_i N(R_i; 0, sigma0^2 tau) p(tau) dtau under the mixture prior."""
    r = np.asarray(resid, dtype=float)
    n = r.shape[0]
    r2 = float(r @ r) / sigma0_sq
    return -0.5 * n * np.log(2 * np.pi * sigma0_sq) + K.var_leaf_loglik(float(n), r2, a, b)


def variance_leaf_mixture_weights(n: int, r2: float, a: float, b: float) -> tuple[float, float]:
    """Posterior probabilities of the inverse-gamma and GIG components of tau."""
    t_ig, t_gig = K._var_leaf_terms(float(n), float(r2), a, b)
    top = max(t_ig, t_gig)
    w_ig, w_gig = np.exp(t_ig - top), np.exp(t_gig - top)
    return float(w_ig / (w_ig + w_gig)), float(w_gig / (w_ig + w_gig))


# ---------------------------------------------------------------------------
# sweeps and chains


class Sampler:
    """Runs sweeps on a :class:`ModelState` with one random stream."""

    def __init__(self, state: ModelState, rng: np.random.Generator, *, log_bias: float = 0.0):
        self.state = state
        self.rng = rng
        self.stats = MoveStats()
        self.log_bias = log_bias

    def sweep(self) -> None:
        st = self.state
        hp, vhp = st.hp, st.vhp
        rng = self.rng
        st.refresh_fit()

        t0 = time.perf_counter()
        counts = np.zeros((2, 2), dtype=np.int64)
        K.sweep_mean(
            st.mean_forest, st.X, st.y, st.fmean, st.vsum, st.sigma0_sq, st.grid, st.grid_len,
            st.mean_latent_ok, hp.alpha, hp.beta, hp.min_leaf, hp.sigma_mu, rng, self.log_bias,
            st.work_f, st.scratch_i, st.lo, st.hi, counts,
        )
        self.stats.add('mean', counts)
        t1 = time.perf_counter()
        self.stats.seconds['mean'] += t1 - t0

        if st.variant != 'L' and st.var_forest.n_nodes.shape[0] > 0:
            counts[:] = 0
            bad = K.sweep_var(
                st.var_forest, st.X, st.y, st.fmean, st.vsum, st.sigma0_sq, st.grid, st.grid_len,
                st.var_latent_ok, vhp.alpha, vhp.beta, hp.min_leaf, vhp.a, vhp.b, rng, self.log_bias,
                st.work_f, st.scratch_i, st.lo, st.hi, counts,
            )
            self.stats.add('variance', counts)
            if bad:
                self.stats.degenerate_leaves += int(bad)
                log.warning('%d variance leaves had zero residual sum; drew them from the prior', bad)
        t2 = time.perf_counter()
        self.stats.seconds['variance'] += t2 - t1

        if st.variant == 'L':
            sigma0_update(st, rng)
        t3 = time.perf_counter()
        self.stats.seconds['sigma0'] += t3 - t2

        if st.config.use_latent:
            K.sweep_latent(
                st.mean_forest, st.var_forest, st.X, st.y, st.fmean, st.vsum, st.sigma0_sq,
                hp.min_leaf, st.config.latent_update == 'slice', rng, st.bufs_f, st.bufs_i, st.stack,
            )
        self.stats.seconds['latent'] += time.perf_counter() - t3

    def record(self, iteration: int, save_latents: bool = False) -> DrawRecord:
        st = self.state
        return DrawRecord(
            iteration=iteration,
            mean=st.mean_ensemble(),
            var=st.var_ensemble(),
            sigma0_sq=st.sigma0_sq,
            latents=st.latents if save_latents else None,
        )


def _unpack_data(data):
    if hasattr(data, 'x') and hasattr(data, 'y'):
        return np.asarray(data.x, dtype=float), np.asarray(data.y, dtype=float)
    x, y = data
    return np.asarray(x, dtype=float), np.asarray(y, dtype=float)


def resolve_sigma0(x, y, config: ChainConfig) -> Sigma0Spec:
    """The sigma0 spec to use: the configured one, or the variant default.

    Defaults: a fixed sigma0 of half the least-squares residual SD for LH and
    FULL; for L an inverse-gamma prior with nu0 = 3 and xi0 equal to the
    square of that same guess.
    """
    if config.s0 is not None:
        return config.s0
    guess = default_sigma0(x, y) ** 2
    if not guess > 0:
        guess = 1e-4
    if config.variant == 'L':
        return Sigma0Spec(mode='inverse-gamma', nu0=3.0, xi0=guess)
    return Sigma0Spec(mode='fixed', fixed_value=guess)


def run_chain(data, config: ChainConfig, *, progress=None, on_draw=None) -> tuple[PosteriorDraws, MoveStats]:
    """Run one chain and collect thinned post-burn-in draws.

    Parameters
    ----------
    data
        Object with ``x`` (n, p) and ``y`` (n,) attributes on the standardized
        scale, or an ``(x, y)`` pair. Objects that also carry ``y_map``,
        ``x_maps`` and ``columns`` pass them on to the draws.
    config
        Chain settings; the chain is a deterministic function of
        ``config.seed``.
    progress
        Optional callable ``(iteration, total)`` invoked after each sweep.
    on_draw
        Optional callable receiving each retained :class:`DrawRecord` as soon
        as it is made.
    """
    x, y = _unpack_data(data)
    if x.ndim == 1:
        x = x[:, None]
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError('data contain non-finite values')
    if y.shape[0] <= 2 * config.hp.min_leaf:
        raise ValueError(f'need more than {2 * config.hp.min_leaf} observations, got {y.shape[0]}')
    if not np.var(y) > 0:
        raise ValueError('response has zero variance')
    s0 = resolve_sigma0(x, y, config)
    config = dataclasses.replace(config, s0=s0)
    rng = np.random.default_rng(config.seed)
    state = ModelState(x, y, config, s0.fixed_value, rng)
    sampler = Sampler(state, rng)

    meta = {
        'variant': config.variant,
        'seed': int(config.seed),
        'config': config.to_dict(),
    }
    draws = PosteriorDraws(
        y_map=getattr(data, 'y_map', AffineMap()),
        x_maps=list(getattr(data, 'x_maps', [])),
        meta=meta,
        columns=list(getattr(data, 'columns', [])),
    )
    total = config.n_burn + config.n_iter
    for it in range(total):
        sampler.sweep()
        kept = it - config.n_burn
        if kept >= 0 and kept % config.thin == 0:
            rec = sampler.record(it, config.save_latents)
            draws.records.append(rec)
            if on_draw is not None:
                on_draw(rec)
        if progress is not None:
            progress(it + 1, total)
    return draws, sampler.stats
