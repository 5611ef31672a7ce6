"""Compiled MCMC kernels.

A forest is a namedtuple of 2-d arrays, one row per tree, with node 0 the
root of each tree. Nodes are appended on birth and compacted on death (the
last node is moved into the freed slot), so ``n_nodes[h]`` is always the
number of live nodes of tree ``h``. ``leaf_of[h, i]`` is the leaf holding
observation ``i`` and ``count[h, k]`` the number of observations in node
``k`` when ``k`` is a leaf.

Points are rows of ``X``; the last column is the latent coordinate u.
"""

from __future__ import annotations

import math
from collections import namedtuple

import numba
import numpy as np

from .special_math import _log_bessel_k, _sample_log_gig
from .tree_core import _find_leaf

Forest = namedtuple(
    'Forest',
    ['axis', 'cut', 'left', 'right', 'parent', 'depth', 'value', 'n_nodes', 'n_usplit', 'leaf_of', 'count'],
)

KIND_MEAN = 0
KIND_VAR = 1

_LOG_2PI = math.log(2.0 * math.pi)


def new_forest(n_trees: int, n_obs: int, cap: int) -> Forest:
    """Forest of single-leaf trees with value 0 holding every observation."""
    shape = (n_trees, cap)
    count = np.zeros(shape, dtype=np.int64)
    count[:, 0] = n_obs
    return Forest(
        axis=np.full(shape, -1, dtype=np.int64),
        cut=np.full(shape, np.nan),
        left=np.full(shape, -1, dtype=np.int64),
        right=np.full(shape, -1, dtype=np.int64),
        parent=np.full(shape, -1, dtype=np.int64),
        depth=np.zeros(shape, dtype=np.int64),
        value=np.zeros(shape),
        n_nodes=np.ones(n_trees, dtype=np.int64),
        n_usplit=np.zeros(n_trees, dtype=np.int64),
        leaf_of=np.zeros((n_trees, n_obs), dtype=np.int64),
        count=count,
    )


def copy_forest(F: Forest) -> Forest:
    return Forest(*(a.copy() for a in F))


# ---------------------------------------------------------------------------
# leaf likelihoods


@numba.njit(cache=True)
def mean_leaf_loglik(sw, swr, sigma_mu):
    """Log marginal of a mean leaf up to factors shared by every tree shape.

    Residuals R_i ~ N(mu, 1/w_i), mu ~ N(0, sigma_mu^2); sw = sum w_i,
    swr = sum w_i R_i. The omitted factor prod sqrt(w_i/2pi) exp(-w_i R_i^2/2)
    is the same for any partition of the observations.
    """
    prec = 1.0 / (sigma_mu * sigma_mu) + sw
    post_var = 1.0 / prec
    return 0.5 * math.log(post_var / (sigma_mu * sigma_mu)) + 0.5 * swr * swr * post_var


@numba.njit(cache=True)
def _var_leaf_terms(n, r2, a, b):
    """Log of the inverse-gamma and GIG terms of a variance leaf marginal."""
    shape = 0.5 * n + a
    t_ig = math.lgamma(shape) - shape * math.log(b + 0.5 * r2)
    order = 0.5 * n - a
    if r2 > 0.0:
        t_gig = (
            math.log(2.0)
            + _log_bessel_k(order, math.sqrt(2.0 * b * r2))
            - 0.5 * (a - 0.5 * n) * math.log(2.0 * b / r2)
        )
    elif a - 0.5 * n > 0.0:
        # r2 -> 0 limit of the GIG term: Gamma(a - n/2) / b^(a - n/2)
        t_gig = math.lgamma(a - 0.5 * n) - (a - 0.5 * n) * math.log(b)
    else:
        t_gig = math.inf
    return t_ig, t_gig


@numba.njit(cache=True)
def var_leaf_loglik(n, r2, a, b):
    """Log marginal of a variance leaf without the (2 pi)^(-n/2) factor.

    n observations with sum of squared scaled residuals r2 (residuals divided
    by sigma_0 and by the other trees' scale), tau from the Gamma /
    InverseGamma mixture prior with shape a and rate b.
    """
    if n == 0:
        return 0.0
    t_ig, t_gig = _var_leaf_terms(n, r2, a, b)
    hi = max(t_ig, t_gig)
    if hi == math.inf:
        return math.inf
    lse = hi + math.log(math.exp(t_ig - hi) + math.exp(t_gig - hi))
    return math.log(0.5) + a * math.log(b) - math.lgamma(a) + lse


@numba.njit(cache=True)
def _leaf_loglik(kind, s1, s2, sigma_mu, a, b):
    if kind == KIND_MEAN:
        return mean_leaf_loglik(s1, s2, sigma_mu)
    return var_leaf_loglik(s1, s2, a, b)


@numba.njit(cache=True)
def _draw_log_tau_prior(rng, a, b):
    g = rng.gamma(a, 1.0 / b)
    if rng.random() < 0.5:
        return -math.log(g)
    return math.log(g)


@numba.njit(cache=True)
def _draw_log_tau(rng, n, r2, a, b):
    """Draw log tau from the variance-leaf full conditional.

    Returns (log tau, degenerate flag); a degenerate leaf (r2 == 0 with
    observations) falls back to a prior draw.
    """
    if n == 0:
        return _draw_log_tau_prior(rng, a, b), False
    if not r2 > 0.0:
        return _draw_log_tau_prior(rng, a, b), True
    t_ig, t_gig = _var_leaf_terms(n, r2, a, b)
    p_ig = 1.0 / (1.0 + math.exp(t_gig - t_ig)) if t_gig - t_ig < 700 else 0.0
    if rng.random() < p_ig:
        g = rng.gamma(0.5 * n + a, 1.0 / (b + 0.5 * r2))
        return -math.log(g), False
    return _sample_log_gig(rng, a - 0.5 * n, 2.0 * b, r2), False


# ---------------------------------------------------------------------------
# tree geometry


@numba.njit(cache=True)
def _node_bounds(F, h, node, n_axes, lo, hi):
    for ax in range(n_axes):
        lo[ax] = -math.inf
        hi[ax] = math.inf
    lo[n_axes - 1] = 0.0
    hi[n_axes - 1] = 1.0
    k = node
    while F.parent[h, k] >= 0:
        p = F.parent[h, k]
        ax = F.axis[h, p]
        c = F.cut[h, p]
        if F.left[h, p] == k:
            if c < hi[ax]:
                hi[ax] = c
        elif c > lo[ax]:
            lo[ax] = c
        k = p


@numba.njit(cache=True)
def _grid_range(grid, grid_len, ax, lo, hi):
    g = grid[ax, : grid_len[ax]]
    i0 = np.searchsorted(g, lo, side='right')
    i1 = np.searchsorted(g, hi, side='left')
    return i0, i1 - i0


@numba.njit(cache=True)
def _n_rules(grid, grid_len, lo, hi, n_axes, latent_ok):
    """Number of axes with at least one admissible cut in the box."""
    count = 0
    for ax in range(n_axes - 1):
        if _grid_range(grid, grid_len, ax, lo[ax], hi[ax])[1] > 0:
            count += 1
    if latent_ok and hi[n_axes - 1] > lo[n_axes - 1]:
        count += 1
    return count


@numba.njit(cache=True)
def _splittable(F, h, node, n_axes, grid, grid_len, latent_ok, lo, hi):
    if latent_ok:
        return True
    _node_bounds(F, h, node, n_axes, lo, hi)
    return _n_rules(grid, grid_len, lo, hi, n_axes, latent_ok) > 0


@numba.njit(cache=True)
def _remove_slot(F, h, k, n_obs):
    last = F.n_nodes[h] - 1
    if k != last:
        F.axis[h, k] = F.axis[h, last]
        F.cut[h, k] = F.cut[h, last]
        F.left[h, k] = F.left[h, last]
        F.right[h, k] = F.right[h, last]
        F.parent[h, k] = F.parent[h, last]
        F.depth[h, k] = F.depth[h, last]
        F.value[h, k] = F.value[h, last]
        F.count[h, k] = F.count[h, last]
        p = F.parent[h, k]
        if p >= 0:
            if F.left[h, p] == last:
                F.left[h, p] = k
            else:
                F.right[h, p] = k
        if F.axis[h, k] >= 0:
            F.parent[h, F.left[h, k]] = k
            F.parent[h, F.right[h, k]] = k
        else:
            for i in range(n_obs):
                if F.leaf_of[h, i] == last:
                    F.leaf_of[h, i] = k
    F.axis[h, last] = -1
    F.left[h, last] = -1
    F.right[h, last] = -1
    F.parent[h, last] = -1
    F.count[h, last] = 0
    F.n_nodes[h] = last


@numba.njit(cache=True)
def _scan_tree(F, h, leaves, nogs):
    n_leaves = 0
    n_nogs = 0
    for k in range(F.n_nodes[h]):
        if F.axis[h, k] < 0:
            leaves[n_leaves] = k
            n_leaves += 1
        elif F.axis[h, F.left[h, k]] < 0 and F.axis[h, F.right[h, k]] < 0:
            nogs[n_nogs] = k
            n_nogs += 1
    return n_leaves, n_nogs


# ---------------------------------------------------------------------------
# birth / death


@numba.njit(cache=True)
def _birth_death(F, h, kind, X, s1, s2, grid, grid_len, latent_ok, alpha, beta, min_leaf, sigma_mu, a, b, rng, log_bias, scratch_i, lo, hi):
    """One Metropolis birth-or-death move on tree h.

    ``s1``/``s2`` are per-observation summands of the leaf sufficient
    statistics for this tree. Returns (move, accepted) with move 1 = birth,
    2 = death, 0 = nothing proposable.
    """
    n_obs = X.shape[0]
    n_axes = X.shape[1]
    latent = n_axes - 1
    cap = F.axis.shape[1]
    leaves = scratch_i[0:cap]
    nogs = scratch_i[cap : 2 * cap]
    grow = scratch_i[2 * cap : 3 * cap]
    n_leaves, n_nogs = _scan_tree(F, h, leaves, nogs)
    if latent_ok:
        n_grow = n_leaves
        for j in range(n_leaves):
            grow[j] = leaves[j]
    else:
        n_grow = 0
        for j in range(n_leaves):
            _node_bounds(F, h, leaves[j], n_axes, lo, hi)
            if _n_rules(grid, grid_len, lo, hi, n_axes, latent_ok) > 0:
                grow[n_grow] = leaves[j]
                n_grow += 1
    if n_nogs == 0:
        p_birth = 1.0 if n_grow > 0 else 0.0
    else:
        p_birth = 0.5 if n_grow > 0 else 0.0
    if p_birth == 0.0 and n_nogs == 0:
        return 0, False

    if rng.random() < p_birth:
        leaf = grow[rng.integers(0, n_grow)]
        _node_bounds(F, h, leaf, n_axes, lo, hi)
        n_avail = _n_rules(grid, grid_len, lo, hi, n_axes, latent_ok)
        pick = rng.integers(0, n_avail)
        ax = -1
        seen = 0
        for cand in range(n_axes - 1):
            if _grid_range(grid, grid_len, cand, lo[cand], hi[cand])[1] > 0:
                if seen == pick:
                    ax = cand
                    break
                seen += 1
        if ax < 0:
            ax = latent
        if ax == latent:
            c = lo[ax] + (hi[ax] - lo[ax]) * rng.random()
            if not c > lo[ax]:
                return 1, False
        else:
            i0, cnt = _grid_range(grid, grid_len, ax, lo[ax], hi[ax])
            c = grid[ax, i0 + rng.integers(0, cnt)]
        nl = 0
        nr = 0
        l1 = 0.0
        l2 = 0.0
        r1 = 0.0
        r2 = 0.0
        for i in range(n_obs):
            if F.leaf_of[h, i] == leaf:
                if X[i, ax] < c:
                    nl += 1
                    l1 += s1[i]
                    l2 += s2[i]
                else:
                    nr += 1
                    r1 += s1[i]
                    r2 += s2[i]
        if nl < min_leaf or nr < min_leaf:
            return 1, False
        d = F.depth[h, leaf]
        ps = alpha * (1.0 + d) ** (-beta)
        psc = alpha * (2.0 + d) ** (-beta)
        if latent_ok:
            l_split = 1
            r_split = 1
        else:
            save = hi[ax]
            hi[ax] = c
            l_split = 1 if _n_rules(grid, grid_len, lo, hi, n_axes, latent_ok) > 0 else 0
            hi[ax] = save
            save = lo[ax]
            lo[ax] = c
            r_split = 1 if _n_rules(grid, grid_len, lo, hi, n_axes, latent_ok) > 0 else 0
            lo[ax] = save
        log_prior = math.log(ps) + math.log(1.0 - psc * l_split) + math.log(1.0 - psc * r_split) - math.log(1.0 - ps)
        par = F.parent[h, leaf]
        lost_nog = 0
        if par >= 0:
            sib = F.right[h, par] if F.left[h, par] == leaf else F.left[h, par]
            if F.axis[h, sib] < 0:
                lost_nog = 1
        n_nogs_new = n_nogs + 1 - lost_nog
        n_grow_new = n_grow - 1 + l_split + r_split
        p_death_new = 0.5 if n_grow_new > 0 else 1.0
        log_prop = math.log(p_death_new) - math.log(n_nogs_new) - math.log(p_birth) + math.log(n_grow)
        log_lik = (
            _leaf_loglik(kind, l1, l2, sigma_mu, a, b)
            + _leaf_loglik(kind, r1, r2, sigma_mu, a, b)
            - _leaf_loglik(kind, l1 + r1, l2 + r2, sigma_mu, a, b)
        )
        log_ratio = log_prior + log_prop + log_lik + log_bias
        if math.log(1.0 - rng.random()) < log_ratio:
            kl = F.n_nodes[h]
            kr = kl + 1
            F.n_nodes[h] = kl + 2
            F.axis[h, leaf] = ax
            F.cut[h, leaf] = c
            F.left[h, leaf] = kl
            F.right[h, leaf] = kr
            for k in (kl, kr):
                F.axis[h, k] = -1
                F.cut[h, k] = math.nan
                F.left[h, k] = -1
                F.right[h, k] = -1
                F.parent[h, k] = leaf
                F.depth[h, k] = d + 1
                F.value[h, k] = 0.0
            F.count[h, kl] = nl
            F.count[h, kr] = nr
            F.count[h, leaf] = 0
            for i in range(n_obs):
                if F.leaf_of[h, i] == leaf:
                    F.leaf_of[h, i] = kl if X[i, ax] < c else kr
            if ax == latent:
                F.n_usplit[h] += 1
            return 1, True
        return 1, False

    node = nogs[rng.integers(0, n_nogs)]
    kl = F.left[h, node]
    kr = F.right[h, node]
    l1 = 0.0
    l2 = 0.0
    r1 = 0.0
    r2 = 0.0
    for i in range(n_obs):
        k = F.leaf_of[h, i]
        if k == kl:
            l1 += s1[i]
            l2 += s2[i]
        elif k == kr:
            r1 += s1[i]
            r2 += s2[i]
    d = F.depth[h, node]
    ps = alpha * (1.0 + d) ** (-beta)
    psc = alpha * (2.0 + d) ** (-beta)
    l_split = 1 if _splittable(F, h, kl, n_axes, grid, grid_len, latent_ok, lo, hi) else 0
    r_split = 1 if _splittable(F, h, kr, n_axes, grid, grid_len, latent_ok, lo, hi) else 0
    log_prior = math.log(ps) + math.log(1.0 - psc * l_split) + math.log(1.0 - psc * r_split) - math.log(1.0 - ps)
    par = F.parent[h, node]
    gained_nog = 0
    if par >= 0:
        sib = F.right[h, par] if F.left[h, par] == node else F.left[h, par]
        if F.axis[h, sib] < 0:
            gained_nog = 1
    n_nogs_new = n_nogs - 1 + gained_nog
    n_grow_new = n_grow - l_split - r_split + 1
    p_birth_new = 1.0 if n_nogs_new == 0 else 0.5
    log_prop = math.log(p_birth_new) - math.log(n_grow_new) - math.log(1.0 - p_birth) + math.log(n_nogs)
    log_lik = (
        _leaf_loglik(kind, l1, l2, sigma_mu, a, b)
        + _leaf_loglik(kind, r1, r2, sigma_mu, a, b)
        - _leaf_loglik(kind, l1 + r1, l2 + r2, sigma_mu, a, b)
    )
    log_ratio = -log_prior + log_prop - log_lik
    if math.log(1.0 - rng.random()) < log_ratio:
        for i in range(n_obs):
            k = F.leaf_of[h, i]
            if k == kl or k == kr:
                F.leaf_of[h, i] = node
        F.count[h, node] = F.count[h, kl] + F.count[h, kr]
        if F.axis[h, node] == latent:
            F.n_usplit[h] -= 1
        F.axis[h, node] = -1
        F.cut[h, node] = math.nan
        F.left[h, node] = -1
        F.right[h, node] = -1
        F.value[h, node] = 0.0
        if kl > kr:
            _remove_slot(F, h, kl, n_obs)
            _remove_slot(F, h, kr, n_obs)
        else:
            _remove_slot(F, h, kr, n_obs)
            _remove_slot(F, h, kl, n_obs)
        return 2, True
    return 2, False


# ---------------------------------------------------------------------------
# per-tree updates


@numba.njit(cache=True)
def update_mean_tree(F, h, X, y, fmean, vsum, sigma0_sq, grid, grid_len, latent_ok, alpha, beta, min_leaf, sigma_mu, rng, log_bias, s1, s2, old, stat1, stat2, scratch_i, lo, hi):
    """Backfitting update of mean tree h: birth/death then exact leaf draws."""
    n_obs = X.shape[0]
    for i in range(n_obs):
        old[i] = F.value[h, F.leaf_of[h, i]]
        w = 1.0 / (sigma0_sq * math.exp(vsum[i]))
        s1[i] = w
        s2[i] = w * (y[i] - fmean[i] + old[i])
    move, accepted = _birth_death(F, h, KIND_MEAN, X, s1, s2, grid, grid_len, latent_ok, alpha, beta, min_leaf, sigma_mu, 0.0, 1.0, rng, log_bias, scratch_i, lo, hi)
    nn = F.n_nodes[h]
    for k in range(nn):
        stat1[k] = 0.0
        stat2[k] = 0.0
    for i in range(n_obs):
        k = F.leaf_of[h, i]
        stat1[k] += s1[i]
        stat2[k] += s2[i]
    inv_prior = 1.0 / (sigma_mu * sigma_mu)
    for k in range(nn):
        if F.axis[h, k] < 0:
            post_var = 1.0 / (inv_prior + stat1[k])
            F.value[h, k] = post_var * stat2[k] + math.sqrt(post_var) * rng.standard_normal()
    for i in range(n_obs):
        fmean[i] += F.value[h, F.leaf_of[h, i]] - old[i]
    return move, accepted


@numba.njit(cache=True)
def update_var_tree(F, h, X, y, fmean, vsum, sigma0_sq, grid, grid_len, latent_ok, alpha, beta, min_leaf, a, b, rng, log_bias, s1, s2, old, stat1, stat2, scratch_i, lo, hi):
    """Update of variance tree h on scaled residuals; returns (move, accepted, n_degenerate)."""
    n_obs = X.shape[0]
    for i in range(n_obs):
        old[i] = F.value[h, F.leaf_of[h, i]]
        e = y[i] - fmean[i]
        s1[i] = 1.0
        s2[i] = e * e / (sigma0_sq * math.exp(vsum[i] - old[i]))
    move, accepted = _birth_death(F, h, KIND_VAR, X, s1, s2, grid, grid_len, latent_ok, alpha, beta, min_leaf, 1.0, a, b, rng, log_bias, scratch_i, lo, hi)
    nn = F.n_nodes[h]
    for k in range(nn):
        stat1[k] = 0.0
        stat2[k] = 0.0
    for i in range(n_obs):
        k = F.leaf_of[h, i]
        stat1[k] += 1.0
        stat2[k] += s2[i]
    degenerate = 0
    for k in range(nn):
        if F.axis[h, k] < 0:
            val, bad = _draw_log_tau(rng, stat1[k], stat2[k], a, b)
            F.value[h, k] = val
            if bad:
                degenerate += 1
    for i in range(n_obs):
        vsum[i] += F.value[h, F.leaf_of[h, i]] - old[i]
    return move, accepted, degenerate


@numba.njit(cache=True)
def recompute_fit(F, out):
    """out[i] = sum over trees of the leaf value holding observation i."""
    for i in range(out.shape[0]):
        s = 0.0
        for h in range(F.n_nodes.shape[0]):
            s += F.value[h, F.leaf_of[h, i]]
        out[i] = s


# ---------------------------------------------------------------------------
# latent updates


@numba.njit(cache=True)
def _feasible_u_range(F, h, node, latent):
    """u-interval of a leaf's cell (only latent-axis splits constrain it)."""
    lo = 0.0
    hi = 1.0
    k = node
    while F.parent[h, k] >= 0:
        p = F.parent[h, k]
        if F.axis[h, p] == latent:
            c = F.cut[h, p]
            if F.left[h, p] == k:
                if c < hi:
                    hi = c
            elif c > lo:
                lo = c
        k = p
    return lo, hi


@numba.njit(cache=True)
def _feasible_interval(FM, FV, i, latent, min_leaf):
    """Set of u keeping every leaf at >= min_leaf observations: [L, H)."""
    L = 0.0
    H = 1.0
    for F in (FM, FV):
        for h in range(F.n_nodes.shape[0]):
            if F.n_usplit[h] == 0:
                continue
            k = F.leaf_of[h, i]
            if F.count[h, k] <= min_leaf:
                lo, hi = _feasible_u_range(F, h, k, latent)
                if lo > L:
                    L = lo
                if hi < H:
                    H = hi
    return L, H


@numba.njit(cache=True)
def _loglik_obs(yi, f, v, sigma0_sq):
    var = sigma0_sq * math.exp(v)
    r = yi - f
    return -0.5 * (_LOG_2PI + math.log(var)) - 0.5 * r * r / var


@numba.njit(cache=True)
def _move_latent(FM, FV, X, i, u_new, fmean, vsum, latent):
    X[i, latent] = u_new
    for pair in range(2):
        F = FM if pair == 0 else FV
        for h in range(F.n_nodes.shape[0]):
            if F.n_usplit[h] == 0:
                continue
            old = F.leaf_of[h, i]
            new = _find_leaf(F.axis[h], F.cut[h], F.left[h], F.right[h], 0, X[i])
            if new != old:
                F.count[h, old] -= 1
                F.count[h, new] += 1
                F.leaf_of[h, i] = new
                delta = F.value[h, new] - F.value[h, old]
                if pair == 0:
                    fmean[i] += delta
                else:
                    vsum[i] += delta


@numba.njit(cache=True)
def latent_intervals(FM, FV, X, i, fmean, vsum, latent, ev_pos, ev_df, ev_dv, lo_buf, node_buf, stack, out_lo, out_hi, out_f, out_v):
    """Intervals of u on which (f, v) at x_i is constant, with their values.

    Fills ``out_*`` and returns the number of intervals; covers [0, 1).
    """
    f_const = fmean[i]
    v_const = vsum[i]
    n_ev = 0
    for pair in range(2):
        F = FM if pair == 0 else FV
        for h in range(F.n_nodes.shape[0]):
            if F.n_usplit[h] == 0:
                continue
            cnt = _tree_pieces_row(F, h, X[i], latent, lo_buf, node_buf, stack)
            cur = F.value[h, F.leaf_of[h, i]]
            first = F.value[h, node_buf[0]]
            if pair == 0:
                f_const += first - cur
            else:
                v_const += first - cur
            for j in range(1, cnt):
                ev_pos[n_ev] = lo_buf[j]
                delta = F.value[h, node_buf[j]] - F.value[h, node_buf[j - 1]]
                if pair == 0:
                    ev_df[n_ev] = delta
                    ev_dv[n_ev] = 0.0
                else:
                    ev_df[n_ev] = 0.0
                    ev_dv[n_ev] = delta
                n_ev += 1
    order = np.argsort(ev_pos[:n_ev], kind='mergesort')
    k = 0
    out_lo[0] = 0.0
    out_f[0] = f_const
    out_v[0] = v_const
    for j in range(n_ev):
        e = order[j]
        pos = ev_pos[e]
        if pos > out_lo[k]:
            out_hi[k] = pos
            k += 1
            out_lo[k] = pos
            out_f[k] = out_f[k - 1]
            out_v[k] = out_v[k - 1]
        out_f[k] += ev_df[e]
        out_v[k] += ev_dv[e]
    out_hi[k] = 1.0
    return k + 1


@numba.njit(cache=True)
def _tree_pieces_row(F, h, point, latent, out_lo, out_node, stack):
    top = 0
    stack[0, 0] = 0
    stack[0, 1] = 0.0
    stack[0, 2] = 1.0
    count = 0
    while top >= 0:
        node = int(stack[top, 0])
        lo = stack[top, 1]
        hi = stack[top, 2]
        top -= 1
        ax = F.axis[h, node]
        if ax < 0:
            out_lo[count] = lo
            out_node[count] = node
            count += 1
        elif ax == latent:
            c = F.cut[h, node]
            if c >= hi:
                top += 1
                stack[top, 0] = F.left[h, node]
                stack[top, 1] = lo
                stack[top, 2] = hi
            elif c <= lo:
                top += 1
                stack[top, 0] = F.right[h, node]
                stack[top, 1] = lo
                stack[top, 2] = hi
            else:
                top += 1
                stack[top, 0] = F.right[h, node]
                stack[top, 1] = c
                stack[top, 2] = hi
                top += 1
                stack[top, 0] = F.left[h, node]
                stack[top, 1] = lo
                stack[top, 2] = c
        else:
            top += 1
            stack[top, 0] = F.left[h, node] if point[ax] < F.cut[h, node] else F.right[h, node]
            stack[top, 1] = lo
            stack[top, 2] = hi
    return count


@numba.njit(cache=True)
def gibbs_log_weights(FM, FV, X, y, i, fmean, vsum, sigma0_sq, min_leaf, bufs_f, bufs_i, stack):
    """Interval table at x_i with log selection weights (-inf if infeasible).

    Returns the interval count; results in bufs_f rows 4..8:
    lo, hi, f, v, log weight.
    """
    latent = X.shape[1] - 1
    n = latent_intervals(
        FM, FV, X, i, fmean, vsum, latent,
        bufs_f[0], bufs_f[1], bufs_f[2], bufs_f[3], bufs_i[0], stack,
        bufs_f[4], bufs_f[5], bufs_f[6], bufs_f[7],
    )
    L, H = _feasible_interval(FM, FV, i, latent, min_leaf)
    for k in range(n):
        lo = bufs_f[4, k]
        hi = bufs_f[5, k]
        if lo >= L and hi <= H and hi > lo:
            bufs_f[8, k] = math.log(hi - lo) + _loglik_obs(y[i], bufs_f[6, k], bufs_f[7, k], sigma0_sq)
        else:
            bufs_f[8, k] = -math.inf
    return n


@numba.njit(cache=True)
def latent_step_gibbs(FM, FV, X, y, i, fmean, vsum, sigma0_sq, min_leaf, rng, bufs_f, bufs_i, stack):
    latent = X.shape[1] - 1
    n = gibbs_log_weights(FM, FV, X, y, i, fmean, vsum, sigma0_sq, min_leaf, bufs_f, bufs_i, stack)
    top = -math.inf
    for k in range(n):
        if bufs_f[8, k] > top:
            top = bufs_f[8, k]
    if top == -math.inf:
        return X[i, latent]
    total = 0.0
    for k in range(n):
        total += math.exp(bufs_f[8, k] - top)
    target = rng.random() * total
    acc = 0.0
    pick = -1
    for k in range(n):
        if bufs_f[8, k] > -math.inf:
            pick = k
            acc += math.exp(bufs_f[8, k] - top)
            if acc > target:
                break
    lo = bufs_f[4, pick]
    hi = bufs_f[5, pick]
    u_new = lo + (hi - lo) * rng.random()
    _move_latent(FM, FV, X, i, u_new, fmean, vsum, latent)
    return u_new


@numba.njit(cache=True)
def _fit_at(FM, FV, X, i, u, fmean, vsum, latent):
    """(f, v) at (x_i, u) from the current fit by re-routing u-splitting trees."""
    saved = X[i, latent]
    X[i, latent] = u
    f = fmean[i]
    v = vsum[i]
    for pair in range(2):
        F = FM if pair == 0 else FV
        for h in range(F.n_nodes.shape[0]):
            if F.n_usplit[h] == 0:
                continue
            new = _find_leaf(F.axis[h], F.cut[h], F.left[h], F.right[h], 0, X[i])
            delta = F.value[h, new] - F.value[h, F.leaf_of[h, i]]
            if pair == 0:
                f += delta
            else:
                v += delta
    X[i, latent] = saved
    return f, v


@numba.njit(cache=True)
def latent_step_slice(FM, FV, X, y, i, fmean, vsum, sigma0_sq, min_leaf, rng):
    """Slice update of u_i with shrinkage on the bounded feasible interval."""
    latent = X.shape[1] - 1
    u = X[i, latent]
    L, H = _feasible_interval(FM, FV, i, latent, min_leaf)
    log_level = _loglik_obs(y[i], fmean[i], vsum[i], sigma0_sq) + math.log(1.0 - rng.random())
    lo = L
    hi = H
    for _ in range(200):
        cand = lo + (hi - lo) * rng.random()
        f, v = _fit_at(FM, FV, X, i, cand, fmean, vsum, latent)
        if _loglik_obs(y[i], f, v, sigma0_sq) > log_level:
            _move_latent(FM, FV, X, i, cand, fmean, vsum, latent)
            return cand
        if cand < u:
            lo = cand
        else:
            hi = cand
    return u


# ---------------------------------------------------------------------------
# sweeps


@numba.njit(cache=True)
def sweep_mean(FM, X, y, fmean, vsum, sigma0_sq, grid, grid_len, latent_ok, alpha, beta, min_leaf, sigma_mu, rng, log_bias, work_f, scratch_i, lo, hi, stats):
    n = X.shape[0]
    for h in range(FM.n_nodes.shape[0]):
        move, acc = update_mean_tree(
            FM, h, X, y, fmean, vsum, sigma0_sq, grid, grid_len, latent_ok, alpha, beta, min_leaf,
            sigma_mu, rng, log_bias, work_f[0, :n], work_f[1, :n], work_f[2, :n], work_f[3], work_f[4],
            scratch_i, lo, hi,
        )
        if move > 0:
            stats[move - 1, 0] += 1
            if acc:
                stats[move - 1, 1] += 1


@numba.njit(cache=True)
def sweep_var(FV, X, y, fmean, vsum, sigma0_sq, grid, grid_len, latent_ok, alpha, beta, min_leaf, a, b, rng, log_bias, work_f, scratch_i, lo, hi, stats):
    n = X.shape[0]
    degenerate = 0
    for h in range(FV.n_nodes.shape[0]):
        move, acc, bad = update_var_tree(
            FV, h, X, y, fmean, vsum, sigma0_sq, grid, grid_len, latent_ok, alpha, beta, min_leaf,
            a, b, rng, log_bias, work_f[0, :n], work_f[1, :n], work_f[2, :n], work_f[3], work_f[4],
            scratch_i, lo, hi,
        )
        degenerate += bad
        if move > 0:
            stats[move - 1, 0] += 1
            if acc:
                stats[move - 1, 1] += 1
    return degenerate


@numba.njit(cache=True)
def sweep_latent(FM, FV, X, y, fmean, vsum, sigma0_sq, min_leaf, use_slice, rng, bufs_f, bufs_i, stack):
    for i in range(X.shape[0]):
        if use_slice:
            latent_step_slice(FM, FV, X, y, i, fmean, vsum, sigma0_sq, min_leaf, rng)
        else:
            latent_step_gibbs(FM, FV, X, y, i, fmean, vsum, sigma0_sq, min_leaf, rng, bufs_f, bufs_i, stack)


# ---------------------------------------------------------------------------
# snapshots and prior simulation


@numba.njit(cache=True)
def flatten_preorder(F):
    """Copy a forest into flat preorder node arrays with global child indices."""
    n_trees = F.n_nodes.shape[0]
    total = 0
    for h in range(n_trees):
        total += F.n_nodes[h]
    axis = np.empty(total, dtype=np.int64)
    cut = np.empty(total)
    left = np.empty(total, dtype=np.int64)
    right = np.empty(total, dtype=np.int64)
    value = np.empty(total)
    roots = np.empty(n_trees, dtype=np.int64)
    cap = F.axis.shape[1]
    stack = np.empty(cap + 1, dtype=np.int64)
    where = np.empty(cap, dtype=np.int64)
    pos = 0
    for h in range(n_trees):
        roots[h] = pos
        top = 0
        stack[0] = 0
        while top >= 0:
            k = stack[top]
            top -= 1
            where[k] = pos
            axis[pos] = F.axis[h, k]
            if F.axis[h, k] >= 0:
                cut[pos] = F.cut[h, k]
                value[pos] = math.nan
                top += 1
                stack[top] = F.right[h, k]
                top += 1
                stack[top] = F.left[h, k]
            else:
                cut[pos] = math.nan
                value[pos] = F.value[h, k]
            left[pos] = -1
            right[pos] = -1
            pos += 1
        for k in range(F.n_nodes[h]):
            if F.axis[h, k] >= 0:
                left[where[k]] = where[F.left[h, k]]
                right[where[k]] = where[F.right[h, k]]
    return axis, cut, left, right, value, roots


@numba.njit(cache=True)
def sample_prior_tree_into(F, h, kind, X, grid, grid_len, latent_ok, alpha, beta, sigma_mu, a, b, rng, lo, hi):
    """Overwrite tree h with a prior draw (structure and leaves).

    Leaf membership is rebuilt from X. Returns False when the draw outgrows
    the node capacity, which only happens for trees with more leaves than
    any feasible tree can have; the caller rejects such draws.
    """
    n_axes = X.shape[1]
    latent = n_axes - 1
    cap = F.axis.shape[1]
    F.n_nodes[h] = 1
    F.axis[h, 0] = -1
    F.parent[h, 0] = -1
    F.depth[h, 0] = 0
    F.n_usplit[h] = 0
    pending = np.empty(cap + 1, dtype=np.int64)
    top = 0
    pending[0] = 0
    while top >= 0:
        node = pending[top]
        top -= 1
        d = F.depth[h, node]
        _node_bounds(F, h, node, n_axes, lo, hi)
        n_avail = _n_rules(grid, grid_len, lo, hi, n_axes, latent_ok)
        if n_avail > 0 and rng.random() < alpha * (1.0 + d) ** (-beta):
            if F.n_nodes[h] + 2 > cap:
                # more leaves than min_leaf feasibility can ever allow
                return False
            pick = rng.integers(0, n_avail)
            ax = -1
            seen = 0
            for cand in range(n_axes - 1):
                if _grid_range(grid, grid_len, cand, lo[cand], hi[cand])[1] > 0:
                    if seen == pick:
                        ax = cand
                        break
                    seen += 1
            if ax < 0:
                ax = latent
            if ax == latent:
                c = lo[ax] + (hi[ax] - lo[ax]) * rng.random()
                F.n_usplit[h] += 1
            else:
                i0, cnt = _grid_range(grid, grid_len, ax, lo[ax], hi[ax])
                c = grid[ax, i0 + rng.integers(0, cnt)]
            kl = F.n_nodes[h]
            kr = kl + 1
            F.n_nodes[h] = kl + 2
            F.axis[h, node] = ax
            F.cut[h, node] = c
            F.left[h, node] = kl
            F.right[h, node] = kr
            for k in (kl, kr):
                F.axis[h, k] = -1
                F.cut[h, k] = math.nan
                F.left[h, k] = -1
                F.right[h, k] = -1
                F.parent[h, k] = node
                F.depth[h, k] = d + 1
            top += 1
            pending[top] = kr
            top += 1
            pending[top] = kl
        else:
            F.left[h, node] = -1
            F.right[h, node] = -1
            F.cut[h, node] = math.nan
            if kind == KIND_MEAN:
                F.value[h, node] = sigma_mu * rng.standard_normal()
            else:
                F.value[h, node] = _draw_log_tau_prior(rng, a, b)
    for k in range(cap):
        F.count[h, k] = 0
    for i in range(X.shape[0]):
        k = _find_leaf(F.axis[h], F.cut[h], F.left[h], F.right[h], 0, X[i])
        F.leaf_of[h, i] = k
        F.count[h, k] += 1
    return True


@numba.njit(cache=True)
def forest_feasible(F, min_leaf):
    for h in range(F.n_nodes.shape[0]):
        for k in range(F.n_nodes[h]):
            if F.axis[h, k] < 0 and F.count[h, k] < min_leaf:
                return False
    return True


@numba.njit(cache=True)
def forest_eval(F, point):
    s = 0.0
    for h in range(F.n_nodes.shape[0]):
        s += F.value[h, _find_leaf(F.axis[h], F.cut[h], F.left[h], F.right[h], 0, point)]
    return s


@numba.njit(cache=True)
def prior_draw(FM, FV, X, grid, grid_len, mean_latent_ok, var_latent_ok, alpha, beta, v_alpha, v_beta, min_leaf, sigma_mu, a, b, use_latent, rng, lo, hi):
    """Joint prior draw of latents and both forests, restricted to feasibility.

    Latents and trees are redrawn together until every leaf of every tree
    holds at least ``min_leaf`` observations. Returns the number of attempts.
    """
    latent = X.shape[1] - 1
    attempts = 0
    while True:
        attempts += 1
        if use_latent:
            for i in range(X.shape[0]):
                X[i, latent] = rng.random()
        ok = True
        for h in range(FM.n_nodes.shape[0]):
            if not sample_prior_tree_into(FM, h, KIND_MEAN, X, grid, grid_len, mean_latent_ok, alpha, beta, sigma_mu, a, b, rng, lo, hi):
                ok = False
                break
        if ok:
            for h in range(FV.n_nodes.shape[0]):
                if not sample_prior_tree_into(FV, h, KIND_VAR, X, grid, grid_len, var_latent_ok, v_alpha, v_beta, sigma_mu, a, b, rng, lo, hi):
                    ok = False
                    break
        if ok and forest_feasible(FM, min_leaf) and forest_feasible(FV, min_leaf):
            return attempts
