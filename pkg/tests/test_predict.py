import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from drbart.draws import AffineMap, DrawRecord, PosteriorDraws
from drbart.predict import (
    DensityGrid,
    cdf_one_draw,
    default_y_grid,
    density_grid,
    density_one_draw,
    draw_mixture,
    growth_quantile_curves,
    hdr_interval,
    hdr_mask,
    posterior_mean_density,
    posterior_mean_density_many,
    quantile_matrix,
    quantile_one_draw,
    returns_functional,
    summarize,
)
from drbart.priors import BartHyperParams, sample_prior_tree
from drbart.tree_core import Ensemble, Tree

BUSHY = BartHyperParams(alpha=0.95, beta=0.7)


def random_draw(rng, n_axes=2, m=6, m_v=3, it=0):
    mean = Ensemble.from_trees(
        [sample_prior_tree(rng, BUSHY, n_axes, leaf_sampler=lambda r: r.normal(0, 0.2)) for _ in range(m)]
    )
    var = Ensemble.from_trees(
        [sample_prior_tree(rng, BUSHY, n_axes, leaf_sampler=lambda r: r.normal(0, 0.4)) for _ in range(m_v)],
        kind='variance',
    )
    return DrawRecord(it, mean, var, float(rng.uniform(0.005, 0.05)))


def two_piece_draw(sigma0_sq=0.25):
    tree = Tree.split(1, 0.3, Tree.leaf(-1.0), Tree.leaf(1.0))
    return DrawRecord(0, Ensemble.from_trees([tree]), Ensemble.constant(1, kind='variance'), sigma0_sq)


def standard_normal_draw():
    return DrawRecord(0, Ensemble.constant(1), Ensemble.constant(1, kind='variance'), 1.0)


def test_single_leaf_draw_is_gaussian():
    draw = standard_normal_draw()
    y = np.linspace(-3, 3, 13)
    np.testing.assert_allclose(density_one_draw(draw, [0.5], y), stats.norm.pdf(y), rtol=1e-13)
    assert quantile_one_draw(draw, [0.5], 0.5) == pytest.approx(0.0, abs=1e-12)
    assert quantile_one_draw(draw, [0.5], 0.975) == pytest.approx(stats.norm.ppf(0.975), abs=1e-10)
    np.testing.assert_allclose(cdf_one_draw(draw, [0.5], y), stats.norm.cdf(y), atol=1e-14)


def test_two_piece_mixture():
    draw = two_piece_draw()
    w, mu, sd = draw_mixture(draw, [0.4])
    np.testing.assert_allclose(w, [0.3, 0.7])
    np.testing.assert_allclose(mu, [-1, 1])
    np.testing.assert_allclose(sd, [0.5, 0.5])
    y = np.linspace(-3, 3, 101)
    want = 0.3 * stats.norm.pdf(y, -1, 0.5) + 0.7 * stats.norm.pdf(y, 1, 0.5)
    np.testing.assert_allclose(density_one_draw(draw, [0.4], y), want, rtol=1e-12)


def test_raw_scale_mapping():
    draw = two_piece_draw()
    y_map = AffineMap(shift=10.0, scale=2.0)
    y_raw = np.linspace(0, 20, 4001)
    dens = density_one_draw(draw, [0.2], y_raw, y_map)
    np.testing.assert_allclose(dens, density_one_draw(draw, [0.2], (y_raw - 10) / 2) / 2, rtol=1e-13)
    assert integrate.trapezoid(dens, y_raw) == pytest.approx(1.0, abs=1e-9)
    q_std = quantile_one_draw(draw, [0.2], [0.1, 0.6])
    np.testing.assert_allclose(quantile_one_draw(draw, [0.2], [0.1, 0.6], y_map), 10 + 2 * q_std, rtol=1e-13)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_random_draw_density_integrates_to_one(seed):
    rng = np.random.default_rng(seed)
    draw = random_draw(rng)
    x = rng.random(1)
    w, mu, sd = draw_mixture(draw, x)
    assert w.sum() == pytest.approx(1.0, abs=1e-14)
    lo, hi = (mu - 12 * sd).min(), (mu + 12 * sd).max()
    total, _ = integrate.quad(lambda t: density_one_draw(draw, x, [t])[0], lo, hi, points=list(mu), limit=500)
    assert total == pytest.approx(1.0, abs=1e-7)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_quantiles_invert_cdf_and_never_cross(seed):
    rng = np.random.default_rng(seed)
    draw = random_draw(rng)
    x = rng.random(1)
    s = np.arange(1, 100) / 100
    q = quantile_one_draw(draw, x, s)
    assert np.all(np.diff(q) > 0)
    np.testing.assert_allclose(cdf_one_draw(draw, x, q), s, atol=1e-10)


def test_quantile_solver_escapes_newton_cycles():
    # a fitted mixture on which undamped Newton steps bounce between two
    # points while the bracket barely shrinks
    from drbart.predict import _mixture_cdf, _mixture_quantile

    mix = np.load(Path(__file__).parent / 'data' / 'cycling_mixture.npz')
    w, mu, sd = mix['w'], mix['mu'], mix['sd']
    s = np.arange(1, 100) / 100
    q = np.array([_mixture_quantile(w, mu, sd, p, 1e-12) for p in s])
    assert np.all(np.diff(q) > 0)
    np.testing.assert_allclose([_mixture_cdf(w, mu, sd, v) for v in q], s, atol=1e-10)


def test_quantile_level_validation():
    with pytest.raises(ValueError):
        quantile_one_draw(standard_normal_draw(), [0.5], [0.0, 0.5])
    with pytest.raises(ValueError):
        quantile_one_draw(standard_normal_draw(), [0.5], 1.0)


def test_uniform_and_irregular_grids_agree(rng):
    draw = random_draw(rng)
    y = np.linspace(-1, 1, 801)
    y_irregular = y.copy()
    y_irregular[1:-1] += rng.uniform(-1e-4, 1e-4, 799)
    a = density_one_draw(draw, [0.3], y)
    b = density_one_draw(draw, [0.3], y_irregular)
    c = np.array([density_one_draw(draw, [0.3], [t])[0] for t in y_irregular])
    np.testing.assert_allclose(b, c, rtol=1e-12)
    assert np.max(np.abs(a - b)) < 1e-2 * a.max()


def make_draws(rng, k=8, x_maps=None, y_map=None):
    return PosteriorDraws(
        [random_draw(rng, it=i) for i in range(k)],
        y_map=y_map or AffineMap(),
        x_maps=x_maps or [AffineMap()],
    )


def test_posterior_mean_is_average_of_draws(rng):
    draws = make_draws(rng, x_maps=[AffineMap(2.0, 4.0)], y_map=AffineMap(1.0, 3.0))
    y = np.linspace(-3, 5, 300)
    dg = density_grid(draws, [3.0], y)
    assert isinstance(dg, DensityGrid) and dg.values.shape == (8, 300)
    np.testing.assert_allclose(posterior_mean_density(draws, [3.0], y), dg.values.mean(axis=0), rtol=1e-12)
    many = posterior_mean_density_many(draws, np.array([[3.0], [5.0]]), y)
    np.testing.assert_allclose(many[0], dg.values.mean(axis=0), rtol=1e-12)
    # raw x = 3 maps to standardized 0.25
    np.testing.assert_allclose(dg.values[0], density_one_draw(draws[0], [0.25], y, draws.y_map))


def test_quantile_matrix_shape_and_monotone(rng):
    draws = make_draws(rng)
    q = quantile_matrix(draws, [0.4], np.arange(1, 100) / 100)
    assert q.shape == (8, 99)
    assert np.all(np.diff(q, axis=1) > 0)


def test_empty_draws_rejected():
    with pytest.raises(ValueError):
        posterior_mean_density(PosteriorDraws(), [0.5], np.linspace(0, 1, 5))


def test_summarize_band_contains_mean(rng):
    vals = rng.lognormal(size=(200, 50))
    mean, band = summarize(vals, 0.9)
    assert np.all(band.lower <= mean) and np.all(mean <= band.upper)
    np.testing.assert_allclose(band.lower, np.quantile(vals, 0.05, axis=0))
    assert band.level == 0.9
    one_mean, one_band = summarize(vals[:1])
    np.testing.assert_array_equal(one_band.lower, one_mean)
    with pytest.raises(ValueError):
        summarize(vals, 1.0)
    with pytest.raises(ValueError):
        summarize(np.empty((0, 3)))


def test_hdr_of_gaussian():
    y = np.linspace(-8, 8, 16001)
    lo, hi = hdr_interval(y, stats.norm.pdf(y), 0.95)[0]
    assert lo == pytest.approx(-1.959964, abs=1e-3)
    assert hi == pytest.approx(1.959964, abs=1e-3)
    mask = hdr_mask(y, stats.norm.pdf(y), 0.5)
    assert y[mask].min() == pytest.approx(-0.6745, abs=2e-3)


def test_hdr_of_bimodal_mixture_has_two_pieces():
    y = np.linspace(-10, 10, 20001)
    dens = 0.5 * stats.norm.pdf(y, -3, 0.5) + 0.5 * stats.norm.pdf(y, 3, 0.5)
    pieces = hdr_interval(y, dens, 0.9)
    assert len(pieces) == 2
    mass = sum(stats.norm.cdf(hi, m, 0.5) - stats.norm.cdf(lo, m, 0.5) for (lo, hi), m in zip(pieces, (-3, 3)))
    assert 0.5 * mass == pytest.approx(0.9, abs=1e-3)


def test_hdr_needs_enough_mass_on_grid():
    y = np.linspace(-1, 1, 101)
    with pytest.raises(ValueError, match='widen the grid'):
        hdr_mask(y, stats.norm.pdf(y), 0.95)
    with pytest.raises(ValueError):
        hdr_mask(y, stats.norm.pdf(y), 1.5)


def test_default_grid():
    g = default_y_grid((0.0, 4.0), n=9, expand=0.25)
    assert g[0] == -1.0 and g[-1] == 5.0 and g.size == 9


def shift_draws(shift, sigma=0.5):
    # mean f(x) = shift * x on the standardized scale, no latent dependence
    tree = Tree.split(0, 0.5, Tree.leaf(0.0), Tree.leaf(shift))
    rec = DrawRecord(0, Ensemble.from_trees([tree]), Ensemble.constant(1, kind='variance'), sigma**2)
    return PosteriorDraws([rec, rec], x_maps=[AffineMap()], y_map=AffineMap(shift=10.0))


def test_returns_functional():
    draws = shift_draws(1.0)
    q_lo = 10 + stats.norm.ppf(0.5) * 0.5
    res = returns_functional(draws, [0.2], [0.8], 0.5)
    assert res.mean == pytest.approx(100 * 1.0 / q_lo, rel=1e-9)
    assert res.per_draw.shape == (2,)
    exp_res = returns_functional(draws, [0.2], [0.8], 0.5, exponentiate=True)
    assert exp_res.mean == pytest.approx(100 * (math.e - 1), rel=1e-9)
    neg = PosteriorDraws(draws.records, x_maps=draws.x_maps, y_map=AffineMap(shift=-10.0))
    with pytest.raises(ValueError):
        returns_functional(neg, [0.2], [0.8], 0.5)


def test_growth_quantile_curves():
    # each period adds N(1, 0.25) noise on top of the last score
    def period_model():
        tree = Tree.leaf(1.0)
        rec = DrawRecord(0, Ensemble.from_trees([tree]), Ensemble.constant(1, kind='variance'), 0.25)
        return PosteriorDraws([rec], x_maps=[AffineMap()], y_map=AffineMap())

    out = growth_quantile_curves([period_model()], [0.0], [0.1, 0.5, 0.9])
    assert out.shape == (1, 3, 1)
    np.testing.assert_allclose(out[0, :, 0], 1 + 0.5 * stats.norm.ppf([0.1, 0.5, 0.9]), atol=1e-10)
