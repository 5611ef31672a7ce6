import math

import numpy as np
import pytest
from scipy import integrate, special

from drbart.priors import (
    BartHyperParams,
    Sigma0Spec,
    VarianceHyperParams,
    calibrate_a0,
    calibrate_sigma_mu,
    depth_node_counts,
    leaf_scale_prior_logpdf,
    prior_checks,
    sample_leaf_scale_prior,
    sample_prior_tree,
    split_probability,
)
from drbart.tree_core import Tree


def test_split_probability():
    hp = BartHyperParams()
    assert split_probability(0, hp) == pytest.approx(0.95)
    assert split_probability(1, hp) == pytest.approx(0.95 / 4)
    assert split_probability(3, BartHyperParams(beta=0)) == pytest.approx(0.95)
    with pytest.raises(ValueError):
        split_probability(-1, hp)


def test_hyperparameter_validation():
    with pytest.raises(ValueError):
        BartHyperParams(alpha=1.0)
    with pytest.raises(ValueError):
        BartHyperParams(beta=-1)
    with pytest.raises(ValueError):
        BartHyperParams(min_leaf=0)
    assert BartHyperParams(k=2, m=200).sigma_mu == pytest.approx(1 / (4 * math.sqrt(200)))
    assert BartHyperParams(sigma_mu=0.3).sigma_mu == 0.3


def test_calibrations():
    assert calibrate_sigma_mu(2, 1) == 0.25
    with pytest.raises(ValueError):
        calibrate_sigma_mu(0, 10)
    # a0 puts two prior sd of v = sum of log tau at log d
    a0 = calibrate_a0(4.0)
    assert 2 / math.sqrt(a0) == pytest.approx(math.log(4.0))
    with pytest.raises(ValueError):
        calibrate_a0(1.0)
    vhp = VarianceHyperParams(m_v=10, a0=0.5)
    assert vhp.a == vhp.b == 5.0


def test_sigma0_spec():
    assert Sigma0Spec('inverse-gamma', nu0=3, xi0=0.2).fixed_value == 0.2
    with pytest.raises(ValueError):
        Sigma0Spec('fixed')
    with pytest.raises(ValueError):
        Sigma0Spec('fixed', fixed_value=1.0, nu0=3)
    with pytest.raises(ValueError):
        Sigma0Spec('inverse-gamma', nu0=3)
    with pytest.raises(ValueError):
        Sigma0Spec('bogus', fixed_value=1.0)


def test_alpha_zero_gives_stumps(rng):
    hp = BartHyperParams(alpha=0.0)
    assert all(sample_prior_tree(rng, hp, 3).n_nodes == 1 for _ in range(50))


def test_prior_tree_respects_grids_and_axes(rng):
    hp = BartHyperParams(alpha=0.95, beta=0.5)
    grid = np.array([0.2, 0.4, 0.6])
    for _ in range(200):
        tree = sample_prior_tree(rng, hp, 3, cut_grids=[grid, None, None], allowed_axes=[0, 1])
        tree.validate()
        internal = tree.axis >= 0
        assert set(tree.axis[internal]) <= {0, 1}
        assert np.all(np.isin(tree.cut[internal & (tree.axis == 0)], grid))
        # a grid cut is never reused along a path, so at most 3 x-splits deep
        for k in tree.leaves():
            cell = tree.cell(k, 3)
            assert np.all(cell.lower <= cell.upper)


def test_depth_node_counts():
    tree = Tree.split(0, 0.5, Tree.split(1, 0.5, Tree.leaf(), Tree.leaf()), Tree.leaf())
    np.testing.assert_array_equal(depth_node_counts(tree, 3), [1, 2, 2, 0])


def test_expected_node_counts_small_sample(rng):
    hp = BartHyperParams()
    counts = np.array([depth_node_counts(sample_prior_tree(rng, hp, 2), 2) for _ in range(20_000)])
    for d in (1, 2):
        expected = (2 * hp.alpha) ** d * math.factorial(d) ** (-hp.beta)
        se = counts[:, d].std() / math.sqrt(len(counts))
        assert abs(counts[:, d].mean() - expected) < 4 * se


def test_leaf_scale_prior_density_integrates():
    for a in (0.7, 3.0, 50.0):
        total, _ = integrate.quad(lambda t: math.exp(leaf_scale_prior_logpdf(t, a, a)), 0, np.inf, limit=400)
        assert total == pytest.approx(1.0, abs=1e-7)


def test_leaf_scale_prior_log_moments(rng):
    # log tau is a symmetric mixture of +-log Gamma(a, a)
    a = 20.0
    log_tau = np.log(sample_leaf_scale_prior(rng, a, a, size=400_000))
    var_exact = special.polygamma(1, a) + (special.digamma(a) - math.log(a)) ** 2
    assert abs(log_tau.mean()) < 4 * log_tau.std() / math.sqrt(log_tau.size)
    assert log_tau.var() == pytest.approx(var_exact, rel=0.01)
    assert float(sample_leaf_scale_prior(rng, a, a)) > 0
    with pytest.raises(ValueError):
        sample_leaf_scale_prior(rng, 0, 1)


def test_prior_checks_reduced(rng):
    results = prior_checks(rng, n_trees=20_000, n_scale=200_000)
    assert len(results) == 7
    for r in results:
        assert r.line().startswith('PASS' if r.passed else 'FAIL')
    # the tolerances of the frequency checks are looser at this size; require the key ones
    by_name = {r.name: r for r in results}
    assert by_name['mean nodes at depth 1'].passed
    assert by_name['mean nodes at depth 2'].passed
    assert by_name['Pr(exp v in (1/4, 4))'].passed
