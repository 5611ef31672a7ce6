import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drbart.priors import BartHyperParams, sample_prior_tree
from drbart.tree_core import (
    Ensemble,
    Tree,
    TreeStructureError,
    evaluate_ensemble,
    evaluate_tree,
    interval_table,
    leaf_occupancy,
    shared_leaf_count,
    u_breakpoints,
)

BUSHY = BartHyperParams(alpha=0.95, beta=0.5)


def random_tree(rng, n_axes=3, hp=BUSHY):
    return sample_prior_tree(rng, hp, n_axes, leaf_sampler=lambda r: r.normal())


def brute_leaf(tree, point):
    """Leaf whose cell contains the point, by checking every leaf box."""
    hits = [k for k in tree.leaves() if tree.cell(k, len(point)).contains(point)]
    assert len(hits) == 1
    return hits[0]


def test_single_leaf_evaluates_to_its_value():
    assert evaluate_tree(Tree.leaf(0.0), [0.3, 0.9]) == 0.0


def test_boundary_goes_right():
    tree = Tree.split(0, 0.3, Tree.leaf(-1.0), Tree.leaf(1.0))
    assert evaluate_tree(tree, [0.2]) == -1.0
    assert evaluate_tree(tree, [0.3]) == 1.0


def test_missing_leaf_parameter_is_structural_error():
    tree = Tree.split(0, 0.5, Tree.leaf(np.nan), Tree.leaf(1.0))
    with pytest.raises(TreeStructureError):
        evaluate_tree(tree, [0.1])
    with pytest.raises(TreeStructureError):
        tree.validate()


def test_validate_rejects_dangling_children():
    bad = Tree([0, -1], [0.5, np.nan], [1, -1], [7, -1], [np.nan, 0.0])
    with pytest.raises(TreeStructureError):
        bad.validate()


def test_depth_two_tree_matches_grid_lookup():
    tree = Tree.split(
        0, 0.5,
        Tree.split(1, 0.25, Tree.leaf(1.0), Tree.leaf(2.0)),
        Tree.split(1, 0.75, Tree.leaf(3.0), Tree.leaf(4.0)),
    )
    for i, j in itertools.product(range(10), range(10)):
        x, u = (i + 0.5) / 10, (j + 0.5) / 10
        if x < 0.5:
            expected = 1.0 if u < 0.25 else 2.0
        else:
            expected = 3.0 if u < 0.75 else 4.0
        assert evaluate_tree(tree, [x, u]) == expected


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_partition_property(seed):
    rng = np.random.default_rng(seed)
    tree = random_tree(rng)
    tree.validate()
    for point in rng.random((30, 3)):
        assert tree.find_leaf(point) == brute_leaf(tree, point)


def test_ensemble_is_sum_of_trees(rng):
    trees = [random_tree(rng) for _ in range(5)]
    ens = Ensemble.from_trees(trees)
    pts = rng.random((100, 3))
    direct = np.array([[evaluate_tree(t, p) for t in trees] for p in pts]).sum(axis=1)
    np.testing.assert_allclose(evaluate_ensemble(ens, pts), direct, rtol=0, atol=1e-14)
    assert evaluate_ensemble(Ensemble.from_trees(trees[:1]), pts[0]) == evaluate_tree(trees[0], pts[0])


def test_constant_ensemble():
    ens = Ensemble.constant(7, 0.5)
    assert evaluate_ensemble(ens, [0.2, 0.4]) == pytest.approx(3.5)


def test_ensemble_tree_round_trip(rng):
    trees = [random_tree(rng) for _ in range(4)]
    ens = Ensemble.from_trees(trees)
    assert list(ens.trees()) == trees


def test_breakpoints_trivial_cases():
    flat = Ensemble.constant(3)
    assert list(u_breakpoints(flat, flat, [0.4])) == [0.0, 1.0]
    tree = Tree.split(1, 0.3, Tree.leaf(0.0), Tree.split(1, 0.7, Tree.leaf(1.0), Tree.leaf(2.0)))
    ens = Ensemble.from_trees([tree])
    np.testing.assert_array_equal(u_breakpoints(ens, flat, [0.4]), [0.0, 0.3, 0.7, 1.0])


def test_breakpoints_match_dense_scan(rng):
    for _ in range(10):
        mean = Ensemble.from_trees([random_tree(rng) for _ in range(4)])
        var = Ensemble.from_trees([random_tree(rng) for _ in range(3)], kind='variance')
        x = rng.random(2)
        bps, f, v = interval_table(mean, var, x)
        u = (np.arange(10_000) + 0.5) / 10_000
        pts = np.column_stack([np.tile(x, (u.size, 1)), u])
        fv = np.column_stack([evaluate_ensemble(mean, pts), evaluate_ensemble(var, pts)])
        jumps = u[1:][np.any(fv[1:] != fv[:-1], axis=1)]
        # every observed change sits within one grid step of a breakpoint
        for j in jumps:
            assert np.min(np.abs(bps - j)) <= 1e-4
        # the values on each interval are the ensemble values there
        h = np.searchsorted(bps, u, side='right') - 1
        np.testing.assert_allclose(f[h], fv[:, 0], atol=1e-12)
        np.testing.assert_allclose(v[h], fv[:, 1], atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_constant_between_breakpoints(seed):
    rng = np.random.default_rng(seed)
    mean = Ensemble.from_trees([random_tree(rng) for _ in range(3)])
    var = Ensemble.from_trees([random_tree(rng) for _ in range(2)], kind='variance')
    x = rng.random(2)
    bps = u_breakpoints(mean, var, x)
    assert bps[0] == 0.0 and bps[-1] == 1.0 and np.all(np.diff(bps) > 0)
    for lo, hi in zip(bps[:-1], bps[1:]):
        a, b = lo + (hi - lo) * rng.random(2)
        for ens in (mean, var):
            assert evaluate_ensemble(ens, [*x, a]) == evaluate_ensemble(ens, [*x, b])


def test_shared_leaf_count(rng):
    trees = [random_tree(rng) for _ in range(6)]
    ens = Ensemble.from_trees(trees)
    p = rng.random(3)
    assert shared_leaf_count(ens, p, p) == 6
    assert shared_leaf_count(Ensemble.constant(9), p, rng.random(3)) == 9
    for _ in range(50):
        p1, p2 = rng.random(3), rng.random(3)
        oracle = sum(t.find_leaf(p1) == t.find_leaf(p2) for t in trees)
        assert shared_leaf_count(ens, p1, p2) == oracle


def test_leaf_occupancy():
    assert list(leaf_occupancy(Tree.leaf(), np.zeros((4, 2)))) == [4]
    tree = Tree.split(1, 0.5, Tree.leaf(), Tree.leaf())
    assert list(leaf_occupancy(tree, [[0.1, 0.25], [0.1, 0.75]])) == [1, 1]


def test_leaf_occupancy_matches_membership(rng):
    tree = random_tree(rng)
    pts = rng.random((300, 3))
    counts = leaf_occupancy(tree, pts)
    oracle = [sum(tree.cell(k, 3).contains(p) for p in pts) for k in tree.leaves()]
    assert list(counts) == oracle
    assert counts.sum() == 300


def test_covariance_is_sigma_mu_squared_times_shared_leaves(rng):
    trees = [random_tree(rng) for _ in range(8)]
    sigma_mu = 0.3
    n_rep = 20_000
    pairs = [(rng.random(3), rng.random(3)) for _ in range(5)] + [(np.full(3, 0.2), np.full(3, 0.2))]
    pts = np.vstack([np.vstack(p) for p in pairs])
    leaves_per_tree = [t.leaves() for t in trees]
    samples = np.empty((n_rep, pts.shape[0]))
    for r in range(n_rep):
        redrawn = []
        for t, lv in zip(trees, leaves_per_tree):
            val = t.value.copy()
            val[lv] = sigma_mu * rng.standard_normal(lv.size)
            redrawn.append(Tree(t.axis, t.cut, t.left, t.right, val))
        samples[r] = evaluate_ensemble(Ensemble.from_trees(redrawn), pts)
    ens = Ensemble.from_trees(trees)
    for j, (p1, p2) in enumerate(pairs):
        a, b = samples[:, 2 * j], samples[:, 2 * j + 1]
        prod = a * b
        se = prod.std() / np.sqrt(n_rep)
        assert abs(prod.mean() - sigma_mu**2 * shared_leaf_count(ens, p1, p2)) < 3.5 * se
