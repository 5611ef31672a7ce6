"""Decision trees and sums of trees over the augmented space (x, u).

A point is a vector ``(x_1, ..., x_p, u)``; the latent coordinate is the
last axis. Internal nodes hold a rule ``point[axis] < cut``: strictly smaller
values go left, ties go right.

Trees are explicit node records with child indices. An :class:`Ensemble`
stores many trees back to back in flat arrays (child indices are global),
which is the layout the compiled kernels below operate on.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numba
import numpy as np

__all__ = [
    'SplitRule',
    'Tree',
    'Ensemble',
    'Cell',
    'TreeStructureError',
    'evaluate_tree',
    'evaluate_ensemble',
    'u_breakpoints',
    'interval_table',
    'shared_leaf_count',
    'leaf_occupancy',
]

LEAF = -1


class TreeStructureError(ValueError):
    """A tree violates the node-record invariants."""


@dataclass(frozen=True)
class SplitRule:
    axis: int
    cutpoint: float


@dataclass(frozen=True)
class Cell:
    """Half-open box ``[lower, upper)`` of a node, one interval per axis."""

    lower: np.ndarray
    upper: np.ndarray

    def contains(self, point) -> bool:
        point = np.asarray(point, dtype=float)
        return bool(np.all(point >= self.lower) and np.all(point < self.upper))


# ---------------------------------------------------------------------------
# compiled kernels


@numba.njit(cache=True)
def _find_leaf(axis, cut, left, right, root, point):
    k = root
    while axis[k] >= 0:
        if point[axis[k]] < cut[k]:
            k = left[k]
        else:
            k = right[k]
    return k


@numba.njit(cache=True)
def _tree_pieces(axis, cut, left, right, root, point, latent_axis, out_lo, out_node, start, stack):
    """Write the u-pieces of one tree at fixed x, in ascending order of u.

    Each piece is a maximal u-interval over which the point lands in one
    leaf; pieces tile [0, 1). Only the lower end and the leaf are stored,
    the upper end being the next piece's lower end (or 1).
    ``stack`` is scratch space of shape (>= depth + 2, 3).
    """
    top = 0
    stack[0, 0] = root
    stack[0, 1] = 0.0
    stack[0, 2] = 1.0
    count = 0
    while top >= 0:
        node = int(stack[top, 0])
        lo = stack[top, 1]
        hi = stack[top, 2]
        top -= 1
        ax = axis[node]
        if ax < 0:
            out_lo[start + count] = lo
            out_node[start + count] = node
            count += 1
        elif ax == latent_axis:
            c = cut[node]
            if c >= hi:
                top += 1
                stack[top, 0] = left[node]
                stack[top, 1] = lo
                stack[top, 2] = hi
            elif c <= lo:
                top += 1
                stack[top, 0] = right[node]
                stack[top, 1] = lo
                stack[top, 2] = hi
            else:
                top += 1
                stack[top, 0] = right[node]
                stack[top, 1] = c
                stack[top, 2] = hi
                top += 1
                stack[top, 0] = left[node]
                stack[top, 1] = lo
                stack[top, 2] = c
        else:
            top += 1
            stack[top, 0] = left[node] if point[ax] < cut[node] else right[node]
            stack[top, 1] = lo
            stack[top, 2] = hi
    return count


@numba.njit(cache=True)
def _collect_events(axis, cut, left, right, value, roots, point, latent_axis, ev_pos, ev_delta, n_ev, lo_buf, node_buf, stack):
    """Accumulate jump events of u -> sum of trees at fixed x.

    Returns (value at u = 0, new event count).
    """
    base = 0.0
    for t in range(roots.shape[0]):
        cnt = _tree_pieces(axis, cut, left, right, roots[t], point, latent_axis, lo_buf, node_buf, 0, stack)
        base += value[node_buf[0]]
        for j in range(1, cnt):
            ev_pos[n_ev] = lo_buf[j]
            ev_delta[n_ev] = value[node_buf[j]] - value[node_buf[j - 1]]
            n_ev += 1
    return base, n_ev


@numba.njit(cache=True)
def _interval_table(m_axis, m_cut, m_left, m_right, m_value, m_roots, v_axis, v_cut, v_left, v_right, v_value, v_roots, point, latent_axis):
    n_m = m_axis.shape[0]
    n_v = v_axis.shape[0]
    cap = n_m + n_v + 2
    ev_pos = np.empty(cap)
    ev_df = np.zeros(cap)
    ev_dv = np.zeros(cap)
    lo_buf = np.empty(max(n_m, n_v) + 1)
    node_buf = np.empty(max(n_m, n_v) + 1, dtype=np.int64)
    stack = np.empty((max(n_m, n_v) + 2, 3))
    tmp_delta = np.empty(cap)
    f0, n_f = _collect_events(m_axis, m_cut, m_left, m_right, m_value, m_roots, point, latent_axis, ev_pos, tmp_delta, 0, lo_buf, node_buf, stack)
    for j in range(n_f):
        ev_df[j] = tmp_delta[j]
    v0, n_all = _collect_events(v_axis, v_cut, v_left, v_right, v_value, v_roots, point, latent_axis, ev_pos, tmp_delta, n_f, lo_buf, node_buf, stack)
    for j in range(n_f, n_all):
        ev_dv[j] = tmp_delta[j]
    order = np.argsort(ev_pos[:n_all], kind='mergesort')
    bps = np.empty(n_all + 2)
    fv = np.empty(n_all + 1)
    vv = np.empty(n_all + 1)
    bps[0] = 0.0
    fv[0] = f0
    vv[0] = v0
    k = 0
    for j in range(n_all):
        e = order[j]
        pos = ev_pos[e]
        if pos > bps[k]:
            k += 1
            bps[k] = pos
            fv[k] = fv[k - 1]
            vv[k] = vv[k - 1]
        fv[k] += ev_df[e]
        vv[k] += ev_dv[e]
    bps[k + 1] = 1.0
    return bps[: k + 2].copy(), fv[: k + 1].copy(), vv[: k + 1].copy()


@numba.njit(cache=True)
def _evaluate_many(axis, cut, left, right, value, roots, points):
    out = np.zeros(points.shape[0])
    for i in range(points.shape[0]):
        s = 0.0
        for t in range(roots.shape[0]):
            s += value[_find_leaf(axis, cut, left, right, roots[t], points[i])]
        out[i] = s
    return out


@numba.njit(cache=True)
def _leaves_of(axis, cut, left, right, roots, points):
    out = np.empty((points.shape[0], roots.shape[0]), dtype=np.int64)
    for i in range(points.shape[0]):
        for t in range(roots.shape[0]):
            out[i, t] = _find_leaf(axis, cut, left, right, roots[t], points[i])
    return out


# ---------------------------------------------------------------------------
# trees


class Tree:
    """One binary decision tree; node 0 is the root.

    Parameters
    ----------
    axis : array of int
        Split axis per node, ``-1`` for leaves.
    cut : array of float
        Cutpoint per internal node (ignored at leaves).
    left, right : array of int
        Child indices per internal node, ``-1`` at leaves.
    value : array of float
        Leaf parameter per leaf (ignored at internal nodes).
    """

    def __init__(self, axis, cut, left, right, value):
        self.axis = np.asarray(axis, dtype=np.int64)
        self.cut = np.asarray(cut, dtype=np.float64)
        self.left = np.asarray(left, dtype=np.int64)
        self.right = np.asarray(right, dtype=np.int64)
        self.value = np.asarray(value, dtype=np.float64)

    @classmethod
    def leaf(cls, value: float = 0.0) -> Tree:
        return cls([LEAF], [np.nan], [LEAF], [LEAF], [value])

    @classmethod
    def split(cls, axis: int, cut: float, left: Tree, right: Tree) -> Tree:
        """Join two subtrees under a new root with rule ``point[axis] < cut``."""
        nl = left.n_nodes
        shift_l = np.where(left.left >= 0, 1, 0)
        shift_r = np.where(right.left >= 0, 1 + nl, 0)
        return cls(
            np.concatenate([[axis], left.axis, right.axis]),
            np.concatenate([[cut], left.cut, right.cut]),
            np.concatenate([[1], left.left + shift_l, right.left + shift_r]),
            np.concatenate([[1 + nl], left.right + shift_l, right.right + shift_r]),
            np.concatenate([[np.nan], left.value, right.value]),
        )

    @property
    def n_nodes(self) -> int:
        return int(self.axis.shape[0])

    def leaves(self) -> np.ndarray:
        """Leaf node indices in preorder."""
        return np.array([k for k in self.preorder() if self.axis[k] < 0], dtype=np.int64)

    def preorder(self) -> list[int]:
        out, stack = [], [0]
        while stack:
            k = stack.pop()
            out.append(k)
            if self.axis[k] >= 0:
                stack.append(int(self.right[k]))
                stack.append(int(self.left[k]))
        return out

    def in_preorder(self) -> Tree:
        """Same tree with nodes renumbered in preorder."""
        order = np.array(self.preorder(), dtype=np.int64)
        new_id = np.full(self.n_nodes, LEAF, dtype=np.int64)
        new_id[order] = np.arange(order.shape[0])

        def remap(idx):
            idx = idx[order]
            return np.where(idx >= 0, new_id[np.maximum(idx, 0)], LEAF)

        return Tree(self.axis[order], self.cut[order], remap(self.left), remap(self.right), self.value[order])

    def depth(self) -> int:
        best, stack = 0, [(0, 0)]
        while stack:
            k, d = stack.pop()
            best = max(best, d)
            if self.axis[k] >= 0:
                stack.append((int(self.left[k]), d + 1))
                stack.append((int(self.right[k]), d + 1))
        return best

    def validate(self) -> None:
        """Raise :class:`TreeStructureError` unless every node is well formed."""
        n = self.n_nodes
        arrays = (self.cut, self.left, self.right, self.value)
        if n == 0 or any(a.shape != (n,) for a in arrays):
            raise TreeStructureError('node arrays must be non-empty and of equal length')
        seen, stack = set(), [0]
        while stack:
            k = stack.pop()
            if k in seen:
                raise TreeStructureError(f'node {k} reached twice')
            seen.add(k)
            if self.axis[k] < 0:
                if not np.isfinite(self.value[k]):
                    raise TreeStructureError(f'leaf {k} has no parameter')
                continue
            if not (0 <= self.left[k] < n and 0 <= self.right[k] < n):
                raise TreeStructureError(f'internal node {k} lacks two children')
            if not np.isfinite(self.cut[k]):
                raise TreeStructureError(f'internal node {k} has no cutpoint')
            stack.extend((int(self.right[k]), int(self.left[k])))
        if len(seen) != n:
            raise TreeStructureError('unreachable nodes present')

    def cell(self, node: int, n_axes: int) -> Cell:
        """Box of ``node``; x axes start unbounded, the latent axis is [0, 1)."""
        lower = np.full(n_axes, -np.inf)
        upper = np.full(n_axes, np.inf)
        lower[-1], upper[-1] = 0.0, 1.0
        parent = {}
        for k in range(self.n_nodes):
            if self.axis[k] >= 0:
                parent[int(self.left[k])] = (k, True)
                parent[int(self.right[k])] = (k, False)
        k = node
        while k in parent:
            p, is_left = parent[k]
            ax, c = self.axis[p], self.cut[p]
            if is_left:
                upper[ax] = min(upper[ax], c)
            else:
                lower[ax] = max(lower[ax], c)
            k = p
        return Cell(lower, upper)

    def find_leaf(self, point) -> int:
        point = np.asarray(point, dtype=np.float64)
        return int(_find_leaf(self.axis, self.cut, self.left, self.right, 0, point))

    def __eq__(self, other):
        if not isinstance(other, Tree):
            return NotImplemented
        return _canonical(self) == _canonical(other)

    def __repr__(self):
        return f'Tree(n_nodes={self.n_nodes}, depth={self.depth()})'


def _canonical(tree: Tree) -> tuple:
    out = []
    for k in tree.preorder():
        if tree.axis[k] < 0:
            out.append((LEAF, float(tree.value[k])))
        else:
            out.append((int(tree.axis[k]), float(tree.cut[k])))
    return tuple(out)


class Ensemble:
    """A sum of trees stored in flat node arrays.

    ``roots[t]`` is the index of tree ``t``'s root; child indices are global.
    Each tree occupies a contiguous block stored in preorder.
    ``kind`` is ``'mean'`` (the sum is a location) or ``'variance'`` (the sum
    is a log-variance offset).
    """

    def __init__(self, axis, cut, left, right, value, roots, kind: str = 'mean'):
        if kind not in ('mean', 'variance'):
            raise ValueError(f'unknown ensemble kind {kind!r}')
        self.axis = np.ascontiguousarray(axis, dtype=np.int64)
        self.cut = np.ascontiguousarray(cut, dtype=np.float64)
        self.left = np.ascontiguousarray(left, dtype=np.int64)
        self.right = np.ascontiguousarray(right, dtype=np.int64)
        self.value = np.ascontiguousarray(value, dtype=np.float64)
        self.roots = np.ascontiguousarray(roots, dtype=np.int64)
        self.kind = kind

    @classmethod
    def from_trees(cls, trees: Sequence[Tree], kind: str = 'mean') -> Ensemble:
        axis, cut, left, right, value, roots = [], [], [], [], [], []
        offset = 0
        trees = [tree.in_preorder() for tree in trees]
        for tree in trees:
            roots.append(offset)
            axis.append(tree.axis)
            cut.append(tree.cut)
            left.append(np.where(tree.left >= 0, tree.left + offset, LEAF))
            right.append(np.where(tree.right >= 0, tree.right + offset, LEAF))
            value.append(tree.value)
            offset += tree.n_nodes
        if not trees:
            empty_i, empty_f = np.zeros(0, np.int64), np.zeros(0)
            return cls(empty_i, empty_f, empty_i, empty_i, empty_f, empty_i, kind)
        return cls(
            np.concatenate(axis), np.concatenate(cut), np.concatenate(left),
            np.concatenate(right), np.concatenate(value), np.array(roots), kind,
        )

    @classmethod
    def constant(cls, n_trees: int, value: float = 0.0, kind: str = 'mean') -> Ensemble:
        return cls.from_trees([Tree.leaf(value)] * n_trees, kind)

    @property
    def n_trees(self) -> int:
        return int(self.roots.shape[0])

    def tree(self, t: int) -> Tree:
        start = int(self.roots[t])
        stop = int(self.roots[t + 1]) if t + 1 < self.n_trees else self.axis.shape[0]
        def rebase(idx):
            return np.where(idx >= 0, idx - start, LEAF)
        return Tree(
            self.axis[start:stop], self.cut[start:stop], rebase(self.left[start:stop]),
            rebase(self.right[start:stop]), self.value[start:stop],
        )

    def trees(self) -> Iterator[Tree]:
        for t in range(self.n_trees):
            yield self.tree(t)

    def arrays(self):
        return self.axis, self.cut, self.left, self.right, self.value, self.roots

    def __eq__(self, other):
        if not isinstance(other, Ensemble):
            return NotImplemented
        return self.kind == other.kind and all(
            np.array_equal(a, b, equal_nan=True) for a, b in zip(self.arrays(), other.arrays())
        )

    def __repr__(self):
        return f'Ensemble(kind={self.kind!r}, n_trees={self.n_trees}, n_nodes={self.axis.shape[0]})'


# ---------------------------------------------------------------------------
# public operations


def evaluate_tree(tree: Tree, point) -> float:
    """Leaf parameter of the leaf containing ``point``."""
    leaf = tree.find_leaf(point)
    v = tree.value[leaf]
    if not np.isfinite(v):
        raise TreeStructureError(f'leaf {leaf} has no parameter')
    return float(v)


def evaluate_ensemble(ens: Ensemble, point) -> float | np.ndarray:
    """Sum of the trees at one point, or at each row of a 2-d array of points."""
    pts = np.ascontiguousarray(point, dtype=np.float64)
    single = pts.ndim == 1
    out = _evaluate_many(ens.axis, ens.cut, ens.left, ens.right, ens.value, ens.roots, np.atleast_2d(pts))
    return float(out[0]) if single else out


def _point_for(x, latent_axis: int):
    pt = np.zeros(latent_axis + 1)
    pt[:latent_axis] = np.asarray(x, dtype=np.float64)
    return pt


def interval_table(mean_ens: Ensemble, var_ens: Ensemble, x):
    """Piecewise-constant description of u -> (f(x, u), v(x, u)).

    Returns
    -------
    breakpoints : array, shape (k + 1,)
        ``0 = b_0 < b_1 < ... < b_k = 1``.
    f, v : arrays, shape (k,)
        Mean and log-variance sums on ``[b_h, b_{h+1})``.
    """
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    point = _point_for(x, x.shape[0])
    return _interval_table(*mean_ens.arrays(), *var_ens.arrays(), point, x.shape[0])


def u_breakpoints(mean_ens: Ensemble, var_ens: Ensemble, x) -> np.ndarray:
    """Sorted u-values in [0, 1] where (f(x, .), v(x, .)) may jump, plus 0 and 1."""
    return interval_table(mean_ens, var_ens, x)[0]


def shared_leaf_count(ens: Ensemble, p1, p2) -> int:
    """Number of trees in which the two points share a leaf."""
    pts = np.ascontiguousarray(np.vstack([p1, p2]), dtype=np.float64)
    leaves = _leaves_of(ens.axis, ens.cut, ens.left, ens.right, ens.roots, pts)
    return int(np.sum(leaves[0] == leaves[1]))


def leaf_occupancy(tree: Tree, points) -> np.ndarray:
    """Number of points in each leaf, aligned with ``tree.leaves()``."""
    pts = np.ascontiguousarray(np.atleast_2d(points), dtype=np.float64)
    leaves = tree.leaves()
    if pts.shape[0] == 0:
        return np.zeros(leaves.shape[0], dtype=np.int64)
    hit = _leaves_of(tree.axis, tree.cut, tree.left, tree.right, np.zeros(1, np.int64), pts)[:, 0]
    return np.array([np.sum(hit == k) for k in leaves], dtype=np.int64)
