"""Regression trees and forests with donor sampling from terminal nodes.

Imputation never extrapolates: a missing cell always receives one of the
observed values that landed in the matching leaf (for forests, in the pooled
leaves of all trees, with multiplicity).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(eq=False)
class TreeNode:
    feature: int = -1
    threshold: float = float("nan")
    left: int = -1
    right: int = -1
    donors: np.ndarray | None = None

    @property
    def is_leaf(self) -> bool:
        return self.donors is not None


@dataclass(eq=False)
class Tree:
    nodes: list[TreeNode]
    n_features: int


@dataclass(eq=False)
class Forest:
    trees: list[Tree]
    mtry: int
    bootstrap_indices: list[np.ndarray] = field(default_factory=list)


def _node_sse(c1: float, c2: float, m: int) -> float:
    return c2 - c1 * c1 / m


def _best_split(
    X: np.ndarray,
    y: np.ndarray,
    idx: np.ndarray,
    min_leaf: int,
    features: np.ndarray,
) -> tuple[float, int, float] | None:
    """Exhaustive best binary split over midpoint thresholds, scanned for all
    candidate features at once.

    Returns (sse_reduction, feature, threshold) or None. Ties break to the
    lowest feature index, then the lowest threshold (the column-major argmax
    below visits exactly that order, and comparisons are strict).
    """
    m = idx.shape[0]
    ysub = y[idx]
    tot1 = float(ysub.sum())
    tot2 = float(ysub @ ysub)
    parent = _node_sse(tot1, tot2, m)
    Xsub = X[np.ix_(idx, features)]
    order = np.argsort(Xsub, axis=0, kind="stable")
    xs = np.take_along_axis(Xsub, order, axis=0)
    ys = ysub[order]  # (m, n_features)
    sizes = np.arange(1, m, dtype=np.float64)[:, None]
    valid = xs[1:] > xs[:-1]
    lo = min_leaf - 1
    hi = m - min_leaf
    if lo > 0:
        valid[:lo] = False
    valid[hi:] = False
    if not valid.any():
        return None
    c1 = np.cumsum(ys, axis=0)[:-1]
    c2 = np.cumsum(ys * ys, axis=0)[:-1]
    left = c2 - c1 * c1 / sizes
    right = (tot2 - c2) - (tot1 - c1) ** 2 / (m - sizes)
    red = np.where(valid, parent - (left + right), -np.inf)
    # feature-major flat argmax: first maximum = lowest feature, lowest threshold
    flat = np.argmax(red.T)
    fpos, k = divmod(int(flat), m - 1)
    best_red = float(red[k, fpos])
    if not best_red > 0.0:
        return None
    return best_red, int(features[fpos]), float((xs[k, fpos] + xs[k + 1, fpos]) / 2.0)


def _grow(
    X: np.ndarray,
    y: np.ndarray,
    idx: np.ndarray,
    nodes: list[TreeNode],
    min_leaf: int,
    min_reduction: float,
    mtry: int,
    rng: np.random.Generator | None,
) -> int:
    node_id = len(nodes)
    nodes.append(TreeNode())
    split = None
    if idx.shape[0] >= 2 * min_leaf:
        q = X.shape[1]
        if mtry < q:
            features = np.sort(rng.choice(q, size=mtry, replace=False))
        else:
            features = np.arange(q)
        split = _best_split(X, y, idx, min_leaf, features)
        if split is not None and (split[0] < min_reduction or split[0] <= 0.0):
            split = None
    if split is None:
        nodes[node_id].donors = idx
        return node_id
    _, j, thr = split
    go_left = X[idx, j] < thr
    nodes[node_id].feature = j
    nodes[node_id].threshold = thr
    nodes[node_id].left = _grow(X, y, idx[go_left], nodes, min_leaf, min_reduction, mtry, rng)
    nodes[node_id].right = _grow(X, y, idx[~go_left], nodes, min_leaf, min_reduction, mtry, rng)
    return node_id


def cart_fit(
    X_obs: np.ndarray,
    y_obs: np.ndarray,
    min_leaf: int = 5,
    cp: float = 1e-4,
) -> Tree:
    """Greedy recursive binary partitioning on the sum-of-squares criterion.

    A split is accepted only when it cuts the parent SSE by at least
    cp * root SSE and leaves at least min_leaf rows on each side. A root-only
    tree is valid output (constant response, too few rows, ...).
    """
    X_obs = np.asarray(X_obs, dtype=np.float64)
    y_obs = np.asarray(y_obs, dtype=np.float64)
    n = X_obs.shape[0]
    if n < 1:
        raise ValueError("cart_fit needs at least one row")
    root_sse = _node_sse(float(y_obs.sum()), float(y_obs @ y_obs), n)
    nodes: list[TreeNode] = []
    _grow(X_obs, y_obs, np.arange(n), nodes, min_leaf, cp * max(root_sse, 0.0), X_obs.shape[1], None)
    return Tree(nodes=nodes, n_features=X_obs.shape[1])


def _route(tree: Tree, row: np.ndarray) -> TreeNode:
    node = tree.nodes[0]
    while not node.is_leaf:
        node = tree.nodes[node.left if row[node.feature] < node.threshold else node.right]
    return node


def cart_impute(
    tree: Tree, y_obs: np.ndarray, X_mis: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """Route each missing row to its leaf and draw one donor value uniformly."""
    X_mis = np.asarray(X_mis, dtype=np.float64)
    y_obs = np.asarray(y_obs, dtype=np.float64)
    if X_mis.shape[1] != tree.n_features:
        raise ValueError(f"X_mis has {X_mis.shape[1]} columns, tree expects {tree.n_features}")
    out = np.empty(X_mis.shape[0])
    for i in range(X_mis.shape[0]):
        donors = _route(tree, X_mis[i]).donors
        out[i] = y_obs[donors[rng.integers(donors.shape[0])]]
    return out


def forest_fit(
    X_obs: np.ndarray,
    y_obs: np.ndarray,
    k: int,
    mtry: int,
    min_leaf: int,
    rng: np.random.Generator,
    cp: float = 1e-4,
    bootstrap: bool = True,
) -> Forest:
    """k trees on with-replacement row resamples, mtry features drawn without
    replacement independently at every split. ``bootstrap=False`` fits every
    tree on the original rows (k=1, mtry=q then reduces to cart_fit)."""
    X_obs = np.asarray(X_obs, dtype=np.float64)
    y_obs = np.asarray(y_obs, dtype=np.float64)
    n, q = X_obs.shape
    if k < 1 or not 1 <= mtry <= q:
        raise ValueError(f"need k >= 1 and 1 <= mtry <= q, got k={k}, mtry={mtry}, q={q}")
    trees = []
    boots = []
    for _ in range(k):
        boot = rng.integers(0, n, size=n) if bootstrap else np.arange(n)
        Xb = X_obs[boot]
        yb = y_obs[boot]
        root_sse = _node_sse(float(yb.sum()), float(yb @ yb), n)
        nodes: list[TreeNode] = []
        _grow(Xb, yb, np.arange(n), nodes, min_leaf, cp * max(root_sse, 0.0), mtry, rng)
        # leaf donors refer to original training rows, multiplicity preserved
        for node in nodes:
            if node.is_leaf:
                node.donors = boot[node.donors]
        trees.append(Tree(nodes=nodes, n_features=q))
        boots.append(boot)
    return Forest(trees=trees, mtry=mtry, bootstrap_indices=boots)


def forest_impute(
    forest: Forest, y_obs: np.ndarray, X_mis: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """Pool the leaves of all trees (union with multiplicity) per missing row
    and draw one donor value uniformly from the pool."""
    X_mis = np.asarray(X_mis, dtype=np.float64)
    y_obs = np.asarray(y_obs, dtype=np.float64)
    out = np.empty(X_mis.shape[0])
    for i in range(X_mis.shape[0]):
        pool = np.concatenate([_route(tree, X_mis[i]).donors for tree in forest.trees])
        out[i] = y_obs[pool[rng.integers(pool.shape[0])]]
    return out
