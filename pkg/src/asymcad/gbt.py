"""Gradient boosted regression trees for binary classification.

Logistic loss, exact greedy axis-aligned splits, second-order (Newton)
leaf values with an L2 leaf penalty, and shrinkage. Shrinkage and depth
are selected by stratified 16-fold cross-validation on mean validation
logloss; remaining knobs have a small bounded coordinate-search helper.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field

import numpy as np


class GbtError(Exception):
    pass


LEAF_LAMBDA = 1.0
MAX_ABS_LEAF = 10.0  # keeps Newton leaf values finite on pure nodes

DEFAULT_GRID = tuple((eta, depth) for eta in (0.05, 0.1, 0.3) for depth in (2, 3, 4, 6))


@dataclass
class GbtParams:
    n_rounds: int = 100
    shrinkage: float = 0.1
    max_depth: int = 3
    leaf_lambda: float = LEAF_LAMBDA
    min_child_weight: float = 1e-6

    def validate(self):
        if self.n_rounds < 1:
            raise GbtError("need at least one boosting round")
        if not 0.0 <= self.shrinkage <= 1.0:
            raise GbtError("shrinkage must lie in [0, 1]")
        if self.max_depth < 1:
            raise GbtError("max_depth must be >= 1")


@dataclass
class TreeNode:
    feature: int = -1  # -1 marks a leaf
    threshold: float = 0.0
    value: float = 0.0
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None

    @property
    def is_leaf(self) -> bool:
        return self.feature < 0


@dataclass
class GbtModel:
    params: GbtParams
    base_score: float
    trees: list = field(default_factory=list)
    train_losses: list = field(default_factory=list)

    def decision_function(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        margin = np.full(X.shape[0], self.base_score)
        for tree in self.trees:
            margin += self.params.shrinkage * _tree_predict(tree, X)
        return margin

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return _sigmoid(self.decision_function(X))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def logloss(y: np.ndarray, p: np.ndarray) -> float:
    p = np.clip(p, 1e-15, 1.0 - 1e-15)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1.0 - p)))


def _leaf_value(g_sum: float, h_sum: float, lam: float) -> float:
    v = -g_sum / (h_sum + lam)
    return max(-MAX_ABS_LEAF, min(MAX_ABS_LEAF, v))


def _best_split(X, g, h, idx, lam, min_child_weight):
    """Exact greedy search over all features at once; returns
    (gain, feature, threshold) or None."""
    Xs = X[idx]
    gs = g[idx]
    hs = h[idx]
    n = idx.size
    g_tot = gs.sum()
    h_tot = hs.sum()
    parent = g_tot**2 / (h_tot + lam)
    order = np.argsort(Xs, axis=0, kind="stable")  # (n, F)
    sv = np.take_along_axis(Xs, order, axis=0)
    gl = np.cumsum(gs[order], axis=0)[:-1]
    hl = np.cumsum(hs[order], axis=0)[:-1]
    gr = g_tot - gl
    hr = h_tot - hl
    # splits only between distinct adjacent values, with enough hessian
    # weight on both sides
    ok = (sv[1:] != sv[:-1]) & (hl >= min_child_weight) & (hr >= min_child_weight)
    if not ok.any():
        return None
    gain = gl**2 / (hl + lam) + gr**2 / (hr + lam) - parent
    gain[~ok] = -np.inf
    flat = int(np.argmax(gain.T))  # feature-major: ties favor lower feature
    f, k = divmod(flat, n - 1)
    if gain[k, f] <= 1e-12:
        return None
    thr = 0.5 * (sv[k, f] + sv[k + 1, f])
    return (float(gain[k, f]), int(f), float(thr))


def _grow_tree(X, g, h, idx, depth, params) -> TreeNode:
    lam = params.leaf_lambda
    if depth >= params.max_depth or idx.size < 2:
        return TreeNode(value=_leaf_value(g[idx].sum(), h[idx].sum(), lam))
    found = _best_split(X, g, h, idx, lam, params.min_child_weight)
    if found is None:
        return TreeNode(value=_leaf_value(g[idx].sum(), h[idx].sum(), lam))
    _, f, thr = found
    go_left = X[idx, f] <= thr
    return TreeNode(
        feature=f, threshold=thr,
        left=_grow_tree(X, g, h, idx[go_left], depth + 1, params),
        right=_grow_tree(X, g, h, idx[~go_left], depth + 1, params))


def _tree_predict(node: TreeNode, X: np.ndarray) -> np.ndarray:
    out = np.empty(X.shape[0])
    stack = [(node, np.arange(X.shape[0]))]
    while stack:
        cur, idx = stack.pop()
        if cur.is_leaf:
            out[idx] = cur.value
            continue
        go_left = X[idx, cur.feature] <= cur.threshold
        stack.append((cur.left, idx[go_left]))
        stack.append((cur.right, idx[~go_left]))
    return out


def fit_gbt(X: np.ndarray, y: np.ndarray, params: GbtParams | None = None) -> GbtModel:
    params = params or GbtParams()
    params.validate()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != y.size:
        raise GbtError("X must be 2-d with one row per label")
    pbar = float(y.mean())
    if pbar in (0.0, 1.0):
        raise GbtError("training labels contain a single class")
    base = math.log(pbar / (1.0 - pbar))
    model = GbtModel(params=params, base_score=base)
    margin = np.full(y.size, base)
    all_idx = np.arange(y.size)
    for _ in range(params.n_rounds):
        p = _sigmoid(margin)
        g = p - y
        h = np.maximum(p * (1.0 - p), 1e-16)
        tree = _grow_tree(X, g, h, all_idx, 0, params)
        margin = margin + params.shrinkage * _tree_predict(tree, X)
        model.trees.append(tree)
        model.train_losses.append(logloss(y, _sigmoid(margin)))
    return model


# ---------------------------------------------------------------------------
# cross-validation

N_FOLDS = 16


def stratified_folds(y: np.ndarray, n_folds: int, seed: int) -> list[np.ndarray]:
    """Round-robin assignment within each class after a seeded shuffle."""
    y = np.asarray(y)
    rng = np.random.default_rng(seed)
    assign = np.empty(y.size, dtype=int)
    for cls in (0, 1):
        members = np.flatnonzero(y == cls)
        rng.shuffle(members)
        assign[members] = np.arange(members.size) % n_folds
    return [np.flatnonzero(assign == f) for f in range(n_folds)]


def cross_validate(X: np.ndarray, y: np.ndarray, grid=DEFAULT_GRID,
                   n_folds: int = N_FOLDS, seed: int = 0,
                   n_rounds: int = 100):
    """Best (shrinkage, depth) by mean validation logloss; ties resolved
    toward smaller depth, then smaller shrinkage."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if min(int((y == 0).sum()), int((y == 1).sum())) < n_folds:
        raise GbtError(f"need at least {n_folds} samples per class")
    folds = stratified_folds(y, n_folds, seed)
    table = {}
    for eta, depth in grid:
        if (eta, depth) in table:
            continue
        losses = []
        for f, val_idx in enumerate(folds):
            train_idx = np.concatenate([folds[k] for k in range(n_folds) if k != f])
            model = fit_gbt(X[train_idx], y[train_idx],
                            GbtParams(n_rounds=n_rounds, shrinkage=eta, max_depth=depth))
            losses.append(logloss(y[val_idx].astype(float), model.predict_proba(X[val_idx])))
        table[(eta, depth)] = float(np.mean(losses))
    best = min(table, key=lambda k: (table[k], k[1], k[0]))
    return best, table


def coordinate_search(X, y, X_val, y_val, start: GbtParams,
                      round_choices=(50, 100, 200), mcw_choices=(1e-6, 1e-2, 1.0),
                      max_sweeps: int = 2):
    """Bounded coordinate descent over round count and min child weight,
    scored by validation logloss."""
    best = GbtParams(**vars(start))
    best_loss = None

    def score(p: GbtParams) -> float:
        model = fit_gbt(X, y, p)
        return logloss(np.asarray(y_val, float), model.predict_proba(X_val))

    best_loss = score(best)
    for _ in range(max_sweeps):
        improved = False
        for attr, choices in (("n_rounds", round_choices), ("min_child_weight", mcw_choices)):
            for c in choices:
                trial = GbtParams(**vars(best))
                setattr(trial, attr, c)
                loss = score(trial)
                if loss < best_loss - 1e-12:
                    best, best_loss = trial, loss
                    improved = True
        if not improved:
            break
    return best, best_loss


# ---------------------------------------------------------------------------
# versioned binary model file

_MAGIC = b"GBTM"
_VERSION = 1


def _flatten(node: TreeNode, nodes: list) -> int:
    i = len(nodes)
    nodes.append(node)
    if not node.is_leaf:
        node._li = _flatten(node.left, nodes)  # type: ignore[attr-defined]
        node._ri = _flatten(node.right, nodes)  # type: ignore[attr-defined]
    return i


def save_model(model: GbtModel, path) -> None:
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<IdIdddI", _VERSION, model.base_score,
                            model.params.max_depth, model.params.shrinkage,
                            model.params.leaf_lambda, model.params.min_child_weight,
                            len(model.trees)))
        for tree in model.trees:
            nodes: list[TreeNode] = []
            _flatten(tree, nodes)
            f.write(struct.pack("<I", len(nodes)))
            for node in nodes:
                li = getattr(node, "_li", 0)
                ri = getattr(node, "_ri", 0)
                f.write(struct.pack("<iddII", node.feature, node.threshold,
                                    node.value, li, ri))


def load_model(path) -> GbtModel:
    with open(path, "rb") as f:
        if f.read(4) != _MAGIC:
            raise GbtError("not a boosted-tree model file")
        version, base, depth, eta, lam, mcw, n_trees = struct.unpack(
            "<IdIdddI", f.read(struct.calcsize("<IdIdddI")))
        if version != _VERSION:
            raise GbtError(f"unsupported model version {version}")
        params = GbtParams(n_rounds=max(1, n_trees), shrinkage=eta, max_depth=depth,
                           leaf_lambda=lam, min_child_weight=mcw)
        trees = []
        rec = struct.Struct("<iddII")
        for _ in range(n_trees):
            (n_nodes,) = struct.unpack("<I", f.read(4))
            raw = [rec.unpack(f.read(rec.size)) for _ in range(n_nodes)]
            nodes = [TreeNode(feature=r[0], threshold=r[1], value=r[2]) for r in raw]
            for node, r in zip(nodes, raw):
                if not node.is_leaf:
                    node.left = nodes[r[3]]
                    node.right = nodes[r[4]]
            trees.append(nodes[0])
        return GbtModel(params=params, base_score=base, trees=trees)


def write_predictions_csv(path, sample_ids, posteriors) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["sample_id", "posterior"])
        for sid, p in zip(sample_ids, posteriors):
            writer.writerow([sid, f"{p:.10f}"])
