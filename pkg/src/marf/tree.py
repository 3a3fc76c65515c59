"""Decision trees over cluster features: the adaptive-switch tree plus the
hard-split (SRF) and all-soft (PRF) baseline trainers.

An adaptive-switch tree mixes three node kinds. Regular nodes route a sample
wholly left or right by ``value < tau``. Dichotomous nodes send every sample
both ways, weighted by the Gaussian CDF of the split point under the sample's
feature value (noise std taken from the global feature statistics). A node
becomes dichotomous when the locally measured confidence of its selected
feature exceeds the global confidence by at least epsilon, i.e. the feature
looks better on this node's subset than it really is.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Union

import numpy as np
from scipy.special import ndtr

from . import _kernels
from .features import N_FEATURES, ConfidenceReport, FeatureStats, conflict_check

_SQRT2 = math.sqrt(2.0)

class NoValidSplitError(ValueError):
    """Every candidate feature is constant over the node's samples."""


@dataclass(frozen=True)
class TrainParams:
    """Training hyperparameters. Defaults follow the reference configuration."""

    epsilon: float = 0.1
    max_depth: int = 20
    min_samples: int = 2
    gini_epsilon: float = math.exp(-6)
    candidate_count: int = int(math.isqrt(N_FEATURES))  # floor(sqrt(17)) = 4
    seed: int = 0
    min_weight_mass: float = 1e-3  # fraction of the node's sample count
    confidence_center: str = "positive_mean"

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "max_depth": self.max_depth,
            "min_samples": self.min_samples,
            "gini_epsilon": self.gini_epsilon,
            "candidate_count": self.candidate_count,
            "seed": self.seed,
            "min_weight_mass": self.min_weight_mass,
            "confidence_center": self.confidence_center,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TrainParams":
        return cls(**{k: data[k] for k in cls().to_dict()})


@dataclass
class Leaf:
    label: int
    depth: int


@dataclass
class Regular:
    feature: int
    tau: float
    left: "TreeNode"
    right: "TreeNode"


@dataclass
class Dichotomous:
    feature: int
    tau: float
    sigma: float  # > 0; zero-variance features never become dichotomous
    left: "TreeNode"
    right: "TreeNode"


TreeNode = Union[Leaf, Regular, Dichotomous]


@dataclass(frozen=True)
class TreeStats:
    leaf_count: int
    mean_leaf_depth: float
    depth_histogram: dict[int, int]
    node_count: int
    dichotomous_count: int


@dataclass
class Tree:
    root: TreeNode
    params: TrainParams
    stats: TreeStats = None  # type: ignore[assignment]

    def __post_init__(self):
        if self.stats is None:
            self.stats = tree_stats_of_node(self.root)


class SplitResult(NamedTuple):
    feature: int
    tau: float
    objective: float


class ThresholdResult(NamedTuple):
    tau: float
    objective: float


@dataclass
class NodeTrace:
    """Per-internal-node training record (for diagnostics and invariants)."""

    depth: int
    n_samples: int
    feature: int
    tau: float
    global_c: float
    local_c: float
    conflict: bool
    kind: str


def gini(labels, weights) -> float:
    """Two-class weighted Gini impurity: 2 * (W+/W) * (W-/W)."""
    labels = np.asarray(labels)
    weights = np.asarray(weights, dtype=np.float64)
    total = float(weights.sum())
    if not total > 0:
        raise ValueError("total weight must be > 0")
    w_pos = float(weights[labels == 1].sum())
    return 2.0 * (w_pos / total) * ((total - w_pos) / total)


def _impurity_terms(w_pos: np.ndarray, w_tot: np.ndarray) -> np.ndarray:
    """G * W for split sides, elementwise: 2 * W+ * W- / W (0 where W == 0)."""
    safe = np.where(w_tot > 0, w_tot, 1.0)
    return np.where(w_tot > 0, 2.0 * w_pos * (w_tot - w_pos) / safe, 0.0)


def find_best_split(X, y, w, candidates) -> SplitResult:
    """Best hard split over midpoint thresholds of the candidate features.

    Minimizes G_left * W_left + G_right * W_right. Ties prefer the lower
    feature index, then the smaller threshold.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    w = np.asarray(w, dtype=np.float64)
    best: Optional[SplitResult] = None
    for j in sorted(int(c) for c in candidates):
        v = X[:, j]
        order = np.argsort(v, kind="stable")
        vs = v[order]
        ws = w[order]
        wp = ws * (y[order] == 1)
        boundaries = np.flatnonzero(vs[1:] > vs[:-1])
        if boundaries.size == 0:
            continue
        cw = np.cumsum(ws)
        cwp = np.cumsum(wp)
        w_left = cw[boundaries]
        wp_left = cwp[boundaries]
        obj = _impurity_terms(wp_left, w_left) + _impurity_terms(cwp[-1] - wp_left, cw[-1] - w_left)
        i = int(np.argmin(obj))  # first minimum = smallest tau
        if best is None or obj[i] < best.objective:
            tau = 0.5 * (vs[boundaries[i]] + vs[boundaries[i] + 1])
            best = SplitResult(feature=j, tau=float(tau), objective=float(obj[i]))
    if best is None:
        raise NoValidSplitError("all candidate features are constant")
    return best


def dichotomous_weights(x_value: float, tau: float, sigma: float):
    """Gaussian-CDF branch weights: w_l = Phi((tau - x) / sigma), w_r = 1 - w_l.

    Accepts scalars or arrays; sigma must be > 0.
    """
    if np.any(np.asarray(sigma) <= 0):
        raise ValueError("sigma must be > 0")
    w_l = ndtr((tau - np.asarray(x_value, dtype=np.float64)) / sigma)
    return w_l, 1.0 - w_l


def _midpoint_grid(values: np.ndarray) -> np.ndarray:
    distinct = np.unique(values)
    return 0.5 * (distinct[:-1] + distinct[1:])


def find_best_dichotomous_threshold(values, y, w, sigma: float) -> ThresholdResult:
    """Best soft split of one feature over the same midpoint grid.

    Every sample contributes w * Phi((tau - x) / sigma) to the left pool and
    the complement to the right pool; the objective is G_l * W_l + G_r * W_r.
    Ties prefer the smaller threshold.
    """
    if not sigma > 0:
        raise ValueError("sigma must be > 0")
    values = np.ascontiguousarray(values, dtype=np.float64)
    y = np.asarray(y)
    w = np.ascontiguousarray(w, dtype=np.float64)
    taus = _midpoint_grid(values)
    if taus.size == 0:
        raise NoValidSplitError("feature is constant")
    is_pos = np.ascontiguousarray(y == 1, dtype=np.bool_)
    best_i, best_obj = _kernels.soft_threshold_scan(values, is_pos, w, taus, float(sigma))
    return ThresholdResult(tau=float(taus[best_i]), objective=float(best_obj))


def _dominant_label(y: np.ndarray, w: np.ndarray) -> int:
    """Label with the larger weight mass; exact ties break to non-leg."""
    w_pos = float(w[y == 1].sum())
    w_neg = float(w.sum()) - w_pos
    return 1 if w_pos > w_neg else 0


def _stop_reason(y, w, depth, params: TrainParams) -> bool:
    n = y.shape[0]
    if n < params.min_samples or depth > params.max_depth:
        return True
    w_sum = float(w.sum())
    if w_sum < params.min_weight_mass * n or w_sum <= 0:
        return True
    w_pos = float(w[y == 1].sum())
    impurity_sum = _impurity_terms(np.array(w_pos), np.array(w_sum)).item()
    return impurity_sum < params.gini_epsilon


def _local_confidence(values: np.ndarray, y: np.ndarray, feature: int, center: str) -> float:
    """Eq.-style single-feature confidence on a node's (unweighted) samples."""
    col = values[:, feature]
    pos = col[y == 1]
    neg = col[y != 1]
    mean_pos = pos.mean()
    delta_pos = float(((pos - mean_pos) ** 2).mean())
    neg_center = mean_pos if center == "positive_mean" else neg.mean()
    delta_neg = float(((neg - neg_center) ** 2).mean())
    hi = max(delta_pos, delta_neg)
    if hi <= 0:
        return 0.0
    return 1.0 - min(delta_pos, delta_neg) / hi


def train_tree(
    X,
    y,
    global_confidence: ConfidenceReport,
    global_stats: FeatureStats,
    params: TrainParams = TrainParams(),
    *,
    rng: Optional[np.random.Generator] = None,
    trace: Optional[list] = None,
) -> Tree:
    """Grow one adaptive-switch tree.

    At each node: apply the stopping rules, re-balance the incoming weights to
    the sample count for split selection, draw candidate features, pick the
    best hard split, then compare the local confidence of the selected feature
    against the global one. Without a conflict the node splits hard; with one
    it becomes dichotomous, re-selects its threshold softly, and passes every
    sample to both children with multiplied weights. Children inherit their
    share of the incoming mass (re-balancing does not rescale it), so the
    impurity and ``min_weight_mass`` stoppers terminate branches whose carried
    mass becomes negligible.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y).astype(np.int8)
    if X.ndim != 2 or X.shape[1] != N_FEATURES:
        raise ValueError(f"X must be (n, {N_FEATURES})")
    if len(np.unique(y)) < 2:
        raise ValueError("training set must contain both classes")
    if rng is None:
        rng = np.random.default_rng(params.seed)
    sigmas = np.sqrt(np.asarray(global_stats.sigma_sq, dtype=np.float64))
    global_c = np.asarray(global_confidence.c, dtype=np.float64)

    def grow(values, labels, weights, depth) -> TreeNode:
        # `weights` carry the conserved mass inherited from the root (n at the
        # root, partitioned down the tree), so the impurity and mass stoppers
        # can extinguish negligible branches under nested dichotomous nodes.
        if _stop_reason(labels, weights, depth, params):
            return Leaf(label=_dominant_label(labels, weights), depth=depth)
        balanced = weights * (labels.shape[0] / float(weights.sum()))
        candidates = rng.choice(N_FEATURES, size=min(params.candidate_count, N_FEATURES), replace=False)
        try:
            split = find_best_split(values, labels, balanced, candidates)
        except NoValidSplitError:
            return Leaf(label=_dominant_label(labels, weights), depth=depth)
        j = split.feature
        local_c = _local_confidence(values, labels, j, params.confidence_center)
        conflict = conflict_check(float(global_c[j]), local_c, params.epsilon)
        sigma_j = float(sigmas[j])
        if conflict and sigma_j > 0:
            tau = find_best_dichotomous_threshold(values[:, j], labels, balanced, sigma_j).tau
            w_l, w_r = dichotomous_weights(values[:, j], tau, sigma_j)
            if trace is not None:
                trace.append(NodeTrace(depth, labels.shape[0], j, tau, float(global_c[j]),
                                       local_c, True, "dichotomous"))
            left = grow(values, labels, weights * w_l, depth + 1)
            right = grow(values, labels, weights * w_r, depth + 1)
            return Dichotomous(feature=j, tau=tau, sigma=sigma_j, left=left, right=right)
        if trace is not None:
            trace.append(NodeTrace(depth, labels.shape[0], j, split.tau, float(global_c[j]),
                                   local_c, conflict, "regular"))
        mask = values[:, j] < split.tau
        left = grow(values[mask], labels[mask], weights[mask], depth + 1)
        right = grow(values[~mask], labels[~mask], weights[~mask], depth + 1)
        return Regular(feature=j, tau=split.tau, left=left, right=right)

    root = grow(X, y, np.ones(X.shape[0]), 0)
    return Tree(root=root, params=params)


def train_srf_tree(
    X,
    y,
    params: TrainParams = TrainParams(),
    *,
    rng: Optional[np.random.Generator] = None,
) -> Tree:
    """Standard hard-split tree: same stopping rules and candidate draws, no switch."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y).astype(np.int8)
    if len(np.unique(y)) < 2:
        raise ValueError("training set must contain both classes")
    if rng is None:
        rng = np.random.default_rng(params.seed)

    def grow(values, labels, weights, depth) -> TreeNode:
        if _stop_reason(labels, weights, depth, params):
            return Leaf(label=_dominant_label(labels, weights), depth=depth)
        balanced = weights * (labels.shape[0] / float(weights.sum()))
        candidates = rng.choice(N_FEATURES, size=min(params.candidate_count, N_FEATURES), replace=False)
        try:
            split = find_best_split(values, labels, balanced, candidates)
        except NoValidSplitError:
            return Leaf(label=_dominant_label(labels, weights), depth=depth)
        mask = values[:, split.feature] < split.tau
        left = grow(values[mask], labels[mask], weights[mask], depth + 1)
        right = grow(values[~mask], labels[~mask], weights[~mask], depth + 1)
        return Regular(feature=split.feature, tau=split.tau, left=left, right=right)

    root = grow(X, y, np.ones(X.shape[0]), 0)
    return Tree(root=root, params=params)


def train_prf_tree(
    X,
    y,
    global_stats: FeatureStats,
    params: TrainParams = TrainParams(),
    p_min: float = 0.05,
    *,
    rng: Optional[np.random.Generator] = None,
    rebalance: bool = False,
) -> Tree:
    """All-soft baseline tree: every internal node behaves dichotomously.

    Weights multiply down the tree without re-balancing (unless ``rebalance``),
    and a sample whose carried probability falls below ``p_min`` is dropped
    from that branch. Features whose global variance is zero split hard.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y).astype(np.int8)
    if len(np.unique(y)) < 2:
        raise ValueError("training set must contain both classes")
    if rng is None:
        rng = np.random.default_rng(params.seed)
    sigmas = np.sqrt(np.asarray(global_stats.sigma_sq, dtype=np.float64))

    def grow(values, labels, weights, depth) -> TreeNode:
        alive = weights >= p_min
        if not alive.any():
            return Leaf(label=_dominant_label(labels, weights), depth=depth)
        values, labels, weights = values[alive], labels[alive], weights[alive]
        if _stop_reason(labels, weights, depth, params):
            return Leaf(label=_dominant_label(labels, weights), depth=depth)
        selection_w = weights
        if rebalance:
            selection_w = weights * (labels.shape[0] / float(weights.sum()))
        candidates = rng.choice(N_FEATURES, size=min(params.candidate_count, N_FEATURES), replace=False)
        try:
            split = find_best_split(values, labels, selection_w, candidates)
        except NoValidSplitError:
            return Leaf(label=_dominant_label(labels, weights), depth=depth)
        j = split.feature
        sigma_j = float(sigmas[j])
        if sigma_j > 0:
            tau = find_best_dichotomous_threshold(values[:, j], labels, selection_w, sigma_j).tau
            w_l, w_r = dichotomous_weights(values[:, j], tau, sigma_j)
            left = grow(values, labels, weights * w_l, depth + 1)
            right = grow(values, labels, weights * w_r, depth + 1)
            return Dichotomous(feature=j, tau=tau, sigma=sigma_j, left=left, right=right)
        mask = values[:, j] < split.tau
        left = grow(values[mask], labels[mask], weights[mask], depth + 1)
        right = grow(values[~mask], labels[~mask], weights[~mask], depth + 1)
        return Regular(feature=j, tau=split.tau, left=left, right=right)

    root = grow(X, y, np.ones(X.shape[0]), 0)
    return Tree(root=root, params=params)


def _traverse(root: TreeNode, x: np.ndarray) -> tuple[float, float, int]:
    """Reference traversal: (leg score, total leaf mass, nodes visited)."""
    score = 0.0
    mass = 0.0
    visits = 0
    stack = [(root, 1.0)]
    while stack:
        node, w = stack.pop()
        visits += 1
        if isinstance(node, Leaf):
            mass += w
            if node.label == 1:
                score += w
        elif isinstance(node, Regular):
            stack.append((node.left if x[node.feature] < node.tau else node.right, w))
        else:
            w_l = 0.5 * math.erfc((x[node.feature] - node.tau) / (node.sigma * _SQRT2))
            stack.append((node.right, w * (1.0 - w_l)))
            stack.append((node.left, w * w_l))
    return score, mass, visits


def predict_tree(tree: Tree, x) -> tuple[int, float]:
    """Tree output for one feature vector: (binary label, leg score in [0, 1]).

    Regular nodes route the full carried weight; dichotomous nodes split it
    across both children. The score sums path-weight products over leg leaves;
    the label is 1 iff the score is strictly above 0.5.
    """
    values = np.asarray(getattr(x, "values", x), dtype=np.float64)
    score, _, _ = _traverse(tree.root, values)
    return (1 if score > 0.5 else 0, score)


def tree_stats_of_node(root: TreeNode) -> TreeStats:
    leaf_depths = []
    node_count = 0
    dicho = 0
    stack = [root]
    while stack:
        node = stack.pop()
        node_count += 1
        if isinstance(node, Leaf):
            leaf_depths.append(node.depth)
        else:
            if isinstance(node, Dichotomous):
                dicho += 1
            stack.append(node.left)
            stack.append(node.right)
    hist = dict(sorted(Counter(leaf_depths).items()))
    return TreeStats(
        leaf_count=len(leaf_depths),
        mean_leaf_depth=float(np.mean(leaf_depths)),
        depth_histogram=hist,
        node_count=node_count,
        dichotomous_count=dicho,
    )


def tree_stats(tree: Tree) -> TreeStats:
    """Leaf count, mean leaf depth and the leaf-depth histogram, by traversal."""
    return tree_stats_of_node(tree.root)


# ---------------------------------------------------------------------------
# Flat node-array form: serialization and the fast prediction layout.

_KIND_NAMES = {_kernels.KIND_REGULAR: "regular", _kernels.KIND_DICHOTOMOUS: "dichotomous",
               _kernels.KIND_LEAF: "leaf"}
_KIND_CODES = {v: k for k, v in _KIND_NAMES.items()}


def tree_to_records(tree: Tree) -> list[dict]:
    """Flatten to preorder records {kind, feature, tau, sigma, left, right, label, depth}."""
    records: list[dict] = []

    def visit(node: TreeNode, depth: int) -> int:
        index = len(records)
        records.append({})
        if isinstance(node, Leaf):
            records[index] = {"kind": "leaf", "feature": -1, "tau": 0.0, "sigma": 0.0,
                              "left": -1, "right": -1, "label": node.label, "depth": node.depth}
            return index
        kind = "regular" if isinstance(node, Regular) else "dichotomous"
        sigma = node.sigma if isinstance(node, Dichotomous) else 0.0
        left = visit(node.left, depth + 1)
        right = visit(node.right, depth + 1)
        records[index] = {"kind": kind, "feature": int(node.feature), "tau": float(node.tau),
                          "sigma": float(sigma), "left": left, "right": right,
                          "label": -1, "depth": depth}
        return index

    visit(tree.root, 0)
    return records


def tree_from_records(records: list[dict], params: TrainParams) -> Tree:
    def build(index: int) -> TreeNode:
        rec = records[index]
        kind = rec["kind"]
        if kind == "leaf":
            return Leaf(label=int(rec["label"]), depth=int(rec["depth"]))
        left = build(int(rec["left"]))
        right = build(int(rec["right"]))
        if kind == "regular":
            return Regular(feature=int(rec["feature"]), tau=float(rec["tau"]), left=left, right=right)
        if kind == "dichotomous":
            return Dichotomous(feature=int(rec["feature"]), tau=float(rec["tau"]),
                               sigma=float(rec["sigma"]), left=left, right=right)
        raise ValueError(f"unknown node kind {kind!r}")

    return Tree(root=build(0), params=params)


@dataclass
class FlatForest:
    """Concatenated node arrays of several trees, ready for the numba kernel."""

    kind: np.ndarray
    feature: np.ndarray
    tau: np.ndarray
    sigma: np.ndarray
    left: np.ndarray
    right: np.ndarray
    leaf_label: np.ndarray
    offsets: np.ndarray  # (T+1,) root of tree t at offsets[t]

    @classmethod
    def from_trees(cls, trees) -> "FlatForest":
        kinds, feats, taus, sigmas, lefts, rights, labels = [], [], [], [], [], [], []
        offsets = [0]
        for tree in trees:
            base = offsets[-1]
            for rec in tree_to_records(tree):
                kinds.append(_KIND_CODES[rec["kind"]])
                feats.append(rec["feature"])
                taus.append(rec["tau"])
                sigmas.append(rec["sigma"])
                lefts.append(rec["left"] + base if rec["left"] >= 0 else -1)
                rights.append(rec["right"] + base if rec["right"] >= 0 else -1)
                labels.append(rec["label"])
            offsets.append(len(kinds))
        return cls(
            kind=np.array(kinds, np.int8),
            feature=np.array(feats, np.int16),
            tau=np.array(taus, np.float64),
            sigma=np.array(sigmas, np.float64),
            left=np.array(lefts, np.int32),
            right=np.array(rights, np.int32),
            leaf_label=np.array(labels, np.int8),
            offsets=np.array(offsets, np.int64),
        )

    @property
    def tree_count(self) -> int:
        return int(self.offsets.size - 1)

    def votes(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Mean binary tree vote and node-visit count per sample row."""
        X = np.ascontiguousarray(X, dtype=np.float64)
        votes = np.empty(X.shape[0], np.float64)
        visits = np.empty(X.shape[0], np.int64)
        _kernels.forest_votes(self.kind, self.feature, self.tau, self.sigma,
                              self.left, self.right, self.leaf_label, self.offsets,
                              X, votes, visits)
        return votes, visits

    def tree_score(self, t: int, x: np.ndarray) -> tuple[float, float, int]:
        """Kernel-side single-tree traversal (score, mass, visits)."""
        x = np.ascontiguousarray(x, dtype=np.float64)
        return _kernels.tree_score(self.kind, self.feature, self.tau, self.sigma,
                                   self.left, self.right, self.leaf_label,
                                   int(self.offsets[t]), x)
