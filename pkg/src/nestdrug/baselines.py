"""Random forest over binary fingerprint features, built from scratch.

Trees split on Gini impurity with the threshold fixed at 0.5 (features are
bits), a sqrt-F random feature subset per node, and bootstrap sampling per
tree. Per-tree seeds derive from the forest seed plus the tree index, so a
forest is reproducible and trees are independent.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    EmptyDataError,
    InsufficientDataError,
    OneClassOnlyError,
    ShapeError,
)
from .evalkit import MetricBundle, classification_bundle, stratified_kfold
from .fingerprint import Fingerprint, morgan_fingerprint


@dataclass
class ForestConfig:
    n_trees: int = 200
    max_depth: int = 20
    min_leaf: int = 2
    seed: int = 0
    # fraction of features tried per node; None -> sqrt(F)
    feature_subsample: float | None = None


@dataclass
class DecisionTree:
    """Flat arrays; node i splits on feature[i] (bit > 0.5 goes right).

    feature[i] == -1 marks a leaf whose positive-class probability is prob[i].
    """

    feature: np.ndarray
    left: np.ndarray
    right: np.ndarray
    prob: np.ndarray

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=np.int64)
        active = self.feature[node] >= 0
        while active.any():
            idx = np.nonzero(active)[0]
            feats = self.feature[node[idx]]
            goes_right = X[idx, feats] > 0.5
            node[idx[goes_right]] = self.right[node[idx[goes_right]]]
            node[idx[~goes_right]] = self.left[node[idx[~goes_right]]]
            active = self.feature[node] >= 0
        return self.prob[node]


@dataclass
class ForestModel:
    trees: list[DecisionTree]
    config: ForestConfig
    n_features: int


def _gini_best_split(X: np.ndarray, y: np.ndarray, feats: np.ndarray):
    """Best (feature, gini) over candidate bit features; None if no split."""
    n = y.size
    n_pos = float(y.sum())
    sub = X[:, feats]
    n_right = sub.sum(axis=0).astype(np.float64)
    pos_right = (sub * y[:, None]).sum(axis=0).astype(np.float64)
    n_left = n - n_right
    pos_left = n_pos - pos_right
    valid = (n_left > 0) & (n_right > 0)
    if not valid.any():
        return None
    with np.errstate(divide="ignore", invalid="ignore"):
        p_l = np.where(n_left > 0, pos_left / n_left, 0.0)
        p_r = np.where(n_right > 0, pos_right / n_right, 0.0)
    gini = (n_left * (2 * p_l * (1 - p_l)) + n_right * (2 * p_r * (1 - p_r))) / n
    gini = np.where(valid, gini, np.inf)
    best = int(np.argmin(gini))  # argmin takes the lowest index on ties
    if not np.isfinite(gini[best]):
        return None
    return int(feats[best]), float(gini[best])


def _grow_tree(X: np.ndarray, y: np.ndarray, cfg: ForestConfig,
               rng: np.random.Generator) -> DecisionTree:
    n_features = X.shape[1]
    if cfg.feature_subsample is None:
        k = max(1, int(round(np.sqrt(n_features))))
    else:
        k = max(1, int(round(cfg.feature_subsample * n_features)))
    feature, left, right, prob = [], [], [], []

    def new_node():
        feature.append(-1)
        left.append(-1)
        right.append(-1)
        prob.append(0.0)
        return len(feature) - 1

    def build(idx: np.ndarray, depth: int) -> int:
        node = new_node()
        ys = y[idx]
        p = float(ys.mean())
        prob[node] = p
        if depth >= cfg.max_depth or idx.size < 2 * cfg.min_leaf or p in (0.0, 1.0):
            return node
        feats = np.sort(rng.choice(n_features, size=min(k, n_features),
                                   replace=False))
        split = _gini_best_split(X[idx], ys, feats)
        if split is None:
            return node
        f, _ = split
        goes_right = X[idx, f] > 0.5
        right_idx = idx[goes_right]
        left_idx = idx[~goes_right]
        if right_idx.size < cfg.min_leaf or left_idx.size < cfg.min_leaf:
            return node
        feature[node] = f
        left[node] = build(left_idx, depth + 1)
        right[node] = build(right_idx, depth + 1)
        return node

    import sys
    old = sys.getrecursionlimit()
    sys.setrecursionlimit(max(old, 10 * cfg.max_depth + 100))
    try:
        build(np.arange(X.shape[0]), 0)
    finally:
        sys.setrecursionlimit(old)
    return DecisionTree(
        feature=np.asarray(feature, dtype=np.int64),
        left=np.asarray(left, dtype=np.int64),
        right=np.asarray(right, dtype=np.int64),
        prob=np.asarray(prob, dtype=np.float64),
    )


def fingerprints_to_matrix(fps: list[Fingerprint],
                           context_onehot: np.ndarray | None = None) -> np.ndarray:
    """Unpack bitsets into a dense (n, nbits [+ context]) uint8 matrix."""
    if not fps:
        raise EmptyDataError("no fingerprints")
    nbits = fps[0].nbits
    rows = np.zeros((len(fps), nbits), dtype=np.uint8)
    nbytes = nbits // 8
    for i, fp in enumerate(fps):
        if fp.nbits != nbits:
            raise ShapeError("mixed fingerprint widths")
        raw = fp.bits.to_bytes(nbytes, "little")
        rows[i] = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), bitorder="little")
    if context_onehot is not None:
        if context_onehot.shape[0] != rows.shape[0]:
            raise ShapeError("context block row count mismatch")
        rows = np.concatenate([rows, context_onehot.astype(np.uint8)], axis=1)
    return rows


def fit_forest(X: np.ndarray, y, config: ForestConfig) -> ForestModel:
    """Bootstrap-sampled Gini trees; deterministic for a fixed seed."""
    X = np.asarray(X)
    yv = np.asarray(y, dtype=np.int64)
    if X.size == 0 or yv.size == 0:
        raise EmptyDataError("empty design matrix")
    if X.shape[0] != yv.size or X.shape[0] < 2:
        raise ShapeError(f"bad shapes: X {X.shape}, y {yv.size}")
    if len(np.unique(yv)) < 2:
        raise OneClassOnlyError("forest needs both classes")
    trees = []
    n = X.shape[0]
    for t in range(config.n_trees):
        rng = np.random.default_rng(config.seed + t)
        boot = rng.integers(0, n, size=n)
        trees.append(_grow_tree(X[boot], yv[boot], config, rng))
    return ForestModel(trees=trees, config=config, n_features=X.shape[1])


def predict_proba(model: ForestModel, X: np.ndarray) -> np.ndarray:
    """Mean of per-tree leaf positive-class probabilities."""
    X = np.asarray(X)
    if X.ndim != 2 or X.shape[1] != model.n_features:
        raise ShapeError(
            f"expected (n, {model.n_features}) features, got {X.shape}")
    acc = np.zeros(X.shape[0], dtype=np.float64)
    for tree in model.trees:
        acc += tree.predict_proba(X)
    return acc / len(model.trees)


# ---------------------------------------------------------------------------
# experiment wrapper
# ---------------------------------------------------------------------------

@dataclass
class RFExperimentConfig:
    forest: ForestConfig = field(default_factory=ForestConfig)
    fp_radius: int = 2
    fp_nbits: int = 2048
    min_actives: int = 10
    test_fold: int = 0
    n_folds: int = 5
    split_seed: int = 0


def per_target_rf_experiment(dataset, target_id: int,
                             config: RFExperimentConfig) -> tuple[MetricBundle, dict]:
    """Train on one target's rows, evaluate on a held-out stratified fold.

    Reports sample counts so data-scarce collapse stays visible.
    """
    sub = dataset.filter_target(target_id)
    labels = sub.labels()
    n_act = int(labels.sum())
    n_inact = int((labels == 0).sum())
    if n_act < config.min_actives:
        raise InsufficientDataError(
            f"target {target_id}: {n_act} actives < required {config.min_actives}")
    fps = [morgan_fingerprint(r.graph, config.fp_radius, config.fp_nbits)
           for r in sub.records]
    X = fingerprints_to_matrix(fps)
    plan = stratified_kfold(labels, config.n_folds, seed=config.split_seed)
    train_idx, test_idx = plan.fold_indices(config.test_fold)
    model = fit_forest(X[train_idx], labels[train_idx], config.forest)
    scores = predict_proba(model, X[test_idx])
    bundle = classification_bundle(scores, labels[test_idx])
    info = {
        "target_id": target_id,
        "n_actives": n_act,
        "n_inactives": n_inact,
        "n_train": int(train_idx.size),
        "n_test": int(test_idx.size),
    }
    return bundle, info


# ---------------------------------------------------------------------------
# NDRF1 forest container
# ---------------------------------------------------------------------------

_MAGIC = b"NDRF1\x00"


def save_forest(model: ForestModel, path):
    header = {
        "config": {
            "n_trees": model.config.n_trees,
            "max_depth": model.config.max_depth,
            "min_leaf": model.config.min_leaf,
            "seed": model.config.seed,
            "feature_subsample": model.config.feature_subsample,
        },
        "n_features": model.n_features,
        "tree_sizes": [int(t.feature.size) for t in model.trees],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for t in model.trees:
            fh.write(t.feature.astype("<i8").tobytes())
            fh.write(t.left.astype("<i8").tobytes())
            fh.write(t.right.astype("<i8").tobytes())
            fh.write(t.prob.astype("<f8").tobytes())


def load_forest(path) -> ForestModel:
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ShapeError("not an NDRF1 forest file")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode())
        trees = []
        for size in header["tree_sizes"]:
            feature = np.frombuffer(fh.read(size * 8), dtype="<i8").copy()
            left = np.frombuffer(fh.read(size * 8), dtype="<i8").copy()
            right = np.frombuffer(fh.read(size * 8), dtype="<i8").copy()
            prob = np.frombuffer(fh.read(size * 8), dtype="<f8").copy()
            trees.append(DecisionTree(feature, left, right, prob))
    cfg = ForestConfig(**header["config"])
    return ForestModel(trees=trees, config=cfg, n_features=header["n_features"])
