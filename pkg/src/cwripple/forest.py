"""Random Forest regression built on variance-reduction CART trees.

Trees are stored as flat parallel arrays (one entry per node); ``feature ==
-1`` marks a leaf. The same arrays are what the JSON model file holds, so a
loaded model predicts bit-identically to the one that was saved.

Randomness comes only from :mod:`cwripple.rng` (SplitMix64). Tree ``t`` of a
forest with master seed ``s`` draws from a generator seeded with ``s ^ t``:
first its bootstrap sample, then one feature subset per split attempt.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numba
import numpy as np

from .rng import SplitMix64, nb_below

__all__ = [
    "ForestHyperparams",
    "Tree",
    "ForestModel",
    "fit",
    "predict",
    "feature_importance",
    "grid_search_cv",
    "default_search_grid",
    "save_model",
    "load_model",
    "MODEL_FORMAT",
    "MODEL_SCHEMA_VERSION",
]

MODEL_FORMAT = "cwripple-forest"
MODEL_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class ForestHyperparams:
    n_trees: int = 100
    max_depth: int | None = None
    min_samples_leaf: int = 1
    feature_fraction: float = 1.0 / 3.0
    seed: int = 0
    bootstrap: bool = True  # False only for oracle tests

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.max_depth is not None and self.max_depth < 0:
            raise ValueError("max_depth must be >= 0 or None")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")
        if not 0 < self.feature_fraction <= 1:
            raise ValueError("feature_fraction must be in (0, 1]")

    def features_per_split(self, n_features: int) -> int:
        # small epsilon keeps e.g. 0.25 * 16 at 4 instead of 5 after rounding noise
        return max(1, min(n_features, math.ceil(self.feature_fraction * n_features - 1e-9)))

    def label(self) -> str:
        depth = "inf" if self.max_depth is None else str(self.max_depth)
        return (f"trees={self.n_trees} depth={depth} leaf={self.min_samples_leaf} "
                f"ff={self.feature_fraction:.4g}")


@dataclass
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    count: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def n_splits(self) -> int:
        return int(np.count_nonzero(self.feature >= 0))


@dataclass
class ForestModel:
    trees: list[Tree]
    hyperparams: ForestHyperparams
    feature_names: list[str]
    importances: np.ndarray
    metadata: dict = field(default_factory=dict)
    _packed: tuple | None = field(default=None, init=False, repr=False)

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def packed(self):
        if self._packed is None:
            offsets = np.cumsum([0] + [t.n_nodes for t in self.trees]).astype(np.int64)
            cat = lambda name, dtype: np.ascontiguousarray(
                np.concatenate([getattr(t, name) for t in self.trees]).astype(dtype))
            self._packed = (offsets, cat("feature", np.int64), cat("threshold", np.float64),
                            cat("left", np.int64), cat("right", np.int64),
                            cat("value", np.float64))
        return self._packed


# ---------------------------------------------------------------------------
# compiled tree builder


@numba.njit(cache=True)
def _build_tree(X, y, seed, bootstrap, max_depth, min_leaf, k_feat, n_root_weight):
    n, n_feat = X.shape
    state = np.zeros(1, dtype=np.uint64)
    state[0] = np.uint64(seed)

    if bootstrap:
        sample = np.empty(n, dtype=np.int64)
        for i in range(n):
            sample[i] = nb_below(state, n)
    else:
        sample = np.arange(n)
    # canonical order by target: equal targets are interchangeable in every
    # sum, so permuting the training rows cannot change any split
    sample = sample[np.argsort(y[sample], kind="mergesort")]
    m = sample.shape[0]

    cap = 2 * m + 1
    feat = np.full(cap, -1, dtype=np.int64)
    thr = np.zeros(cap)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    value = np.zeros(cap)
    count = np.zeros(cap, dtype=np.int64)
    importance = np.zeros(n_feat)

    perm = np.arange(n_feat)
    chosen = np.empty(k_feat, dtype=np.int64)
    buf = np.empty(m, dtype=np.int64)
    vals = np.empty(m)
    ys = np.empty(m)

    stack_node = np.empty(cap, dtype=np.int64)
    stack_start = np.empty(cap, dtype=np.int64)
    stack_end = np.empty(cap, dtype=np.int64)
    stack_depth = np.empty(cap, dtype=np.int64)
    top = 0
    stack_node[0] = 0
    stack_start[0] = 0
    stack_end[0] = m
    stack_depth[0] = 0
    top = 1
    n_nodes = 1

    while top > 0:
        top -= 1
        node = stack_node[top]
        start = stack_start[top]
        end = stack_end[top]
        depth = stack_depth[top]
        cnt = end - start

        total = 0.0
        ymin = np.inf
        ymax = -np.inf
        for i in range(start, end):
            v = y[sample[i]]
            total += v
            ymin = min(ymin, v)
            ymax = max(ymax, v)
        mean = total / cnt
        value[node] = mean
        count[node] = cnt

        if (max_depth >= 0 and depth >= max_depth) or cnt < 2 * min_leaf or ymin == ymax:
            continue

        node_sse = 0.0
        for i in range(start, end):
            d = y[sample[i]] - mean
            node_sse += d * d

        # partial Fisher-Yates draw of k_feat distinct features, then ascending
        for i in range(n_feat):
            perm[i] = i
        for i in range(k_feat):
            j = i + nb_below(state, n_feat - i)
            tmp = perm[i]
            perm[i] = perm[j]
            perm[j] = tmp
            chosen[i] = perm[i]
        chosen.sort()

        best_sse = np.inf
        best_f = -1
        best_t = 0.0
        for fi in range(k_feat):
            f = chosen[fi]
            for i in range(cnt):
                vals[i] = X[sample[start + i], f]
            order = np.argsort(vals[:cnt], kind="mergesort")
            for i in range(cnt):
                ys[i] = y[sample[start + order[i]]] - mean
            s_left = 0.0
            q_left = 0.0
            s_all = 0.0
            q_all = 0.0
            for i in range(cnt):
                s_all += ys[i]
                q_all += ys[i] * ys[i]
            for i in range(cnt - 1):
                s_left += ys[i]
                q_left += ys[i] * ys[i]
                nl = i + 1
                nr = cnt - nl
                if nl < min_leaf:
                    continue
                if nr < min_leaf:
                    break
                a = vals[order[i]]
                b = vals[order[i + 1]]
                if not (a < b):
                    continue
                s_right = s_all - s_left
                q_right = q_all - q_left
                sse = (q_left - s_left * s_left / nl) + (q_right - s_right * s_right / nr)
                if sse < best_sse:
                    best_sse = sse
                    best_f = f
                    t = 0.5 * (a + b)
                    if not (t < b):
                        t = a
                    best_t = t

        if best_f < 0:
            continue

        gain = node_sse - best_sse
        if gain < 0.0:
            gain = 0.0
        importance[best_f] += gain / n_root_weight

        # stable partition keeps the canonical order inside both children
        nl = 0
        for i in range(start, end):
            if X[sample[i], best_f] <= best_t:
                buf[nl] = sample[i]
                nl += 1
        nr = 0
        for i in range(start, end):
            if not (X[sample[i], best_f] <= best_t):
                buf[nl + nr] = sample[i]
                nr += 1
        for i in range(cnt):
            sample[start + i] = buf[i]

        lid = n_nodes
        rid = n_nodes + 1
        n_nodes += 2
        feat[node] = best_f
        thr[node] = best_t
        left[node] = lid
        right[node] = rid
        # right pushed first so the left subtree is expanded first
        stack_node[top] = rid
        stack_start[top] = start + nl
        stack_end[top] = end
        stack_depth[top] = depth + 1
        top += 1
        stack_node[top] = lid
        stack_start[top] = start
        stack_end[top] = start + nl
        stack_depth[top] = depth + 1
        top += 1

    return (feat[:n_nodes].copy(), thr[:n_nodes].copy(), left[:n_nodes].copy(),
            right[:n_nodes].copy(), value[:n_nodes].copy(), count[:n_nodes].copy(), importance)


@numba.njit(cache=True)
def _predict_packed(X, offsets, feat, thr, left, right, value):
    n = X.shape[0]
    n_trees = offsets.shape[0] - 1
    out = np.zeros(n)
    for r in range(n):
        acc = 0.0
        for t in range(n_trees):
            base = offsets[t]
            node = 0
            while feat[base + node] >= 0:
                if X[r, feat[base + node]] <= thr[base + node]:
                    node = left[base + node]
                else:
                    node = right[base + node]
            acc += value[base + node]
        out[r] = acc / n_trees
    return out


# ---------------------------------------------------------------------------
# public API


def _as_matrix(matrix) -> tuple[np.ndarray, list[str] | None]:
    names = getattr(matrix, "columns", None)
    values = getattr(matrix, "values", matrix)
    X = np.ascontiguousarray(np.asarray(values, dtype=np.float64))
    if X.ndim != 2:
        raise ValueError("feature matrix must be 2-D")
    return X, (list(names) if names is not None else None)


def fingerprint(X: np.ndarray, y: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(X, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(y, dtype="<f8").tobytes())
    return h.hexdigest()[:16]


def fit(matrix, targets, hp: ForestHyperparams, feature_names: Sequence[str] | None = None) -> ForestModel:
    """Grow ``hp.n_trees`` trees on bootstrap samples of ``(matrix, targets)``.

    ``matrix`` is a 2-D array or anything with ``.values``/``.columns``
    (such as :class:`cwripple.dataset.FeatureMatrix`).
    """
    X, names = _as_matrix(matrix)
    y = np.ascontiguousarray(np.asarray(targets, dtype=np.float64))
    if X.shape[0] == 0 or y.size == 0:
        raise ValueError("cannot fit on empty data")
    if X.shape[0] != y.shape[0]:
        raise ValueError(f"{X.shape[0]} rows but {y.shape[0]} targets")
    if X.shape[0] < 2:
        raise ValueError("need at least 2 rows")
    if not np.all(np.isfinite(y)):
        raise ValueError("targets contain non-finite values")
    if not np.all(np.isfinite(X)):
        raise ValueError("feature matrix contains non-finite values")
    names = list(feature_names) if feature_names is not None else names
    if names is None:
        names = [f"x{i}" for i in range(X.shape[1])]
    if len(names) != X.shape[1]:
        raise ValueError("feature_names length does not match matrix width")

    n_feat = X.shape[1]
    k = hp.features_per_split(n_feat)
    depth = -1 if hp.max_depth is None else hp.max_depth
    trees = []
    raw_importance = np.zeros(n_feat)
    for t in range(hp.n_trees):
        tree_seed = (int(hp.seed) ^ t) & ((1 << 64) - 1)
        feat, thr, lft, rgt, val, cnt, imp = _build_tree(
            X, y, np.uint64(tree_seed), hp.bootstrap, depth, hp.min_samples_leaf, k,
            float(X.shape[0]))
        trees.append(Tree(feat, thr, lft, rgt, val, cnt))
        raw_importance += imp
    raw_importance /= hp.n_trees
    total = raw_importance.sum()
    importances = raw_importance / total if total > 0 else np.zeros(n_feat)
    meta = {"seed": int(hp.seed), "n_rows": int(X.shape[0]), "dataset_fingerprint": fingerprint(X, y)}
    return ForestModel(trees, hp, names, importances, meta)


def predict(model: ForestModel, matrix) -> np.ndarray:
    X, names = _as_matrix(matrix)
    if X.shape[1] != model.n_features:
        raise ValueError(f"matrix has {X.shape[1]} columns, model expects {model.n_features}")
    if names is not None and list(names) != list(model.feature_names):
        raise ValueError("feature names differ from the model's: "
                         f"{sorted(set(names) ^ set(model.feature_names))}")
    return _predict_packed(X, *model.packed())


def feature_importance(model: ForestModel) -> dict[str, float]:
    """Normalised mean impurity decrease per feature (all zeros if no split)."""
    return {name: float(v) for name, v in zip(model.feature_names, model.importances)}


# ---------------------------------------------------------------------------
# model selection


def default_search_grid(n_features: int, seed: int = 0) -> list[ForestHyperparams]:
    fractions = [1.0 / 3.0, math.sqrt(n_features) / n_features]
    grid = []
    for n_trees in (100, 300):
        for depth in (None, 8, 16):
            for leaf in (1, 2, 5):
                for ff in fractions:
                    grid.append(ForestHyperparams(n_trees, depth, leaf, ff, seed))
    return grid


def kfold_indices(n: int, k: int, seed: int) -> list[np.ndarray]:
    """Shuffle ``range(n)`` with SplitMix64 and cut it into ``k`` contiguous folds."""
    if k < 2:
        raise ValueError("k must be >= 2")
    if n < k:
        raise ValueError(f"need at least k={k} rows, got {n}")
    order = SplitMix64(seed).permutation(n)
    return [fold.copy() for fold in np.array_split(order, k)]


def _selection_key(row):
    hp = row["hyperparams"]
    depth = math.inf if hp.max_depth is None else hp.max_depth
    return (row["mean_rmse"], hp.n_trees, depth, -hp.min_samples_leaf)


def grid_search_cv(matrix, targets, grid: Sequence[ForestHyperparams], k: int = 5, seed: int = 0,
                   progress=None):
    """Mean k-fold validation RMSE for every entry of ``grid``.

    Returns ``(best, table)``. ``table`` has one dict per candidate with the
    hyperparameters, per-fold RMSE and their mean; the best candidate has the
    lowest mean RMSE, ties going to fewer trees, then shallower depth, then
    larger leaves.
    """
    if not grid:
        raise ValueError("empty hyperparameter grid")
    X, names = _as_matrix(matrix)
    y = np.asarray(targets, dtype=np.float64)
    folds = kfold_indices(X.shape[0], k, seed)
    table = []
    for i, hp in enumerate(grid):
        fold_rmse = []
        for j in range(k):
            val = folds[j]
            train = np.concatenate([folds[m] for m in range(k) if m != j])
            model = fit(X[train], y[train], hp, names)
            pred = _predict_packed(X[val], *model.packed())
            fold_rmse.append(float(np.sqrt(np.mean((pred - y[val]) ** 2))))
        table.append({"hyperparams": hp, "fold_rmse": fold_rmse,
                      "mean_rmse": float(np.mean(fold_rmse)), "std_rmse": float(np.std(fold_rmse))})
        if progress is not None:
            progress(i + 1, len(grid), table[-1])
    best = min(table, key=_selection_key)["hyperparams"]
    return best, table


# ---------------------------------------------------------------------------
# persistence


def model_to_dict(model: ForestModel) -> dict:
    hp = asdict(model.hyperparams)
    return {
        "format": MODEL_FORMAT,
        "schema_version": MODEL_SCHEMA_VERSION,
        "feature_names": list(model.feature_names),
        "hyperparams": hp,
        "importances": [float(v) for v in model.importances],
        "metadata": model.metadata,
        "trees": [
            {
                "feature": t.feature.tolist(),
                "threshold": [float(v) for v in t.threshold],
                "left": t.left.tolist(),
                "right": t.right.tolist(),
                "value": [float(v) for v in t.value],
                "count": t.count.tolist(),
            }
            for t in model.trees
        ],
    }


def model_from_dict(doc: dict) -> ForestModel:
    if doc.get("format") != MODEL_FORMAT:
        raise ValueError(f"not a {MODEL_FORMAT} document")
    if doc.get("schema_version") != MODEL_SCHEMA_VERSION:
        raise ValueError(f"unsupported model schema_version {doc.get('schema_version')!r}")
    trees = [
        Tree(
            np.asarray(t["feature"], dtype=np.int64),
            np.asarray(t["threshold"], dtype=np.float64),
            np.asarray(t["left"], dtype=np.int64),
            np.asarray(t["right"], dtype=np.int64),
            np.asarray(t["value"], dtype=np.float64),
            np.asarray(t["count"], dtype=np.int64),
        )
        for t in doc["trees"]
    ]
    hp = ForestHyperparams(**doc["hyperparams"])
    return ForestModel(trees, hp, list(doc["feature_names"]),
                       np.asarray(doc["importances"], dtype=np.float64), dict(doc.get("metadata", {})))


def save_model(model: ForestModel, path) -> None:
    text = json.dumps(model_to_dict(model), indent=1, sort_keys=True)
    Path(path).write_text(text + "\n")


def load_model(path) -> ForestModel:
    return model_from_dict(json.loads(Path(path).read_text()))


def with_seed(hp: ForestHyperparams, seed: int) -> ForestHyperparams:
    return replace(hp, seed=seed)
