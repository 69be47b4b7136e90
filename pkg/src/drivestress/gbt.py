"""Gradient-boosted decision trees with a logistic objective.

Binary classifier trained by second-order boosting: per round the gradient
g = p - y and hessian h = p(1 - p) feed an exact greedy tree grower with L2
leaf regularization, optional row subsampling, and learned default directions
for missing values. Per-feature attributions use the path-dependent tree
Shapley algorithm, so explanations are exact for the fitted ensemble.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit
from scipy.special import expit

from .errors import (
    ConfigValidationError,
    DegenerateLabelsError,
    InsufficientDataError,
    ShapeMismatchError,
)
from .features import LABEL_STRESS, FeatureFrame

PROBA_MIN = float(np.nextafter(0.0, 1.0))
PROBA_MAX = float(np.nextafter(1.0, 0.0))


@dataclass(frozen=True)
class GbtConfig:
    """Training hyperparameters; defaults favor small tabular cohorts."""

    n_trees: int = 100
    learning_rate: float = 0.3
    max_depth: int = 6
    lambda_l2: float = 10.0
    min_child_weight: float = 1.0
    gamma_split: float = 0.0
    subsample: float = 1.0
    seed: int = 0

    def __post_init__(self):
        bad = []
        if self.n_trees < 0:
            bad.append("n_trees")
        if not 0.0 < self.learning_rate <= 1.0:
            bad.append("learning_rate")
        if self.max_depth < 1:
            bad.append("max_depth")
        if self.lambda_l2 < 0.0:
            bad.append("lambda_l2")
        if self.min_child_weight < 0.0:
            bad.append("min_child_weight")
        if self.gamma_split < 0.0:
            bad.append("gamma_split")
        if not 0.0 < self.subsample <= 1.0:
            bad.append("subsample")
        if bad:
            raise ConfigValidationError(
                f"invalid boosting configuration field(s): {', '.join(bad)}", fields=tuple(bad)
            )


@dataclass(frozen=True)
class Tree:
    """One regression tree as flat node arrays; children follow parents."""

    feature: np.ndarray
    threshold: np.ndarray
    default_left: np.ndarray
    left: np.ndarray
    right: np.ndarray
    weight: np.ndarray
    cover: np.ndarray

    def __len__(self):
        return len(self.feature)

    @property
    def depth(self) -> int:
        depths = np.zeros(len(self.feature), dtype=np.int64)
        for nd in range(len(self.feature)):
            if self.feature[nd] >= 0:
                depths[self.left[nd]] = depths[nd] + 1
                depths[self.right[nd]] = depths[nd] + 1
        return int(depths.max(initial=0))


@dataclass(frozen=True)
class GbtModel:
    trees: tuple
    base_score: float
    n_features: int
    config: GbtConfig
    feature_names: tuple | None = None
    training_loss: tuple = field(default=())


@dataclass(frozen=True)
class ShapAttribution:
    """Per-feature contributions in log-odds units plus the shared base."""

    values: np.ndarray
    base: float

    def margin(self):
        return self.base + np.sum(self.values, axis=-1)


@dataclass(frozen=True)
class ShapSummary:
    columns: tuple
    values: np.ndarray
    base: float

    @property
    def mean_abs(self) -> np.ndarray:
        return np.mean(np.abs(self.values), axis=0)

    @property
    def ranking(self) -> tuple:
        mean_abs = self.mean_abs
        # stable sort keeps column order on ties
        order = np.argsort(-mean_abs, kind="stable")
        return tuple((self.columns[j], float(mean_abs[j])) for j in order)


@njit(cache=True)
def _grow_kernel(X, g, h, order, n_miss, in_sample, max_depth, lam, gamma, mcw, eta):
    n, nf = X.shape
    cap = 2 ** (max_depth + 1) - 1
    feature = np.full(cap, -1, np.int64)
    threshold = np.zeros(cap)
    default_left = np.ones(cap, np.bool_)
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    weight = np.zeros(cap)
    cover = np.zeros(cap)
    node_g = np.zeros(cap)
    node_h = np.zeros(cap)

    node_of_row = np.full(n, -1, np.int64)
    for i in range(n):
        if in_sample[i]:
            node_of_row[i] = 0
            node_g[0] += g[i]
            node_h[0] += h[i]
    n_nodes = 1
    lo, hi = 0, 1

    for _depth in range(max_depth):
        width = hi - lo
        if width == 0:
            break
        best_gain = np.zeros(width)
        best_feat = np.full(width, -1, np.int64)
        best_thr = np.zeros(width)
        best_dl = np.ones(width, np.bool_)
        parent_score = np.zeros(width)
        for s in range(width):
            nd = lo + s
            denom = node_h[nd] + lam
            if denom > 0.0:
                parent_score[s] = node_g[nd] * node_g[nd] / denom

        gl = np.zeros(width)
        hl = np.zeros(width)
        gm = np.zeros(width)
        hm = np.zeros(width)
        last = np.zeros(width)
        seen = np.zeros(width, np.bool_)

        for f in range(nf):
            for s in range(width):
                gl[s] = 0.0
                hl[s] = 0.0
                gm[s] = 0.0
                hm[s] = 0.0
                seen[s] = False
            for pos in range(n - n_miss[f], n):
                idx = order[f, pos]
                nd = node_of_row[idx]
                if lo <= nd < hi:
                    gm[nd - lo] += g[idx]
                    hm[nd - lo] += h[idx]
            for pos in range(n - n_miss[f]):
                idx = order[f, pos]
                nd = node_of_row[idx]
                if nd < lo or nd >= hi:
                    continue
                s = nd - lo
                v = X[idx, f]
                if seen[s] and v > last[s]:
                    thr = 0.5 * (last[s] + v)
                    if thr > last[s]:
                        gn = node_g[nd]
                        hn = node_h[nd]
                        # missing rows follow the default side
                        gl_l = gl[s] + gm[s]
                        hl_l = hl[s] + hm[s]
                        if hl_l >= mcw and hn - hl_l >= mcw:
                            gr_l = gn - gl_l
                            gain = 0.5 * (
                                gl_l * gl_l / (hl_l + lam)
                                + gr_l * gr_l / (hn - hl_l + lam)
                                - parent_score[s]
                            ) - gamma
                            if gain > best_gain[s]:
                                best_gain[s] = gain
                                best_feat[s] = f
                                best_thr[s] = thr
                                best_dl[s] = True
                        if hl[s] >= mcw and hn - hl[s] >= mcw:
                            gr_r = gn - gl[s]
                            gain = 0.5 * (
                                gl[s] * gl[s] / (hl[s] + lam)
                                + gr_r * gr_r / (hn - hl[s] + lam)
                                - parent_score[s]
                            ) - gamma
                            if gain > best_gain[s]:
                                best_gain[s] = gain
                                best_feat[s] = f
                                best_thr[s] = thr
                                best_dl[s] = False
                gl[s] += g[idx]
                hl[s] += h[idx]
                last[s] = v
                seen[s] = True

        for s in range(width):
            nd = lo + s
            cover[nd] = node_h[nd]
            if best_feat[s] >= 0 and best_gain[s] > 0.0:
                feature[nd] = best_feat[s]
                threshold[nd] = best_thr[s]
                default_left[nd] = best_dl[s]
                left[nd] = n_nodes
                right[nd] = n_nodes + 1
                n_nodes += 2
            else:
                denom = node_h[nd] + lam
                weight[nd] = -eta * node_g[nd] / denom if denom > 0.0 else 0.0

        for i in range(n):
            nd = node_of_row[i]
            if nd < lo or nd >= hi or feature[nd] < 0:
                continue
            v = X[i, feature[nd]]
            if np.isnan(v):
                child = left[nd] if default_left[nd] else right[nd]
            elif v < threshold[nd]:
                child = left[nd]
            else:
                child = right[nd]
            node_of_row[i] = child
            node_g[child] += g[i]
            node_h[child] += h[i]

        lo, hi = hi, n_nodes

    for nd in range(lo, hi):
        cover[nd] = node_h[nd]
        denom = node_h[nd] + lam
        weight[nd] = -eta * node_g[nd] / denom if denom > 0.0 else 0.0

    return (
        feature[:n_nodes],
        threshold[:n_nodes],
        default_left[:n_nodes],
        left[:n_nodes],
        right[:n_nodes],
        weight[:n_nodes],
        cover[:n_nodes],
    )


@njit(cache=True)
def _predict_kernel(X, feature, threshold, default_left, left, right, weight, out):
    for i in range(X.shape[0]):
        nd = 0
        while feature[nd] >= 0:
            v = X[i, feature[nd]]
            if np.isnan(v):
                nd = left[nd] if default_left[nd] else right[nd]
            elif v < threshold[nd]:
                nd = left[nd]
            else:
                nd = right[nd]
        out[i] += weight[nd]


@njit(cache=True)
def _tree_expectation(feature, left, right, weight, cover):
    n = len(feature)
    ev = np.zeros(n)
    for nd in range(n - 1, -1, -1):
        if feature[nd] < 0:
            ev[nd] = weight[nd]
        else:
            cl = cover[left[nd]]
            cr = cover[right[nd]]
            tot = cl + cr
            if tot > 0.0:
                ev[nd] = (cl * ev[left[nd]] + cr * ev[right[nd]]) / tot
            else:
                ev[nd] = 0.5 * (ev[left[nd]] + ev[right[nd]])
    return ev[0]


@njit(cache=True)
def _path_extend(fi, z, o, w, lvl, m, pz, po, pi):
    fi[lvl, m] = pi
    z[lvl, m] = pz
    o[lvl, m] = po
    w[lvl, m] = 1.0 if m == 0 else 0.0
    for i in range(m - 1, -1, -1):
        w[lvl, i + 1] += po * w[lvl, i] * (i + 1.0) / (m + 1.0)
        w[lvl, i] = pz * w[lvl, i] * (m - i) / (m + 1.0)
    return m + 1


@njit(cache=True)
def _path_unwind(fi, z, o, w, lvl, k, mlen):
    l = mlen - 1
    one = o[lvl, k]
    zero = z[lvl, k]
    nxt = w[lvl, l]
    if one != 0.0:
        for j in range(l - 1, -1, -1):
            tmp = w[lvl, j]
            w[lvl, j] = nxt * (l + 1.0) / ((j + 1.0) * one)
            nxt = tmp - w[lvl, j] * zero * (l - j) / (l + 1.0)
    else:
        for j in range(l - 1, -1, -1):
            w[lvl, j] = w[lvl, j] * (l + 1.0) / (zero * (l - j))
    # weights are positional and already recomputed; only metadata shifts
    for j in range(k, l):
        fi[lvl, j] = fi[lvl, j + 1]
        z[lvl, j] = z[lvl, j + 1]
        o[lvl, j] = o[lvl, j + 1]
    return l


@njit(cache=True)
def _shap_row_kernel(
    x, feature, threshold, default_left, left, right, weight, cover, phi,
    fi, z, o, w, stack_node, stack_src, stack_len, stack_pz, stack_po, stack_pi,
):
    scratch = fi.shape[0] - 1
    top = 0
    stack_node[top] = 0
    stack_src[top] = -1
    stack_len[top] = 0
    stack_pz[top] = 1.0
    stack_po[top] = 1.0
    stack_pi[top] = -1
    top += 1

    while top > 0:
        top -= 1
        nd = stack_node[top]
        src = stack_src[top]
        plen = stack_len[top]
        pz = stack_pz[top]
        po = stack_po[top]
        pi = stack_pi[top]
        lvl = src + 1
        for t in range(plen):
            fi[lvl, t] = fi[src, t]
            z[lvl, t] = z[src, t]
            o[lvl, t] = o[src, t]
            w[lvl, t] = w[src, t]
        mlen = _path_extend(fi, z, o, w, lvl, plen, pz, po, pi)

        if feature[nd] < 0:
            for i in range(1, mlen):
                for t in range(mlen):
                    fi[scratch, t] = fi[lvl, t]
                    z[scratch, t] = z[lvl, t]
                    o[scratch, t] = o[lvl, t]
                    w[scratch, t] = w[lvl, t]
                rem = _path_unwind(fi, z, o, w, scratch, i, mlen)
                total = 0.0
                for t in range(rem):
                    total += w[scratch, t]
                phi[fi[lvl, i]] += total * (o[lvl, i] - z[lvl, i]) * weight[nd]
        else:
            f = feature[nd]
            v = x[f]
            if np.isnan(v):
                hot = left[nd] if default_left[nd] else right[nd]
            elif v < threshold[nd]:
                hot = left[nd]
            else:
                hot = right[nd]
            cold = right[nd] if hot == left[nd] else left[nd]
            iz = 1.0
            io = 1.0
            k = -1
            for t in range(mlen):
                if fi[lvl, t] == f:
                    k = t
                    break
            if k >= 0:
                iz = z[lvl, k]
                io = o[lvl, k]
                mlen = _path_unwind(fi, z, o, w, lvl, k, mlen)
            denom = cover[nd]
            rh = cover[hot] / denom if denom > 0.0 else 0.0
            rc = cover[cold] / denom if denom > 0.0 else 0.0
            stack_node[top] = cold
            stack_src[top] = lvl
            stack_len[top] = mlen
            stack_pz[top] = iz * rc
            stack_po[top] = 0.0
            stack_pi[top] = f
            top += 1
            stack_node[top] = hot
            stack_src[top] = lvl
            stack_len[top] = mlen
            stack_pz[top] = iz * rh
            stack_po[top] = io
            stack_pi[top] = f
            top += 1


@njit(cache=True)
def _shap_matrix_kernel(
    X, feature, threshold, default_left, left, right, weight, cover, phi, levels
):
    # one set of path/stack buffers shared across rows
    fi = np.full((levels + 1, levels + 1), -1, np.int64)
    z = np.zeros((levels + 1, levels + 1))
    o = np.zeros((levels + 1, levels + 1))
    w = np.zeros((levels + 1, levels + 1))
    stack_node = np.empty(2 * levels + 2, np.int64)
    stack_src = np.empty(2 * levels + 2, np.int64)
    stack_len = np.empty(2 * levels + 2, np.int64)
    stack_pz = np.empty(2 * levels + 2)
    stack_po = np.empty(2 * levels + 2)
    stack_pi = np.empty(2 * levels + 2, np.int64)
    for i in range(X.shape[0]):
        _shap_row_kernel(
            X[i], feature, threshold, default_left, left, right, weight, cover, phi[i],
            fi, z, o, w, stack_node, stack_src, stack_len, stack_pz, stack_po, stack_pi,
        )


def _as_matrix(rows, n_features):
    arr = np.asarray(rows, dtype=float)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != n_features:
        raise ShapeMismatchError(
            f"expected rows with {n_features} features, got shape {arr.shape}"
        )
    return np.ascontiguousarray(arr), single


def _resolve_training_data(features, labels):
    if isinstance(features, FeatureFrame):
        mask = features.training_mask()
        X = features.values[mask]
        y = (features.labels[mask] == LABEL_STRESS).astype(float)
        names = features.columns
        return np.ascontiguousarray(X, dtype=float), y, names
    X = np.asarray(features, dtype=float)
    if X.ndim != 2:
        raise ShapeMismatchError("training features must be a 2-D matrix")
    if labels is None:
        raise DegenerateLabelsError("labels are required when fitting from a matrix")
    y = np.asarray(labels, dtype=float)
    if len(y) != len(X):
        raise ShapeMismatchError("feature matrix and labels disagree in length")
    return np.ascontiguousarray(X), y, None


def fit(features, labels=None, config: GbtConfig | None = None) -> GbtModel:
    """Train an ensemble on rows labeled free (0) vs stress (1).

    Accepts a FeatureFrame (excluded rows are dropped, labels mapped) or a
    plain matrix with an explicit 0/1 label vector. Deterministic for a fixed
    config seed.
    """
    config = GbtConfig() if config is None else config
    X, y, names = _resolve_training_data(features, labels)
    classes = np.unique(y)
    if not np.all(np.isin(classes, (0.0, 1.0))):
        raise DegenerateLabelsError("labels must be 0 (free) or 1 (stress)")
    if len(classes) < 2 or min(np.sum(y == 0), np.sum(y == 1)) < 2:
        raise DegenerateLabelsError("training requires at least two rows per class")

    n, nf = X.shape
    order = np.empty((nf, n), dtype=np.int64)
    n_miss = np.empty(nf, dtype=np.int64)
    for f in range(nf):
        order[f] = np.argsort(X[:, f], kind="stable")
        n_miss[f] = int(np.isnan(X[:, f]).sum())

    rng = np.random.default_rng(config.seed)
    base_score = 0.0
    margins = np.full(n, base_score)
    trees = []
    losses = []
    for _ in range(config.n_trees):
        p = expit(margins)
        g = p - y
        h = p * (1.0 - p)
        if config.subsample < 1.0:
            in_sample = rng.random(n) < config.subsample
        else:
            in_sample = np.ones(n, dtype=bool)
        arrays = _grow_kernel(
            X,
            g,
            h,
            order,
            n_miss,
            in_sample,
            config.max_depth,
            config.lambda_l2,
            config.gamma_split,
            config.min_child_weight,
            config.learning_rate,
        )
        tree = Tree(*arrays)
        contrib = np.zeros(n)
        _predict_kernel(
            X,
            tree.feature,
            tree.threshold,
            tree.default_left,
            tree.left,
            tree.right,
            tree.weight,
            contrib,
        )
        margins = margins + contrib
        trees.append(tree)
        losses.append(float(np.mean(np.logaddexp(0.0, margins) - y * margins)))

    return GbtModel(
        trees=tuple(trees),
        base_score=base_score,
        n_features=nf,
        config=config,
        feature_names=names,
        training_loss=tuple(losses),
    )


def predict_margin(model: GbtModel, rows) -> np.ndarray | float:
    """Raw log-odds: base score plus the sum of tree outputs."""
    X, single = _as_matrix(rows, model.n_features)
    out = np.full(len(X), model.base_score)
    for tree in model.trees:
        _predict_kernel(
            X,
            tree.feature,
            tree.threshold,
            tree.default_left,
            tree.left,
            tree.right,
            tree.weight,
            out,
        )
    return float(out[0]) if single else out


def predict_proba(model: GbtModel, rows) -> np.ndarray | float:
    """Stress probability, clipped to the open interval (0, 1)."""
    margin = predict_margin(model, rows)
    proba = np.clip(expit(margin), PROBA_MIN, PROBA_MAX)
    return float(proba) if np.isscalar(margin) else proba


def _model_base_value(model: GbtModel) -> float:
    base = model.base_score
    for tree in model.trees:
        base += _tree_expectation(
            tree.feature, tree.left, tree.right, tree.weight, tree.cover
        )
    return float(base)


def tree_shap(model: GbtModel, rows) -> ShapAttribution:
    """Exact per-feature attributions; rows sum to the raw margin."""
    X, single = _as_matrix(rows, model.n_features)
    phi = np.zeros((len(X), model.n_features))
    for tree in model.trees:
        _shap_matrix_kernel(
            X,
            tree.feature,
            tree.threshold,
            tree.default_left,
            tree.left,
            tree.right,
            tree.weight,
            tree.cover,
            phi,
            tree.depth + 2,
        )
    base = _model_base_value(model)
    return ShapAttribution(values=phi[0] if single else phi, base=base)


def shap_summary(model: GbtModel, frame: FeatureFrame) -> ShapSummary:
    """Attribution magnitudes over a frame's labeled rows.

    Falls back to every row when the frame carries no free/stress labels.
    """
    if len(frame) == 0:
        raise InsufficientDataError("cannot summarize attributions of an empty frame")
    mask = frame.training_mask()
    rows = frame.values[mask] if np.any(mask) else frame.values
    attrib = tree_shap(model, rows)
    return ShapSummary(columns=frame.columns, values=attrib.values, base=attrib.base)


def to_json(model: GbtModel) -> str:
    """Serialize; floats survive the round trip bit-exactly."""
    obj = {
        "base_score": model.base_score,
        "n_features": model.n_features,
        "feature_names": list(model.feature_names) if model.feature_names else None,
        "training_loss": list(model.training_loss),
        "config": {
            "n_trees": model.config.n_trees,
            "learning_rate": model.config.learning_rate,
            "max_depth": model.config.max_depth,
            "lambda_l2": model.config.lambda_l2,
            "min_child_weight": model.config.min_child_weight,
            "gamma_split": model.config.gamma_split,
            "subsample": model.config.subsample,
            "seed": model.config.seed,
        },
        "trees": [
            {
                "feature": tree.feature.tolist(),
                "threshold": tree.threshold.tolist(),
                "default_left": tree.default_left.tolist(),
                "left": tree.left.tolist(),
                "right": tree.right.tolist(),
                "weight": tree.weight.tolist(),
                "cover": tree.cover.tolist(),
            }
            for tree in model.trees
        ],
    }
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def from_json(text: str) -> GbtModel:
    obj = json.loads(text)
    trees = tuple(
        Tree(
            feature=np.asarray(t["feature"], dtype=np.int64),
            threshold=np.asarray(t["threshold"], dtype=float),
            default_left=np.asarray(t["default_left"], dtype=bool),
            left=np.asarray(t["left"], dtype=np.int64),
            right=np.asarray(t["right"], dtype=np.int64),
            weight=np.asarray(t["weight"], dtype=float),
            cover=np.asarray(t["cover"], dtype=float),
        )
        for t in obj["trees"]
    )
    names = obj["feature_names"]
    return GbtModel(
        trees=trees,
        base_score=float(obj["base_score"]),
        n_features=int(obj["n_features"]),
        config=GbtConfig(**obj["config"]),
        feature_names=tuple(names) if names else None,
        training_loss=tuple(obj["training_loss"]),
    )
