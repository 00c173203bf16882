"""Downstream regressors and target scaling.

Two models bracket the bias/variance range: an L1-penalized linear model
with the alpha chosen by 5-fold cross-validation over a 100-point
log-spaced grid, and a gradient-boosted tree ensemble with exact greedy
splits, validation-set early stopping, and a 20-trial seeded random
hyperparameter search. Targets are min/max rescaled to 0-100 on training
rows only and deliberately not clamped outside that range.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .augment import derive_rng
from .errors import ConfigError, DegenerateInputError, DimensionError, ValidationError


# ---------------------------------------------------------------------------
# Target scaling and RMSE
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TargetScaler:
    minimum: float
    maximum: float


def fit_target_scaler(y_train: np.ndarray) -> TargetScaler:
    lo, hi = float(np.min(y_train)), float(np.max(y_train))
    if hi == lo:
        raise DegenerateInputError("degenerate index: max equals min on training rows")
    return TargetScaler(minimum=lo, maximum=hi)


def scale_targets(y: np.ndarray, scaler: TargetScaler) -> np.ndarray:
    """0-100 min/max rescaling; values outside the training range are not
    clamped, so test rows may fall outside [0, 100]."""
    return 100.0 * (np.asarray(y, dtype=np.float64) - scaler.minimum) \
        / (scaler.maximum - scaler.minimum)


def rmse(y_pred: np.ndarray, y_true: np.ndarray) -> float:
    y_pred, y_true = np.asarray(y_pred, float), np.asarray(y_true, float)
    if y_pred.shape != y_true.shape:
        raise DimensionError("prediction/target length mismatch")
    return float(np.sqrt(np.mean((y_pred - y_true) ** 2)))


# ---------------------------------------------------------------------------
# Lasso: cyclic coordinate descent with soft thresholding
# ---------------------------------------------------------------------------


@dataclass
class LassoModel:
    coefficients: np.ndarray   # in standardized feature space
    intercept: float
    alpha: float
    feature_means: np.ndarray
    feature_sds: np.ndarray
    cv_rmse: float = float("nan")


def soft_threshold(z: float, gamma: float) -> float:
    if z > gamma:
        return z - gamma
    if z < -gamma:
        return z + gamma
    return 0.0


def lasso_objective(x: np.ndarray, y_centered: np.ndarray, w: np.ndarray,
                    alpha: float) -> float:
    n = len(y_centered)
    resid = y_centered - x @ w
    return float(resid @ resid / (2 * n) + alpha * np.abs(w).sum())


def lasso_cd(x: np.ndarray, y_centered: np.ndarray, alpha: float,
             w0: np.ndarray | None = None, tol: float = 1e-6,
             max_iter: int = 1000) -> tuple[np.ndarray, list[float]]:
    """Minimize (1/2n)||y - Xw||^2 + alpha ||w||_1 for centred y.

    Columns of x are assumed mean-centred (standardized upstream).
    Returns the weights and the penalized objective after each sweep.
    """
    n, p = x.shape
    col_sq = (x * x).mean(axis=0)
    w = np.zeros(p) if w0 is None else w0.copy()
    r = y_centered - x @ w
    history: list[float] = []
    for _ in range(max_iter):
        max_delta = 0.0
        for j in range(p):
            if col_sq[j] == 0.0:
                continue
            w_old = w[j]
            rho = x[:, j] @ r / n + col_sq[j] * w_old
            w_new = soft_threshold(rho, alpha) / col_sq[j]
            if w_new != w_old:
                r += x[:, j] * (w_old - w_new)
                w[j] = w_new
                max_delta = max(max_delta, abs(w_new - w_old))
        history.append(lasso_objective(x, y_centered, w, alpha))
        if max_delta < tol * max(1.0, float(np.abs(w).max())):
            break
    return w, history


def _cd_gram(c: np.ndarray, gram: np.ndarray, alpha: float, w0: np.ndarray,
             tol: float = 1e-6, max_iter: int = 300) -> np.ndarray:
    """Coordinate descent on the Gram form: c = X^T y / n, gram = X^T X / n.

    Equivalent to `lasso_cd` but O(p) per coordinate update independent of
    the row count, which makes the 100-alpha x 5-fold path affordable.
    """
    p = len(c)
    w = w0.copy()
    gw = gram @ w
    diag = np.diag(gram)
    for _ in range(max_iter):
        max_delta = 0.0
        for j in range(p):
            if diag[j] == 0.0:
                continue
            rho = c[j] - gw[j] + diag[j] * w[j]
            w_new = soft_threshold(rho, alpha) / diag[j]
            delta = w_new - w[j]
            if delta != 0.0:
                w[j] = w_new
                gw += gram[:, j] * delta
                max_delta = max(max_delta, abs(delta))
        # tolerance relative to the coefficient scale
        if max_delta < tol * max(1.0, float(np.abs(w).max())):
            break
    return w


def _standardize(x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    means = x.mean(axis=0)
    sds = x.std(axis=0)
    sds = np.where(sds < 1e-12, 1.0, sds)
    return (x - means) / sds, means, sds


def alpha_grid(xs: np.ndarray, y_centered: np.ndarray,
               n_alphas: int = 100, decades: float = 4.0) -> np.ndarray:
    """Log-spaced descending grid from alpha_max = max|X^T y| / n."""
    n = len(y_centered)
    alpha_max = float(np.abs(xs.T @ y_centered).max() / n)
    if alpha_max <= 0:
        raise DegenerateInputError("target is orthogonal to every feature")
    return np.geomspace(alpha_max, alpha_max * 10.0 ** -decades, n_alphas)


def fit_lasso(x: np.ndarray, y: np.ndarray, n_alphas: int = 100,
              folds: int = 5, seed: int = 0, tol: float = 1e-6) -> LassoModel:
    """Cross-validated lasso: warm-started path per fold, alpha with the
    minimal mean CV RMSE (largest such alpha on ties), final refit on all
    training rows."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if np.isnan(x).any() or np.isnan(y).any():
        raise ValidationError("NaN in features or target")
    n = len(y)
    if n < folds:
        raise ConfigError(f"need at least {folds} rows for {folds}-fold CV")
    if np.ptp(y) == 0:
        raise DegenerateInputError("constant target")

    xs_full, means, sds = _standardize(x)
    yc_full = y - y.mean()
    alphas = alpha_grid(xs_full, yc_full, n_alphas)

    fold_of = np.empty(n, dtype=int)
    perm = derive_rng(seed).permutation(n)
    for f, chunk in enumerate(np.array_split(perm, folds)):
        fold_of[chunk] = f

    cv_rmse = np.zeros((len(alphas), folds))
    for f in range(folds):
        tr, va = fold_of != f, fold_of == f
        xs_tr, m_tr, s_tr = _standardize(x[tr])
        yc_tr = y[tr] - y[tr].mean()
        xs_va = (x[va] - m_tr) / s_tr
        n_tr = tr.sum()
        c = xs_tr.T @ yc_tr / n_tr
        gram = xs_tr.T @ xs_tr / n_tr
        w = np.zeros(x.shape[1])
        for a_idx, alpha in enumerate(alphas):
            w = _cd_gram(c, gram, alpha, w0=w, tol=tol, max_iter=100)
            pred = xs_va @ w + y[tr].mean()
            cv_rmse[a_idx, f] = rmse(pred, y[va])

    mean_rmse = cv_rmse.mean(axis=1)
    best_idx = int(np.argmin(mean_rmse))  # grid descends: ties pick larger alpha
    best_alpha = float(alphas[best_idx])

    c_full = xs_full.T @ yc_full / n
    gram_full = xs_full.T @ xs_full / n
    w = np.zeros(x.shape[1])
    for alpha in alphas[:best_idx + 1]:
        w = _cd_gram(c_full, gram_full, alpha, w0=w, tol=tol, max_iter=1000)
    return LassoModel(coefficients=w, intercept=float(y.mean()),
                      alpha=best_alpha, feature_means=means, feature_sds=sds,
                      cv_rmse=float(mean_rmse[best_idx]))


def predict_lasso(model: LassoModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1] != model.coefficients.shape[0]:
        raise DimensionError("feature width mismatch")
    xs = (x - model.feature_means) / model.feature_sds
    return xs @ model.coefficients + model.intercept


# ---------------------------------------------------------------------------
# Gradient boosting: exact greedy regression trees on residuals
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TreeNode:
    feature: int = -1
    threshold: float = 0.0
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None
    value: float = 0.0

    @property
    def is_leaf(self) -> bool:
        return self.left is None


def _best_split(x: np.ndarray, r: np.ndarray, min_leaf: int):
    """Variance-reduction split over sorted values of every feature.

    Returns (feature, threshold) or None when no split improves the
    parent sum of squared errors.
    """
    n, d = x.shape
    if n < 2 * min_leaf:
        return None
    order = np.argsort(x, axis=0, kind="stable")
    xs = np.take_along_axis(x, order, axis=0)
    rs = np.take_along_axis(np.broadcast_to(r[:, None], (n, d)), order, axis=0)
    csum = np.cumsum(rs, axis=0)
    total = csum[-1, 0]
    n_left = np.arange(1, n, dtype=np.float64)[:, None]
    sum_left = csum[:-1]
    gain = sum_left ** 2 / n_left + (total - sum_left) ** 2 / (n - n_left)
    valid = (xs[1:] > xs[:-1]) & (n_left >= min_leaf) & (n - n_left >= min_leaf)
    if not valid.any():
        return None
    gain = np.where(valid, gain, -np.inf)
    flat = int(np.argmax(gain))
    i, j = divmod(flat, d)
    if gain[i, j] - total ** 2 / n <= 1e-12:
        return None
    threshold = (xs[i, j] + xs[i + 1, j]) / 2.0
    return j, float(threshold)


def build_tree(x: np.ndarray, r: np.ndarray, max_depth: int,
               min_leaf: int, depth: int = 0) -> TreeNode:
    if depth >= max_depth or len(r) < 2 * min_leaf:
        return TreeNode(value=float(r.mean()))
    split = _best_split(x, r, min_leaf)
    if split is None:
        return TreeNode(value=float(r.mean()))
    feature, threshold = split
    mask = x[:, feature] <= threshold
    return TreeNode(feature=feature, threshold=threshold,
                    left=build_tree(x[mask], r[mask], max_depth, min_leaf, depth + 1),
                    right=build_tree(x[~mask], r[~mask], max_depth, min_leaf, depth + 1))


def tree_predict(node: TreeNode, x: np.ndarray) -> np.ndarray:
    out = np.empty(len(x))
    _tree_predict_into(node, x, np.arange(len(x)), out)
    return out


def _tree_predict_into(node, x, idx, out):
    if node.is_leaf:
        out[idx] = node.value
        return
    mask = x[idx, node.feature] <= node.threshold
    _tree_predict_into(node.left, x, idx[mask], out)
    _tree_predict_into(node.right, x, idx[~mask], out)


@dataclass(frozen=True)
class GBMParams:
    max_depth: int = 3
    learning_rate: float = 0.1
    min_samples_leaf: int = 5
    subsample: float = 1.0


@dataclass(frozen=True)
class SearchBudget:
    n_trials: int = 20
    seed: int = 0
    depth_range: tuple[int, int] = (2, 8)
    lr_range: tuple[float, float] = (0.01, 0.3)       # log-uniform
    leaf_range: tuple[int, int] = (5, 50)
    subsample_range: tuple[float, float] = (0.6, 1.0)

    def __post_init__(self):
        if self.n_trials < 1:
            raise ConfigError("n_trials must be >= 1")

    def sample(self, rng: np.random.Generator) -> GBMParams:
        return GBMParams(
            max_depth=int(rng.integers(self.depth_range[0], self.depth_range[1] + 1)),
            learning_rate=float(np.exp(rng.uniform(np.log(self.lr_range[0]),
                                                   np.log(self.lr_range[1])))),
            min_samples_leaf=int(rng.integers(self.leaf_range[0],
                                              self.leaf_range[1] + 1)),
            subsample=float(rng.uniform(*self.subsample_range)))


@dataclass
class GBMModel:
    trees: list[TreeNode]
    baseline: float
    learning_rate: float
    best_iteration: int                  # prediction uses trees[:best_iteration]
    params: GBMParams
    val_rmse: float = float("nan")
    train_rmse_history: list[float] = field(default_factory=list)
    val_rmse_history: list[float] = field(default_factory=list)


def fit_gbm_with_params(x_train, y_train, x_val, y_val, params: GBMParams,
                        patience: int = 20, n_rounds_max: int = 300,
                        rng: np.random.Generator | None = None) -> GBMModel:
    """Boost squared-error residuals until the validation RMSE stops
    improving for `patience` rounds; best_iteration marks the minimum."""
    x_train = np.asarray(x_train, dtype=np.float64)
    y_train = np.asarray(y_train, dtype=np.float64)
    x_val = np.asarray(x_val, dtype=np.float64)
    y_val = np.asarray(y_val, dtype=np.float64)
    if len(y_val) == 0:
        raise ConfigError("early stopping needs a non-empty validation set")
    if np.isnan(x_train).any() or np.isnan(x_val).any():
        raise ValidationError("NaN in features")
    rng = rng if rng is not None else derive_rng(0)

    n = len(y_train)
    baseline = float(y_train.mean())
    f_train = np.full(n, baseline)
    f_val = np.full(len(y_val), baseline)
    best_rmse = rmse(f_val, y_val)
    best_iter = 0
    since_best = 0
    trees: list[TreeNode] = []
    train_hist, val_hist = [], []

    for _ in range(n_rounds_max):
        residual = y_train - f_train
        if params.subsample < 1.0:
            m = max(1, int(round(params.subsample * n)))
            rows = rng.choice(n, size=m, replace=False)
        else:
            rows = slice(None)
        tree = build_tree(x_train[rows], residual[rows], params.max_depth,
                          params.min_samples_leaf)
        trees.append(tree)
        f_train += params.learning_rate * tree_predict(tree, x_train)
        f_val += params.learning_rate * tree_predict(tree, x_val)
        train_hist.append(rmse(f_train, y_train))
        v = rmse(f_val, y_val)
        val_hist.append(v)
        if v < best_rmse:
            best_rmse = v
            best_iter = len(trees)
            since_best = 0
        else:
            since_best += 1
            if since_best >= patience:
                break
    return GBMModel(trees=trees, baseline=baseline,
                    learning_rate=params.learning_rate, best_iteration=best_iter,
                    params=params, val_rmse=best_rmse,
                    train_rmse_history=train_hist, val_rmse_history=val_hist)


def fit_gbm(x_train, y_train, x_val, y_val, budget: SearchBudget | None = None,
            patience: int = 20, n_rounds_max: int = 300) -> GBMModel:
    """Seeded uniform random hyperparameter search over `budget.n_trials`
    trials; keeps the trial (and iteration) with minimal validation RMSE."""
    budget = budget if budget is not None else SearchBudget()
    best: GBMModel | None = None
    for trial in range(budget.n_trials):
        rng = derive_rng(budget.seed, trial)
        params = budget.sample(rng)
        model = fit_gbm_with_params(x_train, y_train, x_val, y_val, params,
                                    patience=patience, n_rounds_max=n_rounds_max,
                                    rng=rng)
        if best is None or model.val_rmse < best.val_rmse:
            best = model
    return best


def predict_gbm(model: GBMModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.full(len(x), model.baseline)
    for tree in model.trees[:model.best_iteration]:
        out += model.learning_rate * tree_predict(tree, x)
    return out


def predict(model, x: np.ndarray) -> np.ndarray:
    if isinstance(model, LassoModel):
        return predict_lasso(model, x)
    if isinstance(model, GBMModel):
        return predict_gbm(model, x)
    raise ConfigError(f"unknown model type {type(model).__name__}")


# ---------------------------------------------------------------------------
# JSON dumps
# ---------------------------------------------------------------------------


def _tree_to_dict(node: TreeNode) -> dict:
    if node.is_leaf:
        return {"value": node.value}
    return {"feature": node.feature, "threshold": node.threshold,
            "left": _tree_to_dict(node.left), "right": _tree_to_dict(node.right)}


def _tree_from_dict(d: dict) -> TreeNode:
    if "value" in d:
        return TreeNode(value=d["value"])
    return TreeNode(feature=d["feature"], threshold=d["threshold"],
                    left=_tree_from_dict(d["left"]),
                    right=_tree_from_dict(d["right"]))


def model_to_json(model) -> str:
    if isinstance(model, LassoModel):
        doc = {"kind": "lasso", "coefficients": model.coefficients.tolist(),
               "intercept": model.intercept, "alpha": model.alpha,
               "feature_means": model.feature_means.tolist(),
               "feature_sds": model.feature_sds.tolist()}
    elif isinstance(model, GBMModel):
        doc = {"kind": "gbm", "baseline": model.baseline,
               "learning_rate": model.learning_rate,
               "best_iteration": model.best_iteration,
               "hyperparameters": {"max_depth": model.params.max_depth,
                                   "learning_rate": model.params.learning_rate,
                                   "min_samples_leaf": model.params.min_samples_leaf,
                                   "subsample": model.params.subsample},
               "trees": [_tree_to_dict(t) for t in model.trees]}
    else:
        raise ConfigError(f"unknown model type {type(model).__name__}")
    return json.dumps(doc)


def model_from_json(text: str):
    doc = json.loads(text)
    if doc.get("kind") == "lasso":
        return LassoModel(coefficients=np.array(doc["coefficients"]),
                          intercept=doc["intercept"], alpha=doc["alpha"],
                          feature_means=np.array(doc["feature_means"]),
                          feature_sds=np.array(doc["feature_sds"]))
    if doc.get("kind") == "gbm":
        h = doc["hyperparameters"]
        return GBMModel(trees=[_tree_from_dict(t) for t in doc["trees"]],
                        baseline=doc["baseline"],
                        learning_rate=doc["learning_rate"],
                        best_iteration=doc["best_iteration"],
                        params=GBMParams(max_depth=h["max_depth"],
                                         learning_rate=h["learning_rate"],
                                         min_samples_leaf=h["min_samples_leaf"],
                                         subsample=h["subsample"]))
    raise ConfigError("unknown model dump kind")
