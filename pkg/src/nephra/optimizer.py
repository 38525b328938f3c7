"""L1-regularized, class-weighted logistic regression fitted by proximal gradient descent.

Objective over N samples with class weights ``w_pos``/``w_neg``::

    F(w, b) = (1/N) sum_i c_{y_i} [log(1 + exp(z_i)) - y_i z_i] + lam * ||w||_1,
    z_i = b + <w, x_i>

The intercept is never penalized.  Each iteration takes a gradient step on the
smooth part, soft-thresholds the weights, and backtracks until the standard
quadratic upper bound holds and F does not increase.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
import scipy.sparse as sp
from scipy.special import expit
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .features import SparseVector

PAPER_LAMBDA_GRID = (0.0001, 0.001, 0.002, 0.005, 0.007, 0.01)
MODEL_HEADER = "nephra-model v1"
BLOCK_ROWS = 16384


class DegenerateLabelsError(ValueError):
    pass


class ModelFormatError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lambda_grid: tuple = PAPER_LAMBDA_GRID
    max_iters: int = 2000
    tol: float = 1e-7
    step_init: float = 1.0
    step_shrink: float = 0.5
    step_grow: float = 1.25
    min_step: float = 1e-14
    class_weights: Union[str, tuple] = "balanced"
    fit_intercept: bool = True
    accelerated: bool = False
    seed: int = 0
    threads: int = 1
    # rows per reduction block; fixes summation order, unlike ``threads``
    block_rows: int = BLOCK_ROWS

    def __post_init__(self):
        if any(lam < 0 for lam in self.lambda_grid):
            raise ValueError("all lambda values must be >= 0")
        if self.tol <= 0:
            raise ValueError("tol must be > 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not 0 < self.step_shrink < 1 or self.step_grow < 1:
            raise ValueError("need 0 < step_shrink < 1 <= step_grow")
        if self.class_weights != "balanced":
            wp, wn = self.class_weights
            if wp <= 0 or wn <= 0:
                raise ValueError("class weights must be positive")


@dataclass
class Model:
    weights: np.ndarray
    intercept: float
    lam: float
    class_weights: tuple
    iterations: int = 0
    objective: float = float("nan")
    converged: bool = False
    space_version: str = ""
    objective_history: list = field(default_factory=list, repr=False, compare=False)

    @property
    def dims(self) -> int:
        return len(self.weights)

    @property
    def nonzeros(self) -> int:
        return int(np.count_nonzero(self.weights))

    def to_text(self) -> str:
        nz = np.flatnonzero(self.weights)
        lines = [
            MODEL_HEADER,
            f"feature_space {self.space_version or '-'}",
            f"lambda {self.lam!r}",
            f"intercept {float(self.intercept)!r}",
            f"class_weights {float(self.class_weights[0])!r} {float(self.class_weights[1])!r}",
            f"dims {self.dims}",
            f"iterations {self.iterations}",
            f"objective {float(self.objective)!r}",
            f"converged {int(self.converged)}",
            f"nonzero {len(nz)}",
        ]
        lines.extend(f"{j} {float(self.weights[j])!r}" for j in nz)
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Model":
        lines = text.splitlines()
        if not lines or lines[0].strip() != MODEL_HEADER:
            raise ModelFormatError(f"not a model file (expected {MODEL_HEADER!r})")
        head = {}
        for line in lines[1:10]:
            key, _, value = line.partition(" ")
            head[key] = value
        try:
            dims = int(head["dims"])
            weights = np.zeros(dims)
            n_nz = int(head["nonzero"])
            for line in lines[10:10 + n_nz]:
                j, v = line.split()
                weights[int(j)] = float(v)
            wp, wn = head["class_weights"].split()
            space = head["feature_space"]
            return cls(weights, float(head["intercept"]), float(head["lambda"]),
                       (float(wp), float(wn)), int(head["iterations"]),
                       float(head["objective"]), bool(int(head["converged"])),
                       "" if space == "-" else space)
        except (KeyError, ValueError, IndexError) as exc:
            raise ModelFormatError(f"malformed model file: {exc}") from None


# ------------------------------------------------------------ validation

def as_csr(X) -> sp.csr_matrix:
    if isinstance(X, (list, tuple)) and X and isinstance(X[0], SparseVector):
        from .features import to_csr
        return to_csr(X)
    if sp.issparse(X):
        return sp.csr_matrix(X, dtype=np.float64)
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D design matrix, got shape {arr.shape}")
    return sp.csr_matrix(arr)


def check_labels(y, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (n,):
        raise ValueError(f"labels shape {y.shape} does not match {n} rows")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0/1")
    return y.astype(np.float64)


def resolve_class_weights(y, mode: Union[str, tuple] = "balanced") -> tuple:
    y = np.asarray(y)
    n, n_pos = len(y), int(np.count_nonzero(y))
    n_neg = n - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabelsError("degenerate labels: both classes must be present")
    if mode == "balanced":
        return (n / (2.0 * n_pos), n / (2.0 * n_neg))
    wp, wn = mode
    return (float(wp), float(wn))


def _check_dims(weights, X):
    if len(weights) != X.shape[1]:
        raise ValueError(f"dimension mismatch: weights {len(weights)} vs data {X.shape[1]}")


# ------------------------------------------------------------ core math

def soft_threshold(x, t):
    """Proximal map of t*|.|: sign(x) * max(|x| - t, 0)."""
    if np.any(np.asarray(t) < 0):
        raise ValueError("threshold must be >= 0")
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


class _Problem:
    """Smooth weighted log loss over fixed row blocks.

    Partial sums are reduced in block order, so results do not depend on how
    many worker threads evaluate the blocks.
    """

    def __init__(self, X, y, class_weights, threads: int = 1, block_rows: int = BLOCK_ROWS):
        self.X = as_csr(X)
        n = self.X.shape[0]
        self.y = check_labels(y, n)
        wp, wn = class_weights
        if wp <= 0 or wn <= 0:
            raise ValueError("class weights must be positive")
        self.s = np.where(self.y == 1.0, wp, wn) / n
        bounds = list(range(0, n, block_rows)) + [n]
        self.blocks = [
            (self.X[a:b], self.X[a:b].T.tocsr(), self.y[a:b], self.s[a:b])
            for a, b in zip(bounds[:-1], bounds[1:])
        ]
        self.pool = ThreadPoolExecutor(threads) if threads > 1 and len(self.blocks) > 1 else None

    def close(self):
        if self.pool is not None:
            self.pool.shutdown()

    def _map(self, fn):
        if self.pool is None:
            return [fn(blk) for blk in self.blocks]
        return list(self.pool.map(fn, self.blocks))

    def loss(self, w, b) -> float:
        def part(blk):
            Xb, _, yb, sb = blk
            z = Xb @ w + b
            return float(np.sum(sb * (np.logaddexp(0.0, z) - yb * z)))
        total = 0.0
        for v in self._map(part):
            total += v
        return total

    def loss_grad(self, w, b):
        def part(blk):
            Xb, XbT, yb, sb = blk
            z = Xb @ w + b
            r = sb * (expit(z) - yb)
            return float(np.sum(sb * (np.logaddexp(0.0, z) - yb * z))), XbT @ r, float(np.sum(r))
        parts = self._map(part)
        f, gw, gb = parts[0][0], parts[0][1].copy(), parts[0][2]
        for fi, gwi, gbi in parts[1:]:
            f += fi
            gw += gwi
            gb += gbi
        return f, gw, gb


def weighted_objective(weights, intercept, X, y, class_weights, lam) -> float:
    prob = _Problem(X, y, class_weights)
    _check_dims(weights, prob.X)
    w = np.asarray(weights, dtype=np.float64)
    return prob.loss(w, float(intercept)) + lam * float(np.abs(w).sum())


def smooth_gradient(weights, intercept, X, y, class_weights):
    """Gradient of the mean weighted log loss: (grad_w, grad_b)."""
    prob = _Problem(X, y, class_weights)
    _check_dims(weights, prob.X)
    _, gw, gb = prob.loss_grad(np.asarray(weights, dtype=np.float64), float(intercept))
    return gw, gb


def null_intercept(y, class_weights) -> float:
    """Optimal intercept when all weights are zero."""
    y = np.asarray(y, dtype=float)
    wp, wn = class_weights
    pos = wp * y.sum()
    neg = wn * (len(y) - y.sum())
    return math.log(pos / neg)


def lambda_max(X, y, class_weights, fit_intercept: bool = True) -> float:
    """Smallest lambda at which the all-zero weight vector is optimal."""
    b = null_intercept(y, class_weights) if fit_intercept else 0.0
    gw, _ = smooth_gradient(np.zeros(as_csr(X).shape[1]), b, X, y, class_weights)
    return float(np.max(np.abs(gw))) if len(gw) else 0.0


# ------------------------------------------------------------ training

def _prox_step(prob, w, b, f, gw, gb, F, lam, t, cfg):
    """Backtrack from step t until the quadratic bound holds and F does not increase."""
    while True:
        w_new = soft_threshold(w - t * gw, t * lam)
        b_new = b - t * gb if cfg.fit_intercept else b
        f_new = prob.loss(w_new, b_new)
        dw = w_new - w
        db = b_new - b
        bound = f + float(gw @ dw) + gb * db + (float(dw @ dw) + db * db) / (2.0 * t)
        F_new = f_new + lam * float(np.abs(w_new).sum())
        if f_new <= bound and F_new <= F:
            return w_new, b_new, F_new, t
        t *= cfg.step_shrink
        if t < cfg.min_step:
            return None


def train(X, y, lam: float, config: TrainConfig = TrainConfig(), space_version: str = "") -> Model:
    """Fit one model at a fixed lambda, starting from all zeros."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    X = as_csr(X)
    y = check_labels(y, X.shape[0])
    cw = resolve_class_weights(y, config.class_weights)
    prob = _Problem(X, y, cw, threads=config.threads, block_rows=config.block_rows)
    try:
        null = _null_solution(prob, lam, cw, config)
        if null is not None:
            w, b, hist, its, conv = null
        elif config.accelerated:
            w, b, hist, its, conv = _fit_accelerated(prob, lam, config)
        else:
            w, b, hist, its, conv = _fit_monotone(prob, lam, config)
    finally:
        prob.close()
    return Model(w, b, float(lam), cw, its, hist[-1], conv, space_version, hist)


def _null_solution(prob, lam, cw, cfg):
    """Closed-form optimum when lam >= lambda_max: zero weights, null intercept."""
    d = prob.X.shape[1]
    w = np.zeros(d)
    b = null_intercept(prob.y, cw) if cfg.fit_intercept else 0.0
    f, gw, _ = prob.loss_grad(w, b)
    if d and lam < float(np.max(np.abs(gw))):
        return None
    # b minimizes the loss at w = 0, so the history still never increases
    return w, b, [prob.loss(w, 0.0), f], 1, True


def _fit_monotone(prob, lam, cfg):
    d = prob.X.shape[1]
    w, b = np.zeros(d), 0.0
    f, gw, gb = prob.loss_grad(w, b)
    F = f
    hist = [F]
    t = cfg.step_init
    converged = False
    it = 0
    for it in range(1, cfg.max_iters + 1):
        step = _prox_step(prob, w, b, f, gw, gb, F, lam, t, cfg)
        if step is None:
            converged = True
            it -= 1
            break
        w, b, F_new, t = step
        f, gw, gb = prob.loss_grad(w, b)
        rel = (F - F_new) / max(abs(F), np.finfo(float).tiny)
        F = F_new
        hist.append(F)
        if rel < cfg.tol:
            converged = True
            break
        t *= cfg.step_grow
    return w, b, hist, it, converged


def _fit_accelerated(prob, lam, cfg):
    """FISTA with a monotone safeguard: reject non-decreasing steps and restart momentum."""
    d = prob.X.shape[1]
    x, bx = np.zeros(d), 0.0
    F = prob.loss(x, bx)
    hist = [F]
    yv, by = x.copy(), bx
    theta = 1.0
    t = cfg.step_init
    converged = False
    it = 0
    for it in range(1, cfg.max_iters + 1):
        fy, gw, gb = prob.loss_grad(yv, by)
        # only the quadratic bound at the extrapolated point; F-decrease is checked against x below
        step = _prox_step(prob, yv, by, fy, gw, gb, np.inf, lam, t, cfg)
        if step is None:
            converged = True
            it -= 1
            break
        z, bz, Fz, t = step
        theta_next = (1.0 + math.sqrt(1.0 + 4.0 * theta * theta)) / 2.0
        if Fz <= F:
            rel = (F - Fz) / max(abs(F), np.finfo(float).tiny)
            plain = theta == 1.0  # this step had no momentum
            yv = z + ((theta - 1.0) / theta_next) * (z - x)
            by = bz + ((theta - 1.0) / theta_next) * (bz - bx)
            x, bx, F = z, bz, Fz
            theta = theta_next
            hist.append(F)
            if rel < cfg.tol:
                if plain:
                    converged = True
                    break
                # a small momentum step proves little; confirm with a plain step
                yv, by, theta = x.copy(), bx, 1.0
        else:
            # restart from the last accepted iterate
            yv, by, theta = x.copy(), bx, 1.0
            hist.append(F)
        t *= cfg.step_grow
    return x, bx, hist, it, converged


def predict(model: Model, x: SparseVector) -> float:
    if x.dims != model.dims:
        raise ValueError(f"dimension mismatch: vector {x.dims} vs model {model.dims}")
    z = model.intercept + float(sum(model.weights[j] for j in x.active))
    return float(expit(z))


def predict_proba(model: Model, X) -> np.ndarray:
    X = as_csr(X)
    _check_dims(model.weights, X)
    return expit(X @ model.weights + model.intercept)


@dataclass(frozen=True)
class SweepRow:
    lam: float
    nonzeros: int
    l1_norm: float
    train_objective: float
    iterations: int
    valid_auc: Optional[float]


def sweep(train_X, train_y, valid_X, valid_y, config: TrainConfig = TrainConfig(),
          space_version: str = ""):
    """Train one model per lambda; pick the best validation AUC, ties going to the larger lambda."""
    from .metrics import roc_auc

    check_labels(valid_y, as_csr(valid_X).shape[0])
    resolve_class_weights(valid_y)  # both classes required for a validation AUC
    rows, models = [], []
    for lam in config.lambda_grid:
        m = train(train_X, train_y, lam, config, space_version)
        auc = roc_auc(predict_proba(m, valid_X), valid_y)
        rows.append(SweepRow(float(lam), m.nonzeros, float(np.abs(m.weights).sum()),
                             m.objective, m.iterations, auc))
        models.append(m)
    best = max(range(len(rows)), key=lambda i: (rows[i].valid_auc, rows[i].lam))
    return models[best], rows


class L1LogisticRegression(ClassifierMixin, BaseEstimator):
    """scikit-learn wrapper around :func:`train`.

    ``lam`` multiplies the L1 norm against the *mean* weighted log loss.
    """

    def __init__(self, lam=0.001, class_weight="balanced", fit_intercept=True, max_iter=2000,
                 tol=1e-7, accelerated=False, n_threads=1):
        self.lam = lam
        self.class_weight = class_weight
        self.fit_intercept = fit_intercept
        self.max_iter = max_iter
        self.tol = tol
        self.accelerated = accelerated
        self.n_threads = n_threads

    def _train_config(self) -> TrainConfig:
        return TrainConfig(lambda_grid=(self.lam,), max_iters=self.max_iter, tol=self.tol,
                           class_weights=self.class_weight, fit_intercept=self.fit_intercept,
                           accelerated=self.accelerated, threads=self.n_threads)

    def fit(self, X, y):
        X = check_array(X, accept_sparse="csr", dtype=np.float64)
        y = np.asarray(y)
        self.classes_ = np.unique(y)
        if len(self.classes_) != 2:
            raise DegenerateLabelsError("degenerate labels: both classes must be present")
        y01 = (y == self.classes_[1]).astype(np.float64)
        self.model_ = train(X, y01, self.lam, self._train_config())
        self.coef_ = self.model_.weights[np.newaxis, :]
        self.intercept_ = np.array([self.model_.intercept])
        self.n_iter_ = self.model_.iterations
        self.objective_history_ = list(self.model_.objective_history)
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, accept_sparse="csr", dtype=np.float64)
        _check_dims(self.model_.weights, X)
        return np.asarray(X @ self.model_.weights).ravel() + self.model_.intercept

    def predict_proba(self, X):
        p = expit(self.decision_function(X))
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return self.classes_[(self.decision_function(X) > 0).astype(int)]
