"""Supervised dimension reduction under a joint-normal approximation.

The reduction T maximizes the Gaussian mutual information between the
response and T(x), equivalently minimizes ln det of the residual covariance
of y given T(x). PCA and correlated-grid-point baselines share the
:class:`Reducer` container.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import ExampleSet
from .numeric import AdamState, adam_step, log_det_pd, reverse_grad, Tape
from .numeric import autodiff as ad

log = logging.getLogger(__name__)

REDUCER_VERSION = "reducer-v1"
KINDS = ("affine", "shallow-net", "pca", "grid-pick")


class TrainingDivergedError(RuntimeError):
    """Non-finite objective during training; ``best`` holds the best iterate."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


@dataclass(frozen=True)
class CovBlocks:
    yy: object  # (p, p)
    yt: object  # (p, m)
    tt: object  # (m, m)

    @property
    def p(self):
        return np.shape(ad.value(self.yy))[0]

    @property
    def m(self):
        return np.shape(ad.value(self.tt))[0]

    def joint(self) -> np.ndarray:
        yy, yt, tt = (np.asarray(ad.value(b)) for b in (self.yy, self.yt, self.tt))
        return np.block([[yy, yt], [yt.T, tt]])


def empirical_cov(Y, T) -> CovBlocks:
    """Centered sample covariance blocks (1/(N-1) normalization).

    ``T`` may be a tape variable, in which case the blocks are differentiable.
    """
    n, p = np.shape(ad.value(Y))
    m = np.shape(ad.value(T))[1]
    if np.shape(ad.value(T))[0] != n:
        raise ValueError("Y and T must have the same number of rows")
    if n < p + m + 1:
        raise ValueError(f"need at least p+m+1 = {p + m + 1} samples, got {n}")
    Yc = Y - ad.mean(Y, axis=0, keepdims=True)
    Tc = T - ad.mean(T, axis=0, keepdims=True)
    s = 1.0 / (n - 1)
    return CovBlocks(ad.transpose(Yc) @ Yc * s, ad.transpose(Yc) @ Tc * s, ad.transpose(Tc) @ Tc * s)


def _schur(cov: CovBlocks, jitter: float):
    m = cov.m
    tt = cov.tt + jitter * np.eye(m) if jitter else cov.tt
    return cov.yy - cov.yt @ ad.solve_pd(tt, ad.transpose(cov.yt))


def gaussian_mi(cov: CovBlocks) -> float:
    """I(Y; T) in nats for a joint normal with the given covariance blocks."""
    val = CovBlocks(*(np.asarray(ad.value(b)) for b in (cov.yy, cov.yt, cov.tt)))
    S = _schur(val, 0.0)
    S = 0.5 * (S + S.T)
    mi = 0.5 * log_det_pd(val.yy) - 0.5 * log_det_pd(S)
    if -1e-12 < mi < 0:
        mi = 0.0
    return float(mi)


def schur_objective(cov: CovBlocks, jitter: float = 0.0):
    """ln det(S_yy - S_yt (S_tt + jitter I)^-1 S_ty); differentiable on a tape."""
    if jitter < 0:
        raise ValueError("jitter must be non-negative")
    S = _schur(cov, jitter)
    return ad.log_det_pd(0.5 * (S + ad.transpose(S)))


# --- reducer container ---------------------------------------------------------

@dataclass
class Reducer:
    """A fitted map from R^d to R^m.

    Inputs are standardized with ``in_mean``/``in_scale`` before the map;
    outputs are standardized with ``out_mean``/``out_scale`` afterwards
    (identity for the linear baselines).
    """

    kind: str
    d: int
    m: int
    params: dict
    in_mean: np.ndarray
    in_scale: np.ndarray
    out_mean: np.ndarray
    out_scale: np.ndarray
    history: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown reducer kind {self.kind!r}")

    def raw(self, X, params=None):
        params = self.params if params is None else params
        if self.kind == "grid-pick":
            return np.asarray(X)[:, np.asarray(params["indices"], dtype=np.int64)]
        Xs = (np.asarray(X, dtype=float) - self.in_mean) / self.in_scale
        return _net_forward(self.kind, params, Xs)

    def apply(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.d:
            raise ValueError(f"expected {self.d} predictor columns, got {X.shape[1]}")
        return (self.raw(X) - self.out_mean) / self.out_scale

    def to_dict(self) -> dict:
        return {
            "version": REDUCER_VERSION,
            "kind": self.kind,
            "d": self.d,
            "m": self.m,
            "params": {k: _encode(v) for k, v in sorted(self.params.items())},
            "in_mean": _encode(self.in_mean),
            "in_scale": _encode(self.in_scale),
            "out_mean": _encode(self.out_mean),
            "out_scale": _encode(self.out_scale),
            "history": [float(h) for h in self.history],
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Reducer":
        found = doc.get("version")
        if found != REDUCER_VERSION:
            raise ValueError(f"reducer version mismatch: expected {REDUCER_VERSION!r}, found {found!r}")
        return cls(doc["kind"], int(doc["d"]), int(doc["m"]),
                   {k: _decode(v) for k, v in doc["params"].items()},
                   _decode(doc["in_mean"]), _decode(doc["in_scale"]),
                   _decode(doc["out_mean"]), _decode(doc["out_scale"]),
                   list(doc.get("history", [])), dict(doc.get("meta", {})))


def _encode(a) -> dict:
    a = np.asarray(a)
    kind = "int" if np.issubdtype(a.dtype, np.integer) else "float"
    return {"shape": list(a.shape), "dtype": kind, "data": a.reshape(-1).tolist()}


def _decode(doc: dict) -> np.ndarray:
    dtype = np.int64 if doc.get("dtype") == "int" else float
    data = np.asarray(doc["data"], dtype=dtype)
    if data.size != int(np.prod(doc["shape"])):
        raise ValueError("array payload does not match declared shape")
    return data.reshape(doc["shape"])


def _net_forward(kind, params, Xs):
    if kind == "affine":
        return Xs @ params["W"] + params["b"]
    if kind == "shallow-net":
        hidden = ad.tanh(Xs @ params["W1"] + params["b1"])
        return hidden @ params["W2"] + Xs @ params["W"] + params["b"]
    if kind == "pca":
        return Xs @ params["V"]
    raise ValueError(f"reducer kind {kind!r} has no network form")


def _standardizer(X):
    mean = X.mean(axis=0)
    scale = X.std(axis=0, ddof=1) if len(X) > 1 else np.ones(X.shape[1])
    scale = np.where(scale > 0, scale, 1.0)
    return mean, scale


# --- training -------------------------------------------------------------------

@dataclass(frozen=True)
class ReducerTrainConfig:
    architecture: str = "shallow-net"  # or "affine"
    hidden: int = 64
    activation: str = "tanh"
    iterations: int = 2000
    lr: float = 0.01
    beta1: float = 0.99
    beta2: float = 0.99
    jitter: float = 1e-6               # relative to trace(S_tt)/m
    seed: int = 0
    batch: object = "auto"             # "auto", "full" or a minibatch size
    eval_interval: int = 25            # steps between validation checks

    def __post_init__(self):
        if self.eval_interval < 1:
            raise ValueError("eval_interval must be >= 1")
        if self.architecture not in ("shallow-net", "affine"):
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.activation != "tanh":
            raise ValueError("only tanh hidden activation is supported")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.jitter < 0:
            raise ValueError("jitter must be >= 0")


def _init_params(cfg: ReducerTrainConfig, d: int, m: int, rng) -> dict:
    params = {"W": rng.normal(scale=1.0 / np.sqrt(d), size=(d, m)), "b": np.zeros((1, m))}
    if cfg.architecture == "shallow-net":
        params["W1"] = rng.normal(scale=1.0 / np.sqrt(d), size=(d, cfg.hidden))
        params["b1"] = np.zeros((1, cfg.hidden))
        params["W2"] = rng.normal(scale=0.1 / np.sqrt(cfg.hidden), size=(cfg.hidden, m))
    return params


def _batch_size(cfg: ReducerTrainConfig, n: int):
    if cfg.batch == "full" or (cfg.batch == "auto" and n <= 20000):
        return None
    return 2048 if cfg.batch == "auto" else int(cfg.batch)


def reducer_objective(kind, params, Xs, Y, jitter_rel):
    """Gauge-fixed Schur objective: outputs standardized over the batch first."""
    T = _net_forward(kind, params, Xs)
    n = np.shape(ad.value(T))[0]
    Tc = T - ad.mean(T, axis=0, keepdims=True)
    std = ad.sqrt(ad.sum_(Tc * Tc, axis=0, keepdims=True) / (n - 1))
    cov = empirical_cov(Y, Tc / std)
    m = cov.m
    jitter = jitter_rel * float(np.trace(ad.value(cov.tt))) / m
    return schur_objective(cov, jitter)


def train_reducer(dr_train: ExampleSet, m: int = 2,
                  config: ReducerTrainConfig = ReducerTrainConfig(),
                  validation: ExampleSet | None = None) -> Reducer:
    """Fit an information-preserving reduction by Adam on the Schur objective.

    Returns the best iterate seen, judged on ``validation`` every
    ``eval_interval`` steps when given (flexible nets overfit the training
    covariance), else on the training objective. An iterate scoring worse on
    the full training set than the initialization is never returned.
    """
    if m < 1:
        raise ValueError("target dimension must be >= 1")
    if len(dr_train) == 0:
        raise ValueError("empty training set")
    X, Y = dr_train.predictors, dr_train.responses
    n, d = X.shape
    in_mean, in_scale = _standardizer(X)
    Xs = (X - in_mean) / in_scale
    rng = np.random.default_rng(config.seed)
    params = _init_params(config, d, m, rng)
    init = params
    kind = config.architecture
    bsz = _batch_size(config, n)
    state = AdamState(lr=config.lr, beta1=config.beta1, beta2=config.beta2)
    if validation is not None and len(validation) < m + 2:
        validation = None
    if validation is not None:
        Xv, Yv = (validation.predictors - in_mean) / in_scale, validation.responses

    def full_objective(p):
        return float(reducer_objective(kind, p, Xs, Y, config.jitter))

    def val_objective(p):
        try:
            v = float(reducer_objective(kind, p, Xv, Yv, config.jitter))
        except np.linalg.LinAlgError:
            return np.inf
        return v if np.isfinite(v) else np.inf

    history, val_history = [], []
    best_val, best_params = np.inf, params
    for it in range(config.iterations + 1):
        if validation is not None and (it % config.eval_interval == 0 or it == config.iterations):
            v = val_objective(params)
            val_history.append((it, v))
            if v < best_val:
                best_val, best_params = v, params
        if it == config.iterations:
            break
        idx = None if bsz is None or bsz >= n else rng.choice(n, size=bsz, replace=False)
        xb, yb = (Xs, Y) if idx is None else (Xs[idx], Y[idx])
        tape = Tape()
        pv = {k: tape.param(v, k) for k, v in params.items()}
        try:
            obj = reducer_objective(kind, pv, xb, yb, config.jitter)
            val = float(obj.value)
        except np.linalg.LinAlgError:
            val = np.nan
        if not np.isfinite(val):
            best = _finish(kind, d, m, best_params, Xs, X, in_mean, in_scale, history, config)
            raise TrainingDivergedError(f"non-finite reducer objective at step {it}", best=best)
        history.append(val)
        if validation is None and val < best_val:
            best_val, best_params = val, params
        grads = reverse_grad(tape, obj)
        params, state = adam_step(params, grads, state)

    if (bsz is not None and bsz < n) or validation is not None:
        if full_objective(best_params) > full_objective(init):
            best_params = init
    red = _finish(kind, d, m, best_params, Xs, X, in_mean, in_scale, history, config)
    if val_history:
        red.meta["validation"] = [[it, v] for it, v in val_history]
    return red


def _finish(kind, d, m, params, Xs, X, in_mean, in_scale, history, config):
    raw = _net_forward(kind, params, Xs)
    out_mean, out_scale = _standardizer(raw)
    log.debug("reducer %s trained: final objective %.6g", kind, history[-1] if history else np.nan)
    return Reducer(kind, d, m, {k: np.array(v) for k, v in params.items()}, in_mean, in_scale,
                   out_mean, out_scale, history,
                   {"iterations": config.iterations, "lr": config.lr, "seed": config.seed,
                    "hidden": config.hidden if kind == "shallow-net" else 0})


# --- baselines ------------------------------------------------------------------

def pca_reducer(X, m: int = 2) -> Reducer:
    """Projection onto the top-m principal components of standardized predictors."""
    X = np.asarray(X, dtype=float)
    n, d = X.shape
    if m > d:
        raise ValueError(f"m = {m} exceeds predictor dimension {d}")
    if n <= m:
        raise ValueError(f"need more than m = {m} samples")
    mean, scale = _standardizer(X)
    Xs = (X - mean) / scale
    evals, evecs = np.linalg.eigh(Xs.T @ Xs / (n - 1))
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    tol = 1e-10 * max(evals[0], 1e-300)
    if evals[m - 1] <= tol:
        raise ValueError(f"predictor covariance has rank < {m}")
    V = evecs[:, :m].copy()
    for j in range(m):
        if V[np.argmax(np.abs(V[:, j])), j] < 0:
            V[:, j] = -V[:, j]
    explained = np.clip(evals, 0, None) / np.sum(np.clip(evals, 0, None))
    return Reducer("pca", d, m, {"V": V}, mean, scale, np.zeros(m), np.ones(m),
                   meta={"explained_variance": explained[:m].tolist()})


def gridpoint_scores(Y, X) -> np.ndarray:
    """max over response components of |Pearson correlation| per predictor; NaN if constant."""
    Xc = X - X.mean(axis=0)
    Yc = Y - Y.mean(axis=0)
    sx = np.sqrt(np.sum(Xc ** 2, axis=0))
    sy = np.sqrt(np.sum(Yc ** 2, axis=0))
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = (Xc.T @ Yc) / np.outer(sx, sy)
    corr[sx == 0] = np.nan
    return np.max(np.abs(corr), axis=1)


def gridpoint_reducer(dr_train: ExampleSet, m: int = 2) -> Reducer:
    """Select the m raw predictor coordinates most correlated with the response."""
    X, Y = dr_train.predictors, dr_train.responses
    d = X.shape[1]
    if m > d:
        raise ValueError(f"m = {m} exceeds predictor dimension {d}")
    score = gridpoint_scores(Y, X)
    valid = np.nonzero(~np.isnan(score))[0]
    if len(valid) < m:
        raise ValueError(f"only {len(valid)} non-constant predictor coordinates")
    # stable sort on -score keeps the lower index first among ties
    chosen = valid[np.argsort(-score[valid], kind="stable")[:m]]
    return Reducer("grid-pick", d, m, {"indices": chosen.astype(np.int64)},
                   np.zeros(d), np.ones(d), np.zeros(m), np.ones(m),
                   meta={"scores": score[chosen].tolist()})


# --- k-NN diagnostic ------------------------------------------------------------

def knn_joint_density(point, sample, k: int) -> float:
    """Box k-nearest-neighbor density estimate (k/N) / Vol_k.

    The k-th neighbor is taken under the Chebyshev metric and Vol_k is the
    axis-aligned box with half-widths equal to that neighbor's per-coordinate
    offsets. A query that is itself a sample member is excluded once.
    """
    point = np.asarray(point, dtype=float).reshape(-1)
    sample = np.asarray(sample, dtype=float)
    if sample.ndim == 1:
        sample = sample[:, None]
    n = sample.shape[0]
    if not 1 <= k < n:
        raise ValueError(f"k must satisfy 1 <= k < N = {n}")
    offsets = sample - point
    dist = np.max(np.abs(offsets), axis=1)
    order = np.argsort(dist, kind="stable")
    if dist[order[0]] == 0.0:
        order = order[1:]
    delta = np.abs(offsets[order[k - 1]])
    vol = float(np.prod(2.0 * delta))
    if vol == 0.0:
        raise ValueError("k-th neighbor box has zero volume (duplicate coordinates)")
    return (k / n) / vol
