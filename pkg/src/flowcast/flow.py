"""Coupling-layer normalizing flow with a Gaussian-mixture latent.

The flow maps standardized joint vectors v = (y, t) to latent w. Each
coupling layer pushes one block of coordinates through an elementwise
monotone function

    h(x) = a*x + b + c / (1 + (d*x + g)**2)

whose five parameters come from a residual network evaluated on the other
block. Model parameters live in a flat ``{name: array}`` dict so that the
same forward code runs on plain arrays and on an autodiff tape.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .dimred import Reducer, _decode, _encode
from .data import ExampleSet
from .numeric import AdamState, Tape, adam_step, reverse_grad
from .numeric import autodiff as ad

log = logging.getLogger(__name__)

FLOW_VERSION = "flow-v1"
C_MARGIN = 1e-3
C_BOUND = 8.0 * math.sqrt(3.0) / 9.0
RAW_LIMIT = 10.0  # soft bound on the log-scale parameters a', b', d'
LOG_2PI = math.log(2.0 * math.pi)


class InversionError(ArithmeticError):
    def __init__(self, message, coordinate):
        super().__init__(message)
        self.coordinate = coordinate


class FlowDivergedError(RuntimeError):
    pass


# --- coupling function ------------------------------------------------------------

def constrain_theta(raw):
    """Map unconstrained ``[a', b', c', d', g']`` (last axis) to ``(a, b, c, d, g)``.

    ``a`` and ``d`` are positive and ``|c| < 8*sqrt(3)*a/(9*d)``, which keeps
    the coupling function strictly increasing. The log-scale entries pass
    through ``RAW_LIMIT * tanh(./RAW_LIMIT)`` so stacked layers cannot overflow.
    """
    a = ad.exp(_soft_limit(raw[..., 0]))
    b = ad.exp(_soft_limit(raw[..., 1]))
    d = ad.exp(_soft_limit(raw[..., 3]))
    g = raw[..., 4]
    c = (C_BOUND * (1.0 - C_MARGIN)) * a / d * ad.tanh(raw[..., 2])
    return a, b, c, d, g


def _soft_limit(x):
    return RAW_LIMIT * ad.tanh(x * (1.0 / RAW_LIMIT))


def h_tilde(x, theta):
    a, b, c, d, g = theta
    u = d * x + g
    return a * x + b + c / (1.0 + u * u)


def h_tilde_prime(x, theta):
    a, b, c, d, g = theta
    u = d * x + g
    s = 1.0 + u * u
    return a - 2.0 * c * d * (u / s) / s


def _solve_monotone(target, theta, tol=1e-10, max_iter=200):
    """Elementwise root of h(x) = target by bracketed Newton with bisection fallback.

    Converged when the residual is within ``tol * max(1, |target|)`` and the
    Newton correction is at rounding level, or when the bracket has collapsed
    to adjacent floats. Polishing past ``tol`` matters when later layers
    amplify the error through their conditioning input.
    """
    a, b, c, d, g = (np.asarray(p, dtype=float) for p in theta)
    target = np.asarray(target, dtype=float)
    theta = (a, b, c, d, g)
    spread = np.abs(c)
    lo = (target - b - spread) / a
    hi = (target - b + spread) / a
    x = 0.5 * (lo + hi)
    f_scale = np.maximum(1.0, np.abs(target))
    width = hi - lo
    done = np.zeros(target.shape, dtype=bool)
    for _ in range(max_iter):
        f = h_tilde(x, theta) - target
        slope = h_tilde_prime(x, theta)
        newton = f / slope
        done = (np.abs(f) <= tol * f_scale) & (np.abs(newton) <= 1e-14 * np.maximum(1.0, np.abs(x)))
        lo = np.where(f < 0, x, lo)
        hi = np.where(f > 0, x, hi)
        done |= (f == 0) | (hi - lo <= 4 * np.spacing(np.maximum(np.abs(lo), np.abs(hi))))
        if done.all():
            return x
        step = x - newton
        # Newton only while it stays inside the bracket and the bracket keeps halving
        use_newton = (step > lo) & (step < hi) & np.isfinite(step) & (hi - lo <= 0.5 * width)
        width = hi - lo
        x = np.where(done, x, np.where(use_newton, step, 0.5 * (lo + hi)))
    bad = np.argwhere(~done)[0]
    raise InversionError(f"inverse did not converge within {max_iter} iterations "
                         f"at coordinate {int(bad[-1])}", int(bad[-1]))


# --- building blocks -----------------------------------------------------------------

@dataclass(frozen=True)
class ThetaNet:
    """``relu(A_l(... relu(A_1 x))) + L x``; the last block emits the parameters."""

    prefix: str
    n_in: int
    n_out: int
    depth: int = 7
    width: int = 32

    def __post_init__(self):
        if not 3 <= self.depth <= 10:
            raise ValueError(f"theta-net depth must be in [3, 10], got {self.depth}")

    def shapes(self) -> dict:
        dims = [self.n_in] + [self.width] * (self.depth - 1) + [self.n_out]
        out = {}
        for i in range(self.depth):
            out[f"{self.prefix}.W{i}"] = (dims[i], dims[i + 1])
            out[f"{self.prefix}.b{i}"] = (1, dims[i + 1])
        out[f"{self.prefix}.Ws"] = (self.n_in, self.n_out)
        out[f"{self.prefix}.bs"] = (1, self.n_out)
        return out

    def init(self, rng) -> dict:
        params = {}
        for name, shape in self.shapes().items():
            leaf = name.rsplit(".", 1)[1]
            if leaf.startswith("W") and leaf != "Ws":
                std = math.sqrt(2.0 / shape[0])
                if leaf == f"W{self.depth - 1}":
                    std *= 0.01  # start close to h(x) = x + 1
                params[name] = rng.normal(0.0, std, size=shape)
            else:
                params[name] = np.zeros(shape)
        return params

    def __call__(self, params, x):
        p = self.prefix
        h = x
        for i in range(self.depth):
            h = ad.relu(h @ params[f"{p}.W{i}"] + params[f"{p}.b{i}"])
        return h + x @ params[f"{p}.Ws"] + params[f"{p}.bs"]


@dataclass(frozen=True)
class CouplingLayer:
    A: tuple
    B: tuple
    net: ThetaNet

    def __post_init__(self):
        if set(self.A) & set(self.B):
            raise ValueError("coupling partition blocks overlap")
        if self.net.n_out != 5 * len(self.A) or self.net.n_in != len(self.B):
            raise ValueError("theta-net shape does not match the partition")

    @property
    def direction(self) -> str:
        return f"{list(self.A)}<-{list(self.B)}"

    def theta(self, params, vB):
        raw = self.net(params, vB)
        r = len(self.A)
        raw = raw.reshape(raw.shape[0], r, 5) if isinstance(raw, ad.Var) else raw.reshape(-1, r, 5)
        return constrain_theta(raw)

    def forward(self, params, V):
        vA, vB = V[:, list(self.A)], V[:, list(self.B)]
        if not isinstance(vB, ad.Var) and not any(isinstance(v, ad.Var) for v in params.values()) \
                and len(vB) > 1 and np.all(vB == vB[0]):
            # shared conditioning input (a forecast grid at fixed t): one network pass
            theta = tuple(np.broadcast_to(p, (len(vB),) + p.shape[1:]) for p in self.theta(params, vB[:1]))
        else:
            theta = self.theta(params, vB)
        wA = h_tilde(vA, theta)
        logdet = ad.sum_(ad.log(h_tilde_prime(vA, theta)), axis=1)
        order = np.argsort(np.array(self.A + self.B))
        return ad.concat([wA, vB], axis=1)[:, order], logdet

    def inverse(self, params, W):
        W = np.asarray(W, dtype=float)
        wA, vB = W[:, list(self.A)], W[:, list(self.B)]
        theta = self.theta(params, vB)
        vA = _solve_monotone(wA, theta)
        V = np.empty_like(W)
        V[:, list(self.A)] = vA
        V[:, list(self.B)] = vB
        return V


@dataclass(frozen=True)
class GaussianMixtureLatent:
    K: int
    dim: int
    prefix: str = "latent"

    def init(self, rng, mean_sd=0.5) -> dict:
        return {f"{self.prefix}.logits": np.zeros(self.K),
                f"{self.prefix}.means": rng.normal(0.0, mean_sd, size=(self.K, self.dim)),
                f"{self.prefix}.log_sd": np.zeros((self.K, self.dim))}

    def weights(self, params) -> np.ndarray:
        z = np.asarray(ad.value(params[f"{self.prefix}.logits"]))
        e = np.exp(z - z.max())
        return e / e.sum()

    def logpdf(self, params, W):
        """Per-row log density; ``W`` is (B, dim)."""
        p = self.prefix
        logits, means, log_sd = params[f"{p}.logits"], params[f"{p}.means"], params[f"{p}.log_sd"]
        n = W.shape[0]
        z = (W.reshape(n, 1, self.dim) - means.reshape(1, self.K, self.dim)) / ad.exp(log_sd).reshape(
            1, self.K, self.dim)
        comp = -0.5 * ad.sum_(z * z, axis=2) - ad.sum_(log_sd, axis=1).reshape(1, self.K) \
            - 0.5 * self.dim * LOG_2PI
        log_w = logits - ad.logsumexp(logits, axis=0)
        return ad.logsumexp(comp + log_w.reshape(1, self.K), axis=1)


# --- model -----------------------------------------------------------------------

@dataclass(frozen=True)
class FlowModel:
    """Immutable flow over standardized joint vectors (y, t) of length p + m."""

    p: int
    m: int
    layers: tuple
    latent: GaussianMixtureLatent
    params: dict
    mean: np.ndarray
    scale: np.ndarray
    step: int = 0

    @property
    def dim(self) -> int:
        return self.p + self.m

    def with_params(self, params: dict, step: int | None = None) -> "FlowModel":
        missing = set(self.params) - set(params)
        if missing:
            raise KeyError(f"missing flow parameters: {sorted(missing)}")
        return replace(self, params={k: np.array(params[k], dtype=float) for k in self.params},
                       step=self.step if step is None else step)

    def standardize(self, Z):
        return (np.asarray(Z, dtype=float) - self.mean) / self.scale

    def unstandardize(self, V):
        return np.asarray(V) * self.scale + self.mean

    def log_density(self, Z) -> np.ndarray:
        """Joint log density of rows of ``Z`` in original (unstandardized) units."""
        V = np.atleast_2d(self.standardize(Z))
        W, logdet = flow_forward(self, V)
        return latent_logpdf(self, W) + logdet - np.sum(np.log(self.scale))

    def to_dict(self) -> dict:
        return {
            "version": FLOW_VERSION,
            "p": self.p,
            "m": self.m,
            "partitions": [[list(L.A), list(L.B)] for L in self.layers],
            "theta_net": {"depth": self.layers[0].net.depth, "width": self.layers[0].net.width,
                          "shapes": {k: list(s) for L in self.layers for k, s in L.net.shapes().items()}},
            "components": self.latent.K,
            "params": {k: _encode(v) for k, v in sorted(self.params.items())},
            "mean": _encode(self.mean),
            "scale": _encode(self.scale),
            "step": self.step,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "FlowModel":
        found = doc.get("version")
        if found != FLOW_VERSION:
            raise ValueError(f"flow version mismatch: expected {FLOW_VERSION!r}, found {found!r}")
        p, m = int(doc["p"]), int(doc["m"])
        net = doc["theta_net"]
        layers = _build_layers([tuple(A) for A, _ in doc["partitions"]], p + m,
                               int(net["depth"]), int(net["width"]))
        params = {k: _decode(v) for k, v in doc["params"].items()}
        for L in layers:
            for k, shape in L.net.shapes().items():
                if k not in params or params[k].shape != tuple(shape):
                    raise ValueError(f"flow parameter {k!r} missing or misshapen")
        return cls(p, m, layers, GaussianMixtureLatent(int(doc["components"]), p + m), params,
                   _decode(doc["mean"]), _decode(doc["scale"]), int(doc.get("step", 0)))


def _build_layers(a_blocks, dim, depth, width):
    layers = []
    for i, A in enumerate(a_blocks):
        B = tuple(j for j in range(dim) if j not in A)
        layers.append(CouplingLayer(tuple(A), B, ThetaNet(f"layer{i}", len(B), 5 * len(A), depth, width)))
    return tuple(layers)


def build_flow(p: int, m: int, *, depth=7, width=32, components=5, pairs=1, seed=0,
               mean=None, scale=None, latent_mean_sd=0.5) -> FlowModel:
    """Fresh model: layer pairs alternate response-block and reduced-block updates."""
    y_idx, t_idx = tuple(range(p)), tuple(range(p, p + m))
    layers = _build_layers([y_idx, t_idx] * pairs, p + m, depth, width)
    latent = GaussianMixtureLatent(components, p + m)
    rng = np.random.default_rng(seed)
    params = {}
    for L in layers:
        params.update(L.net.init(rng))
    params.update(latent.init(rng, latent_mean_sd))
    mean = np.zeros(p + m) if mean is None else np.asarray(mean, dtype=float)
    scale = np.ones(p + m) if scale is None else np.asarray(scale, dtype=float)
    return FlowModel(p, m, layers, latent, params, mean, scale)


def flow_forward(model: FlowModel, V, params=None):
    """Standardized ``V`` (B, p+m) to latent ``W`` and per-row total log |det J|."""
    params = model.params if params is None else params
    single = np.ndim(ad.value(V)) == 1
    W = np.atleast_2d(V) if single else V
    total = 0.0
    for L in model.layers:
        W, logdet = L.forward(params, W)
        total = total + logdet
    if single:
        return W[0], total[0]
    return W, total


def flow_inverse(model: FlowModel, W, params=None):
    params = model.params if params is None else params
    single = np.ndim(W) == 1
    V = np.atleast_2d(np.asarray(W, dtype=float))
    for L in reversed(model.layers):
        V = L.inverse(params, V)
    return V[0] if single else V


def latent_logpdf(model: FlowModel, W, params=None):
    params = model.params if params is None else params
    if np.ndim(ad.value(W)) == 1:
        return latent_logpdf(model, np.atleast_2d(W), params)[0]
    return model.latent.logpdf(params, W)


def nf_loglik(model: FlowModel, batch, params=None):
    """Mean log-likelihood of standardized rows; differentiable in ``params``."""
    W, logdet = flow_forward(model, np.atleast_2d(batch), params)
    return ad.mean(latent_logpdf(model, W, params) + logdet)


def sample_latent(model: FlowModel, n: int, rng) -> np.ndarray:
    lat, pr = model.latent, model.params
    comp = rng.choice(lat.K, size=n, p=lat.weights(pr))
    means, sd = pr[f"{lat.prefix}.means"], np.exp(pr[f"{lat.prefix}.log_sd"])
    return means[comp] + sd[comp] * rng.standard_normal((n, lat.dim))


def sample(model: FlowModel, n: int, rng) -> np.ndarray:
    """Draws from the model in original units."""
    return model.unstandardize(flow_inverse(model, sample_latent(model, n, rng)))


# --- training -------------------------------------------------------------------

@dataclass(frozen=True)
class FlowTrainConfig:
    steps: int = 1200
    batch: int = 150
    lr: float = 0.01
    beta1: float = 0.99
    beta2: float = 0.99
    warmup: int = 300
    interval: int = 100
    depth: int = 7
    width: int = 32
    components: int = 5
    pairs: int = 1
    latent_mean_sd: float = 0.5
    max_rollbacks: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1 or self.batch < 1 or self.interval < 1 or self.warmup < 0:
            raise ValueError("steps, batch and interval must be positive; warmup non-negative")

    def checkpoint_steps(self) -> list[int]:
        return list(range(self.warmup + self.interval, self.steps + 1, self.interval))


@dataclass(frozen=True)
class Checkpoint:
    step: int
    model: FlowModel
    validation_loglik: float


@dataclass
class FlowHistory:
    loss: list = field(default_factory=list)
    rollbacks: list = field(default_factory=list)


def joint_vectors(examples: ExampleSet, reducer: Reducer) -> np.ndarray:
    return np.hstack([examples.responses, reducer.apply(examples.predictors)])


def train_flow(jm_train: ExampleSet, validation: ExampleSet, reducer: Reducer,
               config: FlowTrainConfig = FlowTrainConfig()):
    """Maximize the flow log-likelihood of (y, T(x)) by minibatch Adam.

    Returns ``(final_model, checkpoints, history)``; checkpoints are full
    snapshots every ``interval`` steps after ``warmup``.
    """
    if len(jm_train) == 0 or len(validation) == 0:
        raise ValueError("training and validation sets must be nonempty")
    Z = joint_vectors(jm_train, reducer)
    Zv = joint_vectors(validation, reducer)
    return fit_flow(Z, Zv, jm_train.p, reducer.m, config)


def fit_flow(Z, Zv, p: int, m: int, config: FlowTrainConfig = FlowTrainConfig()):
    """Train on raw joint vectors ``Z`` with ``Zv`` for checkpoint log-likelihoods."""
    Z = np.asarray(Z, dtype=float)
    mean = Z.mean(axis=0)
    scale = Z.std(axis=0, ddof=1)
    scale = np.where(scale > 0, scale, 1.0)
    model = build_flow(p, m, depth=config.depth, width=config.width, components=config.components,
                       pairs=config.pairs, seed=config.seed, mean=mean, scale=scale,
                       latent_mean_sd=config.latent_mean_sd)
    V = model.standardize(Z)
    Vv = model.standardize(Zv)
    n = len(V)
    bsz = min(config.batch, n)
    rng = np.random.default_rng([config.seed, 1])
    params = model.params
    state = AdamState(lr=config.lr, beta1=config.beta1, beta2=config.beta2)
    marks = set(config.checkpoint_steps())
    checkpoints, history = [], FlowHistory()
    safe = (0, params, state, rng.bit_generator.state)
    rollbacks = 0
    step = 0
    while step < config.steps:
        idx = rng.choice(n, size=bsz, replace=False)
        tape = Tape()
        pv = {k: tape.param(v, k) for k, v in params.items()}
        with np.errstate(all="ignore"):
            obj = -nf_loglik(model, V[idx], pv)
            loss = float(obj.value)
            grads = reverse_grad(tape, obj) if np.isfinite(loss) else None
        if grads is None or not all(np.all(np.isfinite(g)) for g in grads.values()):
            if rollbacks >= config.max_rollbacks:
                raise FlowDivergedError(f"non-finite flow loss at step {step + 1} after "
                                        f"{rollbacks} rollbacks")
            rollbacks += 1
            step, params, state, rng_state = safe
            rng.bit_generator.state = rng_state
            state = replace(state, lr=state.lr / 2)
            del history.loss[step:]
            history.rollbacks.append((step, state.lr))
            log.warning("flow loss diverged; rolled back to step %d with lr %.3g", step, state.lr)
            continue
        history.loss.append(loss)
        params, state = adam_step(params, grads, state)
        step += 1
        if step in marks:
            snap = model.with_params(params, step=step)
            vll = float(nf_loglik(snap, Vv)) - float(np.sum(np.log(scale)))
            checkpoints = [c for c in checkpoints if c.step < step] + [Checkpoint(step, snap, vll)]
            safe = (step, params, state, rng.bit_generator.state)
            log.debug("flow step %d: train loss %.4f, validation loglik %.4f", step, loss, vll)
    return model.with_params(params, step=step), checkpoints, history
