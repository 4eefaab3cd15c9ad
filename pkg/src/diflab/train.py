"""Objectives and optimization loops.

Graph-level objectives take ``(model, p, ...)`` with ``p`` a parameter mapping and
return a scalar Tensor, so they plug straight into :func:`diffable.forward_eval`.
"""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from . import diffable as df
from .diffable import NonFiniteError, ParameterStore, Tensor
from .dif import ConditionalDifModel, DifStack
from .maps import DiagonalAffineMap
from .targets import TargetSpec, log_p_callable, sample_target

OBJECTIVES = ("mle", "gem", "rb_kl", "conditional_mle")
OPTIMIZERS = ("adam", "sgd")
SCHEDULES = ("constant", "cosine")


class TrainingDiverged(NonFiniteError):
    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step


@dataclass
class TrainConfig:
    objective: str = "mle"
    steps: int = 1000
    batch_size: int = 256
    lr: float = 1e-3
    optimizer: str = "adam"
    line_search: bool = False
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    fixed_batch: bool = False
    full_batch: bool | None = None
    schedule: str = "constant"

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def lr_at(self, step: int) -> float:
        if self.schedule == "cosine" and self.steps > 1:
            return 0.5 * self.lr * (1.0 + np.cos(np.pi * step / (self.steps - 1)))
        return self.lr

    @property
    def use_full_batch(self) -> bool:
        return self.objective == "gem" if self.full_batch is None else self.full_batch


@dataclass
class TraceRecord:
    objective: list[float] = field(default_factory=list)
    grad_norm: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    converged: bool = False

    def __len__(self) -> int:
        return len(self.objective)

    def append(self, value: float, gnorm: float, seconds: float) -> None:
        self.objective.append(float(value))
        self.grad_norm.append(float(gnorm))
        self.seconds.append(float(seconds))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "objective", "grad_norm", "seconds"])
            for i, row in enumerate(zip(self.objective, self.grad_norm, self.seconds)):
                w.writerow([i, *(repr(v) for v in row)])


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, values: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m, self.v = np.zeros_like(values), np.zeros_like(values)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1**self.t)
        vhat = self.v / (1 - self.beta2**self.t)
        return values - self.lr * mhat / (np.sqrt(vhat) + self.eps)


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, values, grad):
        return values - self.lr * grad


# -- objectives ---------------------------------------------------------------------------
def mle_loss(model: DifStack, p, batch) -> Tensor:
    """Negative mean log-likelihood."""
    return -model.log_density_graph(p, df.as_tensor(batch)).mean()


def conditional_mle_loss(model: ConditionalDifModel, p, x, omega) -> Tensor:
    return -model.log_density_graph(p, df.as_tensor(x), df.as_tensor(omega)).mean()


def responsibilities(model: DifStack, batch, store: ParameterStore | None = None) -> np.ndarray:
    """log P(index path | x) at the given parameters, shape (N, P).  For one layer this is log v_k(x)."""
    store = model.store if store is None else store
    with df.no_grad():
        terms = model.path_log_terms(store.constants(), Tensor(np.asarray(batch, dtype=np.float64)))
        return (terms - df.logsumexp(terms, axis=1, keepdims=True)).data


def gem_surrogate(model: DifStack, p, batch, frozen) -> Tensor:
    """sum_i sum_k v_k^{(t)}(x_i) [log h_k(x_i) - log v_k^{(t)}(x_i)] with v^{(t)} held constant.

    ``frozen`` is the parameter store at the expansion point or precomputed log
    responsibilities.  Entries whose responsibility underflows to 0 are dropped."""
    log_v = frozen if isinstance(frozen, np.ndarray) else responsibilities(model, batch, frozen)
    keep = np.exp(log_v) > 0
    terms = model.path_log_terms(p, df.as_tensor(batch))
    v = np.exp(log_v[keep])
    return (terms[keep] * v).sum() - float(np.sum(v * log_v[keep]))


def rb_kl_loss(model: DifStack, p, log_p, z_batch) -> Tensor:
    """Rao-Blackwellized reverse-KL estimate: every index path is enumerated and
    weighted by its probability, so only the prior draws are random."""
    z = df.as_tensor(z_batch)
    m = z.shape[0]
    pts, logw = model.backward_paths(p, z)
    j = (model.log_density_graph(p, pts) - log_p(pts)).reshape(m, -1)
    return (df.exp(logw) * j).sum() * (1.0 / m)


def rb_kl_loss_cascaded(model: DifStack, p, log_p, z_batch) -> Tensor:
    """Doubly marginalized estimator for a two-layer cascade."""
    if len(model.layers) != 2:
        raise ValueError("cascaded estimator expects a two-layer stack")
    return rb_kl_loss(model, p, log_p, z_batch)


def crude_kl_estimate(model: DifStack, log_p, z_batch, seed=0) -> float:
    """Plain Monte Carlo estimate of the reverse KL: index drawn, not marginalized."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    x = model.transport(z_batch, rng)
    with df.no_grad():
        lp = log_p(Tensor(x))
    lp = lp.data if isinstance(lp, Tensor) else np.asarray(lp)
    return float(np.mean(model.log_density(x) - lp))


# -- GEM ------------------------------------------------------------------------------------
@dataclass
class GemStep:
    accepted: bool
    lr: float
    surrogate_before: float
    surrogate_after: float
    grad_norm: float


def gem_step(model: DifStack, batch, lr: float, line_search: bool = True,
             max_halvings: int = 30) -> GemStep:
    """One ascent step on the surrogate, updating ``model.store`` in place.

    With ``line_search`` the step is halved until the surrogate does not decrease;
    if that never happens the parameters are left unchanged (``accepted=False``)."""
    if not lr > 0:
        raise ValueError("lr must be > 0")
    batch = np.asarray(batch, dtype=np.float64)
    log_v = responsibilities(model, batch)
    f = lambda p, b: gem_surrogate(model, p, b, log_v)
    g0, grad = df.value_and_grad(f, model.store, batch)
    gnorm = float(np.linalg.norm(grad))
    if gnorm == 0.0:
        return GemStep(False, 0.0, g0, g0, 0.0)
    theta = model.store.values.copy()
    eta = lr
    for _ in range(max_halvings + 1 if line_search else 1):
        candidate = theta + eta * grad
        if not line_search:
            model.store.values[:] = candidate
            return GemStep(True, eta, g0, float("nan"), gnorm)
        g1 = df.evaluate(f, model.store.with_values(candidate), batch)
        if np.isfinite(g1) and g1 >= g0:
            model.store.values[:] = candidate
            return GemStep(True, eta, g0, g1, gnorm)
        eta *= 0.5
    return GemStep(False, 0.0, g0, g0, gnorm)


# -- GMM / EM --------------------------------------------------------------------------------
@dataclass
class GMMFit:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    loglik_trace: list[float]

    @property
    def K(self) -> int:
        return len(self.weights)

    def component_log_pdf(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64).reshape(-1, self.means.shape[1])
        diff2 = (x[:, None, :] - self.means) ** 2 / self.variances
        return (np.log(self.weights) - 0.5 * diff2.sum(axis=2)
                - 0.5 * np.log(2 * np.pi * self.variances).sum(axis=1))

    def log_density(self, x) -> np.ndarray:
        from scipy.special import logsumexp

        return logsumexp(self.component_log_pdf(x), axis=1)

    def mean_loglik(self, x) -> float:
        return float(np.mean(self.log_density(x)))


def _kmeanspp(x, K, rng):
    centers = [x[rng.integers(len(x))]]
    for _ in range(1, K):
        d2 = np.min(((x[:, None, :] - np.array(centers)) ** 2).sum(axis=2), axis=1)
        if d2.sum() <= 0:
            centers.append(x[rng.integers(len(x))])
        else:
            centers.append(x[rng.choice(len(x), p=d2 / d2.sum())])
    return np.array(centers)


def gmm_em_fit(x, K: int, iters: int = 200, seed=0, tol: float = 0.0) -> GMMFit:
    """EM for a diagonal-covariance Gaussian mixture.

    ``loglik_trace[i]`` is the mean log-likelihood after i M-steps.  A component whose
    responsibility mass drops below 1e-10 is re-seeded at a random data point."""
    from scipy.special import logsumexp

    x = np.asarray(x, dtype=np.float64)
    x = x.reshape(len(x), -1)
    n, d = x.shape
    if K < 1 or n < K:
        raise ValueError("need K >= 1 and at least K points")
    rng = np.random.default_rng(seed)
    data_var = np.maximum(x.var(axis=0), 1e-12)
    gmm = GMMFit(np.full(K, 1.0 / K), _kmeanspp(x, K, rng), np.tile(data_var, (K, 1)), [])
    for it in range(iters + 1):
        comp = gmm.component_log_pdf(x)
        ll = logsumexp(comp, axis=1)
        gmm.loglik_trace.append(float(ll.mean()))
        if it == iters or (it > 0 and tol > 0 and gmm.loglik_trace[-1] - gmm.loglik_trace[-2] < tol):
            break
        r = np.exp(comp - ll[:, None])
        nk = r.sum(axis=0)
        means = (r.T @ x) / np.maximum(nk, 1e-300)[:, None]
        var = (r.T @ (x * x)) / np.maximum(nk, 1e-300)[:, None] - means**2
        var = np.array([(r[:, k:k + 1] * (x - means[k]) ** 2).sum(axis=0) / max(nk[k], 1e-300)
                        for k in range(K)])
        weights = nk / n
        for k in np.flatnonzero(nk < 1e-10):
            means[k] = x[rng.integers(n)]
            var[k] = data_var
            weights[k] = 1.0 / n
        gmm = GMMFit(weights / weights.sum(), means, np.maximum(var, 1e-12), gmm.loglik_trace)
    return gmm


def warm_start_from_gmm(model: DifStack, gmm: GMMFit) -> None:
    """Make a single-layer location-scale DIF coincide with the mixture."""
    if len(model.layers) != 1:
        raise ValueError("warm start expects a single-layer model")
    layer = model.layers[0]
    if layer.K != gmm.K:
        raise ValueError(f"K mismatch: model has {layer.K}, mixture has {gmm.K}")
    if not all(isinstance(m, DiagonalAffineMap) for m in layer.maps):
        raise ValueError("warm start needs diagonal affine maps")
    for k, m in enumerate(layer.maps):
        model.store.set(m.loc_name, gmm.means[k])
        model.store.set(m.log_scale_name, 0.5 * np.log(gmm.variances[k]))
    layer.weights.init_for_mixture(model.store, gmm.weights)


# -- SIR ----------------------------------------------------------------------------------------
@dataclass
class SIRResult:
    samples: np.ndarray
    proposals: np.ndarray
    weights: np.ndarray
    log_Z: float
    Z: float
    Z_se: float
    ess: float

    def expectation(self, f=lambda x: x) -> np.ndarray:
        return np.tensordot(self.weights, f(self.proposals), axes=1)


def sir_resample(model: DifStack, log_p, n_proposals: int, n_out: int, seed=0) -> SIRResult:
    """Importance-weight model draws by p~/psi and resample ``n_out`` with replacement.

    ``Z`` = mean(p~/psi) estimates the normalizing constant of p~."""
    from scipy.special import logsumexp

    if n_proposals < n_out:
        raise ValueError("need n_proposals >= n_out")
    rng = np.random.default_rng(seed)
    x = model.sample(n_proposals, rng)
    lp = log_p(x)
    lp = lp.data if isinstance(lp, Tensor) else np.asarray(lp, dtype=np.float64)
    lw = lp - model.log_density(x)
    if not np.any(np.isfinite(lw)):
        raise ValueError("all importance weights are zero: target and proposal supports are disjoint")
    lse = logsumexp(lw)
    w = np.exp(lw - lse)
    log_z = float(lse - np.log(n_proposals))
    shift = np.max(lw[np.isfinite(lw)])
    raw = np.exp(lw - shift)
    z_se = float(np.std(raw, ddof=1) * np.exp(shift) / np.sqrt(n_proposals))
    idx = rng.choice(n_proposals, size=n_out, replace=True, p=w)
    return SIRResult(x[idx], x, w, log_z, float(np.exp(log_z)), z_se, float(1.0 / np.sum(w * w)))


# -- training loop ----------------------------------------------------------------------------------
def _log_p_of(target):
    if isinstance(target, TargetSpec):
        return log_p_callable(target)
    if callable(target):
        return target
    raise ValueError("rb_kl needs a target with an evaluable unnormalized density")


def fit(model, data_or_target, config: TrainConfig) -> TraceRecord:
    """Run the configured loop; deterministic given ``config.seed``.

    ``mle``/``gem`` take an (N, d) array or a sampleable target, ``rb_kl`` a target
    or callable log p~ (on Tensors), ``conditional_mle`` an ``(x, omega)`` pair."""
    rng = np.random.default_rng(config.seed)
    trace = TraceRecord()
    opt = Adam(config.lr, config.beta1, config.beta2) if config.optimizer == "adam" else SGD(config.lr)
    obj = config.objective
    start = time.perf_counter()

    if obj == "rb_kl":
        log_p = _log_p_of(data_or_target)
        fixed = rng.standard_normal((config.batch_size, model.dim)) if config.fixed_batch else None

        def objective(p, z):
            return rb_kl_loss(model, p, log_p, z)

        def next_batch():
            return fixed if fixed is not None else rng.standard_normal((config.batch_size, model.dim))
    elif obj == "conditional_mle":
        x_all, om_all = (np.asarray(a, dtype=np.float64) for a in data_or_target)
        x_all, om_all = x_all.reshape(len(x_all), -1), om_all.reshape(len(om_all), -1)

        def objective(p, b):
            return conditional_mle_loss(model, p, b[0], b[1])

        def next_batch():
            idx = _batch_indices(rng, len(x_all), config)
            return x_all[idx], om_all[idx]
    else:
        if isinstance(data_or_target, TargetSpec):
            spec = data_or_target
            data = sample_target(spec, config.batch_size, rng) if config.use_full_batch else None

            def next_batch():
                return data if data is not None else sample_target(spec, config.batch_size, rng)
        else:
            data = np.asarray(data_or_target, dtype=np.float64).reshape(len(data_or_target), -1)

            def next_batch():
                return data[_batch_indices(rng, len(data), config)]

        def objective(p, b):
            return mle_loss(model, p, b)

    for step in range(config.steps):
        batch = next_batch()
        if obj == "gem":
            with df.no_grad():
                before = -float(np.mean(model.log_density(batch)))
            if not np.isfinite(before):
                raise TrainingDiverged(step, f"objective evaluated to {before}")
            res = gem_step(model, batch, config.lr, config.line_search)
            trace.append(before, res.grad_norm / len(batch), time.perf_counter() - start)
            if config.line_search and not res.accepted:
                trace.converged = True
                break
            continue
        try:
            value, grad = df.value_and_grad(objective, model.store, batch)
        except NonFiniteError as exc:
            raise TrainingDiverged(step, str(exc)) from None
        if not np.all(np.isfinite(grad)):
            raise TrainingDiverged(step, "non-finite gradient")
        trace.append(value, np.linalg.norm(grad), time.perf_counter() - start)
        opt.lr = config.lr_at(step)
        model.store.values[:] = opt.step(model.store.values, grad)
    return trace


def _batch_indices(rng, n: int, config: TrainConfig) -> np.ndarray:
    if config.use_full_batch or config.batch_size >= n:
        return np.arange(n)
    return rng.choice(n, size=config.batch_size, replace=False)
