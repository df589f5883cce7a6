"""Latent Kronecker GP over (hyperparameter configuration, training progression).

Training maximizes the log marginal likelihood plus log priors with L-BFGS,
using either a dense Cholesky backend or an iterative backend (batched CG,
stochastic Lanczos quadrature, Hutchinson traces) that only ever touches the
two small factor Grams. Posterior curves are drawn pathwise: a joint prior
sample over the full grid is corrected by one projected solve per sample.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np
from scipy.linalg import cho_solve, cholesky
from scipy.optimize import minimize

from .kernels import (
    LOG_2PI,
    ProductKernelParams,
    gram_grads,
    log_prior,
    matern52_gram,
    rbf_gram,
)
from .structured_linalg import (
    DENSE_CAP,
    CgConfig,
    KroneckerOperator,
    NumericalBreakdownError,
    ProbeSet,
    ProjectedKroneckerOperator,
    ProjectionMask,
    cg_solve,
    default_jitter,
    dense_materialize,
    factor_root,
    kron_root_apply,
    slq_logdet,
)
from .transforms import Scalers

logger = logging.getLogger(__name__)

EXACT_AUTO_LIMIT = 4096
BACKENDS = ("exact", "iterative")

# keeps L-BFGS away from numerically meaningless regions
LOG_BOUNDS = {"lengthscale": (-7.0, 7.0), "outputscale": (-10.0, 10.0), "noise": (math.log(1e-6), 5.0)}


@dataclass(frozen=True, eq=False)
class TrainingData:
    """Transformed training grid. ``Y`` holds NaN at unobserved cells."""

    X: np.ndarray
    t: np.ndarray
    Y: np.ndarray
    mask: ProjectionMask
    config_ids: Optional[tuple] = None
    steps: Optional[np.ndarray] = None

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        t = np.asarray(self.t, dtype=float).ravel()
        Y = np.asarray(self.Y, dtype=float)
        if Y.shape != (X.shape[0], t.size) or self.mask.shape != Y.shape:
            raise ValueError(
                f"inconsistent shapes: X {X.shape}, t {t.shape}, Y {Y.shape}, mask {self.mask.shape}"
            )
        if not np.all(np.isfinite(Y[self.mask.observed])):
            raise ValueError("observed values must be finite")
        Y = np.where(self.mask.observed, Y, np.nan)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "Y", Y)

    @classmethod
    def from_grid(cls, X, t, Y, mask=None, **kwargs):
        Y = np.asarray(Y, dtype=float)
        if mask is None:
            mask = ~np.isnan(Y)
        if not isinstance(mask, ProjectionMask):
            mask = ProjectionMask(mask)
        return cls(X, t, Y, mask, **kwargs)

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def m(self):
        return self.t.size

    @property
    def d(self):
        return self.X.shape[1]

    @property
    def y(self):
        """Observed values in flat (config-major) order."""
        return self.Y.ravel()[self.mask.index]

    def permuted(self, order):
        order = np.asarray(order)
        ids = None if self.config_ids is None else tuple(self.config_ids[i] for i in order)
        return TrainingData.from_grid(
            self.X[order], self.t, self.Y[order], self.mask.observed[order],
            config_ids=ids, steps=self.steps,
        )


def build_operator(params, data):
    K1 = rbf_gram(data.X, data.X, params.rbf_log_lengthscales)
    K2 = matern52_gram(data.t, data.t, params.matern_log_lengthscale, params.matern_log_outputscale)
    kron = KroneckerOperator(K1, K2)
    return ProjectedKroneckerOperator(kron, data.mask, params.noise, default_jitter(kron, data.mask))


def _one_hot(idx, size):
    out = np.zeros((idx.size, size))
    out[np.arange(idx.size), idx] = 1.0
    return out


def _robust_cholesky(K, max_tries=5):
    extra = 0.0
    base = 1e-8 * float(np.mean(np.diag(K)))
    for attempt in range(max_tries):
        try:
            L = cholesky(K if extra == 0 else K + extra * np.eye(K.shape[0]), lower=True)
            if extra:
                logger.warning("Cholesky needed extra jitter %.3g", extra)
            return L
        except np.linalg.LinAlgError:
            extra = base if extra == 0 else 10.0 * extra
    raise NumericalBreakdownError(f"Cholesky failed after {max_tries} jitter escalations")


def _assemble(data_fit, logdet, p, lp, lp_grad, grad_terms):
    value = 0.5 * data_fit + 0.5 * logdet + 0.5 * p * LOG_2PI - lp
    return value, grad_terms - lp_grad


def _exact_objective(params, data, dense_cap):
    op = build_operator(params, data)
    K = dense_materialize(op, cap=dense_cap)
    L = _robust_cholesky(K)
    y = data.y
    alpha = cho_solve((L, True), y)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))

    W = cho_solve((L, True), np.eye(K.shape[0]))
    W -= np.outer(alpha, alpha)
    del K

    rows, cols = data.mask.rows, data.mask.cols
    K1, K2 = op.kron.left, op.kron.right
    S1, S2 = _one_hot(rows, data.n), _one_hot(cols, data.m)
    # contract W against one factor so each parameter only costs an n^2 or m^2 sum
    M1 = S1.T @ (W * K2[np.ix_(cols, cols)]) @ S1
    M2 = S2.T @ (W * K1[np.ix_(rows, rows)]) @ S2
    tr_W = float(np.trace(W))

    grads = gram_grads(data.X, data.t, params)
    g = np.empty(params.d + 3)
    g[: params.d] = 0.5 * np.einsum("kij,ij->k", grads.rbf, M1)
    g[-3] = 0.5 * np.sum(grads.matern_lengthscale * M2)
    g[-2] = 0.5 * (np.sum(K2 * M2) + op.jitter * tr_W)
    g[-1] = 0.5 * op.noise * tr_W

    lp, lp_grad = log_prior(params)
    value, grad = _assemble(float(y @ alpha), logdet, y.size, lp, lp_grad, g)
    return value, grad, {}


def _iterative_objective(params, data, probes, cg_cfg, lanczos_steps):
    op = build_operator(params, data)
    y = data.y
    Z = probes.probes
    sol, report = cg_solve(op, np.column_stack([y, Z]), cg_cfg)
    alpha, U = sol[:, 0], sol[:, 1:]
    logdet = slq_logdet(op, probes, lanczos_steps)

    mask = data.mask
    K1, K2 = op.kron.left, op.kron.right
    A = mask.pad(alpha)[0]
    Ug, Zg = mask.pad(U), mask.pad(Z)
    nz = Z.shape[1]
    # alpha^T (dK1 kron K2) alpha = <dK1, A K2 A^T>; probes contract the same way
    quad1 = A @ K2 @ A.T
    quad2 = A.T @ K1 @ A
    tr1 = np.einsum("zij,jl,zkl->ik", Ug, K2, Zg, optimize=True) / nz
    tr2 = np.einsum("zij,ik,zkl->jl", Ug, K1, Zg, optimize=True) / nz
    tr_inv = float(np.einsum("ij,ij->", U, Z)) / nz
    aa = float(alpha @ alpha)

    grads = gram_grads(data.X, data.t, params)
    g = np.empty(params.d + 3)
    g[: params.d] = 0.5 * np.einsum("kij,ij->k", grads.rbf, tr1 - quad1)
    g[-3] = 0.5 * np.sum(grads.matern_lengthscale * (tr2 - quad2))
    g[-2] = 0.5 * (np.sum(K2 * (tr2 - quad2)) + op.jitter * (tr_inv - aa))
    g[-1] = 0.5 * op.noise * (tr_inv - aa)

    lp, lp_grad = log_prior(params)
    value, grad = _assemble(float(y @ alpha), logdet, y.size, lp, lp_grad, g)
    return value, grad, {"cg": report.summary()}


def resolve_backend(backend, p):
    if backend == "auto":
        return "exact" if p <= EXACT_AUTO_LIMIT else "iterative"
    if backend not in BACKENDS:
        raise ValueError(f"unknown backend {backend!r}")
    return backend


def neg_map_objective(
    params,
    data,
    backend="exact",
    probes=None,
    cg_cfg=None,
    lanczos_steps=30,
    dense_cap=DENSE_CAP,
    return_stats=False,
):
    """Negative log marginal likelihood minus log prior, and its gradient.

    The gradient is w.r.t. ``params.to_vector()``. With the iterative backend
    the log-determinant and trace terms are stochastic estimates that are
    deterministic given ``probes``.
    """
    backend = resolve_backend(backend, data.mask.count)
    if backend == "exact":
        out = _exact_objective(params, data, dense_cap)
    else:
        if probes is None:
            probes = ProbeSet(data.mask.count)
        out = _iterative_objective(params, data, probes, cg_cfg or CgConfig(), lanczos_steps)
    return out if return_stats else out[:2]


@dataclass(frozen=True)
class FitConfig:
    backend: str = "auto"
    cg: CgConfig = field(default_factory=CgConfig)
    num_probes: int = 16
    lanczos_steps: int = 30
    max_lbfgs_iters: int = 100
    lbfgs_history: int = 10
    restarts: int = 0
    seed: int = 0
    dense_cap: int = DENSE_CAP


@dataclass(frozen=True, eq=False)
class LkgpModel:
    params: ProductKernelParams
    data: TrainingData
    scalers: Optional[Scalers] = None
    backend: str = "exact"
    cg: CgConfig = field(default_factory=CgConfig)
    seed: int = 0
    fit_report: dict = field(default_factory=dict)
    dense_cap: int = DENSE_CAP

    @cached_property
    def operator(self):
        return build_operator(self.params, self.data)

    @cached_property
    def _cholesky(self):
        return _robust_cholesky(dense_materialize(self.operator, cap=self.dense_cap))

    def solve(self, B):
        """``K_joint^{-1} B``; returns the solution and a CG report (None if exact)."""
        if self.backend == "exact":
            return cho_solve((self._cholesky, True), B), None
        X, report = cg_solve(self.operator, B, self.cg)
        return X, report

    @cached_property
    def alpha(self):
        alpha, report = self.solve(self.data.y)
        if report is not None and not report.all_converged:
            logger.warning("posterior mean solve did not converge: %s", report.summary())
        return alpha

    # -- conversions between original and model units -----------------------

    def to_model_inputs(self, test_X, test_t):
        test_X = np.atleast_2d(np.asarray(test_X, dtype=float))
        test_t = np.asarray(test_t, dtype=float).ravel()
        if test_X.shape[1] != self.data.d:
            raise ValueError(f"test configs have d={test_X.shape[1]}, model has d={self.data.d}")
        if self.scalers is None:
            return test_X, test_t
        ts = self.scalers.progression.transform(test_t)
        if np.any(ts > 1.0 + 1e-12):
            logger.warning("predicting beyond the last training progression step")
        return self.scalers.inputs.transform(test_X), ts

    def to_output_units(self, mean, var=None):
        if self.scalers is None:
            return mean if var is None else (mean, var)
        if var is None:
            return self.scalers.outputs.inverse_transform(mean)
        return self.scalers.outputs.inverse_mean_var(mean, var)

    @property
    def output_noise_variance(self):
        y_std = 1.0 if self.scalers is None else self.scalers.outputs.y_std
        return self.params.noise * y_std**2

    @property
    def final_step(self):
        """Last training progression in original units (model units if unscaled)."""
        if self.data.steps is not None:
            return float(self.data.steps[-1])
        return float(self.data.t[-1])

    def _cross_grams(self, Xs, ts):
        p = self.params
        k1 = rbf_gram(Xs, self.data.X, p.rbf_log_lengthscales)
        k2 = matern52_gram(ts, self.data.t, p.matern_log_lengthscale, p.matern_log_outputscale)
        return k1, k2


def _objective_bounds(d):
    return [LOG_BOUNDS["lengthscale"]] * (d + 1) + [LOG_BOUNDS["outputscale"], LOG_BOUNDS["noise"]]


def fit(data, config=None, scalers=None, init=None):
    """MAP-fit the kernel parameters with L-BFGS and return an ``LkgpModel``."""
    config = config or FitConfig()
    backend = resolve_backend(config.backend, data.mask.count)
    probes = ProbeSet(data.mask.count, config.num_probes, config.seed)
    init = init or ProductKernelParams.initial(data.d)

    starts = [init.to_vector()]
    rng = np.random.default_rng(config.seed)
    for _ in range(config.restarts):
        starts.append(init.to_vector() + rng.normal(0.0, 1.0, size=data.d + 3))

    runs = [_run_lbfgs(x0, data, backend, probes, config) for x0 in starts]
    best = min(runs, key=lambda r: r["best_value"])
    params = ProductKernelParams.from_vector(best["best_x"])
    report = {
        "backend": backend,
        "cg_rel_tolerance": config.cg.rel_tolerance,
        "cg_max_iters": config.cg.max_iters,
        "num_probes": config.num_probes,
        "lanczos_steps": config.lanczos_steps,
        "max_lbfgs_iters": config.max_lbfgs_iters,
        "seed": config.seed,
        "initial_objective": best["trace"][0],
        "final_objective": best["best_value"],
        "objective_trace": best["trace"],
        "iterations": best["nit"],
        "evaluations": best["nfev"],
        "message": best["message"],
        "warning": best["warning"],
        "cg_nonconverged_evaluations": best["cg_failures"],
        "cg_max_iterations": best["cg_max_iterations"],
        "restarts": config.restarts,
    }
    return LkgpModel(
        params, data, scalers, backend, config.cg, config.seed, report, config.dense_cap
    )


def _run_lbfgs(x0, data, backend, probes, config):
    cache = {}
    stats = {"cg_failures": 0, "cg_max_iterations": 0}

    def fun(x):
        key = x.tobytes()
        if key not in cache:
            params = ProductKernelParams.from_vector(x)
            try:
                value, grad, info = neg_map_objective(
                    params, data, backend, probes, config.cg, config.lanczos_steps,
                    config.dense_cap, return_stats=True,
                )
            except (NumericalBreakdownError, np.linalg.LinAlgError) as exc:
                logger.warning("objective failed at %s: %s", x, exc)
                value, grad, info = 1e10, np.zeros_like(x), {}
            if "cg" in info:
                stats["cg_failures"] += int(not info["cg"]["all_converged"])
                stats["cg_max_iterations"] = max(stats["cg_max_iterations"], info["cg"]["max_iterations"])
            cache[key] = (float(value), np.asarray(grad, dtype=float))
        return cache[key]

    initial_value, _ = fun(np.asarray(x0, dtype=float))
    trace = [initial_value]
    best = {"x": np.asarray(x0, dtype=float).copy(), "value": initial_value}

    def callback(xk):
        value, _ = fun(xk)
        if value < best["value"]:
            best["x"], best["value"] = xk.copy(), value
        trace.append(best["value"])
        logger.info("L-BFGS iteration %d: objective %.6f", len(trace) - 1, value)

    res = minimize(
        fun, x0, jac=True, method="L-BFGS-B", callback=callback,
        bounds=_objective_bounds(data.d),
        options={"maxiter": config.max_lbfgs_iters, "maxcor": config.lbfgs_history},
    )
    final_value, _ = fun(res.x)
    if final_value < best["value"]:
        best["x"], best["value"] = res.x.copy(), final_value
    warning = None
    if res.nit == 0 and not res.success:
        warning = f"no accepted step from initialization: {res.message}"
        logger.warning(warning)
    return {
        "best_x": best["x"], "best_value": best["value"], "trace": trace,
        "nit": int(res.nit), "nfev": int(res.nfev), "message": str(res.message),
        "warning": warning, **stats,
    }


@dataclass
class PosteriorSampleSet:
    samples: np.ndarray
    test_X: np.ndarray
    test_t: np.ndarray
    seed: int


@dataclass
class PredictionResult:
    mean: np.ndarray
    variance: np.ndarray
    samples: Optional[PosteriorSampleSet] = None


def posterior_mean(model, test_X, test_t):
    """Exact posterior mean on an ``n_* x m_*`` grid, in original output units."""
    Xs, ts = model.to_model_inputs(test_X, test_t)
    return model.to_output_units(_latent_mean(model, Xs, ts))


def _latent_mean(model, Xs, ts):
    k1, k2 = model._cross_grams(Xs, ts)
    A = model.data.mask.pad(model.alpha)[0]
    return k1 @ A @ k2.T


def matheron_sample(model, test_X, test_t, num_samples, seed=None, chunk_size=64):
    """Pathwise posterior samples of whole curves via a projected Matheron update."""
    Xs, ts = model.to_model_inputs(test_X, test_t)
    samples = _latent_samples(model, Xs, ts, num_samples, seed, chunk_size)
    return PosteriorSampleSet(
        model.to_output_units(samples), np.atleast_2d(test_X), np.asarray(test_t), seed
    )


def _latent_samples(model, Xs, ts, num_samples, seed=None, chunk_size=64):
    if num_samples < 1:
        raise ValueError("num_samples must be at least 1")
    seed = model.seed if seed is None else seed
    data, p = model.data, model.params
    n, m = data.n, data.m
    mask = data.mask

    X_all = np.vstack([data.X, Xs])
    t_all, inverse = np.unique(np.concatenate([data.t, ts]), return_inverse=True)
    t_train, t_test = inverse[:m], inverse[m:]
    K1 = rbf_gram(X_all, X_all, p.rbf_log_lengthscales)
    K2 = matern52_gram(t_all, t_all, p.matern_log_lengthscale, p.matern_log_outputscale)
    L1, L2 = factor_root(K1), factor_root(K2)
    k1 = K1[n:, :n]
    k2 = K2[np.ix_(t_test, t_train)]
    y = data.y
    # jitter stays out of the draw: it would add sqrt(jitter) error to interpolation
    noise_std = math.sqrt(model.operator.noise)

    rng = np.random.default_rng(seed)
    out = np.empty((num_samples, Xs.shape[0], ts.size))
    failures = 0
    for start in range(0, num_samples, chunk_size):
        c = min(chunk_size, num_samples - start)
        prior = kron_root_apply(L1, L2, rng.standard_normal((c, K1.shape[0] * K2.shape[0])))
        prior = prior.reshape(c, K1.shape[0], K2.shape[0])
        f_train = prior[:, :n][:, :, t_train]
        rhs = y[:, None] - mask.gather(f_train) - noise_std * rng.standard_normal((c, mask.count)).T
        sol, report = model.solve(rhs)
        if report is not None:
            failures += int(np.sum(~report.converged))
        out[start : start + c] = prior[:, n:][:, :, t_test] + k1 @ mask.pad(sol) @ k2.T
    if failures:
        logger.warning("%d posterior sample solves did not converge", failures)
    return out


def predict(model, test_X, test_t, num_samples=256, seed=None, include_noise=True, keep_samples=False):
    """Exact mean plus sample-estimated variance on an ``n_* x m_*`` grid.

    The variance is the sample variance of the pathwise posterior samples,
    plus the observation-noise variance when ``include_noise``.
    """
    if num_samples < 2:
        raise ValueError("variance estimation needs num_samples >= 2")
    Xs, ts = model.to_model_inputs(test_X, test_t)
    mean = _latent_mean(model, Xs, ts)
    latent = _latent_samples(model, Xs, ts, num_samples, seed)
    var = np.var(latent, axis=0, ddof=1)
    if include_noise:
        var = var + model.params.noise
    mean, var = model.to_output_units(mean, var)
    samples = None
    if keep_samples:
        samples = PosteriorSampleSet(
            model.to_output_units(latent), np.atleast_2d(test_X), np.asarray(test_t),
            model.seed if seed is None else seed,
        )
    return PredictionResult(mean, var, samples)


def predict_final(model, test_X, num_samples=256, seed=None):
    """Predictive mean/variance of each test config at the last training progression."""
    if num_samples < 2:
        raise ValueError("variance estimation needs num_samples >= 2")
    test_X = np.atleast_2d(np.asarray(test_X, dtype=float))
    Xs = test_X if model.scalers is None else model.scalers.inputs.transform(test_X)
    ts = model.data.t[-1:]
    mean = _latent_mean(model, Xs, ts)[:, 0]
    latent = _latent_samples(model, Xs, ts, num_samples, seed)[:, :, 0]
    var = np.var(latent, axis=0, ddof=1) + model.params.noise
    mean, var = model.to_output_units(mean, var)
    return PredictionResult(mean, var)


def dense_posterior(model, test_X, test_t):
    """Exact latent posterior mean and covariance by dense algebra (small problems).

    Returns the flattened (config-major) mean and covariance in original units.
    """
    Xs, ts = model.to_model_inputs(test_X, test_t)
    p, data = model.params, model.data
    K = dense_materialize(model.operator, cap=model.dense_cap)
    k1, k2 = model._cross_grams(Xs, ts)
    cross = np.kron(k1, k2)[:, data.mask.index]
    prior = np.kron(
        rbf_gram(Xs, Xs, p.rbf_log_lengthscales),
        matern52_gram(ts, ts, p.matern_log_lengthscale, p.matern_log_outputscale),
    )
    L = _robust_cholesky(K)
    mean = cross @ cho_solve((L, True), data.y)
    cov = prior - cross @ cho_solve((L, True), cross.T)
    if model.scalers is not None:
        y_std = model.scalers.outputs.y_std
        return model.scalers.outputs.inverse_transform(mean), cov * y_std**2
    return mean, cov


def gaussian_metrics(mean, variance, truth):
    mean, variance, truth = (np.asarray(a, dtype=float).ravel() for a in (mean, variance, truth))
    if not (mean.shape == variance.shape == truth.shape):
        raise ValueError("predictions and truth must have equal length")
    if np.any(variance <= 0):
        raise ValueError("predictive variances must be positive")
    err = truth - mean
    mse = float(np.mean(err**2))
    llh = float(np.mean(-0.5 * (LOG_2PI + np.log(variance) + err**2 / variance)))
    return mse, llh


def metrics_mse_llh(predictions, truth):
    """Mean squared error and mean Gaussian log-density of ``truth``."""
    return gaussian_metrics(predictions.mean, predictions.variance, truth)
