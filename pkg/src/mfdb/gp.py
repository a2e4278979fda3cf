"""Single-fidelity Gaussian process regression with an explicit basis trend.

Implements GP regression for noisy scalar observations ``y_i ~ N(f(x_i), s_i^2)``
with a squared-exponential kernel and a learned polynomial mean. The kernel is

    k(a, b) = sf2 * exp(-sum_d (a_d - b_d)^2 / (2 * l_d)),

where ``sf2`` is the signal variance and ``l_d`` are per-dimension length
scales carrying squared-input units (``l_d`` equals the square of the
conventional length-scale parameterization).

The trend is a generalized-least-squares fit of monomial basis functions
through the kernel-induced covariance, so predictions revert to the trend far
from data. Hyperparameters are chosen by maximizing the log marginal
likelihood over a seeded multi-start bounded search.

All covariance matrices include observation noise as variances on the
diagonal. Fitted models are immutable; ``predict`` and ``sample`` are
read-only and safe to call concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg as sla
from scipy import optimize

__all__ = [
    "GPError",
    "SingularCovarianceError",
    "Dataset",
    "KernelParams",
    "BasisSpec",
    "OptimizerConfig",
    "GPModel",
    "kernel_eval",
    "kernel_matrix",
    "fit",
    "log_marginal_likelihood",
    "predict",
    "sample",
]

LOG_BOUND_FACTOR = 1e6  # hyperparameter search spans [scale/1e6, scale*1e6]
JITTER_START_FACTOR = 1e-10
JITTER_MAX_FACTOR = 1e-6


class GPError(Exception):
    """Raised for invalid GP inputs or configurations."""


class SingularCovarianceError(GPError):
    """Raised when a covariance matrix cannot be factorized, even with jitter."""


def _as_2d(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise GPError(f"input locations must be a 2-D array, got ndim={x.ndim}")
    return x


@dataclass(frozen=True)
class Dataset:
    """One fidelity level's observations.

    Parameters
    ----------
    inputs : (n, m) array
        Input locations (problem-defined units, e.g. degrees for alpha/beta).
    outputs : (n,) array
        Observed scalar values.
    noise_sd : (n,) array
        Per-point noise standard deviations, in output units. Zero means an
        exact observation.
    """

    inputs: np.ndarray
    outputs: np.ndarray
    noise_sd: np.ndarray

    def __post_init__(self):
        inputs = _as_2d(self.inputs)
        outputs = np.asarray(self.outputs, dtype=float).ravel()
        noise = np.asarray(self.noise_sd, dtype=float).ravel()
        if not (inputs.shape[0] == outputs.size == noise.size):
            raise GPError(
                "inconsistent dataset sizes: "
                f"{inputs.shape[0]} inputs, {outputs.size} outputs, {noise.size} noise values"
            )
        if inputs.size and not np.all(np.isfinite(inputs)):
            raise GPError("non-finite input locations")
        if outputs.size and not np.all(np.isfinite(outputs)):
            raise GPError("non-finite outputs")
        if noise.size and (not np.all(np.isfinite(noise)) or np.any(noise < 0)):
            raise GPError("noise standard deviations must be finite and >= 0")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "outputs", outputs)
        object.__setattr__(self, "noise_sd", noise)

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def ndim(self) -> int:
        return self.inputs.shape[1]

    @property
    def noise_var(self) -> np.ndarray:
        return self.noise_sd**2


@dataclass(frozen=True)
class KernelParams:
    """Squared-exponential hyperparameters: signal variance and length scales.

    ``length_scales`` carry squared-input units (the literal divisor ``2*l_d``
    in the kernel exponent).
    """

    signal_variance: float
    length_scales: np.ndarray

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.length_scales, dtype=float))
        sf2 = float(self.signal_variance)
        if not np.isfinite(sf2) or sf2 <= 0:
            raise GPError(f"signal variance must be positive, got {sf2}")
        if not np.all(np.isfinite(ls)) or np.any(ls <= 0):
            raise GPError("length scales must be positive")
        object.__setattr__(self, "signal_variance", sf2)
        object.__setattr__(self, "length_scales", ls)

    @property
    def ndim(self) -> int:
        return self.length_scales.size


@dataclass(frozen=True)
class BasisSpec:
    """Monomial trend basis: a constant plus per-dimension powers up to ``degree``.

    ``degree=0`` keeps only the constant term; ``degree=1`` (the default) adds
    one linear term per input dimension.
    """

    degree: int = 1

    def __post_init__(self):
        if int(self.degree) != self.degree or self.degree < 0:
            raise GPError(f"basis degree must be a nonnegative integer, got {self.degree}")
        object.__setattr__(self, "degree", int(self.degree))

    def size(self, ndim: int) -> int:
        return 1 + self.degree * ndim

    def design_matrix(self, x) -> np.ndarray:
        """Evaluate all basis functions at ``x``; returns an (n, p) matrix."""
        x = _as_2d(x)
        cols = [np.ones(x.shape[0])]
        for d in range(1, self.degree + 1):
            for j in range(x.shape[1]):
                cols.append(x[:, j] ** d)
        return np.column_stack(cols)


def kernel_eval(a, b, params: KernelParams) -> float:
    """Squared-exponential covariance between two points."""
    a = np.atleast_1d(np.asarray(a, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    if a.shape != b.shape or a.size != params.ndim:
        raise GPError(
            f"dimension mismatch: points {a.shape}/{b.shape}, "
            f"{params.ndim} length scales"
        )
    z = np.sum((a - b) ** 2 / (2.0 * params.length_scales))
    return params.signal_variance * math.exp(-z)


def kernel_matrix(a, b, params: KernelParams) -> np.ndarray:
    """Kernel matrix K[i, j] = k(a_i, b_j) for row-stacked point sets."""
    a = _as_2d(a)
    b = _as_2d(b)
    if a.shape[1] != params.ndim or b.shape[1] != params.ndim:
        raise GPError(
            f"dimension mismatch: inputs have {a.shape[1]}/{b.shape[1]} columns, "
            f"kernel has {params.ndim} length scales"
        )
    inv2l = 1.0 / (2.0 * params.length_scales)
    sq = (
        (a**2 * inv2l).sum(axis=1)[:, None]
        + (b**2 * inv2l).sum(axis=1)[None, :]
        - 2.0 * (a * inv2l) @ b.T
    )
    np.maximum(sq, 0.0, out=sq)
    return params.signal_variance * np.exp(-sq)


def factor_covariance(cov: np.ndarray, noise_var=None):
    """Cholesky-factor ``cov + diag(noise_var)`` with escalating jitter.

    Jitter starts at 1e-10 of the mean kernel diagonal and escalates by
    factors of 10 up to 1e-6 of that scale before failing.

    Returns
    -------
    (c, lower) : tuple
        A ``scipy.linalg.cho_factor`` result.
    """
    v = np.array(cov, dtype=float)
    if noise_var is not None:
        v[np.diag_indices_from(v)] += noise_var
    scale = float(np.mean(np.diag(cov))) if cov.size else 1.0
    if scale <= 0 or not np.isfinite(scale):
        scale = 1.0
    jitter = 0.0
    while True:
        try:
            return sla.cho_factor(
                v + jitter * np.eye(v.shape[0]), lower=True, check_finite=False
            )
        except np.linalg.LinAlgError:
            pass
        jitter = JITTER_START_FACTOR * scale if jitter == 0.0 else jitter * 10.0
        if jitter > JITTER_MAX_FACTOR * scale:
            raise SingularCovarianceError(
                f"covariance not positive definite after jitter up to {jitter:.3e}"
            )


def covariance_sqrt(cov: np.ndarray) -> np.ndarray:
    """A square-root factor L with L @ L.T ~= cov.

    Tries Cholesky first; falls back to a symmetric eigendecomposition with
    negative eigenvalues clamped to zero, so rank-deficient (e.g. exactly
    interpolated) covariances are handled.
    """
    cov = np.asarray(cov, dtype=float)
    if cov.size == 0:
        return cov.copy()
    scale = float(np.max(np.abs(np.diag(cov))))
    if scale == 0.0:
        return np.zeros_like(cov)
    try:
        return np.linalg.cholesky(cov + 1e-14 * scale * np.eye(cov.shape[0]))
    except np.linalg.LinAlgError:
        w, u = np.linalg.eigh(0.5 * (cov + cov.T))
        w = np.clip(w, 0.0, None)
        return u * np.sqrt(w)[None, :]


def _gls_beta(chol, design: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Generalized-least-squares coefficients (design' V^-1 design)^-1 design' V^-1 y.

    Solved as an ordinary least-squares problem on the Cholesky-whitened
    system, which stays accurate when V is ill-conditioned (e.g. noiseless
    data with a long-length-scale kernel).
    """
    c, lower = chol
    wh_design = sla.solve_triangular(c, design, lower=lower, check_finite=False)
    wh_y = sla.solve_triangular(c, y, lower=lower, check_finite=False)
    beta, _, rank, _ = np.linalg.lstsq(wh_design, wh_y, rcond=None)
    if rank < design.shape[1]:
        raise SingularCovarianceError("singular basis normal equations")
    return beta


def _lml_terms(chol, design, y):
    """(lml, beta, alpha) for a factored V and trend design matrix."""
    beta = _gls_beta(chol, design, y)
    alpha = y - design @ beta
    vinv_alpha = sla.cho_solve(chol, alpha, check_finite=False)
    logdet = 2.0 * np.sum(np.log(np.diag(chol[0])))
    n = y.size
    lml = -0.5 * logdet - 0.5 * float(alpha @ vinv_alpha) - 0.5 * n * math.log(2.0 * math.pi)
    return lml, beta, alpha


@dataclass(frozen=True)
class OptimizerConfig:
    """Multi-start bounded hyperparameter search settings."""

    n_starts: int = 8
    seed: int = 0
    maxiter: int = 200

    def __post_init__(self):
        if self.n_starts < 1:
            raise GPError("optimizer requires at least one start")


class _MarginalLikelihood:
    """Profiled log marginal likelihood and its analytic gradient.

    Caches the per-dimension squared-difference matrices so each evaluation
    is one exp, one Cholesky, and a couple of triangular solves. Gradients
    use the projected-residual identity dP = -P dV P, which accounts for the
    dependence of the generalized-least-squares trend coefficients on the
    kernel.
    """

    def __init__(self, x: np.ndarray, noise_var: np.ndarray, design: np.ndarray, y: np.ndarray):
        self.x = x
        self.noise_var = noise_var
        self.design = design
        self.y = y
        n, m = x.shape
        self.sqdiff = [(x[:, d, None] - x[None, :, d]) ** 2 for d in range(m)]

    def _factored(self, theta):
        sf2 = math.exp(theta[0])
        ls = np.exp(theta[1:])
        expo = np.zeros_like(self.sqdiff[0])
        for d, d2 in enumerate(self.sqdiff):
            expo += d2 / (2.0 * ls[d])
        k = sf2 * np.exp(-expo)
        chol = factor_covariance(k, self.noise_var)
        return k, ls, chol

    def value(self, theta) -> float:
        try:
            _, _, chol = self._factored(theta)
            lml, _, _ = _lml_terms(chol, self.design, self.y)
        except SingularCovarianceError:
            return -np.inf
        return lml

    def value_and_grad(self, theta):
        try:
            k, ls, chol = self._factored(theta)
            lml, beta, alpha = _lml_terms(chol, self.design, self.y)
        except SingularCovarianceError:
            return -np.inf, np.zeros_like(theta)
        py = sla.cho_solve(chol, alpha, check_finite=False)  # P y = V^-1 (y - H beta)
        vinv = sla.cho_solve(chol, np.eye(len(self.y)), check_finite=False)
        grad = np.empty_like(theta)
        # d V / d log(sf2) = K
        grad[0] = 0.5 * (py @ k @ py) - 0.5 * float(np.sum(vinv * k))
        for d, d2 in enumerate(self.sqdiff):
            dv = k * (d2 / (2.0 * ls[d]))  # d V / d log(l_d)
            grad[d + 1] = 0.5 * (py @ dv @ py) - 0.5 * float(np.sum(vinv * dv))
        return lml, grad


def _search_scales(data: Dataset) -> tuple[float, np.ndarray]:
    """Data-driven center for the hyperparameter search box."""
    y = data.outputs
    sf2 = float(np.var(y)) if y.size > 1 else 1.0
    if sf2 <= 0 or not np.isfinite(sf2):
        sf2 = 1.0
    spans = data.inputs.max(axis=0) - data.inputs.min(axis=0) if data.n else np.ones(data.ndim)
    spans = np.where(spans > 0, spans, 1.0)
    # center length scales so ~1/3 of the span is one conventional length
    return sf2, (spans / 3.0) ** 2


def _optimize_hyperparams(problem: _MarginalLikelihood, center: np.ndarray, config: OptimizerConfig):
    """Maximize the log marginal likelihood over a seeded multi-start search.

    ``theta`` lives in log-space with bounds [1e-6, 1e6] relative to the
    data-driven center. Local searches start from the center and from the
    best of a cheap probe sweep. Ties are broken by first-found: a later
    start replaces the incumbent only on strict improvement.
    """
    log_c = np.log(center)
    lb = log_c - math.log(LOG_BOUND_FACTOR)
    ub = log_c + math.log(LOG_BOUND_FACTOR)
    bounds = list(zip(lb, ub))
    rng = np.random.default_rng(config.seed)

    def neg_value(theta):
        if np.any(theta < lb - 1e-9) or np.any(theta > ub + 1e-9):
            return 1e300
        val = problem.value(theta)
        return -val if np.isfinite(val) else 1e300

    def neg_value_grad(theta):
        val, grad = problem.value_and_grad(theta)
        if not np.isfinite(val):
            return 1e300, np.zeros_like(theta)
        return -val, -grad

    probes = [log_c] + list(rng.uniform(lb, ub, size=(8 * config.n_starts, log_c.size)))
    scored = sorted(probes, key=neg_value)
    starts = [log_c] + scored[: config.n_starts - 1]

    best_val = -np.inf
    best_theta = log_c
    for theta0 in starts:
        res = optimize.minimize(
            neg_value_grad,
            theta0,
            jac=True,
            method="L-BFGS-B",
            bounds=bounds,
            options={"maxiter": config.maxiter, "ftol": 1e-14, "gtol": 1e-10},
        )
        val = -res.fun
        if np.isfinite(val) and val > best_val:
            best_val = val
            best_theta = res.x
    if not np.isfinite(best_val):
        raise SingularCovarianceError("hyperparameter search found no factorizable covariance")
    # derivative-free polish for flat plateaus where curvature information
    # stops helping
    res = optimize.minimize(
        neg_value,
        best_theta,
        method="Nelder-Mead",
        options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 400},
    )
    if np.isfinite(res.fun) and -res.fun > best_val and np.all(res.x >= lb) and np.all(res.x <= ub):
        best_val = -res.fun
        best_theta = res.x
    return best_theta, best_val


@dataclass
class GPModel:
    """A fitted GP: dataset, basis, kernel, trend coefficients, and caches.

    Not constructed directly; use :func:`fit`. The cached Cholesky factor of
    ``V = K(X, X) + diag(noise_sd^2)`` and the weight vector ``V^-1 (y - H beta)``
    make prediction O(n * n_query).
    """

    data: Dataset
    basis: BasisSpec
    kernel: KernelParams
    beta: np.ndarray
    log_marginal_likelihood: float
    _chol: tuple = field(repr=False, default=None)
    _weights: np.ndarray = field(repr=False, default=None)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def predict(self, query):
        return predict(self, query)

    def sample(self, query, count: int, seed: int):
        return sample(self, query, count, seed)


def log_marginal_likelihood(data: Dataset, basis: BasisSpec, kernel: KernelParams) -> float:
    """Log marginal likelihood -0.5 log|V| - 0.5 a' V^-1 a - (n/2) log 2pi.

    ``a = y - H' beta_hat`` with ``beta_hat`` the generalized-least-squares
    trend coefficients for this kernel.
    """
    design = basis.design_matrix(data.inputs)
    if data.n < design.shape[1]:
        raise GPError(f"need at least {design.shape[1]} points for the basis, got {data.n}")
    k = kernel_matrix(data.inputs, data.inputs, kernel)
    chol = factor_covariance(k, data.noise_var)
    lml, _, _ = _lml_terms(chol, design, data.outputs)
    return lml


def fit(data: Dataset, basis: BasisSpec | None = None, config: OptimizerConfig | None = None) -> GPModel:
    """Fit kernel hyperparameters and trend coefficients to a dataset.

    Hyperparameters maximize the log marginal likelihood over a multi-start
    L-BFGS-B search in log-space, bounded to [1e-6, 1e6] times data-driven
    scales. Deterministic for a fixed dataset and optimizer seed.
    """
    basis = basis or BasisSpec()
    config = config or OptimizerConfig()
    design = basis.design_matrix(data.inputs)
    p = design.shape[1]
    if data.n < p:
        raise GPError(f"underdetermined basis: {data.n} points for {p} basis functions")

    sf2_c, ls_c = _search_scales(data)
    center = np.concatenate([[sf2_c], ls_c])
    y = data.outputs
    noise_var = data.noise_var
    x = data.inputs

    def objective(theta):
        kern = KernelParams(math.exp(theta[0]), np.exp(theta[1:]))
        try:
            chol = factor_covariance(kernel_matrix(x, x, kern), noise_var)
            lml, _, _ = _lml_terms(chol, design, y)
        except SingularCovarianceError:
            return -np.inf
        return lml

    theta, best = _optimize_hyperparams(objective, center, config)
    kernel = KernelParams(math.exp(theta[0]), np.exp(theta[1:]))
    chol = factor_covariance(kernel_matrix(x, x, kernel), noise_var)
    lml, beta, alpha = _lml_terms(chol, design, y)
    weights = sla.cho_solve(chol, alpha, check_finite=False)
    return GPModel(
        data=data,
        basis=basis,
        kernel=kernel,
        beta=beta,
        log_marginal_likelihood=lml,
        _chol=chol,
        _weights=weights,
    )


def make_model(data: Dataset, basis: BasisSpec, kernel: KernelParams) -> GPModel:
    """Assemble a GPModel with given hyperparameters (no search).

    Used when deserializing models and in tests; beta and caches are
    recomputed from the stored dataset and kernel.
    """
    design = basis.design_matrix(data.inputs)
    if data.n < design.shape[1]:
        raise GPError("underdetermined basis")
    chol = factor_covariance(kernel_matrix(data.inputs, data.inputs, kernel), data.noise_var)
    lml, beta, alpha = _lml_terms(chol, design, data.outputs)
    weights = sla.cho_solve(chol, alpha, check_finite=False)
    return GPModel(data, basis, kernel, beta, lml, chol, weights)


def predict(model: GPModel, query) -> tuple[np.ndarray, np.ndarray]:
    """Predictive mean and covariance at query locations.

    Returns
    -------
    mean : (n*,) array
    cov : (n*, n*) array
        Symmetrized; negative diagonal entries from cancellation are clamped
        to zero.
    """
    xq = _as_2d(query)
    if xq.shape[1] != model.ndim:
        raise GPError(f"query has {xq.shape[1]} columns, model expects {model.ndim}")
    if xq.shape[0] == 0:
        return np.zeros(0), np.zeros((0, 0))
    kq = kernel_matrix(xq, model.data.inputs, model.kernel)
    mean = model.basis.design_matrix(xq) @ model.beta + kq @ model._weights
    kqq = kernel_matrix(xq, xq, model.kernel)
    cov = kqq - kq @ sla.cho_solve(model._chol, kq.T, check_finite=False)
    cov = 0.5 * (cov + cov.T)
    d = np.diag(cov).copy()
    np.fill_diagonal(cov, np.maximum(d, 0.0))
    return mean, cov


def predict_cross_cov(model: GPModel, xa, xb) -> np.ndarray:
    """Posterior covariance block cov(f(xa), f(xb)); needed by the recursive
    multi-fidelity equations, which evaluate it at non-square argument pairs."""
    xa = _as_2d(xa)
    xb = _as_2d(xb)
    ka = kernel_matrix(xa, model.data.inputs, model.kernel)
    kb = kernel_matrix(model.data.inputs, xb, model.kernel)
    return kernel_matrix(xa, xb, model.kernel) - ka @ sla.cho_solve(
        model._chol, kb, check_finite=False
    )


def sample(model: GPModel, query, count: int, seed: int) -> np.ndarray:
    """Deterministic draws from the predictive distribution.

    Each row is ``mean + L @ u`` with ``L`` a square-root factor of the
    predictive covariance and ``u`` standard normal; bit-identical for a
    fixed seed.
    """
    if count < 1:
        raise GPError("sample count must be >= 1")
    mean, cov = predict(model, query)
    root = covariance_sqrt(cov)
    rng = np.random.default_rng(seed)
    u = rng.standard_normal((count, mean.size))
    return mean[None, :] + u @ root.T
