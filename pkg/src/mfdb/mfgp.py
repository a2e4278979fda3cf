"""Recursive auto-regressive multi-fidelity Gaussian process regression.

Each fidelity level t models the data as a learned multiplicative trend times
the previous level plus an additive discrepancy GP:

    Z_t(x) = rho_{t-1}(x) * Z_{t-1}(x) + delta_t(x),
    rho_{t-1}(x) = g_{t-1}(x)' beta_rho,

with per-point observation noise at every level. Levels are fitted strictly
bottom-up; level t's training only factors matrices of its own size n_t,
which is the cost advantage of the recursive formulation. Design sets need
not be nested: the previous level's predictive mean and covariance are
evaluated at the current level's inputs through its own predictive equations
and cached.

Trend/level coefficients solve the joint generalized-least-squares system
with design matrix [G ⊙ (mu_{t-1}(X_t) 1_q) | F_t] against K_t + Sigma_t, and
the discrepancy kernel maximizes the level's log marginal likelihood, both in
the noisy-observation extension of the non-nested recursive equations.
Prediction propagates the previous level's covariance through the trend via
elementwise products with the trend-vector outer products.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg as sla

from . import gp
from .gp import (
    BasisSpec,
    Dataset,
    GPError,
    GPModel,
    KernelParams,
    OptimizerConfig,
    factor_covariance,
    kernel_matrix,
    _as_2d,
    _gls_beta,
)

__all__ = [
    "LevelSpec",
    "FidelityLevel",
    "MFGPModel",
    "fit_level",
    "predict_mf",
    "sample_mf",
    "build",
]


@dataclass(frozen=True)
class LevelSpec:
    """Dataset plus basis/optimizer choices for one fidelity level."""

    data: Dataset
    level_basis: BasisSpec = BasisSpec(1)
    trend_basis: BasisSpec = BasisSpec(0)
    optimizer: OptimizerConfig = OptimizerConfig()


@dataclass
class FidelityLevel:
    """A fitted correction level (t >= 2) on top of the previous levels.

    Carries the discrepancy kernel, the multiplicative-trend coefficients
    ``beta_rho`` and the level trend coefficients ``beta_level``, plus caches
    of everything the recursive predictive equations reference repeatedly:
    the previous level's mean and covariance at this level's inputs and the
    factored level covariance.
    """

    index: int
    data: Dataset
    kernel: KernelParams
    level_basis: BasisSpec
    trend_basis: BasisSpec
    beta_rho: np.ndarray
    beta_level: np.ndarray
    log_marginal_likelihood: float
    _mu_prev: np.ndarray = field(repr=False, default=None)
    _cov_prev: np.ndarray = field(repr=False, default=None)
    _rho_train: np.ndarray = field(repr=False, default=None)
    _a_chol: tuple = field(repr=False, default=None)
    _weights: np.ndarray = field(repr=False, default=None)

    @property
    def fitted(self) -> bool:
        return self._a_chol is not None and self._weights is not None


@dataclass
class MFGPModel:
    """Ordered stack of fitted fidelity levels; level 1 is a plain GP."""

    base: GPModel
    upper: list[FidelityLevel] = field(default_factory=list)

    def __post_init__(self):
        for pos, level in enumerate(self.upper):
            if level.index != pos + 2:
                raise GPError(
                    f"levels must be stacked bottom-up without gaps; "
                    f"found index {level.index} at position {pos + 2}"
                )
            if not level.fitted:
                raise GPError(f"level {level.index} is not fitted")

    @property
    def n_levels(self) -> int:
        return 1 + len(self.upper)

    @property
    def ndim(self) -> int:
        return self.base.ndim

    def _check_level(self, level: int | None) -> int:
        if level is None:
            return self.n_levels
        if not 1 <= level <= self.n_levels:
            raise GPError(f"level {level} out of range 1..{self.n_levels}")
        return level

    def mean_at(self, query, level: int) -> np.ndarray:
        if level == 1:
            mean, _ = gp.predict(self.base, query)
            return mean
        lv = self.upper[level - 2]
        xq = _as_2d(query)
        rho_q = lv.trend_basis.design_matrix(xq) @ lv.beta_rho
        cross = self.cov_at(xq, lv.data.inputs, level - 1)
        c_q = rho_q[:, None] * lv._rho_train[None, :] * cross + kernel_matrix(
            xq, lv.data.inputs, lv.kernel
        )
        trend = lv.level_basis.design_matrix(xq) @ lv.beta_level
        return rho_q * self.mean_at(xq, level - 1) + trend + c_q @ lv._weights

    def cov_at(self, xa, xb, level: int) -> np.ndarray:
        if level == 1:
            return gp.predict_cross_cov(self.base, xa, xb)
        lv = self.upper[level - 2]
        xa = _as_2d(xa)
        xb = _as_2d(xb)
        rho_a = lv.trend_basis.design_matrix(xa) @ lv.beta_rho
        rho_b = lv.trend_basis.design_matrix(xb) @ lv.beta_rho
        xt = lv.data.inputs
        c_a = rho_a[:, None] * lv._rho_train[None, :] * self.cov_at(xa, xt, level - 1)
        c_a += kernel_matrix(xa, xt, lv.kernel)
        c_b = lv._rho_train[:, None] * rho_b[None, :] * self.cov_at(xt, xb, level - 1)
        c_b += kernel_matrix(xt, xb, lv.kernel)
        prior = rho_a[:, None] * rho_b[None, :] * self.cov_at(xa, xb, level - 1)
        prior += kernel_matrix(xa, xb, lv.kernel)
        return prior - c_a @ sla.cho_solve(lv._a_chol, c_b, check_finite=False)

    def predict(self, query, level: int | None = None):
        return predict_mf(self, query, level=level)

    def sample(self, query, count: int, seed: int, level: int | None = None):
        return sample_mf(self, query, count, seed, level=level)


def _fit_upper_level(prev: MFGPModel, spec: LevelSpec) -> FidelityLevel:
    data = spec.data
    t = prev.n_levels + 1
    if data.ndim != prev.ndim:
        raise GPError(f"level {t} has {data.ndim} input dims, model has {prev.ndim}")
    xt = data.inputs
    y = data.outputs
    noise_var = data.noise_var

    mu_prev = prev.mean_at(xt, t - 1)
    cov_prev = prev.cov_at(xt, xt, t - 1)
    # the propagated covariance is PSD in exact arithmetic; strip the
    # finite-precision negative eigenvalues so the level factorization's
    # jitter budget is not spent on level t-1 roundoff
    cov_prev = 0.5 * (cov_prev + cov_prev.T)
    w, u = np.linalg.eigh(cov_prev)
    cov_prev = (u * np.clip(w, 0.0, None)) @ u.T

    g_mat = spec.trend_basis.design_matrix(xt)
    f_mat = spec.level_basis.design_matrix(xt)
    q = g_mat.shape[1]
    p = f_mat.shape[1]
    if data.n < q + p:
        raise GPError(
            f"degenerate level {t}: {data.n} points cannot identify "
            f"{q} trend + {p} basis coefficients"
        )
    design = np.column_stack([g_mat * mu_prev[:, None], f_mat])
    if np.linalg.matrix_rank(design) < q + p:
        raise GPError(f"rank-deficient joint design matrix at level {t}")

    sf2_c, ls_c = gp._search_scales(data)
    center = np.concatenate([[sf2_c], ls_c])

    def objective(theta):
        kern = KernelParams(math.exp(theta[0]), np.exp(theta[1:]))
        try:
            chol = factor_covariance(kernel_matrix(xt, xt, kern), noise_var)
            lml, _, _ = gp._lml_terms(chol, design, y)
        except gp.SingularCovarianceError:
            return -np.inf
        return lml

    theta, _ = gp._optimize_hyperparams(objective, center, spec.optimizer)
    kernel = KernelParams(math.exp(theta[0]), np.exp(theta[1:]))
    k_t = kernel_matrix(xt, xt, kernel)
    chol = factor_covariance(k_t, noise_var)
    lml, beta, _ = gp._lml_terms(chol, design, y)
    beta_rho = beta[:q]
    beta_level = beta[q:]

    rho_train = g_mat @ beta_rho
    a_core = np.outer(rho_train, rho_train) * cov_prev + k_t
    a_chol = factor_covariance(a_core, noise_var)
    resid = y - rho_train * mu_prev - f_mat @ beta_level
    weights = sla.cho_solve(a_chol, resid, check_finite=False)

    return FidelityLevel(
        index=t,
        data=data,
        kernel=kernel,
        level_basis=spec.level_basis,
        trend_basis=spec.trend_basis,
        beta_rho=beta_rho,
        beta_level=beta_level,
        log_marginal_likelihood=lml,
        _mu_prev=mu_prev,
        _cov_prev=cov_prev,
        _rho_train=rho_train,
        _a_chol=a_chol,
        _weights=weights,
    )


def fit_level(prev: MFGPModel | None, spec: LevelSpec) -> MFGPModel:
    """Fit the next fidelity level on top of ``prev`` (bottom-up only).

    With ``prev=None`` this fits the base level, a plain GP. Returns the
    extended model; ``prev`` is not modified.
    """
    if prev is None:
        base = gp.fit(spec.data, spec.level_basis, spec.optimizer)
        return MFGPModel(base=base)
    level = _fit_upper_level(prev, spec)
    return MFGPModel(base=prev.base, upper=[*prev.upper, level])


def build(specs) -> MFGPModel:
    """Fit a full multi-fidelity stack, lowest fidelity first."""
    specs = list(specs)
    if not specs:
        raise GPError("at least one fidelity level is required")
    model = None
    for spec in specs:
        model = fit_level(model, spec)
    return model


def predict_mf(model: MFGPModel, query, level: int | None = None):
    """Recursive predictive mean and covariance at ``query`` for a level.

    Level 1 is exactly the base GP prediction. The returned covariance is
    symmetrized with negative diagonal entries clamped to zero.
    """
    level = model._check_level(level)
    if level == 1:
        return gp.predict(model.base, query)
    xq = _as_2d(query)
    if xq.shape[1] != model.ndim:
        raise GPError(f"query has {xq.shape[1]} columns, model expects {model.ndim}")
    if xq.shape[0] == 0:
        return np.zeros(0), np.zeros((0, 0))
    mean = model.mean_at(xq, level)
    cov = model.cov_at(xq, xq, level)
    cov = 0.5 * (cov + cov.T)
    d = np.diag(cov).copy()
    np.fill_diagonal(cov, np.maximum(d, 0.0))
    return mean, cov


def sample_mf(model: MFGPModel, query, count: int, seed: int, level: int | None = None):
    """Deterministic draws from the level-t predictive distribution."""
    level = model._check_level(level)
    if level == 1:
        return gp.sample(model.base, query, count, seed)
    if count < 1:
        raise GPError("sample count must be >= 1")
    mean, cov = predict_mf(model, query, level=level)
    root = gp.covariance_sqrt(cov)
    rng = np.random.default_rng(seed)
    u = rng.standard_normal((count, mean.size))
    return mean[None, :] + u @ root.T
