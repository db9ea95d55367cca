"""Sandwich covariance, delta method and Wald/chi-square inference.

The covariance of the stacked estimator (beta, alpha) is estimated by
``B^{-1} U B^{-T}`` with B the analytic Jacobian of the estimating
equations at the estimate and U the sum of per-cluster score outer
products.  The dispersions are treated as known.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
import pandas as pd
from scipy import linalg, stats

from .equations import _design_blocks, cell_terms, psi_jacobian, score_contributions, sigma_inverse
from .errors import (
    InvalidInputError,
    InvalidTransformError,
    NonInvertibleBreadError,
    SingularBlockError,
)
from .model import Dataset, sigma_matrix
from .solver import FitResult


@dataclass
class SandwichParts:
    bread: np.ndarray
    meat: np.ndarray
    cov_full: np.ndarray
    mu3: float
    mu4: float
    symmetry_error: float = 0.0


@dataclass
class InferenceResult:
    """Covariance of theta = (beta, rho) and the derived interval table.

    ``theta_cov`` covers every parameter; ``theta_cov_S`` is the block for
    ``(beta_s for s in subset, rho)``.
    """

    theta: np.ndarray
    theta_cov: np.ndarray
    theta_cov_S: np.ndarray
    subset: list[int]
    level: float
    table: pd.DataFrame
    parts: SandwichParts
    region_stats: "RegionStat | None" = None
    warnings: list[str] = field(default_factory=list)


class RegionStat(NamedTuple):
    stat_beta: float
    df_beta: int
    stat_rho: float
    df_rho: int

    def covered(self, level: float = 0.95) -> tuple[bool, bool]:
        ok_b = self.stat_beta <= stats.chi2.ppf(level, self.df_beta)
        ok_r = self.stat_rho <= stats.chi2.ppf(level, self.df_rho) if self.df_rho else True
        return bool(ok_b), bool(ok_r)


def standardized_moments(eps: np.ndarray, alpha, basis) -> tuple[float, float]:
    """Third and fourth empirical moments of ``L^{-1} eps_i``, Sigma = L L'."""
    L = np.linalg.cholesky(sigma_matrix(alpha, basis))
    z = linalg.solve_triangular(L, eps.T, lower=True)
    return float(np.mean(z**3)), float(np.mean(z**4))


def pooled_beta_meat(ds: Dataset, fit: FitResult, terms=None) -> np.ndarray:
    """Beta block of the meat with each ``eps_i eps_i'`` replaced by their average.

    Under the model every cluster's standardized residual vector has the
    same covariance, so pooling removes most of the sampling noise of the
    per-cluster outer products while keeping the estimator consistent.
    Block (j1, j2) is ``M[j1, j2] * sum_i c_ij1 c_ij2 x_i x_i'`` with
    ``M = Sigma^{-1} S Sigma^{-1}`` and ``S = sum_i eps_i eps_i' / n``.
    """
    terms = terms or cell_terms(ds, fit.spec, fit.state)
    Sinv = sigma_inverse(fit.state.alpha, ds.basis)
    S = terms.eps.T @ terms.eps / ds.n
    M = Sinv @ S @ Sinv
    Z = _design_blocks(terms.c, ds.X)
    U = (Z.T @ Z) * np.kron(M, np.ones((ds.d, ds.d)))
    return 0.5 * (U + U.T)


def sandwich(ds: Dataset, fit: FitResult, meat: str = "pooled") -> SandwichParts:
    """``B^{-1} U B^{-T}`` for the stacked (beta, alpha) estimator.

    ``meat="empirical"`` uses the per-cluster score outer products for every
    block; ``meat="pooled"`` (the default) replaces the beta block by
    :func:`pooled_beta_meat` and keeps the per-cluster products elsewhere.
    """
    if meat not in ("pooled", "empirical"):
        raise InvalidInputError(f"unknown meat estimator {meat!r}")
    spec, state = fit.spec, fit.state
    terms = cell_terms(ds, spec, state)
    B = psi_jacobian(ds, spec, state, terms)
    scores = score_contributions(ds, spec, state, terms)
    U = scores.T @ scores
    if meat == "pooled":
        pd_ = ds.p * ds.d
        U[:pd_, :pd_] = pooled_beta_meat(ds, fit, terms)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", linalg.LinAlgWarning)
            lu = linalg.lu_factor(B, check_finite=True)
        piv = np.abs(np.diag(lu[0]))
        if not np.all(np.isfinite(piv)) or piv.min() <= 1e-13 * piv.max():
            raise linalg.LinAlgError("near singular")
    except (linalg.LinAlgError, ValueError) as exc:
        raise NonInvertibleBreadError(f"sandwich bread is not invertible: {exc}") from None
    Binv_U = linalg.lu_solve(lu, U)
    cov = linalg.lu_solve(lu, Binv_U.T)
    asym = float(np.max(np.abs(cov - cov.T)))
    cov = 0.5 * (cov + cov.T)
    mu3, mu4 = standardized_moments(terms.eps, state.alpha, ds.basis)
    return SandwichParts(B, U, cov, mu3, mu4, asym)


def delta_jacobian(alpha, p: int, d: int) -> np.ndarray:
    """Jacobian of ``(beta, alpha) -> (beta, alpha[1:] / alpha[0])``."""
    alpha = np.asarray(alpha, dtype=float)
    if alpha[0] <= 0:
        raise InvalidTransformError(f"alpha_0 = {alpha[0]:.3g} must be positive")
    K = alpha.size - 1
    pd_ = p * d
    F = np.zeros((pd_ + K, pd_ + K + 1))
    F[:pd_, :pd_] = np.eye(pd_)
    F[pd_:, pd_] = -alpha[1:] / alpha[0] ** 2
    F[pd_:, pd_ + 1:] = np.eye(K) / alpha[0]
    return F


def delta_to_theta(parts: SandwichParts, fit: FitResult) -> np.ndarray:
    p, d = fit.state.beta.shape
    F = delta_jacobian(fit.state.alpha, p, d)
    cov = F @ parts.cov_full @ F.T
    return 0.5 * (cov + cov.T)


def selection_matrix(subset: Sequence[int], p: int, d: int, K: int) -> np.ndarray:
    """Rows picking ``(beta_s for s in subset, rho)`` out of theta (0-based subset)."""
    subset = list(subset)
    if any(s < 0 or s >= p for s in subset):
        raise InvalidInputError(f"subset indices must lie in 0..{p - 1}")
    T = np.eye(p)[subset]
    top = np.kron(T, np.eye(d))
    out = np.zeros((top.shape[0] + K, p * d + K))
    out[: top.shape[0], : p * d] = top
    out[top.shape[0]:, p * d:] = np.eye(K)
    return out


def wald_intervals(estimates, cov_or_se, names: Sequence[str] | None = None,
                   level: float = 0.95) -> pd.DataFrame:
    """Estimate +/- z * SE for each scalar parameter.

    ``cov_or_se`` may be a covariance matrix or a vector of standard errors.
    """
    if not 0 < level < 1:
        raise InvalidInputError("level must lie in (0, 1)")
    est = np.atleast_1d(np.asarray(estimates, dtype=float))
    cs = np.asarray(cov_or_se, dtype=float)
    var = np.diag(cs) if cs.ndim == 2 else np.atleast_1d(cs) ** 2
    se = np.sqrt(np.maximum(var, 0.0))
    z = stats.norm.ppf(0.5 + level / 2)
    lower, upper = est - z * se, est + z * se
    return pd.DataFrame({
        "parameter": list(names) if names is not None else [f"theta{i}" for i in range(est.size)],
        "estimate": est,
        "se": se,
        "lower": lower,
        "upper": upper,
        "excludes_zero": (lower > 0) | (upper < 0),
    })


def _quad_form(delta: np.ndarray, V: np.ndarray, block: str) -> float:
    if delta.size == 0:
        return 0.0
    try:
        cf = linalg.cho_factor(V, lower=True)
    except (linalg.LinAlgError, ValueError):
        raise SingularBlockError(f"covariance block {block} is singular", block) from None
    return float(delta @ linalg.cho_solve(cf, delta))


def region_statistic(theta_hat, theta_cov, subset: Sequence[int], p: int, d: int, K: int,
                     beta0=None, rho0=None) -> RegionStat:
    """Chi-square quadratic forms for beta_S and rho against hypothesised values.

    ``theta_hat`` and ``theta_cov`` are over the full theta = (beta, rho);
    unspecified hypotheses default to zero.
    """
    theta_hat = np.asarray(theta_hat, dtype=float)
    Xi = selection_matrix(subset, p, d, K)
    V = Xi @ theta_cov @ Xi.T
    est = Xi @ theta_hat
    qd = len(subset) * d
    b0 = np.zeros((p, d)) if beta0 is None else np.asarray(beta0, dtype=float).reshape(p, d)
    r0 = np.zeros(K) if rho0 is None else np.asarray(rho0, dtype=float)
    db = est[:qd] - b0[list(subset)].ravel()
    dr = est[qd:] - r0
    return RegionStat(
        _quad_form(db, V[:qd, :qd], "V_beta_S"), qd,
        _quad_form(dr, V[qd:, qd:], "V_rho"), K,
    )


def parameter_names(ds: Dataset) -> list[str]:
    names = [f"beta[{r}, {c}]" for r in ds.response_names for c in ds.covariate_names]
    return names + [f"rho[{lab}]" for lab in ds.basis_labels]


def inference_table(ds: Dataset, theta: np.ndarray, theta_cov: np.ndarray,
                    level: float = 0.95) -> pd.DataFrame:
    """Long table: one row per beta_jl (response, covariate) then one per rho_k."""
    tab = wald_intervals(theta, theta_cov, parameter_names(ds), level)
    block = ["beta"] * (ds.p * ds.d) + ["rho"] * ds.K
    response = [r for r in ds.response_names for _ in ds.covariate_names] + [""] * ds.K
    term = list(ds.covariate_names) * ds.p + list(ds.basis_labels)
    tab.insert(0, "block", block)
    tab.insert(1, "response", response)
    tab["parameter"] = term
    return tab


def infer(ds: Dataset, fit: FitResult, level: float = 0.95, subset: Sequence[int] | None = None,
          beta0=None, rho0=None, meat: str = "pooled") -> InferenceResult:
    """Sandwich covariance, Wald table and (optionally) region statistics.

    ``subset`` is 0-based and defaults to every response.  Region statistics
    are computed when ``beta0`` or ``rho0`` is supplied.
    """
    notes = []
    if ds.p**2 >= ds.n:
        msg = f"p^2 = {ds.p ** 2} >= n = {ds.n}: normal approximation may be poor"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        notes.append(msg)
    parts = sandwich(ds, fit, meat)
    cov = delta_to_theta(parts, fit)
    theta = fit.state.theta
    subset = list(range(ds.p)) if subset is None else list(subset)
    Xi = selection_matrix(subset, ds.p, ds.d, ds.K)
    region = None
    if beta0 is not None or rho0 is not None:
        region = region_statistic(theta, cov, subset, ds.p, ds.d, ds.K, beta0, rho0)
    return InferenceResult(
        theta=theta,
        theta_cov=cov,
        theta_cov_S=Xi @ cov @ Xi.T,
        subset=subset,
        level=level,
        table=inference_table(ds, theta, cov, level),
        parts=parts,
        region_stats=region,
        warnings=notes,
    )
