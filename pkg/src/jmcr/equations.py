"""Estimating equations for (beta, alpha) and their derivatives.

Everything here exploits ``Cov(Y) = A^{1/2} (I_n kron Sigma) A^{1/2}``:
Sigma(alpha) is p x p and is factorised once, then applied to every
cluster.  Nothing of size np x np is ever formed, and the mean Jacobian
``D`` is represented only through its per-cell scalars ``dmu/deta``.

Parameter vectors are ordered ``(beta_1, ..., beta_p, alpha_0, ..., alpha_K)``
with ``beta_j`` the d coefficients of response j.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .errors import DegenerateVarianceError, NotPositiveDefiniteError
from .model import (
    Dataset,
    ModelSpec,
    ParameterState,
    inverse_link_derivs,
    linear_predictor,
    sigma_matrix,
    variance_derivs,
)


@dataclass
class CellTerms:
    """Per-(i, j) quantities at the current parameters, all ``(n, p)``."""

    mu: np.ndarray
    dmu: np.ndarray
    d2mu: np.ndarray
    h: np.ndarray
    dh: np.ndarray
    eps: np.ndarray
    n_clamped: int = 0

    @property
    def c(self) -> np.ndarray:
        # (dmu/deta) / sqrt(h): the j-th d-block of A^{-1/2} D for cluster i is c[i, j] * x_i
        return self.dmu / np.sqrt(self.h)

    def deps(self) -> np.ndarray:
        """d eps / d eta, cell by cell."""
        return -self.c - self.eps * self.dh * self.dmu / (2.0 * self.h)

    def dc(self) -> np.ndarray:
        """d c / d eta, cell by cell."""
        return self.d2mu / np.sqrt(self.h) - self.c * self.dmu * self.dh / (2.0 * self.h)


def cell_terms(ds: Dataset, spec: ModelSpec, state: ParameterState) -> CellTerms:
    eta = linear_predictor(state.beta, ds.X)
    mu, dmu, d2mu, n_clamped = inverse_link_derivs(spec.link, eta)
    h, dh = variance_derivs(spec.variance, mu, state.phi[None, :])
    bad = ~(np.isfinite(h) & (h > 0))
    if bad.any():
        i, j = np.argwhere(bad)[0]
        raise DegenerateVarianceError(
            f"variance is {h[i, j]!r} at cluster {i}, response {j}", index=(int(i), int(j))
        )
    eps = (ds.Y - mu) / np.sqrt(h)
    return CellTerms(mu, dmu, d2mu, h, dh, eps, n_clamped)


def pearson_residuals(ds: Dataset, spec: ModelSpec, state: ParameterState) -> np.ndarray:
    """``eps[i, j] = (Y[i, j] - mu[i, j]) / sqrt(h(mu[i, j]; phi[j]))``."""
    return cell_terms(ds, spec, state).eps


def sigma_inverse(alpha, basis: np.ndarray) -> np.ndarray:
    S = sigma_matrix(alpha, basis)
    try:
        cf = linalg.cho_factor(S, lower=True, check_finite=True)
    except (linalg.LinAlgError, ValueError) as exc:
        raise NotPositiveDefiniteError(f"Sigma(alpha) is not positive definite: {exc}") from None
    Sinv = linalg.cho_solve(cf, np.eye(S.shape[0]))
    return 0.5 * (Sinv + Sinv.T)


def basis_with_identity(basis: np.ndarray) -> np.ndarray:
    """Stack ``[I, W_1, ..., W_K]`` into a ``(K + 1, p, p)`` array."""
    p = basis.shape[1]
    return np.concatenate([np.eye(p)[None], basis], axis=0)


def trace_gram(basis: np.ndarray, n: int = 1) -> np.ndarray:
    """``n * tr(W_a W_b)`` for a, b in 0..K with W_0 = I."""
    full = basis_with_identity(basis)
    flat = full.reshape(full.shape[0], -1)
    return n * (flat @ flat.T)


def quadratic_forms(eps: np.ndarray, basis: np.ndarray) -> np.ndarray:
    """Per-cluster ``eps_i' W_k eps_i`` for k = 0..K, shape ``(n, K + 1)``."""
    out = np.empty((eps.shape[0], basis.shape[0] + 1))
    out[:, 0] = np.einsum("ij,ij->i", eps, eps)
    for k, W in enumerate(basis, start=1):
        out[:, k] = np.einsum("ij,ij->i", eps @ W, eps)
    return out


def psi_beta(ds: Dataset, spec: ModelSpec, state: ParameterState, terms: CellTerms | None = None,
             Sinv: np.ndarray | None = None) -> np.ndarray:
    """Mean estimating function, a vector of length p*d."""
    terms = terms or cell_terms(ds, spec, state)
    if Sinv is None:
        Sinv = sigma_inverse(state.alpha, ds.basis)
    T = terms.eps @ Sinv
    return ((terms.c * T).T @ ds.X).ravel()


def psi_alpha(ds: Dataset, spec: ModelSpec, state: ParameterState, terms: CellTerms | None = None,
              gram: np.ndarray | None = None) -> np.ndarray:
    """Correlation estimating function, a vector of length K+1."""
    terms = terms or cell_terms(ds, spec, state)
    if gram is None:
        gram = trace_gram(ds.basis, ds.n)
    return quadratic_forms(terms.eps, ds.basis).sum(axis=0) - gram @ state.alpha


def psi(ds: Dataset, spec: ModelSpec, state: ParameterState) -> np.ndarray:
    terms = cell_terms(ds, spec, state)
    return np.concatenate([psi_beta(ds, spec, state, terms), psi_alpha(ds, spec, state, terms)])


def q_loss_from_eps(eps: np.ndarray, alpha, basis: np.ndarray) -> float:
    S = sigma_matrix(alpha, basis)
    sq = np.einsum("ij,ij->i", eps, eps)
    cross = np.einsum("ij,ij->i", eps @ S, eps)
    n = eps.shape[0]
    return float(np.sum(sq**2) - 2.0 * np.sum(cross) + n * np.sum(S * S))


def q_loss(ds: Dataset, spec: ModelSpec, state: ParameterState) -> float:
    """``sum_i ||eps_i eps_i' - Sigma(alpha)||_F^2``."""
    return q_loss_from_eps(pearson_residuals(ds, spec, state), state.alpha, ds.basis)


def _design_blocks(weights: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Rows ``(w[i, 1] x_i, ..., w[i, p] x_i)``, shape ``(n, p*d)``."""
    n, p = weights.shape
    return (weights[:, :, None] * X[:, None, :]).reshape(n, p * X.shape[1])


def fisher_info(ds: Dataset, spec: ModelSpec, state: ParameterState, terms: CellTerms | None = None,
                Sinv: np.ndarray | None = None) -> np.ndarray:
    """Expected derivative of psi_beta, ``-D' A^{-1/2} Sigma~^{-1} A^{-1/2} D``.

    Block (j1, j2) is ``-Sinv[j1, j2] * sum_i c_ij1 c_ij2 x_i x_i'``.
    """
    terms = terms or cell_terms(ds, spec, state)
    if Sinv is None:
        Sinv = sigma_inverse(state.alpha, ds.basis)
    Z = _design_blocks(terms.c, ds.X)
    d = ds.d
    J = -(Z.T @ Z) * np.kron(Sinv, np.ones((d, d)))
    return 0.5 * (J + J.T)


def score_contributions(ds: Dataset, spec: ModelSpec, state: ParameterState,
                        terms: CellTerms | None = None) -> np.ndarray:
    """Per-cluster psi_i, shape ``(n, p*d + K + 1)``; rows sum to psi."""
    terms = terms or cell_terms(ds, spec, state)
    Sinv = sigma_inverse(state.alpha, ds.basis)
    T = terms.eps @ Sinv
    sb = _design_blocks(terms.c * T, ds.X)
    G = trace_gram(ds.basis, 1)
    sa = quadratic_forms(terms.eps, ds.basis) - (G @ state.alpha)[None, :]
    return np.hstack([sb, sa])


def psi_beta_jacobian(ds: Dataset, spec: ModelSpec, state: ParameterState,
                      terms: CellTerms | None = None, Sinv: np.ndarray | None = None) -> np.ndarray:
    """Observed ``d psi_beta / d beta'``, the beta block of :func:`psi_jacobian`."""
    terms = terms or cell_terms(ds, spec, state)
    if Sinv is None:
        Sinv = sigma_inverse(state.alpha, ds.basis)
    X, p, d = ds.X, ds.p, ds.d
    B = (_design_blocks(terms.c, X).T @ _design_blocks(terms.deps(), X)) * np.kron(Sinv, np.ones((d, d)))
    diag_w = terms.dc() * (terms.eps @ Sinv)
    for j in range(p):
        sl = slice(j * d, (j + 1) * d)
        B[sl, sl] += (X * diag_w[:, j:j + 1]).T @ X
    return B


def psi_jacobian(ds: Dataset, spec: ModelSpec, state: ParameterState,
                 terms: CellTerms | None = None) -> np.ndarray:
    """Analytic ``d psi / d vartheta'`` at ``state`` with phi held fixed.

    This is the observed (not expected) derivative; it is the bread of the
    sandwich covariance.
    """
    terms = terms or cell_terms(ds, spec, state)
    X, basis = ds.X, ds.basis
    n, p, d, K = ds.n, ds.p, ds.d, ds.K
    Sinv = sigma_inverse(state.alpha, basis)
    c, de = terms.c, terms.deps()
    T = terms.eps @ Sinv
    pd = p * d
    B = np.zeros((pd + K + 1, pd + K + 1))
    B[:pd, :pd] = psi_beta_jacobian(ds, spec, state, terms, Sinv)

    full = basis_with_identity(basis)
    for k, W in enumerate(full):
        U = T @ W @ Sinv
        B[:pd, pd + k] = -((c * U).T @ X).ravel()
        B[pd + k, :pd] = 2.0 * (((terms.eps @ W) * de).T @ X).ravel()
    B[pd:, pd:] = -trace_gram(basis, n)
    return B
