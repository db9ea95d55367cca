"""Iterative estimation of (beta, alpha, phi).

One outer iteration runs Fisher scoring for beta to convergence with alpha
held fixed, refreshes the dispersions, and re-solves alpha in closed form.
If the closed-form alpha leaves the positive definite region, ADMM solves
the constrained least squares problem instead.  rho is reported as
``alpha[1:] / alpha[0]``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import linalg, optimize

from .equations import (
    cell_terms,
    fisher_info,
    psi_alpha,
    psi_beta,
    quadratic_forms,
    sigma_inverse,
    trace_gram,
)
from .errors import (
    CollinearBasisError,
    ConvergenceError,
    InvalidInputError,
    InvalidTransformError,
    JMCRError,
    SingularInformationError,
)
from .model import (
    Dataset,
    Link,
    ModelSpec,
    ParameterState,
    VarianceFamily,
    correlation_matrix,
    link_apply,
    sigma_matrix,
)
from .similarity import validate_basis

log = logging.getLogger(__name__)


@dataclass
class SolverConfig:
    """Numerical settings for :func:`fit`.

    ``estimate_phi=None`` estimates the dispersions for every family except
    the binary one, where phi stays at 1.  ``fixed_alpha`` skips the alpha
    update entirely (useful for fitting under a deliberately wrong working
    correlation).
    """

    gamma: float = 1.0
    nu: float = 1e-4
    tol_outer: float = 1e-6
    tol_admm: float = 1e-6
    max_outer: int = 200
    max_inner: int = 50
    max_admm: int = 2000
    max_halvings: int = 10
    admm_penalty: float = 1.0
    admm_adaptive: bool = False
    estimate_phi: bool | None = None
    phi_min: float = 1e-8
    phi_max: float = 1e8
    fixed_alpha: tuple | None = None

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise InvalidInputError("gamma must lie in (0, 1]")
        if self.nu <= 0 or self.tol_outer <= 0 or self.tol_admm <= 0:
            raise InvalidInputError("nu and tolerances must be positive")
        if self.admm_penalty <= 0:
            raise InvalidInputError("admm_penalty must be positive")
        if not 0 < self.phi_min < self.phi_max:
            raise InvalidInputError("need 0 < phi_min < phi_max")
        if min(self.max_outer, self.max_inner, self.max_admm) < 1:
            raise InvalidInputError("iteration caps must be at least 1")

    def phi_estimated(self, spec: ModelSpec) -> bool:
        if self.estimate_phi is None:
            return spec.variance is not VarianceFamily.BINARY
        return bool(self.estimate_phi)


@dataclass
class FitResult:
    """Outcome of :func:`fit`.

    ``psi_norms`` holds the final sup-norms of psi_beta and psi_alpha.  At a
    converged fit psi_beta is small relative to ``psi_scale``, which is
    ``max|J| * (1 + max|beta|)``: the size of psi_beta produced by a beta
    perturbation of relative size one.
    """

    state: ParameterState
    spec: ModelSpec
    converged: bool
    outer_iters: int
    admm_invocations: int
    psi_norms: tuple[float, float]
    psi_scale: float
    min_eig: float
    min_eig_R: float
    unconstrained_in_A_plus: bool
    n_clamped: int = 0
    phi_at_bound: list[int] = field(default_factory=list)
    history: list[dict] = field(default_factory=list)
    message: str = ""


class APlusCheck(NamedTuple):
    inside: bool
    min_eig: float


class AdmmResult(NamedTuple):
    alpha: np.ndarray
    n_iter: int
    primal: float
    dual: float
    history: list


# --------------------------------------------------------------------------
# beta step


def _solve_neg_definite(J: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve ``J x = rhs`` for negative definite J, with one jitter retry."""
    A = -J
    try:
        return -linalg.cho_solve(linalg.cho_factor(A, lower=True), rhs)
    except (linalg.LinAlgError, ValueError):
        pass
    jitter = 1e-8 * max(float(np.max(np.abs(np.diag(A)))), 1.0)
    try:
        return -linalg.cho_solve(linalg.cho_factor(A + jitter * np.eye(A.shape[0]), lower=True), rhs)
    except (linalg.LinAlgError, ValueError):
        raise SingularInformationError(
            "Fisher information is singular even after diagonal jitter; "
            "consider fewer covariates or responses"
        ) from None


def update_beta(ds: Dataset, spec: ModelSpec, state: ParameterState, gamma: float = 1.0,
                max_halvings: int = 10, Sinv: np.ndarray | None = None) -> np.ndarray:
    """One Fisher scoring step ``beta - gamma J^{-1} psi_beta``.

    The step is halved (up to ``max_halvings`` times) while it increases
    ``||psi_beta||_2``.  Returns the unchanged beta when no halving helps.
    """
    if Sinv is None:
        Sinv = sigma_inverse(state.alpha, ds.basis)
    terms = cell_terms(ds, spec, state)
    g = psi_beta(ds, spec, state, terms, Sinv)
    if not np.any(g):
        return state.beta.copy()
    g0 = np.linalg.norm(g)
    step = _solve_neg_definite(fisher_info(ds, spec, state, terms, Sinv), g)
    beta = _halve(ds, spec, state, step, g0, gamma, max_halvings, Sinv)
    return state.beta.copy() if beta is None else beta


def _halve(ds, spec, state, step, g0, gamma, max_halvings, Sinv) -> np.ndarray | None:
    step = step.reshape(state.beta.shape)
    for _ in range(max_halvings + 1):
        beta = state.beta - gamma * step
        try:
            g1 = np.linalg.norm(psi_beta(ds, spec, state.with_(beta=beta), Sinv=Sinv))
        except JMCRError:
            g1 = np.inf
        if g1 <= g0:
            return beta
        gamma *= 0.5
    return None


def _fit_beta(ds, spec, state, config: SolverConfig, Sinv) -> tuple[np.ndarray, int]:
    beta = state.beta
    for it in range(1, config.max_inner + 1):
        new = update_beta(ds, spec, state.with_(beta=beta), config.gamma, config.max_halvings, Sinv)
        change = np.max(np.abs(new - beta) / (1.0 + np.abs(beta)))
        beta = new
        if change < config.tol_outer:
            break
    return beta, it


# --------------------------------------------------------------------------
# alpha step


def _basis_of(obj) -> np.ndarray:
    return obj.basis if isinstance(obj, Dataset) else np.asarray(obj, dtype=float)


def _dependent_members(gram: np.ndarray) -> list[int]:
    w, V = np.linalg.eigh(gram)
    null = V[:, 0]
    return [int(k) for k in np.flatnonzero(np.abs(null) > 1e-6)]


def solve_alpha_unconstrained(basis, residuals: np.ndarray) -> np.ndarray:
    """Closed-form root of psi_alpha for the given residuals.

    Equivalent to the unconstrained minimiser of the Frobenius loss.
    ``basis`` may be a :class:`Dataset` or a ``(K, p, p)`` array.
    """
    basis = _basis_of(basis)
    n = residuals.shape[0]
    gram = trace_gram(basis, n)
    v = quadratic_forms(residuals, basis).sum(axis=0)
    try:
        cf = linalg.cho_factor(gram, lower=True)
        if np.min(np.diag(cf[0])) ** 2 < 1e-12 * np.max(np.diag(gram)):
            raise linalg.LinAlgError("ill-conditioned")
    except (linalg.LinAlgError, ValueError):
        dep = _dependent_members(gram)
        names = ", ".join("I" if k == 0 else f"W{k}" for k in dep)
        raise CollinearBasisError(f"similarity basis is collinear; dependent members: {names}",
                                  dep) from None
    return linalg.cho_solve(cf, v)


def check_A_plus(alpha, basis) -> APlusCheck:
    """Is Sigma(alpha) positive definite?

    Uses the relative threshold ``min_eig > 1e-12 * ||Sigma||_2``.
    """
    S = sigma_matrix(alpha, _basis_of(basis))
    w = np.linalg.eigvalsh(S)
    scale = max(np.max(np.abs(w)), np.finfo(float).tiny)
    return APlusCheck(bool(w[0] > 1e-12 * scale), float(w[0]))


def eigen_clip(M: np.ndarray, floor: float) -> np.ndarray:
    """Project a symmetric matrix onto ``{Delta : Delta >= floor * I}``."""
    w, V = np.linalg.eigh(0.5 * (M + M.T))
    return (V * np.maximum(w, floor)) @ V.T


def solve_alpha_admm(basis, residuals: np.ndarray, config: SolverConfig | None = None,
                     nu: float | None = None, alpha0: np.ndarray | None = None) -> AdmmResult:
    """Minimise the Frobenius loss over alpha subject to Sigma(alpha) >= nu I.

    The loss is divided by n, which leaves the minimiser unchanged and makes
    it ``||Sigma(alpha) - S_bar||_F^2`` up to a constant, with ``S_bar`` the
    average residual outer product.  With split variable Delta and scaled
    dual Lambda the iterations are

    * alpha-step: ``(2 + r) G alpha = 2 u + r t(Delta - Lambda)`` where
      ``G = tr(W_a W_b)``, ``u = t(S_bar)`` and ``t(M)_k = tr(W_k M)``;
    * Delta-step: eigenvalues of ``Sigma(alpha) + Lambda`` clipped at nu;
    * dual step: ``Lambda += Sigma(alpha) - Delta``.

    Iteration stops when ``||Sigma(alpha) - Delta||_F`` and
    ``r ||Delta - Delta_prev||_F`` both fall below ``tol_admm``.
    """
    config = config or SolverConfig()
    basis = _basis_of(basis)
    nu = config.nu if nu is None else nu
    n = residuals.shape[0]
    full = np.concatenate([np.eye(basis.shape[1])[None], basis])
    flat = full.reshape(full.shape[0], -1)
    G = flat @ flat.T
    Gcf = linalg.cho_factor(G, lower=True)
    u = quadratic_forms(residuals, basis).sum(axis=0) / n

    def t(M):
        return flat @ M.ravel()

    alpha = linalg.cho_solve(Gcf, u) if alpha0 is None else np.asarray(alpha0, float).copy()
    Delta = eigen_clip(sigma_matrix(alpha, basis), nu)
    Lam = np.zeros_like(Delta)
    r = config.admm_penalty
    history = []
    for it in range(1, config.max_admm + 1):
        alpha = linalg.cho_solve(Gcf, (2.0 * u + r * t(Delta - Lam)) / (2.0 + r))
        S = sigma_matrix(alpha, basis)
        prev = Delta
        Delta = eigen_clip(S + Lam, nu)
        Lam = Lam + S - Delta
        primal = float(np.linalg.norm(S - Delta))
        dual = float(r * np.linalg.norm(Delta - prev))
        history.append((primal, dual))
        if primal < config.tol_admm and dual < config.tol_admm:
            return AdmmResult(alpha, it, primal, dual, history)
        if config.admm_adaptive:
            if primal > 10 * dual:
                r *= 2.0
                Lam /= 2.0
            elif dual > 10 * primal:
                r /= 2.0
                Lam *= 2.0
    raise ConvergenceError(
        f"ADMM did not converge in {config.max_admm} iterations "
        f"(primal {history[-1][0]:.3g}, dual {history[-1][1]:.3g})",
        history,
    )


def _constrained_alpha(basis, eps, config: SolverConfig) -> tuple[np.ndarray, int]:
    """ADMM with the eigenvalue floor rescaled until R(rho) itself clears nu."""
    floor = config.nu
    calls = 0
    alpha = None
    for _ in range(6):
        res = solve_alpha_admm(basis, eps, config, nu=floor, alpha0=alpha)
        calls += 1
        alpha = res.alpha
        if alpha[0] <= 0:
            raise InvalidTransformError(f"ADMM returned alpha_0 = {alpha[0]:.3g} <= 0")
        min_r = np.linalg.eigvalsh(sigma_matrix(alpha, basis))[0] / alpha[0]
        if min_r >= config.nu - config.tol_admm:
            break
        floor = config.nu * alpha[0] * 1.001
    return alpha, calls


# --------------------------------------------------------------------------
# dispersion step


def update_dispersion(ds: Dataset, spec: ModelSpec, state: ParameterState,
                      config: SolverConfig | None = None) -> tuple[np.ndarray, list[int]]:
    """Moment estimate of each phi_j from ``mean_i r_ij^2 / h(mu_ij; phi_j) = 1``.

    Returns the new phi vector and the indices of responses whose root fell
    outside ``(phi_min, phi_max)`` and were set to the nearer bound.
    """
    config = config or SolverConfig()
    terms = cell_terms(ds, spec, state)
    r2 = (ds.Y - terms.mu) ** 2
    lo, hi = config.phi_min, config.phi_max
    at_bound: list[int] = []
    var = spec.variance
    if var is VarianceFamily.QUADRATIC:
        m = np.maximum(terms.mu, 1e-10)
        phi = np.empty(ds.p)
        for j in range(ds.p):
            rj, mj = r2[:, j], m[:, j]

            def f(ph, rj=rj, mj=mj):
                return np.mean(rj / (mj + ph * mj * mj)) - 1.0

            if f(lo) <= 0:
                phi[j] = lo
                at_bound.append(j)
            elif f(hi) >= 0:
                phi[j] = hi
                at_bound.append(j)
            else:
                phi[j] = optimize.brentq(f, lo, hi, xtol=1e-14, rtol=1e-13, maxiter=500)
        return phi, at_bound
    if var is VarianceFamily.CONSTANT:
        base = np.ones_like(r2)
    elif var is VarianceFamily.PROPORTIONAL:
        base = np.maximum(terms.mu, 1e-10)
    else:
        m = np.clip(terms.mu, 1e-10, 1 - 1e-10)
        base = m * (1 - m)
    raw = np.mean(r2 / base, axis=0)
    phi = np.clip(raw, lo, hi)
    at_bound = [int(j) for j in np.flatnonzero(phi != raw)]
    return phi, at_bound


# --------------------------------------------------------------------------
# driver


def initial_beta(ds: Dataset, spec: ModelSpec) -> np.ndarray:
    beta = np.zeros((ds.p, ds.d))
    ybar = ds.Y.mean(axis=0)
    if spec.link is Link.LOG:
        beta[:, 0] = link_apply(spec, np.maximum(ybar, 1e-2))
    elif spec.link is Link.LOGIT:
        beta[:, 0] = link_apply(spec, np.clip(ybar, 1e-2, 1 - 1e-2))
    return beta


def _rel_change(new, old) -> float:
    new, old = np.asarray(new), np.asarray(old)
    if new.size == 0:
        return 0.0
    return float(np.max(np.abs(new - old) / (1.0 + np.abs(old))))


def fit(ds: Dataset, spec: ModelSpec, config: SolverConfig | None = None,
        start: ParameterState | None = None) -> FitResult:
    """Jointly estimate beta, alpha (hence rho) and phi.

    Starts from per-response independence fits (alpha = e_0, phi = 1) unless
    ``start`` is given.  Stops when the largest relative change
    ``|new - old| / (1 + |old|)`` over beta, rho and phi drops below
    ``tol_outer``; otherwise returns with ``converged=False``.
    """
    config = config or SolverConfig()
    if (spec.n, spec.p, spec.d, spec.K) != (ds.n, ds.p, ds.d, ds.K):
        raise InvalidInputError("ModelSpec dimensions do not match the dataset")
    report = validate_basis(ds.basis, ds.basis_labels)
    if report:
        raise InvalidInputError("invalid similarity basis: " + "; ".join(report))
    estimate_phi = config.phi_estimated(spec)
    K = ds.K

    if start is None:
        state = ParameterState.initial(ds.p, ds.d, K).with_(beta=initial_beta(ds, spec))
        indep = sigma_inverse(state.alpha, ds.basis)
        beta, _ = _fit_beta(ds, spec, state, config, indep)
        state = state.with_(beta=beta)
    else:
        state = start
    if config.fixed_alpha is not None:
        alpha = np.asarray(config.fixed_alpha, dtype=float)
        if alpha.shape != (K + 1,):
            raise InvalidInputError(f"fixed_alpha must have length {K + 1}")
        state = state.with_(alpha=alpha)

    admm_calls = 0
    always_inside = True
    phi_bound: list[int] = []
    history = []
    converged = False
    it = 0
    for it in range(1, config.max_outer + 1):
        try:
            Sinv = sigma_inverse(state.alpha, ds.basis)
            beta, n_inner = _fit_beta(ds, spec, state, config, Sinv)
            new = state.with_(beta=beta)
            if estimate_phi:
                phi, phi_bound = update_dispersion(ds, spec, new, config)
                new = new.with_(phi=phi)
            used_admm = False
            if config.fixed_alpha is None:
                eps = cell_terms(ds, spec, new).eps
                alpha = solve_alpha_unconstrained(ds.basis, eps)
                if not check_A_plus(alpha, ds.basis).inside:
                    always_inside = False
                    alpha, calls = _constrained_alpha(ds.basis, eps, config)
                    admm_calls += calls
                    used_admm = True
                if alpha[0] <= 0:
                    raise InvalidTransformError(f"alpha_0 = {alpha[0]:.3g} <= 0")
                new = new.with_(alpha=alpha)
        except JMCRError as exc:
            exc.args = (f"outer iteration {it}: {exc.args[0]}",) + exc.args[1:]
            raise
        change = max(
            _rel_change(new.beta, state.beta),
            _rel_change(new.rho, state.rho),
            _rel_change(new.phi, state.phi),
        )
        history.append({"iter": it, "change": change, "inner": n_inner, "admm": used_admm})
        state = new
        if change < config.tol_outer:
            converged = True
            break

    terms = cell_terms(ds, spec, state)
    Sinv = sigma_inverse(state.alpha, ds.basis)
    pb = psi_beta(ds, spec, state, terms, Sinv)
    pa = psi_alpha(ds, spec, state, terms)
    J = fisher_info(ds, spec, state, terms, Sinv)
    w = np.linalg.eigvalsh(sigma_matrix(state.alpha, ds.basis))[0]
    wR = np.linalg.eigvalsh(correlation_matrix(state.rho, ds.basis))[0]
    msg = "converged" if converged else f"no convergence after {config.max_outer} outer iterations"
    if not converged:
        log.warning(msg)
    return FitResult(
        state=state,
        spec=spec,
        converged=converged,
        outer_iters=it,
        admm_invocations=admm_calls,
        psi_norms=(float(np.max(np.abs(pb))), float(np.max(np.abs(pa)))),
        psi_scale=float(np.max(np.abs(J)) * (1.0 + np.max(np.abs(state.beta)))),
        min_eig=float(w),
        min_eig_R=float(wR),
        unconstrained_in_A_plus=always_inside,
        n_clamped=terms.n_clamped,
        phi_at_bound=list(phi_bound),
        history=history,
        message=msg,
    )
