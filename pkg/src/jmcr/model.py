"""Model specification, link and variance functions, and the mean matrix.

Responses are indexed ``Y[i, j]`` with ``i`` the cluster and ``j`` the
response.  Each response has its own coefficient row ``beta[j]`` and its own
dispersion ``phi[j]``; the link and variance family are shared by the whole
fit.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .errors import DegenerateVarianceError, InvalidInputError

ETA_CLAMP = 30.0
MU_FLOOR = 1e-10


class Link(str, Enum):
    IDENTITY = "identity"
    LOG = "log"
    LOGIT = "logit"


class VarianceFamily(str, Enum):
    CONSTANT = "constant"  # phi
    PROPORTIONAL = "proportional"  # phi * mu
    QUADRATIC = "quadratic"  # mu + phi * mu^2
    BINARY = "binary"  # phi * mu * (1 - mu)


ALLOWED_PAIRS = {
    (Link.IDENTITY, VarianceFamily.CONSTANT),
    (Link.LOG, VarianceFamily.PROPORTIONAL),
    (Link.LOG, VarianceFamily.QUADRATIC),
    (Link.LOGIT, VarianceFamily.BINARY),
}

# response family -> (link, variance) used for fitting that family
FAMILY_DEFAULTS = {
    "gaussian": (Link.IDENTITY, VarianceFamily.CONSTANT),
    "bernoulli": (Link.LOGIT, VarianceFamily.BINARY),
    "poisson": (Link.LOG, VarianceFamily.PROPORTIONAL),
    "negbin": (Link.LOG, VarianceFamily.QUADRATIC),
}


@dataclass(frozen=True)
class ModelSpec:
    """Link/variance pair and problem dimensions.

    Parameters
    ----------
    link, variance : Link, VarianceFamily
        Must be one of the four standard pairings (identity/constant,
        log/proportional, log/quadratic, logit/binary).
    n, p, d, K : int
        Clusters, responses, covariates (including the intercept) and
        similarity matrices.
    family : str, optional
        Response family name, informational only.
    """

    link: Link
    variance: VarianceFamily
    n: int
    p: int
    d: int
    K: int
    family: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "link", Link(self.link))
        object.__setattr__(self, "variance", VarianceFamily(self.variance))
        if (self.link, self.variance) not in ALLOWED_PAIRS:
            raise InvalidInputError(
                f"unsupported link/variance pair ({self.link.value}, {self.variance.value})"
            )
        if self.n < 2 or self.p < 2 or self.d < 1 or self.K < 0:
            raise InvalidInputError(
                f"need n >= 2, p >= 2, d >= 1, K >= 0; got n={self.n}, p={self.p}, "
                f"d={self.d}, K={self.K}"
            )

    @classmethod
    def for_family(cls, family: str, n: int, p: int, d: int, K: int) -> "ModelSpec":
        try:
            link, variance = FAMILY_DEFAULTS[family]
        except KeyError:
            raise InvalidInputError(f"unknown response family {family!r}") from None
        return cls(link, variance, n, p, d, K, family=family)


@dataclass
class ParameterState:
    """Current values of (beta, alpha, rho, phi).

    ``beta`` is ``(p, d)`` with row ``j`` the coefficients of response ``j``;
    ``alpha`` has length ``K + 1`` and ``rho = alpha[1:] / alpha[0]``.
    """

    beta: np.ndarray
    alpha: np.ndarray
    phi: np.ndarray
    rho: np.ndarray = field(default=None)

    def __post_init__(self):
        self.beta = np.atleast_2d(np.asarray(self.beta, dtype=float))
        self.alpha = np.atleast_1d(np.asarray(self.alpha, dtype=float))
        self.phi = np.atleast_1d(np.asarray(self.phi, dtype=float))
        if self.phi.shape != (self.beta.shape[0],):
            raise InvalidInputError("phi must have one entry per response")
        if np.any(~(self.phi > 0)):
            raise InvalidInputError("dispersion parameters must be strictly positive")
        if self.rho is None:
            self.rho = rho_from_alpha(self.alpha) if self.alpha[0] > 0 else np.full(
                self.alpha.size - 1, np.nan
            )
        else:
            self.rho = np.atleast_1d(np.asarray(self.rho, dtype=float))

    @classmethod
    def initial(cls, p: int, d: int, K: int) -> "ParameterState":
        alpha = np.zeros(K + 1)
        alpha[0] = 1.0
        return cls(np.zeros((p, d)), alpha, np.ones(p))

    def with_(self, **kw) -> "ParameterState":
        if "alpha" in kw and "rho" not in kw:
            kw["rho"] = None
        return replace(self, **kw)

    @property
    def theta(self) -> np.ndarray:
        """Stacked (beta_1, ..., beta_p, rho)."""
        return np.concatenate([self.beta.ravel(), self.rho])

    @property
    def vartheta(self) -> np.ndarray:
        """Stacked (beta_1, ..., beta_p, alpha)."""
        return np.concatenate([self.beta.ravel(), self.alpha])


@dataclass
class Dataset:
    """Responses, covariates and similarity basis for one fit.

    Parameters
    ----------
    Y : (n, p) array
    X : (n, d) array whose first column is all ones.
    basis : (K, p, p) array
        Symmetric similarity matrices with zero diagonal.
    """

    Y: np.ndarray
    X: np.ndarray
    basis: np.ndarray
    response_names: list[str] | None = None
    covariate_names: list[str] | None = None
    basis_labels: list[str] | None = None

    def __post_init__(self):
        self.Y = np.asarray(self.Y, dtype=float)
        self.X = np.asarray(self.X, dtype=float)
        basis = np.asarray(self.basis, dtype=float)
        if basis.size == 0:
            basis = np.zeros((0, self.Y.shape[1], self.Y.shape[1]))
        self.basis = basis
        n, p = self.Y.shape
        if self.X.ndim != 2 or self.X.shape[0] != n:
            raise InvalidInputError(f"X must have {n} rows, got shape {self.X.shape}")
        if self.basis.ndim != 3 or self.basis.shape[1:] != (p, p):
            raise InvalidInputError(f"basis must have shape (K, {p}, {p})")
        if not np.all(np.isfinite(self.Y)):
            i, j = np.argwhere(~np.isfinite(self.Y))[0]
            raise InvalidInputError(f"missing or non-finite response at ({i}, {j})")
        if not np.all(np.isfinite(self.X)):
            raise InvalidInputError("non-finite covariate value")
        if not np.all(self.X[:, 0] == 1.0):
            raise InvalidInputError("first covariate column must be the intercept (all ones)")
        if self.response_names is None:
            self.response_names = [f"y{j + 1}" for j in range(p)]
        if self.covariate_names is None:
            self.covariate_names = ["Intercept"] + [f"x{l}" for l in range(1, self.X.shape[1])]
        if self.basis_labels is None:
            self.basis_labels = [f"W{k + 1}" for k in range(self.K)]

    @property
    def n(self) -> int:
        return self.Y.shape[0]

    @property
    def p(self) -> int:
        return self.Y.shape[1]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def K(self) -> int:
        return self.basis.shape[0]

    def spec(self, link, variance, family=None) -> ModelSpec:
        return ModelSpec(link, variance, self.n, self.p, self.d, self.K, family=family)


def _link_of(spec_or_link) -> Link:
    return spec_or_link.link if isinstance(spec_or_link, ModelSpec) else Link(spec_or_link)


def _variance_of(spec_or_var) -> VarianceFamily:
    if isinstance(spec_or_var, ModelSpec):
        return spec_or_var.variance
    return VarianceFamily(spec_or_var)


def link_apply(spec, mu):
    """Evaluate g(mu)."""
    link = _link_of(spec)
    mu = np.asarray(mu, dtype=float)
    if link is Link.IDENTITY:
        out = mu.copy()
    elif link is Link.LOG:
        if np.any(~(mu > 0)):
            raise InvalidInputError("log link requires mu > 0")
        out = np.log(mu)
    else:
        if np.any(~((mu > 0) & (mu < 1))):
            raise InvalidInputError("logit link requires 0 < mu < 1")
        out = np.log(mu) - np.log1p(-mu)
    return out[()] if out.ndim == 0 else out


def link_inverse(spec, eta):
    """Evaluate g^{-1}(eta), clamping |eta| at 30 for log and logit."""
    mu, _, _, _ = inverse_link_derivs(_link_of(spec), eta)
    return mu[()] if mu.ndim == 0 else mu


def inverse_link_derivs(link: Link, eta):
    """Return ``(mu, dmu/deta, d2mu/deta2, n_clamped)`` elementwise."""
    eta = np.asarray(eta, dtype=float)
    if link is Link.IDENTITY:
        return eta.copy(), np.ones_like(eta), np.zeros_like(eta), 0
    clamped = np.abs(eta) > ETA_CLAMP
    n_clamped = int(np.count_nonzero(clamped))
    if n_clamped:
        eta = np.clip(eta, -ETA_CLAMP, ETA_CLAMP)
    if link is Link.LOG:
        mu = np.exp(eta)
        return mu, mu, mu, n_clamped
    # logistic, written to stay accurate in both tails
    e = np.exp(-np.abs(eta))
    mu = np.where(eta >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    d1 = e / (1.0 + e) ** 2
    d2 = d1 * (1.0 - 2.0 * mu)
    return mu, d1, d2, n_clamped


def variance_apply(spec, mu, phi):
    """Evaluate h(mu; phi).

    Raises
    ------
    InvalidInputError
        If ``phi <= 0``.
    DegenerateVarianceError
        If ``mu`` lies outside the mean range of the family (for example
        ``mu = 0`` under the proportional family).
    """
    var = _variance_of(spec)
    mu = np.asarray(mu, dtype=float)
    phi = np.asarray(phi, dtype=float)
    if np.any(~(phi > 0)):
        raise InvalidInputError("phi must be positive")
    if var in (VarianceFamily.PROPORTIONAL, VarianceFamily.QUADRATIC) and np.any(~(mu > 0)):
        raise DegenerateVarianceError(f"{var.value} variance needs mu > 0")
    if var is VarianceFamily.BINARY and np.any(~((mu > 0) & (mu < 1))):
        raise DegenerateVarianceError("binary variance needs 0 < mu < 1")
    h, _ = variance_derivs(var, mu, phi)
    return h[()] if h.ndim == 0 else h


def variance_derivs(var: VarianceFamily, mu, phi):
    """Return ``(h, dh/dmu)`` with the mean floored at 1e-10 where needed.

    No domain checks; callers that need them use :func:`variance_apply`.
    """
    mu = np.asarray(mu, dtype=float)
    if var is VarianceFamily.CONSTANT:
        h = np.broadcast_to(phi, mu.shape).astype(float)
        return h, np.zeros_like(h)
    if var is VarianceFamily.PROPORTIONAL:
        m = np.maximum(mu, MU_FLOOR)
        return phi * m, np.broadcast_to(phi, m.shape) * (mu > MU_FLOOR)
    if var is VarianceFamily.QUADRATIC:
        m = np.maximum(mu, MU_FLOOR)
        return m + phi * m * m, (1.0 + 2.0 * phi * m) * (mu > MU_FLOOR)
    m = np.clip(mu, MU_FLOOR, 1.0 - MU_FLOOR)
    return phi * m * (1.0 - m), phi * (1.0 - 2.0 * m)


def linear_predictor(beta: np.ndarray, X: np.ndarray) -> np.ndarray:
    return X @ np.asarray(beta, dtype=float).T


def mean_matrix(spec, beta: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Return the ``(n, p)`` matrix ``mu[i, j] = g^{-1}(x_i' beta_j)``."""
    beta = np.atleast_2d(beta)
    if beta.shape[1] != X.shape[1]:
        raise InvalidInputError(f"beta has {beta.shape[1]} columns, X has {X.shape[1]}")
    mu, _, _, n_clamped = inverse_link_derivs(_link_of(spec), linear_predictor(beta, X))
    if n_clamped:
        warnings.warn(
            f"{n_clamped} linear predictor(s) clamped to |eta| <= {ETA_CLAMP}",
            RuntimeWarning,
            stacklevel=2,
        )
    return mu


def sigma_matrix(alpha, basis: np.ndarray) -> np.ndarray:
    """Sigma(alpha) = alpha_0 I + sum_k alpha_k W_k."""
    alpha = np.asarray(alpha, dtype=float)
    p = basis.shape[1]
    S = alpha[0] * np.eye(p)
    if basis.shape[0]:
        S = S + np.tensordot(alpha[1:], basis, axes=1)
    return S


def correlation_matrix(rho, basis: np.ndarray) -> np.ndarray:
    """R(rho) = I + sum_k rho_k W_k."""
    return sigma_matrix(np.concatenate([[1.0], np.asarray(rho, dtype=float)]), basis)


def rho_from_alpha(alpha) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=float)
    return alpha[1:] / alpha[0]
