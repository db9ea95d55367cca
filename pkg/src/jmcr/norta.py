"""NORTA machinery for discrete margins.

A discrete response with cdf F is generated as ``Y = #{y : Z > tau_y}``
where ``tau_y = Phi^{-1}(F(y))`` and Z is standard normal.  For two such
responses driven by latent normals with correlation r, Mehler's expansion
gives the exact series

    Cov(Y1, Y2) = sum_{k>=1} a_k b_k r^k,
    a_k = sum_y phi(tau_y) He_{k-1}(tau_y) / sqrt(k!),

so the response-scale correlation is a power series in r whose
coefficients are cheap to compute for every cell at once.  Matching a
target correlation is then a monotone scalar root problem per pair.
Bernoulli margins have a single threshold and use the closed-form
bivariate normal orthant probability instead.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import special, stats

from .errors import InfeasibleCorrelationError, InvalidDesignError

log = logging.getLogger(__name__)

MAX_SUPPORT = 5000
KMAX = 300
SERIES_TOL = 1e-8


@dataclass
class Thresholds:
    """Finite latent thresholds of every cell, stored flat.

    ``values[q]`` belongs to cell ``cell[q]`` (a flat index into ``shape``);
    thresholds equal to +inf (where F(y) = 1) are dropped.
    """

    values: np.ndarray
    cell: np.ndarray
    shape: tuple

    def dense(self) -> np.ndarray:
        """Thresholds padded with +inf to ``shape + (T,)``."""
        ncell = int(np.prod(self.shape))
        counts = np.bincount(self.cell, minlength=ncell)
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        pos = np.arange(self.values.size) - starts[self.cell]
        out = np.full((ncell, max(int(counts.max(initial=0)), 1)), np.inf)
        out[self.cell, pos] = self.values
        return out.reshape(self.shape + (out.shape[1],))


def margin_distribution(family: str, mu: np.ndarray, phi=None):
    """Frozen scipy distribution for the margins (negative binomial has Var = mu + phi mu^2)."""
    mu = np.asarray(mu, dtype=float)
    if family == "bernoulli":
        return stats.bernoulli(mu)
    if family == "poisson":
        return stats.poisson(mu)
    if family == "negbin":
        size = 1.0 / np.broadcast_to(np.asarray(phi, dtype=float), mu.shape)
        return stats.nbinom(size, size / (size + mu))
    raise InvalidDesignError(f"no discrete margin for family {family!r}")


def margin_thresholds(family: str, mu: np.ndarray, phi: np.ndarray | None = None,
                      tail: float = 1e-12) -> Thresholds:
    """Latent thresholds ``tau_y = Phi^{-1}(F(y))`` with ``tail < F(y) < 1 - tail``.

    Thresholds outside that band carry negligible weight in the covariance
    series.  Sampling does not use them (it inverts the cdf directly).
    """
    mu = np.asarray(mu, dtype=float)
    if family == "bernoulli":
        return Thresholds(stats.norm.ppf(1.0 - mu).ravel(), np.arange(mu.size), mu.shape)
    dist = margin_distribution(family, mu, phi)
    top = dist.ppf(1.0 - tail).astype(int).ravel()
    if top.max(initial=0) > MAX_SUPPORT:
        raise InvalidDesignError(f"margin support too large ({top.max()} points); means are extreme")
    lengths = top + 1
    cell = np.repeat(np.arange(mu.size), lengths)
    starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    y = np.arange(cell.size) - starts[cell]
    flat_mu = mu.ravel()[cell]
    if family == "poisson":
        F = stats.poisson.cdf(y, flat_mu)
    else:
        size = 1.0 / np.broadcast_to(np.asarray(phi, dtype=float), mu.shape).ravel()[cell]
        F = stats.nbinom.cdf(y, size, size / (size + flat_mu))
    # a threshold with min(F, 1 - F) = q moves the series coefficients by at most sqrt(q)
    keep = (F > tail) & (F < 1.0 - tail)
    return Thresholds(stats.norm.ppf(F[keep]), cell[keep], mu.shape)


def margin_sd(family: str, mu: np.ndarray, phi=None) -> np.ndarray:
    mu = np.asarray(mu, dtype=float)
    if family == "bernoulli":
        return np.sqrt(mu * (1 - mu))
    if family == "poisson":
        return np.sqrt(mu)
    return np.sqrt(mu + np.asarray(phi) * mu * mu)


def hermite_coefficients(tau: Thresholds, kmax: int, sd: np.ndarray | None = None,
                         rmax: float = 1.0, tol: float = 0.0) -> np.ndarray:
    """Normalised series coefficients ``a_1..a_K`` for each cell, ``shape + (K,)``.

    Without ``sd`` exactly ``K = kmax`` terms are returned.  With ``sd`` the
    recursion stops at the first K for which the truncation error of every
    pairwise series, bounded by ``rmax^{K+1} * max_cell(1 - sum_k a_k^2 / sd^2)``,
    is below ``tol``.
    """
    t = tau.values
    dens = np.exp(-0.5 * t * t) / np.sqrt(2 * np.pi)
    ncell = int(np.prod(tau.shape))
    out = np.empty((ncell, kmax))
    var = None if sd is None else np.asarray(sd, dtype=float).ravel() ** 2
    energy = np.zeros(ncell)
    h_prev = np.zeros_like(t)
    h = np.ones_like(t)  # He_0 / sqrt(0!)
    for k in range(1, kmax + 1):
        out[:, k - 1] = np.bincount(tau.cell, weights=dens * h, minlength=ncell) / np.sqrt(k)
        if var is not None:
            energy += out[:, k - 1] ** 2
            resid = float(np.max(1.0 - energy / var))
            if rmax ** (k + 1) * max(resid, 0.0) < tol:
                return out[:, :k].reshape(tau.shape + (k,))
        h, h_prev = (t * h - np.sqrt(k - 1) * h_prev) / np.sqrt(k), h
    return out.reshape(tau.shape + (kmax,))


def _pairs(p: int) -> tuple[np.ndarray, np.ndarray]:
    return np.triu_indices(p, 1)


def _to_matrix(rp: np.ndarray, p: int, diag: float = 1.0) -> np.ndarray:
    """Fill symmetric ``(m, p, p)`` matrices from upper-triangle pair values ``(m, P)``."""
    ia, ib = _pairs(p)
    out = np.empty((rp.shape[0], p, p))
    out[:, ia, ib] = rp
    out[:, ib, ia] = rp
    out[:, np.arange(p), np.arange(p)] = diag
    return out


def _series(prod: np.ndarray, r: np.ndarray, with_derivative: bool = True):
    """Evaluate ``f(r) = sum_k c_k r^k`` by Horner, ``prod[..., k-1] = c_k``."""
    kmax = prod.shape[-1]
    P = prod[..., kmax - 1].copy()
    dP = np.zeros_like(P)
    for k in range(kmax - 2, -1, -1):
        if with_derivative:
            dP *= r
            dP += P
        P *= r
        P += prod[..., k]
    f = r * P
    return (f, P + r * dP) if with_derivative else (f, None)


def _pair_products(scaled: np.ndarray) -> np.ndarray:
    ia, ib = _pairs(scaled.shape[1])
    return scaled[:, ia, :] * scaled[:, ib, :]


def bvn_upper(a: np.ndarray, b: np.ndarray, r: np.ndarray) -> np.ndarray:
    """``P(Z1 > a, Z2 > b)`` for standard bivariate normals with correlation r.

    Uses Owen's T function, which is exact and vectorised.
    """
    h, k = np.broadcast_arrays(-np.asarray(a, dtype=float), -np.asarray(b, dtype=float))
    r = np.broadcast_to(r, h.shape)
    # Owen's formula divides by h and k; nudge exact zeros
    h = np.where(h == 0, 1e-12, h)
    k = np.where(k == 0, 1e-12, k)
    s = np.sqrt(1.0 - r * r)
    cdf = 0.5 * (special.ndtr(h) + special.ndtr(k))
    cdf = cdf - special.owens_t(h, (k - r * h) / (h * s)) - special.owens_t(k, (h - r * k) / (k * s))
    return cdf - 0.5 * ((h * k < 0) | ((h * k == 0) & (h + k < 0)))


def _bvn_density(a, b, r):
    s2 = 1.0 - r * r
    return np.exp(-(a * a - 2 * r * a * b + b * b) / (2 * s2)) / (2 * np.pi * np.sqrt(s2))


def _bernoulli_pair_fn(tau: np.ndarray, sd: np.ndarray):
    """Exact Pearson correlation of each Bernoulli pair, and its r-derivative, as a function of r."""
    ia, ib = _pairs(tau.shape[1])
    a, b = tau[:, ia], tau[:, ib]
    base = special.ndtr(-a) * special.ndtr(-b)
    den = sd[:, ia] * sd[:, ib]

    def fn(r, with_derivative=True):
        f = (bvn_upper(a, b, r) - base) / den
        return (f, _bvn_density(a, b, r) / den) if with_derivative else (f, None)

    return fn


def bernoulli_pair_range(mu_a, mu_b, cap: float = 0.999) -> tuple[np.ndarray, np.ndarray]:
    """Smallest and largest correlation of two Bernoulli margins reachable with latent ``|r| <= cap``."""
    mu_a, mu_b = np.broadcast_arrays(np.asarray(mu_a, dtype=float), np.asarray(mu_b, dtype=float))
    a, b = special.ndtri(1.0 - mu_a), special.ndtri(1.0 - mu_b)
    den = np.sqrt(mu_a * (1 - mu_a) * mu_b * (1 - mu_b))
    base = mu_a * mu_b
    return (bvn_upper(a, b, -cap) - base) / den, (bvn_upper(a, b, cap) - base) / den


def _solve_pairs(fn, target: np.ndarray, p: int, cap: float, tol: float, max_iter: int,
                 start=None, offset: int = 0) -> np.ndarray:
    """Safeguarded Newton for ``fn(r) = target`` on every pair, returns ``(m, P)``."""
    ia, ib = _pairs(p)
    f_lo, _ = fn(np.full(1, -cap), False)
    f_hi, _ = fn(np.full(1, cap), False)
    T = np.broadcast_to(target[ia, ib], f_lo.shape)
    bad = (T < f_lo - 1e-12) | (T > f_hi + 1e-12)
    if bad.any():
        i, q = (int(v) for v in np.argwhere(bad)[0])
        a, b = int(ia[q]), int(ib[q])
        raise InfeasibleCorrelationError(
            f"target correlation {T[i, q]:.4f} for responses ({a}, {b}) in cluster {i + offset} "
            f"is outside the attainable range [{f_lo[i, q]:.4f}, {f_hi[i, q]:.4f}]",
            pair=(i + offset, a, b),
        )
    lo = np.full(T.shape, -cap)
    hi = np.full(T.shape, cap)
    r = np.zeros(T.shape) if start is None else np.clip(start, -0.5 * cap, 0.5 * cap)
    for _ in range(max_iter):
        f, df = fn(r, True)
        diff = f - T
        if np.max(np.abs(diff), initial=0.0) < tol:
            break
        lo = np.where(diff < 0, r, lo)
        hi = np.where(diff > 0, r, hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            rn = r - diff / df
        out = ~np.isfinite(rn) | (rn <= lo) | (rn >= hi)
        r = np.where(out, 0.5 * (lo + hi), rn)
    return r


def _chunks(m: int, per_row: int, budget: int = 16_000_000):
    step = max(1, budget // max(per_row, 1))
    for start in range(0, m, step):
        yield slice(start, min(m, start + step))


def latent_correlations(coef: np.ndarray, sd: np.ndarray, target: np.ndarray,
                        cap: float = 0.9, tol: float = 1e-10, max_iter: int = 100) -> np.ndarray:
    """Solve for the latent correlation of every pair in every cluster.

    Parameters
    ----------
    coef : (m, p, kmax) series coefficients from :func:`hermite_coefficients`.
    sd : (m, p) response standard deviations.
    target : (p, p) target response-scale correlation.
    cap : latent correlations are searched in ``[-cap, cap]``; the truncated
        series is reliable there.

    Returns
    -------
    (m, p, p) latent correlation matrices.

    Raises
    ------
    InfeasibleCorrelationError
        A target lies outside what the pair can attain for ``|r| <= cap``.
    """
    m, p, kmax = coef.shape
    ia, ib = _pairs(p)
    scaled = coef / sd[..., None]
    out = np.empty((m, ia.size))
    for sl in _chunks(m, ia.size * kmax):
        prod = _pair_products(scaled[sl])
        with np.errstate(divide="ignore", invalid="ignore"):
            start = np.where(np.abs(prod[..., 0]) > 1e-14, target[ia, ib] / prod[..., 0], 0.0)
        out[sl] = _solve_pairs(lambda r, deriv: _series(prod, r, deriv), target, p, cap, tol,
                               max_iter, start, offset=sl.start)
    return _to_matrix(out, p)


def bernoulli_latent_correlations(tau: np.ndarray, sd: np.ndarray, target: np.ndarray,
                                  cap: float = 0.999, tol: float = 1e-10,
                                  max_iter: int = 100) -> np.ndarray:
    """Exact latent correlations for Bernoulli margins with thresholds ``tau`` ``(m, p)``."""
    p = tau.shape[1]
    r = _solve_pairs(_bernoulli_pair_fn(tau, sd), target, p, cap, tol, max_iter)
    return _to_matrix(r, p)


def latent_bound(coef1: np.ndarray, sd: np.ndarray, target: np.ndarray, cap: float) -> float:
    """Generous upper bound on the latent |r| from the first-order series term."""
    ia, ib = _pairs(target.shape[0])
    a1 = coef1 / sd
    c1 = np.abs(a1[:, ia] * a1[:, ib])
    with np.errstate(divide="ignore", invalid="ignore"):
        r0 = np.where(c1 > 1e-14, np.abs(target[ia, ib])[None] / c1, 0.0)
    return min(cap, 1.3 * float(np.max(r0, initial=0.0)) + 0.05)


def repair_correlation(C: np.ndarray, floor: float = 1e-6) -> tuple[np.ndarray, int]:
    """Clip the eigenvalues of non-PD latent matrices and restore a unit diagonal."""
    w = np.linalg.eigvalsh(C)[:, 0]
    broken = np.flatnonzero(w < 1e-8)
    for i in broken:
        vals, V = np.linalg.eigh(C[i])
        M = (V * np.maximum(vals, floor)) @ V.T
        s = np.sqrt(np.diag(M))
        C[i] = M / np.outer(s, s)
    if broken.size:
        log.warning("repaired %d non-positive-definite latent correlation matrices", broken.size)
    return C, int(broken.size)


def norta_sample(family: str, mu: np.ndarray, phi: np.ndarray | None, target: np.ndarray,
                 xi: np.ndarray, cap: float = 0.9, bernoulli_cap: float = 0.999) -> np.ndarray:
    """Draw one response vector per row of ``mu`` with correlation ``target``.

    ``xi`` holds the standard normal draws, shape ``(n, p)``.  Rows with
    identical margins share one latent solve.  Bernoulli pairs are matched
    exactly through the bivariate normal orthant probability, so their
    latent search range ``bernoulli_cap`` can be close to one; count margins
    use the Hermite series and ``cap``.
    """
    n, p = mu.shape
    phi_rows = None if phi is None else np.broadcast_to(phi, mu.shape)
    key = mu if phi_rows is None else np.concatenate([mu, phi_rows], axis=1)
    uniq, inverse = np.unique(key, axis=0, return_inverse=True)
    inverse = np.asarray(inverse).ravel()
    umu = uniq[:, :p]
    uphi = None if phi_rows is None else uniq[:, p:]
    tau = margin_thresholds(family, umu, uphi)
    sd = margin_sd(family, umu, uphi)
    if family == "bernoulli":
        C = bernoulli_latent_correlations(tau.values.reshape(sd.shape), sd, target, cap=bernoulli_cap)
    else:
        coef1 = hermite_coefficients(tau, 1)[..., 0]
        rmax = latent_bound(coef1, sd, target, cap)
        coef = hermite_coefficients(tau, KMAX, sd, rmax, SERIES_TOL)
        C = latent_correlations(coef, sd, target, cap)
    try:
        L = np.linalg.cholesky(C)
    except np.linalg.LinAlgError:
        C, _ = repair_correlation(C)
        L = np.linalg.cholesky(C)
    z = np.einsum("ijk,ik->ij", L[inverse], xi)
    # inverse cdf of Phi(z): the smallest y with F(y) >= Phi(z), i.e. #{y : z > tau_y}
    u = special.ndtr(z)
    phi_full = None if phi_rows is None else phi_rows
    return margin_distribution(family, mu, phi_full).ppf(u).astype(float)


def attainable_range(family: str, mu: np.ndarray, phi: np.ndarray | None,
                     cap: float = 0.9, bernoulli_cap: float = 0.999) -> tuple[np.ndarray, np.ndarray]:
    """Smallest and largest response correlation per pair, ``(m, p, p)`` each."""
    tau = margin_thresholds(family, mu, phi)
    sd = margin_sd(family, mu, phi)
    p = sd.shape[1]
    if family == "bernoulli":
        fn = _bernoulli_pair_fn(tau.values.reshape(sd.shape), sd)
        lo, hi = fn(-bernoulli_cap, False)[0], fn(bernoulli_cap, False)[0]
    else:
        coef = hermite_coefficients(tau, KMAX, sd, cap, SERIES_TOL)
        prod = _pair_products(coef / sd[..., None])
        lo, hi = _series(prod, -cap, False)[0], _series(prod, cap, False)[0]
    return _to_matrix(lo, p, -1.0), _to_matrix(hi, p, 1.0)


def norta_feasible(family: str, mu: np.ndarray, phi: np.ndarray | None, target: np.ndarray,
                   margin: float = 0.0, **caps) -> bool:
    """True when every off-diagonal target (inflated by ``1 + margin``) is attainable."""
    lo, hi = attainable_range(family, mu, phi, **caps)
    off = ~np.eye(target.shape[0], dtype=bool)
    T = (1.0 + margin) * target[off]
    return bool(np.all((T >= lo[:, off]) & (T <= hi[:, off])))
