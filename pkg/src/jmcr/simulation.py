"""Correlated multivariate data generation and Monte Carlo studies.

Designs are nested in p: the first rows of beta0, phi0 and the trait table
do not depend on how many responses the design has, and replicate r of
every cell draws its covariates and latent normals from the same stream
``default_rng([seed, r])``.  Cells that differ only in p therefore share
common random numbers for their leading responses.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd
from scipy import special, stats

from .errors import InvalidDesignError, JMCRError
from .inference import infer, region_statistic, wald_intervals
from .model import Dataset, ModelSpec, correlation_matrix, inverse_link_derivs, FAMILY_DEFAULTS
from .norta import bernoulli_pair_range, norta_sample
from .similarity import TraitColumn, TraitKind, build_basis
from .solver import SolverConfig, fit

log = logging.getLogger(__name__)

FAMILIES = ("gaussian", "bernoulli", "poisson", "negbin")
DEFAULT_TRAITS = ("quantitative", "quantitative", "qualitative", "qualitative", "qualitative")

# (intercept range, slope range, phi range) per family
_COEF_RANGES = {
    "gaussian": ((-1.0, 1.0), (-1.0, 1.0), (0.5, 2.0)),
    "bernoulli": ((-0.5, 0.5), (-0.5, 0.5), (1.0, 1.0)),
    "poisson": ((0.5, 1.5), (-0.5, 0.5), (1.0, 1.0)),
    "negbin": ((0.5, 1.5), (-0.5, 0.5), (0.2, 1.0)),
}


class StudyFailedError(JMCRError):
    """More than 5% of the replicates in a cell failed."""

    def __init__(self, message: str, report: "StudyReport"):
        super().__init__(message)
        self.report = report


@dataclass
class SimDesign:
    """One cell of a simulation study.

    ``basis`` is the similarity basis used to generate the data;
    ``w_noise > 0`` perturbs it (symmetrically, off-diagonal only) before
    fitting, to study misspecified similarity measures.
    """

    family: str
    n: int
    beta0: np.ndarray
    rho0: np.ndarray
    phi0: np.ndarray
    basis: np.ndarray
    basis_labels: list[str] = field(default_factory=list)
    reps: int = 500
    seed: int = 0
    w_noise: float = 0.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise InvalidDesignError(f"unknown family {self.family!r}")
        if self.reps < 1:
            raise InvalidDesignError("reps must be at least 1")
        self.beta0 = np.atleast_2d(np.asarray(self.beta0, dtype=float))
        self.rho0 = np.atleast_1d(np.asarray(self.rho0, dtype=float))
        self.phi0 = np.atleast_1d(np.asarray(self.phi0, dtype=float))
        self.basis = np.asarray(self.basis, dtype=float)
        if self.basis.shape != (self.K, self.p, self.p):
            raise InvalidDesignError("basis shape does not match (K, p, p)")
        try:
            np.linalg.cholesky(self.R0)
        except np.linalg.LinAlgError:
            raise InvalidDesignError("rho0 does not give a positive definite R(rho0)") from None
        if not self.basis_labels:
            self.basis_labels = [f"W{k + 1}" for k in range(self.K)]

    @property
    def p(self) -> int:
        return self.beta0.shape[0]

    @property
    def d(self) -> int:
        return self.beta0.shape[1]

    @property
    def K(self) -> int:
        return self.rho0.size

    @property
    def R0(self) -> np.ndarray:
        return correlation_matrix(self.rho0, self.basis)

    def spec(self) -> ModelSpec:
        return ModelSpec.for_family(self.family, self.n, self.p, self.d, self.K)

    def label(self) -> dict:
        return {"family": self.family, "n": self.n, "p": self.p}


def synthetic_traits(p: int, kinds: Sequence[str], seed: int, levels: int = 3) -> list[TraitColumn]:
    """Standard normal quantitative traits and uniform ``levels``-level qualitative ones."""
    u = np.random.default_rng([seed, 0]).random((p, len(kinds)))
    cols = []
    for k, kind in enumerate(kinds):
        kind = TraitKind(kind)
        vals = stats.norm.ppf(u[:, k]) if kind is TraitKind.QUANTITATIVE else np.floor(levels * u[:, k]).astype(int)
        cols.append(TraitColumn(kind, vals, f"trait{k + 1}"))
    return cols


def make_design(family: str, n: int, p: int, d: int = 4, K: int = 5, reps: int = 500,
                seed: int = 0, trait_seed: int = 2024, trait_kinds: Sequence[str] | None = None,
                rho_range: tuple[float, float] = (0.0, 0.1), min_eig: float = 0.1,
                rho0=None, w_noise: float = 0.0) -> SimDesign:
    """Build a design with synthetic traits, coefficients and rho0.

    rho0 is drawn uniformly from ``rho_range`` (unless given) and shrunk by
    factors of 0.9 until the smallest eigenvalue of R(rho0) is at least
    ``min_eig``.
    """
    kinds = list(trait_kinds) if trait_kinds is not None else list(DEFAULT_TRAITS[:K])
    if len(kinds) != K:
        kinds = [DEFAULT_TRAITS[k % len(DEFAULT_TRAITS)] for k in range(K)]
    sb = build_basis(synthetic_traits(p, kinds, trait_seed)) if K else None
    basis = sb.mats if K else np.zeros((0, p, p))
    labels = sb.labels if K else []
    (i_lo, i_hi), (s_lo, s_hi), (f_lo, f_hi) = _COEF_RANGES[family]
    u = np.random.default_rng([trait_seed, 1]).random((p, d))
    beta0 = s_lo + (s_hi - s_lo) * u
    beta0[:, 0] = i_lo + (i_hi - i_lo) * u[:, 0]
    phi0 = f_lo + (f_hi - f_lo) * np.random.default_rng([trait_seed, 2]).random(p)
    if rho0 is None:
        rho0 = rho_range[0] + (rho_range[1] - rho_range[0]) * np.random.default_rng([trait_seed, 3]).random(K)
    rho0 = np.asarray(rho0, dtype=float)
    for _ in range(200):
        if np.linalg.eigvalsh(correlation_matrix(rho0, basis))[0] >= min_eig:
            break
        rho0 = 0.9 * rho0
    if family == "bernoulli" and K:
        beta0 = _feasible_beta(beta0, correlation_matrix(rho0, basis))
    return SimDesign(family, n, beta0, rho0, phi0, basis, labels, reps, seed, w_noise)


def _feasible_beta(beta0: np.ndarray, R0: np.ndarray, radius: float = 6.0,
                   margin: float = 0.02) -> np.ndarray:
    """Shrink Bernoulli coefficients until NORTA can match R0 for any likely covariate.

    Bernoulli pairs with very different means cannot reach moderate
    correlations, so the coefficients shrink towards zero (means towards
    0.5).  The largest attainable correlation of a pair is governed by the
    difference of its linear predictors and the smallest by their sum.
    With standard normal covariates each is normal, so every pair is
    checked at ``radius`` standard deviations along both directions.
    """
    p = beta0.shape[0]
    ia, ib = np.triu_indices(p, 1)
    keep = R0[ia, ib] != 0
    ia, ib, T = ia[keep], ib[keep], (1.0 + margin) * R0[ia, ib][keep]
    beta = beta0.copy()
    for _ in range(100):
        ok = True
        for sign in (-1.0, 1.0):
            ok &= _pairs_feasible(beta, ia, ib, T, sign, radius)
        if ok:
            return beta
        beta = 0.9 * beta
    raise InvalidDesignError("could not find coefficients for which NORTA matching is feasible")


def _pairs_feasible(beta, ia, ib, T, sign, radius) -> bool:
    # extreme rows along the direction of slope_a - sign * slope_b, both ends
    u = beta[ia, 1:] - sign * beta[ib, 1:]
    norm = np.linalg.norm(u, axis=1, keepdims=True)
    u = np.divide(u, norm, out=np.zeros_like(u), where=norm > 0)
    for end in (-radius, radius):
        x = end * u
        eta_a = beta[ia, 0] + np.sum(x * beta[ia, 1:], axis=1)
        eta_b = beta[ib, 0] + np.sum(x * beta[ib, 1:], axis=1)
        lo, hi = bernoulli_pair_range(special.expit(eta_a), special.expit(eta_b))
        if np.any(T > hi) or np.any(T < lo):
            return False
    return True


def _covariates(n: int, d: int, rng: np.random.Generator) -> np.ndarray:
    return np.column_stack([np.ones(n), rng.standard_normal((n, d - 1))])


def _latent_normals(n: int, p: int, rng: np.random.Generator) -> np.ndarray:
    # drawn response-major so column j does not depend on p
    return rng.standard_normal((p, n)).T


def true_means(design: SimDesign, X: np.ndarray) -> np.ndarray:
    link, _ = FAMILY_DEFAULTS[design.family]
    return inverse_link_derivs(link, X @ design.beta0.T)[0]


def generate_gaussian(design: SimDesign, rng: np.random.Generator) -> Dataset:
    """``Y_i = mu_i + A_i^{1/2} L_0 xi_i`` with ``R(rho0) = L_0 L_0'``."""
    X = _covariates(design.n, design.d, rng)
    xi = _latent_normals(design.n, design.p, rng)
    try:
        L = np.linalg.cholesky(design.R0)
    except np.linalg.LinAlgError:
        raise InvalidDesignError("R(rho0) is not positive definite") from None
    Y = true_means(design, X) + np.sqrt(design.phi0)[None, :] * (xi @ L.T)
    return Dataset(Y, X, design.basis, basis_labels=list(design.basis_labels))


def generate_discrete(design: SimDesign, rng: np.random.Generator) -> Dataset:
    """Bernoulli, Poisson or negative binomial responses via NORTA.

    The latent correlation of every pair in every cluster is matched so that
    the response-scale Pearson correlation equals R(rho0).
    """
    if design.family == "gaussian":
        raise InvalidDesignError("use generate_gaussian for Gaussian designs")
    X = _covariates(design.n, design.d, rng)
    xi = _latent_normals(design.n, design.p, rng)
    mu = true_means(design, X)
    phi = design.phi0[None, :] if design.family == "negbin" else None
    Y = norta_sample(design.family, mu, phi, design.R0, xi)
    return Dataset(Y, X, design.basis, basis_labels=list(design.basis_labels))


def generate(design: SimDesign, rng: np.random.Generator) -> Dataset:
    if design.family == "gaussian":
        return generate_gaussian(design, rng)
    return generate_discrete(design, rng)


def perturb_basis(basis: np.ndarray, noise: float, rng: np.random.Generator) -> np.ndarray:
    E = noise * rng.standard_normal(basis.shape)
    E = 0.5 * (E + np.swapaxes(E, -1, -2))
    out = basis + E
    for W in out:
        np.fill_diagonal(W, 0.0)
    return out


def mse_beta(beta_hat, beta0) -> float:
    return float(np.mean((np.asarray(beta_hat) - np.asarray(beta0)) ** 2))


def mse_rho(rho_hat, rho0) -> float:
    rho0 = np.asarray(rho0)
    return float(np.mean((np.asarray(rho_hat) - rho0) ** 2)) if rho0.size else 0.0


def run_replicate(design: SimDesign, rep: int, config: SolverConfig | None = None,
                  subset: Sequence[int] | None = None, level: float = 0.95) -> dict:
    """Generate, fit and (if ``subset`` is given) assess coverage for one replicate."""
    rng = np.random.default_rng([design.seed, rep])
    rec = {**design.label(), "rep": rep}
    t0 = time.perf_counter()
    try:
        ds = generate(design, rng)
        if design.w_noise > 0:
            ds.basis = perturb_basis(ds.basis, design.w_noise, np.random.default_rng([design.seed, rep, 7]))
        res = fit(ds, design.spec(), config)
    except JMCRError as exc:
        rec.update(failed=True, converged=False, error=f"{type(exc).__name__}: {exc}")
        rec["seconds"] = time.perf_counter() - t0
        return rec
    st = res.state
    rec.update(
        failed=not res.converged,
        converged=res.converged,
        error="" if res.converged else res.message,
        outer_iters=res.outer_iters,
        unconstrained_in_A_plus=res.unconstrained_in_A_plus,
        min_eig_R=res.min_eig_R,
        mse_beta=mse_beta(st.beta, design.beta0),
        mse_rho=mse_rho(st.rho, design.rho0),
        beta11=float(st.beta[0, 0]),
    )
    for k, r in enumerate(st.rho):
        rec[f"rho{k + 1}"] = float(r)
    if subset is not None and res.converged:
        try:
            inf = infer(ds, res, level=level, subset=subset)
            rs = region_statistic(inf.theta, inf.theta_cov, subset, design.p, design.d,
                                  design.K, design.beta0, design.rho0)
        except JMCRError as exc:
            rec.update(failed=True, error=f"{type(exc).__name__}: {exc}")
        else:
            cb, cr = rs.covered(level)
            truth = np.concatenate([design.beta0[list(subset)].ravel(), design.rho0])
            est = np.concatenate([st.beta[list(subset)].ravel(), st.rho])
            tab = wald_intervals(est, inf.theta_cov_S, level=level)
            hit = (tab["lower"].to_numpy() <= truth) & (truth <= tab["upper"].to_numpy())
            qd = len(subset) * design.d
            rec.update(
                stat_beta=rs.stat_beta, stat_rho=rs.stat_rho,
                cover_beta_region=cb, cover_rho_region=cr,
                cover_beta_pointwise=float(hit[:qd].mean()),
                cover_rho_pointwise=float(hit[qd:].mean()) if design.K else float("nan"),
            )
    rec["seconds"] = time.perf_counter() - t0
    return rec


@dataclass
class StudyReport:
    """Per-replicate records plus one summary row per design cell."""

    replicates: pd.DataFrame
    cells: list[dict]
    designs: list[dict] = field(default_factory=list)
    subset: list[int] | None = None
    level: float = 0.95

    @property
    def ok(self) -> bool:
        return all(c["failed_fraction"] <= 0.05 for c in self.cells)

    def cell(self, **match) -> dict:
        for c in self.cells:
            if all(c[k] == v for k, v in match.items()):
                return c
        raise KeyError(match)

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "subset": None if self.subset is None else [s + 1 for s in self.subset],
            "level": self.level,
            "cells": self.cells,
            "designs": self.designs,
        }

    def write(self, outdir, plots: bool = False) -> list:
        from pathlib import Path

        out = Path(outdir)
        out.mkdir(parents=True, exist_ok=True)
        paths = [out / "report.json", out / "replicates.csv"]
        paths[0].write_text(json.dumps(_jsonable(self.to_dict()), indent=2, sort_keys=True) + "\n")
        cols = [c for c in self.replicates.columns if c != "seconds"]
        self.replicates[cols].to_csv(paths[1], index=False, float_format="%.10g", lineterminator="\n")
        if plots:
            paths.append(plot_mse(self, out / "mse.svg"))
        return paths


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        return None if not np.isfinite(obj) else float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _summarise(design: SimDesign, recs: list[dict], coverage: bool) -> dict:
    df = pd.DataFrame(recs)
    good = df[~df["failed"]]
    m = max(len(good), 1)
    cell = {
        **design.label(),
        "reps": len(df),
        "failed": int(df["failed"].sum()),
        "failed_fraction": float(df["failed"].mean()),
        "mse_beta": float(good["mse_beta"].mean()) if len(good) else float("nan"),
        "mse_beta_se": float(good["mse_beta"].std(ddof=1) / np.sqrt(m)) if len(good) > 1 else float("nan"),
        "mse_rho": float(good["mse_rho"].mean()) if len(good) else float("nan"),
        "mse_rho_se": float(good["mse_rho"].std(ddof=1) / np.sqrt(m)) if len(good) > 1 else float("nan"),
        "unconstrained_in_A_plus_rate": float(good["unconstrained_in_A_plus"].mean()) if len(good) else float("nan"),
        "seconds_mean": float(df["seconds"].mean()),
        "seconds_max": float(df["seconds"].max()),
    }
    if coverage:
        for key in ("cover_beta_region", "cover_rho_region", "cover_beta_pointwise", "cover_rho_pointwise"):
            cell[key] = float(good[key].astype(float).mean()) if key in good and len(good) else float("nan")
    return cell


def run_study(designs: Sequence[SimDesign], config: SolverConfig | None = None,
              subset: Sequence[int] | None = None, level: float = 0.95, n_jobs: int = 1,
              raise_on_failure: bool = True) -> StudyReport:
    """Fit every replicate of every design and aggregate.

    Coverage is assessed when ``subset`` (0-based response indices) is given.
    Results depend only on the designs and their seeds, not on ``n_jobs``.
    """
    all_recs, cells = [], []
    for design in designs:
        reps = range(design.reps)
        if n_jobs == 1:
            recs = [run_replicate(design, r, config, subset, level) for r in reps]
        else:
            from joblib import Parallel, delayed

            recs = Parallel(n_jobs=n_jobs)(
                delayed(run_replicate)(design, r, config, subset, level) for r in reps
            )
        cells.append(_summarise(design, recs, subset is not None))
        all_recs.extend(recs)
        log.info("cell %s done: %s", design.label(), cells[-1])
    df = pd.DataFrame(all_recs)
    report = StudyReport(df, cells, [_design_dict(d) for d in designs],
                         None if subset is None else list(subset), level)
    if raise_on_failure and not report.ok:
        bad = [c for c in cells if c["failed_fraction"] > 0.05]
        raise StudyFailedError(f"{len(bad)} cell(s) had more than 5% failed replicates", report)
    return report


def run_mse_study(designs: Sequence[SimDesign], config: SolverConfig | None = None,
                  n_jobs: int = 1, **kw) -> StudyReport:
    return run_study(designs, config, None, n_jobs=n_jobs, **kw)


def run_coverage_study(designs: Sequence[SimDesign], subset: Sequence[int] = range(5),
                       level: float = 0.95, config: SolverConfig | None = None,
                       n_jobs: int = 1, **kw) -> StudyReport:
    return run_study(designs, config, list(subset), level, n_jobs=n_jobs, **kw)


def _design_dict(design: SimDesign) -> dict:
    return {
        **design.label(),
        "d": design.d,
        "K": design.K,
        "reps": design.reps,
        "seed": design.seed,
        "w_noise": design.w_noise,
        "beta0": design.beta0,
        "rho0": design.rho0,
        "phi0": design.phi0,
    }


def plot_mse(report: StudyReport, path):
    """Averaged MSE against n: beta on the top row, rho below, one column per family."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    cells = pd.DataFrame(report.cells)
    fams = list(dict.fromkeys(cells["family"]))
    fig, axes = plt.subplots(2, len(fams), figsize=(4 * len(fams), 6), squeeze=False)
    for col, fam in enumerate(fams):
        sub = cells[cells["family"] == fam]
        for row, key in enumerate(("mse_beta", "mse_rho")):
            ax = axes[row, col]
            for p, grp in sub.groupby("p"):
                grp = grp.sort_values("n")
                ax.plot(grp["n"], grp[key], marker="o", label=f"p = {p}")
            ax.set_yscale("log")
            ax.set_xlabel("n")
            ax.set_title(f"{fam}: {'MSE(beta)' if row == 0 else 'MSE(rho)'}")
            ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def design_to_json(design: SimDesign) -> dict:
    return _jsonable(asdict(design))
