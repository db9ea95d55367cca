"""File formats: CSV data, JSON run configuration and result artifacts.

Row numbers in error messages are 1-based line numbers of the file, so the
header of a headered CSV is row 1 and the first data row is row 2.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from .errors import JMCRError
from .inference import InferenceResult
from .model import FAMILY_DEFAULTS, Dataset, Link, ModelSpec, VarianceFamily
from .similarity import TraitColumn, TraitKind, build_basis
from .solver import FitResult, SolverConfig

SCHEMA_VERSION = 1


class ConfigError(JMCRError):
    """Unreadable, malformed or inconsistent configuration or data file."""


# --------------------------------------------------------------------------
# CSV readers

def _read_rows(path: Path) -> list[list[str]]:
    try:
        with open(path, newline="") as fh:
            return [row for row in csv.reader(fh)]
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read file ({exc.strerror})") from None
    except csv.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _to_float(text: str, path: Path, row: int, col: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise ConfigError(f"{path}: row {row}, column {col!r}: cannot parse {text!r} as a number") from None


def read_numeric_csv(path, header: bool = True) -> tuple[list[str], np.ndarray]:
    """Strictly parse a rectangular numeric CSV.

    Every row must have as many fields as the first row.  Blank lines are
    skipped.  Without a header the column names are ``c1, c2, ...``.
    """
    path = Path(path)
    rows = _read_rows(path)
    numbered = [(i + 1, r) for i, r in enumerate(rows) if any(f.strip() for f in r)]
    if not numbered:
        raise ConfigError(f"{path}: file is empty")
    if header:
        names = [f.strip() for f in numbered[0][1]]
        body = numbered[1:]
    else:
        names = [f"c{j + 1}" for j in range(len(numbered[0][1]))]
        body = numbered
    width = len(names)
    if not body:
        raise ConfigError(f"{path}: no data rows")
    out = np.empty((len(body), width))
    for r, (lineno, row) in enumerate(body):
        if len(row) != width:
            raise ConfigError(f"{path}: row {lineno}: expected {width} fields, found {len(row)}")
        for j, text in enumerate(row):
            out[r, j] = _to_float(text.strip(), path, lineno, names[j])
    return names, out


def read_traits_csv(path) -> tuple[list[str] | None, list[TraitColumn]]:
    """Trait table: one row per response, header cells ``name:kind``.

    An optional column without a kind annotation (conventionally
    ``response``) holds response labels.  Quantitative entries must be
    numeric; qualitative entries are kept as strings.
    """
    path = Path(path)
    rows = [(i + 1, r) for i, r in enumerate(_read_rows(path)) if any(f.strip() for f in r)]
    if len(rows) < 2:
        raise ConfigError(f"{path}: trait table needs a header and at least one row")
    head = [h.strip() for h in rows[0][1]]
    label_col, specs = None, []
    for j, h in enumerate(head):
        if ":" not in h:
            if label_col is not None:
                raise ConfigError(f"{path}: row 1: more than one column lacks a ':kind' annotation")
            label_col = j
            continue
        name, kind = (s.strip() for s in h.rsplit(":", 1))
        try:
            specs.append((j, name, TraitKind(kind.lower())))
        except ValueError:
            raise ConfigError(
                f"{path}: row 1: unknown trait kind {kind!r} for {name!r} "
                "(expected quantitative or qualitative)"
            ) from None
    if not specs:
        raise ConfigError(f"{path}: no trait columns")
    body = rows[1:]
    for lineno, row in body:
        if len(row) != len(head):
            raise ConfigError(f"{path}: row {lineno}: expected {len(head)} fields, found {len(row)}")
    labels = [row[label_col].strip() for _, row in body] if label_col is not None else None
    cols = []
    for j, name, kind in specs:
        if kind is TraitKind.QUANTITATIVE:
            vals = [_to_float(row[j].strip(), path, lineno, name) for lineno, row in body]
        else:
            vals = [row[j].strip() for _, row in body]
        cols.append(TraitColumn(kind, vals, name))
    return labels, cols


def read_matrix_csv(path) -> np.ndarray:
    """Dense square matrix without header."""
    _, M = read_numeric_csv(path, header=False)
    if M.shape[0] != M.shape[1]:
        raise ConfigError(f"{path}: matrix must be square, got {M.shape[0]} x {M.shape[1]}")
    return M


# --------------------------------------------------------------------------
# configuration

@dataclass
class DataConfig:
    responses: Path
    covariates: Path | None = None
    traits: Path | None = None
    w_matrices: list[Path] = field(default_factory=list)
    standardize_quantitative: bool = True
    add_intercept: bool = True


@dataclass
class SimulationConfig:
    families: list[str] = field(default_factory=lambda: ["gaussian"])
    n: list[int] = field(default_factory=lambda: [50])
    p: list[int] = field(default_factory=lambda: [10])
    d: int = 4
    K: int = 5
    reps: int = 100
    trait_seed: int = 2024
    w_noise: float = 0.0
    coverage: bool = False
    subset: list[int] = field(default_factory=lambda: [1, 2, 3, 4, 5])
    level: float = 0.95
    plots: bool = False


@dataclass
class RunConfig:
    """Parsed JSON run configuration.  ``subset`` is 1-based as written."""

    path: Path
    family: str | None = None
    link: Link | None = None
    variance: VarianceFamily | None = None
    data: DataConfig | None = None
    solver: SolverConfig = field(default_factory=SolverConfig)
    level: float = 0.95
    subset: list[int] | None = None
    output_dir: Path = Path("out")
    seed: int = 0
    simulation: SimulationConfig | None = None

    def link_variance(self) -> tuple[Link, VarianceFamily]:
        if self.link is not None:
            return self.link, self.variance
        return FAMILY_DEFAULTS[self.family]


def _check_keys(section: dict, allowed, where: str):
    extra = set(section) - set(allowed)
    if extra:
        raise ConfigError(f"{where}: unknown key(s) {sorted(extra)}")


def _resolve(base: Path, value) -> Path:
    p = Path(value)
    return p if p.is_absolute() else base / p


def load_config(path) -> RunConfig:
    """Read and validate a JSON run configuration.

    Relative paths are taken relative to the configuration file.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read configuration ({exc.strerror})") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: row {exc.lineno}: invalid JSON ({exc.msg})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: configuration must be a JSON object")
    _check_keys(raw, {"schema_version", "model", "data", "solver", "inference", "output_dir",
                      "seed", "simulation"}, str(path))
    version = raw.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"{path}: unsupported schema_version {version!r}")
    base = path.parent
    cfg = RunConfig(path=path)

    model = raw.get("model", {})
    _check_keys(model, {"family", "link", "variance"}, "model")
    if "link" in model or "variance" in model:
        try:
            cfg.link, cfg.variance = Link(model["link"]), VarianceFamily(model["variance"])
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"model: need a valid link and variance ({exc})") from None
        cfg.family = model.get("family")
    elif "family" in model:
        if model["family"] not in FAMILY_DEFAULTS:
            raise ConfigError(f"model: unknown family {model['family']!r}")
        cfg.family = model["family"]

    if "data" in raw:
        data = raw["data"]
        _check_keys(data, {f.name for f in fields(DataConfig)}, "data")
        if "responses" not in data:
            raise ConfigError("data: 'responses' is required")
        cfg.data = DataConfig(
            responses=_resolve(base, data["responses"]),
            covariates=_resolve(base, data["covariates"]) if data.get("covariates") else None,
            traits=_resolve(base, data["traits"]) if data.get("traits") else None,
            w_matrices=[_resolve(base, w) for w in data.get("w_matrices") or []],
            standardize_quantitative=bool(data.get("standardize_quantitative", True)),
            add_intercept=bool(data.get("add_intercept", True)),
        )
        if cfg.data.traits and cfg.data.w_matrices:
            raise ConfigError("data: give either 'traits' or 'w_matrices', not both")
        if cfg.family is None and cfg.link is None:
            raise ConfigError("model: 'family' or 'link' + 'variance' is required")

    solver = raw.get("solver", {})
    _check_keys(solver, {f.name for f in fields(SolverConfig)}, "solver")
    try:
        cfg.solver = SolverConfig(**solver)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"solver: {exc}") from None

    inf = raw.get("inference", {})
    _check_keys(inf, {"level", "subset"}, "inference")
    cfg.level = float(inf.get("level", 0.95))
    if not 0 < cfg.level < 1:
        raise ConfigError("inference: level must lie in (0, 1)")
    if inf.get("subset") is not None:
        cfg.subset = [int(s) for s in inf["subset"]]
        if any(s < 1 for s in cfg.subset):
            raise ConfigError("inference: subset entries are 1-based response indices")
    cfg.output_dir = _resolve(base, raw.get("output_dir", "out"))
    cfg.seed = int(raw.get("seed", 0))

    if "simulation" in raw:
        sim = raw["simulation"]
        _check_keys(sim, {f.name for f in fields(SimulationConfig)}, "simulation")
        sc = SimulationConfig(**sim)
        for key in ("families", "n", "p"):
            val = getattr(sc, key)
            setattr(sc, key, list(val) if isinstance(val, (list, tuple)) else [val])
        bad = [f for f in sc.families if f not in FAMILY_DEFAULTS]
        if bad:
            raise ConfigError(f"simulation: unknown families {bad}")
        if sc.reps < 1:
            raise ConfigError("simulation: reps must be at least 1")
        if not 0 < sc.level < 1:
            raise ConfigError("simulation: level must lie in (0, 1)")
        cfg.simulation = sc
    return cfg


# --------------------------------------------------------------------------
# dataset assembly

@dataclass
class LoadedData:
    dataset: Dataset
    basis_source: str
    traits: list[TraitColumn] | None = None


def _check_exists(paths):
    for p in paths:
        if p is not None and not Path(p).exists():
            raise ConfigError(f"{p}: file not found")


def load_basis(dc: DataConfig, p: int, response_names: list[str]) -> tuple[np.ndarray, list[str], list | None]:
    """Similarity matrices from a trait table or from dense W files (not rescaled)."""
    if dc.traits is not None:
        labels, cols = read_traits_csv(dc.traits)
        if len(cols[0].values) != p:
            raise ConfigError(f"{dc.traits}: {len(cols[0].values)} trait rows for {p} responses")
        if labels is not None:
            if sorted(labels) != sorted(response_names):
                raise ConfigError(f"{dc.traits}: response labels do not match the response columns")
            order = [labels.index(r) for r in response_names]
            cols = [TraitColumn(c.kind, [c.values[i] for i in order], c.label) for c in cols]
        sb = build_basis(cols, standardize_quantitative=dc.standardize_quantitative)
        return sb.mats, sb.labels, cols
    mats = []
    for w in dc.w_matrices:
        M = read_matrix_csv(w)
        if M.shape != (p, p):
            raise ConfigError(f"{w}: matrix is {M.shape[0]} x {M.shape[1]}, expected {p} x {p}")
        mats.append(M)
    labels = [Path(w).stem for w in dc.w_matrices]
    return (np.stack(mats) if mats else np.zeros((0, p, p))), labels, None


def load_dataset(cfg: RunConfig, validate: bool = True) -> LoadedData:
    """Read responses, covariates and basis named in the configuration.

    With ``validate=False`` the basis is not checked here, so that callers
    can list violations instead of stopping at the first.
    """
    dc = cfg.data
    if dc is None:
        raise ConfigError(f"{cfg.path}: no 'data' section")
    _check_exists([dc.responses, dc.covariates, dc.traits, *dc.w_matrices])
    ynames, Y = read_numeric_csv(dc.responses)
    n, p = Y.shape
    if dc.covariates is not None:
        xnames, X = read_numeric_csv(dc.covariates)
        if X.shape[0] != n:
            raise ConfigError(f"{dc.covariates}: {X.shape[0]} data rows but responses have {n}")
    else:
        xnames, X = [], np.empty((n, 0))
    if dc.add_intercept and not (X.shape[1] and np.all(X[:, 0] == 1.0)):
        X = np.column_stack([np.ones(n), X])
        xnames = ["Intercept"] + xnames
    basis, labels, traits = load_basis(dc, p, ynames)
    if validate:
        from .similarity import validate_basis

        report = validate_basis(basis, labels)
        if report:
            raise ValidationError(report)
    ds = Dataset(Y, X, basis, response_names=ynames, covariate_names=xnames, basis_labels=labels)
    return LoadedData(ds, "traits" if dc.traits else "w_matrices", traits)


class ValidationError(JMCRError):
    """Input data failed validation; ``violations`` lists every problem."""

    def __init__(self, violations: list[str]):
        super().__init__("; ".join(violations))
        self.violations = list(violations)


# --------------------------------------------------------------------------
# writers

def _clean(obj: Any):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj) if np.isfinite(obj) else None
    if isinstance(obj, Path):
        return str(obj)
    if hasattr(obj, "value") and isinstance(getattr(obj, "value"), str):
        return obj.value
    return obj


def write_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(json.dumps(_clean(obj), indent=2) + "\n")
    return path


def fit_to_dict(ds: Dataset, res: FitResult, seed: int | None = None) -> dict:
    st, spec = res.state, res.spec
    return {
        "schema_version": SCHEMA_VERSION,
        "model": {
            "family": spec.family,
            "link": spec.link.value,
            "variance": spec.variance.value,
            "n": spec.n, "p": spec.p, "d": spec.d, "K": spec.K,
        },
        "converged": res.converged,
        "message": res.message,
        "outer_iterations": res.outer_iters,
        "admm_invocations": res.admm_invocations,
        "unconstrained_in_A_plus": res.unconstrained_in_A_plus,
        "psi_beta_sup": res.psi_norms[0],
        "psi_alpha_sup": res.psi_norms[1],
        "min_eigenvalue_R": res.min_eig_R,
        "clamped_cells": res.n_clamped,
        "phi_at_bound": [ds.response_names[j] for j in res.phi_at_bound],
        "beta": {r: dict(zip(ds.covariate_names, row)) for r, row in zip(ds.response_names, st.beta)},
        "alpha": list(st.alpha),
        "rho": dict(zip(ds.basis_labels, st.rho)),
        "phi": dict(zip(ds.response_names, st.phi)),
        "seed": seed,
    }


def write_inference(outdir, inf: InferenceResult) -> list[Path]:
    out = Path(outdir)
    tab = inf.table
    csv_path = out / "inference.csv"
    tab.to_csv(csv_path, index=False, float_format="%.10g", lineterminator="\n")
    json_path = write_json(out / "inference.json", {
        "schema_version": SCHEMA_VERSION,
        "level": inf.level,
        "warnings": inf.warnings,
        "rows": tab.to_dict(orient="records"),
    })
    return [csv_path, json_path]


def summary_text(ds: Dataset, res: FitResult, inf: InferenceResult | None) -> str:
    st = res.state
    lines = [
        f"model: {res.spec.family or ''} link={res.spec.link.value} variance={res.spec.variance.value}",
        f"data: n={ds.n} clusters, p={ds.p} responses, d={ds.d} covariates, K={ds.K} similarity matrices",
        f"status: {res.message} ({res.outer_iters} outer iterations, {res.admm_invocations} ADMM solves)",
        f"smallest eigenvalue of R(rho): {res.min_eig_R:.4g}",
        "",
        "correlation regression:",
    ]
    if inf is not None:
        rho_rows = inf.table[inf.table["block"] == "rho"]
        lines.append(f"  {'term':<20}{'estimate':>12}{'se':>12}{'lower':>12}{'upper':>12}")
        for _, r in rho_rows.iterrows():
            flag = " *" if r["excludes_zero"] else ""
            lines.append(f"  {r['parameter']:<20}{r['estimate']:>12.4f}{r['se']:>12.4f}"
                         f"{r['lower']:>12.4f}{r['upper']:>12.4f}{flag}")
        beta_rows = inf.table[inf.table["block"] == "beta"]
        lines += ["", f"mean regression: {int(beta_rows['excludes_zero'].sum())} of {len(beta_rows)} "
                      f"intervals at level {inf.level:g} exclude zero (see inference.csv)"]
        lines += [f"warning: {w}" for w in inf.warnings]
    else:
        for lab, r in zip(ds.basis_labels, st.rho):
            lines.append(f"  {lab:<20}{r:>12.4f}")
    return "\n".join(lines) + "\n"


def write_fit_artifacts(outdir, ds: Dataset, res: FitResult, inf: InferenceResult | None,
                        seed: int | None = None) -> list[Path]:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [write_json(out / "fit.json", fit_to_dict(ds, res, seed))]
    if inf is not None:
        paths += write_inference(out, inf)
    summary = out / "summary.txt"
    summary.write_text(summary_text(ds, res, inf))
    return paths + [summary]


def write_dataset(outdir, ds: Dataset, traits: list[TraitColumn] | None = None) -> dict:
    """Write a dataset in the formats :func:`load_dataset` reads; returns the ``data`` config block."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(ds.Y, columns=ds.response_names).to_csv(
        out / "responses.csv", index=False, float_format="%.17g", lineterminator="\n")
    pd.DataFrame(ds.X[:, 1:], columns=ds.covariate_names[1:]).to_csv(
        out / "covariates.csv", index=False, float_format="%.17g", lineterminator="\n")
    block: dict = {"responses": "responses.csv", "covariates": "covariates.csv"}
    if traits is not None:
        cols = {"response": ds.response_names}
        for t in traits:
            cols[f"{t.label}:{t.kind.value}"] = list(t.values)
        pd.DataFrame(cols).to_csv(out / "traits.csv", index=False, lineterminator="\n")
        block["traits"] = "traits.csv"
    elif ds.K:
        names = []
        for lab, W in zip(ds.basis_labels, ds.basis):
            np.savetxt(out / f"{lab}.csv", W, delimiter=",", fmt="%.17g")
            names.append(f"{lab}.csv")
        block["w_matrices"] = names
    return block


def config_dict(cfg: RunConfig) -> dict:
    """JSON-ready view of a configuration (for provenance in outputs)."""
    d = asdict(cfg)
    d.pop("path", None)
    return _clean(d)
