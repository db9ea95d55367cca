"""Command-line entry point: ``jmcr fit|simulate|validate <config.json>``.

Exit codes: 0 ok, 1 validation violations listed by ``validate``,
2 configuration or file problems, 3 invalid input data, 4 non-convergence,
5 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from .errors import (
    CollinearBasisError,
    ConvergenceError,
    InvalidInputError,
    JMCRError,
)
from .io import (
    ConfigError,
    RunConfig,
    ValidationError,
    load_config,
    load_dataset,
    write_fit_artifacts,
    write_json,
)

EXIT_OK = 0
EXIT_VIOLATIONS = 1
EXIT_CONFIG = 2
EXIT_VALIDATION = 3
EXIT_NONCONVERGENCE = 4
EXIT_NUMERICAL = 5

log = logging.getLogger("jmcr")


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (ValidationError, InvalidInputError, CollinearBasisError)):
        return EXIT_VALIDATION
    if isinstance(exc, ConvergenceError):
        return EXIT_NONCONVERGENCE
    return EXIT_NUMERICAL


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.output_dir = Path(args.out)
    return cfg


def cmd_fit(cfg: RunConfig, args) -> int:
    from .inference import infer
    from .model import ModelSpec
    from .solver import fit

    loaded = load_dataset(cfg)
    ds = loaded.dataset
    link, variance = cfg.link_variance()
    spec = ModelSpec(link, variance, ds.n, ds.p, ds.d, ds.K, family=cfg.family)
    t0 = time.perf_counter()
    res = fit(ds, spec, cfg.solver)
    log.info("fit finished in %.2f s: %s", time.perf_counter() - t0, res.message)
    inf = None
    if res.converged:
        subset = None if cfg.subset is None else [s - 1 for s in cfg.subset]
        if subset is not None and max(subset) >= ds.p:
            raise ConfigError(f"inference: subset refers to response {max(subset) + 1} but p = {ds.p}")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            inf = infer(ds, res, level=cfg.level, subset=subset)
        for w in inf.warnings:
            log.warning(w)
    paths = write_fit_artifacts(cfg.output_dir, ds, res, inf, seed=cfg.seed)
    for p in paths:
        log.info("wrote %s", p)
    if not res.converged:
        log.error("%s", res.message)
        return EXIT_NONCONVERGENCE
    return EXIT_OK


def cmd_simulate(cfg: RunConfig, args) -> int:
    from .simulation import StudyFailedError, make_design, run_study

    sc = cfg.simulation
    if sc is None:
        raise ConfigError(f"{cfg.path}: no 'simulation' section")
    designs = [
        make_design(fam, n, p, d=sc.d, K=sc.K, reps=sc.reps, seed=cfg.seed,
                    trait_seed=sc.trait_seed, w_noise=sc.w_noise)
        for fam in sc.families for p in sc.p for n in sc.n
    ]
    subset = [s - 1 for s in sc.subset] if sc.coverage else None
    if subset is not None and max(subset) >= min(sc.p):
        raise ConfigError(f"simulation: subset refers to response {max(subset) + 1} but min p = {min(sc.p)}")
    code = EXIT_OK
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        try:
            report = run_study(designs, cfg.solver, subset, sc.level, n_jobs=args.threads)
        except StudyFailedError as exc:
            log.error("%s", exc)
            report, code = exc.report, EXIT_NONCONVERGENCE
    for p in report.write(cfg.output_dir, plots=sc.plots):
        log.info("wrote %s", p)
    for c in report.cells:
        log.info("%s", {k: c[k] for k in c if not k.startswith("seconds")})
    return code


def validation_report(cfg: RunConfig) -> dict:
    """Dataset and basis checks plus per-matrix summaries, without fitting."""
    from .equations import trace_gram
    from .similarity import mean_offdiagonal, validate_basis
    from .solver import _dependent_members

    violations: list[str] = []
    summaries = []
    try:
        loaded = load_dataset(cfg, validate=False)
    except InvalidInputError as exc:
        return {"clean": False, "violations": [str(exc)], "matrices": []}
    ds = loaded.dataset
    violations += validate_basis(ds.basis, ds.basis_labels)
    if not violations and ds.K:
        G = trace_gram(ds.basis)
        w = np.linalg.eigvalsh(G)
        if w[0] < 1e-10 * w[-1]:
            dep = _dependent_members(G)
            names = ["I"] + list(ds.basis_labels)
            violations.append("similarity matrices are linearly dependent: "
                              + ", ".join(names[k] for k in dep))
    if ds.n <= ds.d:
        violations.append(f"n = {ds.n} clusters is not larger than d = {ds.d} covariates")
    for lab, W in zip(ds.basis_labels, ds.basis):
        entry = {"label": lab, "mean_offdiagonal": mean_offdiagonal(W)}
        if np.all(np.isfinite(W)) and np.array_equal(W, W.T):
            lam = np.linalg.eigvalsh(W)
            # interval of rho_k (others zero) for which I + rho_k W_k is positive definite
            entry["rho_interval"] = [float(-1 / lam[-1]) if lam[-1] > 0 else None,
                                     float(-1 / lam[0]) if lam[0] < 0 else None]
        summaries.append(entry)
    return {
        "clean": not violations,
        "violations": violations,
        "n": ds.n, "p": ds.p, "d": ds.d, "K": ds.K,
        "basis_source": loaded.basis_source,
        "standardize_quantitative": cfg.data.standardize_quantitative,
        "matrices": summaries,
    }


def cmd_validate(cfg: RunConfig, args) -> int:
    rep = validation_report(cfg)
    for v in rep["violations"]:
        print(f"violation: {v}")
    for m in rep["matrices"]:
        print(f"{m['label']}: mean off-diagonal {m['mean_offdiagonal']:.6g}")
    print("clean" if rep["clean"] else f"{len(rep['violations'])} violation(s)")
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    write_json(cfg.output_dir / "validation.json", rep)
    return EXIT_OK if rep["clean"] else EXIT_VIOLATIONS


COMMANDS = {"fit": cmd_fit, "simulate": cmd_simulate, "validate": cmd_validate}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="jmcr", description="Joint mean and correlation regression.")
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("config", help="JSON run configuration")
    ap.add_argument("--seed", type=int, default=None, help="override the configured seed")
    ap.add_argument("--out", default=None, help="override the output directory")
    ap.add_argument("--threads", type=int, default=1, help="parallel workers for simulate")
    ap.add_argument("--quiet", action="store_true", help="only report warnings and errors")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s: %(message)s", stream=sys.stderr, force=True)
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        return COMMANDS[args.command](cfg, args)
    except JMCRError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code_for(exc)


if __name__ == "__main__":
    sys.exit(main())
