"""Dataset and configuration builders shared by the CLI and acceptance tests."""

import json
from pathlib import Path

import numpy as np

from jmcr.io import write_dataset
from jmcr.simulation import DEFAULT_TRAITS, generate, make_design, synthetic_traits

FIXTURES = Path(__file__).parent / "fixtures"

# n sites, p species, d covariates (with intercept), K traits
BEETLE_SHAPE = dict(n=87, p=38, d=4, K=5)


def write_config(path, **sections) -> Path:
    path = Path(path)
    path.write_text(json.dumps({"schema_version": 1, **sections}, indent=2))
    return path


def beetle_like(outdir, seed: int = 0) -> Path:
    """Negative binomial data with trait-based similarity; returns the config path."""
    s = BEETLE_SHAPE
    design = make_design("negbin", s["n"], s["p"], d=s["d"], K=s["K"], seed=seed)
    ds = generate(design, np.random.default_rng([seed, 0]))
    traits = synthetic_traits(s["p"], DEFAULT_TRAITS, 2024)
    block = write_dataset(outdir, ds, traits)
    return write_config(
        Path(outdir) / "config.json",
        model={"link": "log", "variance": "quadratic", "family": "negbin"},
        data=block,
        output_dir="out",
        seed=seed,
    )
