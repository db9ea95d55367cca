"""Similarity matrices built from per-response traits.

A quantitative trait column ``z`` gives ``w[a, b] = exp(-(z[a] - z[b])**2)``;
a qualitative one gives ``w[a, b] = 1`` when the two labels agree.  The
diagonal is always zero so that ``I`` and the ``W_k`` stay linearly
independent.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .errors import InvalidInputError


class TraitKind(str, Enum):
    QUANTITATIVE = "quantitative"
    QUALITATIVE = "qualitative"


@dataclass
class TraitColumn:
    kind: TraitKind
    values: Sequence
    label: str = ""

    def __post_init__(self):
        self.kind = TraitKind(self.kind)


@dataclass
class SimilarityBasis:
    mats: np.ndarray
    labels: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.mats = np.asarray(self.mats, dtype=float)
        if self.mats.ndim == 2:
            self.mats = self.mats[None]
        if not self.labels:
            self.labels = [f"W{k + 1}" for k in range(self.mats.shape[0])]
        if len(self.labels) != self.mats.shape[0]:
            raise InvalidInputError("one label per similarity matrix is required")

    @property
    def K(self) -> int:
        return self.mats.shape[0]


def standardize(values) -> np.ndarray:
    """Centre to zero mean and scale to unit (population) variance."""
    z = np.asarray(values, dtype=float)
    sd = z.std()
    if sd == 0:
        return z - z.mean()
    return (z - z.mean()) / sd


def build_quantitative(values, standardize_values: bool = False) -> np.ndarray:
    z = np.asarray(values, dtype=float)
    if z.ndim != 1:
        raise InvalidInputError("trait values must be a vector")
    if not np.all(np.isfinite(z)):
        raise InvalidInputError("quantitative trait contains non-finite values")
    if standardize_values:
        z = standardize(z)
    W = np.exp(-np.subtract.outer(z, z) ** 2)
    np.fill_diagonal(W, 0.0)
    return W


def build_qualitative(values) -> np.ndarray:
    labels = np.asarray(values, dtype=object)
    if labels.ndim != 1:
        raise InvalidInputError("trait labels must be a vector")
    if any(v is None or (isinstance(v, float) and np.isnan(v)) for v in labels):
        raise InvalidInputError("qualitative trait has missing labels")
    W = (labels[:, None] == labels[None, :]).astype(float)
    np.fill_diagonal(W, 0.0)
    return W


def build_basis(traits: Sequence[TraitColumn], standardize_quantitative: bool = True) -> SimilarityBasis:
    """One similarity matrix per trait column."""
    mats, labels = [], []
    for k, col in enumerate(traits):
        if col.kind is TraitKind.QUANTITATIVE:
            mats.append(build_quantitative(col.values, standardize_quantitative))
        else:
            mats.append(build_qualitative(col.values))
        labels.append(col.label or f"W{k + 1}")
    if not mats:
        return SimilarityBasis(np.zeros((0, 0, 0)), [])
    sizes = {m.shape[0] for m in mats}
    if len(sizes) != 1:
        raise InvalidInputError("trait columns have different lengths")
    return SimilarityBasis(np.stack(mats), labels)


def validate_basis(basis, labels: Sequence[str] | None = None) -> list[str]:
    """List structural violations; an empty list means the basis is usable.

    Checks each matrix for squareness, finiteness, exact symmetry and a
    zero diagonal.  Positions are reported 1-based.
    """
    if isinstance(basis, SimilarityBasis):
        labels = basis.labels
        mats = basis.mats
    else:
        mats = [np.asarray(m, dtype=float) for m in basis]
    if labels is None:
        labels = [f"W{k + 1}" for k in range(len(mats))]
    report: list[str] = []
    sizes = set()
    for lab, W in zip(labels, mats):
        W = np.asarray(W, dtype=float)
        if W.ndim != 2 or W.shape[0] != W.shape[1]:
            report.append(f"{lab}: not a square matrix (shape {W.shape})")
            continue
        sizes.add(W.shape[0])
        bad = np.argwhere(~np.isfinite(W))
        if bad.size:
            a, b = bad[0] + 1
            report.append(f"{lab}: non-finite entry at ({a},{b})")
            continue
        diag = np.flatnonzero(np.diag(W) != 0)
        if diag.size:
            report.append(f"{lab}: nonzero diagonal at ({diag[0] + 1},{diag[0] + 1})")
        asym = np.argwhere(np.triu(W != W.T))
        if asym.size:
            a, b = asym[0] + 1
            report.append(f"{lab}: asymmetry at ({a},{b})")
    if len(sizes) > 1:
        report.append(f"matrices have differing sizes {sorted(sizes)}")
    return report


def mean_offdiagonal(W: np.ndarray) -> float:
    p = W.shape[0]
    return float((W.sum() - np.trace(W)) / (p * (p - 1)))
