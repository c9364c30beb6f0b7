"""Standardization + PCA fitted on training node rows."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from pix2graph.errors import ValidationError

SCALE_FLOOR = 1e-8


def n_components(eigenvalues: np.ndarray, threshold: float) -> int:
    """Smallest count whose cumulative eigenvalue fraction reaches ``threshold``."""
    ev = np.sort(np.clip(np.asarray(eigenvalues, dtype=np.float64), 0.0, None))[::-1]
    total = ev.sum()
    if total <= 0:
        return 1
    cum = np.cumsum(ev) / total
    return int(np.searchsorted(cum, threshold - 1e-12) + 1)


@dataclass
class Projection:
    mean: np.ndarray
    scale: np.ndarray
    components: np.ndarray  # d x r, orthonormal columns
    explained_fraction: float
    eigenvalues: np.ndarray
    fitted_ids: list[str] = field(default_factory=list)

    @property
    def d(self) -> int:
        return self.components.shape[0]

    @property
    def r(self) -> int:
        return self.components.shape[1]

    def apply(self, rows: np.ndarray) -> np.ndarray:
        rows = np.asarray(rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[1] != self.d:
            raise ValidationError(f"expected rows with {self.d} columns, got shape {rows.shape}")
        return ((rows - self.mean) / self.scale) @ self.components

    def reconstruct(self, reduced: np.ndarray) -> np.ndarray:
        return np.asarray(reduced) @ self.components.T * self.scale + self.mean

    def to_dict(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "scale": self.scale.tolist(),
            "components": self.components.tolist(),
            "explained_fraction": float(self.explained_fraction),
            "eigenvalues": self.eigenvalues.tolist(),
            "fitted_ids": list(self.fitted_ids),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Projection":
        comps = np.array(d["components"], dtype=np.float64)
        return cls(
            np.array(d["mean"]), np.array(d["scale"]), comps.reshape(len(d["mean"]), -1),
            float(d["explained_fraction"]), np.array(d["eigenvalues"]), list(d.get("fitted_ids", [])),
        )


def fit(rows: np.ndarray, threshold: float = 0.95, ids: list[str] | None = None) -> Projection:
    """Fit standardization and PCA keeping ``threshold`` of the variance.

    ``ids`` is stored on the projection as an audit trail of the graphs that
    contributed rows.
    """
    x = np.asarray(rows, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValidationError(f"need at least 2 rows to fit, got shape {x.shape}")
    if not 0.0 < threshold <= 1.0:
        raise ValidationError(f"threshold must be in (0, 1], got {threshold}")
    mean = x.mean(axis=0)
    scale = np.maximum(x.std(axis=0), SCALE_FLOOR)
    z = (x - mean) / scale
    cov = z.T @ z / x.shape[0]
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals, kind="stable")[::-1]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order]
    r = n_components(evals, threshold)
    comps = evecs[:, :r].copy()
    for j in range(r):
        if comps[np.argmax(np.abs(comps[:, j])), j] < 0:
            comps[:, j] = -comps[:, j]
    total = evals.sum()
    explained = float(evals[:r].sum() / total) if total > 0 else 1.0
    return Projection(mean, scale, comps, min(explained, 1.0), evals, list(ids or []))
