"""Prediction ellipsoids and per-group coverage audits."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from covreg.model import Dataset, Params, sigma_all, sigma_at
from covreg.inference import chi2_quantile


@dataclass(frozen=True)
class EllipseSpec:
    level: float = 0.9
    group_column: str | None = None
    grid: tuple | None = None

    def __post_init__(self):
        if not 0.0 < self.level < 1.0:
            raise ValueError("level must lie in (0, 1)")


@dataclass
class Region:
    """Prediction region ``{y : (y - center)' Sigma^-1 (y - center) < threshold}``."""

    center: np.ndarray
    sigma: np.ndarray
    threshold: float
    axes: np.ndarray = field(init=False)  # semi-axis lengths, ascending
    directions: np.ndarray = field(init=False)  # unit axis directions as columns

    def __post_init__(self):
        vals, vecs = np.linalg.eigh(self.sigma)
        self.axes = np.sqrt(self.threshold * np.clip(vals, 0.0, None))
        self.directions = vecs

    def contains(self, y) -> np.ndarray:
        d = np.atleast_2d(y) - self.center
        return mahalanobis_sq(d, self.sigma[None]) < self.threshold


def mahalanobis_sq(resid: np.ndarray, sigmas: np.ndarray) -> np.ndarray:
    """Row-wise ``r_i' S_i^-1 r_i``; ``sigmas`` broadcasts over rows."""
    L = np.linalg.cholesky(sigmas)
    L = np.broadcast_to(L, (resid.shape[0],) + L.shape[-2:])
    z = np.linalg.solve(L, resid[..., None])[..., 0]
    return np.einsum("ni,ni->n", z, z)


def region_at(params: Params, x, w=None, level: float = 0.9) -> Region:
    x = np.asarray(x, dtype=float)
    w = x if w is None else np.asarray(w, dtype=float)
    return Region(center=params.A @ w, sigma=sigma_at(params, x), threshold=chi2_quantile(level, params.p))


def covered(params: Params, data: Dataset, level: float = 0.9) -> np.ndarray:
    """Boolean per row: does ``y_i`` fall in its own fitted region."""
    resid = data.Y - data.W @ params.A.T
    return mahalanobis_sq(resid, sigma_all(params, data.X)) < chi2_quantile(level, params.p)


def quantile_groups(values: np.ndarray, bins: int) -> np.ndarray:
    """Group index ``0..bins-1`` by empirical quantile of ``values``."""
    edges = np.quantile(values, np.linspace(0.0, 1.0, bins + 1)[1:-1])
    return np.searchsorted(edges, values, side="right")


def coverage_audit(
    params: Params,
    reference: Params,
    data: Dataset,
    groups: np.ndarray,
    level: float = 0.9,
    order=None,
) -> tuple[list[dict], list[str]]:
    """Per-group coverage of ``params`` and ``reference`` regions.

    Each group reports the region of both fits at the group's mean
    regressors plus the fraction of its rows covered.  Group values listed
    in ``order`` with no rows are skipped and recorded as warnings.
    """
    groups = np.asarray(groups)
    order = list(np.unique(groups)) if order is None else list(order)
    hit = covered(params, data, level)
    hit_ref = covered(reference, data, level)
    out, warnings = [], []
    for g in order:
        idx = np.flatnonzero(groups == g)
        if idx.size == 0:
            warnings.append(f"group {g!r} has no rows; skipped")
            continue
        x_bar, w_bar = data.X[idx].mean(axis=0), data.W[idx].mean(axis=0)
        out.append({
            "group": g.item() if hasattr(g, "item") else g,
            "n": int(idx.size),
            "region": region_at(params, x_bar, w_bar, level),
            "reference_region": region_at(reference, x_bar, w_bar, level),
            "coverage": float(hit[idx].mean()),
            "reference_coverage": float(hit_ref[idx].mean()),
        })
    return out, warnings
