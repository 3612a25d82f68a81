"""Bundled sample data and loaders for user-supplied files."""

from __future__ import annotations

import csv
from importlib import resources
from pathlib import Path

import numpy as np

from covreg.model import Dataset
from covreg.simulation import generate_rows, single_x_design, single_x_params

SAMPLE_SEED = 20100
SAMPLE_W = 1.0
SAMPLE_N = 200


def sample_path() -> Path:
    """Path of the bundled CSV (columns ``u, y1, y2``) drawn from the
    ``single_x`` design with ``w = 1``, ``n = 200`` and seed ``SAMPLE_SEED``."""
    return Path(str(resources.files("covreg") / "data" / "single_x_sample.csv"))


def make_sample(seed: int = SAMPLE_SEED, w: float = SAMPLE_W, n: int = SAMPLE_N) -> np.ndarray:
    """Rows ``(u, y1, y2)`` of the bundled sample; regenerates it exactly."""
    rng = np.random.default_rng(seed)
    X = single_x_design(n, rng)
    Y = generate_rows(single_x_params(w), X, rng)
    return np.column_stack([X[:, 1], Y])


def write_sample(path: str | Path, **kw) -> None:
    rows = make_sample(**kw)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["u", "y1", "y2"])
        for row in rows:
            writer.writerow([repr(float(v)) for v in row])


def load_sample() -> Dataset:
    raw = np.loadtxt(sample_path(), delimiter=",", skiprows=1)
    X = np.column_stack([np.ones(raw.shape[0]), raw[:, 0]])
    return Dataset(Y=raw[:, 1:], X=X)


def load_fev(path: str | Path, W: np.ndarray | None = None) -> tuple[Dataset, np.ndarray]:
    """Load a user-supplied FEV/height file with columns ``age, fev, height``.

    Ages 3 and 19 are merged into 4 and 18.  The covariance design is
    ``(1, sqrt(age), age)``; the mean design defaults to the same columns
    unless ``W`` (for example a spline basis) is supplied.  Returns the
    dataset and the merged ages.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    age = np.array([float(r["age"]) for r in rows])
    age = np.clip(age, 4.0, 18.0)
    Y = np.array([[float(r["fev"]), float(r["height"])] for r in rows])
    X = np.column_stack([np.ones_like(age), np.sqrt(age), age])
    return Dataset(Y=Y, X=X, W=W), age
