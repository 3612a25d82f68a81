"""Core objects of the covariance regression model.

The conditional covariance of a response ``y`` (length ``p``) given a
regressor ``x`` (length ``q``) is

.. math::
    \\Sigma_x = \\Psi + \\sum_{k=1}^r B_k x x^T B_k^T,

with mean ``A w`` for a (possibly distinct) mean regressor ``w``.  Everything
here is a pure function of its inputs; fitters live in :mod:`covreg.em` and
:mod:`covreg.gibbs`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from covreg.errors import DimensionError, ModelInvariantError

LOG_2PI = np.log(2.0 * np.pi)


def _as_matrix(a, name: str) -> np.ndarray:
    arr = np.asarray(a, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be two-dimensional, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class Dataset:
    """Responses ``Y`` (n x p), covariance regressors ``X`` (n x q) and mean
    regressors ``W`` (n x q_m).  ``W`` defaults to ``X``; pass an ``(n, 0)``
    array for a model without a mean.
    """

    Y: np.ndarray
    X: np.ndarray
    W: np.ndarray | None = None

    def __post_init__(self):
        Y = _as_matrix(self.Y, "Y")
        X = _as_matrix(self.X, "X")
        W = X if self.W is None else np.asarray(self.W, dtype=float)
        if W.ndim == 1:
            W = W[:, None]
        if not (Y.shape[0] == X.shape[0] == W.shape[0]):
            raise DimensionError(
                f"row counts differ: Y has {Y.shape[0]}, X has {X.shape[0]}, W has {W.shape[0]}"
            )
        for name, arr in (("Y", Y), ("X", X), ("W", W)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite entries")
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "W", W)

    @property
    def n(self) -> int:
        return self.Y.shape[0]

    @property
    def p(self) -> int:
        return self.Y.shape[1]

    @property
    def q(self) -> int:
        return self.X.shape[1]

    @property
    def q_m(self) -> int:
        return self.W.shape[1]


@dataclass(frozen=True)
class Params:
    """Mean coefficients ``A`` (p x q_m), rank components ``Bs`` (each p x q)
    and baseline covariance ``Psi`` (p x p, positive definite)."""

    A: np.ndarray
    Bs: tuple
    Psi: np.ndarray
    _chol: tuple = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        Psi = np.atleast_2d(np.asarray(self.Psi, dtype=float))
        p = Psi.shape[0]
        if Psi.shape != (p, p):
            raise DimensionError(f"Psi must be square, got {Psi.shape}")
        scale = max(np.max(np.abs(Psi)), 1.0)
        if np.max(np.abs(Psi - Psi.T)) > 1e-8 * scale:
            raise ModelInvariantError("Psi is not symmetric")
        Psi = 0.5 * (Psi + Psi.T)
        A = np.asarray(self.A, dtype=float)
        if A.ndim == 1:
            A = A[:, None]
        if A.shape[0] != p:
            raise DimensionError(f"A has {A.shape[0]} rows, expected {p}")
        Bs = self.Bs
        if isinstance(Bs, np.ndarray) and Bs.ndim == 2:
            Bs = [Bs]
        Bs = tuple(np.atleast_2d(np.asarray(B, dtype=float)) for B in Bs)
        if len(Bs) < 1:
            raise DimensionError("at least one rank component is required")
        q = Bs[0].shape[1]
        for k, B in enumerate(Bs):
            if B.shape != (p, q):
                raise DimensionError(f"B component {k} has shape {B.shape}, expected {(p, q)}")
        try:
            chol = cho_factor(Psi, lower=True)
        except np.linalg.LinAlgError as exc:
            raise ModelInvariantError("Psi is not positive definite") from exc
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "Bs", Bs)
        object.__setattr__(self, "Psi", Psi)
        object.__setattr__(self, "_chol", chol)

    @property
    def p(self) -> int:
        return self.Psi.shape[0]

    @property
    def q(self) -> int:
        return self.Bs[0].shape[1]

    @property
    def q_m(self) -> int:
        return self.A.shape[1]

    @property
    def rank(self) -> int:
        return len(self.Bs)

    @property
    def B(self) -> np.ndarray:
        """The first (for rank 1, the only) component."""
        return self.Bs[0]

    def psi_solve(self, rhs: np.ndarray) -> np.ndarray:
        """``Psi^{-1} rhs`` through the cached Cholesky factor."""
        return cho_solve(self._chol, rhs)

    def replace(self, **kw) -> "Params":
        vals = {"A": self.A, "Bs": self.Bs, "Psi": self.Psi}
        vals.update(kw)
        return Params(**vals)


@dataclass(frozen=True)
class GammaPosterior:
    m: float
    v: float

    @property
    def s(self) -> float:
        return float(np.sqrt(self.v))


class ScoreGaps(NamedTuple):
    """Left-minus-right sides of the likelihood stationarity equations."""

    A: np.ndarray
    Psi: np.ndarray
    B: np.ndarray


def _check_compat(params: Params, data: Dataset) -> None:
    if data.p != params.p:
        raise DimensionError(f"data has p={data.p}, params have p={params.p}")
    if data.q != params.q:
        raise DimensionError(f"data has q={data.q}, params have q={params.q}")
    if data.q_m != params.q_m:
        raise DimensionError(f"data has q_m={data.q_m}, params have q_m={params.q_m}")


def loadings(params: Params, X: np.ndarray) -> np.ndarray:
    """Stack ``L[i, :, k] = B_k x_i``; shape (n, p, r)."""
    X = np.atleast_2d(X)
    return np.stack([X @ B.T for B in params.Bs], axis=-1)


def sigma_at(params: Params, x) -> np.ndarray:
    """Covariance matrix at a single regressor value ``x``."""
    x = np.asarray(x, dtype=float).ravel()
    if x.shape[0] != params.q:
        raise DimensionError(f"x has length {x.shape[0]}, expected {params.q}")
    S = params.Psi.copy()
    for B in params.Bs:
        bx = B @ x
        S += np.outer(bx, bx)
    return S


def sigma_all(params: Params, X: np.ndarray) -> np.ndarray:
    """Covariance matrices at every row of ``X``; shape (n, p, p)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != params.q:
        raise DimensionError(f"X has {X.shape[1]} columns, expected {params.q}")
    L = loadings(params, X)
    return params.Psi[None, :, :] + L @ np.swapaxes(L, 1, 2)


def residuals(params: Params, data: Dataset) -> np.ndarray:
    return data.Y - data.W @ params.A.T


def _batched_cholesky(S: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError as exc:
        raise ModelInvariantError("a conditional covariance matrix failed Cholesky") from exc


def log_likelihood(params: Params, data: Dataset) -> float:
    """Gaussian log-likelihood, including the ``-(np/2) log 2 pi`` constant."""
    _check_compat(params, data)
    if data.n == 0:
        return 0.0
    E = residuals(params, data)
    Lc = _batched_cholesky(sigma_all(params, data.X))
    logdet = 2.0 * np.log(np.diagonal(Lc, axis1=1, axis2=2)).sum()
    z = np.linalg.solve(Lc, E[:, :, None])[:, :, 0]
    quad = np.sum(z * z)
    return float(-0.5 * data.n * data.p * LOG_2PI - 0.5 * logdet - 0.5 * quad)


def gamma_moments(params: Params, data: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Conditional mean (n, r) and covariance (n, r, r) of the random effects."""
    _check_compat(params, data)
    E = residuals(params, data)
    L = loadings(params, data.X)
    n, p, r = L.shape
    PL = params.psi_solve(L.transpose(1, 0, 2).reshape(p, n * r)).reshape(p, n, r).transpose(1, 0, 2)
    prec = np.eye(r)[None, :, :] + np.swapaxes(L, 1, 2) @ PL
    V = np.linalg.inv(prec)
    V = 0.5 * (V + np.swapaxes(V, 1, 2))
    proj = np.einsum("npr,np->nr", PL, E)
    m = np.einsum("nrs,ns->nr", V, proj)
    return m, V


def gamma_posterior(params: Params, y, x, w=None) -> GammaPosterior:
    """Posterior of the scalar random effect for one observation (rank 1)."""
    if params.rank != 1:
        raise ValueError("gamma_posterior is defined for rank-1 parameters")
    y = np.asarray(y, dtype=float).ravel()
    x = np.asarray(x, dtype=float).ravel()
    w = x if w is None else np.asarray(w, dtype=float).ravel()
    if y.shape[0] != params.p or x.shape[0] != params.q or w.shape[0] != params.q_m:
        raise DimensionError("y, x or w has the wrong length")
    bx = params.B @ x
    pbx = params.psi_solve(bx)
    v = 1.0 / (1.0 + bx @ pbx)
    e = y - params.A @ w
    return GammaPosterior(m=float(v * (e @ pbx)), v=float(v))


def _fix_sign(B: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(B))
    return -B if B.flat[idx] < 0 else B


def canonicalize(params: Params) -> Params:
    """Resolve the sign (rank 1) and rotation (rank > 1) nonidentifiability.

    For rank ``r > 1`` the ``p x r`` matrix of first columns of the components
    is rotated to have orthogonal columns, the components are ordered by the
    norm of that column (descending), and each component is signed so that its
    largest-magnitude entry is positive.  ``Sigma_x`` is unchanged.
    """
    Bs = [np.array(B) for B in params.Bs]
    r = len(Bs)
    if r > 1:
        B1 = np.column_stack([B[:, 0] for B in Bs])
        gram = B1.T @ B1
        off = gram - np.diag(np.diag(gram))
        total = np.trace(gram)
        if total > 0 and np.max(np.abs(off)) > 1e-12 * total:
            _, _, vt = np.linalg.svd(B1, full_matrices=True)
            H = vt.T
            Bs = list(np.einsum("jk,jpq->kpq", H, np.stack(Bs)))
        norms = [np.linalg.norm(B[:, 0]) for B in Bs]
        order = sorted(range(r), key=lambda k: -norms[k])
        Bs = [Bs[k] for k in order]
    return params.replace(Bs=tuple(_fix_sign(B) for B in Bs))


def score_residual(params: Params, data: Dataset) -> ScoreGaps:
    """Gaps in the stationarity equations of the rank-1 likelihood.

    ``A``: ``sum Sigma^-1 e w^T`` (the A-score).
    ``Psi``: ``sum Sigma^-1 - sum Sigma^-1 e e^T Sigma^-1`` (equals ``-2 dl/dPsi``
    with symmetry ignored).
    ``B``: ``sum Sigma^-1 B x x^T - sum Sigma^-1 e e^T Sigma^-1 B x x^T``
    (equals ``-dl/dB``).
    """
    if params.rank != 1:
        raise ValueError("score_residual is defined for rank-1 parameters")
    _check_compat(params, data)
    E = residuals(params, data)
    S_inv = np.linalg.inv(sigma_all(params, data.X))
    u = np.einsum("nij,nj->ni", S_inv, E)
    M = S_inv - u[:, :, None] * u[:, None, :]
    bx = data.X @ params.B.T
    gap_B = np.einsum("nij,nj->ni", M, bx).T @ data.X
    return ScoreGaps(A=u.T @ data.W, Psi=M.sum(axis=0), B=gap_B)


def make_params(A, B: np.ndarray | Sequence[np.ndarray], Psi) -> Params:
    """Convenience constructor accepting a single ``B`` or a list of components."""
    B_arr = np.asarray(B, dtype=float) if not isinstance(B, (list, tuple)) else None
    if B_arr is not None and B_arr.ndim == 2:
        Bs = (B_arr,)
    elif B_arr is not None and B_arr.ndim == 3:
        Bs = tuple(B_arr)
    else:
        Bs = tuple(B)
    return Params(A=A, Bs=Bs, Psi=Psi)
