"""Expected information, Wald intervals and likelihood-ratio tests.

Parameters are stacked as ``theta = (vec A, vec B, vech Psi)`` with
column-major ``vec`` and lower-triangle-by-column ``vech``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import special

from covreg.em import EmConfig, FitResult, fit_em, fit_homoscedastic
from covreg.errors import DimensionError
from covreg.model import Dataset, Params


def vec(M: np.ndarray) -> np.ndarray:
    return np.asarray(M).ravel(order="F")


def vech(M: np.ndarray) -> np.ndarray:
    M = np.asarray(M)
    return np.concatenate([M[j:, j] for j in range(M.shape[0])])


def unvech(v: np.ndarray, p: int) -> np.ndarray:
    M = np.zeros((p, p))
    pos = 0
    for j in range(p):
        M[j:, j] = v[pos:pos + p - j]
        pos += p - j
    return M + np.tril(M, -1).T


def duplication_matrix(p: int) -> np.ndarray:
    """``G`` with ``vec(M) = G vech(M)`` for symmetric ``M``."""
    if p < 1:
        raise ValueError("p must be >= 1")
    G = np.zeros((p * p, p * (p + 1) // 2))
    col = 0
    for j in range(p):
        for i in range(j, p):
            G[i + j * p, col] = 1.0
            G[j + i * p, col] = 1.0
            col += 1
    return G


def commutation_matrix(m: int, n: int | None = None) -> np.ndarray:
    """``K_{m,n}`` with ``K vec(M) = vec(M^T)`` for ``m x n`` matrices ``M``."""
    n = m if n is None else n
    if m < 1 or n < 1:
        raise ValueError("dimensions must be >= 1")
    K = np.zeros((m * n, m * n))
    for i in range(m):
        for j in range(n):
            K[j + i * n, i + j * m] = 1.0
    return K


def chi2_sf(x: float, df: float) -> float:
    """Upper tail of the chi-square distribution."""
    if x <= 0:
        return 1.0
    return float(special.gammaincc(df / 2.0, x / 2.0))


def chi2_quantile(prob: float, df: float) -> float:
    """Inverse of the chi-square CDF via the regularized incomplete gamma inverse."""
    if not 0.0 < prob < 1.0:
        raise ValueError("prob must lie in (0, 1)")
    return float(2.0 * special.gammaincinv(df / 2.0, prob))


def normal_quantile(prob: float) -> float:
    return float(special.ndtri(prob))


def param_labels(p: int, q_m: int, q: int) -> list[str]:
    labels = [f"A[{j},{k}]" for k in range(q_m) for j in range(p)]
    labels += [f"B[{j},{k}]" for k in range(q) for j in range(p)]
    labels += [f"Psi[{i},{j}]" for j in range(p) for i in range(j, p)]
    return labels


def stack_params(params: Params) -> np.ndarray:
    return np.concatenate([vec(params.A), vec(params.B), vech(params.Psi)])


@dataclass
class InformationReport:
    info: np.ndarray
    cov: np.ndarray
    se: np.ndarray
    estimate: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    level: float
    labels: list
    sizes: tuple
    singular: bool = False
    null_directions: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    @property
    def wald(self) -> list:
        return [(lo, hi, self.level) for lo, hi in zip(self.lower, self.upper)]

    def _slice(self, name: str) -> slice:
        na, nb, npsi = self.sizes
        return {"a": slice(0, na), "b": slice(na, na + nb), "psi": slice(na + nb, na + nb + npsi)}[name]

    def block(self, row: str, col: str) -> np.ndarray:
        """Sub-block of the information, e.g. ``block("b", "psi")``."""
        return self.info[self._slice(row), self._slice(col)]

    def interval(self, label: str) -> tuple:
        i = self.labels.index(label)
        return self.lower[i], self.upper[i]


def information_blocks(params: Params, x: np.ndarray, w: np.ndarray | None = None) -> dict:
    """Expected information from one observation at regressors ``(x, w)``."""
    p = params.p
    x = np.asarray(x, dtype=float).ravel()
    w = x if w is None else np.asarray(w, dtype=float).ravel()
    bx = params.B @ x
    S = params.Psi + np.outer(bx, bx)
    S_inv = np.linalg.inv(S)
    SS = np.kron(S_inv, S_inv)
    G = duplication_matrix(p)
    K = commutation_matrix(p)
    Mb = np.kron(np.outer(x, bx), np.eye(p))  # (x x^T B^T) (x) I_p
    return {
        "aa": np.kron(np.outer(w, w), S_inv),
        "bb": Mb @ SS @ (np.eye(p * p) + K) @ Mb.T,
        "bpsi": Mb @ SS @ G,
        "psipsi": G.T @ SS @ G / 2.0,
    }


def expected_information(params: Params, data: Dataset, level: float = 0.95) -> InformationReport:
    """Expected information over ``(vec A, vec B, vech Psi)`` summed over rows.

    The ``(a, b)`` and ``(a, psi)`` blocks are exactly zero.  A singular matrix
    is inverted by pseudo-inverse and flagged, with the near-null eigenvectors
    returned as columns of ``null_directions``.
    """
    if params.rank != 1:
        raise ValueError("expected information is available for rank-1 parameters only")
    if data.p != params.p or data.q != params.q or data.q_m != params.q_m:
        raise DimensionError("data and params dimensions disagree")
    p, q, q_m, n = params.p, params.q, params.q_m, data.n
    S_inv = np.linalg.inv(params.Psi[None] + np.einsum("ni,nj->nij", data.X @ params.B.T, data.X @ params.B.T))
    G = duplication_matrix(p)
    IK = np.eye(p * p) + commutation_matrix(p)
    I_p = np.eye(p)
    na, nb, npsi = p * q_m, p * q, p * (p + 1) // 2
    I_aa = np.zeros((na, na))
    I_bb = np.zeros((nb, nb))
    I_bpsi = np.zeros((nb, npsi))
    I_psipsi = np.zeros((npsi, npsi))
    for i in range(n):
        x, w = data.X[i], data.W[i]
        SS = np.kron(S_inv[i], S_inv[i])
        Mb = np.kron(np.outer(x, params.B @ x), I_p)
        MbSS = Mb @ SS
        I_aa += np.kron(np.outer(w, w), S_inv[i])
        I_bb += MbSS @ IK @ Mb.T
        I_bpsi += MbSS @ G
        I_psipsi += G.T @ SS @ G
    I_psipsi /= 2.0
    info = np.zeros((na + nb + npsi,) * 2)
    info[:na, :na] = I_aa
    info[na:na + nb, na:na + nb] = I_bb
    info[na:na + nb, na + nb:] = I_bpsi
    info[na + nb:, na:na + nb] = I_bpsi.T
    info[na + nb:, na + nb:] = I_psipsi
    info = 0.5 * (info + info.T)

    vals, vecs = np.linalg.eigh(info)
    tol = 1e-10 * max(vals[-1], 1e-300)
    singular = bool(vals[0] <= tol)
    if singular:
        cov = np.linalg.pinv(info, rcond=1e-10, hermitian=True)
        null_dirs = vecs[:, vals <= tol]
    else:
        cov = (vecs / vals) @ vecs.T
        null_dirs = np.zeros((info.shape[0], 0))
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    est = stack_params(params)
    z = normal_quantile(0.5 + level / 2.0)
    return InformationReport(
        info=info,
        cov=cov,
        se=se,
        estimate=est,
        lower=est - z * se,
        upper=est + z * se,
        level=level,
        labels=param_labels(p, q_m, q),
        sizes=(na, nb, npsi),
        singular=singular,
        null_directions=null_dirs,
    )


@dataclass
class LrTestResult:
    statistic: float
    df: int
    p_value: float
    reject: bool
    alpha: float
    loglik_null: float
    loglik_alt: float
    null_fit: FitResult
    alt_fit: FitResult


def lr_statistic(loglik_null: float, loglik_alt: float) -> float:
    """``2 (l_alt - l_null)``, clamped at zero when the deficit is within 1e-6."""
    stat = 2.0 * (loglik_alt - loglik_null)
    if -1e-6 <= stat < 0.0:
        return 0.0
    return stat


def lr_test(
    data: Dataset,
    config: EmConfig | None = None,
    alpha: float = 0.05,
    *,
    rank_null: int = 0,
    rank_alt: int = 1,
    df: int | None = None,
) -> LrTestResult:
    """Likelihood-ratio test of a rank-``rank_null`` against a rank-``rank_alt`` model.

    Rank 0 is the homoscedastic model.  Degrees of freedom default to ``p q``
    for the 0-vs-1 test and must be supplied otherwise.
    """
    if not rank_alt > rank_null >= 0:
        raise ValueError("need rank_alt > rank_null >= 0")
    if df is None:
        if (rank_null, rank_alt) != (0, 1):
            raise ValueError("df must be given unless testing rank 0 against rank 1")
        df = data.p * data.q
    null_fit = fit_homoscedastic(data) if rank_null == 0 else fit_em(data, rank_null, config)
    alt_fit = fit_em(data, rank_alt, config)
    stat = lr_statistic(null_fit.final_loglik, alt_fit.final_loglik)
    pval = chi2_sf(max(stat, 0.0), df)
    return LrTestResult(
        statistic=stat,
        df=int(df),
        p_value=pval,
        reject=bool(pval < alpha),
        alpha=alpha,
        loglik_null=null_fit.final_loglik,
        loglik_alt=alt_fit.final_loglik,
        null_fit=null_fit,
        alt_fit=alt_fit,
    )


def select_model(test: LrTestResult) -> tuple[Params, bool]:
    """Covariance-regression parameters if the test rejected, else the homoscedastic fit."""
    if test.reject:
        return test.alt_fit.params, True
    return test.null_fit.params, False


def model_selected_fit(data: Dataset, config: EmConfig | None = None, alpha: float = 0.05) -> tuple[Params, bool]:
    return select_model(lr_test(data, config, alpha))
