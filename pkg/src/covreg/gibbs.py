"""Gibbs sampling for the covariance regression model.

Semi-conjugate prior: ``Psi ~ inverse-Wishart`` with mean ``Psi0 / (nu0 - p - 1)``
and ``C = (A, B_1, ..., B_r) | Psi ~ matrix normal(C0, Psi, V0)`` where the
matrix normal has row covariance ``Psi`` and column covariance ``V0``
(``cov(vec C) = V0 kron Psi``).  One sweep draws the random effects, then
``Psi`` with ``C`` integrated out, then ``C``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import block_diag, cho_solve, solve_triangular

from covreg.em import moment_start
from covreg.errors import DimensionError, ModelInvariantError, RankDeficiencyError
from covreg.model import Dataset, Params, canonicalize, gamma_moments


@dataclass(frozen=True)
class Prior:
    C0: np.ndarray
    V0: np.ndarray
    Psi0: np.ndarray
    nu0: float

    def __post_init__(self):
        p = self.Psi0.shape[0]
        k = self.V0.shape[0]
        if self.C0.shape != (p, k):
            raise DimensionError(f"C0 has shape {self.C0.shape}, expected {(p, k)}")
        if not self.nu0 > p + 1:
            raise ValueError("nu0 must exceed p + 1")
        for name, M in (("V0", self.V0), ("Psi0", self.Psi0)):
            try:
                np.linalg.cholesky(M)
            except np.linalg.LinAlgError as exc:
                raise ModelInvariantError(f"{name} is not positive definite") from exc

    @property
    def psi_mean(self) -> np.ndarray:
        return self.Psi0 / (self.nu0 - self.Psi0.shape[0] - 1)


def default_prior(data: Dataset, rank: int = 1) -> Prior:
    """Unit-information prior: ``C0 = 0``, ``V0 = blockdiag(n (W'W)^-1, n (X'X)^-1, ...)``,
    ``nu0 = p + 2`` and ``Psi0`` the sample covariance of ``Y``."""
    n, p = data.n, data.p
    blocks = []
    for name, M in [("W", data.W)] * (data.q_m > 0) + [("X", data.X)] * rank:
        gram = M.T @ M
        if np.linalg.matrix_rank(gram) < gram.shape[0]:
            raise RankDeficiencyError(f"design {name} is not of full column rank")
        blocks.append(n * np.linalg.inv(gram))
    V0 = block_diag(*blocks)
    Psi0 = np.atleast_2d(np.cov(data.Y, rowvar=False))
    return Prior(C0=np.zeros((p, V0.shape[0])), V0=V0, Psi0=Psi0, nu0=p + 2.0)


@dataclass(frozen=True)
class GibbsState:
    C: np.ndarray  # p x (q_m + r q)
    Psi: np.ndarray
    gamma: np.ndarray  # n x r

    def params(self, q_m: int, q: int) -> Params:
        r = (self.C.shape[1] - q_m) // q
        Bs = tuple(self.C[:, q_m + k * q:q_m + (k + 1) * q] for k in range(r))
        return Params(A=self.C[:, :q_m], Bs=Bs, Psi=self.Psi)


def bartlett_factor(p: int, df: float, rng: np.random.Generator) -> np.ndarray:
    """Lower-triangular ``T`` with ``T T^T ~ Wishart(I_p, df)``."""
    T = np.zeros((p, p))
    T[np.diag_indices(p)] = np.sqrt(rng.chisquare(df - np.arange(p)))
    T[np.tril_indices(p, -1)] = rng.standard_normal(p * (p - 1) // 2)
    return T


def sample_inverse_wishart(scale: np.ndarray, df: float, rng: np.random.Generator) -> np.ndarray:
    """Draw ``Psi`` with ``Psi^-1 ~ Wishart(scale^-1, df)``, so ``E[Psi] = scale / (df - p - 1)``.

    With ``scale = L L^T`` and Bartlett factor ``T``, ``Psi^-1 = L^-T T T^T L^-1``
    and hence ``Psi = U^T U`` for ``U = T^-1 L^T``.
    """
    p = scale.shape[0]
    try:
        L = np.linalg.cholesky(scale)
    except np.linalg.LinAlgError as exc:
        raise ModelInvariantError("inverse-Wishart scale is not positive definite") from exc
    U = solve_triangular(bartlett_factor(p, df, rng), L.T, lower=True)
    Psi = U.T @ U
    return 0.5 * (Psi + Psi.T)


def sample_matrix_normal(M: np.ndarray, row_cov: np.ndarray, col_cov: np.ndarray, rng) -> np.ndarray:
    Lr = np.linalg.cholesky(row_cov)
    Lc = np.linalg.cholesky(col_cov)
    return M + Lr @ rng.standard_normal(M.shape) @ Lc.T


@dataclass(frozen=True)
class CConditional:
    """Moments of ``(Psi, C) | gamma``: ``Psi ~ inverse-Wishart(Psi_n, nu_n)`` and
    ``C | Psi ~ matrix normal(C_n, Psi, col_cov)``."""

    Cn: np.ndarray
    Psi_n: np.ndarray
    nu_n: float
    col_cov: np.ndarray
    col_chol: np.ndarray


def c_conditional(gamma: np.ndarray, data: Dataset, prior: Prior) -> CConditional:
    r = gamma.shape[1]
    Xg = np.hstack([data.W] + [gamma[:, [k]] * data.X for k in range(r)])
    V0_inv = np.linalg.inv(prior.V0)
    prec = Xg.T @ Xg + V0_inv
    try:
        pchol = np.linalg.cholesky(prec)
    except np.linalg.LinAlgError as exc:
        raise ModelInvariantError("posterior precision of C is not positive definite") from exc
    Cn = cho_solve((pchol, True), (data.Y.T @ Xg + prior.C0 @ V0_inv).T).T
    R = data.Y - Xg @ Cn.T
    D = Cn - prior.C0
    Psi_n = prior.Psi0 + R.T @ R + D @ V0_inv @ D.T
    col_cov = cho_solve((pchol, True), np.eye(prec.shape[0]))
    col_cov = 0.5 * (col_cov + col_cov.T)
    return CConditional(
        Cn=Cn,
        Psi_n=0.5 * (Psi_n + Psi_n.T),
        nu_n=prior.nu0 + data.n,
        col_cov=col_cov,
        col_chol=np.linalg.cholesky(col_cov),
    )


def gibbs_step(state: GibbsState, data: Dataset, prior: Prior, rng: np.random.Generator) -> GibbsState:
    """One sweep: all random effects jointly, then ``Psi | gamma`` with ``C``
    integrated out, then ``C | Psi, gamma``."""
    n, q, q_m = data.n, data.q, data.q_m
    r = state.gamma.shape[1]
    if n:
        m, V = gamma_moments(state.params(q_m, q), data)
        LV = np.linalg.cholesky(V)
        gamma = m + np.einsum("nij,nj->ni", LV, rng.standard_normal((n, r)))
    else:
        gamma = np.zeros((0, r))
    cond = c_conditional(gamma, data, prior)
    Psi = sample_inverse_wishart(cond.Psi_n, cond.nu_n, rng)
    C = cond.Cn + np.linalg.cholesky(Psi) @ rng.standard_normal(cond.Cn.shape) @ cond.col_chol.T
    return GibbsState(C=C, Psi=Psi, gamma=gamma)


def initial_state(data: Dataset, prior: Prior, rank: int, rng: np.random.Generator) -> GibbsState:
    """Start at the method-of-moments estimate when it exists, otherwise at the
    least-squares mean and prior-mean ``Psi`` with small random ``B``.

    Starting near the moment estimate keeps the chain out of the secondary
    mode in which one row of ``B`` is sign-flipped.
    """
    p, q, q_m, n = data.p, data.q, data.q_m, data.n
    start = None
    if n > q_m + rank * q:
        try:
            start = moment_start(data, rank)
        except RankDeficiencyError:
            start = None
    if start is not None:
        C = np.hstack([start.A, *start.Bs])
        return GibbsState(C=C, Psi=start.Psi, gamma=np.zeros((n, rank)))
    C = np.array(prior.C0, dtype=float)
    if n > q_m and q_m:
        coef, *_ = np.linalg.lstsq(data.W, data.Y, rcond=None)
        C[:, :q_m] = coef.T
    sd = np.sqrt(np.diag(prior.psi_mean))
    C[:, q_m:] += 0.1 * sd[:, None] * rng.standard_normal((p, rank * q))
    return GibbsState(C=C, Psi=prior.psi_mean.copy(), gamma=np.zeros((n, rank)))


@dataclass
class PosteriorDraws:
    """Stored chains. ``B_draws`` has shape (draws, r, p, q)."""

    A_draws: np.ndarray
    B_draws: np.ndarray
    Psi_draws: np.ndarray
    gamma_draws: np.ndarray | None
    seed: int | None
    burn_in: int
    thin: int
    n_iter: int

    def __len__(self) -> int:
        return self.Psi_draws.shape[0]

    def params(self, s: int) -> Params:
        return Params(A=self.A_draws[s], Bs=tuple(self.B_draws[s]), Psi=self.Psi_draws[s])

    def sigma_draws(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        bx = np.einsum("srpq,q->srp", self.B_draws, x)
        return self.Psi_draws + np.einsum("srp,srk->spk", bx, bx)

    def posterior_mean_sigma(self, x) -> np.ndarray:
        return self.sigma_draws(x).mean(axis=0)

    def canonical_B(self) -> np.ndarray:
        """Canonicalized copies of the ``B`` draws; raw draws are untouched.

        Rank-1 draws are sign-aligned with the leading principal direction of
        the draws (itself sign-fixed like a single ``B``), so summaries do not
        average over the ``B -> -B`` orbit even when two entries of ``B`` have
        similar magnitude.
        """
        out = np.stack([np.stack(canonicalize(self.params(s)).Bs) for s in range(len(self))])
        if out.shape[1] == 1 and len(out):
            flat = out.reshape(len(out), -1)
            _, _, vt = np.linalg.svd(flat, full_matrices=False)
            ref = canonicalize(self.params(0).replace(Bs=(vt[0].reshape(out.shape[2:]),))).B.ravel()
            out[flat @ ref < 0] *= -1.0
        return out

    def summary(self, level: float = 0.95) -> dict:
        """Posterior means and equal-tailed intervals of ``A``, canonical ``B`` and ``Psi``."""
        lo, hi = 50 * (1 - level), 100 - 50 * (1 - level)
        out = {}
        for name, arr in (("A", self.A_draws), ("B", self.canonical_B()), ("Psi", self.Psi_draws)):
            out[name] = {
                "mean": arr.mean(axis=0),
                "lower": np.percentile(arr, lo, axis=0),
                "upper": np.percentile(arr, hi, axis=0),
            }
        return out


def run_chain(
    data: Dataset,
    prior: Prior | None = None,
    rank: int = 1,
    n_iter: int = 2000,
    burn_in: int = 500,
    thin: int = 1,
    seed: int | None = 0,
    init: GibbsState | None = None,
    store_gamma: bool = False,
) -> PosteriorDraws:
    """Run one chain; deterministic given ``seed``.  Keeps sweeps
    ``burn_in + thin, burn_in + 2 thin, ...`` up to ``n_iter``."""
    if not n_iter > burn_in >= 0:
        raise ValueError("need n_iter > burn_in >= 0")
    if thin < 1:
        raise ValueError("thin must be >= 1")
    prior = prior or default_prior(data, rank)
    k_expected = data.q_m + rank * data.q
    if prior.V0.shape[0] != k_expected:
        raise DimensionError(f"prior has {prior.V0.shape[0]} coefficient columns, expected {k_expected}")
    rng = np.random.default_rng(seed)
    state = init or initial_state(data, prior, rank, rng)
    A_d, B_d, P_d, G_d = [], [], [], []
    q, q_m = data.q, data.q_m
    for t in range(1, n_iter + 1):
        state = gibbs_step(state, data, prior, rng)
        if t > burn_in and (t - burn_in) % thin == 0:
            A_d.append(state.C[:, :q_m])
            B_d.append(np.stack([state.C[:, q_m + k * q:q_m + (k + 1) * q] for k in range(rank)]))
            P_d.append(state.Psi)
            if store_gamma:
                G_d.append(state.gamma)
    return PosteriorDraws(
        A_draws=np.array(A_d),
        B_draws=np.array(B_d),
        Psi_draws=np.array(P_d),
        gamma_draws=np.array(G_d) if store_gamma else None,
        seed=seed,
        burn_in=burn_in,
        thin=thin,
        n_iter=n_iter,
    )

