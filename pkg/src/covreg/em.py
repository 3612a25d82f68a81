"""Maximum likelihood estimation by the EM algorithm.

The random-effects form ``y_i = A w_i + sum_k gamma_ik B_k x_i + eps_i`` turns
the M-step into a multivariate least-squares regression on an augmented
design: one real row per observation carrying the posterior means of the
random effects, plus ``r`` zero-response pseudo-rows per observation carrying
a square root of their posterior covariance.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve

from covreg.errors import ModelInvariantError, RankDeficiencyError
from covreg.model import LOG_2PI, Dataset, Params, canonicalize, gamma_moments, log_likelihood


class JitterWarning(RuntimeWarning):
    """The M-step covariance was nearly singular and a diagonal jitter was added."""


@dataclass(frozen=True)
class EmConfig:
    max_iters: int = 5000
    rel_tol: float = 1e-8
    init_seed: int | None = 0
    init_scale: float = 0.1
    n_restarts: int = 3

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.rel_tol > 0:
            raise ValueError("rel_tol must be positive")
        if not self.init_scale > 0:
            raise ValueError("init_scale must be positive")
        if self.n_restarts < 1:
            raise ValueError("n_restarts must be >= 1")


@dataclass(frozen=True)
class Moments:
    """Posterior means ``m`` (n, r) and covariances ``V`` (n, r, r) of the random effects."""

    m: np.ndarray
    V: np.ndarray


@dataclass(frozen=True)
class AugmentedDesign:
    Xt: np.ndarray
    Yt: np.ndarray


@dataclass
class FitResult:
    params: Params
    loglik_trace: list
    iterations: int
    converged: bool
    final_loglik: float
    warnings: list = field(default_factory=list)
    restart_logliks: list = field(default_factory=list)


def e_step(params: Params, data: Dataset) -> Moments:
    m, V = gamma_moments(params, data)
    return Moments(m=m, V=V)


def _sym_sqrt(V: np.ndarray) -> np.ndarray:
    if V.shape[-1] == 1:
        return np.sqrt(V)
    vals, vecs = np.linalg.eigh(V)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)[:, None, :]) @ np.swapaxes(vecs, 1, 2)


def augmented_design(moments: Moments, data: Dataset) -> AugmentedDesign:
    """Rows ``1..n``: ``(w_i, m_i1 x_i, ..., m_ir x_i)``.  Then ``r`` pseudo-rows per
    observation: ``(0, S_i[j,1] x_i, ..., S_i[j,r] x_i)`` with ``S_i`` the symmetric
    square root of ``V_i``, ordered observation-major."""
    n, q, q_m = data.n, data.q, data.q_m
    m, V = moments.m, moments.V
    r = m.shape[1]
    top = np.hstack([data.W] + [m[:, [k]] * data.X for k in range(r)])
    S = _sym_sqrt(V)  # (n, r, r)
    pseudo = np.einsum("njk,nq->njkq", S, data.X).reshape(n * r, r * q)
    bottom = np.hstack([np.zeros((n * r, q_m)), pseudo])
    Yt = np.vstack([data.Y, np.zeros((n * r, data.p))])
    return AugmentedDesign(Xt=np.vstack([top, bottom]), Yt=Yt)


def _name_deficient_block(gram: np.ndarray, q_m: int, q: int, r: int) -> str:
    blocks = [("mean design W", slice(0, q_m))] if q_m else []
    blocks += [(f"covariance component {k + 1}", slice(q_m + k * q, q_m + (k + 1) * q)) for k in range(r)]
    for name, sl in blocks:
        sub = gram[sl, sl]
        if sub.size and np.linalg.matrix_rank(sub) < sub.shape[0]:
            return name
    return "joint augmented design"


def m_step(moments: Moments, data: Dataset) -> Params:
    """Weighted least squares on the augmented design (divisor ``n``)."""
    aug = augmented_design(moments, data)
    r = moments.m.shape[1]
    gram = aug.Xt.T @ aug.Xt
    try:
        chol = np.linalg.cholesky(gram)
        ok = np.min(np.diag(chol)) > 1e-12 * np.sqrt(np.max(np.diag(gram)))
    except np.linalg.LinAlgError:
        ok = False
    if not ok:
        block = _name_deficient_block(gram, data.q_m, data.q, r)
        raise RankDeficiencyError(f"augmented design is rank deficient in the {block} block")
    cross = aug.Xt.T @ aug.Yt
    Ct = np.linalg.solve(chol.T, np.linalg.solve(chol, cross))  # (q_m + r q) x p
    resid = aug.Yt - aug.Xt @ Ct
    Psi = resid.T @ resid / data.n
    Psi = 0.5 * (Psi + Psi.T)
    p = data.p
    floor = 1e-10 * np.trace(Psi) / p
    if np.linalg.eigvalsh(Psi)[0] < floor:
        Psi = Psi + floor * np.eye(p)
        warnings.warn(f"M-step covariance nearly singular; added jitter {floor:.3g}", JitterWarning)
    C = Ct.T
    q_m, q = data.q_m, data.q
    A = C[:, :q_m]
    Bs = tuple(C[:, q_m + k * q : q_m + (k + 1) * q] for k in range(r))
    return Params(A=A, Bs=Bs, Psi=Psi)


def expected_complete_loglik(params: Params, moments: Moments, data: Dataset) -> float:
    """Expected complete-data log-likelihood given fixed random-effect moments."""
    aug = augmented_design(moments, data)
    C = np.hstack([params.A] + list(params.Bs))
    R = aug.Yt - aug.Xt @ C.T
    _, logdet = np.linalg.slogdet(params.Psi)
    tr = np.sum(R * params.psi_solve(R.T).T)
    return float(-0.5 * (data.n * data.p * np.log(2 * np.pi) + data.n * logdet + tr))


def _check_design(data: Dataset, rank: int) -> None:
    if data.n <= data.q_m + rank * data.q:
        raise RankDeficiencyError(
            f"need n > q_m + rank*q = {data.q_m + rank * data.q} rows, got n={data.n}"
        )
    if data.q_m and np.linalg.matrix_rank(data.W) < data.q_m:
        raise RankDeficiencyError("mean design W is not of full column rank")
    if np.linalg.matrix_rank(data.X) < data.q:
        raise RankDeficiencyError("covariance design X is not of full column rank")


def ols_params(data: Dataset, rank: int = 1) -> Params:
    """Homoscedastic MLE: least-squares ``A`` and residual covariance divided by ``n``,
    with all ``B`` components zero."""
    if data.q_m:
        coef, *_ = np.linalg.lstsq(data.W, data.Y, rcond=None)
        A = coef.T
    else:
        A = np.zeros((data.p, 0))
    E = data.Y - data.W @ A.T
    Psi = E.T @ E / data.n
    Bs = tuple(np.zeros((data.p, data.q)) for _ in range(rank))
    return Params(A=A, Bs=Bs, Psi=Psi)


def fit_homoscedastic(data: Dataset, rank: int = 1) -> FitResult:
    params = ols_params(data, rank)
    ll = log_likelihood(params, data)
    return FitResult(params=params, loglik_trace=[ll], iterations=0, converged=True, final_loglik=ll)


def random_start(data: Dataset, rank: int, scale: float, rng: np.random.Generator) -> Params:
    """OLS start with small random ``B`` components (``B = 0`` is a fixed point of EM)."""
    base = ols_params(data, rank)
    sd = np.sqrt(np.diag(base.Psi))
    x_rms = np.sqrt(np.mean(data.X**2, axis=0))
    x_rms[x_rms == 0] = 1.0
    Bs = tuple(
        scale * sd[:, None] * rng.standard_normal((data.p, data.q)) / x_rms[None, :] for _ in range(rank)
    )
    return base.replace(Bs=Bs)


def moment_start(data: Dataset, rank: int) -> Params | None:
    """Method-of-moments start.

    Regresses the residual cross products ``e_ij e_ik`` on the quadratic terms
    of ``x``, assembles the ``pq x pq`` matrix whose ``(j, k)`` block is the fitted
    quadratic form, and takes its leading ``rank`` eigenpairs as ``vec(B_k^T)``.
    Returns ``None`` when the quadratic regression is not identified.
    """
    base = ols_params(data, rank)
    p, q, n = data.p, data.q, data.n
    E = data.Y - data.W @ base.A.T
    iu = np.triu_indices(q)
    feats = (data.X[:, :, None] * data.X[:, None, :])[:, iu[0], iu[1]]
    if n <= feats.shape[1] or np.linalg.matrix_rank(feats) < feats.shape[1]:
        return None
    jk = np.triu_indices(p)
    targets = (E[:, :, None] * E[:, None, :])[:, jk[0], jk[1]]
    coef, *_ = np.linalg.lstsq(feats, targets, rcond=None)
    Q = np.zeros((p * q, p * q))
    for c, (j, k) in enumerate(zip(*jk)):
        M = np.zeros((q, q))
        M[iu] = coef[:, c]
        M = 0.5 * (M + M.T)
        Q[j * q:(j + 1) * q, k * q:(k + 1) * q] = M
        Q[k * q:(k + 1) * q, j * q:(j + 1) * q] = M
    vals, vecs = np.linalg.eigh(Q)
    order = np.argsort(vals)[::-1][:rank]
    Bs = tuple(
        np.sqrt(max(vals[i], 0.0)) * vecs[:, i].reshape(p, q) for i in order
    )
    if all(not np.any(B) for B in Bs):
        return None
    return base.replace(Bs=Bs)


def _estep_fused(A, Bs, Psi, data: Dataset):
    """Random-effect moments and the observed-data log-likelihood at ``(A, Bs, Psi)``.

    Uses the determinant lemma and Woodbury identity so no n-fold p x p
    factorization is needed.
    """
    n, p = data.n, data.p
    r = len(Bs)
    sign, logdet_psi = np.linalg.slogdet(Psi)
    if sign <= 0:
        raise ModelInvariantError("Psi is not positive definite")
    Pinv = np.linalg.inv(Psi)
    E = data.Y - data.W @ A.T
    quad0 = np.sum(E * (E @ Pinv))
    if r == 1:
        l = data.X @ Bs[0].T
        pl = l @ Pinv
        v = 1.0 / (1.0 + np.sum(l * pl, axis=1))
        proj = np.sum(pl * E, axis=1)
        m = v * proj
        ll = -0.5 * (n * p * LOG_2PI + n * logdet_psi - np.log(v).sum() + quad0 - np.sum(v * proj * proj))
        return m[:, None], v[:, None, None], ll
    L = np.stack([data.X @ B.T for B in Bs], axis=-1)
    PL = np.einsum("pq,nqr->npr", Pinv, L)
    prec = np.eye(r)[None] + np.swapaxes(L, 1, 2) @ PL
    pc = np.linalg.cholesky(prec)
    V = np.linalg.inv(prec)
    V = 0.5 * (V + np.swapaxes(V, 1, 2))
    proj = np.einsum("npr,np->nr", PL, E)
    m = np.einsum("nrs,ns->nr", V, proj)
    logdet_prec = 2.0 * np.log(np.diagonal(pc, axis1=1, axis2=2)).sum()
    ll = -0.5 * (n * p * LOG_2PI + n * logdet_psi + logdet_prec + quad0 - np.sum(m * proj))
    return m, V, ll


def _mstep_fused(m: np.ndarray, V: np.ndarray, data: Dataset):
    """Closed-form M-step without materializing the augmented design.

    Algebraically identical to :func:`m_step`; the pseudo-rows only contribute
    ``sum_i V_i (x) x_i x_i^T`` to the Gram matrix.
    """
    n, q, q_m, p = data.n, data.q, data.q_m, data.p
    r = m.shape[1]
    X = data.X
    Z = np.hstack([data.W] + [m[:, [k]] * X for k in range(r)])
    gram = Z.T @ Z
    GV = np.empty((r * q, r * q))
    for k in range(r):
        for l in range(k, r):
            blk = (X * V[:, k, l][:, None]).T @ X
            GV[k * q:(k + 1) * q, l * q:(l + 1) * q] = blk
            GV[l * q:(l + 1) * q, k * q:(k + 1) * q] = blk.T
    gram[q_m:, q_m:] += GV
    try:
        chol = np.linalg.cholesky(gram)
    except np.linalg.LinAlgError:
        chol = None
    if chol is None or np.min(np.diagonal(chol)) <= 1e-12 * np.sqrt(np.max(np.diagonal(gram))):
        block = _name_deficient_block(gram, q_m, q, r)
        raise RankDeficiencyError(f"augmented design is rank deficient in the {block} block")
    Ct = cho_solve((chol, True), Z.T @ data.Y)
    R = data.Y - Z @ Ct
    Bt = Ct[q_m:]
    Psi = (R.T @ R + Bt.T @ GV @ Bt) / n
    Psi = 0.5 * (Psi + Psi.T)
    floor = 1e-10 * np.trace(Psi) / p
    jitter = None
    try:
        np.linalg.cholesky(Psi - floor * np.eye(p))
    except np.linalg.LinAlgError:
        Psi = Psi + floor * np.eye(p)
        jitter = floor
    C = Ct.T
    Bs = tuple(C[:, q_m + k * q:q_m + (k + 1) * q] for k in range(r))
    return C[:, :q_m], Bs, Psi, jitter


def em_iterations(start: Params, data: Dataset, config: EmConfig) -> FitResult:
    """Iterate E and M steps from ``start``; no restarts, no canonicalization.

    ``loglik_trace[t]`` is the log-likelihood after ``t`` M-steps.
    """
    A, Bs, Psi = start.A, start.Bs, start.Psi
    trace = []
    notes = []
    converged = False
    it = 0
    while True:
        m, V, ll = _estep_fused(A, Bs, Psi, data)
        if trace:
            prev = trace[-1]
            if ll < prev - 1e-8 * abs(prev):
                notes.append(f"log-likelihood decreased at iteration {it}: {prev!r} -> {ll!r}")
            if abs(ll - prev) < config.rel_tol * abs(prev):
                converged = True
        trace.append(ll)
        if converged or it >= config.max_iters:
            break
        A, Bs, Psi, jitter = _mstep_fused(m, V, data)
        if jitter is not None:
            notes.append(f"M-step covariance nearly singular at iteration {it + 1}; added jitter {jitter:.3g}")
        it += 1
    return FitResult(
        params=Params(A=A, Bs=Bs, Psi=Psi),
        loglik_trace=trace,
        iterations=it,
        converged=converged,
        final_loglik=trace[-1],
        warnings=notes,
    )


def fit_em(data: Dataset, rank: int = 1, config: EmConfig | None = None, init: Params | None = None) -> FitResult:
    """Fit the rank-``rank`` model by EM.

    Starting points are the moment-based start (when identified) followed by
    ``config.n_restarts`` random starts, or only ``init`` when given.  Returns
    the canonicalized parameters of the best final log-likelihood; ties go to
    the earliest start.
    """
    config = config or EmConfig()
    if rank < 1:
        raise ValueError("rank must be >= 1")
    _check_design(data, rank)
    if init is not None:
        starts = [init]
    else:
        starts = []
        ms = moment_start(data, rank)
        if ms is not None:
            starts.append(ms)
        seeds = np.random.SeedSequence(config.init_seed).spawn(config.n_restarts)
        starts += [random_start(data, rank, config.init_scale, np.random.default_rng(s)) for s in seeds]
    best = None
    finals = []
    for start in starts:
        res = em_iterations(start, data, config)
        finals.append(res.final_loglik)
        if best is None or res.final_loglik > best.final_loglik:
            best = res
    best.params = canonicalize(best.params)
    best.restart_logliks = finals
    return best
