"""Data generators and Monte Carlo study drivers.

Two designs are supported:

``single_x``
    ``x = (1, u)`` with ``u ~ uniform(-1, 1)``, ``p = q = 2``,
    ``B = w/(w+1) B0`` and ``Psi = Psi0/(w+1)`` where
    ``Psi0 = B0 diag(1, 1/3) B0^T`` is the design average of ``B0 x x^T B0^T``.
    The design-averaged covariance is therefore ``(1 + w + w^2)/(1 + w)^2 Psi0``,
    between ``3/4 Psi0`` and ``Psi0``.
``additive_three_regressor``
    ``x = (1, x1, x2, x3)`` with continuous ``x1`` and binary ``x2, x3``;
    ``n`` observations in each of the four ``(x2, x3)`` groups.

Every replication draws from its own generator seeded by ``(seed, rep)`` so
results do not depend on the order in which replications run.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from covreg.em import EmConfig, fit_em, ols_params
from covreg.errors import ModelInvariantError, StudyError
from covreg.inference import expected_information, lr_test, select_model, stack_params
from covreg.model import Dataset, Params, sigma_at

B0 = np.array([[1.0, 1.0], [-1.0, 1.0]])
PSI0 = B0 @ np.diag([1.0, 1.0 / 3.0]) @ B0.T
A_SINGLE = np.array([[1.0, -1.0], [-1.0, 1.0]])
B_ADDITIVE = np.array([[1.0, 1.0, 0.5, 1.0], [-1.0, 1.0, -0.5, -1.0]])
A_ADDITIVE = np.array([[1.0, -1.0, 0.0, 0.0], [-1.0, 1.0, 0.0, 0.0]])
DESIGNS = ("single_x", "additive_three_regressor")
COVERAGE_LABELS = {
    "b11": "B[0,0]", "b12": "B[0,1]", "b21": "B[1,0]", "b22": "B[1,1]",
    "psi11": "Psi[0,0]", "psi12": "Psi[1,0]", "psi22": "Psi[1,1]",
}


@dataclass(frozen=True)
class SimScenario:
    w: float = 1.0
    n: int = 200
    design: str = "single_x"
    reps: int = 200
    seed: int = 0
    alpha: float = 0.05

    def __post_init__(self):
        if self.reps < 1:
            raise ValueError("reps must be >= 1")
        if not np.isfinite(self.w) or self.w < 0:
            raise ValueError("w must be finite and non-negative")
        if self.design not in DESIGNS:
            raise ValueError(f"design must be one of {DESIGNS}")


@dataclass
class StudyReport:
    scenario: dict
    reps_used: int
    reps_excluded: int
    relative_mse_ols_vs_cvr: float | None = None
    power_or_level: float | None = None
    relative_mse_ms: float | None = None
    coverage_per_param: dict | None = None
    g_values: list | None = None
    g_truth: float | None = None
    g_plugin_values: list | None = None
    g_win_fraction: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def single_x_params(w: float) -> Params:
    return Params(A=A_SINGLE, Bs=(w / (w + 1.0) * B0,), Psi=PSI0 / (w + 1.0))


def additive_params(w: float) -> Params:
    return Params(A=A_ADDITIVE, Bs=(w / (w + 1.0) * B_ADDITIVE,), Psi=PSI0 / (w + 1.0))


def scenario_params(scenario: SimScenario) -> Params:
    if scenario.design == "single_x":
        return single_x_params(scenario.w)
    return additive_params(scenario.w)


def generate(params: Params, x, rng, w=None) -> np.ndarray:
    """One response ``A w + sum_k gamma_k B_k x + Psi^{1/2} z``.

    ``rng`` only needs a ``standard_normal(size)`` method.
    """
    x = np.asarray(x, dtype=float)
    w = x if w is None else np.asarray(w, dtype=float)
    gam = np.asarray(rng.standard_normal(params.rank), dtype=float)
    z = np.asarray(rng.standard_normal(params.p), dtype=float)
    y = params.A @ w + np.linalg.cholesky(params.Psi) @ z
    for g, B in zip(gam, params.Bs):
        y = y + g * (B @ x)
    return y


def generate_rows(params: Params, X: np.ndarray, rng, W: np.ndarray | None = None) -> np.ndarray:
    """Vectorized :func:`generate` over the rows of ``X``."""
    X = np.atleast_2d(X)
    W = X if W is None else W
    n = X.shape[0]
    gam = rng.standard_normal((n, params.rank))
    Z = rng.standard_normal((n, params.p))
    Y = W @ params.A.T + Z @ np.linalg.cholesky(params.Psi).T
    for k, B in enumerate(params.Bs):
        Y += gam[:, [k]] * (X @ B.T)
    return Y


def single_x_design(n: int, rng, low: float = -1.0, high: float = 1.0) -> np.ndarray:
    return np.column_stack([np.ones(n), rng.uniform(low, high, n)])


def additive_design(n_per_group: int, rng) -> np.ndarray:
    blocks = []
    for x2 in (0.0, 1.0):
        for x3 in (0.0, 1.0):
            x1 = rng.uniform(-1.0, 1.0, n_per_group)
            blocks.append(np.column_stack([np.ones(n_per_group), x1, np.full(n_per_group, x2), np.full(n_per_group, x3)]))
    return np.vstack(blocks)


def generate_dataset(scenario: SimScenario, rng) -> Dataset:
    params = scenario_params(scenario)
    if scenario.design == "single_x":
        X = single_x_design(scenario.n, rng)
    else:
        X = additive_design(scenario.n, rng)
    return Dataset(Y=generate_rows(params, X, rng), X=X)


def rep_rng(seed: int, rep: int) -> np.random.Generator:
    return np.random.default_rng([seed, rep])


def _rep_config(base: EmConfig, rng) -> EmConfig:
    return EmConfig(
        max_iters=base.max_iters,
        rel_tol=base.rel_tol,
        init_seed=int(rng.integers(2**32)),
        init_scale=base.init_scale,
        n_restarts=base.n_restarts,
    )


def _check_exclusions(excluded: int, reps: int) -> None:
    if excluded > 0.05 * reps:
        raise StudyError(f"{excluded} of {reps} replications failed to converge (limit 5%)")


def run_mse_study(scenario: SimScenario, config: EmConfig | None = None) -> StudyReport:
    """Mean-squared error of ``A`` for OLS, covariance regression and the
    model-selected estimator, plus the rejection rate of the LR test."""
    if scenario.design != "single_x":
        raise ValueError("run_mse_study requires the single_x design")
    config = config or EmConfig()
    truth = scenario_params(scenario)
    se_ols, se_cvr, se_ms, rejections = [], [], [], []
    excluded = 0
    for rep in range(scenario.reps):
        rng = rep_rng(scenario.seed, rep)
        data = generate_dataset(scenario, rng)
        test = lr_test(data, _rep_config(config, rng), scenario.alpha)
        if not test.alt_fit.converged:
            excluded += 1
            continue
        ms_params, _ = select_model(test)
        se_ols.append(np.sum((test.null_fit.params.A - truth.A) ** 2))
        se_cvr.append(np.sum((test.alt_fit.params.A - truth.A) ** 2))
        se_ms.append(np.sum((ms_params.A - truth.A) ** 2))
        rejections.append(test.reject)
    _check_exclusions(excluded, scenario.reps)
    mse_ols = float(np.mean(se_ols))
    return StudyReport(
        scenario=asdict(scenario),
        reps_used=len(se_ols),
        reps_excluded=excluded,
        relative_mse_ols_vs_cvr=mse_ols / float(np.mean(se_cvr)),
        power_or_level=float(np.mean(rejections)),
        relative_mse_ms=mse_ols / float(np.mean(se_ms)),
    )


def align_sign(params: Params, B_true: np.ndarray) -> Params:
    """Return ``params`` with ``B`` or ``-B``, whichever is closer to ``B_true``."""
    B = params.B
    if np.sum((-B - B_true) ** 2) < np.sum((B - B_true) ** 2):
        return params.replace(Bs=(-B,))
    return params


def run_coverage_study(
    scenario: SimScenario,
    config: EmConfig | None = None,
    level: float = 0.95,
    oracle: bool = False,
) -> StudyReport:
    """Coverage of Wald intervals for the entries of ``B`` and ``Psi``.

    With ``oracle=True`` the standard errors come from the information at the
    true parameters instead of the estimates.
    """
    if scenario.design != "single_x" or not scenario.w > 0:
        raise ValueError("run_coverage_study requires the single_x design with w > 0")
    config = config or EmConfig()
    truth = scenario_params(scenario)
    theta_true = stack_params(truth)
    hits = {k: 0 for k in COVERAGE_LABELS}
    used = excluded = 0
    for rep in range(scenario.reps):
        rng = rep_rng(scenario.seed, rep)
        data = generate_dataset(scenario, rng)
        fit = fit_em(data, 1, _rep_config(config, rng))
        if not fit.converged:
            excluded += 1
            continue
        est = align_sign(fit.params, truth.B)
        report = expected_information(truth if oracle else est, data, level)
        half = report.upper - report.estimate
        err = np.abs(stack_params(est) - theta_true)
        for name, label in COVERAGE_LABELS.items():
            i = report.labels.index(label)
            hits[name] += bool(err[i] <= half[i])
        used += 1
    _check_exclusions(excluded, scenario.reps)
    return StudyReport(
        scenario=asdict(scenario),
        reps_used=used,
        reps_excluded=excluded,
        coverage_per_param={k: v / used for k, v in hits.items()},
    )


CovFunction = Callable[[np.ndarray], np.ndarray]


def additive_grid(n_x1: int = 10) -> np.ndarray:
    """``(1, x1, x2, x3)`` for ``n_x1`` equally spaced ``x1`` in [-1, 1] and binary ``x2, x3``."""
    return np.array(
        [[1.0, x1, x2, x3] for x1 in np.linspace(-1.0, 1.0, n_x1) for x2 in (0.0, 1.0) for x3 in (0.0, 1.0)]
    )


def discrepancy_g(estimate: CovFunction, truth: CovFunction, grid) -> float:
    """Stein-type loss ``sum_x log|S_hat(x)| + tr(S_hat(x)^-1 S(x))`` over ``grid``."""
    total = 0.0
    for x in grid:
        S_hat = np.atleast_2d(estimate(x))
        S = np.atleast_2d(truth(x))
        try:
            L = np.linalg.cholesky(S_hat)
        except np.linalg.LinAlgError as exc:
            raise ModelInvariantError(f"estimated covariance is not positive definite at x={x}") from exc
        logdet = 2.0 * np.log(np.diag(L)).sum()
        Linv_S = np.linalg.solve(L, S)
        tr = np.trace(np.linalg.solve(L.T, Linv_S))
        total += logdet + tr
    return float(total)


def params_cov_function(params: Params) -> CovFunction:
    return lambda x: sigma_at(params, x)


def run_additive_study(
    scenario: SimScenario,
    config: EmConfig | None = None,
    plugin: Callable[[Dataset], CovFunction] | None = None,
) -> StudyReport:
    """Discrepancy ``g`` of the covariance-regression fit on the additive design.

    ``plugin`` maps a dataset to a covariance function; when given, it is
    scored with the same ``g`` and ``g_win_fraction`` is the share of
    replications where the covariance-regression fit has the lower value.
    """
    if scenario.design != "additive_three_regressor":
        raise ValueError("run_additive_study requires the additive_three_regressor design")
    config = config or EmConfig()
    truth = scenario_params(scenario)
    truth_fn = params_cov_function(truth)
    grid = additive_grid()
    g_truth = discrepancy_g(truth_fn, truth_fn, grid)
    g_vals, g_plug = [], []
    excluded = 0
    for rep in range(scenario.reps):
        rng = rep_rng(scenario.seed, rep)
        data = generate_dataset(scenario, rng)
        fit = fit_em(data, 1, _rep_config(config, rng))
        if not fit.converged:
            excluded += 1
            continue
        g_vals.append(discrepancy_g(params_cov_function(fit.params), truth_fn, grid))
        if plugin is not None:
            g_plug.append(discrepancy_g(plugin(data), truth_fn, grid))
    _check_exclusions(excluded, scenario.reps)
    win = float(np.mean(np.array(g_vals) < np.array(g_plug))) if plugin is not None else None
    return StudyReport(
        scenario=asdict(scenario),
        reps_used=len(g_vals),
        reps_excluded=excluded,
        g_values=g_vals,
        g_truth=g_truth,
        g_plugin_values=g_plug if plugin is not None else None,
        g_win_fraction=win,
    )


def homoscedastic_plugin(data: Dataset) -> CovFunction:
    """Constant-covariance baseline for the plug-in slot."""
    Psi = ols_params(data).Psi
    return lambda x: Psi
