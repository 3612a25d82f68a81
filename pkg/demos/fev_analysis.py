"""Rank-1 versus rank-2 analysis of a lung-function file.

Run with ``python3 demos/fev_analysis.py FILE.csv``, where the file has
columns ``age, fev, height``.  No such file ships with the package.  The
covariance design is ``(1, sqrt(age), age)``; the mean design here is a cubic
polynomial in age (supply your own basis through ``load_fev``'s ``W`` for a
spline fit).  Prints both log-likelihoods, the LR test on 4 df and the
age-specific coverage of 90% ellipses for the rank-1 and constant fits.
"""

import sys

import numpy as np

from covreg import EmConfig, fit_em, lr_test
from covreg.datasets import load_fev
from covreg.em import ols_params
from covreg.regions import coverage_audit


def main(path):
    _, age = load_fev(path)
    a = (age - age.mean()) / age.std()
    W = np.column_stack([np.ones_like(a), a, a**2, a**3])
    data, age = load_fev(path, W=W)
    config = EmConfig(n_restarts=5)
    test = lr_test(data, config, rank_null=1, rank_alt=2, df=4)
    print(f"log-likelihoods: rank 1 {test.loglik_null:.3f}, rank 2 {test.loglik_alt:.3f}")
    print(f"LR statistic {test.statistic:.2f} on {test.df} df, p = {test.p_value:.4f}")
    fit = fit_em(data, 1, config)
    audit, warnings = coverage_audit(fit.params, ols_params(data), data, age, level=0.9)
    print("\nage   n   constant  rank-1")
    for g in audit:
        print(f"{g['group']:4.0f} {g['n']:4d}   {g['reference_coverage']:.2f}     {g['coverage']:.2f}")
    for w in warnings:
        print("warning:", w)


if __name__ == "__main__":
    if len(sys.argv) != 2:
        sys.exit("usage: python3 demos/fev_analysis.py FILE.csv")
    main(sys.argv[1])
