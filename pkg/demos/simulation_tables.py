"""Small versions of the Monte Carlo studies.

Run with ``python3 demos/simulation_tables.py [--reps R]``.  Prints the
OLS/CVR mean-squared-error ratio and LR rejection rate for several ``w``,
Wald interval coverage at ``w = 1``, and the additive-design discrepancy
summary.  The default of 50 replications takes a few minutes; the CLI's
``simulate --full-scale`` runs 1000.
"""

import argparse

import numpy as np

from covreg import EmConfig, SimScenario, run_additive_study, run_coverage_study, run_mse_study


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--reps", type=int, default=50)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    config = EmConfig(n_restarts=1)

    print("w      n    OLS/CVR MSE   LR rejection")
    for w in (0.0, 1 / 3, 1.0, 3.0):
        r = run_mse_study(SimScenario(w=w, n=200, reps=args.reps, seed=args.seed), config)
        print(f"{w:4.2f}  200  {r.relative_mse_ols_vs_cvr:10.3f}   {r.power_or_level:10.3f}")

    r = run_coverage_study(SimScenario(w=1.0, n=200, reps=args.reps, seed=args.seed), config)
    print("\n95% Wald coverage at w = 1, n = 200:")
    print("  " + "  ".join(f"{k} {v:.2f}" for k, v in r.coverage_per_param.items()))

    r = run_additive_study(SimScenario(design="additive_three_regressor", w=1 / 3, n=50, reps=args.reps,
                                       seed=args.seed), config)
    print(f"\nAdditive design, n = 50 per group: median g excess {np.median(np.array(r.g_values) - r.g_truth):.2f}")


if __name__ == "__main__":
    main()
