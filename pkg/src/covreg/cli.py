"""Command-line interface: ``covreg {fit,lrtest,predict-region,simulate}``.

Every command writes one JSON document to stdout (or ``--json-out``);
diagnostics go to stderr.  Exit codes:

0  success
1  numerical failure not covered below
2  IO, parse or flag errors (including duplicate or missing columns)
3  rank-deficient design
4  EM did not converge and ``--strict`` was given
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import re
import sys
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np

from covreg.em import EmConfig, fit_em, ols_params
from covreg.errors import CovRegError, RankDeficiencyError
from covreg.gibbs import run_chain
from covreg.inference import expected_information, lr_test
from covreg.model import Dataset, Params, canonicalize, log_likelihood
from covreg.regions import EllipseSpec, coverage_audit, quantile_groups
from covreg.simulation import SimScenario, run_additive_study, run_coverage_study, run_mse_study

SCHEMA_VERSION = "1"
EXIT_OK, EXIT_NUMERIC, EXIT_INPUT, EXIT_RANK, EXIT_NONCONVERGED = 0, 1, 2, 3, 4
MISSING = {"", "na", "nan", "null"}


class InputError(Exception):
    """Bad file, column or flag; maps to exit code 2."""


# ---------------------------------------------------------------- CSV input

@dataclass(frozen=True)
class FitSpec:
    csv_path: str
    response_columns: tuple
    cov_regressor_columns: tuple
    mean_regressor_columns: tuple | None = None
    rank: int = 1
    method: str = "em"
    seed: int = 0
    derive: tuple = ()
    em: dict = field(default_factory=dict)
    gibbs: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.rank < 1:
            raise InputError("--rank must be >= 1")
        if self.method not in ("em", "gibbs"):
            raise InputError("--method must be em or gibbs")
        _no_duplicates(self.response_columns, "--y")
        _no_duplicates(self.cov_regressor_columns, "--x")
        _no_duplicates(self.mean_regressor_columns or (), "--w-cols")
        regressors = set(self.cov_regressor_columns) | set(self.mean_regressor_columns or ())
        both = [c for c in self.response_columns if c in regressors]
        if both:
            raise InputError(f"column {both[0]!r} is used both as a response and a regressor")

    @property
    def mean_columns(self) -> tuple:
        return self.cov_regressor_columns if self.mean_regressor_columns is None else self.mean_regressor_columns


def _no_duplicates(cols, flag: str) -> None:
    seen = set()
    for c in cols:
        if c in seen:
            raise InputError(f"duplicate column {c!r} in {flag}")
        seen.add(c)


def read_csv(path: str) -> dict[str, list[str]]:
    """Columns of an RFC-4180 CSV with a header row, as raw strings."""
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except (OSError, UnicodeDecodeError) as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise InputError(f"{path} is empty; a header row is required")
    header = [h.strip() for h in rows[0]]
    _no_duplicates(header, "the CSV header")
    body = [r for r in rows[1:] if r]
    for k, r in enumerate(body, start=2):
        if len(r) != len(header):
            raise InputError(f"{path} line {k}: expected {len(header)} fields, found {len(r)}")
    return {h: [r[j] for r in body] for j, h in enumerate(header)}


def _parse_column(raw: list[str], name: str) -> np.ndarray:
    out = np.empty(len(raw))
    for i, s in enumerate(raw):
        s = s.strip()
        if s.lower() in MISSING:
            out[i] = np.nan
            continue
        try:
            out[i] = float(s)
        except ValueError:
            raise InputError(f"column {name!r} row {i + 1}: cannot parse {s!r} as a number") from None
        if not math.isfinite(out[i]):
            raise InputError(f"column {name!r} row {i + 1}: non-finite value {s!r}")
    return out


_DERIVE = re.compile(r"^\s*(\w+)\s*=\s*(?:(sqrt|square)\((\w+)\)|product\((\w+)\s*,\s*(\w+)\)|(1))\s*$")


def apply_derive(columns: dict[str, np.ndarray], exprs) -> None:
    """Add derived columns in place.  Forms: ``name=sqrt(col)``,
    ``name=square(col)``, ``name=product(a,b)`` and ``name=1``."""
    n = len(next(iter(columns.values()))) if columns else 0
    for expr in exprs:
        m = _DERIVE.match(expr)
        if not m:
            raise InputError(f"cannot parse --derive {expr!r}")
        name, fn, arg, a, b, one = m.groups()
        if name in columns:
            raise InputError(f"duplicate column {name!r} from --derive")
        for src in (arg, a, b):
            if src is not None and src not in columns:
                raise InputError(f"--derive {expr!r}: unknown column {src!r}")
        if one:
            columns[name] = np.ones(n)
        elif fn == "sqrt":
            v = columns[arg]
            if np.any(v[np.isfinite(v)] < 0):
                raise InputError(f"--derive {expr!r}: negative values in {arg!r}")
            columns[name] = np.sqrt(v)
        elif fn == "square":
            columns[name] = columns[arg] ** 2
        else:
            columns[name] = columns[a] * columns[b]


@dataclass
class LoadedData:
    data: Dataset
    rows_used: int
    rows_dropped: int
    keep: np.ndarray
    columns: dict


def load_dataset(spec: FitSpec, extra: tuple = ()) -> LoadedData:
    """Parse, derive and select columns; drop rows with a missing value in any used column."""
    raw = read_csv(spec.csv_path)
    used = list(spec.response_columns) + list(spec.cov_regressor_columns) + list(spec.mean_columns) + list(extra)
    derived, sources = set(), []
    for expr in spec.derive:
        m = _DERIVE.match(expr)
        if not m:
            raise InputError(f"cannot parse --derive {expr!r}")
        derived.add(m.group(1))
        sources += [c for c in m.groups()[2:5] if c is not None and c not in derived]
    columns = {}
    for name in dict.fromkeys([c for c in used if c not in derived] + sources):
        if name not in raw:
            raise InputError(f"column {name!r} not found in {spec.csv_path}")
        columns[name] = _parse_column(raw[name], name)
    if not columns:
        raise InputError("no columns selected")
    apply_derive(columns, spec.derive)
    for name in used:
        if name not in columns:
            raise InputError(f"column {name!r} not found in {spec.csv_path}")
    stacked = np.column_stack([columns[c] for c in dict.fromkeys(used)])
    keep = np.all(np.isfinite(stacked), axis=1)

    def pick(cols):
        return np.column_stack([columns[c][keep] for c in cols]) if cols else np.zeros((int(keep.sum()), 0))

    data = Dataset(Y=pick(spec.response_columns), X=pick(spec.cov_regressor_columns), W=pick(spec.mean_columns))
    return LoadedData(data, int(keep.sum()), int((~keep).sum()), keep, {c: columns[c][keep] for c in used})


# ---------------------------------------------------------------- JSON output

def matrix_json(M) -> dict:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    return {"dims": list(M.shape), "data": M.tolist()}


def params_json(params: Params) -> dict:
    return {"A": matrix_json(params.A), "B": [matrix_json(B) for B in params.Bs], "Psi": matrix_json(params.Psi)}


def params_from_json(obj: dict) -> Params:
    def mat(m):
        return np.array(m["data"], dtype=float).reshape(m["dims"])

    return Params(A=mat(obj["A"]), Bs=tuple(mat(b) for b in obj["B"]), Psi=mat(obj["Psi"]))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def determinism_hash(report: dict) -> str:
    """SHA-256 of the canonical JSON of ``report`` without timestamp and hash fields."""
    payload = {k: v for k, v in report.items() if k not in ("timestamp", "determinism_hash")}
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"), allow_nan=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def finalize(command: str, seed, body: dict, timestamp: bool = False) -> dict:
    report = _jsonable({"version": SCHEMA_VERSION, "command": command, "seed": seed, **body})
    if timestamp:
        report["timestamp"] = datetime.now(timezone.utc).isoformat()
    report["determinism_hash"] = determinism_hash(report)
    return report


# ---------------------------------------------------------------- commands

def _em_config(spec: FitSpec) -> EmConfig:
    return EmConfig(init_seed=spec.seed, **spec.em)


def _columns_json(spec: FitSpec) -> dict:
    return {
        "y": list(spec.response_columns),
        "x": list(spec.cov_regressor_columns),
        "w": list(spec.mean_columns),
        "derive": list(spec.derive),
    }


def _fit_json(fit) -> dict:
    return {
        "loglik": fit.final_loglik,
        "converged": fit.converged,
        "iterations": fit.iterations,
        "warnings": list(fit.warnings),
    }


def cmd_fit(spec: FitSpec, level: float = 0.95) -> tuple[dict, bool]:
    """Fit report and a convergence flag (always true for Gibbs)."""
    loaded = load_dataset(spec)
    data = loaded.data
    body = {
        "columns": _columns_json(spec),
        "rows_used": loaded.rows_used,
        "rows_dropped": loaded.rows_dropped,
        "method": spec.method,
        "rank": spec.rank,
    }
    if spec.method == "em":
        fit = fit_em(data, spec.rank, _em_config(spec))
        body["params"] = params_json(fit.params)
        body["fit"] = _fit_json(fit)
        if spec.rank == 1:
            rep = expected_information(fit.params, data, level)
            body["inference"] = {
                "kind": "wald",
                "level": level,
                "labels": rep.labels,
                "estimate": rep.estimate,
                "se": rep.se,
                "lower": rep.lower,
                "upper": rep.upper,
                "singular": rep.singular,
            }
        return body, fit.converged
    draws = run_chain(data, rank=spec.rank, seed=spec.seed, **spec.gibbs)
    summ = draws.summary(level)
    mean = canonicalize(Params(A=summ["A"]["mean"], Bs=tuple(summ["B"]["mean"]), Psi=summ["Psi"]["mean"]))
    body["params"] = params_json(mean)
    body["fit"] = {"loglik_at_posterior_mean": log_likelihood(mean, data), "draws": len(draws),
                   "n_iter": draws.n_iter, "burn_in": draws.burn_in, "thin": draws.thin}
    body["inference"] = {
        "kind": "posterior",
        "level": level,
        **{name: {"mean": matrix_json(s["mean"]) if name != "B" else [matrix_json(b) for b in s["mean"]],
                  "lower": matrix_json(s["lower"]) if name != "B" else [matrix_json(b) for b in s["lower"]],
                  "upper": matrix_json(s["upper"]) if name != "B" else [matrix_json(b) for b in s["upper"]]}
           for name, s in summ.items()},
    }
    return body, True


def cmd_lrtest(spec: FitSpec, alpha: float = 0.05, rank_null: int = 0, df: int | None = None) -> tuple[dict, bool]:
    if spec.method != "em":
        raise InputError("lrtest requires --method em")
    if not 0 <= rank_null < spec.rank:
        raise InputError("--rank-null must be smaller than --rank")
    if df is None and (rank_null, spec.rank) != (0, 1):
        raise InputError(f"testing rank {rank_null} against rank {spec.rank} requires --df")
    loaded = load_dataset(spec)
    res = lr_test(loaded.data, _em_config(spec), alpha, rank_null=rank_null, rank_alt=spec.rank, df=df)
    body = {
        "columns": _columns_json(spec),
        "rows_used": loaded.rows_used,
        "rows_dropped": loaded.rows_dropped,
        "params": params_json(res.alt_fit.params),
        "test": {
            "rank_null": rank_null,
            "rank_alt": spec.rank,
            "statistic": res.statistic,
            "df": res.df,
            "p_value": res.p_value,
            "alpha": alpha,
            "reject": res.reject,
            "loglik_null": res.loglik_null,
            "loglik_alt": res.loglik_alt,
        },
        "null_params": params_json(res.null_fit.params),
        "fit": _fit_json(res.alt_fit),
    }
    ok = res.alt_fit.converged and res.null_fit.converged
    return body, ok


def _region_json(region, with_geometry: bool) -> dict:
    out = {"center": region.center, "sigma": matrix_json(region.sigma), "threshold": region.threshold}
    if with_geometry:
        out["axes"] = region.axes
        out["directions"] = matrix_json(region.directions)
    return out


def cmd_predict_region(fit_report: dict, spec: FitSpec, ellipse: EllipseSpec, bins: int | None = None) -> dict:
    """Regions from a fit report, audited on ``spec``'s data.

    Groups are the distinct values of ``ellipse.group_column`` (or its
    ``bins`` quantile classes); a ``grid`` restricts and orders them.
    """
    params = params_from_json(fit_report["params"])
    if len(params.Bs) != 1 and fit_report.get("rank", 1) != len(params.Bs):
        raise InputError("fit report parameters are inconsistent")
    if ellipse.group_column is None:
        raise InputError("--group is required")
    extra = (ellipse.group_column,)
    loaded = load_dataset(spec, extra)
    data = loaded.data
    if (data.p, data.q, data.q_m) != (params.p, params.q, params.q_m):
        raise InputError("data columns do not match the dimensions of the fit report")
    gvals = loaded.columns[ellipse.group_column]
    order = None
    if bins:
        groups = quantile_groups(gvals, bins)
        order = list(range(bins))
    else:
        groups = gvals
        if ellipse.grid is not None:
            order = [float(g) for g in ellipse.grid]
    reference = ols_params(data)
    audit, warnings = coverage_audit(params, reference, data, groups, ellipse.level, order)
    geometry = data.p == 2
    if not geometry:
        warnings.append("ellipse axes are reported for p = 2 only")
    regions = []
    for g in audit:
        regions.append({
            "group": g["group"],
            "n": g["n"],
            "heteroscedastic": {**_region_json(g["region"], geometry), "coverage": g["coverage"]},
            "homoscedastic": {**_region_json(g["reference_region"], geometry), "coverage": g["reference_coverage"]},
        })
    total = sum(g["n"] for g in audit)
    return {
        "columns": _columns_json(spec),
        "rows_used": loaded.rows_used,
        "rows_dropped": loaded.rows_dropped,
        "params": params_json(params),
        "reference_params": params_json(reference),
        "level": ellipse.level,
        "group_column": ellipse.group_column,
        "bins": bins,
        "regions": regions,
        "overall_coverage": {
            "heteroscedastic": sum(g["coverage"] * g["n"] for g in audit) / total if total else None,
            "homoscedastic": sum(g["reference_coverage"] * g["n"] for g in audit) / total if total else None,
        },
        "warnings": warnings,
    }


def cmd_simulate(scenario: SimScenario, study: str, config: EmConfig) -> dict:
    if scenario.design == "additive_three_regressor":
        report = run_additive_study(scenario, config)
    elif study == "coverage":
        report = run_coverage_study(scenario, config)
    else:
        report = run_mse_study(scenario, config)
    return {"params": None, "study": report.to_dict()}


# ---------------------------------------------------------------- argparse

def _split(s: str | None):
    if s is None:
        return None
    return tuple(c.strip() for c in s.split(",") if c.strip())


def _add_data_flags(sp):
    sp.add_argument("--csv", required=True, help="input CSV with a header row")
    sp.add_argument("--y", required=True, help="comma-separated response columns")
    sp.add_argument("--x", required=True, help="comma-separated covariance regressors")
    sp.add_argument("--w-cols", help="comma-separated mean regressors (default: --x)")
    sp.add_argument("--derive", action="append", default=[], metavar="NAME=EXPR",
                    help="derived column: sqrt(col), square(col), product(a,b) or 1")


def _add_fit_flags(sp):
    sp.add_argument("--rank", type=int, default=1)
    sp.add_argument("--method", choices=("em", "gibbs"), default="em")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--max-iters", type=int)
    sp.add_argument("--rel-tol", type=float)
    sp.add_argument("--restarts", type=int, help="number of random EM starts")
    sp.add_argument("--n-iter", type=int, help="Gibbs sweeps")
    sp.add_argument("--burn-in", type=int)
    sp.add_argument("--thin", type=int)


def _add_output_flags(sp):
    sp.add_argument("--json-out", help="write JSON here instead of stdout")
    sp.add_argument("--timestamp", action="store_true", help="add a timestamp (excluded from the hash)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="covreg", description="Covariance regression fitting and inference.")
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="fit a covariance regression model")
    _add_data_flags(fit)
    _add_fit_flags(fit)
    fit.add_argument("--level", type=float, default=0.95)
    fit.add_argument("--strict", action="store_true", help="exit 4 if EM does not converge")
    _add_output_flags(fit)

    lr = sub.add_parser("lrtest", help="likelihood-ratio test between ranks")
    _add_data_flags(lr)
    _add_fit_flags(lr)
    lr.add_argument("--rank-null", type=int, default=0, help="0 is the homoscedastic model")
    lr.add_argument("--df", type=int, help="degrees of freedom (required unless 0 vs 1)")
    lr.add_argument("--alpha", type=float, default=0.05)
    lr.add_argument("--strict", action="store_true")
    _add_output_flags(lr)

    pr = sub.add_parser("predict-region", help="prediction ellipses with a coverage audit")
    pr.add_argument("--fit", required=True, help="JSON report from `covreg fit`")
    pr.add_argument("--csv", required=True)
    pr.add_argument("--y", help="response columns (default: from the fit report)")
    pr.add_argument("--x", help="covariance regressors (default: from the fit report)")
    pr.add_argument("--w-cols")
    pr.add_argument("--derive", action="append", default=None, metavar="NAME=EXPR")
    pr.add_argument("--group", required=True, help="column defining the groups")
    pr.add_argument("--grid", help="comma-separated group values to report, in order")
    pr.add_argument("--bins", type=int, help="group by this many quantile classes of --group")
    pr.add_argument("--level", type=float, default=0.9)
    pr.add_argument("--seed", type=int, default=0)
    _add_output_flags(pr)

    sim = sub.add_parser("simulate", help="run a Monte Carlo study")
    sim.add_argument("--design", choices=("single_x", "additive", "additive_three_regressor"), default="single_x")
    sim.add_argument("--study", choices=("mse", "coverage"), default="mse",
                     help="single_x study type; the additive design always scores g")
    sim.add_argument("--w", type=float, default=1.0)
    sim.add_argument("--n", type=int, default=200)
    sim.add_argument("--reps", type=int, default=200)
    sim.add_argument("--full-scale", action="store_true", help="use 1000 replications")
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--alpha", type=float, default=0.05)
    sim.add_argument("--restarts", type=int)
    _add_output_flags(sim)
    return parser


def _overrides(args, names) -> dict:
    return {k: getattr(args, a) for a, k in names if getattr(args, a, None) is not None}


def _spec_from_args(args, defaults: dict | None = None) -> FitSpec:
    defaults = defaults or {}
    y = _split(args.y) or tuple(defaults.get("y", ()))
    x = _split(args.x) or tuple(defaults.get("x", ()))
    if args.w_cols is not None:
        w = _split(args.w_cols)
    elif args.x is None and "w" in defaults:
        w = tuple(defaults["w"])
    else:
        w = None
    derive = args.derive if args.derive is not None else defaults.get("derive", [])
    if not y or not x:
        raise InputError("--y and --x are required")
    return FitSpec(
        csv_path=args.csv,
        response_columns=y,
        cov_regressor_columns=x,
        mean_regressor_columns=w,
        rank=getattr(args, "rank", 1),
        method=getattr(args, "method", "em"),
        seed=args.seed,
        derive=tuple(derive),
        em=_overrides(args, [("max_iters", "max_iters"), ("rel_tol", "rel_tol"), ("restarts", "n_restarts")]),
        gibbs=_overrides(args, [("n_iter", "n_iter"), ("burn_in", "burn_in"), ("thin", "thin")]),
    )


def run(argv=None) -> tuple[int, dict | None]:
    """Parse ``argv`` and execute; returns the exit code and the report."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return (EXIT_INPUT if exc.code else EXIT_OK), None
    code = EXIT_OK
    try:
        if args.command == "fit":
            spec = _spec_from_args(args)
            body, ok = cmd_fit(spec, args.level)
            if args.strict and not ok:
                code = EXIT_NONCONVERGED
        elif args.command == "lrtest":
            spec = _spec_from_args(args)
            body, ok = cmd_lrtest(spec, args.alpha, args.rank_null, args.df)
            if args.strict and not ok:
                code = EXIT_NONCONVERGED
        elif args.command == "predict-region":
            try:
                with open(args.fit, encoding="utf-8") as fh:
                    fit_report = json.load(fh)
            except (OSError, json.JSONDecodeError) as exc:
                raise InputError(f"cannot read fit report {args.fit}: {exc}") from exc
            spec = _spec_from_args(args, fit_report.get("columns", {}))
            grid = tuple(float(v) for v in _split(args.grid)) if args.grid else None
            ellipse = EllipseSpec(level=args.level, group_column=args.group, grid=grid)
            body = cmd_predict_region(fit_report, spec, ellipse, args.bins)
        else:
            design = "additive_three_regressor" if args.design.startswith("additive") else "single_x"
            reps = 1000 if args.full_scale else args.reps
            scenario = SimScenario(w=args.w, n=args.n, design=design, reps=reps, seed=args.seed, alpha=args.alpha)
            config = EmConfig(**({"n_restarts": args.restarts} if args.restarts is not None else {}))
            body = cmd_simulate(scenario, args.study, config)
    except InputError as exc:
        print(f"covreg: error: {exc}", file=sys.stderr)
        return EXIT_INPUT, None
    except RankDeficiencyError as exc:
        print(f"covreg: rank-deficient design: {exc}", file=sys.stderr)
        return EXIT_RANK, None
    except ValueError as exc:
        print(f"covreg: error: {exc}", file=sys.stderr)
        return EXIT_INPUT, None
    except (CovRegError, np.linalg.LinAlgError) as exc:
        print(f"covreg: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC, None
    report = finalize(args.command, args.seed, body, args.timestamp)
    if code == EXIT_NONCONVERGED:
        print("covreg: EM did not converge (--strict)", file=sys.stderr)
    text = json.dumps(report, indent=2, sort_keys=True, allow_nan=False) + "\n"
    if args.json_out:
        try:
            with open(args.json_out, "w", encoding="utf-8") as fh:
                fh.write(text)
        except OSError as exc:
            print(f"covreg: error: cannot write {args.json_out}: {exc}", file=sys.stderr)
            return EXIT_INPUT, report
    else:
        sys.stdout.write(text)
    return code, report


def main(argv=None) -> int:
    return run(argv)[0]


if __name__ == "__main__":
    sys.exit(main())
