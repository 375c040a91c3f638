"""Command-line interface: ``geoexpectile {fit,simulate,coverage-study,true-expectiles}``.

Every command reads an optional YAML (or JSON) config file, applies
``--set key.path=value`` overrides and the convenience flags, writes its
tables as CSV and records the fully resolved config in ``manifest.json``.
Passing that manifest back as ``--config`` reproduces the run.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from . import distributions as dist
from .io import DataError, Table, parse_data, write_csv, write_json
from .laws import LawsConfig, iwls_backfit, laws_summary, select_lambda_cv
from .mcmc import ChainConfig, posterior_summary, run_chain
from .simulation import EstimatorSettings, ScenarioSpec, derive_seed, run_study
from .terms import (SplineSpec, dummy_code, linear_term, mrf_term, pspline_term,
                    read_adjacency)

log = logging.getLogger("geoexpectile")

OUTPUT_ENV = "GEOEXPECTILE_OUTPUT_DIR"
COMMANDS = ("fit", "simulate", "coverage-study", "true-expectiles")

DEFAULTS = {
    "seed": 0,
    "jobs": None,
    "output_dir": None,
    "tau": [0.5],
    "methods": ["bayes"],
    "level": 0.95,
    "grid_size": 100,
    "data": {"path": None, "response": None, "adjacency": None},
    "terms": [],
    "spline": {"degree": 3, "inner_knots": 20, "difference_order": 2},
    "mcmc": {"iterations": 35000, "burn_in": 5000, "thinning": 30,
             "a0": 0.001, "b0": 0.001, "a": 0.001, "b": 0.001},
    "laws": {"max_backfit_iterations": 200, "convergence_tolerance": 1e-8,
             "lambda_grid": [float(v) for v in np.logspace(-4, 4, 10)], "cv_folds": 5},
    "scenario": {"model": "M1", "error": "normal-heteroscedastic", "n": 100,
                 "replications": 100},
    "law": {"name": "normal", "params": {}},
}


class CliError(Exception):
    """Invalid command-line input or configuration (exit status 2)."""

    def __init__(self, message: str, kind: str = "config"):
        super().__init__(message)
        self.kind = kind


class FitFailure(Exception):
    """At least one requested fit failed (exit status 1)."""


# configuration ----------------------------------------------------------------

def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path) -> dict:
    """Read a YAML config, or the ``config`` section of a run manifest."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
        # YAML 1.1 reads JSON exponents such as 1e-08 as strings
        raw = json.loads(text) if text.lstrip().startswith("{") else (yaml.safe_load(text) or {})
    except FileNotFoundError:
        raise CliError(f"config file {str(path)!r} not found") from None
    except json.JSONDecodeError as exc:
        raise CliError(f"cannot parse config {str(path)!r}: {exc}") from None
    except yaml.YAMLError as exc:
        raise CliError(f"cannot parse config {str(path)!r}: {' '.join(str(exc).split())}") from None
    if not isinstance(raw, dict):
        raise CliError(f"config {str(path)!r} must be a mapping")
    if "manifest_version" in raw:
        return raw["config"]
    base = path.parent
    data = raw.get("data") or {}
    for key in ("path", "adjacency"):
        if data.get(key):
            p = Path(data[key])
            data[key] = str(p if p.is_absolute() else (base / p).resolve())
    return raw


def _apply_set(cfg: dict, item: str) -> None:
    if "=" not in item:
        raise CliError(f"--set expects key=value, got {item!r}")
    key, value = item.split("=", 1)
    parts = key.strip().split(".")
    node = cfg
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise CliError(f"--set {key}: {p!r} is not a section")
    node[parts[-1]] = yaml.safe_load(value)


def _parse_taus(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise CliError(f"invalid tau list {text!r}") from None


def resolve_config(args) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if args.config:
        cfg = _merge(cfg, load_config(args.config))
    for item in args.set or []:
        _apply_set(cfg, item)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.jobs is not None:
        cfg["jobs"] = args.jobs
    if args.tau:
        cfg["tau"] = _parse_taus(args.tau)
    if getattr(args, "law", None):
        cfg["law"]["name"] = args.law
    for item in getattr(args, "param", None) or []:
        if "=" not in item:
            raise CliError(f"--param expects name=value, got {item!r}")
        k, v = item.split("=", 1)
        cfg["law"].setdefault("params", {})[k] = yaml.safe_load(v)
    out = args.out or cfg.get("output_dir") or os.environ.get(OUTPUT_ENV) or "geoexpectile-out"
    cfg["output_dir"] = str(Path(out).resolve())
    cfg["command"] = args.command
    if cfg.get("jobs") is None:
        cfg["jobs"] = os.cpu_count() or 1
    taus = cfg["tau"] if isinstance(cfg["tau"], list) else [cfg["tau"]]
    try:
        cfg["tau"] = [dist.Asymmetry(t).tau for t in taus]
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid tau: {exc}") from None
    return cfg


def chain_config(cfg: dict, seed: int) -> ChainConfig:
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return ChainConfig(seed=seed, **cfg["mcmc"])
    except TypeError as exc:
        raise CliError(f"mcmc section: {exc}") from None
    except ValueError as exc:
        raise CliError(f"mcmc section: {exc}") from None


def laws_config(cfg: dict, seed: int) -> LawsConfig:
    try:
        return LawsConfig(cv_seed=seed, **cfg["laws"])
    except (TypeError, ValueError) as exc:
        raise CliError(f"laws section: {exc}") from None


def spline_spec(opts: dict) -> SplineSpec:
    dom = opts.get("domain")
    try:
        return SplineSpec(degree=int(opts["degree"]), inner_knots=int(opts["inner_knots"]),
                          difference_order=int(opts["difference_order"]),
                          domain=tuple(dom) if dom is not None else None)
    except (TypeError, ValueError) as exc:
        raise CliError(f"spline options: {exc}") from None


# model construction -------------------------------------------------------------

def build_terms(cfg: dict, table: Table):
    """Turn the ``terms`` section into model terms plus display metadata."""
    terms, meta = [], []
    graph = None
    for k, spec in enumerate(cfg["terms"]):
        if not isinstance(spec, dict) or "covariate" not in spec:
            raise CliError(f"terms[{k}] needs a 'covariate' entry")
        cov = str(spec["covariate"])
        kind = spec.get("type", "linear")
        name = spec.get("name", cov)
        if cov not in table:
            raise CliError(f"unknown covariate {cov!r} (columns: {', '.join(table.names)})",
                           kind="unknown_covariate")
        try:
            if kind == "linear":
                if table.is_numeric(cov) and not spec.get("categorical", False):
                    terms.append(linear_term(name, table.numeric(cov), labels=(cov,)))
                    meta.append({"name": name, "kind": kind, "reference": None})
                else:
                    X, levels, ref = dummy_code(table.labels(cov))
                    terms.append(linear_term(name, X, labels=tuple(f"{cov}={lv}" for lv in levels)))
                    meta.append({"name": name, "kind": kind, "reference": f"{cov}={ref}"})
            elif kind == "pspline":
                opts = _merge(cfg["spline"], {k_: v for k_, v in spec.items()
                                              if k_ in ("degree", "inner_knots",
                                                        "difference_order", "domain")})
                x = table.numeric(cov)
                terms.append(pspline_term(name, x, spline_spec(opts).with_domain(x)))
                meta.append({"name": name, "kind": kind, "reference": None})
            elif kind == "mrf":
                if graph is None:
                    adj = cfg["data"].get("adjacency")
                    if not adj:
                        raise CliError("an mrf term needs data.adjacency")
                    graph = read_adjacency(adj)
                terms.append(mrf_term(name, table.labels(cov), graph))
                meta.append({"name": name, "kind": kind, "reference": None})
            else:
                raise CliError(f"terms[{k}]: unknown term type {kind!r}")
        except FileNotFoundError as exc:
            raise CliError(f"adjacency file not found: {exc.filename}") from None
        except DataError:
            raise
        except ValueError as exc:
            raise CliError(f"term {name!r}: {exc}") from None
    names = [m["name"] for m in meta]
    if len(set(names)) != len(names):
        raise CliError("term names must be unique (set 'name' to disambiguate)")
    return terms, meta


def _load_table(cfg):
    data = cfg["data"]
    if not data.get("path"):
        raise CliError("data.path is required")
    table = parse_data(data["path"])
    if not data.get("response"):
        raise CliError("data.response is required")
    if data["response"] not in table:
        raise CliError(f"unknown response column {data['response']!r}", kind="unknown_covariate")
    return table


def _fit_one(args):
    """Fit every requested method at one tau; runs in a worker process."""
    cfg, k = args
    table = _load_table(cfg)
    y = table.numeric(cfg["data"]["response"])
    terms, meta = build_terms(cfg, table)
    tau = cfg["tau"][k]
    grids = {}
    for t in terms:
        if t.kind == "pspline":
            grids[t.name] = np.linspace(t.domain[0], t.domain[1], int(cfg["grid_size"]))
    results, failures, info = [], [], []
    for method in cfg["methods"]:
        start = time.perf_counter()
        try:
            if method == "bayes":
                seed = derive_seed(cfg["seed"], k, 1)
                chain = run_chain(y, terms, tau, chain_config(cfg, seed))
                res = posterior_summary(chain, cfg["level"], terms, grids)
                info.append({"tau": tau, "method": method, "seed": seed,
                             "acceptance": chain.acceptance, "ridge_events": chain.ridge_events,
                             "factorization_failures": chain.factorization_failures,
                             "runtime_seconds": time.perf_counter() - start})
            elif method == "laws":
                lc = laws_config(cfg, int(cfg["seed"]))
                cv = select_lambda_cv(y, terms, tau, lc)
                fit = iwls_backfit(y, terms, tau, cv.lambdas, lc)
                res = laws_summary(fit, y, terms, cfg["level"], grids)
                info.append({"tau": tau, "method": method, "cv_seed": lc.cv_seed,
                             "lambdas": fit.lambdas, "converged": fit.converged,
                             "iterations": fit.iterations,
                             "runtime_seconds": time.perf_counter() - start})
            else:
                raise CliError(f"unknown method {method!r}")
            results.append(res)
        except CliError:
            raise
        except Exception as exc:
            failures.append({"tau": tau, "method": method,
                             "error": f"{type(exc).__name__}: {exc}"})
    return k, results, failures, info, meta


def _pmap(func, tasks, jobs):
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as pool:
            return list(pool.map(func, tasks))
    return [func(t) for t in tasks]


# commands ------------------------------------------------------------------------

COEF_HEADER = ["tau", "method", "term", "parameter", "estimate", "lower", "upper",
               "excludes_zero"]


def cmd_fit(cfg: dict) -> dict:
    if not cfg["terms"]:
        raise CliError("at least one term is required")
    for m in cfg["methods"]:
        if m not in ("bayes", "laws"):
            raise CliError(f"unknown method {m!r}")
    table = _load_table(cfg)
    table.numeric(cfg["data"]["response"])
    build_terms(cfg, table)  # validate before spawning work
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    runs = _pmap(_fit_one, [(cfg, k) for k in range(len(cfg["tau"]))], int(cfg["jobs"]))
    runs.sort(key=lambda r: r[0])

    coef_rows, curve_rows, spatial_rows, failures, info = [], [], [], [], []
    summary = []
    for _, results, fails, inf, meta in runs:
        failures.extend(fails)
        info.extend(inf)
        kinds = {m["name"]: m for m in meta}
        for res in results:
            tau, method = res.tau, res.method
            b = res.intercept
            coef_rows.append([tau, method, "(Intercept)", "(Intercept)", b.estimate[0],
                              b.lower[0], b.upper[0], bool(b.excludes_zero()[0])])
            summary.append(f"tau={tau:g} method={method} level={res.level:g}")
            summary.append(f"  {'(Intercept)':<32}{b.estimate[0]:>12.4f}  "
                           f"({b.lower[0]:.4f}, {b.upper[0]:.4f})"
                           f"{' *' if b.excludes_zero()[0] else ''}")
            for name, band in res.effects.items():
                m = kinds[name]
                if m["kind"] == "linear":
                    t_labels = _term_labels(cfg, name, table)
                    for i, lab in enumerate(t_labels):
                        ex = bool(band.excludes_zero()[i])
                        coef_rows.append([tau, method, name, lab, band.estimate[i],
                                          band.lower[i], band.upper[i], ex])
                        ref = f" [reference: {m['reference']}]" if m["reference"] else ""
                        star = " *" if ex else ""
                        summary.append(f"  {lab + ref:<32}{band.estimate[i]:>12.4f}  "
                                       f"({band.lower[i]:.4f}, {band.upper[i]:.4f}){star}")
                elif m["kind"] == "mrf":
                    regions = _regions(cfg)
                    for i, region in enumerate(regions):
                        spatial_rows.append([tau, method, name, region, band.estimate[i],
                                             band.lower[i], band.upper[i],
                                             bool(band.excludes_zero()[i])])
            for name, curve in res.curves.items():
                cb = curve.band
                for i, x in enumerate(curve.grid):
                    curve_rows.append([tau, method, name, x, cb.estimate[i], cb.lower[i],
                                       cb.upper[i]])
            summary.append("")
    files = [
        write_csv(out / "coefficients.csv", COEF_HEADER, coef_rows),
        write_csv(out / "curves.csv", ["tau", "method", "term", "x", "estimate", "lower",
                                       "upper"], curve_rows),
        write_csv(out / "spatial.csv", ["tau", "method", "term", "region", "estimate",
                                        "lower", "upper", "excludes_zero"], spatial_rows),
    ]
    (out / "summary.txt").write_text(
        "Human-readable summary (not for parsing; '*' marks intervals excluding zero)\n\n"
        + "\n".join(summary), encoding="utf-8")
    return {"outputs": [f.name for f in files] + ["summary.txt"], "runs": info,
            "failures": failures}


def _term_labels(cfg, name, table):
    for spec in cfg["terms"]:
        if spec.get("name", spec["covariate"]) == name:
            cov = spec["covariate"]
            if table.is_numeric(cov) and not spec.get("categorical", False):
                return [cov]
            _, levels, _ = dummy_code(table.labels(cov))
            return [f"{cov}={lv}" for lv in levels]
    raise KeyError(name)


def _regions(cfg):
    return list(read_adjacency(cfg["data"]["adjacency"]).labels)


def _scenario(cfg) -> ScenarioSpec:
    sc = cfg["scenario"]
    try:
        return ScenarioSpec(model=sc["model"], error=sc["error"], n=int(sc["n"]),
                            replications=int(sc["replications"]), tau_list=tuple(cfg["tau"]),
                            seed=int(cfg["seed"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise CliError(f"scenario: {exc}") from None


def _study(cfg, kind) -> tuple:
    spec = _scenario(cfg)
    for m in cfg["methods"]:
        if m not in ("bayes", "laws"):
            raise CliError(f"unknown method {m!r}")
    settings = EstimatorSettings(spline=spline_spec(cfg["spline"]),
                                 chain=chain_config(cfg, int(cfg["seed"])),
                                 laws=laws_config(cfg, int(cfg["seed"])),
                                 level=float(cfg["level"]), grid_size=int(cfg["grid_size"]))
    report = run_study(spec, cfg["methods"], settings, kind=kind, jobs=int(cfg["jobs"]))
    out = Path(cfg["output_dir"])
    files = [write_csv(out / "rmse.csv",
                       ["model", "error", "n", "tau", "method", "replication", "rmse"],
                       ([r["model"], r["error"], r["n"], r["tau"], r["method"],
                         r["replication"], r["rmse"]] for r in report.rmse_rows))]
    if kind == "interval":
        files.append(write_csv(out / "coverage.csv",
                               ["tau", "grid_z", "coverage", "min_width", "max_width", "method",
                                "mean_width"],
                               ([r["tau"], r["grid_z"], r["coverage"], r["min_width"],
                                 r["max_width"], r["method"], r["mean_width"]]
                                for r in report.interval_rows())))
    summary = {"replications": spec.replications, "failures": len(report.failures),
               "median_rmse": {f"{tau:g}/{m}": float(np.median(report.rmse_values(tau, m)))
                               for tau in spec.tau_list for m in report.methods
                               if report.rmse_values(tau, m).size}}
    files.append(write_json(out / "summary.json", summary))
    return {"outputs": [f.name for f in files], "failures": report.failures,
            "runtime_seconds": report.runtime}


def cmd_simulate(cfg: dict) -> dict:
    return _study(cfg, "point")


def cmd_coverage_study(cfg: dict) -> dict:
    return _study(cfg, "interval")


LAWS_BUILTIN = {
    "normal": (dist.normal_law, ("mu", "var"), {"mu": 0.0, "var": 1.0}),
    "exponential": (dist.exponential_law, ("rate",), {"rate": 1.0}),
    "t": (dist.student_t_law, ("df",), {}),
    "uniform": (dist.uniform_law, ("a", "b"), {"a": 0.0, "b": 1.0}),
}


def cmd_true_expectiles(cfg: dict) -> dict:
    name = cfg["law"].get("name")
    if name not in LAWS_BUILTIN:
        raise CliError(f"unknown law {name!r}; expected one of {sorted(LAWS_BUILTIN)}",
                       kind="unknown_law")
    factory, pnames, defaults = LAWS_BUILTIN[name]
    params = {**defaults, **(cfg["law"].get("params") or {})}
    unknown = set(params) - set(pnames)
    if unknown:
        raise CliError(f"law {name!r} has no parameter(s) {sorted(unknown)}")
    missing = [p for p in pnames if p not in params]
    if missing:
        raise CliError(f"law {name!r} needs parameter(s) {missing}")
    try:
        law = factory(*(float(params[p]) for p in pnames))
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid parameters for {name!r}: {exc}", kind="invalid_parameter") from None
    cfg["law"]["params"] = {p: float(params[p]) for p in pnames}
    rows = [[tau, dist.true_expectile(law, tau)] for tau in cfg["tau"]]
    f = write_csv(Path(cfg["output_dir"]) / "expectiles.csv", ["tau", "expectile"], rows)
    return {"outputs": [f.name], "failures": []}


HANDLERS = {"fit": cmd_fit, "simulate": cmd_simulate, "coverage-study": cmd_coverage_study,
            "true-expectiles": cmd_true_expectiles}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="geoexpectile",
                                     description="Bayesian and LAWS geoadditive expectile regression")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd, help_ in [("fit", "fit expectile models to a CSV data set"),
                       ("simulate", "point-estimation simulation study (RMSE)"),
                       ("coverage-study", "interval-estimation study (coverage, widths)"),
                       ("true-expectiles", "true expectiles of a built-in law")]:
        p = sub.add_parser(cmd, help=help_)
        p.add_argument("--config", "-c", help="YAML config or a run manifest.json")
        p.add_argument("--out", "-o", help=f"output directory (default ${OUTPUT_ENV})")
        p.add_argument("--seed", type=int)
        p.add_argument("--jobs", "-j", type=int, help="worker processes (default: CPU count)")
        p.add_argument("--tau", help="comma-separated asymmetry levels")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override any config key, e.g. mcmc.iterations=2000")
        p.add_argument("-v", "--verbose", action="store_true")
        if cmd == "true-expectiles":
            p.add_argument("--law", choices=sorted(LAWS_BUILTIN))
            p.add_argument("--param", action="append", metavar="NAME=VALUE")
    return parser


def _fail(kind: str, message: str, status: int) -> int:
    print(json.dumps({"error": kind, "message": " ".join(str(message).split())}), file=sys.stderr)
    return status


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    start = time.perf_counter()
    try:
        cfg = resolve_config(args)
        result = HANDLERS[args.command](cfg)
    except CliError as exc:
        return _fail(exc.kind, str(exc), 2)
    except DataError as exc:
        return _fail("data", str(exc), 2)
    except Exception as exc:  # any module failure
        return _fail(type(exc).__name__, str(exc), 1)
    manifest = {"manifest_version": 1, "package_version": __version__,
                "command": args.command, "config": cfg,
                "outputs": result["outputs"], "failures": result["failures"],
                "runs": result.get("runs", []),
                "runtime_seconds": time.perf_counter() - start}
    write_json(Path(cfg["output_dir"]) / "manifest.json", manifest)
    if result["failures"]:
        first = result["failures"][0]
        return _fail("fit_failed", f"{len(result['failures'])} fit(s) failed; first: {first}", 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
