"""Command-line entry point: ``forestiv <command> [options]``.

Settings come from four layers, later ones winning::

    built-in defaults < --preset NAME < --config FILE < command-line flags

A config file is TOML with an optional top level (``name``, ``seed``) and
the sections listed in :data:`SCHEMA`; unknown sections or keys are
rejected before anything runs. Exit status is 0 on success, 1 when a
computation fails and 2 for bad input or configuration.
"""

import argparse
import csv
import json
import math
import os
import sys
from dataclasses import replace
from importlib import resources
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import regression as reg
from ._seeding import derive_seed
from .baselines import SimexConfig, estimate_misclassification, mc_simex, simex
from .data import PARTITION_COLUMN, TEST, DataError, EconSample, load_csv, save_csv, split
from .forest import ForestModel, ForestParams, fit_forest, predict_forest, tree_prediction_matrix
from .procedure import (
    BinaryCellCounts,
    NoInstrumentsError,
    averaging_estimate,
    biased_estimate,
    binary_cov_diagnostics,
    forest_iv_from_predictions,
    instrument_diagnostics,
    label_estimate,
    sample_split_iv,
    subset_tree_iv,
    theorem1_diagnostic,
)
from .simlab import (
    SWEEP_AXES,
    DGPSpec,
    Dist,
    ExperimentConfig,
    TruthSpec,
    run_experiment,
    sensitivity_sweep,
    simulate_econ,
)

SCHEMA = {
    "": {"name", "seed"},
    "forest": {"n_trees", "mtry", "min_node", "task", "bootstrap"},
    "truth": {"p", "components", "weights", "zeta_sd", "loc", "scale"},
    "dgp": {"beta", "controls", "noise_sd", "error_corr"},
    "experiment": {"n_train", "n_test", "n_unlabel", "methods", "rounds", "alpha",
                   "final_sample", "n_folds", "lambda_rule", "subset_q", "subset_draws"},
    "simex": {"lambda_grid", "B", "degree"},
    "data": {"path", "schema", "truth", "n_train", "n_test"},
    "econ": {"path", "y", "controls"},
    "sweep": {"axis", "values"},
}
ESTIMATE_MODES = ("biased", "unbiased", "forestiv", "sample-split", "subset", "averaging",
                  "simex", "mcsimex")
BENCHMARKS = ("comparison", "sweep", "blindspot")


class ConfigError(ValueError):
    """Malformed, unknown or inconsistent configuration."""


# ---------------------------------------------------------------- configuration


def available_presets():
    return sorted(p.name[:-5] for p in resources.files("forestiv.presets").iterdir()
                  if p.name.endswith(".toml"))


def _parse_toml(text, origin):
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{origin}: {exc}") from None
    validate(doc, origin)
    return doc


def validate(doc, origin="config"):
    """Reject unknown sections and keys."""
    for key, value in doc.items():
        if isinstance(value, dict):
            if key not in SCHEMA or key == "":
                raise ConfigError(f"{origin}: unknown section [{key}]")
            extra = sorted(set(value) - SCHEMA[key])
            if extra:
                raise ConfigError(f"{origin}: unknown keys in [{key}]: {', '.join(extra)}")
        elif key not in SCHEMA[""]:
            raise ConfigError(f"{origin}: unknown top-level key {key!r}")


def load_preset(name):
    if name not in available_presets():
        raise ConfigError(f"unknown preset {name!r}; choose from {available_presets()}")
    text = resources.files("forestiv.presets").joinpath(f"{name}.toml").read_text()
    return _parse_toml(text, f"preset {name}")


def load_config(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"file not found: {path}")
    return _parse_toml(path.read_text(), str(path))


def merge(base, over):
    """Section-wise merge; keys in ``over`` replace those in ``base``."""
    out = {k: dict(v) if isinstance(v, dict) else v for k, v in base.items()}
    for k, v in over.items():
        if isinstance(v, dict):
            out.setdefault(k, {}).update(v)
        else:
            out[k] = v
    return out


def resolve(args):
    """Combine preset, config file and flags into one document."""
    doc = {}
    if getattr(args, "preset", None):
        doc = load_preset(args.preset)
    if getattr(args, "config", None):
        doc = merge(doc, load_config(args.config))
    flags = {}
    if getattr(args, "seed", None) is not None:
        flags["seed"] = args.seed
    exp = {}
    for key in ("rounds", "alpha"):
        if getattr(args, key, None) is not None:
            exp[key] = getattr(args, key)
    if exp:
        flags["experiment"] = exp
    return merge(doc, flags)


def _section(doc, name):
    return doc.get(name, {})


def forest_params(doc):
    try:
        return ForestParams(**_section(doc, "forest"))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[forest]: {exc}") from None


def experiment_config(doc):
    """Build an :class:`ExperimentConfig`; any problem becomes a ConfigError."""
    try:
        forest = forest_params(doc)
        truth = TruthSpec(task=forest.task, **_section(doc, "truth"))
        dgp_doc = dict(_section(doc, "dgp"))
        if "controls" in dgp_doc:
            dgp_doc["control_dists"] = tuple(Dist.parse(c) for c in dgp_doc.pop("controls"))
        if "beta" in dgp_doc:
            dgp_doc["beta"] = tuple(dgp_doc["beta"])
        dgp = DGPSpec(**dgp_doc)
        sx = dict(_section(doc, "simex"))
        if "lambda_grid" in sx:
            sx["lambda_grid"] = tuple(sx["lambda_grid"])
        exp = dict(_section(doc, "experiment"))
        if "methods" in exp:
            exp["methods"] = tuple(exp["methods"])
        data = _section(doc, "data")
        return ExperimentConfig(
            dgp=dgp, truth=truth, forest=forest, simex=SimexConfig(**sx),
            master_seed=int(doc.get("seed", 0)), name=str(doc.get("name", "experiment")),
            data_path=data.get("path"), schema=data.get("schema"), **exp)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


# ---------------------------------------------------------------- data plumbing


def prepare_dataset(doc, data_path, truth=None):
    """Load the CSV and partition it unless it already carries tags.

    ``[data] truth`` names the truth column and makes every other column a
    numeric feature; ``[data] schema`` gives full control instead. Without a
    ``__partition`` column, ``[data] n_train`` and ``n_test``
    rows are drawn among rows with truth (defaults: half and a tenth of
    them) using the seed's ``split`` stream, so every command that reads
    the same file with the same seed sees the same partition.
    """
    sec = _section(doc, "data")
    path = data_path or sec.get("path")
    if path is None:
        raise ConfigError("no data file given (--data or [data] path)")
    schema = sec.get("schema")
    truth_col = truth or sec.get("truth")
    if schema is None and truth_col is not None:
        schema = {c: "feature" for c in _header(path) if c != PARTITION_COLUMN}
        if truth_col not in schema:
            raise DataError(f"{path}: truth column {truth_col!r} not found")
        schema[truth_col] = "truth"
    d = load_csv(path, schema)
    if d.truth is None:
        raise DataError("dataset has no truth column; declare one in [data] schema")
    if _has_partition(path):
        if d.counts()["train"] == 0:
            raise DataError(f"{path}: partition column tags no training rows")
        return d
    n_lab = int(np.sum(np.isfinite(d.truth)))
    n_train = int(sec.get("n_train", n_lab // 2))
    n_test = int(sec.get("n_test", n_lab // 10))
    return split(d, n_train, n_test, derive_seed(int(doc.get("seed", 0)), "split"))


def _header(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"file not found: {path}")
    with path.open(newline="") as fh:
        return next(csv.reader(fh), [])


def _has_partition(path):
    return PARTITION_COLUMN in _header(path)


def load_or_fit_forest(doc, d, forest_path, threads):
    if forest_path:
        path = Path(forest_path)
        if not path.exists():
            raise FileNotFoundError(f"file not found: {path}")
        try:
            forest = ForestModel.from_json(path.read_text())
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise DataError(f"{path}: not a forest file ({exc})") from None
        if forest.n_features != d.p:
            raise DataError(f"forest expects {forest.n_features} features, data has {d.p}")
        return forest
    return fit_forest(d, forest_params(doc), derive_seed(int(doc.get("seed", 0)), "forest"),
                      threads)


def econ_sample(doc, d, xhat, econ_path):
    """Regression sample aligned with ``d``: read from CSV or simulated.

    The CSV needs one row per dataset row, the outcome column (``[econ] y``,
    default ``y``) and the controls (``[econ] controls``, default every
    other column); an intercept is prepended. Without a CSV the outcome is
    simulated from ``[dgp]`` using the truth, which must then be complete.
    """
    sec = _section(doc, "econ")
    path = econ_path or sec.get("path")
    if path is None:
        if np.any(np.isnan(d.truth)):
            raise DataError("simulating the outcome needs truth on every row; "
                            "supply an outcome file with --econ")
        dgp = experiment_config(doc).dgp
        return simulate_econ(dgp, d.truth, derive_seed(int(doc.get("seed", 0)), "econ"),
                             xhat - d.truth)
    y_col = sec.get("y", "y")
    table = load_csv(path)
    names = list(table.feature_names)
    if y_col not in names:
        raise DataError(f"{path}: outcome column {y_col!r} not found")
    controls = sec.get("controls", [c for c in names if c != y_col])
    missing = [c for c in controls if c not in names]
    if missing:
        raise DataError(f"{path}: control columns {missing} not found")
    if table.n != d.n:
        raise DataError(f"{path}: {table.n} rows, dataset has {d.n}")
    F = table.features
    Z = np.column_stack([np.ones(d.n)] + [F[:, names.index(c)] for c in controls])
    return EconSample(F[:, names.index(y_col)], np.where(np.isnan(d.truth), xhat, d.truth), Z,
                      x_name=d.truth_name, control_names=("const",) + tuple(controls))


def _write(path, text):
    if path is None or path == "-":
        sys.stdout.write(text if text.endswith("\n") else text + "\n")
        return
    path = Path(path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True)
    path.write_text(text)


def _timestamped(doc, args):
    if not args.no_timestamp:
        from datetime import datetime, timezone

        doc = dict(doc, timestamp=datetime.now(timezone.utc).isoformat())
    return json.dumps(_jsonable(doc), sort_keys=True, indent=1)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


# ---------------------------------------------------------------- commands


def cmd_fit_forest(args):
    doc = resolve(args)
    d = prepare_dataset(doc, args.data, args.truth)
    forest = load_or_fit_forest(doc, d, None, args.threads)
    _write(args.out, forest.to_json())
    if args.partitioned:
        save_csv(d, args.partitioned)
    test = d.rows(TEST)
    if test.size == 0:
        print("no test rows; skipped holdout metric")
    elif forest.classification:
        acc = np.mean(predict_forest(forest, d.features[test]) == d.truth[test])
        print(f"test accuracy: {acc:.4f} ({test.size} rows)")
    else:
        err = predict_forest(forest, d.features[test]) - d.truth[test]
        print(f"test RMSE: {np.sqrt(np.mean(err ** 2)):.6g} ({test.size} rows)")
    return 0


def cmd_estimate(args):
    doc = resolve(args)
    exp = experiment_config(doc)
    d = prepare_dataset(doc, args.data, args.truth)
    forest = load_or_fit_forest(doc, d, args.forest, args.threads)
    classify = forest.classification
    if args.mode == "simex" and classify:
        raise ConfigError("simex needs a continuous covariate; use mcsimex for a binary one")
    if args.mode == "mcsimex" and not classify:
        raise ConfigError("mcsimex needs a binary covariate; use simex for a continuous one")

    P = tree_prediction_matrix(forest, d.features)
    xhat = predict_forest(forest, d.features)
    econ = econ_sample(doc, d, xhat, args.econ)
    y, Z, part, truth = econ.y, econ.controls, d.partition, d.truth
    names = econ.control_names or None
    xn = econ.x_name
    seed = exp.master_seed
    test = d.rows(TEST)
    final = np.flatnonzero(part == "unlabel") if exp.final_sample == "unlabel" \
        else np.arange(d.n)

    doc_out = {"mode": args.mode}
    if args.mode in ("forestiv", "averaging", "subset"):
        if args.mode == "subset":
            out = subset_tree_iv(P, truth, part, y, Z, exp.subset_q, exp.subset_draws,
                                 derive_seed(seed, "subset"), exp.alpha, exp.final_sample,
                                 exp.n_folds, args.threads, xn, names, exp.lambda_rule)
        else:
            out = forest_iv_from_predictions(P, truth, part, y, Z, exp.alpha, exp.final_sample,
                                             exp.n_folds, derive_seed(seed, "lasso"),
                                             args.threads, xn, names, exp.lambda_rule)
        doc_out.update(out.to_dict())
        if args.mode == "averaging":
            if out.retained():
                doc_out["averaging"] = averaging_estimate(out).to_dict()
            else:
                doc_out["averaging"] = None
        if args.diagnose:
            doc_out["diagnostics"] = dict(
                doc_out["diagnostics"],
                instruments=instrument_diagnostics(out, P, truth, part, Z),
                theorem1=theorem1_diagnostic(P[test], truth[test]).to_dict())
        if args.csv:
            _write(args.csv, out.to_csv())
    else:
        if args.mode == "biased":
            est = biased_estimate(xhat, y, Z, part, exp.final_sample, xn, names)
        elif args.mode == "unbiased":
            est = label_estimate(y, truth, Z, part, xn, names)
        elif args.mode == "sample-split":
            est = sample_split_iv(d, y, Z, forest_params(doc), derive_seed(seed, "sample-split"),
                                  exp.final_sample, args.threads, xn, names)
        elif args.mode == "simex":
            sigma_e = float(np.std(xhat[test] - truth[test], ddof=1))
            est = simex(y[final], xhat[final], Z[final], sigma_e,
                        replace(exp.simex, seed=derive_seed(seed, "simex")), xn, names)
        else:
            Pi = estimate_misclassification(xhat[test], truth[test])
            est = mc_simex(y[final], xhat[final], Z[final], Pi,
                           replace(exp.simex, seed=derive_seed(seed, "mcsimex")), xn, names)
        doc_out["estimate"] = est.to_dict()
        if args.diagnose:
            doc_out["diagnostics"] = {
                "theorem1": theorem1_diagnostic(P[test], truth[test]).to_dict()}
    _write(args.out, _timestamped(doc_out, args))
    if doc_out.get("no_valid_tuple"):
        print("no valid tuple: every candidate was rejected by the Hotelling test",
              file=sys.stderr)
    return 0


def _print_summary(rep, file=sys.stdout):
    print(f"{'method':<14}{'coef':<8}{'mean':>10}{'sd':>10}{'p':>8}{'n_ok':>6}", file=file)
    for m, table in rep.summary.items():
        for c, s in table.items():
            print(f"{m:<14}{c:<8}{s['mean']:>10.4f}{s['sd']:>10.4f}{s['p_value']:>8.3f}"
                  f"{s['n_ok']:>6d}", file=file)


def _write_report(rep, out_dir, stem, args):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{stem}.json").write_text(rep.to_json(timestamp=not args.no_timestamp))
    (out / f"{stem}.csv").write_text(rep.to_csv())
    (out / f"{stem}_raw.csv").write_text(rep.raw_csv())


def cmd_simulate(args):
    doc = resolve(args)
    cfg = experiment_config(doc)
    rep = run_experiment(cfg, args.threads)
    _write_report(rep, args.out, cfg.name, args)
    _print_summary(rep)
    return 0


def cmd_benchmark(args):
    doc = resolve(args)
    kind = args.kind
    if kind == "blindspot" and not args.preset and not args.config:
        doc = merge(load_preset("blindspot"), doc)
    cfg = experiment_config(doc)
    if kind == "sweep":
        sw = _section(doc, "sweep")
        axis = args.axis or sw.get("axis")
        values = args.values or sw.get("values")
        if axis not in SWEEP_AXES or not values:
            raise ConfigError(f"sweep needs an axis in {SWEEP_AXES} and a list of values")
        try:
            reps = sensitivity_sweep(cfg, axis, values, args.threads)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        for v, rep in zip(values, reps):
            _write_report(rep, args.out, f"{cfg.name}_{axis}_{v}", args)
            print(f"# {axis} = {v}")
            _print_summary(rep)
            if rep.extras:
                print(f"  extras: {rep.extras}")
        return 0
    if kind == "blindspot" and cfg.dgp.error_corr is None:
        raise ConfigError("blindspot needs [dgp] error_corr = [k, rho]")
    rep = run_experiment(cfg, args.threads)
    _write_report(rep, args.out, cfg.name, args)
    _print_summary(rep)
    if kind == "blindspot":
        k = cfg.dgp.error_corr[0]
        coef = rep.names[k + 1]
        truth = cfg.dgp.beta[k + 1]
        print(f"absolute bias on {coef} (truth {truth}):")
        for m in rep.summary:
            print(f"  {m:<12}{abs(rep.summary[m][coef]['mean'] - truth):.4f}")
    return 0


def cmd_diagnose(args):
    doc = resolve(args)
    d = prepare_dataset(doc, args.data, args.truth)
    forest = load_or_fit_forest(doc, d, args.forest, args.threads)
    test = d.rows(TEST)
    P = tree_prediction_matrix(forest, d.features[test])
    x = d.truth[test]
    t1 = theorem1_diagnostic(P, x)
    out = {"n_test": int(test.size), "n_trees": forest.n_trees, "theorem1": t1.to_dict()}
    if forest.classification:
        M = forest.n_trees
        agree = checked = degenerate = positive = t3_ok = 0
        for i in range(M):
            for j in range(i + 1, M):
                r = binary_cov_diagnostics(BinaryCellCounts.from_vectors(x, P[:, i], P[:, j]))
                t3_ok += r["theorem3_sign_ok"]
                if r["degenerate"]:
                    degenerate += 1
                    continue
                checked += 1
                positive += r["cov_ei_ej"] > 0
                agree += (r["cov_ei_ej"] > 0) == r["theorem4_condition"]
        n_pairs = M * (M - 1) // 2
        out["binary"] = {
            "n_pairs": n_pairs,
            "n_degenerate": degenerate,
            "share_error_cov_positive": positive / checked if checked else None,
            "theorem4_agreement": agree / checked if checked else None,
            "theorem3_sign_ok": t3_ok / n_pairs if n_pairs else None,
        }
    _write(args.out, _timestamped(out, args))
    return 0


# ---------------------------------------------------------------- argument parsing


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file")
    common.add_argument("--preset", help=f"bundled preset: {', '.join(available_presets())}")
    common.add_argument("--seed", type=int, help="master seed (overrides config)")
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                        help="worker threads (default: available cores)")
    common.add_argument("--truth", help="truth column of the data CSV (or [data] truth)")
    common.add_argument("--no-timestamp", action="store_true",
                        help="omit the timestamp so reruns are byte-identical")

    p = argparse.ArgumentParser(prog="forestiv", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit-forest", parents=[common], help="fit and save a forest")
    f.add_argument("--data", help="CSV dataset (or [data] path)")
    f.add_argument("--out", required=True, help="forest JSON output")
    f.add_argument("--partitioned", help="also write the partitioned dataset CSV here")
    f.set_defaults(func=cmd_fit_forest)

    e = sub.add_parser("estimate", parents=[common], help="estimate the regression")
    e.add_argument("--data", help="CSV dataset (or [data] path)")
    e.add_argument("--forest", help="forest JSON; fitted from the data when omitted")
    e.add_argument("--econ", help="outcome and controls CSV; simulated from [dgp] when omitted")
    e.add_argument("--mode", choices=ESTIMATE_MODES, default="forestiv")
    e.add_argument("--alpha", type=float, help="Hotelling test level")
    e.add_argument("--diagnose", action="store_true",
                   help="add instrument strength and exclusion diagnostics")
    e.add_argument("--csv", help="per-candidate table CSV (forestiv, averaging, subset)")
    e.add_argument("--out", help="JSON output (default: stdout)")
    e.set_defaults(func=cmd_estimate)

    s = sub.add_parser("simulate", parents=[common], help="run a Monte Carlo experiment")
    s.add_argument("--rounds", type=int)
    s.add_argument("--out", default="forestiv_out", help="output directory")
    s.set_defaults(func=cmd_simulate)

    b = sub.add_parser("benchmark", parents=[common], help="comparison, sweep or blindspot run")
    b.add_argument("kind", choices=BENCHMARKS)
    b.add_argument("--rounds", type=int)
    b.add_argument("--axis", choices=SWEEP_AXES, help="sweep axis (or [sweep] axis)")
    b.add_argument("--values", type=float, nargs="+", help="sweep values (or [sweep] values)")
    b.add_argument("--out", default="forestiv_out", help="output directory")
    b.set_defaults(func=cmd_benchmark)

    g = sub.add_parser("diagnose", parents=[common], help="tree error diagnostics")
    g.add_argument("--data", help="CSV dataset (or [data] path)")
    g.add_argument("--forest", help="forest JSON; fitted from the data when omitted")
    g.add_argument("--out", help="JSON output (default: stdout)")
    g.set_defaults(func=cmd_diagnose)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 2
    if getattr(args, "values", None):
        args.values = [int(v) if float(v).is_integer() and args.axis != "noise_sd" else v
                       for v in args.values]
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        msg = str(exc) if str(exc).startswith("file not found") else \
            f"file not found: {exc.filename}"
        print(f"error: {msg}", file=sys.stderr)
        return 2
    except (ConfigError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (NoInstrumentsError, reg.RankDeficientError, np.linalg.LinAlgError,
            RuntimeError, ValueError) as exc:
        print(f"error: computation failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
