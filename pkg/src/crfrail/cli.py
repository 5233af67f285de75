"""Command-line interface: ``crfrail fit | simulate | predict``.

Exit status: 0 success, 2 usage error, 3 invalid input, 4 non-convergence.
Every output directory receives a ``manifest.json`` recording the command,
resolved options, input digests, seed, version and wall-clock time.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .classify import MultinomialConfig, SeparationError, fit_multinomial, impute_types, \
    predict_probabilities
from .data import DataValidationError, Schema, effective_weights, load_dataset, \
    read_probabilities, write_labels, write_probabilities
from .simulate import ConfigError, load_config, run_replicates, summarize
from .solver import ConvergenceError, SolverOptions, fit
from .varcov import VarCovSpec

log = logging.getLogger("crfrail")

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_NOCONV = 0, 2, 3, 4
OUTPUT_ENV = "CRFRAIL_OUTPUT_DIR"
DEFAULT_OUTPUT = "crfrail-output"


class UsageError(Exception):
    pass


def _sig6(x) -> str:
    return f"{x:.6g}"


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get(OUTPUT_ENV) or DEFAULT_OUTPUT)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _options_record(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("handler",)}


def write_manifest(out: Path, command: str, args, inputs, started, seed=None, outputs=()):
    record = {
        "command": command,
        "argv": sys.argv[1:] if args.argv is None else args.argv,
        "options": _options_record(args),
        "inputs": {str(p): _sha256(p) for p in inputs},
        "seed": seed,
        "version": __version__,
        "wall_clock_seconds": time.time() - started,
        "outputs": sorted(outputs),
    }
    (out / "manifest.json").write_text(json.dumps(record, indent=2, default=str) + "\n",
                                       encoding="utf-8")


def _write_json(path: Path, record):
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_matrix(path: Path, M):
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in np.asarray(M):
            w.writerow([repr(float(x)) for x in row])


def _solver_options(args) -> SolverOptions:
    return SolverOptions(inner_tol=args.inner_tol, inner_max_iter=args.inner_max_iter,
                         theta_tol=args.theta_tol, outer_max_iter=args.outer_max_iter,
                         theta_score=args.theta_score, k2_sign=args.k2_sign,
                         variance=args.variance)


def _train_classifier(train, ridge):
    return fit_multinomial(train, MultinomialConfig(ridge=ridge))


# -- fit -----------------------------------------------------------------------------

HR_COLUMNS = ("cause", "covariate", "beta", "se", "hazard_ratio", "hr_lower", "hr_upper")


def cmd_fit(args) -> int:
    started = time.time()
    if args.train and args.probs:
        raise UsageError("give either --train or --probs, not both")
    if args.method in ("weighted", "imputed") and not (args.train or args.probs):
        raise UsageError(f"--train (or --probs) is required for --method {args.method}")
    inputs = [args.main]
    record = {"method": args.method}
    K = args.num_causes
    if args.method != "complete" and args.train:
        inputs.append(args.train)
        train = load_dataset(args.train, Schema(num_causes=K))
        K = train.num_causes
    main = load_dataset(args.main, Schema(num_causes=K))
    if args.method != "complete":
        if np.any(main.event_type > 0):
            log.info("masking event types present in %s (method=%s)", args.main, args.method)
        main = main.mask_event_types()
        if args.probs:
            inputs.append(args.probs)
            probs = read_probabilities(args.probs, main)
        else:
            model = _train_classifier(train, args.ridge)
            probs = predict_probabilities(model, main)
            record["classifier"] = json.loads(model.to_json())
        if args.method == "weighted":
            w = effective_weights(main, "weighted", probs=probs)
        else:
            w = effective_weights(main, "imputed", imputed=impute_types(probs))
    else:
        w = effective_weights(main, "complete")
    K = main.num_causes
    vc = VarCovSpec.exchangeable(K) if args.varcov == "exchangeable" else \
        VarCovSpec.unstructured(K)
    out = _out_dir(args)
    outputs = ["fit.json"]
    status = EXIT_OK
    try:
        result = fit(main, w, vc, _solver_options(args))
    except ConvergenceError as exc:
        log.error("%s", exc)
        result = exc.fit
        status = EXIT_NOCONV
        record["error"] = str(exc)
        if result is None:
            _write_json(out / "fit.json", record)
            write_manifest(out, "fit", args, inputs, started, outputs=outputs)
            return status
    record.update(result.to_record())
    _write_json(out / "fit.json", record)
    rows = result.hazard_ratio_table()
    with (out / "hazard_ratios.csv").open("w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(HR_COLUMNS)
        for r in rows:
            wr.writerow([r[c] if isinstance(r[c], (int, str)) else repr(r[c])
                         for c in HR_COLUMNS])
    outputs.append("hazard_ratios.csv")
    if args.write_variance:
        _write_matrix(out / "variance_hessian.csv", result.variance_hessian)
        _write_matrix(out / "variance_sandwich.csv", result.variance_sandwich)
        outputs += ["variance_hessian.csv", "variance_sandwich.csv"]
    write_manifest(out, "fit", args, inputs, started, outputs=outputs)

    print(f"method={args.method} clusters={main.num_clusters} units={main.num_units} "
          f"converged={result.converged}")
    for name, val in zip(result.theta.param_names, result.theta.theta):
        print(f"  {name} = {_sig6(val)}")
    for msg in result.warnings:
        print(f"  warning: {msg}")
    print("cause covariate beta se HR (95% CI)")
    for r in rows:
        print(f"{r['cause']} {r['covariate']} {_sig6(r['beta'])} {_sig6(r['se'])} "
              f"{_sig6(r['hazard_ratio'])} ({_sig6(r['hr_lower'])}, {_sig6(r['hr_upper'])})")
    return status


# -- simulate ------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    started = time.time()
    config = load_config(args.config, replicates=args.replicates, seed=args.seed,
                         method=args.method)
    results = run_replicates(config, jobs=max(1, args.jobs))
    summary = summarize(config, results)
    out = _out_dir(args)
    (out / "summary.csv").write_text(summary.summary_csv(), encoding="utf-8")
    (out / "audit.csv").write_text(summary.audit_csv(), encoding="utf-8")
    args_resolved = argparse.Namespace(**vars(args), resolved_config=config.to_dict())
    write_manifest(out, "simulate", args_resolved, [args.config], started, seed=config.seed,
                   outputs=["summary.csv", "audit.csv"])
    print(f"scenario={config.name} method={config.method} replicates={config.replicates} "
          f"converged={summary.num_converged} classifier_fallback={summary.num_fallback} "
          f"censoring_bound={_sig6(summary.censoring_bound)}")
    print("parameter true %bias ESE mean_SE coverage")
    for r in summary.rows:
        print(f"{r['parameter']} {_sig6(r['true_value'])} {_sig6(r['percent_bias'])} "
              f"{_sig6(r['ese'])} {_sig6(r['mean_se'])} {_sig6(r['coverage'])}")
    return EXIT_OK if summary.converged_fraction >= 0.95 else EXIT_NOCONV


# -- predict -------------------------------------------------------------------------

def cmd_predict(args) -> int:
    started = time.time()
    train = load_dataset(args.train, Schema(num_causes=args.num_causes))
    main = load_dataset(args.main, Schema(num_causes=train.num_causes))
    if main.predictors is None:
        raise DataValidationError(f"{args.main}: no predictor columns (w1..wq)")
    model = _train_classifier(train, args.ridge)
    probs = predict_probabilities(model, main)
    out = _out_dir(args)
    outputs = ["classifier.json"]
    model.save(out / "classifier.json")
    if args.emit in ("probs", "both"):
        write_probabilities(probs, out / "probabilities.csv")
        outputs.append("probabilities.csv")
    if args.emit in ("labels", "both"):
        write_labels(main, impute_types(probs), out / "labels.csv")
        outputs.append("labels.csv")
    write_manifest(out, "predict", args, [args.train, args.main], started, outputs=outputs)
    print(f"classified {len(probs.rows)} event units into K={model.num_classes} types; "
          f"wrote {', '.join(outputs)} to {out}")
    return EXIT_OK


# -- parser --------------------------------------------------------------------------

def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="crfrail",
        description="Cause-specific frailty models for clustered competing risks "
                    "with event types missing in the main study.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    out_help = f"output directory (default: ${OUTPUT_ENV} or ./{DEFAULT_OUTPUT})"

    f = sub.add_parser("fit", help="fit the frailty model to a main-study CSV")
    f.add_argument("--main", required=True, help="main-study CSV")
    f.add_argument("--train", help="training CSV with observed event types and w columns")
    f.add_argument("--probs", help="precomputed event-type probabilities (as written by predict)")
    f.add_argument("--method", required=True, choices=("weighted", "imputed", "complete"))
    f.add_argument("--varcov", default="exchangeable", choices=("exchangeable", "unstructured"))
    f.add_argument("--out", help=out_help)
    f.add_argument("--num-causes", type=_positive_int, help="number of causes K")
    f.add_argument("--variance", default="hessian", choices=("hessian", "sandwich"),
                   help="variance used for reported SEs and CIs")
    f.add_argument("--theta-score", default=SolverOptions.theta_score,
                   choices=("laplace", "direct"))
    f.add_argument("--k2-sign", default="negative", choices=("negative", "positive"))
    f.add_argument("--inner-tol", type=float, default=SolverOptions.inner_tol)
    f.add_argument("--inner-max-iter", type=_positive_int, default=SolverOptions.inner_max_iter)
    f.add_argument("--theta-tol", type=float, default=SolverOptions.theta_tol)
    f.add_argument("--outer-max-iter", type=_positive_int, default=SolverOptions.outer_max_iter)
    f.add_argument("--ridge", type=float, default=0.0, help="classifier ridge penalty")
    f.add_argument("--write-variance", action="store_true",
                   help="also write both full variance matrices as CSV")
    f.set_defaults(handler=cmd_fit)

    s = sub.add_parser("simulate", help="run a Monte Carlo scenario")
    s.add_argument("--config", required=True, help="scenario file (YAML key: value)")
    s.add_argument("--replicates", type=_positive_int)
    s.add_argument("--seed", type=int)
    s.add_argument("--jobs", type=_positive_int, default=1)
    s.add_argument("--method", choices=("weighted", "imputed", "complete"))
    s.add_argument("--out", help=out_help)
    s.set_defaults(handler=cmd_simulate)

    r = sub.add_parser("predict", help="event-type probabilities or imputed labels")
    r.add_argument("--train", required=True)
    r.add_argument("--main", required=True)
    r.add_argument("--emit", default="probs", choices=("probs", "labels", "both"))
    r.add_argument("--num-causes", type=_positive_int)
    r.add_argument("--ridge", type=float, default=0.0, help="classifier ridge penalty")
    r.add_argument("--out", help=out_help)
    r.set_defaults(handler=cmd_predict)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    args.argv = list(argv) if argv is not None else None
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        return args.handler(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"crfrail {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataValidationError, ConfigError) as exc:
        print(f"crfrail {args.command}: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"crfrail {args.command}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except SeparationError as exc:
        print(f"crfrail {args.command}: classifier failed: {exc} (try --ridge 0.1)",
              file=sys.stderr)
        return EXIT_NOCONV


if __name__ == "__main__":
    sys.exit(main())
