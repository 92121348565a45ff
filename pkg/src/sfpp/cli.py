"""Command-line entry point: accuracy prediction, baselines, and benchmarking.

Exit codes: 0 success, 2 input error (bad flags, unreadable or inconsistent
arrays), 3 numerical failure, 4 source-based baseline without validation
data. Input errors name the offending array and its shape on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import baselines, bench, calibrator, estimator, ingest
from .errors import InputError, MissingValidationDataError, NumericalError

ALL_BASELINES = baselines.SOURCE_FREE_METHODS + baselines.SOURCE_BASED_METHODS


def _bundle_from_args(args) -> ingest.DatasetBundle:
    if getattr(args, "manifest", None):
        manifest = ingest.read_manifest(args.manifest)
    else:
        manifest = {}
        for key, attr in (
            ("target_logits", "logits"),
            ("target_features", "features"),
            ("last_layer_weights", "weights"),
            ("last_layer_bias", "bias"),
            ("val_logits", "val_logits"),
            ("val_labels", "val_labels"),
        ):
            value = getattr(args, attr, None)
            if value is not None:
                manifest[key] = value
    return ingest.load_bundle(manifest)


def _print_and_write(report, out_path):
    ingest.write_report(report, out_path)
    print(f"{report.predicted_accuracy:.4f}")


def cmd_predict(args) -> int:
    config = estimator.EstimatorConfig(
        mode=args.mode,
        eq5_literal=args.eq5_literal,
        cov_jitter=args.cov_jitter,
        normalize_threshold=args.normalize_threshold,
    )
    bundle = _bundle_from_args(args)
    report = estimator.predict_accuracy(bundle, config, seed=args.seed)
    _print_and_write(report, args.out)
    return 0


def cmd_baseline(args) -> int:
    bundle = _bundle_from_args(args)
    report = baselines.run_baseline(
        args.method, bundle,
        temperature=args.temperature,
        energy_temperature=args.energy_temperature,
        seed=args.seed,
    )
    _print_and_write(report, args.out)
    return 0


def cmd_bench(args) -> int:
    ratios = [float(tok) for tok in args.ratios.split(",") if tok.strip()]
    if not ratios or any(not 0.0 < r <= 1.0 for r in ratios):
        raise InputError(f"ratios must lie in (0, 1], got {args.ratios!r}")
    if args.suite == "default":
        scenarios = bench.default_suite(args.seed)
    else:
        docs = json.loads(Path(args.suite).read_text("utf-8"))
        if not isinstance(docs, list) or not docs:
            raise InputError(f"{args.suite}: suite file must hold a non-empty JSON list")
        try:
            scenarios = [bench.scenario_from_dict(doc) for doc in docs]
        except TypeError as exc:
            raise InputError(f"{args.suite}: bad scenario record: {exc}") from exc
    methods = list(bench.ALL_METHODS)
    if args.methods:
        methods = [tok.strip() for tok in args.methods.split(",") if tok.strip()]
    table = bench.run_suite(scenarios, methods=methods,
                            inclusion_ratios=ratios, trials=args.trials)
    json_path, csv_path = bench.write_mae_table(table, args.out)
    for method in table.methods:
        if method in table.mae:
            print(f"{method:22s} MAE {table.mae[method]:.4f}")
    print(f"wrote {json_path} and {csv_path}")
    return 0


def cmd_dump_calibration(args) -> int:
    bundle = _bundle_from_args(args)
    config = calibrator.CalibratorConfig(
        mode=args.mode,
        cov_jitter=args.cov_jitter,
        normalize_threshold=args.normalize_threshold,
    )
    model = calibrator.fit(bundle.target_logits, config)
    posteriors = calibrator.posterior_matrix(model, bundle.target_logits, config.mode)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    factor = model.covariance_factor
    ingest.write_array(out / "means.npy", model.means)
    ingest.write_array(out / "log_priors.npy", model.log_priors)
    ingest.write_array(out / "covariance.npy", factor.lower @ factor.lower.T)
    ingest.write_array(out / "posteriors.npy", posteriors)
    print(f"wrote 4 arrays to {out}")
    return 0


def _add_calibration_flags(p):
    p.add_argument("--mode", choices=calibrator.MODES, default="bayes",
                   help="posterior computation mode (default bayes)")
    p.add_argument("--cov-jitter", type=float, default=1e-6, dest="cov_jitter",
                   help="base diagonal regularization for the shared covariance")
    p.add_argument("--normalize-threshold", type=int, default=32, dest="normalize_threshold",
                   help="class count above which the inverse covariance is norm-scaled")


def _add_bundle_flags(p, with_val=True):
    p.add_argument("--logits", help="target logits array (.npy or .csv)")
    p.add_argument("--features", help="penultimate-layer features array")
    p.add_argument("--weights", help="last-layer weight matrix (C x d)")
    p.add_argument("--bias", help="last-layer bias vector")
    if with_val:
        p.add_argument("--val-logits", dest="val_logits", help="validation logits array")
        p.add_argument("--val-labels", dest="val_labels", help="validation labels array")
    p.add_argument("--manifest", help="key = path manifest file instead of per-array flags")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sfpp",
        description="Estimate classifier accuracy on unlabeled data from its logits.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("predict", help="calibrated gradient-norm accuracy estimate")
    _add_bundle_flags(p, with_val=False)
    _add_calibration_flags(p)
    p.add_argument("--eq5-literal", action="store_true", dest="eq5_literal",
                   help="flip the gradient-norm comparison direction")
    p.add_argument("--seed", type=int, default=None, help="echoed into the report")
    p.add_argument("--out", required=True, help="report JSON path")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("baseline", help="run a reference estimator")
    p.add_argument("--method", required=True, choices=ALL_BASELINES)
    _add_bundle_flags(p)
    p.add_argument("--temperature", type=float, default=1.0,
                   help="softmax temperature for gradnorm")
    p.add_argument("--energy-temperature", type=float, default=1.0,
                   dest="energy_temperature", help="temperature for the energy score")
    p.add_argument("--seed", type=int, default=None, help="echoed into the report")
    p.add_argument("--out", required=True, help="report JSON path")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("bench", help="synthetic distribution-shift benchmark")
    p.add_argument("--suite", default="default",
                   help="'default' or a JSON file with scenario records")
    p.add_argument("--ratios", default="0.01,0.05,0.1,1.0",
                   help="comma-separated validation inclusion ratios")
    p.add_argument("--trials", type=int, default=20,
                   help="seeded subsample trials per ratio")
    p.add_argument("--seed", type=int, default=0, help="base seed for the default suite")
    p.add_argument("--methods", default="",
                   help="comma-separated method ids (default: all)")
    p.add_argument("--out", required=True, help="output directory for JSON and CSV")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("dump-calibration", help="write fitted model arrays for inspection")
    _add_bundle_flags(p, with_val=False)
    _add_calibration_flags(p)
    p.add_argument("--out", required=True, help="output directory for NPY arrays")
    p.set_defaults(func=cmd_dump_calibration)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except MissingValidationDataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
