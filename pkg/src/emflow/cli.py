"""Command-line interface: mask simulation, imputation, benchmarking, RMSE.

Exit codes: 0 success, 2 usage or validation problem, 3 numerical failure.
Every command is reproducible from its flags + seed, never mutates its
inputs, and echoes its resolved configuration into the files it writes.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import baseline_em
from .data import (
    DataMatrix,
    MaskMatrix,
    apply_scaler,
    fit_scaler,
    invert_scaler,
    read_data_csv,
    read_mask_csv,
    write_data_csv,
    write_mask_csv,
)
from .engine import TrainConfig, run, save_checkpoint
from .evaluate import format_report_text, kfold_benchmark, rmse_missing, simulate_mask, write_report
from .exceptions import ConfigError, EmflowError, NonFiniteError, NotPositiveDefiniteError, ValidationError
from .masking import num_retained_features
from .online_em import EmConfig

_CONFIG_DEFAULTS = {
    "outer_iterations": 5,
    "epochs_per_phase": 10,
    "batch_size": 256,
    "learning_rate": 1e-4,
    "recon_weight": 1e6,
    "flow_depth": 6,
    "hidden_units": None,
    "initial_strategy": "random-observed",
    "grid_shape": None,
    "step_scale": 0.99,
    "step_decay": 0.8,
    "inflation_schedule": "1:0.01,3:0.001,5:0",
    "superbatch_max": 0,
    "reinit_each_iteration": True,
    "seed": 0,
}


def _parse_schedule(text) -> tuple:
    """Parse '1:0.01,3:0.001,5:0' into ((1, 0.01), (3, 0.001), (5, 0.0))."""
    if isinstance(text, (list, tuple)):
        return tuple(tuple(entry) for entry in text)
    text = text.strip()
    if not text:
        return ()
    out = []
    for chunk in text.split(","):
        start, _, beta = chunk.partition(":")
        out.append((int(start), float(beta)))
    return tuple(out)


def _parse_grid(text):
    if text is None:
        return None
    if isinstance(text, (list, tuple)):
        return tuple(int(v) for v in text)
    h, _, w = text.lower().partition("x")
    return (int(h), int(w))


def add_config_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("engine configuration (flags > --config file > defaults)")
    group.add_argument("--config", metavar="FILE", help="JSON file with config keys")
    group.add_argument("--outer-iterations", type=int, dest="outer_iterations")
    group.add_argument("--epochs", type=int, dest="epochs_per_phase")
    group.add_argument("--batch-size", type=int, dest="batch_size")
    group.add_argument("--learning-rate", type=float, dest="learning_rate")
    group.add_argument("--recon-weight", type=float, dest="recon_weight",
                       help="weight of the observed-cell reconstruction penalty")
    group.add_argument("--flow-depth", type=int, dest="flow_depth",
                       help="number of affine coupling layers")
    group.add_argument("--hidden-units", type=int, dest="hidden_units")
    group.add_argument("--initial-strategy", dest="initial_strategy",
                       choices=["random-observed", "median", "nearest-neighbor-grid"])
    group.add_argument("--grid", dest="grid_shape", metavar="HxW",
                       help="grid shape for nearest-neighbor-grid rows")
    group.add_argument("--step-scale", type=float, dest="step_scale")
    group.add_argument("--step-decay", type=float, dest="step_decay")
    group.add_argument("--inflation", dest="inflation_schedule", metavar="SCHED",
                       help="diagonal inflation schedule, e.g. '1:0.01,3:0.001,5:0'")
    group.add_argument("--superbatch", type=int, dest="superbatch_max")
    group.add_argument("--no-reinit", action="store_false", dest="reinit_each_iteration",
                       default=None, help="keep base distribution across outer iterations")
    group.add_argument("--seed", type=int, dest="seed")


def resolve_config(args: argparse.Namespace) -> TrainConfig:
    """Flags > config file > defaults; offending fields reported together."""
    resolved = dict(_CONFIG_DEFAULTS)
    if getattr(args, "config", None):
        with open(args.config) as fh:
            file_conf = json.load(fh)
        unknown = set(file_conf) - set(_CONFIG_DEFAULTS)
        if unknown:
            raise ConfigError([f"unknown config file key '{k}'" for k in sorted(unknown)])
        resolved.update(file_conf)
    for key in _CONFIG_DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            resolved[key] = value
    em = EmConfig(
        step_scale=resolved["step_scale"],
        step_decay=resolved["step_decay"],
        inflation_schedule=_parse_schedule(resolved["inflation_schedule"]),
        superbatch_max=resolved["superbatch_max"],
        reinit_each_iteration=bool(resolved["reinit_each_iteration"]),
    )
    config = TrainConfig(
        outer_iterations=resolved["outer_iterations"],
        epochs_per_phase=resolved["epochs_per_phase"],
        batch_size=resolved["batch_size"],
        learning_rate=resolved["learning_rate"],
        recon_weight=resolved["recon_weight"],
        flow_depth=resolved["flow_depth"],
        hidden_units=resolved["hidden_units"],
        initial_strategy=resolved["initial_strategy"],
        grid_shape=_parse_grid(resolved["grid_shape"]),
        em=em,
        seed=resolved["seed"],
    )
    return config.validate()


def _io_flags(parser) -> None:
    parser.add_argument("--header", action="store_true",
                        help="input CSV(s) carry a header row")
    parser.add_argument("--na-token", default="NA",
                        help="token marking a missing cell (besides empty fields)")


def _out_path(prefix: Path, suffix: str) -> Path:
    return Path(str(prefix) + suffix)


def cmd_mask(args) -> int:
    data, input_mask = read_data_csv(args.input, args.header, args.na_token)
    if args.mechanism == "mcar":
        if args.rate is None:
            raise ValidationError("--rate is required for mcar")
        mask = simulate_mask(data, "mcar", args.rate, args.seed)
    else:
        if input_mask.mask.any():
            raise ValidationError("mar simulation requires a complete input CSV")
        mask = simulate_mask(data, "mar", None, args.seed)
    prefix = Path(args.output) if args.output else Path(args.input).with_suffix("")
    mask_path = _out_path(prefix, ".mask.csv")
    sidecar_path = _out_path(prefix, ".mask.json")
    write_mask_csv(mask_path, mask)
    sidecar = {
        "input": str(args.input),
        "mechanism": args.mechanism,
        "seed": args.seed,
        "n": mask.shape[0],
        "p": mask.shape[1],
        "empirical_missing_fraction": mask.missing_fraction,
    }
    if args.mechanism == "mcar":
        sidecar["rate"] = args.rate
    else:
        d = num_retained_features(mask.shape[1])
        sidecar["formula"] = (
            "first floor(0.7*p) features retained; each remaining feature of "
            "row i missing with probability sigmoid(sum of row i's retained "
            "features), on min-max scaled data"
        )
        sidecar["retained_features"] = d
        sidecar["maskable_empirical_missing_fraction"] = float(
            mask.mask[:, d:].mean()
        )
    with open(sidecar_path, "w") as fh:
        json.dump(sidecar, fh, indent=2)
        fh.write("\n")
    print(f"wrote {mask_path} and {sidecar_path}")
    print(f"empirical missing fraction: {mask.missing_fraction:.4f}")
    return 0


def cmd_impute(args) -> int:
    config = resolve_config(args)
    data, csv_mask = read_data_csv(args.data, args.header, args.na_token)
    mask = read_mask_csv(args.mask)
    if mask.shape != data.shape:
        raise ValidationError(
            f"mask shape {mask.shape} does not match data shape {data.shape}"
        )
    if csv_mask.mask.any() and not (csv_mask.mask <= mask.mask).all():
        raise ValidationError("data CSV has missing cells not marked in the mask CSV")
    truth_scaled = None
    scaler = fit_scaler(data, mask)
    scaled = apply_scaler(data, scaler).values
    if args.truth:
        truth, truth_mask = read_data_csv(args.truth, args.header, args.na_token)
        if truth_mask.mask.any():
            raise ValidationError("truth CSV must be complete")
        if truth.shape != data.shape:
            raise ValidationError("truth shape does not match data shape")
        truth_scaled = apply_scaler(truth, scaler).values

    prefix = Path(args.output) if args.output else Path(args.data).with_suffix("")
    imputed_path = _out_path(prefix, ".imputed.csv")
    trace_path = _out_path(prefix, ".trace.jsonl")
    config_path = _out_path(prefix, ".config.json")

    if args.imputer == "baseline-em":
        work = scaled.copy()
        work[mask.mask] = 0.0
        params, n_iter, loglik = baseline_em.batch_em_fit(work, mask.mask)
        imputed_scaled = baseline_em.batch_em_impute(work, mask.mask, params)
        with open(trace_path, "w") as fh:
            for i, value in enumerate(loglik):
                fh.write(json.dumps({"iteration": i, "observed_loglik": value}) + "\n")
            if truth_scaled is not None and mask.mask.any():
                final = {"iterations_used": n_iter,
                         "rmse": rmse_missing(imputed_scaled, truth_scaled, mask.mask)}
                fh.write(json.dumps(final) + "\n")
        params_path = _out_path(prefix, ".params.npz")
        np.savez(params_path, mean=params.mean, cov=params.cov)
        extra_outputs = [str(params_path)]
    else:
        result = run(scaled, mask.mask, config, truth=truth_scaled,
                     trace_path=trace_path, resume_from=args.resume)
        imputed_scaled = result.imputed.values
        checkpoint_path = _out_path(prefix, ".checkpoint.npz")
        save_checkpoint(
            checkpoint_path, config, result.flow, result.em_state,
            imputed_scaled, mask.mask, config.outer_iterations,
        )
        extra_outputs = [str(checkpoint_path)]

    imputed = invert_scaler(DataMatrix(imputed_scaled, data.feature_names), scaler)
    # observed cells are copied from the input verbatim
    out_values = imputed.values
    out_values[~mask.mask] = data.values[~mask.mask]
    write_data_csv(imputed_path, DataMatrix(out_values, data.feature_names))

    resolved = {
        "command": "impute",
        "imputer": args.imputer,
        "data": str(args.data),
        "mask": str(args.mask),
        "truth": str(args.truth) if args.truth else None,
        "config": config.to_dict(),
    }
    with open(config_path, "w") as fh:
        json.dump(resolved, fh, indent=2)
        fh.write("\n")
    print(f"wrote {imputed_path}, {trace_path}, {config_path}, "
          + ", ".join(extra_outputs))
    return 0


def cmd_benchmark(args) -> int:
    config = resolve_config(args)
    data, csv_mask = read_data_csv(args.data, args.header, args.na_token)
    if csv_mask.mask.any():
        raise ValidationError("benchmark requires a complete (ground truth) CSV")
    threads = args.threads or int(os.environ.get("EMFLOW_THREADS", "1"))
    report = kfold_benchmark(
        data, args.mechanism, config, k=args.folds,
        seed=config.seed, rate=args.rate, threads=threads,
    )
    prefix = Path(args.output) if args.output else Path(args.data).with_suffix("")
    json_path = _out_path(prefix, ".report.json")
    text_path = _out_path(prefix, ".report.txt")
    csv_path = _out_path(prefix, ".folds.csv") if args.per_fold_csv else None
    write_report(report, json_path, text_path, csv_path)
    sys.stdout.write(format_report_text(report))
    print(f"wrote {json_path} and {text_path}"
          + (f" and {csv_path}" if csv_path else ""))
    return 0


def cmd_eval(args) -> int:
    imputed, imask = read_data_csv(args.imputed, args.header, args.na_token)
    truth, tmask = read_data_csv(args.truth, args.header, args.na_token)
    if imask.mask.any() or tmask.mask.any():
        raise ValidationError("imputed and truth CSVs must be complete")
    mask = read_mask_csv(args.mask)
    imputed_values, truth_values = imputed.values, truth.values
    if args.minmax:
        scaler = fit_scaler(truth, MaskMatrix(np.zeros(truth.shape, dtype=bool)))
        imputed_values = apply_scaler(imputed, scaler).values
        truth_values = apply_scaler(truth, scaler).values
    value = rmse_missing(imputed_values, truth_values, mask.mask)
    print(f"rmse_missing: {value!r}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="emflow",
        description="Missing-data imputation with a normalizing flow and "
                    "online EM in its latent space.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_mask = sub.add_parser("mask", help="simulate a missingness mask for a CSV")
    p_mask.add_argument("input")
    p_mask.add_argument("--mechanism", required=True, choices=["mcar", "mar"])
    p_mask.add_argument("--rate", type=float, help="cell missing probability (mcar)")
    p_mask.add_argument("--seed", type=int, default=0)
    p_mask.add_argument("-o", "--output", help="output prefix (default: input stem)")
    _io_flags(p_mask)
    p_mask.set_defaults(func=cmd_mask)

    p_impute = sub.add_parser("impute", help="impute a CSV given a mask CSV")
    p_impute.add_argument("data")
    p_impute.add_argument("mask")
    p_impute.add_argument("--truth", help="complete CSV for per-iteration RMSE")
    p_impute.add_argument("--imputer", default="emflow",
                          choices=["emflow", "baseline-em"])
    p_impute.add_argument("--resume", help="engine checkpoint to continue from")
    p_impute.add_argument("-o", "--output", help="output prefix (default: data stem)")
    _io_flags(p_impute)
    add_config_flags(p_impute)
    p_impute.set_defaults(func=cmd_impute)

    p_bench = sub.add_parser("benchmark", help="k-fold benchmark on complete data")
    p_bench.add_argument("data")
    p_bench.add_argument("--mechanism", required=True, choices=["mcar", "mar"])
    p_bench.add_argument("--rate", type=float, default=0.2)
    p_bench.add_argument("--folds", type=int, default=5)
    p_bench.add_argument("--threads", type=int,
                         help="fold workers (default: EMFLOW_THREADS or 1)")
    p_bench.add_argument("--per-fold-csv", action="store_true")
    p_bench.add_argument("-o", "--output", help="output prefix (default: data stem)")
    _io_flags(p_bench)
    add_config_flags(p_bench)
    p_bench.set_defaults(func=cmd_benchmark)

    p_eval = sub.add_parser("eval", help="RMSE over masked cells of three CSVs")
    p_eval.add_argument("imputed")
    p_eval.add_argument("truth")
    p_eval.add_argument("mask")
    p_eval.add_argument("--minmax", action="store_true",
                        help="min-max scale by the truth's ranges first")
    _io_flags(p_eval)
    p_eval.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, ConfigError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (NotPositiveDefiniteError, NonFiniteError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return 3
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except EmflowError as err:
        print(f"error: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
