"""Command-line interface: ``mdals <subcommand> [options]``.

Exit status is 0 on success, 1 on a data or runtime error and 2 on a usage
error. Progress goes to stderr; results go to files under ``--out`` or, for
``evaluate``, to stdout as JSON.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .core import SolverError
from .data import (
    FORMATS,
    DataError,
    assign_dimensions,
    fixed_scheme,
    load_dataset,
    load_ratings,
    popularity_stats,
    prepare,
    save_dataset,
)
from .evaluation import MetricError, evaluate_model
from .harness import (
    BASELINE_DIMS,
    GAMMAS,
    DEFAULT_BETAS,
    DEFAULT_LAMBDAS,
    SweepSpec,
    emit_csv,
    grid_search,
    run_sweep,
    scaling_benchmark,
    write_manifest,
)
from .model import VARIANTS, CheckpointError, count_parameters, load_checkpoint, save_checkpoint
from .solvers import TrainConfig, TrainingError, train
from .synthetic import SyntheticConfig, generate, write_csv

logger = logging.getLogger("mdals")

DEFAULT_OUT = "./mdals-out"
CACHE_NAME = "dataset.tsv"
HISTOGRAM_NAME = "popularity_histogram.csv"
CHECKPOINT_NAME = "model.ckpt"
REPORT_NAME = "report.json"

_RUNTIME_ERRORS = (DataError, CheckpointError, TrainingError, SolverError, MetricError, OSError, ValueError)


class UsageError(Exception):
    pass


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _float_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def default_workers() -> int:
    env = os.environ.get("MDALS_WORKERS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise UsageError(f"MDALS_WORKERS must be a positive integer, got {env!r}")
        if n < 1:
            raise UsageError(f"MDALS_WORKERS must be a positive integer, got {env!r}")
        return n
    return os.cpu_count() or 1


def resolve_workers(args) -> int:
    if args.workers is not None:
        if args.workers < 1:
            raise UsageError("--workers must be >= 1")
        return args.workers
    return default_workers()


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config_echo(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k != "func"}


def _cache_path(args) -> Path:
    return Path(args.data) if args.data else Path(args.out) / CACHE_NAME


def _scheme(args, ds, variant: str):
    if variant == "baseline":
        return fixed_scheme(ds.num_users, ds.num_items, args.d)
    allowed = tuple(sorted(args.allowed_dims))
    if max(allowed) != args.d:
        raise UsageError(f"--d {args.d} must equal the largest of --allowed-dims {allowed}")
    return assign_dimensions(popularity_stats(ds), allowed, args.gamma)


# --------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    cfg = SyntheticConfig(
        num_users=args.users, num_items=args.items, interactions=args.interactions, seed=args.seed
    )
    out = _out_dir(args)
    path = out / args.name
    write_csv(generate(cfg), path)
    write_manifest(path, {"synthetic": cfg.as_dict(), **_config_echo(args)}, seed=args.seed)
    logger.info("wrote %s", path)
    return 0


def cmd_prepare(args) -> int:
    log = load_ratings(args.input, args.format)
    logger.info("read %d ratings (%d malformed lines skipped)", len(log), log.skipped)
    ds = prepare(log, args.val_frac, args.test_frac, args.min_count)
    out = _out_dir(args)
    save_dataset(ds, out / CACHE_NAME)
    stats = popularity_stats(ds)
    hist = emit_csv(stats, out / HISTOGRAM_NAME)
    summary = ds.summary()
    write_manifest(hist, _config_echo(args), extra={"summary": summary})
    print(f"{'split':<12}{'users':>10}{'items':>10}{'interactions':>14}")
    for name, row in summary.items():
        print(f"{name:<12}{row['users']:>10}{row['items']:>10}{row['interactions']:>14}")
    logger.info("wrote %s", out / CACHE_NAME)
    return 0


def cmd_train(args) -> int:
    ds = load_dataset(_cache_path(args))
    scheme = _scheme(args, ds, args.variant)
    config = TrainConfig(
        lam=args.lam,
        beta=args.beta,
        iterations=args.iterations,
        eval_every=args.eval_every,
        subsample=args.subsample,
        seed=args.seed,
        workers=resolve_workers(args),
        backend=args.backend,
    )
    logger.info("training %s on %d train interactions", args.variant, ds.split_size("train"))
    params, report = train(ds, scheme, args.variant, config)
    out = _out_dir(args)
    save_checkpoint(params, out / CHECKPOINT_NAME)
    payload = {"config": _config_echo(args), "version": __version__, **report.as_dict()}
    with open(out / REPORT_NAME, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")
    logger.info(
        "best iteration %d (validation auc %s), %d parameters",
        report.best_iteration,
        report.best_metric,
        report.parameter_count,
    )
    return 0


def cmd_evaluate(args) -> int:
    ds = load_dataset(_cache_path(args))
    ckpt = Path(args.checkpoint) if args.checkpoint else Path(args.out) / CHECKPOINT_NAME
    params = load_checkpoint(ckpt)
    if params.num_users != ds.num_users or params.num_items != ds.num_items:
        raise CheckpointError(
            f"checkpoint has {params.num_users} users / {params.num_items} items, "
            f"dataset has {ds.num_users} / {ds.num_items}"
        )
    metrics = evaluate_model(params, ds, args.split)
    metrics["parameter_count"] = count_parameters(params)
    print(json.dumps(metrics, sort_keys=True))
    return 0


def cmd_sweep(args) -> int:
    ds = load_dataset(_cache_path(args))
    values = args.dims if args.variant == "baseline" else args.gammas
    spec = SweepSpec(
        variant=args.variant,
        values=values,
        d=args.d,
        allowed_dims=tuple(sorted(args.allowed_dims)),
        lambdas=args.lambdas,
        betas=args.betas,
        repeats=args.repeats,
        cv_folds=args.cv_folds,
        holdout_frac=args.holdout_frac,
        iterations=args.iterations,
        eval_every=args.eval_every,
        subsample=args.subsample,
        seed=args.seed,
        workers=resolve_workers(args),
        backend=args.backend,
    )
    grid = None
    if args.lam is not None and (args.variant != "projected" or args.beta is not None):
        lam, beta = args.lam, args.beta
    else:
        logger.info("grid search over %d lambda x %d beta", len(spec.lambdas), len(spec.betas))
        (lam, beta), points = grid_search(ds, args.variant, spec, return_points=True)
        grid = [{"lam": p.lam, "beta": p.beta, "score": p.score, "error": p.error} for p in points]
    logger.info("sweep with lambda=%s beta=%s", lam, beta)
    result = run_sweep(ds, spec, lam, beta)
    out = _out_dir(args)
    path = emit_csv(result, out / f"sweep-{args.variant}.csv", include_wall_time=args.wall_time)
    write_manifest(
        path,
        _config_echo(args),
        seed=args.seed,
        extra={"selected": {"lam": lam, "beta": beta}, "grid": grid},
    )
    failed = sum(1 for r in result.rows if r.error)
    if failed:
        logger.warning("%d of %d sweep runs failed", failed, len(result))
    logger.info("wrote %s", path)
    return 0


def cmd_bench(args) -> int:
    base = SyntheticConfig(
        num_users=args.base_entities, num_items=args.base_entities, interactions=args.base_interactions
    )
    rows = scaling_benchmark(
        scales=args.scales,
        base=base,
        d=args.d,
        gamma=args.gamma,
        repeats=args.repeats,
        workers=resolve_workers(args),
        backend=args.backend,
    )
    out = _out_dir(args)
    path = emit_csv(rows, out / "bench.csv")
    write_manifest(path, {"synthetic": base.as_dict(), **_config_echo(args)})
    for r in rows:
        ratio = "" if r["ratio"] is None else f"  x{r['ratio']:.2f}"
        logger.info("%-15s scale %-4g %.4fs%s", r["variant"], r["scale"], r["iteration_seconds"], ratio)
    return 0


# --------------------------------------------------------------------------
# parser


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", default=DEFAULT_OUT, help=f"output directory (default {DEFAULT_OUT})")
    p.add_argument("--workers", type=int, default=None, help="solver threads (default: $MDALS_WORKERS or core count)")
    p.add_argument("--backend", choices=("cython", "python"), default=None, help="kernel backend")


def _add_model(p: argparse.ArgumentParser, variant_required: bool = True) -> None:
    p.add_argument("--data", default=None, help=f"dataset cache (default <out>/{CACHE_NAME})")
    p.add_argument("--variant", choices=VARIANTS, required=variant_required)
    p.add_argument("--d", type=int, default=6, help="maximum (or fixed) dimension")
    p.add_argument("--allowed-dims", type=_int_list, default=(2, 4, 6))
    p.add_argument("--iterations", type=int, default=30)
    p.add_argument("--eval-every", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-subsample", dest="subsample", action="store_false", help="use every interaction in projection updates")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mdals", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"mdals {__version__}")
    parser.add_argument("--verbose", action="store_true", help="debug logging on stderr")
    parser.add_argument("--quiet", action="store_true", help="only warnings and errors on stderr")
    sub = parser.add_subparsers(dest="command", metavar="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic planted-factor ratings file")
    _add_common(p)
    p.add_argument("--users", type=int, default=2000)
    p.add_argument("--items", type=int, default=2000)
    p.add_argument("--interactions", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--name", default="ratings.csv")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare", help="load, binarize, split and filter a ratings file")
    _add_common(p)
    p.add_argument("--input", required=True, help="ratings file")
    p.add_argument("--format", choices=FORMATS, default="csv_movielens")
    p.add_argument("--val-frac", type=float, default=0.10)
    p.add_argument("--test-frac", type=float, default=0.10)
    p.add_argument("--min-count", type=int, default=5)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train one model and write a checkpoint and report")
    _add_common(p)
    _add_model(p)
    p.add_argument("--gamma", type=float, default=None, help="dimension scale for mixed variants")
    p.add_argument("--lambda", dest="lam", type=float, default=1.0)
    p.add_argument("--beta", type=float, default=None, help="projection regularizer (projected variant)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="print metrics of a checkpoint as JSON")
    _add_common(p)
    p.add_argument("--data", default=None, help=f"dataset cache (default <out>/{CACHE_NAME})")
    p.add_argument("--checkpoint", default=None, help=f"checkpoint (default <out>/{CHECKPOINT_NAME})")
    p.add_argument("--split", choices=("validation", "test"), default="test")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="grid search then a quality/size sweep to CSV")
    _add_common(p)
    _add_model(p)
    p.add_argument("--dims", type=_int_list, default=BASELINE_DIMS, help="baseline dimensions")
    p.add_argument("--gammas", type=_float_list, default=GAMMAS, help="gamma values for mixed variants")
    p.add_argument("--lambdas", type=_float_list, default=DEFAULT_LAMBDAS)
    p.add_argument("--betas", type=_float_list, default=DEFAULT_BETAS)
    p.add_argument("--lambda", dest="lam", type=float, default=None, help="skip grid search with this lambda")
    p.add_argument("--beta", type=float, default=None, help="skip grid search with this beta")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--cv-folds", type=int, default=3)
    p.add_argument("--holdout-frac", type=float, default=0.10)
    p.add_argument("--wall-time", action="store_true", help="include the (nondeterministic) wall_time column")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("bench", help="per-iteration timing on synthetic data of growing size")
    _add_common(p)
    p.add_argument("--scales", type=_float_list, default=(1.0, 2.0, 4.0))
    p.add_argument("--base-interactions", type=int, default=500_000)
    p.add_argument("--base-entities", type=int, default=10_000)
    p.add_argument("--d", type=int, default=6)
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--repeats", type=int, default=3)
    p.set_defaults(func=cmd_bench)
    return parser


def validate(args) -> None:
    """Cross-flag checks run before any work starts."""
    if args.command in ("train",):
        if args.variant != "baseline" and args.gamma is None:
            raise UsageError(f"--gamma is required for the {args.variant} variant")
        if args.variant == "projected" and args.beta is None:
            raise UsageError("--beta is required for the projected variant")
    if args.command in ("train", "sweep"):
        if args.d < 1 or args.iterations < 1 or args.eval_every < 1:
            raise UsageError("--d, --iterations and --eval-every must be >= 1")
    if args.command == "sweep":
        if args.repeats < 1 or args.cv_folds < 2:
            raise UsageError("--repeats must be >= 1 and --cv-folds >= 2")
        if not args.lambdas or not args.betas:
            raise UsageError("--lambdas and --betas must be nonempty")
    if args.command == "bench" and (not args.scales or args.repeats < 1):
        raise UsageError("--scales must be nonempty and --repeats >= 1")
    if getattr(args, "workers", None) is not None and args.workers < 1:
        raise UsageError("--workers must be >= 1")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    try:
        validate(args)
        if hasattr(args, "workers"):
            resolve_workers(args)
    except UsageError as exc:
        parser.error(str(exc))
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except _RUNTIME_ERRORS as exc:
        print(f"mdals {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
