"""Experiment orchestration: grid search, trade-off sweeps and timing benchmarks."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import statistics
import subprocess
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .core import SolverError
from .data import (
    TEST,
    TRAIN,
    VALIDATION,
    DimensionScheme,
    PopularityStats,
    RatingDataset,
    assign_dimensions,
    fixed_scheme,
    popularity_stats,
    prepare,
)
from .evaluation import MetricError, evaluate_model
from .model import count_parameters, init_params
from .solvers import TrainConfig, TrainingError, train
from .synthetic import SyntheticConfig, generate

logger = logging.getLogger(__name__)

DEFAULT_LAMBDAS = (0.1, 0.3, 1.0, 3.0)
DEFAULT_BETAS = (300.0, 1000.0, 3000.0, 10000.0)
BASELINE_DIMS = (2, 3, 4, 5, 6)
GAMMAS = (0.2, 0.3, 0.5, 1.0)

_FAILURES = (TrainingError, SolverError, MetricError, ValueError, FloatingPointError)


@dataclass
class SweepSpec:
    variant: str
    values: tuple[float, ...] = ()
    d: int = 6
    allowed_dims: tuple[int, ...] = (2, 4, 6)
    lambdas: tuple[float, ...] = DEFAULT_LAMBDAS
    betas: tuple[float, ...] = DEFAULT_BETAS
    repeats: int = 3
    cv_folds: int = 3
    holdout_frac: float = 0.10
    iterations: int = 30
    eval_every: int = 5
    subsample: bool = True
    seed: int = 0
    workers: int = 1
    backend: str | None = None

    def __post_init__(self):
        if not self.values:
            self.values = BASELINE_DIMS if self.variant == "baseline" else GAMMAS
        self.values = tuple(self.values)
        if not self.lambdas or (self.variant == "projected" and not self.betas):
            raise ValueError("hyperparameter grids must be nonempty")
        if self.repeats < 1 or self.cv_folds < 2:
            raise ValueError("need repeats >= 1 and cv_folds >= 2")

    @property
    def axis(self) -> str:
        return "d" if self.variant == "baseline" else "gamma"

    @property
    def largest_value(self) -> float:
        # smaller gamma -> larger dimensions
        return max(self.values) if self.variant == "baseline" else min(self.values)

    def config(self, lam: float, beta: float | None, seed: int) -> TrainConfig:
        return TrainConfig(
            lam=lam,
            beta=beta if self.variant == "projected" else None,
            iterations=self.iterations,
            eval_every=self.eval_every,
            subsample=self.subsample,
            seed=seed,
            workers=self.workers,
            backend=self.backend,
        )

    def as_dict(self) -> dict:
        return asdict(self)


def scheme_for(ds: RatingDataset, spec: SweepSpec, value: float, stats: PopularityStats | None = None) -> DimensionScheme:
    if spec.variant == "baseline":
        return fixed_scheme(ds.num_users, ds.num_items, int(value))
    stats = stats or popularity_stats(ds)
    return assign_dimensions(stats, spec.allowed_dims, float(value))


# --------------------------------------------------------------------------
# grid search


def cv_datasets(ds: RatingDataset, folds: int, holdout_frac: float, seed: int) -> list[RatingDataset]:
    """Cross-validation datasets over train + validation.

    In fold ``k`` the ``k``-th random fold is tagged test, a random
    ``holdout_frac`` of the remaining rows is tagged validation (for
    best-iteration selection) and the rest is train. Held-out rows whose
    user or item is missing from that fold's train are dropped.
    """
    pool = np.flatnonzero((ds.split == TRAIN) | (ds.split == VALIDATION))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC5]))
    perm = rng.permutation(pool)
    out = []
    for k, held in enumerate(np.array_split(perm, folds)):
        rest = np.setdiff1d(perm, held)
        rest = rest[rng.permutation(rest.size)]
        n_hold = int(math.floor(rest.size * holdout_frac + 0.5))
        tags = np.full(len(ds), -1, dtype=np.int8)
        tags[rest[n_hold:]] = TRAIN
        tags[rest[:n_hold]] = VALIDATION
        tags[held] = TEST
        train_rows = tags == TRAIN
        has_u = np.zeros(ds.num_users, dtype=bool)
        has_u[ds.users[train_rows]] = True
        has_i = np.zeros(ds.num_items, dtype=bool)
        has_i[ds.items[train_rows]] = True
        keep = train_rows | ((tags >= 0) & has_u[ds.users] & has_i[ds.items])
        out.append(ds.subset(keep, split=tags[keep]))
    return out


@dataclass
class GridPoint:
    lam: float
    beta: float | None
    fold_scores: list[float] = field(default_factory=list)
    error: str = ""

    @property
    def score(self) -> float:
        if self.error or not self.fold_scores:
            return float("nan")
        return float(np.mean(self.fold_scores))


def grid_search(
    ds: RatingDataset, variant: str, spec: SweepSpec, return_points: bool = False
):
    """Best ``(lam, beta)`` for the largest model by mean held-out-fold AUC.

    Failed grid points are excluded. Ties go to the smaller lambda, then the
    smaller beta, so the outcome does not depend on grid order.
    """
    if variant != spec.variant:
        spec = SweepSpec(**{**spec.as_dict(), "variant": variant, "values": ()})
    betas = sorted(spec.betas) if variant == "projected" else [None]
    folds = cv_datasets(ds, spec.cv_folds, spec.holdout_frac, spec.seed)
    points = [GridPoint(lam, beta) for lam in sorted(spec.lambdas) for beta in betas]
    for point in points:
        for fold in folds:
            try:
                scheme = scheme_for(fold, spec, spec.largest_value)
                params, _ = train(fold, scheme, variant, spec.config(point.lam, point.beta, spec.seed))
                auc = evaluate_model(params, fold, "test")["auc"]
                if auc is None:
                    raise MetricError("held-out fold has a single class")
                point.fold_scores.append(auc)
            except _FAILURES as exc:
                point.error = f"{type(exc).__name__}: {exc}"
                logger.warning("grid point lambda=%s beta=%s failed: %s", point.lam, point.beta, exc)
                break
    valid = [p for p in points if not math.isnan(p.score)]
    if not valid:
        raise TrainingError("every grid point failed")
    best = min(valid, key=lambda p: (-p.score, p.lam, -math.inf if p.beta is None else p.beta))
    if return_points:
        return (best.lam, best.beta), points
    return best.lam, best.beta


# --------------------------------------------------------------------------
# sweeps


@dataclass
class SweepRow:
    variant: str
    axis: str
    value: float
    lam: float
    beta: float | None
    seed: int
    parameter_count: int
    best_iteration: int
    val_auc: float | None
    test_auc: float | None
    test_rmse: float | None
    wall_time: float | None = None
    error: str = ""


@dataclass
class SweepResult:
    rows: list[SweepRow] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def sorted(self) -> "SweepResult":
        return SweepResult(sorted(self.rows, key=lambda r: (r.variant, r.value, r.seed)))

    def mean_test_auc(self, value: float) -> float:
        vals = [r.test_auc for r in self.rows if r.value == value and r.test_auc is not None]
        return float(np.mean(vals)) if vals else float("nan")

    def parameter_count(self, value: float) -> int:
        counts = {r.parameter_count for r in self.rows if r.value == value}
        if len(counts) != 1:
            raise ValueError(f"no unique parameter count for value {value}")
        return counts.pop()


def run_sweep(ds: RatingDataset, spec: SweepSpec, lam: float, beta: float | None = None) -> SweepResult:
    """Train every axis value with ``spec.repeats`` seeds and record test metrics."""
    stats = popularity_stats(ds) if spec.variant != "baseline" else None
    rows = []
    for value in spec.values:
        scheme = scheme_for(ds, spec, value, stats)
        expected_count = count_parameters(init_params(scheme, spec.variant, 0, "truncated_identity"))
        for k in range(spec.repeats):
            seed = spec.seed + k
            t0 = time.perf_counter()
            row = SweepRow(spec.variant, spec.axis, float(value), lam, beta if spec.variant == "projected" else None,
                           seed, expected_count, 0, None, None, None)
            try:
                params, report = train(ds, scheme, spec.variant, spec.config(lam, beta, seed))
                test = evaluate_model(params, ds, "test")
                row.parameter_count = count_parameters(params)
                row.best_iteration = report.best_iteration
                row.val_auc = report.best_metric
                row.test_auc = test["auc"]
                row.test_rmse = test["rmse"]
            except _FAILURES as exc:
                row.error = f"{type(exc).__name__}: {exc}"
                logger.warning("sweep run %s=%s seed=%d failed: %s", spec.axis, value, seed, exc)
            row.wall_time = time.perf_counter() - t0
            rows.append(row)
    return SweepResult(rows).sorted()


# --------------------------------------------------------------------------
# CSV and manifests

SWEEP_COLUMNS = [f.name for f in fields(SweepRow)]
HISTOGRAM_COLUMNS = ["bin_left", "bin_right", "user_count", "item_count"]


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def sweep_csv(result: SweepResult, include_wall_time: bool = True) -> str:
    cols = [c for c in SWEEP_COLUMNS if include_wall_time or c != "wall_time"]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(cols)
    for row in result.sorted().rows:
        writer.writerow([_fmt(getattr(row, c)) for c in cols])
    return buf.getvalue()


def histogram_csv(stats: PopularityStats) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(HISTOGRAM_COLUMNS)
    for left, right, u, i in stats.histogram_rows():
        writer.writerow([_fmt(left), _fmt(right), u, i])
    return buf.getvalue()


def emit_csv(obj, path, include_wall_time: bool = True) -> Path:
    """Write a :class:`SweepResult`, :class:`PopularityStats` or list of dict rows as CSV."""
    path = Path(path)
    if isinstance(obj, SweepResult):
        text = sweep_csv(obj, include_wall_time)
    elif isinstance(obj, PopularityStats):
        text = histogram_csv(obj)
    else:
        rows = list(obj)
        buf = io.StringIO()
        if rows:
            writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\r\n")
            writer.writeheader()
            for r in rows:
                writer.writerow({k: _fmt(v) for k, v in r.items()})
        text = buf.getvalue()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    return path


_PARSERS = {
    "value": float,
    "lam": float,
    "beta": float,
    "seed": int,
    "parameter_count": int,
    "best_iteration": int,
    "val_auc": float,
    "test_auc": float,
    "test_rmse": float,
    "wall_time": float,
}


def read_sweep_csv(path) -> SweepResult:
    rows = []
    with open(path, encoding="utf-8", newline="") as fh:
        for rec in csv.DictReader(fh):
            kwargs = {}
            for name in SWEEP_COLUMNS:
                raw = rec.get(name, "")
                if name in _PARSERS:
                    kwargs[name] = None if raw in ("", None) else _PARSERS[name](raw)
                else:
                    kwargs[name] = raw or ""
            rows.append(SweepRow(**kwargs))
    return SweepResult(rows)


def version_tag() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        rev = out.stdout.strip() if out.returncode == 0 else ""
    except (OSError, subprocess.SubprocessError):
        rev = ""
    return f"mdals-{__version__}" + (f"+{rev}" if rev else "")


def write_manifest(csv_path, config: dict, seed: int | None = None, extra: dict | None = None) -> Path:
    """JSON run manifest next to ``csv_path`` (same stem, ``.manifest.json``)."""
    csv_path = Path(csv_path)
    manifest = {"output": csv_path.name, "version": version_tag(), "seed": seed, "config": config}
    if extra:
        manifest.update(extra)
    path = csv_path.with_suffix(".manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")
    return path


# --------------------------------------------------------------------------
# scaling benchmark


def synthetic_dataset(cfg: SyntheticConfig) -> RatingDataset:
    return prepare(generate(cfg))


BENCH_BASE = SyntheticConfig(num_users=10_000, num_items=10_000, interactions=500_000)


def time_iterations(
    runs: Sequence[tuple[RatingDataset, DimensionScheme, str, TrainConfig]],
    repeats: int = 3,
    warmup: int = 1,
) -> list[dict]:
    """Median per-iteration and per-step wall time for each ``(ds, scheme, variant, config)``.

    Every run gets ``warmup`` untimed iterations, then timed iterations are
    taken round-robin across runs so slow drift of machine speed hits all of
    them alike.
    """
    states = []
    for ds, scheme, variant, config in runs:
        one = TrainConfig(**{**asdict(config), "iterations": 1})
        params = init_params(scheme, variant, config.seed, config.projection_init)
        for _ in range(warmup):
            train(ds, scheme, variant, one, eval_hook=None, params=params)
        states.append((one, params))
    samples: list[dict[str, list[float]]] = [{} for _ in runs]
    for _ in range(repeats):
        for k, (ds, scheme, variant, _config) in enumerate(runs):
            one, params = states[k]
            _, report = train(ds, scheme, variant, one, eval_hook=None, params=params)
            samples[k].setdefault("iteration", []).append(report.iteration_seconds[0])
            for step, times in report.step_seconds.items():
                samples[k].setdefault(step, []).extend(times)
    return [{key: statistics.median(vals) for key, vals in s.items() if vals} for s in samples]


def scaling_benchmark(
    scales: Sequence[float] = (1, 2, 4),
    base: SyntheticConfig = BENCH_BASE,
    d: int = 6,
    allowed_dims: Sequence[int] = (2, 4, 6),
    gamma: float = 1.0,
    lam: float = 1.0,
    beta: float = 100.0,
    repeats: int = 3,
    warmup: int = 1,
    workers: int = 1,
    backend: str | None = None,
) -> list[dict]:
    """Per-iteration wall time of every variant on synthetic data of growing size.

    Only the interaction count grows; users and items stay fixed so the
    embedding tables keep the same footprint and the dimension mix stays
    put. ``ratio`` is the time relative to the previous scale and
    ``projected_full`` is the projected model without subsampling.
    """
    scales = [float(s) for s in scales]
    datasets = [synthetic_dataset(base.scaled(s, entities=False)) for s in scales]
    fixed = [fixed_scheme(ds.num_users, ds.num_items, d) for ds in datasets]
    mixed = [assign_dimensions(popularity_stats(ds), allowed_dims, gamma) for ds in datasets]
    plan = [
        ("baseline", "baseline", fixed, True),
        ("zero_pad", "zero_pad", mixed, True),
        ("projected", "projected", mixed, True),
        ("projected_full", "projected", mixed, False),
    ]
    keys, runs = [], []
    for label, variant, schemes, sub in plan:
        cfg = TrainConfig(lam=lam, beta=beta, subsample=sub, seed=0, workers=workers, backend=backend)
        for k, (ds, scheme) in enumerate(zip(datasets, schemes)):
            keys.append((label, k))
            runs.append((ds, scheme, variant, cfg))
    timings = dict(zip(keys, time_iterations(runs, repeats, warmup)))
    rows = []
    for label, *_ in plan:
        for k, (scale, ds) in enumerate(zip(scales, datasets)):
            t = timings[label, k]
            prev = timings[label, k - 1]["iteration"] if k else None
            rows.append(
                {
                    "variant": label,
                    "scale": scale,
                    "train_interactions": ds.split_size("train"),
                    "iteration_seconds": t["iteration"],
                    "projection_seconds": t.get("A", 0.0) + t.get("B", 0.0),
                    "embedding_seconds": t.get("X", 0.0) + t.get("Y", 0.0),
                    "ratio": t["iteration"] / prev if k else None,
                    "scale_ratio": scale / scales[k - 1] if k else None,
                }
            )
    return rows
