"""Alternating least squares trainers for the three model variants.

Each half-step fixes one side and solves every entity of the other side in
closed form. The projected variant additionally solves each projection
matrix as a ridge regression over flattened outer products, and runs its
iteration in the order: project users, update item projections, project
items, update user projections, project users, update items, project items,
update users.

The per-entity functions here (``solve_entity_*``) are straightforward
reference implementations; :func:`train` runs the batched kernels from
:mod:`mdals.kernels` instead.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .core import NormalEquations, SolverError, accumulate, flatten_outer, solve_regularized, unflatten
from .data import DimensionScheme, RatingDataset
from .evaluation import evaluate_model
from .model import (
    EmbeddingStore,
    ModelParams,
    count_parameters,
    init_params,
    no_projection,
    predict_pairs,
)

logger = logging.getLogger(__name__)

SIDES = ("user", "item")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lam: float
    beta: float | None = None
    iterations: int = 30
    eval_every: int = 5
    subsample: bool = True
    seed: int = 0
    workers: int = 1
    rescale_beta: bool = True
    projection_init: str = "xavier"
    freeze_projections: bool = False
    backend: str | None = None

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("lambda must be > 0")
        if self.beta is not None and not self.beta > 0:
            raise ValueError("beta must be > 0")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


@dataclass
class LossBreakdown:
    squared_error: float
    embedding_penalty: float
    projection_penalty: float

    @property
    def total(self) -> float:
        return self.squared_error + self.embedding_penalty + self.projection_penalty

    def as_dict(self) -> dict:
        return {**asdict(self), "total": self.total}


@dataclass
class IterationRecord:
    iteration: int
    loss: LossBreakdown
    metrics: dict | None = None


@dataclass
class TrainReport:
    variant: str
    records: list[IterationRecord] = field(default_factory=list)
    best_iteration: int = 0
    best_metric: float | None = None
    parameter_count: int = 0
    iteration_seconds: list[float] = field(default_factory=list)
    step_seconds: dict[str, list[float]] = field(default_factory=dict)

    def as_dict(self, timings: bool = False) -> dict:
        out = {
            "variant": self.variant,
            "best_iteration": self.best_iteration,
            "best_metric": self.best_metric,
            "parameter_count": self.parameter_count,
            "trace": [
                {"iteration": r.iteration, "loss": r.loss.as_dict(), "metrics": r.metrics}
                for r in self.records
            ],
        }
        if timings:
            out["iteration_seconds"] = self.iteration_seconds
            out["step_seconds"] = self.step_seconds
        return out


# --------------------------------------------------------------------------
# reference per-entity solves


def _ratings_arrays(ratings) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(ratings, tuple) and len(ratings) == 2 and isinstance(ratings[0], np.ndarray):
        idx, lab = ratings
    else:
        pairs = list(ratings)
        if not pairs:
            raise ValueError("entity has no ratings")
        idx = np.array([int(k) for k, _ in pairs], dtype=np.int64)
        lab = np.array([float(r) for _, r in pairs], dtype=np.float64)
    return np.asarray(idx, dtype=np.int64), np.asarray(lab, dtype=np.float64)


def _ridge(features: np.ndarray, targets: np.ndarray, reg: float) -> np.ndarray:
    ne = NormalEquations.zeros(features.shape[1])
    for f, r in zip(features, targets):
        accumulate(ne, f, r)
    return solve_regularized(ne, reg)


def solve_entity_baseline(ratings, fixed_side: np.ndarray, lam: float) -> np.ndarray:
    """Exact minimizer of ``sum (x.y_i - r_i)^2 + lam |x|^2`` over the rated neighbours."""
    idx, lab = _ratings_arrays(ratings)
    return _ridge(np.asarray(fixed_side, dtype=np.float64)[idx], lab, lam)


def solve_entity_zeropad(ratings, fixed_side: EmbeddingStore, own_dim: int, lam: float) -> np.ndarray:
    """As the baseline, with neighbour vectors cut or zero-extended to ``own_dim``."""
    idx, lab = _ratings_arrays(ratings)
    feats = np.zeros((idx.size, own_dim))
    for row, k in enumerate(idx):
        v = fixed_side.vector(k)[:own_dim]
        feats[row, : v.size] = v
    return _ridge(feats, lab, lam)


def solve_entity_projected(
    ratings, fixed_side_projected: np.ndarray, own_projection: np.ndarray, lam: float
) -> np.ndarray:
    """Features are ``P^T ybar_i`` where ``P`` is the entity's ``d x p`` projection."""
    idx, lab = _ratings_arrays(ratings)
    feats = np.asarray(fixed_side_projected, dtype=np.float64)[idx] @ np.asarray(own_projection)
    return _ridge(feats, lab, lam)


# --------------------------------------------------------------------------
# subsampling and projection updates


def keep_probability(p: int) -> float:
    if p < 1:
        raise ValueError("dimension must be >= 1")
    return 1.0 / (p * p)


def subsample_mask(n: int, p: int, seed) -> np.ndarray:
    """Independent Bernoulli(1/p^2) draws; ``seed`` may be an int, a sequence or a Generator."""
    prob = keep_probability(p)
    if prob >= 1.0:
        return np.ones(n, dtype=bool)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return rng.random(n) < prob


def subsample_interactions(interactions, p: int, seed):
    """Subset of ``interactions`` (rows along the first axis) kept with probability 1/p^2."""
    arr = np.asarray(interactions) if not isinstance(interactions, np.ndarray) else interactions
    return arr[subsample_mask(arr.shape[0], p, seed)]


def _side_parts(params: ModelParams, side: str):
    if side == "user":
        return params.user_embeddings, params.user_projections, params.item_embeddings, params.item_projections
    if side == "item":
        return params.item_embeddings, params.item_projections, params.user_embeddings, params.user_projections
    raise ValueError(f"side must be 'user' or 'item', got {side!r}")


def projection_system(
    params: ModelParams,
    side: str,
    p: int,
    csr,
    keep: np.ndarray | None = None,
    other_projected: np.ndarray | None = None,
    workers: int = 1,
    backend: str | None = None,
) -> tuple[np.ndarray, np.ndarray, int, int]:
    """Normal equations of the ridge problem for the ``side`` projection with source dim ``p``.

    Returns ``(gram, moment, used, available)`` where ``available`` counts
    the interactions of entities of this dimension before subsampling.
    """
    own = _side_parts(params, side)[0]
    if other_projected is None:
        other_projected = np.ascontiguousarray(
            params.projected_items() if side == "user" else params.projected_users()
        )
    indptr, indices, targets = csr
    entities = np.flatnonzero(own.dims == p).astype(np.int64)
    available = int(np.sum(indptr[entities + 1] - indptr[entities]))
    if keep is None:
        keep = np.ones(indices.shape[0], dtype=np.uint8)
    gram, moment, used = kernels.projection_normal_equations(
        indptr,
        indices,
        targets,
        np.ascontiguousarray(keep, dtype=np.uint8),
        entities,
        own.values,
        own.offsets,
        int(p),
        np.ascontiguousarray(other_projected),
        workers=workers,
        backend=backend,
    )
    return gram, moment, used, available


def update_projection(
    params: ModelParams,
    side: str,
    p: int,
    csr,
    beta: float,
    keep: np.ndarray | None = None,
    other_projected: np.ndarray | None = None,
    rescale_beta: bool = True,
    workers: int = 1,
    backend: str | None = None,
) -> np.ndarray | None:
    """Closed-form ridge solution for one ``d x p`` projection matrix.

    With a subsample, ``beta`` is scaled by the fraction of interactions kept
    (when ``rescale_beta``). Returns None, leaving the caller to keep the old
    matrix, when no interaction is available.
    """
    d = params.max_dim
    gram, moment, used, available = projection_system(
        params, side, p, csr, keep, other_projected, workers, backend
    )
    if used == 0:
        logger.warning("no interactions for %s projection p=%d; keeping previous matrix", side, p)
        return None
    reg = beta * used / available if (rescale_beta and keep is not None) else beta
    try:
        flat = solve_regularized(NormalEquations(gram, moment, used), reg)
    except SolverError as exc:
        raise TrainingError(f"{side} projection p={p}: {exc}") from exc
    return unflatten(flat, d, p)


def reference_projection_system(
    params: ModelParams, side: str, p: int, pairs: Sequence[tuple[int, int, float]]
) -> NormalEquations:
    """Projection normal equations built one explicit feature row at a time.

    ``pairs`` are ``(own_index, other_index, label)``. Slow; kept as an
    independent cross-check of the kernel path.
    """
    own = _side_parts(params, side)[0]
    other_bar = params.projected_items() if side == "user" else params.projected_users()
    ne = NormalEquations.zeros(params.max_dim * p)
    for e, o, r in pairs:
        accumulate(ne, flatten_outer(other_bar[o], own.vector(e)), r)
    return ne


# --------------------------------------------------------------------------
# objective


def compute_loss(
    params: ModelParams, ds: RatingDataset, lam: float, beta: float = 0.0, split: str = "train"
) -> LossBreakdown:
    users, items, labels = ds.pairs(split)
    pred = predict_pairs(params, users, items)
    se = float(np.sum((pred - labels) ** 2))
    emb = lam * float(
        np.dot(params.user_embeddings.values, params.user_embeddings.values)
        + np.dot(params.item_embeddings.values, params.item_embeddings.values)
    )
    proj = 0.0
    if params.variant == "projected" and beta:
        proj = beta * (params.user_projections.frobenius_sq() + params.item_projections.frobenius_sq())
    return LossBreakdown(se, emb, proj)


# --------------------------------------------------------------------------
# training loop


def solve_side(
    params: ModelParams,
    side: str,
    csr,
    other_table: np.ndarray,
    lam: float,
    workers: int = 1,
    backend: str | None = None,
) -> None:
    """Update every embedding of ``side`` in place with the other side fixed."""
    own, own_proj, _, _ = _side_parts(params, side)
    if own_proj is None:
        index, flat = no_projection(params.max_dim)
    else:
        index, flat = own_proj.kernel_layout()
    indptr, indices, targets = csr
    bad = kernels.get_backend(backend).solve_side(
        indptr,
        indices,
        targets,
        np.ascontiguousarray(other_table, dtype=np.float64),
        own.dims,
        own.offsets,
        own.values,
        float(lam),
        index,
        flat,
        workers,
    )
    if bad >= 0:
        raise TrainingError(f"closed-form solve failed for {side} {bad}")


def _default_eval_hook(ds: RatingDataset) -> Callable[[ModelParams], float | None] | None:
    if ds.split_size("validation") == 0:
        return None

    def hook(params: ModelParams):
        return evaluate_model(params, ds, "validation")

    return hook


def _iteration_seed(seed: int, iteration: int, side: str, p: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), int(iteration), SIDES.index(side), int(p)])


def projection_keep_mask(csr, dims: np.ndarray, p: int, seed) -> np.ndarray:
    """uint8 mask over CSR positions: Bernoulli(1/p^2) on rows of dimension ``p``, 0 elsewhere."""
    indptr = csr[0]
    keep = np.zeros(csr[1].shape[0], dtype=np.uint8)
    rows = np.flatnonzero(dims == p)
    lens = indptr[rows + 1] - indptr[rows]
    pos = np.repeat(indptr[rows] - np.r_[0, np.cumsum(lens)[:-1]], lens) + np.arange(lens.sum())
    keep[pos] = subsample_mask(pos.size, p, seed)
    return keep


def train(
    ds: RatingDataset,
    scheme: DimensionScheme,
    variant: str,
    config: TrainConfig,
    eval_hook="validation",
    on_step: Callable[[int, str, ModelParams], None] | None = None,
    params: ModelParams | None = None,
) -> tuple[ModelParams, TrainReport]:
    """Run ALS and return the parameters at the best evaluated iteration.

    ``eval_hook`` maps parameters to a metrics dict (or a float) every
    ``eval_every`` iterations; the iteration with the highest ``auc`` wins,
    earlier iterations winning ties. Pass ``None`` to skip evaluation and
    keep the final iterate. ``on_step(iteration, step, params)`` runs after
    every update group (``"B"``, ``"A"``, ``"Y"``, ``"X"``).
    """
    if variant == "projected" and config.beta is None:
        raise ValueError("projected variant needs beta")
    if scheme.num_users != ds.num_users or scheme.num_items != ds.num_items:
        raise ValueError("dimension scheme does not match the dataset")
    user_csr = ds.train_matrix("user")
    item_csr = ds.train_matrix("item")
    for side, csr in (("user", user_csr), ("item", item_csr)):
        empty = np.flatnonzero(np.diff(csr[0]) == 0)
        if empty.size:
            raise TrainingError(f"{side} {int(empty[0])} has no train ratings")

    if params is None:
        params = init_params(scheme, variant, config.seed, config.projection_init)
    if eval_hook == "validation":
        eval_hook = _default_eval_hook(ds)
    workers, backend = config.workers, config.backend
    beta = config.beta or 0.0
    report = TrainReport(variant)
    report.step_seconds = {k: [] for k in ("B", "A", "Y", "X")}
    best = None
    d = params.max_dim

    def step(it: int, name: str, fn) -> None:
        t0 = time.perf_counter()
        fn()
        report.step_seconds[name].append(time.perf_counter() - t0)
        if on_step is not None:
            on_step(it, name, params)

    def update_projections(it: int, side: str, other_bar: np.ndarray) -> None:
        own, proj, _, _ = _side_parts(params, side)
        csr = user_csr if side == "user" else item_csr
        for p in proj.keys():
            keep = None
            if config.subsample and p > 1:
                keep = projection_keep_mask(csr, own.dims, p, _iteration_seed(config.seed, it, side, p))
            mat = update_projection(
                params, side, p, csr, config.beta, keep, other_bar, config.rescale_beta, workers, backend
            )
            if mat is not None:
                proj.matrices[p] = mat

    for it in range(1, config.iterations + 1):
        t_iter = time.perf_counter()
        if variant == "projected":
            trainable = not config.freeze_projections
            if trainable:
                x_bar = params.projected_users()
                step(it, "B", lambda: update_projections(it, "item", x_bar))
                y_bar = params.projected_items()
                step(it, "A", lambda: update_projections(it, "user", y_bar))
            x_bar = params.projected_users()
            step(it, "Y", lambda: solve_side(params, "item", item_csr, x_bar, config.lam, workers, backend))
            y_bar = params.projected_items()
            step(it, "X", lambda: solve_side(params, "user", user_csr, y_bar, config.lam, workers, backend))
        else:
            step(
                it,
                "Y",
                lambda: solve_side(
                    params, "item", item_csr, params.user_embeddings.padded(d), config.lam, workers, backend
                ),
            )
            step(
                it,
                "X",
                lambda: solve_side(
                    params, "user", user_csr, params.item_embeddings.padded(d), config.lam, workers, backend
                ),
            )
        # loss monitoring is not part of the timed iteration
        report.iteration_seconds.append(time.perf_counter() - t_iter)
        loss = compute_loss(params, ds, config.lam, beta)
        if not math.isfinite(loss.total):
            raise TrainingError(f"non-finite loss at iteration {it}: {loss.as_dict()}")
        record = IterationRecord(it, loss)
        if eval_hook is not None and it % config.eval_every == 0:
            metrics = eval_hook(params)
            if not isinstance(metrics, dict):
                metrics = {"auc": metrics}
            record.metrics = metrics
            score = metrics.get("auc")
            if score is not None and math.isfinite(score) and (best is None or score > report.best_metric):
                report.best_metric = float(score)
                report.best_iteration = it
                best = params.copy()
        report.records.append(record)
        logger.debug("iteration %d loss %.6g", it, loss.total)

    if best is None:
        best = params
        report.best_iteration = config.iterations
    report.parameter_count = count_parameters(best)
    return best, report
