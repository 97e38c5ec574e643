"""Dense linear-algebra primitives shared by the trainers.

Everything here works in float64. The per-entity systems solved during ALS
are small (at most ``d`` or ``p * d`` unknowns) and symmetric positive
definite once a positive ridge term is added, so a Cholesky factorization is
the workhorse.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

__all__ = [
    "SolverError",
    "NormalEquations",
    "accumulate",
    "merge",
    "solve_regularized",
    "flatten_outer",
    "flatten",
    "unflatten",
]

RESIDUAL_TOL = 1e-8


class SolverError(ArithmeticError):
    """Raised when a regularized system cannot be solved reliably."""


def _as_finite_vector(values, name: str) -> np.ndarray:
    vec = np.asarray(values, dtype=np.float64)
    if vec.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {vec.shape}")
    if not np.all(np.isfinite(vec)):
        raise ValueError(f"{name} contains non-finite entries")
    return vec


@dataclass
class NormalEquations:
    """Running Gram matrix ``F^T W F`` and moment ``F^T W r`` of a least-squares problem."""

    gram: np.ndarray
    moment: np.ndarray
    count: int = 0

    @classmethod
    def zeros(cls, n: int) -> "NormalEquations":
        if n < 1:
            raise ValueError("system size must be >= 1")
        return cls(np.zeros((n, n)), np.zeros(n), 0)

    @property
    def size(self) -> int:
        return self.moment.shape[0]

    def copy(self) -> "NormalEquations":
        return NormalEquations(self.gram.copy(), self.moment.copy(), self.count)

    def add_block(self, features: np.ndarray, targets: np.ndarray) -> "NormalEquations":
        """Accumulate many observations at once (rows of ``features``)."""
        features = np.asarray(features, dtype=np.float64)
        targets = np.asarray(targets, dtype=np.float64)
        if features.ndim != 2 or features.shape[1] != self.size:
            raise ValueError(
                f"feature block shape {features.shape} does not match system size {self.size}"
            )
        if targets.shape != (features.shape[0],):
            raise ValueError("targets must have one entry per feature row")
        g = features.T @ features
        # exact symmetry regardless of the BLAS kernel used
        self.gram += np.triu(g) + np.triu(g, 1).T
        self.moment += features.T @ targets
        self.count += features.shape[0]
        return self


def accumulate(
    ne: NormalEquations, feature, target: float, weight: float = 1.0
) -> NormalEquations:
    """Add one weighted observation ``(feature, target)`` to ``ne`` in place.

    Only the upper triangle is computed; it is mirrored so that the Gram
    matrix stays exactly symmetric.
    """
    f = _as_finite_vector(feature, "feature")
    if f.shape[0] != ne.size:
        raise ValueError(f"feature length {f.shape[0]} != system size {ne.size}")
    if not weight > 0:
        raise ValueError("weight must be positive")
    n = ne.size
    wf = weight * f
    iu = np.triu_indices(n)
    upper = wf[iu[0]] * f[iu[1]]
    ne.gram[iu] += upper
    ne.gram[iu[1], iu[0]] = ne.gram[iu]
    ne.moment += wf * float(target)
    ne.count += 1
    return ne


def merge(first: NormalEquations, second: NormalEquations) -> NormalEquations:
    """Elementwise sum of two partial accumulations (order matters only for rounding)."""
    if first.size != second.size:
        raise ValueError("cannot merge systems of different size")
    return NormalEquations(
        first.gram + second.gram, first.moment + second.moment, first.count + second.count
    )


def _residual(a: np.ndarray, w: np.ndarray, b: np.ndarray) -> float:
    scale = np.linalg.norm(a, np.inf) * np.linalg.norm(w, np.inf) + np.linalg.norm(b, np.inf)
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a @ w - b, np.inf) / scale)


def solve_regularized(ne: NormalEquations, reg: float) -> np.ndarray:
    """Solve ``(gram + reg * I) w = moment``.

    Cholesky is tried first; if it breaks down an LU solve is attempted and
    accepted only when its relative residual is within tolerance.
    """
    if not np.isfinite(reg) or reg < 0:
        raise SolverError(f"regularization must be finite and non-negative, got {reg!r}")
    gram, moment = ne.gram, ne.moment
    if not (np.all(np.isfinite(gram)) and np.all(np.isfinite(moment))):
        raise SolverError("normal equations contain non-finite entries")
    a = gram + reg * np.eye(ne.size)
    try:
        factor = scipy.linalg.cho_factor(a, lower=True, check_finite=False)
        w = scipy.linalg.cho_solve(factor, moment, check_finite=False)
    except np.linalg.LinAlgError:
        try:
            w = scipy.linalg.solve(a, moment, assume_a="sym", check_finite=False)
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise SolverError(f"regularized system is singular: {exc}") from exc
    if not np.all(np.isfinite(w)):
        raise SolverError("solution is not finite")
    res = _residual(a, w, moment)
    if res > RESIDUAL_TOL:
        # one round of iterative refinement before giving up
        w = w + np.linalg.lstsq(a, moment - a @ w, rcond=None)[0]
        res = _residual(a, w, moment)
        if res > RESIDUAL_TOL:
            raise SolverError(f"relative residual {res:.3e} exceeds {RESIDUAL_TOL:.0e}")
    return w


def flatten_outer(left, right) -> np.ndarray:
    """Row-major flattening of ``outer(left, right)``."""
    left = np.asarray(left, dtype=np.float64)
    right = np.asarray(right, dtype=np.float64)
    return np.multiply.outer(left, right).reshape(-1)


def flatten(matrix) -> np.ndarray:
    """Concatenate the rows of ``matrix`` into a vector."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError("flatten expects a matrix")
    return m.reshape(-1).copy()


def unflatten(vector, rows: int, cols: int) -> np.ndarray:
    """Inverse of :func:`flatten`: slice ``vector`` into ``rows`` pieces of length ``cols``."""
    v = np.asarray(vector, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] != rows * cols:
        raise ValueError(f"cannot reshape vector of length {v.size} into {rows}x{cols}")
    return v.reshape(rows, cols).copy()
