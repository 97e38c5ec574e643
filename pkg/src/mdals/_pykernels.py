"""NumPy implementation of the ALS kernels, used when the extension is unavailable.

Semantics match :mod:`mdals._ckernels` exactly; only floating-point
summation order differs. Entities are processed in groups of equal
dimension so the per-entity work is batched into a few array operations.
"""

from __future__ import annotations

import numpy as np

BACKEND = "python"

# cap on interactions materialized per batch (features are nnz x p x p)
_BATCH_NNZ = 1 << 16


def _gather(starts: np.ndarray, lens: np.ndarray) -> np.ndarray:
    """Concatenate ``arange(start, start + len)`` for every segment."""
    total = int(lens.sum())
    base = np.repeat(starts - np.r_[0, np.cumsum(lens)[:-1]], lens)
    return base + np.arange(total)


def _batched_cholesky_solve(gram: np.ndarray, rhs: np.ndarray):
    """Solve a stack of SPD systems; returns (solutions, failed_mask)."""
    failed = np.zeros(gram.shape[0], dtype=bool)
    try:
        chol = np.linalg.cholesky(gram)
    except np.linalg.LinAlgError:
        chol = np.empty_like(gram)
        for k in range(gram.shape[0]):
            try:
                chol[k] = np.linalg.cholesky(gram[k])
            except np.linalg.LinAlgError:
                failed[k] = True
                chol[k] = np.eye(gram.shape[1])
    y = np.linalg.solve(chol, rhs[..., None])
    x = np.linalg.solve(np.swapaxes(chol, 1, 2), y)[..., 0]
    failed |= ~np.all(np.isfinite(x), axis=1)
    return x, failed


def solve_side(
    indptr,
    indices,
    targets,
    other,
    dims,
    offsets,
    values,
    reg,
    proj_index,
    proj_values,
    workers=1,
):
    d = other.shape[1]
    counts = np.diff(indptr)
    first_bad = -1
    for p in np.unique(dims):
        p = int(p)
        if proj_index[p] >= 0:
            start = int(proj_index[p])
            mat = proj_values[start : start + d * p].reshape(d, p)
        else:
            mat = None
        group = np.flatnonzero(dims == p)
        # split the group so each batch stays within the interaction budget
        batch_id = (np.cumsum(counts[group]) - 1) // _BATCH_NNZ
        for ents in np.split(group, np.flatnonzero(np.diff(batch_id)) + 1):
            if ents.size == 0:
                continue
            lens = counts[ents]
            sel = _gather(indptr[ents], lens)
            feats = other[indices[sel]]
            feats = feats[:, :p] if mat is None else feats @ mat
            r = targets[sel]
            gram = np.zeros((ents.size, p, p))
            rhs = np.zeros((ents.size, p))
            live = lens > 0
            if live.any():
                seg = np.r_[0, np.cumsum(lens[live])[:-1]]
                gram[live] = np.add.reduceat(feats[:, :, None] * feats[:, None, :], seg, axis=0)
                rhs[live] = np.add.reduceat(feats * r[:, None], seg, axis=0)
            gram[:, np.arange(p), np.arange(p)] += reg
            x, failed = _batched_cholesky_solve(gram, rhs)
            if failed.any():
                bad = int(ents[np.flatnonzero(failed)[0]])
                first_bad = bad if first_bad < 0 else min(first_bad, bad)
            ok = ents[~failed]
            dest = offsets[ok][:, None] + np.arange(p)
            values[dest] = x[~failed]
    return first_bad


def projection_system(
    indptr,
    indices,
    targets,
    keep,
    entities,
    own_values,
    own_offsets,
    p,
    other,
    gram,
    moment,
):
    d = other.shape[1]
    if entities.size == 0:
        return 0
    lens = indptr[entities + 1] - indptr[entities]
    sel = _gather(indptr[entities], lens)
    owner = np.repeat(entities, lens)
    mask = keep[sel].astype(bool)
    sel, owner = sel[mask], owner[mask]
    used = int(sel.size)
    for s in range(0, used, _BATCH_NNZ):
        part, who = sel[s : s + _BATCH_NNZ], owner[s : s + _BATCH_NNZ]
        x = own_values[own_offsets[who][:, None] + np.arange(p)]
        f = other[indices[part]]
        q = (f[:, :, None] * x[:, None, :]).reshape(part.size, d * p)
        gram += q.T @ q
        moment += q.T @ targets[part]
    # exact symmetry, matching the compiled kernel
    lower = np.tril(gram)
    gram[...] = lower + np.tril(gram, -1).T
    return used
