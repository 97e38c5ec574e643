"""Backend selection for the hot ALS loops.

The compiled extension is used when it imports; otherwise the NumPy
fallback is used. Setting ``MDALS_BACKEND=python`` forces the fallback.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from types import ModuleType

import numpy as np

from . import _pykernels

logger = logging.getLogger(__name__)


def _load_compiled() -> ModuleType | None:
    try:
        from . import _ckernels
    except ImportError:
        return None
    return _ckernels


compiled = _load_compiled()
python = _pykernels

if os.environ.get("MDALS_BACKEND", "").lower() == "python" or compiled is None:
    active: ModuleType = _pykernels
else:
    active = compiled

BACKEND: str = active.BACKEND


def available_backends() -> dict[str, ModuleType]:
    out = {"python": _pykernels}
    if compiled is not None:
        out["cython"] = compiled
    return out


def get_backend(name: str | None = None) -> ModuleType:
    if name is None:
        return active
    try:
        return available_backends()[name]
    except KeyError:
        raise ValueError(f"backend {name!r} is not available") from None


def projection_normal_equations(
    indptr,
    indices,
    targets,
    keep,
    entities,
    own_values,
    own_offsets,
    p,
    other,
    workers=1,
    backend=None,
):
    """Gram ``Q^T Q`` and moment ``Q^T r`` for one projection matrix.

    ``entities`` is split into ``workers`` contiguous chunks; each chunk
    accumulates its partial sums independently and the partials are added
    in chunk order, so the result depends on the worker count but not on
    thread scheduling.
    """
    kern = get_backend(backend)
    n = other.shape[1] * p
    chunks = [c for c in np.array_split(entities, max(1, workers)) if c.size] or [entities]

    def run(chunk):
        gram = np.zeros((n, n))
        moment = np.zeros(n)
        used = kern.projection_system(
            indptr, indices, targets, keep, chunk, own_values, own_offsets, p, other, gram, moment
        )
        return gram, moment, used

    if len(chunks) == 1:
        parts = [run(chunks[0])]
    else:
        with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
            parts = list(pool.map(run, chunks))
    gram, moment, used = parts[0]
    for g, m, u in parts[1:]:
        gram += g
        moment += m
        used += u
    return gram, moment, int(used)
