# cython: language_level=3
"""Compiled ALS kernels.

Both entry points mirror :mod:`mdals._pykernels` argument for argument; the
dispatcher in :mod:`mdals.kernels` picks whichever is importable.
"""

import numpy as np

cimport cython
from cython.parallel cimport parallel, prange
from libc.math cimport isfinite, sqrt
from libc.stdlib cimport free, malloc
from libc.string cimport memset

BACKEND = "cython"


cdef int _cholesky_solve(double* a, double* b, Py_ssize_t n) noexcept nogil:
    """In-place Cholesky of the n x n row-major ``a`` and solve ``a x = b`` into ``b``.

    Only the lower triangle of ``a`` is read. Returns 0 on success.
    """
    cdef Py_ssize_t i, j, k
    cdef double s
    for j in range(n):
        s = a[j * n + j]
        for k in range(j):
            s -= a[j * n + k] * a[j * n + k]
        if not (s > 0.0) or not isfinite(s):
            return 1
        s = sqrt(s)
        a[j * n + j] = s
        for i in range(j + 1, n):
            s = a[i * n + j]
            for k in range(j):
                s -= a[i * n + k] * a[j * n + k]
            a[i * n + j] = s / a[j * n + j]
    for i in range(n):
        s = b[i]
        for k in range(i):
            s -= a[i * n + k] * b[k]
        b[i] = s / a[i * n + i]
    for i in range(n - 1, -1, -1):
        s = b[i]
        for k in range(i + 1, n):
            s -= a[k * n + i] * b[k]
        b[i] = s / a[i * n + i]
    for i in range(n):
        if not isfinite(b[i]):
            return 1
    return 0


@cython.boundscheck(False)
@cython.wraparound(False)
def solve_side(
    const long long[::1] indptr,
    const long long[::1] indices,
    const double[::1] targets,
    const double[:, ::1] other,
    const long long[::1] dims,
    const long long[::1] offsets,
    double[::1] values,
    double reg,
    const long long[::1] proj_index,
    const double[::1] proj_values,
    int workers=1,
):
    """Closed-form ridge update of every entity on one side.

    Entity ``e`` of dimension ``p`` gets features ``T_p^T f_i`` for each rated
    neighbour ``i`` (``f_i`` = row ``i`` of ``other``), where ``T_p`` is either
    the d x p projection stored at ``proj_values[proj_index[p]:]`` or, when
    ``proj_index[p] < 0``, the truncation to the first ``p`` coordinates.
    Returns the index of the first entity whose system failed, or -1.
    """
    cdef Py_ssize_t n = dims.shape[0]
    cdef Py_ssize_t d = other.shape[1]
    cdef Py_ssize_t e, jj, k, a_, b_, p, start
    cdef double r, acc
    cdef double* gram
    cdef double* rhs
    cdef double* z
    cdef const double* mat
    cdef const double* f
    cdef int status
    cdef unsigned char[::1] bad = np.zeros(n, dtype=np.uint8)

    if workers < 1:
        workers = 1
    with nogil, parallel(num_threads=workers):
        gram = <double*> malloc(d * d * sizeof(double))
        rhs = <double*> malloc(d * sizeof(double))
        z = <double*> malloc(d * sizeof(double))
        for e in prange(n, schedule="dynamic", chunksize=32):
            p = dims[e]
            memset(gram, 0, p * p * sizeof(double))
            memset(rhs, 0, p * sizeof(double))
            mat = NULL
            if proj_index[p] >= 0:
                mat = &proj_values[proj_index[p]]
            for jj in range(indptr[e], indptr[e + 1]):
                f = &other[indices[jj], 0]
                r = targets[jj]
                if mat == NULL:
                    for a_ in range(p):
                        z[a_] = f[a_]
                else:
                    for a_ in range(p):
                        acc = 0.0
                        for k in range(d):
                            acc = acc + mat[k * p + a_] * f[k]
                        z[a_] = acc
                for a_ in range(p):
                    rhs[a_] += r * z[a_]
                    for b_ in range(a_ + 1):
                        gram[a_ * p + b_] += z[a_] * z[b_]
            for a_ in range(p):
                gram[a_ * p + a_] += reg
            status = _cholesky_solve(gram, rhs, p)
            if status != 0:
                bad[e] = 1
            else:
                start = offsets[e]
                for a_ in range(p):
                    values[start + a_] = rhs[a_]
        free(gram)
        free(rhs)
        free(z)
    hits = np.flatnonzero(np.asarray(bad))
    return int(hits[0]) if hits.size else -1


@cython.boundscheck(False)
@cython.wraparound(False)
def projection_system(
    const long long[::1] indptr,
    const long long[::1] indices,
    const double[::1] targets,
    const unsigned char[::1] keep,
    const long long[::1] entities,
    const double[::1] own_values,
    const long long[::1] own_offsets,
    Py_ssize_t p,
    const double[:, ::1] other,
    double[:, ::1] gram,
    double[::1] moment,
):
    """Add ``sum q q^T`` and ``sum r q`` over kept interactions of ``entities``.

    ``q = flatten(f_i x_e^T)`` with ``f_i`` the dense d-row of the neighbour
    and ``x_e`` the length-``p`` own embedding. ``gram`` must be zeroed by the
    caller; the full symmetric matrix is written back. Returns the number of
    interactions accumulated.
    """
    cdef Py_ssize_t d = other.shape[1]
    cdef Py_ssize_t m = entities.shape[0]
    cdef Py_ssize_t n = d * p
    cdef Py_ssize_t t, e, jj, k, j, a_, b_
    cdef long long used = 0
    cdef double r
    cdef const double* x
    cdef const double* f
    cdef double* q = <double*> malloc(n * sizeof(double))
    if q == NULL:
        raise MemoryError()
    try:
        with nogil:
            for t in range(m):
                e = entities[t]
                x = &own_values[own_offsets[e]]
                for jj in range(indptr[e], indptr[e + 1]):
                    if not keep[jj]:
                        continue
                    f = &other[indices[jj], 0]
                    r = targets[jj]
                    for k in range(d):
                        for j in range(p):
                            q[k * p + j] = f[k] * x[j]
                    for a_ in range(n):
                        moment[a_] += r * q[a_]
                        for b_ in range(a_ + 1):
                            gram[a_, b_] += q[a_] * q[b_]
                    used += 1
            for a_ in range(n):
                for b_ in range(a_):
                    gram[b_, a_] = gram[a_, b_]
    finally:
        free(q)
    return used
