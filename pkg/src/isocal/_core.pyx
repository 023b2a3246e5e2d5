# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels for non-increasing isotonic regression.

Every routine here has a line-for-line counterpart in ``_pyfallback``; the
two are checked against each other in the test suite.
"""

import numpy as np
cimport numpy as cnp
from libc.string cimport memcpy

cnp.import_array()

cdef enum:
    COL_BLOCK = 16
    ROW_TILE = 64


cdef Py_ssize_t _pava_weighted(const double* y, const double* w, Py_ssize_t m,
                               Py_ssize_t ystride, Py_ssize_t wstride,
                               double* out, double* bsum, double* bwt,
                               Py_ssize_t* bcnt) noexcept nogil:
    """Weighted non-increasing fit of ``y`` written to ``out``.

    Blocks keep weighted sums; a new block merges backwards while the mean
    before it is smaller (compared by cross-multiplication, no division).
    Zero-weight entries join the block on their left (or the first positive
    block when they lead). Returns the number of blocks, 0 if all weights are
    zero.
    """
    cdef Py_ssize_t nb = 0, lead = 0, i, k, pos, cnt
    cdef double wi, sm, wt, v
    for i in range(m):
        wi = w[i * wstride]
        if wi == 0.0:
            if nb == 0:
                lead += 1
            else:
                bcnt[nb - 1] += 1
            continue
        sm = y[i * ystride] * wi
        wt = wi
        cnt = 1
        if nb == 0:
            cnt += lead
            lead = 0
        while nb > 0 and bsum[nb - 1] * wt < sm * bwt[nb - 1]:
            nb -= 1
            sm += bsum[nb]
            wt += bwt[nb]
            cnt += bcnt[nb]
        bsum[nb] = sm
        bwt[nb] = wt
        bcnt[nb] = cnt
        nb += 1
    if nb == 0:
        return 0
    pos = 0
    for k in range(nb):
        v = bsum[k] / bwt[k]
        for i in range(bcnt[k]):
            out[pos] = v
            pos += 1
    return nb


cdef void _pava_unit(double* y, Py_ssize_t m, double* bsum,
                     double* bcnt) noexcept nogil:
    """Unit-weight non-increasing fit of the contiguous vector ``y``, in place."""
    cdef Py_ssize_t nb = 0, i, k, pos, c
    cdef double sm, cnt, v
    for i in range(m):
        sm = y[i]
        cnt = 1.0
        while nb > 0 and bsum[nb - 1] * cnt < sm * bcnt[nb - 1]:
            nb -= 1
            sm += bsum[nb]
            cnt += bcnt[nb]
        bsum[nb] = sm
        bcnt[nb] = cnt
        nb += 1
    pos = 0
    for k in range(nb):
        v = bsum[k] / bcnt[k]
        c = <Py_ssize_t>bcnt[k]
        for i in range(c):
            y[pos] = v
            pos += 1


def pava_weighted(const double[::1] y, const double[::1] w):
    """Weighted non-increasing PAVA; returns ``None`` when every weight is zero."""
    cdef Py_ssize_t m = y.shape[0]
    out = np.empty(m, dtype=np.float64)
    if m == 0:
        return out
    cdef double[::1] o = out
    cdef double[::1] bval = np.empty(m, dtype=np.float64)
    cdef double[::1] bwt = np.empty(m, dtype=np.float64)
    cdef Py_ssize_t[::1] bcnt = np.empty(m, dtype=np.intp)
    cdef Py_ssize_t nb
    with nogil:
        nb = _pava_weighted(&y[0], &w[0], m, 1, 1, &o[0], &bval[0], &bwt[0], &bcnt[0])
    if nb == 0:
        return None
    return out


def pava_rows_inplace(double[:, ::1] a):
    """Unit-weight non-increasing fit of every row of ``a``, in place."""
    cdef Py_ssize_t n = a.shape[0], m = a.shape[1], i
    if n == 0 or m == 0:
        return
    cdef double[::1] bval = np.empty(m, dtype=np.float64)
    cdef double[::1] bcnt = np.empty(m, dtype=np.float64)
    with nogil:
        for i in range(n):
            _pava_unit(&a[i, 0], m, &bval[0], &bcnt[0])


def pava_rows_weighted_inplace(double[:, ::1] a, const double[:, ::1] w):
    """Weighted non-increasing fit of every row of ``a``, in place.

    ``w`` has either the shape of ``a`` or a single row shared by all rows.
    Returns the index of the first row whose weights are all zero, else -1.
    """
    cdef Py_ssize_t n = a.shape[0], m = a.shape[1], i, nb
    cdef Py_ssize_t wrow = 0 if w.shape[0] == 1 else 1
    if n == 0 or m == 0:
        return -1
    cdef double[::1] buf = np.empty(m, dtype=np.float64)
    cdef double[::1] bval = np.empty(m, dtype=np.float64)
    cdef double[::1] bwt = np.empty(m, dtype=np.float64)
    cdef Py_ssize_t[::1] bcnt = np.empty(m, dtype=np.intp)
    cdef Py_ssize_t bad = -1
    with nogil:
        for i in range(n):
            nb = _pava_weighted(&a[i, 0], &w[i * wrow, 0], m, 1, 1,
                                &buf[0], &bval[0], &bwt[0], &bcnt[0])
            if nb == 0:
                bad = i
                break
            memcpy(&a[i, 0], &buf[0], m * sizeof(double))
    return bad


def dykstra_cycle(const double[:, ::1] Y, double[:, ::1] P, double[:, ::1] Q,
                  const double[::1] colw=None, double[:, ::1] X_prev=None):
    """One risk-then-time Dykstra cycle in residual form.

    The iterate is never stored: with target ``Y`` and residuals ``P`` (risk
    step) and ``Q`` (time step) it equals ``Y - P - Q``. The risk step fits
    every column of ``Y - Q`` with unit PAVA and sets ``P`` to the residual;
    the time step fits every row of ``Y - P`` (weighted by ``colw`` when
    given, for merged duplicate columns) and sets ``Q`` to the residual.

    When ``X_prev`` is given it must hold the iterate from before the cycle;
    the squared (column-weighted) Frobenius norm of the change is returned
    and ``X_prev`` is overwritten with the new iterate. Otherwise -1 is
    returned.
    """
    cdef Py_ssize_t n = Y.shape[0], K = Y.shape[1]
    cdef Py_ssize_t i, i0, i1, j, j0, b, nbk
    cdef double d, change = 0.0
    cdef bint track = X_prev is not None
    cdef bint weighted = colw is not None
    if n == 0 or K == 0:
        return 0.0
    cdef Py_ssize_t wsz = n if n > K else K
    cdef double[:, ::1] colbuf = np.empty((COL_BLOCK, n), dtype=np.float64)
    cdef double[:, ::1] colfit = np.empty((COL_BLOCK, n), dtype=np.float64)
    cdef double[::1] rowbuf = np.empty(K, dtype=np.float64)
    cdef double[::1] rowfit = np.empty(K, dtype=np.float64)
    cdef double[::1] bval = np.empty(wsz, dtype=np.float64)
    cdef double[::1] bwt = np.empty(wsz, dtype=np.float64)
    cdef Py_ssize_t[::1] bcnt = np.empty(wsz, dtype=np.intp)
    with nogil:
        # risk direction, COL_BLOCK columns at a time through row tiles
        j0 = 0
        while j0 < K:
            nbk = COL_BLOCK if j0 + COL_BLOCK <= K else K - j0
            i0 = 0
            while i0 < n:
                i1 = i0 + ROW_TILE if i0 + ROW_TILE <= n else n
                for b in range(nbk):
                    for i in range(i0, i1):
                        colbuf[b, i] = Y[i, j0 + b] - Q[i, j0 + b]
                i0 = i1
            for b in range(nbk):
                memcpy(&colfit[b, 0], &colbuf[b, 0], n * sizeof(double))
                _pava_unit(&colfit[b, 0], n, &bval[0], &bwt[0])
            i0 = 0
            while i0 < n:
                i1 = i0 + ROW_TILE if i0 + ROW_TILE <= n else n
                for i in range(i0, i1):
                    for b in range(nbk):
                        P[i, j0 + b] = colbuf[b, i] - colfit[b, i]
                i0 = i1
            j0 += nbk
        # time direction, rows are contiguous
        for i in range(n):
            for j in range(K):
                rowbuf[j] = Y[i, j] - P[i, j]
            if weighted:
                _pava_weighted(&rowbuf[0], &colw[0], K, 1, 1, &rowfit[0],
                               &bval[0], &bwt[0], &bcnt[0])
            else:
                memcpy(&rowfit[0], &rowbuf[0], K * sizeof(double))
                _pava_unit(&rowfit[0], K, &bval[0], &bwt[0])
            for j in range(K):
                Q[i, j] = rowbuf[j] - rowfit[j]
            if track:
                for j in range(K):
                    d = rowfit[j] - X_prev[i, j]
                    change += (colw[j] if weighted else 1.0) * d * d
                    X_prev[i, j] = rowfit[j]
    return change if track else -1.0
