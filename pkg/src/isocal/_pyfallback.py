"""Pure-Python kernels, used when the compiled ``_core`` extension is absent.

Same signatures and semantics as ``_core``. Slow on large matrices but exact.
"""

import numpy as np


def _blocks_weighted(y, w):
    sums, wts, cnts = [], [], []
    lead = 0
    for yi, wi in zip(y, w):
        if wi == 0.0:
            if sums:
                cnts[-1] += 1
            else:
                lead += 1
            continue
        sm, wt, cnt = float(yi) * wi, float(wi), 1
        if not sums:
            cnt += lead
            lead = 0
        # merge backwards while the previous mean is smaller
        while sums and sums[-1] * wt < sm * wts[-1]:
            sm += sums.pop()
            wt += wts.pop()
            cnt += cnts.pop()
        sums.append(sm)
        wts.append(wt)
        cnts.append(cnt)
    return [s / t for s, t in zip(sums, wts)], cnts


def _pava_unit(y):
    sums, cnts = [], []
    for yi in y:
        sm, cnt = float(yi), 1.0
        while sums and sums[-1] * cnt < sm * cnts[-1]:
            sm += sums.pop()
            cnt += cnts.pop()
        sums.append(sm)
        cnts.append(cnt)
    vals = [s / c for s, c in zip(sums, cnts)]
    return np.repeat(np.asarray(vals, dtype=np.float64), np.asarray(cnts, dtype=np.intp))


def pava_weighted(y, w):
    y = np.asarray(y, dtype=np.float64)
    if y.size == 0:
        return np.empty(0)
    vals, cnts = _blocks_weighted(y.tolist(), np.asarray(w, dtype=np.float64).tolist())
    if not vals:
        return None
    return np.repeat(np.asarray(vals, dtype=np.float64), cnts)


def pava_rows_inplace(a):
    for i in range(a.shape[0]):
        a[i, :] = _pava_unit(a[i, :].tolist())


def pava_rows_weighted_inplace(a, w):
    shared = w.shape[0] == 1
    for i in range(a.shape[0]):
        fit = pava_weighted(a[i], w[0] if shared else w[i])
        if fit is None:
            return i
        a[i, :] = fit
    return -1


def dykstra_cycle(Y, P, Q, colw=None, X_prev=None):
    U = Y - Q
    for j in range(Y.shape[1]):
        P[:, j] = U[:, j] - _pava_unit(U[:, j].tolist())
    V = Y - P
    X = np.empty_like(V)
    for i in range(Y.shape[0]):
        X[i] = _pava_unit(V[i].tolist()) if colw is None else pava_weighted(V[i], colw)
    Q[...] = V - X
    if X_prev is None:
        return -1.0
    w = 1.0 if colw is None else colw[None, :]
    change = float(np.sum(w * (X - X_prev) ** 2))
    X_prev[...] = X
    return change
