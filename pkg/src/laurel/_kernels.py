"""Fixed-order numeric kernels.

Every reduction here accumulates in ascending index order with a separate
multiply and add per term, so results are bit-identical to a plain Python
triple loop. numba is used only to make those loops fast.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def matmul(a, b):
    # four output rows per pass share each load of b[p, :]; every element
    # still accumulates over p in ascending order
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    i = 0
    while i + 4 <= m:
        for p in range(k):
            a0 = a[i, p]
            a1 = a[i + 1, p]
            a2 = a[i + 2, p]
            a3 = a[i + 3, p]
            for j in range(n):
                bj = b[p, j]
                out[i, j] += a0 * bj
                out[i + 1, j] += a1 * bj
                out[i + 2, j] += a2 * bj
                out[i + 3, j] += a3 * bj
        i += 4
    while i < m:
        for p in range(k):
            aip = a[i, p]
            for j in range(n):
                out[i, j] += aip * b[p, j]
        i += 1
    return out


@njit(cache=True)
def sum_all(a):
    flat = a.ravel()
    s = 0.0
    for i in range(flat.shape[0]):
        s += flat[i]
    return s


@njit(cache=True)
def sum_rows(a):
    # column totals of a 2-D array, rows added top to bottom
    m, n = a.shape
    out = np.zeros(n)
    for i in range(m):
        for j in range(n):
            out[j] += a[i, j]
    return out


@njit(cache=True)
def sum_last(a):
    # per-row totals of a 2-D array, left to right
    m, n = a.shape
    out = np.zeros(m)
    for i in range(m):
        s = 0.0
        for j in range(n):
            s += a[i, j]
        out[i] = s
    return out
