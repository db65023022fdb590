"""Shortest augmenting path assignment with warm-started column prices."""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def sap_warm(C, v):
    """Exact minimum-cost perfect matching of a square matrix ``C``.

    ``v`` holds column prices from a related problem (zeros for a cold
    start) and is updated in place to the optimal prices. Any initial
    prices are valid; good ones make most augmenting paths a single edge.
    Returns ``col4row`` or an array of -1 if no finite matching exists.
    """
    n = C.shape[0]
    u = np.zeros(n)
    col4row = np.full(n, -1, np.int64)
    row4col = np.full(n, -1, np.int64)
    path = np.full(n, -1, np.int64)
    shortest = np.empty(n)
    remaining = np.empty(n, np.int64)
    SR = np.zeros(n, np.bool_)
    SC = np.zeros(n, np.bool_)
    for cur in range(n):
        for j in range(n):
            remaining[j] = n - 1 - j
            shortest[j] = np.inf
            SR[j] = False
            SC[j] = False
        num_rem = n
        min_val = 0.0
        i = cur
        sink = -1
        while sink == -1:
            index = -1
            lowest = np.inf
            SR[i] = True
            base = min_val - u[i]
            for it in range(num_rem):
                j = remaining[it]
                r = base + C[i, j] - v[j]
                if r < shortest[j]:
                    path[j] = i
                    shortest[j] = r
                if shortest[j] < lowest or (shortest[j] == lowest and row4col[j] == -1):
                    lowest = shortest[j]
                    index = it
            min_val = lowest
            if index == -1 or min_val == np.inf:
                col4row[:] = -1
                return col4row
            j = remaining[index]
            if row4col[j] == -1:
                sink = j
            else:
                i = row4col[j]
            SC[j] = True
            num_rem -= 1
            remaining[index] = remaining[num_rem]
        u[cur] += min_val
        for i in range(n):
            if SR[i] and i != cur:
                u[i] += min_val - shortest[col4row[i]]
        for j in range(n):
            if SC[j]:
                v[j] -= min_val - shortest[j]
        j = sink
        while True:
            i = path[j]
            row4col[j] = i
            nxt = col4row[i]
            col4row[i] = j
            j = nxt
            if i == cur:
                break
    return col4row
