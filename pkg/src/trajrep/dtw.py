"""Dynamic time warping over raw GPS sequences.

Classic unconstrained DP with haversine point distances:
``D[i][j] = d(a_i, b_j) + min(D[i-1][j], D[i][j-1], D[i-1][j-1])``.
The cost matrix is built with vectorized haversine; the recurrence runs
under numba (it is inherently sequential along each row).
"""

from __future__ import annotations

import numpy as np
from numba import njit

from .geo import Trajectory, haversine_matrix_m


@njit(cache=True)
def _dtw_from_cost(cost: np.ndarray) -> float:
    n, m = cost.shape
    prev = np.empty(m, dtype=np.float64)
    cur = np.empty(m, dtype=np.float64)
    prev[0] = cost[0, 0]
    for j in range(1, m):
        prev[j] = prev[j - 1] + cost[0, j]
    for i in range(1, n):
        cur[0] = prev[0] + cost[i, 0]
        for j in range(1, m):
            best = prev[j]
            if prev[j - 1] < best:
                best = prev[j - 1]
            if cur[j - 1] < best:
                best = cur[j - 1]
            cur[j] = cost[i, j] + best
        prev, cur = cur, prev
    return prev[m - 1]


def dtw(a: Trajectory, b: Trajectory) -> float:
    """DTW distance in meters between two trajectories (no warping window)."""
    if len(a.points) == 0 or len(b.points) == 0:
        raise ValueError("DTW requires non-empty trajectories")
    lat_a, lon_a = a.lat_lon_arrays()
    lat_b, lon_b = b.lat_lon_arrays()
    cost = haversine_matrix_m(lat_a, lon_a, lat_b, lon_b)
    return float(_dtw_from_cost(cost))


def dtw_matrix(queries: list[Trajectory], corpus: list[Trajectory]) -> np.ndarray:
    """All-pairs DTW distances, shape (len(queries), len(corpus))."""
    out = np.empty((len(queries), len(corpus)), dtype=np.float64)
    q_arrays = [q.lat_lon_arrays() for q in queries]
    c_arrays = [c.lat_lon_arrays() for c in corpus]
    for i, (lat_q, lon_q) in enumerate(q_arrays):
        for j, (lat_c, lon_c) in enumerate(c_arrays):
            out[i, j] = _dtw_from_cost(haversine_matrix_m(lat_q, lon_q, lat_c, lon_c))
    return out
