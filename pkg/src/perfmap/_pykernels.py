"""Pure numpy implementations of the hot deconvolution kernels.

These mirror ``_ckernels.pyx`` exactly in contract and are used whenever
the compiled extension is unavailable (or PERFMAP_PURE_PYTHON is set).
"""
import numpy as np


def oscillation_index_rows(k):
    """Oscillation index of each row of ``k``; rows that are all zero give 0."""
    k = np.asarray(k, dtype=np.float64)
    n = k.shape[1]
    peak = np.abs(k).max(axis=1)
    d2 = np.abs(k[:, 2:] - 2.0 * k[:, 1:-1] + k[:, :-2]).sum(axis=1)
    out = np.zeros(k.shape[0])
    nz = peak > 0
    out[nz] = d2[nz] / (n * peak[nz])
    return out


def osvd_select(coef, basis, ranks, oi_threshold):
    """Per-voxel smallest-lambda truncation whose output passes the OI test.

    coef   : (N, R) filtered SVD coefficients, u_i.c / s_i
    basis  : (T, R) right singular vectors truncated to the output length
    ranks  : (G,) retained component count per lambda, non-increasing
    Returns (k (N, T), choice (N,) grid index, converged (N,) bool).
    """
    coef = np.ascontiguousarray(coef, dtype=np.float64)
    basis = np.ascontiguousarray(basis, dtype=np.float64)
    ranks = np.asarray(ranks, dtype=np.int64)
    n = coef.shape[0]
    r0 = int(ranks[0])
    k = coef[:, :r0] @ basis[:, :r0].T
    choice = np.full(n, ranks.size - 1, dtype=np.int64)
    converged = np.zeros(n, dtype=bool)
    active = np.arange(n)
    for g in range(ranks.size):
        if g > 0 and ranks[g] < ranks[g - 1]:
            lo, hi = int(ranks[g]), int(ranks[g - 1])
            k[active] -= coef[active, lo:hi] @ basis[:, lo:hi].T
        oi = oscillation_index_rows(k[active])
        done = oi <= oi_threshold
        choice[active[done]] = g
        converged[active[done]] = True
        active = active[~done]
        if active.size == 0:
            break
    return k, choice, converged
