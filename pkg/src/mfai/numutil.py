"""Small numeric helpers shared across modules."""

import numpy as np
from threadpoolctl import threadpool_limits


def pvar(x):
    """Population variance (denominator = count) over all entries of x."""
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        raise ValueError("variance of an empty array is undefined")
    return float(np.var(x))


def deterministic_svd(a):
    """Full SVD pinned to one BLAS thread.

    Threaded LAPACK reductions may round differently depending on the pool
    size; pinning keeps results bit-identical across thread settings.
    """
    with threadpool_limits(limits=1):
        return np.linalg.svd(a, full_matrices=False)


def leading_triplet(a):
    """Leading singular triplet (sigma, u, v) of a dense matrix."""
    u, s, vt = deterministic_svd(a)
    return float(s[0]), u[:, 0].copy(), vt[0, :].copy()
