"""Pure numpy implementations of the kernels in ``_kernels.pyx``."""
import numpy as np


def average_ranks(v):
    v = np.asarray(v, dtype=np.float64)
    n = v.shape[0]
    order = np.argsort(v, kind="mergesort")
    sv = v[order]
    new_group = np.empty(n, dtype=bool)
    new_group[0] = True
    new_group[1:] = sv[1:] != sv[:-1]
    group = np.cumsum(new_group) - 1
    starts = np.flatnonzero(new_group)
    ends = np.append(starts[1:], n) - 1
    avg = 0.5 * (starts + ends) + 1.0
    out = np.empty(n, dtype=np.float64)
    out[order] = avg[group]
    return out


def kendall_pair_counts(x, y):
    """Return (concordant - discordant, pairs tied in x, pairs tied in y)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    s = 0
    tx = 0
    ty = 0
    for i in range(x.shape[0] - 1):
        sx = np.sign(x[i + 1:] - x[i])
        sy = np.sign(y[i + 1:] - y[i])
        s += int(np.sum(sx * sy))
        tx += int(np.count_nonzero(sx == 0))
        ty += int(np.count_nonzero(sy == 0))
    return s, tx, ty


def pearson_distance_matrix(rows, eps):
    """1 - Pearson correlation between every pair of rows.

    Rows whose variance is below ``eps`` correlate 0 with everything,
    themselves included. Returns (distances, degenerate_row_mask).
    """
    rows = np.asarray(rows, dtype=np.float64)
    n, d = rows.shape
    c = rows - rows.mean(axis=1, keepdims=True)
    ss = np.einsum("ij,ij->i", c, c)
    degenerate = ss / d < eps
    norms = np.sqrt(np.where(degenerate, 1.0, ss))
    z = c / norms[:, None]
    corr = z @ z.T
    iu = np.triu_indices(n, 1)
    upper = np.clip(corr[iu], -1.0, 1.0)
    upper[degenerate[iu[0]] | degenerate[iu[1]]] = 0.0
    out = np.empty((n, n), dtype=np.float64)
    out[iu] = 1.0 - upper
    out[iu[1], iu[0]] = out[iu]
    out[np.arange(n), np.arange(n)] = np.where(degenerate, 1.0, 0.0)
    return out, degenerate
