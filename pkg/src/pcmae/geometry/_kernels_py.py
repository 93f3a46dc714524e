"""Pure-NumPy geometry kernels (fallback backend).

Same contracts as the compiled twin in ``_kernels_cy``: float64 C-contiguous
(n, 3) inputs, int64 index outputs, ties always resolved toward the lower
index.  Distances are computed coordinate-wise (never via the expanded
a^2+b^2-2ab form) so both backends and the brute-force oracles agree
bitwise on every comparison.
"""

import numpy as np


def pairwise_sq_dist(a, b):
    diff = a[:, None, :] - b[None, :, :]
    return (diff * diff).sum(axis=-1)


def fps(pts, p, start):
    n = pts.shape[0]
    selected = np.empty(p, dtype=np.int64)
    dist = np.full(n, np.inf)
    cur = int(start)
    for i in range(p):
        selected[i] = cur
        diff = pts - pts[cur]
        np.minimum(dist, (diff * diff).sum(axis=1), out=dist)
        dist[cur] = -1.0  # exclude picked indices; keeps picks distinct
        cur = int(np.argmax(dist))
    return selected


def knn(query, ref, k):
    d = pairwise_sq_dist(query, ref)
    return np.argsort(d, axis=1, kind="stable")[:, :k].astype(np.int64)


def nearest(query, ref):
    d = pairwise_sq_dist(query, ref)
    return np.argmin(d, axis=1).astype(np.int64)


def chamfer(x, y):
    d = pairwise_sq_dist(x, y)
    return float(d.min(axis=1).mean() + d.min(axis=0).mean())
