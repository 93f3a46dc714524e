"""Exact point-cloud kernels: pairwise distances, FPS, KNN, Chamfer, normalize.

Two interchangeable backends implement the inner loops: a compiled Cython
extension (``cython``) and a pure-NumPy fallback (``python``).  The compiled
one is picked at import when present; set ``PCMAE_KERNELS=python`` or
``=cython`` to force a choice, or call :func:`use_backend` at runtime.
Index outputs are identical across backends (ties resolve to the lower
index everywhere); value outputs agree to float64 round-off.

``chamfer_l2`` is polymorphic: on arrays it returns a float, on autodiff
tensors it returns a scalar tensor whose gradient routes through the
nearest-neighbour assignment (indices held constant).
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from ..errors import ConfigError, UsageError
from . import _kernels_py

try:
    from . import _kernels_cy
except ImportError:  # extension not built; fall back silently
    _kernels_cy = None

_BACKENDS = {"python": _kernels_py}
if _kernels_cy is not None:
    _BACKENDS["cython"] = _kernels_cy


def available_backends():
    return sorted(_BACKENDS)


def use_backend(name: str):
    """Select the kernel backend by name ('python' or 'cython')."""
    global _impl, _name
    if name not in _BACKENDS:
        raise ConfigError(
            f"kernel backend {name!r} unavailable; have {available_backends()}"
        )
    _impl = _BACKENDS[name]
    _name = name


def backend_name() -> str:
    return _name


_env = os.environ.get("PCMAE_KERNELS", "auto")
if _env == "auto":
    use_backend("cython" if _kernels_cy is not None else "python")
else:
    use_backend(_env)


@dataclass
class PointCloud:
    """N x 3 coordinates with an optional class label.

    ``sampled_with_replacement`` marks clouds produced by resampling a
    smaller source, where duplicate points are expected.
    """

    points: np.ndarray
    label: int | None = None
    sampled_with_replacement: bool = False

    def __post_init__(self):
        self.points = _coords("points", self.points)

    @property
    def size(self) -> int:
        return self.points.shape[0]


def _coords(name: str, arr) -> np.ndarray:
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 3:
        raise UsageError(f"{name} must be (n, 3) coordinates, got shape {a.shape}")
    if a.shape[0] == 0:
        raise UsageError(f"{name} is empty")
    if not np.isfinite(a).all():
        raise UsageError(f"{name} contains non-finite coordinates")
    return np.ascontiguousarray(a)


def pairwise_sq_dist(a, b) -> np.ndarray:
    """Squared Euclidean distances, shape (len(a), len(b))."""
    return _impl.pairwise_sq_dist(_coords("a", a), _coords("b", b))


def fps(points, p: int, start: int = 0) -> np.ndarray:
    """Greedy max-min farthest point sampling; returns p distinct indices.

    The first pick is ``start``; each next pick maximizes the distance to
    the already-selected set (first index wins ties).
    """
    pts = _coords("points", points)
    n = pts.shape[0]
    if not 1 <= p <= n:
        raise UsageError(f"fps needs 1 <= p <= {n}, got p={p}")
    if not 0 <= start < n:
        raise UsageError(f"fps start index {start} out of range for {n} points")
    return _impl.fps(pts, int(p), int(start))


def knn(query, ref, k: int) -> np.ndarray:
    """Indices of the k nearest ref points per query row, ascending by distance."""
    q = _coords("query", query)
    r = _coords("ref", ref)
    if not 1 <= k <= r.shape[0]:
        raise UsageError(f"knn needs 1 <= k <= {r.shape[0]}, got k={k}")
    return _impl.knn(q, r, int(k))


def nearest_indices(query, ref) -> np.ndarray:
    """Index of the single nearest ref point per query row."""
    return _impl.nearest(_coords("query", query), _coords("ref", ref))


def chamfer_l2(x, y):
    """Symmetric l2 Chamfer distance: per-set means of squared NN distances.

    CD = (1/|x|) sum_i min_j ||x_i - y_j||^2 + (1/|y|) sum_j min_i ||...||^2
    """
    if isinstance(x, ad.Tensor) or isinstance(y, ad.Tensor):
        if not isinstance(x, ad.Tensor):
            x = ad.Tensor(np.asarray(x))
        if not isinstance(y, ad.Tensor):
            y = ad.Tensor(np.asarray(y))
        return _chamfer_tensor(x, y)
    return _impl.chamfer(_coords("x", x), _coords("y", y))


def _chamfer_tensor(x: ad.Tensor, y: ad.Tensor) -> ad.Tensor:
    xa = _coords("x", x.data)
    ya = _coords("y", y.data)
    idx_xy = _impl.nearest(xa, ya)
    idx_yx = _impl.nearest(ya, xa)
    d1 = ad.sub(x, ad.gather_rows(y, idx_xy))
    d2 = ad.sub(y, ad.gather_rows(x, idx_yx))
    t1 = ad.scale(ad.sum_all(ad.mul(d1, d1)), 1.0 / xa.shape[0])
    t2 = ad.scale(ad.sum_all(ad.mul(d2, d2)), 1.0 / ya.shape[0])
    return ad.add(t1, t2)


def normalize_unit_sphere(points) -> np.ndarray:
    """Center on the centroid and scale so the farthest point has norm 1.

    An all-identical (degenerate) cloud maps to all zeros.
    """
    pts = _coords("points", points)
    centered = pts - pts.mean(axis=0)
    radius = np.sqrt((centered * centered).sum(axis=1).max())
    if radius == 0.0:
        return np.zeros_like(pts)
    out = centered / radius
    src = np.asarray(points)
    if src.dtype == np.float32:
        return out.astype(np.float32)
    return out
