"""Patchify point clouds and build mask plans.

A cloud is split into p patches: FPS picks the patch centers, KNN gathers
the m nearest points per center, and groups are stored center-relative so
the embedder sees translation-normalized local geometry.  Two masking
strategies: global random (uniform patches) and local block (one KNN-grown
block around a random seed patch).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry
from .errors import UsageError

GLOBAL_RANDOM = "global_random"
LOCAL_BLOCK = "local_block"


@dataclass
class PatchSet:
    """p patch centers with p x m center-relative point groups."""

    centers: np.ndarray  # (p, 3)
    groups: np.ndarray  # (p, m, 3), group[j] = cloud[knn_j] - centers[j]
    source_indices: np.ndarray  # (p, m) indices into the cloud

    @property
    def num_patches(self) -> int:
        return self.centers.shape[0]

    @property
    def group_size(self) -> int:
        return self.groups.shape[1]


@dataclass
class MaskPlan:
    """Which patches are hidden: strategy, ratio and the boolean mask."""

    strategy: str
    ratio: float
    mask: np.ndarray  # (p,) bool, True = masked
    seed_patch: int | None = None  # local block only

    @property
    def num_masked(self) -> int:
        return int(self.mask.sum())


def mask_count(p: int, r: float) -> int:
    """Number of masked patches: round(r * p), rejected when 0 or p."""
    if not 0.0 < r < 1.0:
        raise UsageError(f"mask ratio must lie in (0, 1), got {r}")
    count = int(round(r * p))
    if count in (0, p):
        raise UsageError(
            f"mask ratio {r} with p={p} leaves nothing to mask or reconstruct"
        )
    return count


def patchify(pc, p: int, m: int, start: int = 0) -> PatchSet:
    """FPS centers + per-center KNN groups, groups stored center-relative."""
    points = np.asarray(getattr(pc, "points", pc), dtype=np.float64)
    n = points.shape[0]
    if p > n or m > n:
        raise UsageError(f"patchify needs p <= N and m <= N, got p={p}, m={m}, N={n}")
    center_idx = geometry.fps(points, p, start=start)
    centers = points[center_idx]
    source = geometry.knn(centers, points, m)
    groups = points[source] - centers[:, None, :]
    return PatchSet(centers=centers, groups=groups, source_indices=source)


def global_random_mask(p: int, r: float, rng: np.random.Generator) -> MaskPlan:
    """Mask round(r*p) patches chosen uniformly without replacement."""
    count = mask_count(p, r)
    mask = np.zeros(p, dtype=bool)
    mask[rng.choice(p, size=count, replace=False)] = True
    return MaskPlan(strategy=GLOBAL_RANDOM, ratio=r, mask=mask)


def local_block_mask(
    centers: np.ndarray, r: float, rng: np.random.Generator, blocks: int = 1
) -> MaskPlan:
    """Mask contiguous block(s) of patches grown by center-KNN from random seeds.

    With blocks=1 (the default) the masked set is exactly the round(r*p)
    centers nearest to one uniformly drawn seed patch, seed included.
    """
    centers = np.asarray(centers, dtype=np.float64)
    p = centers.shape[0]
    count = mask_count(p, r)
    if not 1 <= blocks <= count:
        raise UsageError(f"blocks must lie in [1, {count}], got {blocks}")
    seeds = rng.choice(p, size=blocks, replace=False)
    mask = np.zeros(p, dtype=bool)
    quotas = [count // blocks + (1 if i < count % blocks else 0) for i in range(blocks)]
    for seed, quota in zip(seeds, quotas):
        order = geometry.knn(centers[seed : seed + 1], centers, p)[0]
        taken = 0
        for j in order:
            if taken == quota:
                break
            if not mask[j]:
                mask[j] = True
                taken += 1
    return MaskPlan(
        strategy=LOCAL_BLOCK, ratio=r, mask=mask, seed_patch=int(seeds[0])
    )


def split(ps: PatchSet, plan: MaskPlan) -> tuple[PatchSet, PatchSet]:
    """Partition into (unmasked, masked) views, original order kept per side."""
    if plan.mask.shape[0] != ps.num_patches:
        raise UsageError(
            f"mask length {plan.mask.shape[0]} != patch count {ps.num_patches}"
        )
    keep = ~plan.mask
    unmasked = PatchSet(ps.centers[keep], ps.groups[keep], ps.source_indices[keep])
    masked = PatchSet(
        ps.centers[plan.mask], ps.groups[plan.mask], ps.source_indices[plan.mask]
    )
    return unmasked, masked


def merge(unmasked: PatchSet, masked: PatchSet, plan: MaskPlan) -> PatchSet:
    """Inverse of :func:`split`: reassemble the original patch order."""
    p = plan.mask.shape[0]
    if unmasked.num_patches + masked.num_patches != p:
        raise UsageError("split sides do not add up to the plan length")
    centers = np.empty((p, 3), dtype=unmasked.centers.dtype)
    groups = np.empty((p,) + unmasked.groups.shape[1:], dtype=unmasked.groups.dtype)
    source = np.empty((p,) + unmasked.source_indices.shape[1:], dtype=np.int64)
    keep = ~plan.mask
    centers[keep], centers[plan.mask] = unmasked.centers, masked.centers
    groups[keep], groups[plan.mask] = unmasked.groups, masked.groups
    source[keep], source[plan.mask] = (
        unmasked.source_indices,
        masked.source_indices,
    )
    return PatchSet(centers=centers, groups=groups, source_indices=source)
