"""Deterministic k-nearest-neighbour search, farthest point sampling, and
patch extraction / stitching over 3-D coordinates.

Ties are always broken by lexicographic (x, y, z) comparison of the
candidate coordinates, never by storage index; this is what makes the whole
pipeline permutation-equivariant.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import ArgumentError, ContractError


def _as_points(a, name: str) -> np.ndarray:
    pts = np.asarray(a, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ArgumentError(f"{name} must have shape (N, 3), got {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ArgumentError(f"{name} contains non-finite coordinates")
    return pts


def _lex_order(d2, cx, cy, cz, idx):
    """Row-wise ordering by (distance, x, y, z, index).

    The index key only matters for exactly coincident points, where any
    choice is equivalent; it keeps the tree and brute-force paths identical.
    """
    return np.lexsort((idx, cz, cy, cx, d2), axis=-1)


class KdTree:
    """Exact KNN index over an (N, 3) point set, backed by a spatial tree.

    Candidate retrieval uses scipy's cKDTree; squared distances are then
    recomputed with the same arithmetic as the brute-force oracle and ties
    resolved lexicographically, so both paths return identical index sets.
    """

    def __init__(self, points):
        self.points = _as_points(points, "points")
        self._tree = cKDTree(self.points)

    def __len__(self):
        return len(self.points)

    def query(self, queries, k: int, exclude_self: bool = False):
        """Return (indices (M, k), sqdists (M, k)) sorted ascending.

        With exclude_self=True the queries must be the indexed points
        themselves (row i is point i) and point i is dropped for query i.
        """
        pts = self.points
        n = len(pts)
        q = _as_points(queries, "queries")
        m = len(q)
        if exclude_self and q.shape != pts.shape:
            raise ArgumentError(
                "exclude_self queries must be the indexed cloud itself "
                f"(got {q.shape} vs {pts.shape})"
            )
        limit = n - 1 if exclude_self else n
        if not 1 <= k <= limit:
            raise ArgumentError(
                f"k={k} out of range for {n} points"
                + (" (exclude-self)" if exclude_self else "")
            )
        if m == 0:
            return (np.empty((0, k), dtype=np.int64), np.empty((0, k)))

        k_ext = min(n, k + (1 if exclude_self else 0) + 4)
        rows = np.arange(m)[:, None]
        while True:
            _, idx = self._tree.query(q, k=k_ext)
            idx = np.atleast_2d(idx).reshape(m, k_ext).astype(np.int64)
            cand = pts[idx]
            diff = q[:, None, :] - cand
            d2 = (diff * diff).sum(axis=-1)
            far = d2.max(axis=1)
            if exclude_self:
                d2 = np.where(idx == rows, np.inf, d2)
            order = _lex_order(d2, cand[..., 0], cand[..., 1], cand[..., 2], idx)
            d2s = np.take_along_axis(d2, order, axis=1)
            # safe when no excluded point could beat or tie the kth candidate
            if k_ext == n or np.all(d2s[:, k - 1] < far):
                sel = order[:, :k]
                return (
                    np.take_along_axis(idx, sel, axis=1),
                    d2s[:, :k],
                )
            k_ext = min(n, 2 * k_ext)


def knn_query(cloud, queries, k: int, exclude_self: bool = False):
    """One-shot KNN (builds a KdTree internally)."""
    return KdTree(cloud).query(queries, k, exclude_self=exclude_self)


def knn_brute_force(cloud, queries, k: int, exclude_self: bool = False):
    """Exhaustive-scan oracle with the same contract and tie-break as knn_query."""
    pts = _as_points(cloud, "cloud")
    q = _as_points(queries, "queries")
    n, m = len(pts), len(q)
    if exclude_self and q.shape != pts.shape:
        raise ArgumentError(
            "exclude_self queries must be the indexed cloud itself "
            f"(got {q.shape} vs {pts.shape})"
        )
    limit = n - 1 if exclude_self else n
    if not 1 <= k <= limit:
        raise ArgumentError(
            f"k={k} out of range for {n} points"
            + (" (exclude-self)" if exclude_self else "")
        )
    if m == 0:
        return (np.empty((0, k), dtype=np.int64), np.empty((0, k)))
    diff = q[:, None, :] - pts[None, :, :]
    d2 = (diff * diff).sum(axis=-1)
    if exclude_self:
        d2[np.arange(m), np.arange(m)] = np.inf
    cx = np.broadcast_to(pts[:, 0], (m, n))
    cy = np.broadcast_to(pts[:, 1], (m, n))
    cz = np.broadcast_to(pts[:, 2], (m, n))
    idx = np.broadcast_to(np.arange(n), (m, n))
    order = _lex_order(d2, cx, cy, cz, idx)[:, :k]
    return (order.astype(np.int64), np.take_along_axis(d2, order, axis=1))


def _argmax_lex(values: np.ndarray, pts: np.ndarray, allowed: np.ndarray) -> int:
    """Index of the max value among allowed rows; ties by smallest (x, y, z)."""
    vals = np.where(allowed, values, -np.inf)
    best = vals.max()
    cand = np.flatnonzero(vals == best)
    sub = pts[cand]
    return int(cand[np.lexsort((sub[:, 2], sub[:, 1], sub[:, 0]))[0]])


def farthest_point_sample(cloud, count: int) -> np.ndarray:
    """Greedy max-min subset selection.

    The first pick is the point farthest from the centroid; each later pick
    maximizes the minimum distance to the already-chosen set.
    """
    pts = _as_points(cloud, "cloud")
    n = len(pts)
    if not 1 <= count <= n:
        raise ArgumentError(f"count={count} out of range for {n} points")
    allowed = np.ones(n, dtype=bool)
    centroid = pts.mean(axis=0)
    d0 = ((pts - centroid) ** 2).sum(axis=1)
    first = _argmax_lex(d0, pts, allowed)
    chosen = [first]
    allowed[first] = False
    mind = ((pts - pts[first]) ** 2).sum(axis=1)
    for _ in range(count - 1):
        nxt = _argmax_lex(mind, pts, allowed)
        chosen.append(nxt)
        allowed[nxt] = False
        mind = np.minimum(mind, ((pts - pts[nxt]) ** 2).sum(axis=1))
    return np.asarray(chosen, dtype=np.int64)


@dataclass
class Patch:
    """A fixed-size neighbourhood in its local unit-sphere frame."""

    seed_index: int
    member_indices: np.ndarray  # (size,)
    local_coords: np.ndarray    # (size, 3), max norm <= 1
    center: np.ndarray          # (3,)
    scale: float


def _make_patch(pts: np.ndarray, seed: int, members: np.ndarray) -> Patch:
    coords = pts[members]
    center = coords.mean(axis=0)
    centered = coords - center
    scale = float(np.sqrt((centered * centered).sum(axis=1).max()))
    if scale == 0.0:
        scale = 1.0  # all members coincide; any scale keeps the frame exact
    return Patch(
        seed_index=int(seed),
        member_indices=members.copy(),
        local_coords=centered / scale,
        center=center,
        scale=scale,
    )


def extract_patches(cloud, patch_size: int, min_coverage: int = 1) -> list[Patch]:
    """Cover the cloud with unit-sphere patches seeded by FPS order.

    Seeds are taken in farthest-point order until every point belongs to at
    least min_coverage patches; each patch is the patch_size nearest
    neighbours of its seed (include-self), centred on its centroid and
    scaled to max norm 1. min_coverage > 1 gives every point several
    independent patch estimates to average at stitch time.
    """
    pts = _as_points(cloud, "cloud")
    n = len(pts)
    if n == 0:
        raise ArgumentError("cannot extract patches from an empty cloud")
    if patch_size < 1:
        raise ArgumentError(f"patch_size must be positive, got {patch_size}")
    if min_coverage < 1:
        raise ArgumentError(f"min_coverage must be positive, got {min_coverage}")
    size = min(patch_size, n)
    tree = KdTree(pts)

    coverage = np.zeros(n, dtype=np.int64)
    patches: list[Patch] = []

    # incremental FPS: next seed is the point farthest from previous seeds
    allowed = np.ones(n, dtype=bool)
    centroid = pts.mean(axis=0)
    mind = ((pts - centroid) ** 2).sum(axis=1)
    while coverage.min() < min_coverage and allowed.any():
        seed = _argmax_lex(mind, pts, allowed)
        allowed[seed] = False
        mind = np.minimum(mind, ((pts - pts[seed]) ** 2).sum(axis=1))
        members, _ = tree.query(pts[seed][None, :], size)
        patch = _make_patch(pts, seed, members[0])
        patches.append(patch)
        coverage[patch.member_indices] += 1
    return patches


def stitch_patches(patches, denoised_locals, n: int) -> np.ndarray:
    """Average each point's denormalized positions over the patches holding it."""
    acc = np.zeros((n, 3))
    cnt = np.zeros(n)
    if len(patches) != len(denoised_locals):
        raise ArgumentError(
            f"{len(patches)} patches but {len(denoised_locals)} denoised blocks"
        )
    for patch, local in zip(patches, denoised_locals):
        local = np.asarray(local, dtype=np.float64)
        if local.shape != patch.local_coords.shape:
            raise ArgumentError(
                f"denoised block shape {local.shape} does not match patch "
                f"{patch.local_coords.shape}"
            )
        world = local * patch.scale + patch.center
        np.add.at(acc, patch.member_indices, world)
        np.add.at(cnt, patch.member_indices, 1.0)
    if np.any(cnt == 0):
        missing = np.flatnonzero(cnt == 0)[:8]
        raise ContractError(f"points not covered by any patch: {missing.tolist()}...")
    return acc / cnt[:, None]
