"""Geometric point-set kernels: sampling, neighbor queries, interpolation.

All kernels are brute force (O(N*M) distance matrices, no spatial index) and
operate on plain float arrays; they are not differentiated through. The one
exception is ``three_nn_interpolate``, whose feature combination is built
from autodiff ops so gradients flow to the coarse features while the
interpolation weights stay fixed geometry.

Tie-breaking is pinned everywhere so results are reproducible and
permutation-stable: neighbor candidates order by (distance, index), farthest
point selection takes the lowest index among equally far points.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad

__all__ = [
    "farthest_point_sample",
    "ball_query",
    "knn",
    "three_nn_interpolate",
    "interpolation_weights",
    "normalize_points",
]

# Softening term in inverse-square-distance weights; keeps exact hits finite.
INTERP_EPS = 1e-8


def _check_points(points: np.ndarray, name: str) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"{name}: expected (n, 3) array, got shape {pts.shape}")
    if pts.shape[0] == 0:
        raise ValueError(f"{name}: empty point set")
    return pts


def farthest_point_sample(
    points: np.ndarray,
    m: int,
    start: int | str = "lowest",
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Greedy farthest point sampling.

    Repeatedly picks the point with the largest distance to the already
    selected set; among equally far candidates the lowest index wins.

    Args:
        points: ``(n, 3)`` positions.
        m: number of samples, ``1 <= m <= n``.
        start: ``"lowest"`` starts from the lexicographically smallest
            ``(x, y, z)`` point (deterministic evaluation policy), ``"random"``
            draws the start index from ``rng`` (training policy), or an
            explicit integer index.

    Returns:
        ``(m,)`` int64 index array; for ``m == n`` it is a permutation of all
        indices.
    """
    pts = _check_points(points, "farthest_point_sample")
    n = pts.shape[0]
    if not 1 <= m <= n:
        raise ValueError(f"farthest_point_sample: m={m} outside [1, {n}]")

    if start == "lowest":
        first = int(np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0]))[0])
    elif start == "random":
        if rng is None:
            raise ValueError("farthest_point_sample: start='random' needs an rng")
        first = int(rng.integers(n))
    else:
        first = int(start)
        if not 0 <= first < n:
            raise ValueError(f"farthest_point_sample: start index {first} outside [0, {n})")

    selected = np.empty(m, dtype=np.int64)
    selected[0] = first
    min_d2 = ((pts - pts[first]) ** 2).sum(axis=1)
    for i in range(1, m):
        nxt = int(np.argmax(min_d2))  # first occurrence = lowest index on ties
        selected[i] = nxt
        d2 = ((pts - pts[nxt]) ** 2).sum(axis=1)
        np.minimum(min_d2, d2, out=min_d2)
    return selected


def ball_query(
    points: np.ndarray,
    centers: np.ndarray,
    radius: float,
    s: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Fixed-size neighborhoods within a radius.

    For each center the ``s`` nearest source points with distance <= radius
    are selected (distance ties broken toward the lower index) and reported in
    ascending index order. When fewer than ``s`` qualify, the lowest selected
    index is repeated to fill the row. A center with an empty ball falls back
    to its single nearest neighbor and is flagged.

    Args:
        points: ``(n, 3)`` source positions.
        centers: ``(m, 3)`` query positions.
        radius: ball radius, > 0.
        s: neighborhood size, >= 1.

    Returns:
        ``(m, s)`` int64 index array and an ``(m,)`` bool mask marking centers
        that used the nearest-neighbor fallback.
    """
    pts = _check_points(points, "ball_query")
    ctr = _check_points(centers, "ball_query centers")
    if radius <= 0:
        raise ValueError(f"ball_query: radius must be > 0, got {radius}")
    if s < 1:
        raise ValueError(f"ball_query: s must be >= 1, got {s}")

    n = pts.shape[0]
    m = ctr.shape[0]
    diff = ctr[:, None, :] - pts[None, :, :]
    d2 = np.einsum("mnk,mnk->mn", diff, diff)
    # Stable sort by distance keeps ascending index order among exact ties.
    order = np.argsort(d2, axis=1, kind="stable")
    counts = (d2 <= radius * radius).sum(axis=1)
    fallback = counts == 0

    # Every within-radius point sorts ahead of every out-of-radius point, so
    # the first min(count, s) order entries are exactly the qualifying set.
    p = min(s, n)
    take = np.minimum(counts, s)  # selected entries per row
    pos = np.arange(s, dtype=np.int64)
    valid = pos[None, :] < take[:, None]  # (m, s)
    slots = np.full((m, s), np.iinfo(np.int64).max, dtype=np.int64)
    slots[:, :p] = order[:, :p]
    slots[~valid] = np.iinfo(np.int64).max
    slots.sort(axis=1)  # ascending index order; sentinels land last
    first = slots[:, :1].copy()
    first[fallback, 0] = order[fallback, 0]  # empty ball: nearest neighbor
    idx = np.where(valid, slots, first)
    return idx, fallback


def knn(points: np.ndarray, queries: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k nearest source points per query, ascending distance,
    ties broken toward the lower index.

    Args:
        points: ``(n, 3)`` source positions.
        queries: ``(m, 3)`` query positions.
        k: neighbor count, ``1 <= k <= n``.

    Returns:
        ``(m, k)`` int64 index array.
    """
    pts = _check_points(points, "knn")
    qry = _check_points(queries, "knn queries")
    if not 1 <= k <= pts.shape[0]:
        raise ValueError(f"knn: k={k} outside [1, {pts.shape[0]}]")
    diff = qry[:, None, :] - pts[None, :, :]
    d2 = np.einsum("mnk,mnk->mn", diff, diff)
    return np.argsort(d2, axis=1, kind="stable")[:, :k].astype(np.int64)


def interpolation_weights(
    coarse_points: np.ndarray, fine_points: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Inverse-square-distance weights over the (up to) 3 nearest coarse
    points of each fine point.

    ``w_i = (1 / (d_i^2 + eps)) / sum_j (1 / (d_j^2 + eps))`` so each row sums
    to 1; an exact hit (d = 0) concentrates nearly all weight on its point.

    Returns:
        ``(n_fine, k)`` indices into the coarse set and ``(n_fine, k)``
        float64 weights, with ``k = min(3, n_coarse)``.
    """
    coarse = _check_points(coarse_points, "interpolation_weights coarse")
    fine = _check_points(fine_points, "interpolation_weights fine")
    k = min(3, coarse.shape[0])
    idx = knn(coarse, fine, k)
    d2 = ((fine[:, None, :] - coarse[idx]) ** 2).sum(axis=2)
    inv = 1.0 / (d2 + INTERP_EPS)
    weights = inv / inv.sum(axis=1, keepdims=True)
    return idx, weights


def three_nn_interpolate(
    coarse_points: np.ndarray,
    coarse_feats: "ad.Tensor | np.ndarray",
    fine_points: np.ndarray,
) -> ad.Tensor:
    """Upsample coarse features to fine positions by weighted 3-NN blending.

    The weights are fixed geometry (see ``interpolation_weights``); the output
    is differentiable with respect to ``coarse_feats``.

    Args:
        coarse_points: ``(n_coarse, 3)``.
        coarse_feats: ``(n_coarse, d)`` tensor or array.
        fine_points: ``(n_fine, 3)``.

    Returns:
        ``(n_fine, d)`` tensor.
    """
    feats = coarse_feats if isinstance(coarse_feats, ad.Tensor) else ad.Tensor(coarse_feats)
    if feats.data.ndim != 2 or feats.data.shape[0] != np.asarray(coarse_points).shape[0]:
        raise ValueError(
            f"three_nn_interpolate: feats shape {feats.data.shape} does not match "
            f"{np.asarray(coarse_points).shape[0]} coarse points"
        )
    idx, weights = interpolation_weights(coarse_points, fine_points)
    k = idx.shape[1]
    gathered = ad.gather_rows(feats, idx)  # (n_fine, k, d)
    w = ad.Tensor(weights[:, :, None].astype(feats.data.dtype))
    # Weighted sum over the k-neighbor set axis, via mean * k.
    return ad.scale(ad.mean_over_set(ad.mul(gathered, w)), float(k))


def normalize_points(points: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """Center a point set on its centroid and scale its max radius to 1.

    A degenerate set (all points coincident) is centered but left at scale 1.

    Returns:
        ``(points', centroid, scale)`` with ``points' = (points - centroid) / scale``.
    """
    pts = _check_points(points, "normalize_points")
    centroid = pts.mean(axis=0)
    shifted = pts - centroid
    scale = float(np.sqrt((shifted**2).sum(axis=1).max()))
    if scale == 0.0:
        scale = 1.0
    return shifted / scale, centroid, scale
