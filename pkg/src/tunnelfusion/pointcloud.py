"""Point-cloud containers and the low-level registration building blocks."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree


@dataclass(frozen=True)
class PointCloud:
    """Immutable set of 3D points with an acquisition timestamp."""

    points: np.ndarray
    timestamp: float = 0.0

    def __post_init__(self) -> None:
        pts = np.array(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must have shape (N, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "timestamp", float(self.timestamp))

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True, slots=True)
class NormalEstimate:
    """Surface normal and planarity score for one point."""

    normal: np.ndarray
    planarity: float


@dataclass(frozen=True)
class Correspondences:
    """Matched point pairs: parallel index arrays plus distances."""

    source_indices: np.ndarray
    target_indices: np.ndarray
    distances: np.ndarray

    def __len__(self) -> int:
        return self.source_indices.shape[0]

    def __iter__(self):
        return zip(
            self.source_indices.tolist(),
            self.target_indices.tolist(),
            self.distances.tolist(),
        )


def voxel_downsample(cloud: PointCloud, voxel_size: float) -> PointCloud:
    """Replace each occupied voxel by the centroid of its points.

    Output points are ordered by lexicographically sorted voxel index,
    which makes the operation deterministic regardless of input order.
    """
    if not (voxel_size > 0.0 and math.isfinite(voxel_size)):
        raise ValueError(f"voxel_size must be positive, got {voxel_size!r}")
    if len(cloud) == 0:
        return cloud
    cells = np.floor(cloud.points / voxel_size).astype(np.int64)
    _, inverse, counts = np.unique(cells, axis=0, return_inverse=True, return_counts=True)
    sums = np.zeros((counts.shape[0], 3))
    np.add.at(sums, inverse, cloud.points)
    return PointCloud(sums / counts[:, None], cloud.timestamp)


def _normal_arrays(points: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised core of :func:`estimate_normals`.

    Returns (normals (N, 3), planarity (N,)). Normals are unit vectors
    flipped to point toward the sensor origin.
    """
    n = points.shape[0]
    if k < 4:
        raise ValueError(f"k must be >= 4, got {k}")
    if n < k + 1:
        raise ValueError(f"need at least k+1={k + 1} points, got {n}")
    tree = cKDTree(points)
    # k+1 nearest including the query point itself, which is dropped.
    _, idx = tree.query(points, k=k + 1)
    neighbors = points[idx[:, 1:]]  # (N, k, 3)
    centered = neighbors - neighbors.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    eigvals, eigvecs = np.linalg.eigh(cov)  # ascending eigenvalues
    normals = eigvecs[:, :, 0]
    lam1 = eigvals[:, 2]
    lam2 = eigvals[:, 1]
    lam3 = np.maximum(eigvals[:, 0], 0.0)
    planarity = np.where(lam1 > 0.0, (lam2 - lam3) / np.where(lam1 > 0.0, lam1, 1.0), 0.0)
    # Flip each normal toward the origin of the sensor frame.
    flip = np.einsum("ni,ni->n", normals, points) > 0.0
    normals[flip] *= -1.0
    return normals, planarity


def estimate_normals(cloud: PointCloud, k: int = 12) -> list[NormalEstimate]:
    """Per-point normals from the covariance of the k nearest neighbors.

    The normal is the eigenvector of the smallest eigenvalue; planarity
    is (lambda2 - lambda3) / lambda1 for eigenvalues sorted descending,
    close to 1 on flat patches and near 0 for volumetric scatter.
    """
    normals, planarity = _normal_arrays(cloud.points, k)
    return [NormalEstimate(normals[i].copy(), float(planarity[i])) for i in range(len(cloud))]


def _associate_tree(
    tree: cKDTree, source_points: np.ndarray, max_dist: float
) -> Correspondences:
    dist, idx = tree.query(source_points, k=1, distance_upper_bound=max_dist)
    valid = idx < tree.n
    src = np.nonzero(valid)[0]
    return Correspondences(
        source_indices=src,
        target_indices=idx[valid].astype(np.int64),
        distances=dist[valid],
    )


def associate(source: PointCloud, target: PointCloud, max_dist: float) -> Correspondences:
    """Nearest-neighbor matches from source into target, gated at ``max_dist``.

    Pairs whose nearest target neighbor is farther than ``max_dist`` are
    dropped. Matching is exact (kd-tree), equivalent to brute force.
    """
    if not (max_dist > 0.0 and math.isfinite(max_dist)):
        raise ValueError(f"max_dist must be positive, got {max_dist!r}")
    if len(target) == 0 or len(source) == 0:
        return Correspondences(
            np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64), np.empty(0)
        )
    return _associate_tree(cKDTree(target.points), source.points, max_dist)


def write_ply(cloud: PointCloud, path: str | Path) -> None:
    """Write an ASCII PLY file with x, y, z vertex properties."""
    path = Path(path)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(cloud)}",
        "property float x",
        "property float y",
        "property float z",
        "end_header",
    ]
    for p in cloud.points:
        lines.append(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g}")
    path.write_text("\n".join(lines) + "\n", encoding="ascii", newline="\n")


def read_ply(path: str | Path, timestamp: float = 0.0) -> PointCloud:
    """Read an ASCII PLY file written by :func:`write_ply`.

    Raises ValueError on malformed headers, wrong vertex counts or
    non-finite coordinates.
    """
    text = Path(path).read_text(encoding="ascii")
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ValueError(f"{path}: not a PLY file")
    count = None
    body_start = None
    for i, line in enumerate(lines[1:], start=1):
        token = line.strip()
        if token.startswith("element vertex"):
            try:
                count = int(token.split()[-1])
            except ValueError as exc:
                raise ValueError(f"{path}: bad vertex count line {token!r}") from exc
        elif token == "end_header":
            body_start = i + 1
            break
        elif token.startswith("format") and "ascii" not in token:
            raise ValueError(f"{path}: only ASCII PLY is supported")
    if count is None or body_start is None:
        raise ValueError(f"{path}: missing vertex element or end_header")
    rows = [line.split() for line in lines[body_start:] if line.strip()]
    if len(rows) != count:
        raise ValueError(f"{path}: header promises {count} vertices, found {len(rows)}")
    try:
        pts = np.array(rows, dtype=float).reshape(count, 3) if count else np.empty((0, 3))
    except ValueError as exc:
        raise ValueError(f"{path}: malformed vertex rows") from exc
    if count and not np.all(np.isfinite(pts)):
        raise ValueError(f"{path}: non-finite coordinates")
    return PointCloud(pts, timestamp)
