"""Point-cloud plumbing: back-projection, normals, body segmentation, voxel grids.

Coordinates are in millimetres in the camera frame with the sensor at the
origin, x to the right, y upward and z along the optical axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import (
    DegenerateExtentError,
    DegenerateNeighborhoodError,
    DepthReidError,
    EmptySegmentError,
    InsufficientPointsError,
    InvalidIntrinsicsError,
    MissingJointError,
    MissingNormalsError,
    WrongGridKindError,
)

REQUIRED_JOINTS = (
    "head",
    "neck",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_hand",
    "right_hand",
    "torso",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
)

DEFAULT_NORMAL_K = 10
ARM_MARGIN_FRACTION = 0.05


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def validate(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidIntrinsicsError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")


@dataclass
class DepthImage:
    """Row-major depth map in mm, 0 marks an invalid pixel."""

    width: int
    height: int
    depth: np.ndarray
    intrinsics: Intrinsics

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=float).reshape(-1)
        if self.depth.size != self.width * self.height:
            raise DepthReidError(
                f"depth has {self.depth.size} values, expected {self.width}x{self.height}"
            )


@dataclass
class PointCloud:
    points: np.ndarray
    normals: Optional[np.ndarray] = None
    # Per-point integer part label; only synthetic clouds carry one.
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=float).reshape(-1, 3)
            if len(self.normals) != len(self.points):
                raise DepthReidError("normals and points differ in length")
            norms = np.linalg.norm(self.normals, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-6):
                raise DepthReidError("normals must be unit vectors")
        if self.labels is not None:
            self.labels = np.asarray(self.labels).reshape(-1)
            if len(self.labels) != len(self.points):
                raise DepthReidError("labels and points differ in length")

    def __len__(self) -> int:
        return len(self.points)

    @property
    def has_normals(self) -> bool:
        return self.normals is not None

    def features(self) -> np.ndarray:
        """Per-point 6-vectors ``[x, y, z, nx, ny, nz]``."""
        if self.normals is None:
            raise MissingNormalsError("cloud has no normals; run estimate_normals first")
        return np.hstack([self.points, self.normals])

    def subset(self, index) -> "PointCloud":
        return PointCloud(
            self.points[index],
            None if self.normals is None else self.normals[index],
            None if self.labels is None else self.labels[index],
        )


@dataclass
class SkeletonJoints:
    joints: dict

    def __post_init__(self):
        clean = {}
        for name, xyz in dict(self.joints).items():
            xyz = np.asarray(xyz, dtype=float).reshape(3)
            if not np.all(np.isfinite(xyz)):
                raise DepthReidError(f"joint {name!r} has non-finite coordinates")
            clean[name] = xyz
        missing = [j for j in REQUIRED_JOINTS if j not in clean]
        if missing:
            raise MissingJointError(f"missing joints: {', '.join(missing)}")
        self.joints = clean

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self.joints[name]
        except KeyError:
            raise MissingJointError(f"missing joint: {name}") from None

    def __contains__(self, name: str) -> bool:
        return name in self.joints

    @classmethod
    def from_mapping(cls, mapping: Mapping) -> "SkeletonJoints":
        return cls(dict(mapping))

    def to_dict(self) -> dict:
        return {name: [float(v) for v in xyz] for name, xyz in self.joints.items()}

    def transformed(self, rotation: np.ndarray, shift=(0.0, 0.0, 0.0)) -> "SkeletonJoints":
        rotation = np.asarray(rotation, dtype=float)
        shift = np.asarray(shift, dtype=float)
        return SkeletonJoints({k: rotation @ (v + shift) for k, v in self.joints.items()})


@dataclass
class VoxelGrid:
    rows: int
    cols: int
    overlapped: bool
    bbox: tuple  # (x_min, x_max, y_min, y_max)
    cells: list = field(repr=False)

    @property
    def cell_rows(self) -> int:
        return 2 * self.rows - 1 if self.overlapped else self.rows

    @property
    def cell_cols(self) -> int:
        return 2 * self.cols - 1 if self.overlapped else self.cols

    def __len__(self) -> int:
        return len(self.cells)


def _check_rotation(R: np.ndarray, name: str) -> None:
    if R.shape != (3, 3):
        raise DepthReidError(f"{name} must be 3x3")
    if not np.allclose(R @ R.T, np.eye(3), rtol=0, atol=1e-10):
        raise DepthReidError(f"{name} is not orthogonal")
    if abs(np.linalg.det(R) - 1.0) > 1e-10:
        raise DepthReidError(f"{name} is not a proper rotation")


@dataclass(frozen=True)
class RigidMotion:
    """View change ``f -> blockdiag(R1, R2) (f + [shift, 0])``."""

    R1: np.ndarray
    R2: np.ndarray
    shift: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "R1", np.asarray(self.R1, dtype=float))
        object.__setattr__(self, "R2", np.asarray(self.R2, dtype=float))
        object.__setattr__(self, "shift", np.asarray(self.shift, dtype=float).reshape(3))
        _check_rotation(self.R1, "R1")
        _check_rotation(self.R2, "R2")

    @classmethod
    def identity(cls) -> "RigidMotion":
        return cls(np.eye(3), np.eye(3), np.zeros(3))

    @classmethod
    def rigid(cls, R, shift=(0.0, 0.0, 0.0)) -> "RigidMotion":
        """A physical motion: normals turn with the same rotation as points."""
        return cls(R, R, shift)

    def block_rotation(self) -> np.ndarray:
        R = np.zeros((6, 6))
        R[:3, :3] = self.R1
        R[3:, 3:] = self.R2
        return R

    def inverse(self) -> "RigidMotion":
        # R1^T p' - shift == R1^T (p' - R1 shift)
        return RigidMotion(self.R1.T, self.R2.T, -self.R1 @ self.shift)

    def apply_features(self, features: np.ndarray) -> np.ndarray:
        features = np.asarray(features, dtype=float)
        out = np.empty_like(features)
        out[:, :3] = (features[:, :3] + self.shift) @ self.R1.T
        out[:, 3:] = features[:, 3:] @ self.R2.T
        return out


def depth_to_pointcloud(img: DepthImage) -> PointCloud:
    """Back-project every valid pixel through the pinhole model."""
    K = img.intrinsics
    K.validate()
    v, u = np.divmod(np.arange(img.width * img.height), img.width)
    z = img.depth
    valid = z > 0
    u, v, z = u[valid], v[valid], z[valid]
    x = (u - K.cx) * z / K.fx
    y = (K.cy - v) * z / K.fy
    return PointCloud(np.column_stack([x, y, z]))


def project_points(points: np.ndarray, intrinsics: Intrinsics) -> np.ndarray:
    """Inverse of :func:`depth_to_pointcloud`: returns (u, v) pixel coordinates."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    u = points[:, 0] * intrinsics.fx / points[:, 2] + intrinsics.cx
    v = intrinsics.cy - points[:, 1] * intrinsics.fy / points[:, 2]
    return np.column_stack([u, v])


def estimate_normals(cloud: PointCloud, k: int = DEFAULT_NORMAL_K) -> PointCloud:
    """PCA normals over each point and its ``k`` nearest neighbours.

    The normal is the least-scatter direction of the neighbourhood, flipped to
    face the sensor at the origin.
    """
    if k < 2:
        raise DepthReidError(f"k must be at least 2, got {k}")
    pts = cloud.points
    n = len(pts)
    if n < k + 1:
        raise InsufficientPointsError(f"need at least {k + 1} points for k={k}, got {n}")

    _, idx = cKDTree(pts).query(pts, k=k + 1)
    nbhd = pts[idx]  # (n, k+1, 3)
    centered = nbhd - nbhd.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / (k + 1)

    scale = max(1.0, float(np.mean(np.sum(pts**2, axis=1))))
    trace = np.trace(cov, axis1=1, axis2=2)
    if np.any(trace <= 1e-24 * scale):
        bad = int(np.argmax(trace <= 1e-24 * scale))
        raise DegenerateNeighborhoodError(f"neighbourhood of point {bad} has zero extent")

    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    flip = np.einsum("ni,ni->n", normals, -pts) < 0
    normals[flip] *= -1
    return PointCloud(pts.copy(), normals, cloud.labels)


def segment_torso_head(cloud: PointCloud, joints: SkeletonJoints) -> PointCloud:
    """Keep head and torso points; drop legs (below the hips) and arms.

    Below the neck, points must lie laterally within the shoulder span widened
    by 5% on each side. Points above the neck are kept as head.
    """
    if len(cloud) == 0:
        raise EmptySegmentError("cannot segment an empty cloud")
    p = cloud.points
    hip_y = min(joints["left_hip"][1], joints["right_hip"][1])
    neck_y = joints["neck"][1]
    sx = (joints["left_shoulder"][0], joints["right_shoulder"][0])
    lo, hi = min(sx), max(sx)
    margin = ARM_MARGIN_FRACTION * (hi - lo)

    above_hip = p[:, 1] >= hip_y
    lateral_ok = (p[:, 0] >= lo - margin) & (p[:, 0] <= hi + margin)
    keep = above_hip & ((p[:, 1] >= neck_y) | lateral_ok)
    if not np.any(keep):
        raise EmptySegmentError("no points left after head/torso segmentation")
    return cloud.subset(keep)


def _bin_index(s: np.ndarray, n: int) -> np.ndarray:
    # half-open bins, last one closed
    return np.minimum(np.floor(s).astype(int), n - 1)


def build_voxel_grid(cloud: PointCloud, rows: int = 6, cols: int = 2, overlapped: bool = False) -> VoxelGrid:
    """Partition the frontal (x, y) extent of the cloud into rectangular cells.

    Row 0 is the top of the body, column 0 the smallest x. Cells are numbered
    row-major. The overlapped variant uses cells of the same size stepped by
    half a cell, giving ``(2*rows-1) * (2*cols-1)`` cells.
    """
    if len(cloud) == 0:
        raise DepthReidError("cannot grid an empty cloud")
    if rows < 1 or cols < 1:
        raise DepthReidError("rows and cols must be positive")
    x, y = cloud.points[:, 0], cloud.points[:, 1]
    x_min, x_max, y_min, y_max = float(x.min()), float(x.max()), float(y.min()), float(y.max())
    if not (x_max > x_min and y_max > y_min):
        raise DegenerateExtentError("point cloud has zero width or height")

    # normalised positions; row axis runs downward from the top of the box
    sr = (y_max - y) / (y_max - y_min)
    sc = (x - x_min) / (x_max - x_min)

    cells = []
    if not overlapped:
        r = _bin_index(sr * rows, rows)
        c = _bin_index(sc * cols, cols)
        flat = r * cols + c
        order = np.argsort(flat, kind="stable")
        bounds = np.searchsorted(flat[order], np.arange(rows * cols + 1))
        cells = [order[bounds[i]:bounds[i + 1]] for i in range(rows * cols)]
    else:
        # in half-cell units a cell i covers [i, i+2); the last one is closed
        hr, hc = sr * 2 * rows, sc * 2 * cols
        nr, nc = 2 * rows - 1, 2 * cols - 1

        def members(s, i, n):
            upper = s <= i + 2 if i == n - 1 else s < i + 2
            return (s >= i) & upper

        row_masks = [members(hr, i, nr) for i in range(nr)]
        col_masks = [members(hc, j, nc) for j in range(nc)]
        for i in range(nr):
            for j in range(nc):
                cells.append(np.flatnonzero(row_masks[i] & col_masks[j]))
    return VoxelGrid(rows, cols, overlapped, (x_min, x_max, y_min, y_max), cells)


def adjacent_voxel_pairs(grid: VoxelGrid) -> list:
    """Unordered 8-adjacent cell pairs ``(a, b)`` with ``a < b``, sorted."""
    if grid.overlapped:
        raise WrongGridKindError("adjacency is defined on the non-overlapped grid only")
    return king_pairs(grid.rows, grid.cols)


def king_pairs(rows: int, cols: int) -> list:
    pairs = []
    for a in range(rows * cols):
        ra, ca = divmod(a, cols)
        for b in range(a + 1, rows * cols):
            rb, cb = divmod(b, cols)
            if max(abs(ra - rb), abs(ca - cb)) == 1:
                pairs.append((a, b))
    return pairs


def apply_rigid_motion(cloud: PointCloud, motion: RigidMotion) -> PointCloud:
    if cloud.normals is None:
        raise MissingNormalsError("rigid motion needs normals")
    points = (cloud.points + motion.shift) @ motion.R1.T
    normals = cloud.normals @ motion.R2.T
    return PointCloud(points, normals, cloud.labels)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Haar-distributed element of SO(3)."""
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


def yaw_rotation(degrees: float) -> np.ndarray:
    """Rotation about the vertical (y) axis."""
    t = np.deg2rad(degrees)
    c, s = np.cos(t), np.sin(t)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
