"""Within/between-voxel covariance descriptors and the Eigen-depth embedding."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    InsufficientPointsError,
    InvalidMatrixError,
    LayoutMismatchError,
    MissingNormalsError,
    NotPositiveDefiniteError,
)
from .geometry import (
    PointCloud,
    SkeletonJoints,
    adjacent_voxel_pairs,
    build_voxel_grid,
    segment_torso_head,
)

DEFAULT_EPS_REL = 1e-6
EPS_FLOOR = 1e-9


def _symmetrize(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + np.swapaxes(M, -1, -2))


def within_voxel_covariance(features) -> np.ndarray:
    """Unbiased sample covariance of the voxel's 6-D feature vectors."""
    F = np.asarray(features, dtype=float)
    m = len(F)
    if m < 2:
        raise InsufficientPointsError(f"within-voxel covariance needs at least 2 points, got {m}")
    F = F - F[0]  # shift-invariant; keeps constant voxels exactly zero
    D = F - F.mean(axis=0)
    return _symmetrize(D.T @ D / (m - 1))


def between_voxel_covariance(p_features, q_features) -> np.ndarray:
    """Mean outer product of all cross-voxel feature differences.

    Evaluated in O(m + n) as ``S_p/m + S_q/n + (mu_p - mu_q)(mu_p - mu_q)^T``
    with ``S`` the centred scatter matrices, which equals the double sum over
    every pair exactly and avoids cancellation on millimetre offsets.
    """
    P = np.asarray(p_features, dtype=float)
    Q = np.asarray(q_features, dtype=float)
    if len(P) < 1 or len(Q) < 1:
        raise InsufficientPointsError("between-voxel covariance needs points on both sides")
    P, Q = P - P[0], Q - P[0]
    mp, mq = P.mean(axis=0), Q.mean(axis=0)
    Dp, Dq = P - mp, Q - mq
    d = mp - mq
    C = Dp.T @ Dp / len(P) + Dq.T @ Dq / len(Q) + np.outer(d, d)
    return _symmetrize(C)


def regularize(C, eps_rel: float = DEFAULT_EPS_REL) -> np.ndarray:
    """Add a trace-relative ridge so the spectrum is strictly positive."""
    C = np.asarray(C, dtype=float)
    if not np.all(np.isfinite(C)):
        raise InvalidMatrixError("covariance has non-finite entries")
    n = C.shape[-1]
    eps = eps_rel * max(np.trace(C) / n, EPS_FLOOR)
    return C + eps * np.eye(n)


def descending_eigh(C: np.ndarray):
    """Eigenpairs sorted by descending eigenvalue; equal values keep LAPACK order."""
    w, U = np.linalg.eigh(C)
    order = np.argsort(-w, kind="stable")
    return w[order], U[:, order]


def eigen_depth(C) -> np.ndarray:
    """Log-eigenvalues of an SPD matrix in descending order."""
    C = np.asarray(C, dtype=float)
    w = np.sort(np.linalg.eigvalsh(C))[::-1]
    if w[-1] <= 0:
        raise NotPositiveDefiniteError(f"smallest eigenvalue {w[-1]:.3e} is not positive; regularize first")
    return np.log(w)


@dataclass(frozen=True)
class DVCovDescriptor:
    """All within-voxel (overlapped grid) and between-voxel (adjacent pairs) matrices.

    ``within`` has shape ``(n_cells, 6, 6)`` in row-major cell order and
    ``between`` has shape ``(n_pairs, 6, 6)`` in lexicographic pair order.
    """

    within: np.ndarray
    between: np.ndarray
    within_empty: np.ndarray
    between_empty: np.ndarray
    pairs: tuple = ()

    def __post_init__(self):
        for name in ("within", "between"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).reshape(-1, 6, 6))
        object.__setattr__(self, "within_empty", np.asarray(self.within_empty, dtype=bool).reshape(-1))
        object.__setattr__(self, "between_empty", np.asarray(self.between_empty, dtype=bool).reshape(-1))
        if len(self.within_empty) != len(self.within) or len(self.between_empty) != len(self.between):
            raise LayoutMismatchError("empty flags do not match matrix counts")
        object.__setattr__(self, "pairs", tuple(tuple(int(i) for i in p) for p in self.pairs))

    @property
    def matrices(self) -> np.ndarray:
        return np.concatenate([self.within, self.between])

    @property
    def empty_flags(self) -> np.ndarray:
        return np.concatenate([self.within_empty, self.between_empty])

    @property
    def layout(self) -> tuple:
        return (len(self.within), len(self.between))

    def to_json(self) -> dict:
        return {
            "within": [M.reshape(-1).tolist() for M in self.within],
            "between": [M.reshape(-1).tolist() for M in self.between],
            "empty_flags": [bool(f) for f in self.empty_flags],
            "pairs": [list(p) for p in self.pairs],
        }

    @classmethod
    def from_json(cls, data: dict) -> "DVCovDescriptor":
        within = np.array(data["within"], dtype=float).reshape(-1, 6, 6)
        between = np.array(data["between"], dtype=float).reshape(-1, 6, 6)
        flags = np.array(data.get("empty_flags", [False] * (len(within) + len(between))), dtype=bool)
        if len(flags) != len(within) + len(between):
            raise LayoutMismatchError("empty_flags length does not match matrix count")
        return cls(within, between, flags[: len(within)], flags[len(within):], tuple(data.get("pairs", ())))


def extract_dvcov(
    cloud: PointCloud,
    joints: SkeletonJoints,
    rows: int = 6,
    cols: int = 2,
    eps_rel: float = DEFAULT_EPS_REL,
    segment: bool = True,
) -> DVCovDescriptor:
    """DVCov descriptor of a body cloud that already carries normals.

    Voxels with fewer than two points contribute ``regularize(0)`` and are
    flagged empty; a between-voxel pair is flagged if either voxel is.
    """
    if not cloud.has_normals:
        raise MissingNormalsError("DVCov extraction needs normals")
    body = segment_torso_head(cloud, joints) if segment else cloud
    F = body.features()

    zero = regularize(np.zeros((6, 6)), eps_rel)

    over = build_voxel_grid(body, rows, cols, overlapped=True)
    within, within_empty = [], []
    for idx in over.cells:
        if len(idx) < 2:
            within.append(zero)
            within_empty.append(True)
        else:
            within.append(regularize(within_voxel_covariance(F[idx]), eps_rel))
            within_empty.append(False)

    grid = build_voxel_grid(body, rows, cols, overlapped=False)
    pairs = adjacent_voxel_pairs(grid)
    between, between_empty = [], []
    for a, b in pairs:
        ia, ib = grid.cells[a], grid.cells[b]
        if len(ia) < 2 or len(ib) < 2:
            between.append(zero)
            between_empty.append(True)
        else:
            between.append(regularize(between_voxel_covariance(F[ia], F[ib]), eps_rel))
            between_empty.append(False)

    return DVCovDescriptor(
        np.array(within), np.array(between), np.array(within_empty), np.array(between_empty), tuple(pairs)
    )


def extract_ed(d: DVCovDescriptor) -> np.ndarray:
    """Concatenated Eigen-depth blocks: within cells first, then between pairs."""
    w = np.linalg.eigvalsh(d.matrices)[:, ::-1]
    if np.any(w[:, -1] <= 0):
        bad = int(np.argmax(w[:, -1] <= 0))
        raise NotPositiveDefiniteError(f"descriptor matrix {bad} is not positive definite")
    return np.log(w).reshape(-1)


def ed_to_json(x: np.ndarray) -> dict:
    return {"ed": [float(v) for v in x]}


def ed_from_json(data: dict) -> np.ndarray:
    return np.array(data["ed"], dtype=float)
