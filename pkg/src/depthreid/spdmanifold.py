"""Affine-invariant geometry on SPD matrices.

The geodesic distance between ``C1`` and ``C2`` is
``sqrt(sum_k ln^2 lambda_k)`` over the generalized eigenvalues of the pencil
``(C2, C1)``, i.e. the eigenvalues of ``C1^{-1} C2``. They are obtained from
the symmetric matrix ``L^{-1} C2 L^{-T}`` with ``C1 = L L^T``.
"""

from __future__ import annotations

import warnings

import numpy as np

from .covdesc import DVCovDescriptor, descending_eigh, eigen_depth
from .errors import EmptyComparisonWarning, LayoutMismatchError, NotPositiveDefiniteError


def _cholesky(C: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(C)
    except np.linalg.LinAlgError:
        raise NotPositiveDefiniteError("matrix is not symmetric positive definite") from None


def generalized_spectrum(C1, C2) -> np.ndarray:
    """Eigenvalues of ``C1^{-1} C2`` in descending order.

    Works on stacks: ``C1`` and ``C2`` broadcast over leading axes.
    """
    C1 = np.asarray(C1, dtype=float)
    C2 = np.asarray(C2, dtype=float)
    Linv = np.linalg.inv(_cholesky(C1))
    M = Linv @ C2 @ np.swapaxes(Linv, -1, -2)
    M = 0.5 * (M + np.swapaxes(M, -1, -2))
    lam = np.linalg.eigvalsh(M)[..., ::-1]
    if np.any(lam <= 0):
        raise NotPositiveDefiniteError("second matrix is not positive definite")
    return lam


def geodesic_distance(C1, C2) -> float:
    lam = generalized_spectrum(C1, C2)
    return float(np.sqrt(np.sum(np.log(lam) ** 2)))


def geodesic_distance_batch(C1, C2) -> np.ndarray:
    """Elementwise geodesic distances over broadcast stacks of SPD matrices."""
    lam = generalized_spectrum(C1, C2)
    return np.sqrt(np.sum(np.log(lam) ** 2, axis=-1))


def rotation_normalize(C1, C2) -> np.ndarray:
    """``C2``'s spectrum placed in ``C1``'s eigenbasis (both sorted descending)."""
    C1 = np.asarray(C1, dtype=float)
    C2 = np.asarray(C2, dtype=float)
    _cholesky(C1)
    _cholesky(C2)
    _, U1 = descending_eigh(C1)
    lam2 = np.sort(np.linalg.eigvalsh(C2))[::-1]
    CN = (U1 * lam2) @ U1.T
    return 0.5 * (CN + CN.T)


def eigen_geodesic_pair(C1, C2) -> tuple:
    """Return ``(||ed(C2) - ed(C1)||, dist(C1, rotation_normalize(C1, C2)))``.

    The two agree to rounding for any SPD pair.
    """
    lhs = float(np.linalg.norm(eigen_depth(C2) - eigen_depth(C1)))
    rhs = geodesic_distance(C1, rotation_normalize(C1, C2))
    return lhs, rhs


def _check_layout(d1: DVCovDescriptor, d2: DVCovDescriptor) -> None:
    if d1.layout != d2.layout or (d1.pairs and d2.pairs and d1.pairs != d2.pairs):
        raise LayoutMismatchError(f"descriptor layouts differ: {d1.layout} vs {d2.layout}")


def dvcov_distance(d1: DVCovDescriptor, d2: DVCovDescriptor) -> float:
    """Sum of geodesic distances over corresponding matrices.

    Pairs where either descriptor flags the voxel empty are skipped. When
    nothing is left to compare the distance is 0 and an
    :class:`EmptyComparisonWarning` is issued.
    """
    _check_layout(d1, d2)
    keep = ~(d1.empty_flags | d2.empty_flags)
    if not np.any(keep):
        warnings.warn("no voxel pair was comparable; distance is vacuous", EmptyComparisonWarning, stacklevel=2)
        return 0.0
    return float(np.sum(geodesic_distance_batch(d1.matrices[keep], d2.matrices[keep])))


def dvcov_distance_matrix(probe: list, gallery: list) -> np.ndarray:
    """Pairwise :func:`dvcov_distance` (probe rows, gallery columns)."""
    if not probe or not gallery:
        return np.zeros((len(probe), len(gallery)))
    for d in list(probe) + list(gallery):
        _check_layout(probe[0], d)
    G = np.stack([g.matrices for g in gallery])  # (g, v, 6, 6)
    G_empty = np.stack([g.empty_flags for g in gallery])
    Linv = np.linalg.inv(_cholesky(G))
    Linv_T = np.swapaxes(Linv, -1, -2)
    out = np.zeros((len(probe), len(gallery)))
    for i, p in enumerate(probe):
        M = Linv @ p.matrices[None] @ Linv_T
        M = 0.5 * (M + np.swapaxes(M, -1, -2))
        lam = np.linalg.eigvalsh(M)
        if np.any(lam <= 0):
            raise NotPositiveDefiniteError(f"probe descriptor {i} has a non-SPD matrix")
        per_pair = np.sqrt(np.sum(np.log(lam) ** 2, axis=-1))  # (g, v)
        keep = ~(G_empty | p.empty_flags[None])
        out[i] = np.sum(np.where(keep, per_pair, 0.0), axis=1)
    return out


def random_spd(rng: np.random.Generator, n: int = 6, log_range=(-2.0, 2.0)) -> np.ndarray:
    """``Q^T D Q`` with Haar-ish ``Q`` and eigenvalues log-uniform in ``10**log_range``."""
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    q = q * np.sign(np.diag(r))
    d = 10.0 ** rng.uniform(log_range[0], log_range[1], size=n)
    A = q.T @ np.diag(d) @ q
    return 0.5 * (A + A.T)
