"""Kernelized implicit transfer of depth features to RGB-only data.

An auxiliary set of paired visual/depth features is used to learn kernel
coefficient matrices ``A = [A_v; A_d]`` that map both modalities into a shared
discriminative subspace. Only the visual half is kept: for a new RGB sample
the estimated depth feature is ``A_v'^T k_v(f)``, where ``k_v`` is the vector
of Gaussian kernel values against the auxiliary visual features.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg
from scipy.spatial.distance import cdist, pdist

from .errors import ConditioningError, DepthReidError, DimensionMismatchError
from .recognition import _orient_columns, _unique_in_order

B2_RIDGE = 1e-8
NULL_TOL = 1e-10


@dataclass
class AuxiliaryDataset:
    visual: np.ndarray
    depth: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.visual = np.atleast_2d(np.asarray(self.visual, dtype=float))
        self.depth = np.atleast_2d(np.asarray(self.depth, dtype=float))
        self.labels = np.asarray(self.labels)
        if not (len(self.visual) == len(self.depth) == len(self.labels)):
            raise DimensionMismatchError("visual, depth and labels must have the same number of rows")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_classes(self) -> int:
        return len(_unique_in_order(self.labels))


@dataclass(frozen=True)
class KernelConfig:
    gamma_v: float
    gamma_d: float

    def __post_init__(self):
        if not (self.gamma_v > 0 and self.gamma_d > 0):
            raise DepthReidError("kernel bandwidths must be positive")

    @classmethod
    def from_data(cls, aux: AuxiliaryDataset) -> "KernelConfig":
        """Bandwidths ``1 / mean_pairwise_distance**2`` for each modality."""
        dv = pdist(aux.visual).mean()
        dd = pdist(aux.depth).mean()
        if dv <= 0 or dd <= 0:
            raise DepthReidError("auxiliary features have zero spread")
        return cls(1.0 / dv**2, 1.0 / dd**2)


@dataclass(frozen=True)
class TransferHyperParams:
    beta: float = 10.0
    gamma1: float = 10.0
    gamma1p: float = 10.0
    gamma0: float = 1.0
    gamma0p: float = 1.0
    m: int = 700

    def __post_init__(self):
        if min(self.beta, self.gamma1, self.gamma1p, self.gamma0, self.gamma0p) < 0:
            raise DepthReidError("trade-off weights must be non-negative")
        if self.m < 1:
            raise DepthReidError("latent dimension m must be at least 1")


@dataclass
class TransferModel:
    anchors: np.ndarray
    projection: np.ndarray
    kernel: KernelConfig
    hyper: TransferHyperParams = field(default_factory=TransferHyperParams)
    diagnostics: dict = field(default_factory=dict)

    @property
    def m(self) -> int:
        return self.projection.shape[1]

    def to_json(self) -> dict:
        return {
            "anchors": self.anchors.tolist(),
            "projection": self.projection.tolist(),
            "kernel": asdict(self.kernel),
            "hyperparameters": asdict(self.hyper),
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_json(cls, data: dict) -> "TransferModel":
        return cls(
            np.array(data["anchors"], dtype=float),
            np.array(data["projection"], dtype=float),
            KernelConfig(**data["kernel"]),
            TransferHyperParams(**data.get("hyperparameters", {})),
            data.get("diagnostics", {}),
        )


def kernel_vector(anchors, f, gamma: float) -> np.ndarray:
    """Gaussian kernel values ``exp(-gamma ||a_i - f||^2)`` against every anchor.

    ``f`` may be a single vector (returns shape ``(N,)``) or a batch of rows
    (returns ``(n, N)``).
    """
    if gamma <= 0:
        raise DepthReidError("gamma must be positive")
    anchors = np.atleast_2d(np.asarray(anchors, dtype=float))
    f = np.asarray(f, dtype=float)
    single = f.ndim == 1
    F = np.atleast_2d(f)
    if F.shape[1] != anchors.shape[1]:
        raise DimensionMismatchError(f"feature has dimension {F.shape[1]}, anchors have {anchors.shape[1]}")
    K = np.exp(-gamma * cdist(F, anchors, "sqeuclidean"))
    return K[0] if single else K


def scatter_weights(labels):
    """Pairwise between-class and within-class weight matrices ``(A_b, A_w)``."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise DepthReidError("labels are empty")
    n = len(labels)
    same = labels[:, None] == labels[None, :]
    counts = same.sum(axis=1).astype(float)  # N_c of each row's class
    A_w = np.where(same, 1.0 / counts[:, None], 0.0)
    A_b = np.where(same, 1.0 / n - 1.0 / counts[:, None], 1.0 / n)
    return A_b, A_w


def kernel_scatter(K: np.ndarray, A: np.ndarray) -> np.ndarray:
    """``sum_ij A_ij (k_i - k_j)(k_i - k_j)^T`` for symmetric ``A`` and kernel rows ``k_i``.

    Uses the Laplacian identity ``2 K^T (D - A) K`` with ``D = diag(A 1)``.
    """
    L = np.diag(A.sum(axis=1)) - A
    S = 2.0 * K.T @ L @ K
    return 0.5 * (S + S.T)


def transfer_matrices(aux: AuxiliaryDataset, kc: KernelConfig) -> dict:
    """Zero-padded ``2N x 2N`` scatter matrices and the modality-gap matrix ``B_vd``."""
    N = len(aux)
    Kv = kernel_vector(aux.visual, aux.visual, kc.gamma_v)
    Kd = kernel_vector(aux.depth, aux.depth, kc.gamma_d)
    A_b, A_w = scatter_weights(aux.labels)

    def pad(S, block):
        B = np.zeros((2 * N, 2 * N))
        sl = slice(0, N) if block == "v" else slice(N, 2 * N)
        B[sl, sl] = S
        return B

    out = {
        "B_bv": pad(kernel_scatter(Kv, A_b), "v"),
        "B_wv": pad(kernel_scatter(Kv, A_w), "v"),
        "B_bd": pad(kernel_scatter(Kd, A_b), "d"),
        "B_wd": pad(kernel_scatter(Kd, A_w), "d"),
    }
    classes = _unique_in_order(aux.labels)
    B_vd = np.zeros((2 * N, 2 * N))
    for c in classes:
        idx = aux.labels == c
        U = np.concatenate([Kv[idx].mean(axis=0), -Kd[idx].mean(axis=0)])
        B_vd += np.outer(U, U)
    out["B_vd"] = B_vd / len(classes)
    return out


def _weighted(term: np.ndarray, weight: float) -> np.ndarray:
    tr = np.trace(term)
    return term * (weight / tr) if tr > 0 and weight > 0 else np.zeros_like(term)


def assemble_pencil(mats: dict, hp: TransferHyperParams):
    """``(B1, B2)`` with every weight divided by the trace of its matrix."""
    B1 = _weighted(mats["B_bv"], hp.gamma0) + _weighted(mats["B_bd"], hp.gamma1)
    B2 = (
        _weighted(mats["B_vd"], hp.beta)
        + _weighted(mats["B_wv"], hp.gamma0p)
        + _weighted(mats["B_wd"], hp.gamma1p)
    )
    return B1, B2


def modality_gap(A: np.ndarray, B_vd: np.ndarray) -> float:
    """Mean squared distance between per-class visual and depth means, ``tr(A^T B_vd A)``."""
    return float(np.trace(A.T @ B_vd @ A))


def _refine_pencil_basis(B2: np.ndarray, A: np.ndarray) -> np.ndarray:
    """Re-orthonormalise the columns of ``A`` (descending eigenvalue order) against ``B2``.

    A plain float64 ``eigh`` leaves ``A^T B2 A - I`` at roughly
    ``eps * cond(B2)``. The Gram matrix is accumulated in extended precision
    and Gram-Schmidt runs from the last (smallest) column upwards, so each
    vector only absorbs components of vectors with smaller eigenvalues, which
    keeps the growth of its relative residual small.
    """
    ld = np.longdouble
    Al = A.astype(ld)
    G = np.asarray(Al.T @ (B2.astype(ld) @ Al), dtype=float)[::-1, ::-1]
    R = np.linalg.cholesky(0.5 * (G + G.T)).T  # G = R^T R, rows in reversed order
    return scipy.linalg.solve_triangular(R, A[:, ::-1].T, trans="T", lower=False).T[:, ::-1]


def solve_pencil(B1: np.ndarray, B2: np.ndarray, m: int, null_tol: float = NULL_TOL):
    """Top-``m`` eigenpairs of ``B1 a = lambda B2 a`` normalised to ``A^T B2 A = I``.

    ``B2`` receives the ridge ``1e-8 * tr(B2) / n`` first. Eigenpairs with
    ``lambda <= null_tol * lambda_max`` lie in the null space of ``B1``, where
    the eigenvectors are arbitrary; they are dropped unless ``null_tol`` is 0.
    Returns ``(eigenvalues, A, B2_ridged)``.
    """
    n = B2.shape[0]
    tr = np.trace(B2)
    if not np.isfinite(tr) or tr <= 0:
        raise ConditioningError(f"B2 ({n}x{n}) has non-positive trace {tr:.3e}")
    B2r = B2 + (B2_RIDGE * tr / n) * np.eye(n)
    try:
        lam, V = scipy.linalg.eigh(B1, B2r)
    except np.linalg.LinAlgError as exc:
        raise ConditioningError(f"B2 ({n}x{n}) is numerically indefinite after ridge: {exc}") from None
    lam, V = lam[::-1][:m], V[:, ::-1][:, :m]
    if null_tol > 0 and lam[0] > 0:
        k = max(int(np.sum(lam > null_tol * lam[0])), 1)
        lam, V = lam[:k], V[:, :k]
    V = _refine_pencil_basis(B2r, V)
    return lam, _orient_columns(V), B2r


def pencil_errors(B1, B2, A, lam):
    """Residual norms, relative residuals and ``max|A^T B2 A - I|`` in extended precision."""
    ld = np.longdouble
    Al = np.asarray(A).astype(ld)
    B1A = np.asarray(B1).astype(ld) @ Al
    B2A = np.asarray(B2).astype(ld) @ Al
    resid = np.sqrt(((B1A - B2A * np.asarray(lam).astype(ld)) ** 2).sum(axis=0))
    scale = np.sqrt((B1A**2).sum(axis=0))
    rel = resid / np.maximum(scale, np.finfo(float).tiny)
    orth = np.abs(Al.T @ B2A - np.eye(Al.shape[1], dtype=ld)).max()
    return np.asarray(resid, dtype=float), np.asarray(rel, dtype=float), float(orth)


def fit_transfer(
    aux: AuxiliaryDataset,
    hp: TransferHyperParams = TransferHyperParams(),
    kc: Optional[KernelConfig] = None,
    return_full: bool = False,
    null_tol: float = NULL_TOL,
):
    """Learn the visual-side coefficient matrix ``A_v'`` (``N x m``).

    ``m`` is clamped to ``2N`` and further to the numerical rank of the
    between-class pencil (see :func:`solve_pencil`). With ``return_full`` the full coefficient
    matrix, eigenvalues and the assembled pencil are returned as well.
    """
    N = len(aux)
    C = aux.n_classes
    if C < 2 or N < C:
        raise DepthReidError(f"need at least two classes and one sample per class (N={N}, C={C})")
    kc = kc or KernelConfig.from_data(aux)
    m = min(hp.m, 2 * N)

    mats = transfer_matrices(aux, kc)
    B1, B2 = assemble_pencil(mats, hp)
    lam, A, B2r = solve_pencil(B1, B2, m, null_tol)
    m = A.shape[1]

    resid, rel, orth = pencil_errors(B1, B2r, A, lam)
    diagnostics = {
        "n_samples": N,
        "n_classes": C,
        "m_requested": int(hp.m),
        "m": int(m),
        "null_tol": float(null_tol),
        "eigenvalues": [float(v) for v in lam],
        "residual_norms": [float(v) for v in resid],
        "relative_residuals": [float(v) for v in rel],
        "max_relative_residual": float(rel.max()),
        "max_orthonormality_error": orth,
        "objective": float(np.trace(A.T @ B1 @ A)),
        "modality_gap": modality_gap(A, mats["B_vd"]),
    }
    model = TransferModel(aux.visual.copy(), A[:N].copy(), kc, hp, diagnostics)
    model.diagnostics["depth_norm_mean"] = float(pdist(estimate_depth_features(model, aux.visual)).mean())
    if return_full:
        return model, {"A": A, "eigenvalues": lam, "B1": B1, "B2": B2r, **mats}
    return model


def estimate_depth_feature(model: TransferModel, f_v) -> np.ndarray:
    return model.projection.T @ kernel_vector(model.anchors, np.asarray(f_v, dtype=float).reshape(-1), model.kernel.gamma_v)


def estimate_depth_features(model: TransferModel, F_v) -> np.ndarray:
    """Row-wise :func:`estimate_depth_feature`."""
    return kernel_vector(model.anchors, np.atleast_2d(F_v), model.kernel.gamma_v) @ model.projection


def transfer_distance(model: TransferModel, f_v1, f_v2) -> float:
    return float(np.linalg.norm(estimate_depth_feature(model, f_v1) - estimate_depth_feature(model, f_v2)))


def transfer_distance_matrix(model: TransferModel, probe_v, gallery_v) -> np.ndarray:
    return cdist(estimate_depth_features(model, probe_v), estimate_depth_features(model, gallery_v))


def fuse_scores(dist_rgb, dist_d, eta: float, norm_rgb_mean: float, norm_d_mean: float):
    """``(1 - eta) dist_rgb / norm_rgb_mean + eta dist_d / norm_d_mean``; works on arrays."""
    if not 0.0 <= eta <= 1.0:
        raise DepthReidError(f"eta must lie in [0, 1], got {eta}")
    if norm_rgb_mean <= 0 or norm_d_mean <= 0:
        raise DepthReidError("normalising means must be positive")
    return (1.0 - eta) * (np.asarray(dist_rgb) / norm_rgb_mean) + eta * (np.asarray(dist_d) / norm_d_mean)
