"""PCA/LDA subspace matching, the two fusion matchers, and CMC evaluation."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.linalg
from scipy.spatial.distance import cdist

from .covdesc import DVCovDescriptor
from .errors import DepthReidError, ProtocolWarning, ZeroVarianceError
from .spdmanifold import dvcov_distance_matrix

PCA_DIM = 100
LDA_RIDGE = 1e-6
SKELETON_DIM = 13


def _orient_columns(V: np.ndarray) -> np.ndarray:
    """Flip each column so its largest-magnitude entry is positive."""
    idx = np.argmax(np.abs(V), axis=0)
    signs = np.sign(V[idx, np.arange(V.shape[1])])
    signs[signs == 0] = 1.0
    return V * signs


def pca_fit(X, p_max: int = PCA_DIM):
    """Mean and top principal directions (columns, orthonormal) of ``X``."""
    X = np.asarray(X, dtype=float)
    if len(X) < 2:
        raise DepthReidError("PCA needs at least two samples")
    mean = X.mean(axis=0)
    Xc = X - mean
    _, s, Vt = np.linalg.svd(Xc, full_matrices=False)
    if s.size == 0 or s[0] == 0:
        raise ZeroVarianceError("all training samples are identical")
    tol = s[0] * max(X.shape) * np.finfo(float).eps
    rank = int(np.sum(s > tol))
    p = min(p_max, rank)
    return mean, _orient_columns(Vt[:p].T)


def class_scatter(X, labels):
    """Within-class and between-class scatter matrices."""
    X = np.asarray(X, dtype=float)
    labels = np.asarray(labels)
    mu = X.mean(axis=0)
    d = X.shape[1]
    Sw = np.zeros((d, d))
    Sb = np.zeros((d, d))
    for c in _unique_in_order(labels):
        Xc = X[labels == c]
        mc = Xc.mean(axis=0)
        D = Xc - mc
        Sw += D.T @ D
        Sb += len(Xc) * np.outer(mc - mu, mc - mu)
    return Sw, Sb


def lda_fit(X, labels) -> np.ndarray:
    """Top ``c - 1`` discriminant directions of ``S_b w = lambda (S_w + delta I) w``."""
    X = np.asarray(X, dtype=float)
    labels = np.asarray(labels)
    classes = _unique_in_order(labels)
    if len(classes) < 2:
        raise DepthReidError("LDA needs at least two classes")
    singles = [c for c in classes if np.sum(labels == c) < 2]
    if singles:
        warnings.warn(
            f"{len(singles)} class(es) have one sample and add nothing to the within-class scatter",
            ProtocolWarning,
            stacklevel=2,
        )
    p = X.shape[1]
    Sw, Sb = class_scatter(X, labels)
    ref = np.trace(Sw) if np.trace(Sw) > 0 else np.trace(Sb)
    if ref <= 0:
        raise ZeroVarianceError("training data has no variance")
    delta = LDA_RIDGE * ref / p
    w, V = scipy.linalg.eigh(Sb, Sw + delta * np.eye(p))
    k = min(len(classes) - 1, p)
    return _orient_columns(V[:, ::-1][:, :k])


@dataclass
class SubspaceModel:
    mean: np.ndarray
    pca_basis: np.ndarray
    lda_basis: np.ndarray

    @property
    def projection(self) -> np.ndarray:
        return self.pca_basis @ self.lda_basis

    @property
    def dim(self) -> int:
        return self.lda_basis.shape[1]

    def transform(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return (X - self.mean) @ self.projection


def fit_subspace(X, labels, p_max: int = PCA_DIM) -> SubspaceModel:
    mean, P = pca_fit(X, p_max)
    Z = (np.asarray(X, dtype=float) - mean) @ P
    return SubspaceModel(mean, P, lda_fit(Z, labels))


def fuse_ed_skl(ed, skl) -> np.ndarray:
    return np.concatenate([np.asarray(ed, dtype=float).reshape(-1), np.asarray(skl, dtype=float).reshape(-1)])


def split_fused(x, n_within: int = 33, n_between: int = 26):
    """Inverse of :func:`fuse_ed_skl`: ``(within ED, between ED, skeleton)``."""
    x = np.asarray(x, dtype=float)
    a, b = 6 * n_within, 6 * (n_within + n_between)
    if len(x) != b + SKELETON_DIM:
        raise DepthReidError(f"fused vector has length {len(x)}, expected {b + SKELETON_DIM}")
    return x[:a], x[a:b], x[b:]


def match_ed_skl(train_X, train_labels, gallery_X, probe_X, p_max: int = PCA_DIM) -> np.ndarray:
    """Fit PCA+LDA on training vectors; Euclidean distances (probe x gallery)."""
    model = fit_subspace(train_X, train_labels, p_max)
    return cdist(model.transform(probe_X), model.transform(gallery_X))


def match_dvcov_skl(
    gallery_desc: Sequence[DVCovDescriptor],
    gallery_skl,
    probe_desc: Sequence[DVCovDescriptor],
    probe_skl,
    mean_normalize: bool = False,
) -> np.ndarray:
    """``d_DVCov + d_SKL`` for every (probe, gallery) pair; no training."""
    d_cov = dvcov_distance_matrix(list(probe_desc), list(gallery_desc))
    d_skl = cdist(np.atleast_2d(probe_skl), np.atleast_2d(gallery_skl))
    if mean_normalize:
        return _mean_normalized(d_cov) + _mean_normalized(d_skl)
    return d_cov + d_skl


def _mean_normalized(D: np.ndarray) -> np.ndarray:
    m = D.mean()
    return D / m if m > 0 else D


def _unique_in_order(labels) -> list:
    seen = {}
    for lab in np.asarray(labels).tolist():
        seen.setdefault(lab, None)
    return list(seen)


def cmc_evaluate(dist, gallery_labels, probe_labels, K: Optional[int] = None) -> np.ndarray:
    """Cumulative match characteristic over gallery classes.

    A class's distance to a probe is its minimum over that class's gallery
    entries. Classes with equal distance are ranked by first appearance in
    the gallery. Probes whose identity is not in the gallery count as misses.
    """
    dist = np.asarray(dist, dtype=float)
    gallery_labels = np.asarray(gallery_labels).tolist()
    probe_labels = np.asarray(probe_labels).tolist()
    if dist.shape != (len(probe_labels), len(gallery_labels)):
        raise DepthReidError(f"distance matrix {dist.shape} does not match labels")
    classes = _unique_in_order(gallery_labels)
    C = len(classes)
    K = C if K is None else int(K)
    col_class = np.array([classes.index(g) for g in gallery_labels])
    class_dist = np.full((len(probe_labels), C), np.inf)
    for c in range(C):
        class_dist[:, c] = dist[:, col_class == c].min(axis=1)

    hits = np.zeros(max(K, C) + 1)
    missing = 0
    for i, lab in enumerate(probe_labels):
        if lab not in classes:
            missing += 1
            continue
        order = np.argsort(class_dist[i], kind="stable")
        rank = int(np.flatnonzero(order == classes.index(lab))[0])
        hits[rank] += 1
    if missing:
        warnings.warn(f"{missing} probe(s) have no gallery entry and count as misses", ProtocolWarning, stacklevel=2)
    n = max(len(probe_labels), 1)
    return np.cumsum(hits)[:K] / n


# ---------------------------------------------------------------------------
# evaluation protocol


@dataclass
class Frame:
    """One observation of a person with whatever features were extracted."""

    person: str
    group: str
    index: int
    ed: Optional[np.ndarray] = None
    skl: Optional[np.ndarray] = None
    dvcov: Optional[DVCovDescriptor] = None

    def fused(self) -> np.ndarray:
        return fuse_ed_skl(self.ed, self.skl)


def _stack(frames, attr):
    if attr == "fused":
        return np.stack([f.fused() for f in frames])
    return np.stack([getattr(f, attr) for f in frames])


def _labels(frames):
    return [f.person for f in frames]


def matcher_ed(train, gallery, probe):
    return match_ed_skl(_stack(train, "ed"), _labels(train), _stack(gallery, "ed"), _stack(probe, "ed"))


def matcher_ed_skl(train, gallery, probe):
    return match_ed_skl(_stack(train, "fused"), _labels(train), _stack(gallery, "fused"), _stack(probe, "fused"))


def matcher_skl(train, gallery, probe):
    return cdist(_stack(probe, "skl"), _stack(gallery, "skl"))


def matcher_dvcov(train, gallery, probe):
    return dvcov_distance_matrix([f.dvcov for f in probe], [f.dvcov for f in gallery])


def matcher_dvcov_skl(train, gallery, probe, mean_normalize=False):
    return match_dvcov_skl(
        [f.dvcov for f in gallery], _stack(gallery, "skl"), [f.dvcov for f in probe], _stack(probe, "skl"),
        mean_normalize=mean_normalize,
    )


MATCHERS = {
    "ed": matcher_ed,
    "ed+skl": matcher_ed_skl,
    "skl": matcher_skl,
    "dvcov": matcher_dvcov,
    "dvcov+skl": matcher_dvcov_skl,
}

GALLERY_SIZE = {"single_shot": 1, "multi_shot": 5}


@dataclass
class ProtocolResult:
    curves: list
    seed: int
    protocol: str
    splits: list = field(default_factory=list)

    @property
    def mean(self) -> np.ndarray:
        return np.mean(np.stack(self.curves), axis=0)

    def rank(self, k: int) -> float:
        return float(self.mean[k - 1])


def _pad(curves):
    n = max(len(c) for c in curves)
    return [np.concatenate([c, np.full(n - len(c), c[-1] if len(c) else 0.0)]) for c in curves]


def run_protocol(
    frames: Sequence[Frame],
    protocol: str = "single_shot",
    matcher="ed+skl",
    trials: int = 10,
    seed: int = 0,
    gallery_group: Optional[str] = None,
    probe_group: Optional[str] = None,
) -> ProtocolResult:
    """Repeated random-split re-identification evaluation.

    Each trial sends a random half of the identities (rounded up) to training
    and the rest to testing. Identities never seen in the probe group always
    train. Test identities contribute ``1`` (single-shot) or ``5``
    (multi-shot) random gallery frames from the gallery group; all of their
    probe-group frames not used as gallery become probes. Trial ``t`` draws
    from child stream ``t`` of ``SeedSequence(seed)``.
    """
    if protocol not in GALLERY_SIZE:
        raise DepthReidError(f"unknown protocol {protocol!r}")
    match: Callable = MATCHERS[matcher] if isinstance(matcher, str) else matcher
    n_gallery = GALLERY_SIZE[protocol]
    frames = list(frames)
    groups = _unique_in_order([f.group for f in frames])
    gallery_group = gallery_group or groups[0]
    probe_group = probe_group or (groups[1] if len(groups) > 1 else groups[0])

    persons = _unique_in_order([f.person for f in frames])
    by_person = {p: [f for f in frames if f.person == p] for p in persons}
    in_probe = [p for p in persons if any(f.group == probe_group for f in by_person[p])]
    forced_train = [p for p in persons if p not in in_probe]

    curves, splits = [], []
    for child in np.random.SeedSequence(seed).spawn(trials):
        rng = np.random.default_rng(child)
        if forced_train:
            train_ids, test_ids = list(forced_train), list(in_probe)
        else:
            perm = rng.permutation(len(persons))
            n_train = math.ceil(len(persons) / 2)
            train_ids = [persons[i] for i in sorted(perm[:n_train])]
            test_ids = [persons[i] for i in sorted(perm[n_train:])]

        train = [f for p in train_ids for f in by_person[p] if f.group == gallery_group]
        gallery, probe = [], []
        for p in test_ids:
            pool = [f for f in by_person[p] if f.group == gallery_group]
            if not pool:
                warnings.warn(f"person {p} has no gallery-group frames", ProtocolWarning, stacklevel=2)
                chosen = []
            elif len(pool) < n_gallery:
                warnings.warn(
                    f"person {p} has {len(pool)} gallery frames, sampling {n_gallery} with replacement",
                    ProtocolWarning,
                    stacklevel=2,
                )
                chosen = [pool[i] for i in rng.choice(len(pool), n_gallery, replace=True)]
            else:
                chosen = [pool[i] for i in rng.choice(len(pool), n_gallery, replace=False)]
            gallery.extend(chosen)
            used = {id(f) for f in chosen}
            probe.extend(f for f in by_person[p] if f.group == probe_group and id(f) not in used)

        if not gallery or not probe or not train:
            raise DepthReidError(
                f"trial split has {len(train)} training, {len(gallery)} gallery and {len(probe)} probe frames; "
                f"the {protocol} protocol needs frames in all three"
            )
        dist = match(train, gallery, probe)
        curves.append(cmc_evaluate(dist, _labels(gallery), _labels(probe)))
        splits.append({"train": train_ids, "test": test_ids})
    return ProtocolResult(_pad(curves), seed, protocol, splits)
