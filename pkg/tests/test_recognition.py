import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from depthreid.covdesc import DVCovDescriptor
from depthreid.errors import DepthReidError, ProtocolWarning, ZeroVarianceError
from depthreid.recognition import (
    Frame,
    cmc_evaluate,
    fit_subspace,
    fuse_ed_skl,
    lda_fit,
    match_dvcov_skl,
    match_ed_skl,
    pca_fit,
    run_protocol,
    split_fused,
)
from depthreid.spdmanifold import dvcov_distance_matrix, random_spd

from oracles import cmc_by_ranking


def _blobs(rng, classes, per_class, dim, sep=10.0, scale=1.0):
    centres = rng.normal(scale=sep, size=(classes, dim))
    X = np.concatenate([c + rng.normal(scale=scale, size=(per_class, dim)) for c in centres])
    y = np.repeat(np.arange(classes), per_class)
    return X, y, centres


# --- PCA ------------------------------------------------------------------------------

def test_pca_on_a_line(rng):
    direction = np.array([3.0, 4.0]) / 5.0
    X = rng.normal(size=(50, 1)) * direction + [1.0, -2.0]
    _, P = pca_fit(X)
    assert P.shape == (2, 1)
    assert abs(abs(P[:, 0] @ direction) - 1.0) <= 1e-9


def test_pca_full_rank_is_lossless(rng):
    X = rng.normal(size=(200, 3))
    mean, P = pca_fit(X, p_max=3)
    lifted = (X - mean) @ P @ P.T + mean
    assert np.max(np.abs(lifted - X)) <= 1e-9
    np.testing.assert_allclose(P.T @ P, np.eye(3), atol=1e-8)


def test_pca_projection_diagonalises_covariance(rng):
    X = rng.normal(size=(150, 20)) @ rng.normal(size=(20, 20))
    mean, P = pca_fit(X, p_max=10)
    C = np.cov(((X - mean) @ P).T)
    off = C - np.diag(np.diag(C))
    assert np.max(np.abs(off)) <= 1e-8 * C[0, 0]
    assert np.all(np.diff(np.diag(C)) <= 0)


def test_pca_identical_samples():
    with pytest.raises(ZeroVarianceError):
        pca_fit(np.ones((5, 4)))


# --- LDA ------------------------------------------------------------------------------

def test_lda_two_classes_matches_fisher_direction(rng):
    A = rng.multivariate_normal([0, 0], [[2.0, 0.6], [0.6, 0.5]], size=300)
    B = rng.multivariate_normal([4, 1], [[2.0, 0.6], [0.6, 0.5]], size=300)
    X = np.vstack([A, B])
    y = np.repeat([0, 1], 300)
    W = lda_fit(X, y)
    assert W.shape == (2, 1)
    Sw = np.cov(A.T, bias=True) * 300 + np.cov(B.T, bias=True) * 300
    fisher = np.linalg.solve(Sw, B.mean(0) - A.mean(0))
    cosang = abs(W[:, 0] @ fisher) / (np.linalg.norm(W[:, 0]) * np.linalg.norm(fisher))
    assert np.degrees(np.arccos(min(cosang, 1.0))) <= 2.0


def test_lda_needs_two_classes(rng):
    with pytest.raises(DepthReidError):
        lda_fit(rng.normal(size=(10, 3)), np.zeros(10))


def test_lda_three_classes_two_columns(rng):
    X, y, _ = _blobs(rng, 3, 10, 5)
    assert lda_fit(X, y).shape == (5, 2)


def test_lda_singleton_class_warns(rng):
    X, y, _ = _blobs(rng, 3, 5, 4)
    y = y.copy()
    y[0] = 99
    with pytest.warns(ProtocolWarning):
        lda_fit(X, y)


def test_pipeline_dimension(rng):
    X, y, _ = _blobs(rng, 6, 8, 30)
    assert fit_subspace(X, y).dim == 5
    assert fit_subspace(X, y, p_max=3).dim == 3


# --- fusion ------------------------------------------------------------------------------

def test_fuse_layout_and_split(rng):
    assert np.array_equal(fuse_ed_skl(np.zeros(354), np.zeros(13)), np.zeros(367))
    ed, skl = rng.normal(size=354), rng.normal(size=13)
    x = fuse_ed_skl(ed, skl)
    w, b, s = split_fused(x)
    assert np.array_equal(w, ed[:198]) and np.array_equal(b, ed[198:]) and np.array_equal(s, skl)
    assert np.array_equal(x[198:354], ed[198:])


def test_match_ed_skl_separable(rng):
    X, y, centres = _blobs(rng, 5, 20, 40)
    gallery = centres + rng.normal(scale=1.0, size=centres.shape)
    probe_y = np.repeat(np.arange(5), 10)
    probe = centres[probe_y] + rng.normal(scale=1.0, size=(50, 40))
    # the same identities appear in training here; only the geometry is under test
    D = match_ed_skl(X, y, gallery, probe)
    assert D.shape == (50, 5)
    assert np.mean(np.argmin(D, axis=1) == probe_y) >= 0.95
    D0 = match_ed_skl(X, y, gallery, gallery[:2])
    assert np.allclose(np.diag(D0[:, :2]), 0.0, atol=1e-9)


def test_match_ed_skl_invariant_to_linear_maps(rng):
    X, y, centres = _blobs(rng, 4, 15, 6)
    G = centres + rng.normal(scale=1.0, size=centres.shape)
    P = centres[np.repeat(np.arange(4), 3)] + rng.normal(scale=2.0, size=(12, 6))
    M = rng.normal(size=(6, 6)) + 4 * np.eye(6)
    D1 = match_ed_skl(X, y, G, P)
    D2 = match_ed_skl(X @ M.T, y, G @ M.T, P @ M.T)
    for a, b in zip(D1, D2):
        order1, order2 = np.argsort(a), np.argsort(b)
        gaps = np.diff(np.sort(a))
        if np.all(gaps > 1e-9 * a.max()):
            assert np.array_equal(order1, order2)


def _desc(rng):
    return DVCovDescriptor(np.stack([random_spd(rng) for _ in range(3)]), np.stack([random_spd(rng)]), [False] * 3, [False])


def test_match_dvcov_skl_decomposes(rng):
    g = [_desc(rng) for _ in range(3)]
    p = [_desc(rng) for _ in range(2)]
    gs, ps = rng.normal(size=(3, 13)), rng.normal(size=(2, 13))
    D = match_dvcov_skl(g, gs, p, ps)
    cov = dvcov_distance_matrix(p, g)
    skl = np.linalg.norm(ps[:, None] - gs[None], axis=-1)
    np.testing.assert_allclose(D, cov + skl, rtol=1e-9)
    np.testing.assert_allclose(match_dvcov_skl(g, np.zeros((3, 13)), p, np.zeros((2, 13))), cov, rtol=1e-12)
    np.testing.assert_allclose(match_dvcov_skl(p, ps, g, gs), D.T, rtol=1e-9)
    assert match_dvcov_skl(g[:1], gs[:1], g[:1], gs[:1])[0, 0] == pytest.approx(0.0, abs=1e-9)


# --- CMC ------------------------------------------------------------------------------------

def test_cmc_perfect():
    D = np.array([[0.1, 1.0, 2.0], [1.0, 0.2, 3.0]])
    np.testing.assert_array_equal(cmc_evaluate(D, ["a", "b", "c"], ["a", "b"]), [1.0, 1.0, 1.0])


def test_cmc_hand_enumeration():
    D = np.array([[0.5, 0.3, 0.9], [0.1, 0.4, 0.8]])
    # probe 0 is class a: b is closer, so a ranks 2nd; probe 1 is class a and ranks 1st
    np.testing.assert_array_equal(cmc_evaluate(D, ["a", "b", "c"], ["a", "a"]), [0.5, 1.0, 1.0])


def test_cmc_missing_probe_counts_as_miss():
    with pytest.warns(ProtocolWarning):
        curve = cmc_evaluate(np.array([[0.1, 0.2], [0.3, 0.1]]), ["a", "b"], ["a", "z"])
    np.testing.assert_array_equal(curve, [0.5, 0.5])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_cmc_matches_rank_oracle_and_negation(seed):
    rng = np.random.default_rng(seed)
    n_g, n_p = rng.integers(1, 11, size=2)
    classes = rng.integers(1, n_g + 1)
    g_lab = rng.integers(0, classes, size=n_g).tolist()
    p_lab = rng.choice(sorted(set(g_lab)), size=n_p).tolist()
    D = rng.integers(0, 5, size=(n_p, n_g)).astype(float)  # small integers force ties
    curve = cmc_evaluate(D, g_lab, p_lab)
    np.testing.assert_array_equal(curve, cmc_by_ranking(D.tolist(), g_lab, p_lab))
    assert np.all(np.diff(curve) >= 0) and curve[-1] <= 1.0
    if len(set(g_lab)) == n_g:  # one entry per class: negation reverses each probe's ranking
        Dn = -D
        np.testing.assert_array_equal(cmc_evaluate(Dn, g_lab, p_lab), cmc_by_ranking(Dn.tolist(), g_lab, p_lab))


# --- protocol ----------------------------------------------------------------------------------

def _frames(rng, persons=6, per=8, noise=0.1, dim=10):
    centres = rng.normal(scale=5.0, size=(persons, dim))
    out = []
    for p in range(persons):
        for t in range(per):
            out.append(Frame(f"id{p}", "all", t, ed=centres[p] + noise * rng.normal(size=dim), skl=np.zeros(3)))
    return out


def test_protocol_is_deterministic(rng):
    frames = _frames(rng)
    a = run_protocol(frames, "single_shot", "ed", trials=1, seed=4)
    b = run_protocol(frames, "single_shot", "ed", trials=1, seed=4)
    np.testing.assert_array_equal(a.mean, b.mean)
    assert a.splits == b.splits


def test_identical_frames_rank_one(rng):
    frames = _frames(rng, noise=0.0)
    res = run_protocol(frames, "single_shot", "ed", trials=5, seed=0)
    assert res.rank(1) == 1.0
    assert len(res.curves) == 5


def test_protocol_splits_identities(rng):
    frames = _frames(rng, persons=7)
    res = run_protocol(frames, "multi_shot", "skl", trials=3, seed=1)
    for s in res.splits:
        assert len(s["train"]) == 4 and len(s["test"]) == 3
        assert not set(s["train"]) & set(s["test"])


def test_multi_shot_min_rule_by_hand():
    # two persons; person A's 5 gallery frames include one right on top of the probe
    def fr(p, t, v):
        return Frame(p, "g" if t < 5 else "p", t, skl=np.array([v, 0.0]))

    frames = [fr("A", t, v) for t, v in enumerate([0, 10, 10, 10, 10, 3.0])]
    frames += [fr("B", t, v) for t, v in enumerate([4, 4, 4, 4, 4, 4.0])]
    frames += [Frame("T", "g", 0, skl=np.array([100.0, 0.0]))]  # train-only identity (never in probe group)
    res = run_protocol(frames, "multi_shot", "skl", trials=1, seed=0, gallery_group="g", probe_group="p")
    # class distances: probe A (3) -> A min 3, B 1  => rank 2 ; probe B (4) -> A min 4, B 0 => rank 1
    np.testing.assert_array_equal(res.mean, [0.5, 1.0])


def test_short_pool_samples_with_replacement(rng):
    frames = _frames(rng, persons=4, per=3)
    with pytest.warns(ProtocolWarning):
        run_protocol(frames, "multi_shot", "ed", trials=1, seed=0)


def test_unknown_protocol(rng):
    with pytest.raises(DepthReidError):
        run_protocol(_frames(rng), "three_shot", "ed")


def test_protocol_curves_are_monotone(rng):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ProtocolWarning)
        res = run_protocol(_frames(rng, noise=3.0), "single_shot", "ed", trials=4, seed=2)
    for c in res.curves:
        assert np.all(np.diff(c) >= 0) and c[-1] <= 1.0
