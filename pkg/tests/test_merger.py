import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from captionpsg.grounder import GroundingResult, NumericalError, SharedEmbeddings, ground
from captionpsg.grouper import ImageFeatures, SegmentHierarchy, Stage
from captionpsg.merger import (
    Instance,
    InstanceMap,
    LrrConfig,
    connected_components,
    lrr_recover,
    merge_segments,
    merge_stuff,
    ncut_value,
    pseudo_target,
    similarity_loss,
    similarity_loss_grad,
    similarity_matrix,
    spectral_cluster,
)
from captionpsg.numkit import ShapeError, SplitMix64

from fixtures import planted_blocks, same_partition
from oracles import components_bfs, cos_loop, min_bipartition_ncut, ncut_loop, random_affinity


def test_similarity_matrix_trivial_entries():
    x = np.array([[1.0, 0.0], [2.0, 0.0], [-1.0, 0.0], [0.0, 3.0]])
    s = similarity_matrix(x)
    assert s[0, 1] == 1.0 and s[0, 2] == 0.0 and abs(s[0, 3] - 0.5) < 1e-15
    with pytest.raises(NumericalError):
        similarity_matrix(np.vstack([x, np.zeros(2)]))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 8))
def test_similarity_matrix_invariants(seed, n):
    s = similarity_matrix(SplitMix64(seed).normal((n, 4)))
    assert np.array_equal(s, s.T)
    assert np.all(np.diag(s) == 1.0)
    assert s.min() >= 0 and s.max() <= 1


def test_pseudo_target_rules():
    g = GroundingResult(1, np.array([0, 0, 0]), np.array([0.9, 0.8, 0.7]), np.array([True] * 3))
    assert np.array_equal(pseudo_target(g), np.ones((3, 3)))
    g = GroundingResult(1, np.array([0, 0, 0]), np.array([0.9, -0.8, 0.7]), np.array([True, False, True]))
    t = pseudo_target(g)
    assert not t[1].any() and not t[:, 1].any() and t[0, 2] == 1


def test_pseudo_target_matches_triple_condition():
    rng = SplitMix64(3)
    x, y = rng.normal((7, 3)), rng.normal((3, 3))
    e = SharedEmbeddings(1, x, y)
    theta = 0.1
    g = ground(e, theta)
    cos = cos_loop(x, y)
    best = [max(range(3), key=lambda j: (cos[i][j], -j)) for i in range(7)]
    t = pseudo_target(g, np.array(cos), theta)
    for i in range(7):
        for j in range(7):
            want = best[i] == best[j] and cos[i][best[i]] > theta and cos[j][best[j]] > theta
            assert t[i, j] == float(want)
    assert np.array_equal(t, pseudo_target(g))


def test_similarity_loss_examples():
    assert similarity_loss(np.eye(3), np.eye(3)) == 0.0
    assert similarity_loss(np.ones((2, 2)), np.zeros((2, 2))) == 1.0
    with pytest.raises(ShapeError):
        similarity_loss(np.ones((2, 2)), np.ones((3, 3)))
    rng = SplitMix64(5)
    a, b = rng.uniform(0, 1, (4, 4)), (rng.uniform(0, 1, (4, 4)) > 0.5).astype(float)
    ref = sum((a[i, j] - b[i, j]) ** 2 for i in range(4) for j in range(4)) / 16
    assert abs(similarity_loss(a, b) - ref) <= 1e-15


@pytest.mark.parametrize("seed", range(3))
def test_similarity_loss_gradient_finite_differences(seed):
    rng = SplitMix64(seed)
    x = rng.normal((5, 3))
    target = (rng.uniform(0, 1, (5, 5)) > 0.5).astype(float)
    target = np.maximum(target, target.T)
    np.fill_diagonal(target, 1.0)
    _, g = similarity_loss_grad(x, target)
    eps = 1e-6
    num = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += eps
        xm[idx] -= eps
        num[idx] = (similarity_loss(similarity_matrix(xp), target)
                    - similarity_loss(similarity_matrix(xm), target)) / (2 * eps)
    assert np.max(np.abs(g - num)) <= 1e-5 * max(np.max(np.abs(num)), 1e-8)


def test_lrr_zero_fixed_point():
    r = lrr_recover(np.zeros((4, 4)))
    assert r.converged and r.iterations == 1
    assert not r.Z.any() and not r.E.any()


def test_lrr_config_validation():
    assert LrrConfig().lam == 0.4
    with pytest.raises(ValueError):
        LrrConfig(rho=1.0)
    with pytest.raises(ValueError):
        LrrConfig(lam=0.0)


def test_lrr_planted_blocks_recovered():
    sim, truth = planted_blocks(0)
    r = lrr_recover(sim)
    assert r.converged and r.residual <= 1e-6
    assert np.max(np.abs(sim - sim @ r.Z - r.E)) <= 1e-6 * (1 + np.max(np.abs(sim).sum(axis=1)))
    assert same_partition(spectral_cluster(r.Z, "auto"), truth)
    again = lrr_recover(sim)
    assert np.array_equal(again.Z, r.Z)


def test_lrr_warns_when_not_converged():
    sim, _ = planted_blocks(1)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        r = lrr_recover(sim, LrrConfig(max_iter=2))
    assert not r.converged and r.iterations == 2
    assert any(issubclass(w.category, RuntimeWarning) for w in caught)


def test_spectral_two_blocks_any_seed():
    w = np.zeros((5, 5))
    w[:3, :3] = 1.0
    w[3:, 3:] = 1.0
    for seed in range(4):
        assert list(spectral_cluster(w, 2, seed)) == [0, 0, 0, 1, 1]
        assert list(spectral_cluster(w, "auto", seed)) == [0, 0, 0, 1, 1]


def test_spectral_all_ones_is_one_cluster_and_isolated_singletons():
    assert list(spectral_cluster(np.ones((4, 4)), "auto")) == [0, 0, 0, 0]
    w = np.ones((3, 3))
    w[2] = w[:, 2] = 0.0
    assert list(spectral_cluster(w, "auto")) == [0, 0, 1]
    assert spectral_cluster(np.zeros((0, 0))).size == 0


def test_ncut_value_matches_loop():
    w = random_affinity(SplitMix64(2), 6)
    labels = [0, 1, 1, 0, 2, 1]
    assert abs(ncut_value(w, labels) - ncut_loop(w.tolist(), labels)) <= 1e-12


@pytest.mark.parametrize("seed", range(10))
def test_spectral_bipartition_reaches_exhaustive_minimum(seed):
    w = random_affinity(SplitMix64(seed), 6)
    labels = spectral_cluster(w, 2, seed=0)
    assert len(set(labels)) == 2
    assert ncut_loop(w.tolist(), list(labels)) <= min_bipartition_ncut(w.tolist()) + 1e-9


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10**6), st.permutations(range(6)))
def test_spectral_permutation_stable(seed, perm):
    sim, _ = planted_blocks(seed % 1000, sizes=(3, 3))
    perm = np.array(perm)
    base = spectral_cluster(sim, 2)
    moved = spectral_cluster(sim[np.ix_(perm, perm)], 2)
    assert same_partition(moved, base[perm])


def two_segment_hierarchy():
    img = ImageFeatures("x", (1, 2), np.zeros((2, 1)), patch_size=2)
    st1 = Stage(np.zeros((2, 1)), np.eye(2), np.array([0, 1]))
    return img, SegmentHierarchy(np.zeros((2, 1)), [st1])


def test_merge_segments_examples():
    img, h = two_segment_hierarchy()
    one = merge_segments(h, 1, [0, 0], img)
    assert one.shape == (1, 2, 4) and one.all()
    two = merge_segments(h, 1, [0, 1], img)
    assert two[0, :, :2].all() and not two[0, :, 2:].any() and two[1, :, 2:].all()
    with pytest.raises(ShapeError):
        merge_segments(h, 1, [0, 1, 1], img)


def test_components_examples():
    m = np.zeros((1, 5, 5), dtype=bool)
    m[0, 1:4, 1:4] = True
    cc = connected_components(m, ["dog"])
    assert list(cc.instances) == [1] and cc.instances[1].pixels == 9 and cc.instances[1].bbox == (1, 1, 3, 3)
    m = np.zeros((1, 4, 6), dtype=bool)
    m[0, :2, :2] = True
    m[0, 2:, 4:] = True
    assert len(connected_components(m).instances) == 2
    diag = np.array([[[1, 0], [0, 1]]], dtype=bool)
    assert len(connected_components(diag).instances) == 2
    assert len(connected_components(diag, min_pixels=2).instances) == 0
    with pytest.raises(ValueError):
        connected_components(np.ones((2, 2, 2), dtype=bool))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 7), st.integers(1, 7), st.integers(1, 4))
def test_components_match_bfs(seed, h, w, d):
    rng = SplitMix64(seed)
    owner = np.array([rng.randbelow(d + 1) for _ in range(h * w)]).reshape(h, w)
    masks = np.stack([owner == c + 1 for c in range(d)])
    cc = connected_components(masks)
    expected = []
    for c in range(d):
        expected += components_bfs(masks[c].tolist())
    got = [set(map(tuple, np.argwhere(cc.ids == i))) for i in sorted(cc.instances)]
    assert got == expected
    assert set(np.unique(cc.ids)) - {0} == set(cc.instances)


def test_merge_stuff_examples():
    ids = np.array([[1, 0, 2], [3, 0, 4]])
    inst = {1: Instance("grass", 1, (0, 0, 0, 0)), 2: Instance("grass", 1, (2, 0, 2, 0)),
            3: Instance("person", 1, (0, 1, 0, 1)), 4: Instance("person", 1, (2, 1, 2, 1))}
    out = merge_stuff(InstanceMap(ids, inst), {"grass"})
    labels = sorted(i.label for i in out.instances.values())
    assert labels == ["grass", "person", "person"]
    assert out.ids[0, 0] == out.ids[0, 2] and out.instances[out.ids[0, 0]].bbox == (0, 0, 2, 0)
    same = merge_stuff(InstanceMap(ids, inst), set())
    assert np.array_equal(same.ids, ids)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6))
def test_merge_stuff_recount(seed):
    rng = SplitMix64(seed)
    names = ["sky", "grass", "dog", "cat"]
    owner = np.array([rng.randbelow(5) for _ in range(36)]).reshape(6, 6)
    masks = np.stack([owner == c + 1 for c in range(4)])
    cc = connected_components(masks, names)
    out = merge_stuff(cc, {"sky", "grass"})
    for name in names:
        before = [i for i, v in cc.instances.items() if v.label == name]
        after = [i for i, v in out.instances.items() if v.label == name]
        if name in ("sky", "grass"):
            assert len(after) == min(len(before), 1)
        else:
            assert len(after) == len(before)
        union = np.isin(cc.ids, before)
        assert np.array_equal(union, np.isin(out.ids, after))
    assert sorted(out.instances) == list(range(1, len(out.instances) + 1))
