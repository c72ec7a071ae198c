import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cloud_delta import synth
from cloud_delta.core import Trajectory
from cloud_delta.descriptor import DescriptorConfig, DescriptorSet, compute_descriptor_set
from cloud_delta.detection import (ChangeScore, KDTreeIndex, LinearScanIndex, SelectOptions, build_index,
                                   rank_scores, region_difference, score_changes, select_regions)
from cloud_delta.errors import EmptyDescriptorSet
from conftest import aligned

CFG = DescriptorConfig()


def scan_oracle(keys, vectors, q):
    """Nearest record by plain loop; equal distances go to the lowest key."""
    best_k, best_d2 = None, math.inf
    for k, v in zip(keys, vectors):
        d2 = float(np.sum((v - q) ** 2))
        if d2 < best_d2 or (d2 == best_d2 and k < best_k):
            best_k, best_d2 = int(k), d2
    return best_k, math.sqrt(best_d2)


def unit_rows(rng, n):
    v = rng.normal(size=(n, 64))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def line_traj(n):
    return Trajectory(np.column_stack([np.arange(1.0, n + 1), np.zeros(n), np.ones(n)]))


def scene_descriptors(changes, seed=0):
    scene = synth.generate(synth.SceneSpec(seed=seed, changes=changes))
    M1, Tr1 = aligned(scene)
    Q_t = compute_descriptor_set(scene.M_t, scene.Tr_t, CFG)
    Q_t1 = compute_descriptor_set(M1, Tr1, CFG)
    return scene, Q_t, Q_t1, Tr1


# --- index

def test_single_record_index():
    idx = build_index(DescriptorSet([5], np.eye(64)[:1]))
    assert idx.query(np.eye(64)[3])[0] == 5


def test_query_equal_to_stored(rng):
    q = unit_rows(rng, 10)
    for threshold in (512, 0):
        idx = build_index(DescriptorSet(np.arange(1, 11), q), linear_threshold=threshold)
        assert idx.query(q[6]) == (7, 0.0)


def test_empty_set_rejected():
    with pytest.raises(EmptyDescriptorSet):
        build_index(DescriptorSet([], np.zeros((0, 64))))
    with pytest.raises(EmptyDescriptorSet):
        build_index(DescriptorSet([1, 2], np.zeros((2, 64))))


def test_threshold_picks_structure(rng):
    small = DescriptorSet(np.arange(1, 11), unit_rows(rng, 10))
    assert isinstance(build_index(small), LinearScanIndex)
    assert isinstance(build_index(small, linear_threshold=5), KDTreeIndex)


def test_kdtree_matches_scan(rng):
    keys = np.arange(1, 201)
    vecs = unit_rows(rng, 200)
    tree = KDTreeIndex(keys, vecs, leaf_size=4)
    for q in unit_rows(rng, 50):
        assert tree.query(q) == scan_oracle(keys, vecs, q)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 120), st.integers(1, 8), st.booleans())
def test_exactness_property(seed, n, leaf, coarse):
    rng = np.random.default_rng(seed)
    # coarse integer vectors force many exact ties
    vecs = rng.integers(0, 3, (n, 64)).astype(float) if coarse else rng.normal(size=(n, 64))
    vecs[~vecs.any(axis=1), 0] = 1.0
    keys = rng.permutation(np.arange(1, n + 1) * 3)
    tree = KDTreeIndex(keys, vecs, leaf_size=leaf)
    scan = LinearScanIndex(keys, vecs)
    queries = rng.integers(0, 3, (10, 64)).astype(float) if coarse else rng.normal(size=(10, 64))
    Q = np.vstack([queries, vecs[:5]])
    expect = [scan_oracle(keys, vecs, q) for q in Q]
    assert [tree.query(q) for q in Q] == expect
    assert [scan.query(q) for q in Q] == expect
    for index in (tree, scan):
        k, d = index.query_many(Q)
        assert list(zip(k.tolist(), d.tolist())) == expect


# --- scoring

def test_identical_sessions_score_zero(corridor):
    Q = compute_descriptor_set(corridor.M_t, corridor.Tr_t, CFG)
    scores = score_changes(build_index(Q), Q)
    assert len(scores) == Q.present.sum()
    assert all(s.distance == 0.0 for s in scores)


def test_single_box_argmax_at_pose_17():
    _, Q_t, Q_t1, _ = scene_descriptors([synth.Change("add_box", (17.0, 0.8, 2.0), (1, 1, 1))])
    scores = score_changes(build_index(Q_t), Q_t1)
    assert max(scores, key=lambda s: s.distance).j == 17


def test_scores_ordered_by_j_and_skip_absent(rng):
    q = unit_rows(rng, 4)
    q[2] = 0.0
    Q1 = DescriptorSet([4, 1, 3, 2], q)
    scores = score_changes(build_index(DescriptorSet([1, 2], unit_rows(rng, 2))), Q1)
    assert [s.j for s in scores] == [1, 2, 4]


def test_scores_permutation_invariant(rng):
    Q_t = DescriptorSet(np.arange(1, 61), unit_rows(rng, 60))
    Q_t1 = DescriptorSet(np.arange(1, 41), unit_rows(rng, 40))
    base = score_changes(build_index(Q_t), Q_t1)
    for _ in range(5):
        shuffled = Q_t.permuted(rng.permutation(60))
        assert score_changes(build_index(shuffled), Q_t1.permuted(rng.permutation(40))) == base
        assert score_changes(build_index(shuffled, linear_threshold=0), Q_t1) == base


def test_region_difference():
    a, b = np.zeros(64), np.zeros(64)
    a[0], b[1] = 1.0, 1.0
    assert region_difference(a, b) == pytest.approx(math.sqrt(2))


# --- selection

def test_identical_sessions_threshold_empty(corridor):
    Q = compute_descriptor_set(corridor.M_t, corridor.Tr_t, CFG)
    scores = score_changes(build_index(Q), Q)
    assert select_regions(scores, corridor.Tr_t, corridor.Tr_t, SelectOptions()) == []


def test_two_boxes_top2():
    changes = [synth.Change("add_box", (8.0, 0.8, 2.0), (1, 1, 1)),
               synth.Change("add_box", (31.0, -0.8, 2.0), (1, 1, 1))]
    scene, Q_t, Q_t1, Tr1 = scene_descriptors(changes)
    scores = score_changes(build_index(Q_t), Q_t1)
    regions = select_regions(scores, scene.Tr_t, Tr1, SelectOptions(mode="top_k", k=2))
    assert sorted(r.score.j for r in regions) == [8, 31]
    for r in regions:
        assert np.linalg.norm(r.center_t - r.center_t1) <= 2 * r.radius
        assert np.allclose(r.center_t, scene.Tr_t.pose(r.k_t))


def test_spanning_box_single_region():
    scene, Q_t, Q_t1, Tr1 = scene_descriptors([synth.Change("add_box", (17.0, 0.8, 2.0), (2.5, 1, 1))])
    scores = score_changes(build_index(Q_t), Q_t1)
    regions = select_regions(scores, scene.Tr_t, Tr1, SelectOptions(mode="top_k", k=3))
    assert len(regions) == 1
    assert 16 <= regions[0].score.j <= 18


def test_threshold_cutoff():
    tr = line_traj(30)
    d = [0.0] * 30
    d[4], d[19] = 1.0, 0.9
    scores = [ChangeScore(j, j, v) for j, v in enumerate(d, start=1)]
    mu, sd = np.mean(d), np.std(d)
    assert 0.9 >= mu + 2 * sd
    regions = select_regions(scores, tr, tr, SelectOptions(radius=1.0))
    assert [r.score.j for r in regions] == [5, 20]
    assert select_regions(scores, tr, tr, SelectOptions(radius=1.0, lambda_d=5.0)) == []


def test_equal_scores_threshold_empty():
    tr = line_traj(5)
    scores = [ChangeScore(j, j, 0.3) for j in range(1, 6)]
    assert select_regions(scores, tr, tr, SelectOptions()) == []


def test_unpaired_pose_skipped(caplog):
    tr_t = line_traj(5)
    tr_t1 = Trajectory([[1, 0, 1], [100, 0, 1]])
    scores = [ChangeScore(1, 1, 0.5), ChangeScore(2, 1, 0.9)]
    regions = select_regions(scores, tr_t, tr_t1, SelectOptions(mode="top_k", k=2, radius=1.0))
    assert [r.score.j for r in regions] == [1]
    assert "no earlier pose" in caplog.text


def test_bad_options():
    with pytest.raises(ValueError):
        SelectOptions(mode="all")
    with pytest.raises(ValueError):
        SelectOptions(mode="top_k", k=0)


def test_suppression_radius_not_monotone():
    # greedy NMS: shrinking the radius can admit B and thereby crowd out C
    tr = line_traj(3)
    scores = [ChangeScore(1, 1, 1.0), ChangeScore(2, 1, 0.9), ChangeScore(3, 1, 0.8)]
    pick = lambda r: {x.score.j for x in select_regions(
        scores, tr, tr, SelectOptions(mode="top_k", k=2, nms_radius=r, radius=1.0))}
    assert pick(0.5) == {1, 2}
    assert pick(1.5) == {1, 3}


@st.composite
def score_sets(draw):
    n = draw(st.integers(1, 40))
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    poses = rng.uniform(0, 30, (n, 3))
    d = rng.integers(0, 6, n) / 5.0 if draw(st.booleans()) else rng.random(n)
    return Trajectory(poses), [ChangeScore(j, j, float(v)) for j, v in enumerate(d, start=1)]


@settings(max_examples=80)
@given(score_sets(), st.floats(0, 15), st.integers(1, 6), st.sampled_from(["top_k", "threshold"]))
def test_nms_properties(data, radius, k, mode):
    tr, scores = data
    opts = SelectOptions(mode=mode, k=k, radius=2.0, nms_radius=radius, pairing_max=1e9, lambda_d=0.5)
    out = select_regions(scores, tr, tr, opts)
    chosen = [r.score for r in out]
    # ranked, separated, and each accepted score beats every later one
    assert chosen == sorted(chosen, key=lambda s: (-s.distance, s.j))
    for a in range(len(out)):
        for b in range(a + 1, len(out)):
            assert np.linalg.norm(out[a].center_t1 - out[b].center_t1) >= radius
    assert all(s.distance > 0 for s in chosen)
    # greedy cover: a skipped candidate ranked above the last pick is near an earlier pick
    if chosen:
        last = rank_scores(scores).index(chosen[-1])
        for s in rank_scores(scores)[:last]:
            if s in chosen:
                continue
            p = tr.pose(s.j)
            better = [r for r in out if (-r.score.distance, r.score.j) < (-s.distance, s.j)]
            assert any(np.linalg.norm(p - r.center_t1) < radius for r in better)
    # top-1 never depends on the radius
    positive = [s for s in scores if s.distance > 0]
    if positive and (mode == "top_k" or chosen):
        assert chosen[0] == rank_scores(positive)[0]
    if radius == 0 and mode == "top_k":
        assert chosen == rank_scores(positive)[:k]


@settings(max_examples=40)
@given(st.integers(0, 2**32 - 1), st.sampled_from([0.25, 0.5, 2.0, 3.0, 8.0]))
def test_scaling_preserves_selection(seed, c):
    rng = np.random.default_rng(seed)
    Q_t = DescriptorSet(np.arange(1, 31), unit_rows(rng, 30))
    Q_t1 = DescriptorSet(np.arange(1, 26), unit_rows(rng, 25))
    tr = Trajectory(rng.uniform(0, 40, (30, 3)))
    opts = SelectOptions(mode="top_k", k=4, radius=3.0)
    a = score_changes(build_index(Q_t), Q_t1)
    b = score_changes(build_index(DescriptorSet(Q_t.indices, Q_t.vectors * c)),
                      DescriptorSet(Q_t1.indices, Q_t1.vectors * c))
    np.testing.assert_allclose([s.distance for s in b], [c * s.distance for s in a], rtol=1e-12)
    assert [(s.j, s.nn_i) for s in a] == [(s.j, s.nn_i) for s in b]
    ra = select_regions(a, tr, tr, opts)
    rb = select_regions(b, tr, tr, opts)
    assert [r.score.j for r in ra] == [r.score.j for r in rb]


@settings(max_examples=40)
@given(st.integers(0, 2**32 - 1))
def test_reordering_preserves_selection(seed):
    rng = np.random.default_rng(seed)
    Q_t = DescriptorSet(np.arange(1, 41), unit_rows(rng, 40))
    Q_t1 = DescriptorSet(np.arange(1, 31), unit_rows(rng, 30))
    tr = Trajectory(rng.uniform(0, 40, (40, 3)))
    opts = SelectOptions(mode="top_k", k=5, radius=3.0)
    pick = lambda a, b: {(r.score.j, r.score.nn_i) for r in
                         select_regions(score_changes(build_index(a), b), tr, tr, opts)}
    base = pick(Q_t, Q_t1)
    assert pick(Q_t.permuted(rng.permutation(40)), Q_t1.permuted(rng.permutation(30))) == base
