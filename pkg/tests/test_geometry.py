import numpy as np
import pytest

from cascomp import geometry as geo
from cascomp.errors import ContractViolation, DegenerateInput
from cascomp.rng import Stream, derive_key, splitmix64


def rand_cloud(seed, n):
    return Stream(seed, "cloud").uniform(n * 3).reshape(n, 3) * 2 - 1


# --- normalize ---------------------------------------------------------------

def test_normalize_two_points():
    out, centroid, scale = geo.normalize([[0, 0, 0], [2, 0, 0]])
    assert np.allclose(out, [[-1, 0, 0], [1, 0, 0]], atol=0)
    assert np.allclose(centroid, [1, 0, 0], atol=0)
    assert scale == 1.0


def test_normalize_idempotent():
    cloud = rand_cloud(1, 64)
    once, _, _ = geo.normalize(cloud)
    twice, _, _ = geo.normalize(once)
    assert np.abs(once - twice).max() <= 1e-12


def test_normalize_roundtrip():
    cloud = rand_cloud(2, 128) * 7 + 3
    out, centroid, scale = geo.normalize(cloud)
    assert np.abs(out.mean(axis=0)).max() <= 1e-9
    assert abs(np.sqrt((out ** 2).sum(axis=1)).max() - 1.0) <= 1e-9
    back = geo.denormalize(out, centroid, scale)
    assert np.abs(back - cloud).max() <= 1e-9


def test_normalize_degenerate():
    with pytest.raises(DegenerateInput):
        geo.normalize([[1.0, 1.0, 1.0]])
    with pytest.raises(DegenerateInput):
        geo.normalize([[1.0, 1.0, 1.0]] * 5)


# --- fps ----------------------------------------------------------------------

def fps_oracle(pts, k, start):
    """Independent exhaustive greedy reference."""
    pts = np.asarray(pts, float)
    picks = [start]
    for _ in range(k - 1):
        best, best_d = None, -1.0
        for i in range(len(pts)):
            if i in picks:
                continue
            d = min(((pts[i] - pts[j]) ** 2).sum() for j in picks)
            if d > best_d:
                best, best_d = i, d
        picks.append(best)
    return np.array(picks)


def test_fps_full_is_permutation():
    cloud = rand_cloud(3, 20)
    picks = geo.fps(cloud, 20, start_index=4)
    assert sorted(picks.tolist()) == list(range(20))


def test_fps_three_point_case():
    pts = [[0, 0, 0], [1, 0, 0], [0.4, 0, 0]]
    assert geo.fps(pts, 2, 0).tolist() == [0, 1]


def test_fps_collinear_tie_case():
    pts = [[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]]
    assert geo.fps(pts, 3, 0).tolist() == [0, 3, 1]


def test_fps_matches_oracle_randomized():
    s = Stream(4, "fps")
    for trial in range(30):
        n = 5 + s.below(40)
        cloud = rand_cloud(100 + trial, n)
        k = 1 + s.below(n)
        start = s.below(n)
        assert np.array_equal(geo.fps(cloud, k, start), fps_oracle(cloud, k, start))


def test_fps_greedy_invariant():
    # each pick's min-distance to earlier picks dominates every unpicked point's
    s = Stream(5, "fpsinv")
    for trial in range(10):
        n = 8 + s.below(56)
        cloud = rand_cloud(200 + trial, n)
        k = 2 + s.below(n - 1)
        picks = geo.fps(cloud, k, 0)
        for i in range(1, k):
            chosen = cloud[picks[:i]]
            d_pick = (((cloud[picks[i]] - chosen) ** 2).sum(axis=1)).min()
            rest = [j for j in range(n) if j not in set(picks[:i].tolist())]
            for j in rest:
                d_j = (((cloud[j] - chosen) ** 2).sum(axis=1)).min()
                assert d_pick >= d_j - 1e-15


def test_fps_contract_errors():
    cloud = rand_cloud(6, 10)
    with pytest.raises(ContractViolation):
        geo.fps(cloud, 0)
    with pytest.raises(ContractViolation):
        geo.fps(cloud, 11)
    with pytest.raises(ContractViolation):
        geo.fps(cloud, 2, start_index=10)


# --- knn ----------------------------------------------------------------------

def knn_oracle(pts, query, k):
    d2 = ((pts - np.asarray(query)) ** 2).sum(axis=1)
    order = np.lexsort((np.arange(len(pts)), d2))
    return order[:k]


def test_knn_query_on_indexed_point():
    cloud = rand_cloud(7, 50)
    index = geo.SpatialIndex(cloud)
    assert index.knn(cloud[17], 1)[0] == 17


def test_knn_full_ordering():
    cloud = rand_cloud(8, 20)
    index = geo.SpatialIndex(cloud)
    assert np.array_equal(index.knn([0.1, 0.2, 0.3], 20),
                          knn_oracle(cloud, [0.1, 0.2, 0.3], 20))


def test_knn_matches_exhaustive_256x64():
    cloud = rand_cloud(9, 256)
    queries = rand_cloud(10, 64)
    index = geo.SpatialIndex(cloud)
    for q in queries:
        assert np.array_equal(index.knn(q, 8), knn_oracle(cloud, q, 8))


def test_knn_randomized_thousand_cases():
    s = Stream(11, "knncases")
    caseno = 0
    while caseno < 1000:
        n = 2 + s.below(100)
        cloud = rand_cloud(300 + caseno, n)
        index = geo.SpatialIndex(cloud)
        for _ in range(min(10, 1000 - caseno)):
            q = (s.uniform(3) * 2 - 1)
            k = 1 + s.below(n)
            assert np.array_equal(index.knn(q, k), knn_oracle(cloud, q, k))
            caseno += 1


def test_knn_grid_ties_lowest_index():
    grid = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], float)
    index = geo.SpatialIndex(grid)
    assert index.knn([0.5, 0.5, 0.0], 2).tolist() == [0, 1]
    assert index.knn([0.5, 0.5, 0.0], 4).tolist() == [0, 1, 2, 3]


def test_knn_duplicate_points():
    pts = np.array([[1, 1, 1], [1, 1, 1], [2, 2, 2]], float)
    index = geo.SpatialIndex(pts)
    assert index.knn([1, 1, 1], 2).tolist() == [0, 1]


def test_knn_contract_errors():
    index = geo.SpatialIndex(rand_cloud(12, 5))
    with pytest.raises(ContractViolation):
        index.knn([0, 0, 0], 0)
    with pytest.raises(ContractViolation):
        index.knn([0, 0, 0], 6)


# --- viewpoint crop ------------------------------------------------------------

def test_crop_zero_is_identity():
    cloud = rand_cloud(13, 30)
    out = geo.viewpoint_crop(cloud, [0, 0, 2], 0)
    assert np.array_equal(out, cloud)


def test_crop_line_case():
    pts = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]], float)
    out = geo.viewpoint_crop(pts, [10, 0, 0], 2)
    assert np.array_equal(out, [[2, 0, 0], [3, 0, 0]])


def test_crop_partition_and_dominance():
    s = Stream(14, "crop")
    for trial in range(20):
        n = 10 + s.below(90)
        cloud = rand_cloud(400 + trial, n)
        vp = s.uniform(3) * 2 - 1
        n_remove = s.below(n)
        survivors = geo.viewpoint_crop(cloud, vp, n_remove)
        removed_idx = geo.farthest_indices(cloud, vp, n_remove)
        assert len(survivors) == n - n_remove
        # partition: survivors + removed == input multiset
        merged = np.vstack([survivors, cloud[removed_idx]])
        assert np.array_equal(np.sort(merged.view("f8,f8,f8"), axis=0),
                              np.sort(cloud.view("f8,f8,f8"), axis=0))
        if n_remove:
            d_rem = ((cloud[removed_idx] - vp) ** 2).sum(axis=1)
            d_sur = ((survivors - vp) ** 2).sum(axis=1)
            assert d_rem.min() >= d_sur.max() - 1e-15


def test_crop_contract_error():
    with pytest.raises(ContractViolation):
        geo.viewpoint_crop(rand_cloud(15, 5), [0, 0, 0], 5)


# --- random downsample ----------------------------------------------------------

def test_downsample_full_is_permutation():
    cloud = rand_cloud(16, 12)
    out = geo.random_downsample(cloud, 12, Stream(1, "ds"))
    assert np.array_equal(np.sort(out.view("f8,f8,f8"), axis=0),
                          np.sort(cloud.view("f8,f8,f8"), axis=0))


def test_downsample_is_submultiset():
    cloud = rand_cloud(17, 40)
    for seed in range(5):
        out = geo.random_downsample(cloud, 15, Stream(seed, "ds"))
        rows = {tuple(r) for r in cloud}
        assert all(tuple(r) in rows for r in out)


def test_downsample_deterministic():
    cloud = rand_cloud(18, 40)
    a = geo.random_downsample(cloud, 10, Stream(9, "ds"))
    b = geo.random_downsample(cloud, 10, Stream(9, "ds"))
    assert np.array_equal(a, b)


def test_downsample_contract_error():
    with pytest.raises(ContractViolation):
        geo.random_downsample(rand_cloud(19, 5), 6, Stream(0, "ds"))


# --- pinned PRNG ------------------------------------------------------------------

def test_philox_raw_test_vectors():
    # Philox-4x64-10 raw outputs for the documented key derivation; frozen so
    # dataset regeneration stays bit-stable across environments
    assert derive_key(0) == (16294208416658607535, 12035550249420947055)
    s = Stream(0)
    assert s.raw64(3).tolist() == [11262942800594349292, 3250549848711441881,
                                   17762982026049663920]
    assert splitmix64(1) == 10451216379200822465


def test_stream_uniform_and_bounded():
    s = Stream(42, "u")
    u = s.uniform(1000)
    assert u.min() >= 0.0 and u.max() < 1.0
    t = Stream(42, "u")
    assert np.array_equal(t.uniform(1000), u)
    counts = np.bincount([Stream(i, "b").below(7) for i in range(700)], minlength=7)
    assert counts.min() > 50  # roughly uniform


def test_stream_spawn_independent():
    parent = Stream(5, "p")
    child = parent.spawn("c")
    direct = Stream(5, "p", "c")
    assert np.array_equal(child.raw64(4), direct.raw64(4))


def test_sample_indices_distinct_and_uniform_range():
    s = Stream(6, "si")
    idx = s.sample_indices(50, 20)
    assert len(set(idx.tolist())) == 20
    assert idx.min() >= 0 and idx.max() < 50


def test_unit_sphere_points():
    s = Stream(7, "sph")
    for _ in range(100):
        p = s.unit_sphere_point()
        assert abs(np.linalg.norm(p) - 1.0) <= 1e-12
