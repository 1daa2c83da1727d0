import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats

from gradsurf.errors import DegenerateCloud, InvalidXi
from gradsurf.geometry import (MIN_SIGMA, NormalizationTransform, PointCloud, build_index, local_offset,
                               multiscale_offsets, neighbor_distance, normalize, sample_queries)
from gradsurf.synthetic import SyntheticShape

coords = st.floats(-100, 100, allow_nan=False, width=64)


def brute_knn(points, queries, k):
    d = np.linalg.norm(queries[:, None] - points[None], axis=2)
    order = np.lexsort((np.broadcast_to(np.arange(len(points)), d.shape), d), axis=1)[:, :k]
    return np.take_along_axis(d, order, 1), order


# -- PointCloud / normalize ---------------------------------------------------

def test_gt_normals_are_unit():
    c = PointCloud(np.zeros((4, 3)), np.array([[2.0, 0, 0], [0, 3, 0], [1, 1, 1], [0, 0, -5]]))
    assert np.allclose(np.linalg.norm(c.gt_normals, axis=1), 1.0, atol=1e-6)


def test_normalize_four_points():
    c = PointCloud([[0, 0, 0], [2, 0, 0], [0, 2, 0], [0, 0, 2]])
    out, tf = normalize(c)
    assert np.allclose(tf.center, [1, 1, 1]) and tf.scale == 1.0
    assert np.abs(out.points).max() == 1.0


def test_normalize_cube_corners_is_identity():
    corners = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], float)
    out, tf = normalize(PointCloud(corners))
    assert np.allclose(tf.center, 0) and tf.scale == 1.0
    assert np.array_equal(out.points, corners)


def test_normalize_round_trip_scaled_sphere():
    pts = SyntheticShape("sphere").sample(10000, seed=1) * 37.2 + 5.0
    out, tf = normalize(PointCloud(pts))
    back = tf.inverse(out.points)
    assert np.max(np.abs(back - pts) / np.abs(pts)) < 1e-9
    assert np.abs(out.points).max() <= 1.0 + 1e-12


@pytest.mark.parametrize("n", [0, 3])
def test_normalize_too_few_points(n):
    with pytest.raises(DegenerateCloud):
        normalize(PointCloud(np.random.default_rng(0).random((n, 3))))


def test_normalize_coincident_points():
    with pytest.raises(DegenerateCloud):
        normalize(PointCloud(np.ones((10, 3))))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (20, 3), elements=coords))
def test_normalize_properties(pts):
    if np.ptp(pts, axis=0).max() < 1e-6:
        return
    out, tf = normalize(PointCloud(pts))
    assert np.all(np.abs(out.points) <= 1 + 1e-12)
    assert 0 < out.diagonal < np.inf
    again, tf2 = normalize(out)
    assert np.allclose(tf2.center, 0, atol=1e-9) and abs(tf2.scale - 1) < 1e-9
    assert np.allclose(tf.inverse(tf.apply(pts)), pts, rtol=1e-9, atol=1e-9 * np.abs(pts).max())


def test_identity_transform():
    tf = NormalizationTransform.identity()
    x = np.arange(9.0).reshape(3, 3)
    assert np.array_equal(tf.apply(x), x)


# -- NeighborIndex ------------------------------------------------------------

def test_knn_line_example():
    idx = build_index([[0, 0, 0], [1, 0, 0], [3, 0, 0]])
    d, i = idx.knn([[0.9, 0, 0]], 2)
    assert i[0].tolist() == [1, 0]
    assert np.allclose(d[0], [0.1, 0.9])


def test_knn_self_match():
    pts = np.random.default_rng(0).random((100, 3))
    d, i = build_index(pts).knn(pts, 1)
    assert np.array_equal(i[:, 0], np.arange(100)) and np.all(d == 0)


def test_knn_matches_brute_force_2000():
    gen = np.random.default_rng(1)
    pts, q = gen.random((2000, 3)), gen.random((50, 3))
    d, i = build_index(pts).knn(q, 8)
    bd, bi = brute_knn(pts, q, 8)
    assert np.array_equal(i, bi) and np.allclose(d, bd, atol=1e-12)


def test_knn_all_points_sorted():
    pts = np.random.default_rng(2).random((64, 3))
    d, i = build_index(pts).knn(pts[:5], 64)
    assert np.all(np.diff(d, axis=1) >= 0)
    assert all(sorted(row) == list(range(64)) for row in i.tolist())


def test_knn_ties_break_by_index():
    pts = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [5, 5, 5]], float)
    _, i = build_index(pts).knn([[0, 0, 0]], 4)
    assert i[0].tolist() == [0, 1, 2, 3]


@settings(max_examples=25, deadline=None)
@given(st.integers(10, 5000), st.integers(0, 10_000), st.data())
def test_knn_property_vs_brute(n, seed, data):
    gen = np.random.default_rng(seed)
    pts = gen.random((n, 3))
    k = data.draw(st.integers(1, min(n, 32)))
    q = gen.random((5, 3))
    d, i = build_index(pts).knn(q, k)
    bd, bi = brute_knn(pts, q, k)
    assert np.allclose(d, bd, atol=1e-12)
    assert np.array_equal(i, bi)


def test_knn_rejects_bad_k():
    idx = build_index(np.zeros((3, 3)))
    with pytest.raises(ValueError):
        idx.knn([[0, 0, 0]], 4)


# -- sigma and query sampling -------------------------------------------------

def test_grid_sigma_equals_spacing():
    h = 0.05
    g = np.arange(6) * h
    pts = np.stack(np.meshgrid(g, g, g, indexing="ij"), -1).reshape(-1, 3)
    cloud = PointCloud(pts)
    batch = sample_queries(cloud, build_index(pts), 100, 1, rng_seed=0)
    assert np.allclose(batch.sigmas, h)


def test_sigma_excludes_self_and_duplicates_clamp():
    pts = np.array([[0, 0, 0], [0, 0, 0], [1, 0, 0], [3, 0, 0]], float)
    sig = neighbor_distance(build_index(pts), 1)
    assert sig[0] == MIN_SIGMA and sig[1] == MIN_SIGMA
    assert sig[2] == 1.0 and sig[3] == 2.0


def test_sample_queries_invariants_and_determinism():
    cloud = SyntheticShape("sphere").cloud(500, seed=0)
    idx = build_index(cloud.points)
    a = sample_queries(cloud, idx, 300, 8, rng_seed=42)
    b = sample_queries(cloud, idx, 300, 8, rng_seed=42)
    assert len(a.queries) == len(a.sigmas) == len(a.source_indices) == 300
    assert np.array_equal(a.queries, b.queries) and np.array_equal(a.source_indices, b.source_indices)
    assert len(np.unique(a.source_indices)) == 300
    ref = neighbor_distance(idx, 8)
    assert np.array_equal(a.sigmas, ref[a.source_indices])
    c = sample_queries(cloud, idx, 300, 8, rng_seed=42, step=1)
    assert not np.array_equal(a.queries, c.queries)


def test_sample_queries_with_replacement_when_count_exceeds_n():
    cloud = SyntheticShape("sphere").cloud(50, seed=0)
    batch = sample_queries(cloud, build_index(cloud.points), 200, 4, rng_seed=0)
    assert len(batch) == 200 and batch.source_indices.max() < 50


@pytest.mark.parametrize("xi", [0, 50, 60])
def test_invalid_xi(xi):
    cloud = SyntheticShape("sphere").cloud(50, seed=0)
    with pytest.raises(InvalidXi):
        sample_queries(cloud, build_index(cloud.points), 10, xi, rng_seed=0)


def test_query_offsets_monte_carlo_std():
    cloud = SyntheticShape("sphere").cloud(10000, seed=0)
    idx = build_index(cloud.points)
    sig = neighbor_distance(idx, 8)
    ratios = []
    for seed in range(100):
        b = sample_queries(cloud, idx, 5000, 8, rng_seed=seed, sigmas=sig)
        z = (b.queries - cloud.points[b.source_indices]) / b.sigmas[:, None]
        ratios.append(z.std(axis=0))
    per_axis = np.mean(ratios, axis=0)
    assert np.all(np.abs(per_axis - 1) < 0.1)


def test_query_distance_follows_scaled_chi3():
    cloud = SyntheticShape("sphere").cloud(10000, seed=0)
    idx = build_index(cloud.points)
    b = sample_queries(cloud, idx, 10000, 8, rng_seed=7)
    r = np.linalg.norm(b.queries - cloud.points[b.source_indices], axis=1) / b.sigmas
    ks = stats.kstest(r, stats.chi(3).cdf)
    assert ks.statistic < 0.05


# -- local offsets ------------------------------------------------------------

def test_local_offset_self_centroid():
    pts = np.array([[0, 0, 0], [5, 5, 5], [9, 0, 0]], float)
    assert np.allclose(local_offset(pts[1], build_index(pts), 1), 0)


def test_local_offset_two_neighbors():
    pts = np.array([[1, 0, 0], [-1, 0, 0]], float)
    assert np.allclose(local_offset([0, 0, 1], build_index(pts), 2), [0, 0, 1])


def test_local_offset_noisy_plane():
    zs, xs = [], []
    for seed in range(20):
        gen = np.random.default_rng(seed)
        pts = np.column_stack([gen.uniform(-1, 1, (500, 2)), gen.normal(0, 0.01, 500)])
        off = local_offset([0, 0, 0.3], build_index(pts), 8)
        zs.append(off[2])
        xs.append(np.abs(off[:2]).max())
    assert abs(np.mean(zs) - 0.3) < 0.05 and np.mean(xs) < 0.05


def test_multiscale_offsets_match_single_scale():
    gen = np.random.default_rng(3)
    pts, q = gen.random((300, 3)), gen.random((40, 3))
    idx = build_index(pts)
    stacked = multiscale_offsets(q, idx, (1, 4, 8))
    for s, k in enumerate((1, 4, 8)):
        assert np.allclose(stacked[s], local_offset(q, idx, k), atol=1e-14)
