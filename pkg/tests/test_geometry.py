"""Geometry contracts, each checked against an independent oracle."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from mantis_lab.errors import ArgumentError, ValidationError
from mantis_lab.geometry import (KeyPoints, PointCloud, SeedRule,
                                 farthest_point_sample, knn_patches,
                                 load_pointcloud, normalize, save_pointcloud)


def _sqdist(p, q):
    # scalar arithmetic in the same ((x+y)+z) order as the numpy reduce,
    # so tie comparisons agree bitwise with the implementation
    return ((p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2) + (p[2] - q[2]) ** 2


def greedy_fps_oracle(pts: np.ndarray, n: int) -> list[int]:
    """Straight-line max-min selection, O(n*M) per step, lowest-index ties."""
    centroid = pts.mean(axis=0)
    d0 = [_sqdist(p, centroid) for p in pts]
    first = max(range(len(pts)), key=lambda i: (d0[i], -i))
    chosen = [first]
    for _ in range(n - 1):
        best, best_d = None, -1.0
        for i in range(len(pts)):
            if i in chosen:
                continue
            di = min(_sqdist(pts[i], pts[j]) for j in chosen)
            if di > best_d:
                best, best_d = i, di
        chosen.append(best)
    return chosen


def full_sort_knn_oracle(pts, center, k):
    keyed = sorted(range(len(pts)),
                   key=lambda i: (float(np.sum((pts[i] - center) ** 2)), i))
    return keyed[:k]


def test_normalize_symmetric_pair():
    cloud = normalize(PointCloud([[2, 0, 0], [0, 0, 0]]))
    assert_allclose(cloud.points, [[1, 0, 0], [-1, 0, 0]], atol=1e-15)


def test_normalize_single_point_maps_to_origin():
    cloud = normalize(PointCloud([[5, 5, 5]]))
    assert_allclose(cloud.points, [[0, 0, 0]])


def test_normalize_random_cloud_centroid_and_radius():
    rng = np.random.default_rng(0)
    cloud = normalize(PointCloud(rng.normal(size=(64, 3)) * 3 + 1))
    assert np.linalg.norm(cloud.points.mean(axis=0)) < 1e-9
    assert abs(np.linalg.norm(cloud.points, axis=1).max() - 1.0) < 1e-9


def test_nonfinite_coordinates_rejected():
    with pytest.raises(ValidationError):
        PointCloud([[0, 0, np.inf]])


def test_fps_exhaustive_selection_is_greedy_order():
    rng = np.random.default_rng(1)
    pts = rng.normal(size=(10, 3))
    kp = farthest_point_sample(PointCloud(pts), 10)
    assert sorted(kp.indices.tolist()) == list(range(10))
    assert kp.indices.tolist() == greedy_fps_oracle(pts, 10)


def test_fps_unit_cube_diagonal():
    corners = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)],
                       dtype=float)
    kp = farthest_point_sample(PointCloud(corners), 2,
                               seed_rule=SeedRule.FIRST_INDEX)
    assert kp.indices[0] == 0
    assert_allclose(kp.coords[1], [1, 1, 1])


def test_fps_matches_bruteforce_on_100_random_clouds():
    rng = np.random.default_rng(2)
    for _ in range(100):
        m = int(rng.integers(2, 65))
        n = int(rng.integers(1, m + 1))
        pts = rng.normal(size=(m, 3))
        got = farthest_point_sample(PointCloud(pts), n).indices.tolist()
        assert got == greedy_fps_oracle(pts, n)


def test_fps_argument_error():
    with pytest.raises(ArgumentError):
        farthest_point_sample(PointCloud(np.zeros((3, 3))), 4)


def test_fps_rotation_invariant_index_set():
    rng = np.random.default_rng(3)
    pts = rng.normal(size=(40, 3))
    theta = 0.7
    rot = np.array([[np.cos(theta), -np.sin(theta), 0],
                    [np.sin(theta), np.cos(theta), 0],
                    [0, 0, 1.0]])
    a = farthest_point_sample(PointCloud(pts), 12).indices.tolist()
    b = farthest_point_sample(PointCloud(pts @ rot.T), 12).indices.tolist()
    assert a == b


def test_knn_k1_is_center_itself():
    rng = np.random.default_rng(4)
    pts = rng.normal(size=(20, 3))
    centers = farthest_point_sample(PointCloud(pts), 5)
    patches = knn_patches(PointCloud(pts), centers, 1)
    assert_allclose(patches.neighborhoods, 0.0, atol=1e-15)


def test_knn_tie_break_lowest_index():
    pts = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]], dtype=float)
    centers = KeyPoints([1], [[1.0, 0.0, 0.0]])
    patches = knn_patches(PointCloud(pts), centers, 2)
    # distance ties between index 0 and 2; index 0 wins
    assert_allclose(patches.neighborhoods[0],
                    [[0.0, 0.0, 0.0], [-1.0, 0.0, 0.0]])


def test_knn_matches_full_sort_oracle():
    rng = np.random.default_rng(5)
    pts = rng.normal(size=(64, 3))
    cloud = PointCloud(pts)
    centers = farthest_point_sample(cloud, 8)
    patches = knn_patches(cloud, centers, 8)
    for ci, center in enumerate(centers.coords):
        want = pts[full_sort_knn_oracle(pts, center, 8)] - center
        assert_allclose(patches.neighborhoods[ci], want)


def test_knn_argument_error():
    cloud = PointCloud(np.zeros((3, 3)))
    with pytest.raises(ArgumentError):
        knn_patches(cloud, KeyPoints([0], [[0.0, 0.0, 0.0]]), 4)


def test_knn_translation_leaves_neighborhoods_unchanged():
    rng = np.random.default_rng(6)
    pts = rng.normal(size=(30, 3))
    shift = np.array([2.0, -1.0, 0.5])
    c1 = farthest_point_sample(PointCloud(pts), 6)
    c2 = farthest_point_sample(PointCloud(pts + shift), 6)
    assert c1.indices.tolist() == c2.indices.tolist()
    p1 = knn_patches(PointCloud(pts), c1, 5)
    p2 = knn_patches(PointCloud(pts + shift), c2, 5)
    assert_allclose(p1.neighborhoods, p2.neighborhoods, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 24), st.integers(0, 2 ** 31 - 1))
def test_fps_oracle_property(m, seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(m, 3))
    n = int(rng.integers(1, m + 1))
    got = farthest_point_sample(PointCloud(pts), n).indices.tolist()
    assert got == greedy_fps_oracle(pts, n)


def test_pointcloud_text_roundtrip(tmp_path):
    rng = np.random.default_rng(7)
    cloud = PointCloud(rng.normal(size=(12, 3)), label=5)
    path = tmp_path / "cloud.txt"
    save_pointcloud(cloud, path)
    back = load_pointcloud(path)
    assert back.label == 5
    assert_allclose(back.points, cloud.points)
    unlabeled = PointCloud(rng.normal(size=(4, 3)))
    save_pointcloud(unlabeled, path)
    assert load_pointcloud(path).label is None
