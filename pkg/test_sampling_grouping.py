"""
Testes das primitivas espaciais contra oráculos de força bruta
"""

from itertools import combinations

import numpy as np
import pytest

import tensor_core as tc
from errors import ContractError
from sampling_grouping import (ball_group, farthest_point_sample, interpolate_features, interpolation_weights,
                               knn)


def knn_oracle(points, queries, k, radius):
    indices, dists = [], []
    for q in queries:
        d2 = ((points - q) ** 2).sum(axis=1)
        ranked = sorted(range(len(points)), key=lambda j: (d2[j], j))
        inside = [j for j in ranked if d2[j] <= radius * radius][:k]
        if not inside:
            inside = ranked[:1]
        inside = inside + [inside[0]] * (k - len(inside))
        indices.append(inside)
        dists.append([d2[j] for j in inside])
    return np.array(indices), np.array(dists)


def fps_oracle(points, count):
    chosen = [0]
    for _ in range(1, count):
        best, best_d = None, -1.0
        for j in range(len(points)):
            if j in chosen:
                continue
            d = min(((points[j] - points[c]) ** 2).sum() for c in chosen)
            if d > best_d:
                best, best_d = j, d
        chosen.append(best)
    return np.array(chosen)


def test_knn_self_case():
    result = knn(np.zeros((1, 3)), np.zeros((1, 3)), 1, 0.06)
    assert result.indices[0, 0] == 0 and result.sq_dists[0, 0] == 0.0


def test_knn_collinear_small_instance():
    points = np.array([[0.0, 0, 0], [0.01, 0, 0], [0.02, 0, 0]])
    result = knn(points, points, 3, 0.06)
    for row in result.indices:
        assert sorted(row) == [0, 1, 2]
    assert np.all(np.diff(result.sq_dists, axis=1) >= 0)


def test_knn_matches_oracle_on_random_instances(rng):
    for trial in range(100):
        n = int(rng.integers(1, 200))
        points = rng.uniform(0, 1, size=(n, 3))
        queries = points[rng.choice(n, size=min(n, 20), replace=False)]
        k = int(rng.integers(1, 6))
        radius = float(rng.choice([0.06, 0.2, 0.5, np.inf]))
        result = knn(points, queries, k, radius)
        expected_idx, expected_d2 = knn_oracle(points, queries, k, radius)
        np.testing.assert_array_equal(result.indices, expected_idx, err_msg=f"tentativa {trial}")
        np.testing.assert_array_equal(result.sq_dists, expected_d2)


def test_knn_voxel_grid_matches_exhaustive(rng):
    points = rng.uniform(0, 1, size=(500, 3))
    grid = knn(points, points, 3, 0.1)
    expected_idx, _ = knn_oracle(points, points, 3, 0.1)
    np.testing.assert_array_equal(grid.indices, expected_idx)


def test_knn_contract():
    with pytest.raises(ContractError):
        knn(np.zeros((2, 3)), np.zeros((1, 3)), 0)


def test_fps_exhaustive_case(rng):
    points = rng.normal(size=(6, 3))
    chosen = farthest_point_sample(points, 6)
    assert sorted(chosen) == list(range(6))
    assert chosen[0] == 0


def test_fps_square_corners():
    points = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0], [0.5, 0.5, 0]], dtype=float)
    assert sorted(farthest_point_sample(points, 4)) == [0, 1, 2, 3]

    def spread(subset):
        return min(np.linalg.norm(points[a] - points[b]) for a, b in combinations(subset, 2))

    best = max(combinations(range(5), 4), key=spread)
    assert sorted(best) == [0, 1, 2, 3]


def test_fps_matches_greedy_oracle(rng):
    for _ in range(100):
        n = int(rng.integers(2, 60))
        points = rng.uniform(size=(n, 3))
        count = int(rng.integers(1, n + 1))
        np.testing.assert_array_equal(farthest_point_sample(points, count), fps_oracle(points, count))


def test_fps_is_permutation_covariant(rng):
    points = rng.uniform(size=(40, 3))
    perm = np.concatenate([[0], 1 + rng.permutation(39)])
    chosen = farthest_point_sample(points, 10)
    permuted = farthest_point_sample(points[perm], 10)
    np.testing.assert_array_equal(perm[permuted], chosen)


def test_fps_too_many_points():
    with pytest.raises(ContractError):
        farthest_point_sample(np.zeros((3, 3)), 4)


def test_ball_group_padding_and_coincident_points():
    isolated = np.array([[0.0, 0, 0], [5.0, 0, 0]])
    group = ball_group(isolated, np.array([1]), 0.5, 4)
    np.testing.assert_array_equal(group.members, [[1, 1, 1, 1]])
    assert group.counts[0] == 1

    coincident = np.zeros((10, 3))
    group = ball_group(coincident, np.array([7]), 0.1, 4)
    np.testing.assert_array_equal(group.members, [[0, 1, 2, 3]])


def test_ball_group_matches_radius_filter_oracle(rng):
    for _ in range(100):
        n = int(rng.integers(1, 200))
        points = rng.uniform(size=(n, 3))
        centroids = rng.choice(n, size=min(n, 8), replace=False)
        radius, size = float(rng.uniform(0.05, 0.5)), int(rng.integers(1, 16))
        result = ball_group(points, centroids, radius, size)
        for row, c in enumerate(centroids):
            d2 = ((points - points[c]) ** 2).sum(axis=1)
            inside = [j for j in range(n) if d2[j] <= radius * radius][:size]
            expected = inside + [c] * (size - len(inside))
            np.testing.assert_array_equal(result.members[row], expected)


def test_ball_group_requires_positive_radius():
    with pytest.raises(ContractError):
        ball_group(np.zeros((2, 3)), np.array([0]), 0.0, 2)


def test_interpolation_examples(rng):
    coarse = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 1]], dtype=float)
    feats = rng.normal(size=(5, 4))
    out = interpolate_features(coarse, feats, coarse[2:3])
    np.testing.assert_allclose(out[0], feats[2], atol=1e-6)

    constant = np.tile([1.5, -2.0], (5, 1))
    np.testing.assert_allclose(interpolate_features(coarse, constant, rng.uniform(size=(9, 3))), np.tile([1.5, -2.0], (9, 1)))

    pair = np.array([[0.0, 0, 0], [1.0, 0, 0]])
    two = np.array([[2.0], [4.0]])
    np.testing.assert_allclose(interpolate_features(pair, two, [[0.5, 0, 0]]), [[3.0]], atol=1e-9)


def test_interpolation_weights_sum_to_one(rng):
    _, weights = interpolation_weights(rng.uniform(size=(12, 3)), rng.uniform(size=(30, 3)))
    np.testing.assert_allclose(weights.sum(axis=1), 1.0, atol=1e-9)


def test_interpolation_tensor_path_matches_array_path(rng):
    coarse, fine = rng.uniform(size=(6, 3)), rng.uniform(size=(10, 3))
    feats = rng.normal(size=(6, 3))
    tensor_out = interpolate_features(coarse, tc.Tensor(feats), fine)
    np.testing.assert_allclose(tensor_out.data, interpolate_features(coarse, feats, fine), atol=1e-12)
