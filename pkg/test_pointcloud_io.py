"""
Testes de leitura/escrita de nuvens, particionamento, cenas sintéticas e perturbações
"""

from pathlib import Path

import numpy as np
import pytest

from errors import ContractError, DegenerateInputError, FormatError, ParseError
from pointcloud_io import (PointCloud, assign_cells, block_inputs, generate_synthetic_scene, load_cloud,
                           load_scene_spec, partition_blocks, perturb_rotate_z, perturb_scale, save_cloud)

SCENES = Path(__file__).parent / "scenes"


def write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def test_load_headerless_xyzl(tmp_path):
    cloud = load_cloud(write(tmp_path, "a.txt", "0 0 0 1\n1 1 1 0\n"))
    assert cloud.n == 2
    np.testing.assert_array_equal(cloud.labels, [1, 0])
    assert cloud.attrs is None


def test_load_with_rgb_header(tmp_path):
    cloud = load_cloud(write(tmp_path, "b.txt", "x y z r g b label\n0.5 0 1 255 0 51 2\n"))
    assert cloud.attrs.shape == (1, 3)
    np.testing.assert_allclose(cloud.attrs[0], [1.0, 0.0, 0.2])
    assert cloud.num_features == 6


def test_malformed_line_reports_line_number(tmp_path):
    path = write(tmp_path, "c.txt", "x y z\n0 0 0\n1 abc 2\n")
    with pytest.raises(ParseError) as info:
        load_cloud(path)
    assert info.value.line_number == 3


def test_inconsistent_columns(tmp_path):
    with pytest.raises(FormatError):
        load_cloud(write(tmp_path, "d.txt", "x y z label\n0 0 0 1\n1 1 1\n"))


def test_binary_round_trip_is_exact(tmp_path, rng):
    xyz = rng.uniform(-5, 5, size=(50, 3)).astype(np.float32).astype(np.float64)
    cloud = PointCloud(xyz=xyz, labels=rng.integers(0, 13, 50))
    path = str(tmp_path / "cloud.bin")
    save_cloud(cloud, path, "binary")
    back = load_cloud(path)
    np.testing.assert_array_equal(back.xyz, cloud.xyz)
    np.testing.assert_array_equal(back.labels, cloud.labels)


def test_ascii_round_trip_keeps_float64(tmp_path, rng):
    cloud = PointCloud(xyz=rng.normal(size=(20, 3)), attrs=rng.uniform(size=(20, 3)), labels=np.arange(20) % 3)
    path = str(tmp_path / "cloud.txt")
    save_cloud(cloud, path)
    back = load_cloud(path)
    np.testing.assert_array_equal(back.xyz, cloud.xyz)
    np.testing.assert_array_equal(back.attrs, cloud.attrs)
    np.testing.assert_array_equal(back.labels, cloud.labels)


def test_bad_binary_magic(tmp_path):
    path = tmp_path / "x.bin"
    path.write_bytes(b"PCLD\x09\x00" + b"\x00" * 8)
    with pytest.raises(FormatError):
        load_cloud(str(path), "binary")


def test_single_cell_without_replacement(rng):
    cloud = PointCloud(xyz=rng.uniform(0.0, 0.99, size=(8192, 3)))
    blocks = partition_blocks(cloud, samples=4096, seed=3)
    assert len(blocks) == 1
    assert len(np.unique(blocks[0].indices)) == 4096


def test_small_cell_samples_with_replacement(rng):
    cloud = PointCloud(xyz=rng.uniform(0.0, 0.9, size=(10, 3)))
    blocks = partition_blocks(cloud, samples=4096)
    assert blocks[0].size == 4096
    assert set(blocks[0].indices) <= set(range(10))


def test_partition_matches_floor_binning(rng):
    xyz = np.column_stack([rng.uniform(0, 2, 500), rng.uniform(0, 1, 500), rng.uniform(0, 3, 500)])
    cloud = PointCloud(xyz=xyz)
    blocks = partition_blocks(cloud, samples=64, seed=1)
    assert len(blocks) == 2
    for block in blocks:
        expected_cell = int(block.origin[0])
        assert np.all(np.floor(xyz[block.indices, 0]) == expected_cell)
    cells = assign_cells(xyz)
    assert cells.shape == (500, 2)
    assert set(map(tuple, cells)) == {(0, 0), (1, 0)}


def test_partition_is_reproducible(rng):
    cloud = PointCloud(xyz=rng.uniform(0, 3, size=(300, 3)))
    first = partition_blocks(cloud, samples=32, seed=7)
    second = partition_blocks(cloud, samples=32, seed=7)
    for a, b in zip(first, second):
        np.testing.assert_array_equal(a.indices, b.indices)


def test_block_inputs_recenter_features():
    cloud = PointCloud(xyz=[[1.5, 2.5, 0.2], [1.25, 2.75, 0.6]], labels=[0, 1])
    block = partition_blocks(cloud, samples=2, seed=0)[0]
    features, xyz, labels = block_inputs(cloud, block)
    np.testing.assert_allclose(features, xyz - np.array([1.0, 2.0, 0.2]))
    np.testing.assert_array_equal(labels, cloud.labels[block.indices])


def test_single_plane_scene():
    cloud = generate_synthetic_scene({"primitives": [
        {"kind": "horizontal_plane", "class": 0, "count": 100, "params": {"z": 0.4}, "jitter": 0.001}
    ]}, seed=5)
    assert cloud.n == 100
    assert np.all(cloud.labels == 0)
    assert np.all(np.abs(cloud.xyz[:, 2] - 0.4) < 0.01)


def test_scene_histogram_matches_budgets():
    cloud = generate_synthetic_scene({"primitives": [
        {"kind": "horizontal_plane", "class": 0, "count": 70},
        {"kind": "box", "class": 2, "count": 30},
    ]})
    np.testing.assert_array_equal(np.bincount(cloud.labels), [70, 0, 30])


def test_two_planes_nearest_plane_oracle():
    cloud = generate_synthetic_scene(load_scene_spec(str(SCENES / "two_planes.json")), seed=0)
    predicted = (np.abs(cloud.xyz[:, 2] - 1.0) < np.abs(cloud.xyz[:, 2])).astype(np.int64)
    assert np.mean(predicted == cloud.labels) == 1.0


def test_zero_budget_is_degenerate():
    with pytest.raises(DegenerateInputError):
        generate_synthetic_scene({"primitives": [{"kind": "sphere_cluster", "class": 1, "count": 0}]})


def test_unknown_primitive_is_format_error():
    with pytest.raises(FormatError):
        generate_synthetic_scene({"primitives": [{"kind": "cone", "class": 0, "count": 3}]})


def test_perturbation_identities(rng):
    cloud = PointCloud(xyz=rng.normal(size=(40, 3)), labels=np.zeros(40))
    np.testing.assert_array_equal(perturb_scale(cloud, 1.0).xyz, cloud.xyz)
    np.testing.assert_array_equal(perturb_rotate_z(cloud, 0.0).xyz, cloud.xyz)
    np.testing.assert_allclose(perturb_rotate_z(cloud, 2 * np.pi).xyz, cloud.xyz, atol=1e-9)
    with pytest.raises(ContractError):
        perturb_scale(cloud, 0.0)


def test_quarter_turn():
    cloud = PointCloud(xyz=[[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]])
    rotated = perturb_rotate_z(cloud, np.pi / 2)
    np.testing.assert_allclose(rotated.xyz[0], [0.0, 1.0, 0.0], atol=1e-12)


def test_perturbations_preserve_distances(rng):
    cloud = PointCloud(xyz=rng.normal(size=(30, 3)))

    def pairwise(xyz):
        return np.linalg.norm(xyz[:, None, :] - xyz[None, :, :], axis=-1)

    np.testing.assert_allclose(pairwise(perturb_rotate_z(cloud, 0.7).xyz), pairwise(cloud.xyz), atol=1e-9)
    np.testing.assert_allclose(pairwise(perturb_scale(cloud, 0.5).xyz), 0.5 * pairwise(cloud.xyz), atol=1e-9)
