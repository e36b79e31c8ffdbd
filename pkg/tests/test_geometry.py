import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from depthreid.errors import (
    DegenerateExtentError,
    DegenerateNeighborhoodError,
    EmptySegmentError,
    InsufficientPointsError,
    InvalidIntrinsicsError,
    MissingJointError,
    MissingNormalsError,
    WrongGridKindError,
)
from depthreid.geometry import (
    REQUIRED_JOINTS,
    DepthImage,
    Intrinsics,
    PointCloud,
    RigidMotion,
    SkeletonJoints,
    adjacent_voxel_pairs,
    apply_rigid_motion,
    build_voxel_grid,
    depth_to_pointcloud,
    estimate_normals,
    project_points,
    random_rotation,
    segment_torso_head,
)
from depthreid.synthbench import HEAD, LEFT_ARM, RIGHT_ARM, TORSO

from conftest import unit_rows


def _image(depth, fx=500.0, fy=500.0, cx=100.0, cy=100.0, width=None):
    depth = np.atleast_2d(depth)
    h, w = depth.shape
    return DepthImage(w, h, depth.ravel(), Intrinsics(fx, fy, cx, cy))


# --- back-projection ---------------------------------------------------------

def test_principal_point_maps_to_optical_axis():
    depth = np.zeros((5, 7))
    depth[2, 3] = 1000.0
    cloud = depth_to_pointcloud(_image(depth, cx=3, cy=2))
    np.testing.assert_allclose(cloud.points, [[0.0, 0.0, 1000.0]])


def test_backprojection_hand_value():
    depth = np.zeros((201, 201))
    depth[100, 150] = 2000.0
    cloud = depth_to_pointcloud(_image(depth))
    np.testing.assert_allclose(cloud.points, [[200.0, 0.0, 2000.0]])


def test_y_axis_points_up():
    depth = np.zeros((201, 201))
    depth[50, 100] = 1000.0  # above the principal point in the image
    assert depth_to_pointcloud(_image(depth)).points[0, 1] > 0


def test_all_zero_depth_gives_empty_cloud():
    cloud = depth_to_pointcloud(_image(np.zeros((4, 4))))
    assert len(cloud) == 0 and not cloud.has_normals


@pytest.mark.parametrize("fx,fy", [(0.0, 500.0), (500.0, -1.0)])
def test_invalid_intrinsics(fx, fy):
    with pytest.raises(InvalidIntrinsicsError):
        depth_to_pointcloud(_image(np.ones((2, 2)), fx=fx, fy=fy))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_reprojection_recovers_pixels(seed):
    rng = np.random.default_rng(seed)
    h, w = 12, 17
    depth = rng.uniform(300, 8000, size=(h, w)) * (rng.random((h, w)) > 0.3)
    K = Intrinsics(rng.uniform(200, 800), rng.uniform(200, 800), rng.uniform(0, w), rng.uniform(0, h))
    cloud = depth_to_pointcloud(DepthImage(w, h, depth.ravel(), K))
    v, u = np.nonzero(depth > 0)
    np.testing.assert_allclose(project_points(cloud.points, K), np.column_stack([u, v]), atol=1e-9)


# --- normals -------------------------------------------------------------------

def test_plane_normals_face_sensor(rng):
    pts = np.column_stack([rng.uniform(-500, 500, 300), rng.uniform(-500, 500, 300), np.full(300, 1000.0)])
    for k in (3, 10):
        n = estimate_normals(PointCloud(pts), k).normals
        np.testing.assert_allclose(n, np.tile([0.0, 0.0, -1.0], (300, 1)), atol=1e-6)


def _fibonacci_sphere(n):
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = np.pi * (1 + 5**0.5) * i
    return np.column_stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)])


def test_sphere_normals_within_two_degrees():
    centre, r = np.array([0.0, 0.0, 2000.0]), 300.0
    d = _fibonacci_sphere(4000)
    pts = centre + r * d
    n = estimate_normals(PointCloud(pts), 10).normals
    # compared up to sign: on the silhouette the radial direction is orthogonal
    # to the line of sight, so "toward the sensor" does not fix its sign there
    angle = np.degrees(np.arccos(np.clip(np.abs(np.einsum("ij,ij->i", n, d)), 0, 1)))
    assert angle.max() <= 2.0
    assert np.all(np.einsum("ij,ij->i", n, -pts) >= 0)


def test_triangle_normal_is_cross_product():
    tri = np.array([[0.0, 0.0, 1000.0], [100.0, 10.0, 1050.0], [20.0, 120.0, 990.0]])
    n = estimate_normals(PointCloud(tri), 2).normals
    c = np.cross(tri[1] - tri[0], tri[2] - tri[0])
    c /= np.linalg.norm(c)
    c *= np.sign(c @ -tri[0])
    np.testing.assert_allclose(n, np.tile(c, (3, 1)), atol=1e-9)


def test_normals_need_k_plus_one_points():
    with pytest.raises(InsufficientPointsError):
        estimate_normals(PointCloud(np.eye(3) + 1000), 3)


def test_identical_points_are_degenerate():
    with pytest.raises(DegenerateNeighborhoodError):
        estimate_normals(PointCloud(np.tile([1.0, 2.0, 1000.0], (20, 1))), 5)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(3, 12))
def test_normals_unit_and_sensor_facing(seed, k):
    rng = np.random.default_rng(seed)
    pts = rng.normal(scale=200.0, size=(80, 3)) + [0.0, 0.0, 2500.0]
    n = estimate_normals(PointCloud(pts), k).normals
    np.testing.assert_allclose(np.linalg.norm(n, axis=1), 1.0, atol=1e-6)
    assert np.all(np.einsum("ij,ij->i", n, -pts) >= 0)


def test_pointcloud_rejects_non_unit_normals():
    with pytest.raises(ValueError):
        PointCloud(np.zeros((2, 3)), np.ones((2, 3)))


# --- skeleton container ----------------------------------------------------------

def test_skeleton_requires_all_joints():
    joints = {j: [0.0, 0.0, 0.0] for j in REQUIRED_JOINTS[:-1]}
    with pytest.raises(MissingJointError):
        SkeletonJoints(joints)


# --- segmentation ------------------------------------------------------------------

def test_segmentation_drops_arms_keeps_head(body):
    cloud, joints = body
    seg = segment_torso_head(cloud, joints)
    assert not np.isin(seg.labels, [LEFT_ARM, RIGHT_ARM]).any()
    assert np.sum(seg.labels == HEAD) == np.sum(cloud.labels == HEAD)
    assert np.sum(seg.labels == TORSO) > 0


def test_segmentation_below_hips_is_empty(body):
    _, joints = body
    hip = min(joints["left_hip"][1], joints["right_hip"][1])
    pts = np.column_stack([np.zeros(10), np.linspace(hip - 500, hip - 1, 10), np.full(10, 2000.0)])
    with pytest.raises(EmptySegmentError):
        segment_torso_head(PointCloud(pts), joints)


def test_segmentation_keeps_pure_torso(body):
    _, joints = body
    hip = min(joints["left_hip"][1], joints["right_hip"][1])
    lo, hi = sorted([joints["left_shoulder"][0], joints["right_shoulder"][0]])
    rng = np.random.default_rng(0)
    pts = np.column_stack([rng.uniform(lo, hi, 50), rng.uniform(hip, joints["neck"][1] - 1, 50), np.full(50, 2000.0)])
    seg = segment_torso_head(PointCloud(pts), joints)
    np.testing.assert_array_equal(seg.points, pts)


# --- voxel grids ---------------------------------------------------------------------

def _grid_cloud(nx=20, ny=60):
    x, y = np.meshgrid(np.arange(nx) + 0.5, np.arange(ny) + 0.5)
    return PointCloud(np.column_stack([x.ravel(), y.ravel(), np.full(x.size, 2000.0)]))


def test_cell_counts():
    cloud = _grid_cloud()
    assert len(build_voxel_grid(cloud, 6, 2, overlapped=False)) == 12
    assert len(build_voxel_grid(cloud, 6, 2, overlapped=True)) == 33


def test_uniform_grid_matches_brute_force_assignment():
    cloud = _grid_cloud()
    grid = build_voxel_grid(cloud, 6, 2)
    x_min, x_max, y_min, y_max = grid.bbox
    expected = [[] for _ in range(12)]
    for i, (x, y, _) in enumerate(cloud.points):
        r = min(int(math.floor((y_max - y) / (y_max - y_min) * 6)), 5)
        c = min(int(math.floor((x - x_min) / (x_max - x_min) * 2)), 1)
        expected[r * 2 + c].append(i)
    for cell, exp in zip(grid.cells, expected):
        assert sorted(cell.tolist()) == exp
    counts = [len(c) for c in grid.cells]
    assert max(counts) - min(counts) <= 2 * 20


def test_degenerate_extent():
    with pytest.raises(DegenerateExtentError):
        build_voxel_grid(PointCloud(np.tile([5.0, 5.0, 2000.0], (10, 1))), 6, 2)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 7), st.integers(1, 4))
def test_grid_partition_and_overlap_multiplicity(seed, rows, cols):
    rng = np.random.default_rng(seed)
    cloud = PointCloud(rng.normal(size=(200, 3)) * [150, 400, 50] + [0, 0, 2000])
    flat = build_voxel_grid(cloud, rows, cols, overlapped=False)
    members = np.concatenate(flat.cells)
    assert sorted(members.tolist()) == list(range(200))
    over = build_voxel_grid(cloud, rows, cols, overlapped=True)
    assert len(over) == (2 * rows - 1) * (2 * cols - 1)
    mult = np.bincount(np.concatenate(over.cells), minlength=200)
    assert mult.min() >= 1 and mult.max() <= 4


@pytest.mark.parametrize("rows,cols,n", [(6, 2, 26), (1, 1, 0), (2, 2, 6)])
def test_adjacent_pairs(rows, cols, n):
    grid = build_voxel_grid(_grid_cloud(), rows, cols)
    pairs = adjacent_voxel_pairs(grid)
    assert len(pairs) == n == len(set(pairs))
    for a, b in pairs:
        (ra, ca), (rb, cb) = divmod(a, cols), divmod(b, cols)
        assert a < b and max(abs(ra - rb), abs(ca - cb)) == 1


def test_adjacency_rejects_overlapped_grid():
    with pytest.raises(WrongGridKindError):
        adjacent_voxel_pairs(build_voxel_grid(_grid_cloud(), 6, 2, overlapped=True))


# --- rigid motion ------------------------------------------------------------------------

def test_identity_motion_is_exact(rng):
    cloud = PointCloud(rng.normal(size=(30, 3)), unit_rows(rng.normal(size=(30, 3))))
    out = apply_rigid_motion(cloud, RigidMotion.identity())
    np.testing.assert_array_equal(out.points, cloud.points)
    np.testing.assert_array_equal(out.normals, cloud.normals)


def test_quarter_turn_about_z():
    Rz = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    out = apply_rigid_motion(PointCloud([[1.0, 0.0, 0.0]], [[1.0, 0.0, 0.0]]), RigidMotion(Rz, Rz))
    np.testing.assert_allclose(out.points, [[0.0, 1.0, 0.0]], atol=1e-15)
    np.testing.assert_allclose(out.normals, [[0.0, 1.0, 0.0]], atol=1e-15)


def test_motion_needs_normals():
    with pytest.raises(MissingNormalsError):
        apply_rigid_motion(PointCloud(np.zeros((3, 3))), RigidMotion.identity())


def test_rigid_motion_rejects_reflection():
    with pytest.raises(ValueError):
        RigidMotion(np.diag([1.0, 1.0, -1.0]), np.eye(3))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_motion_inverse_and_distance_preservation(seed):
    rng = np.random.default_rng(seed)
    cloud = PointCloud(rng.normal(scale=500, size=(25, 3)), unit_rows(rng.normal(size=(25, 3))))
    m = RigidMotion(random_rotation(rng), random_rotation(rng), rng.normal(scale=1000, size=3))
    moved = apply_rigid_motion(cloud, m)
    back = apply_rigid_motion(moved, m.inverse())
    np.testing.assert_allclose(back.points, cloud.points, atol=1e-9)
    np.testing.assert_allclose(back.normals, cloud.normals, atol=1e-9)
    np.testing.assert_allclose(np.linalg.norm(moved.normals, axis=1), 1.0, atol=1e-12)

    def pd(p):
        return np.linalg.norm(p[:, None] - p[None], axis=-1)

    a, b = pd(cloud.points), pd(moved.points)
    assert np.max(np.abs(a - b)) <= 1e-9 * a.max()
