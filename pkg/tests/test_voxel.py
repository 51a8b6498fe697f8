import math

import numpy as np
import pytest
from scipy import ndimage

from ev2vox import voxel as vx
from ev2vox.errors import (
    DegenerateExtent,
    EmptyMesh,
    FormatError,
    IndexOutOfRange,
    MalformedLine,
    NonPositiveDistance,
    ResolutionMismatch,
    ResolutionZero,
    ThresholdOutOfRange,
)


def random_prob_grid(rng, r=8):
    return vx.ProbGrid(r, rng.uniform(size=(r, r, r)))


def random_voxel_grid(rng, r=8, density=0.4):
    return vx.VoxelGrid(r, rng.uniform(size=(r, r, r)) < density)


def brute_force_iou(pred_values, gt_occ, t):
    r = gt_occ.shape[0]
    inter = union = 0
    for i in range(r):
        for j in range(r):
            for k in range(r):
                p = pred_values[i, j, k] > t
                g = bool(gt_occ[i, j, k])
                inter += p and g
                union += p or g
    return 1.0 if union == 0 else inter / union


def brute_force_fscore(rec, gt, d):
    if len(rec) == 0 and len(gt) == 0:
        return 1.0
    if len(rec) == 0 or len(gt) == 0:
        return 0.0
    hits = 0
    for p in rec:
        if min(np.linalg.norm(p - q) for q in gt) < d:
            hits += 1
    precision = hits / len(rec)
    hits = 0
    for q in gt:
        if min(np.linalg.norm(q - p) for p in rec) < d:
            hits += 1
    recall = hits / len(gt)
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


class TestParseObj:
    def test_minimal_triangle(self):
        mesh = vx.parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n")
        assert mesh.vertices.shape == (3, 3)
        np.testing.assert_array_equal(mesh.triangles, [[0, 1, 2]])

    def test_quad_fan_triangulation(self):
        mesh = vx.parse_obj(
            "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n"
        )
        np.testing.assert_array_equal(mesh.triangles, [[0, 1, 2], [0, 2, 3]])

    def test_negative_indices(self):
        mesh = vx.parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf -1 -2 -3\n")
        np.testing.assert_array_equal(mesh.triangles, [[2, 1, 0]])

    def test_slash_syntax_and_ignored_lines(self):
        text = (
            "# comment\nmtllib foo.mtl\no thing\n"
            "v 0 0 0\nv 1 0 0\nv 0 1 0\n"
            "vt 0 0\nvn 0 0 1\ns off\n"
            "f 1/1/1 2/1/1 3/1/1\n"
        )
        mesh = vx.parse_obj(text)
        assert len(mesh.triangles) == 1

    def test_non_numeric_vertex(self):
        with pytest.raises(MalformedLine):
            vx.parse_obj("v a b c\n")

    def test_face_index_out_of_range(self):
        with pytest.raises(IndexOutOfRange):
            vx.parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 4\n")

    def test_zero_index_rejected(self):
        with pytest.raises(IndexOutOfRange):
            vx.parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 0 1 2\n")

    def test_no_faces_rejected(self):
        with pytest.raises(EmptyMesh):
            vx.parse_obj("v 0 0 0\nv 1 0 0\n")

    def test_degenerate_faces_skipped(self):
        with pytest.raises(EmptyMesh):
            vx.parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 1 2\n")


class TestNormalizeMesh:
    def test_unit_cube_unchanged(self):
        mesh = vx.unit_cube_mesh()
        out = vx.normalize_mesh(mesh)
        np.testing.assert_allclose(out.vertices, mesh.vertices, atol=0)

    def test_double_cube_halved(self):
        mesh = vx.unit_cube_mesh()
        big = vx.TriMesh(mesh.vertices * 2.0, mesh.triangles)
        out = vx.normalize_mesh(big)
        extent = out.vertices.max(axis=0) - out.vertices.min(axis=0)
        np.testing.assert_allclose(extent, [1, 1, 1], atol=1e-12)

    def test_random_mesh_bbox(self):
        rng = np.random.default_rng(0)
        verts = rng.normal(size=(30, 3)) * [3.0, 1.0, 0.2] + [5, -2, 1]
        tris = rng.integers(0, 30, size=(20, 3))
        tris = tris[np.array([len(set(t)) == 3 for t in tris])]
        out = vx.normalize_mesh(vx.TriMesh(verts, tris))
        lo = out.vertices.min(axis=0)
        hi = out.vertices.max(axis=0)
        assert abs((hi - lo).max() - 1.0) < 1e-9
        np.testing.assert_allclose((lo + hi) / 2, [0.5, 0.5, 0.5], atol=1e-9)
        # aspect ratio preserved
        orig_extent = verts.max(axis=0) - verts.min(axis=0)
        new_extent = hi - lo
        np.testing.assert_allclose(
            new_extent / new_extent.max(), orig_extent / orig_extent.max(), atol=1e-9
        )

    def test_degenerate_rejected(self):
        verts = np.zeros((4, 3))
        tris = np.array([[0, 1, 2]])
        with pytest.raises(DegenerateExtent):
            vx.normalize_mesh(vx.TriMesh(verts, tris))


class TestVoxelize:
    def test_unit_cube_fills_grid(self):
        grid = vx.voxelize(vx.unit_cube_mesh(), 4, fill_interior=True)
        assert grid.count() == 64

    def test_tiny_triangle_single_cell_no_fill(self):
        # entirely inside cell (2, 1, 3) of an 8-grid
        base = np.array([2.5, 1.5, 3.5]) / 8.0
        verts = base + np.array([[0, 0, 0], [0.01, 0, 0], [0, 0.01, 0]])
        mesh = vx.TriMesh(verts, np.array([[0, 1, 2]]))
        grid = vx.voxelize(mesh, 8, fill_interior=False)
        assert grid.count() == 1
        assert grid.occupancy[2, 1, 3]

    def test_sphere_volume_within_tolerance(self):
        grid = vx.voxelize(vx.uv_sphere_mesh(), 32, fill_interior=True)
        analytic = math.pi / 6.0 * 32**3
        assert abs(grid.count() - analytic) / analytic < 0.05

    def test_filled_convex_solid_is_six_connected(self):
        grid = vx.voxelize(vx.uv_sphere_mesh(), 16, fill_interior=True)
        structure = ndimage.generate_binary_structure(3, 1)
        _, parts = ndimage.label(grid.occupancy, structure=structure)
        assert parts == 1
        # and no interior holes: empty space forms a single exterior part
        _, holes = ndimage.label(~grid.occupancy, structure=structure)
        assert holes == 1

    def test_resolution_zero_rejected(self):
        with pytest.raises(ResolutionZero):
            vx.voxelize(vx.unit_cube_mesh(), 0)

    def test_surface_only_sphere_is_hollow(self):
        grid = vx.voxelize(vx.uv_sphere_mesh(), 32, fill_interior=False)
        assert not grid.occupancy[16, 16, 16]
        assert grid.count() > 0


class TestBinarize:
    def test_all_above(self):
        g = vx.ProbGrid(4, np.full((4, 4, 4), 0.9))
        assert vx.binarize(g, 0.3).count() == 64

    def test_strict_inequality_at_threshold(self):
        g = vx.ProbGrid(2, np.full((2, 2, 2), 0.3))
        assert vx.binarize(g, 0.3).count() == 0

    def test_matches_per_cell_loop(self):
        rng = np.random.default_rng(1)
        g = random_prob_grid(rng)
        out = vx.binarize(g, 0.3)
        for i in range(8):
            for j in range(8):
                for k in range(8):
                    assert out.occupancy[i, j, k] == (g.values[i, j, k] > 0.3)

    def test_threshold_domain(self):
        g = vx.ProbGrid(2, np.zeros((2, 2, 2)))
        for t in (0.0, 1.0, -0.5, 1.5):
            with pytest.raises(ThresholdOutOfRange):
                vx.binarize(g, t)


class TestIoU:
    def test_perfect_match(self):
        rng = np.random.default_rng(2)
        gt = random_voxel_grid(rng)
        pred = vx.ProbGrid(8, gt.occupancy.astype(float) * 0.9 + 0.05)
        assert vx.iou(pred, gt, 0.3) == 1.0

    def test_disjoint_single_cells(self):
        gt = vx.VoxelGrid.empty(4)
        gt.occupancy[0, 0, 0] = True
        vals = np.zeros((4, 4, 4))
        vals[3, 3, 3] = 1.0
        assert vx.iou(vx.ProbGrid(4, vals), gt, 0.3) == 0.0

    def test_half_overlap(self):
        gt = vx.VoxelGrid.empty(4)
        gt.occupancy[0, 0, 0] = True
        vals = np.zeros((4, 4, 4))
        vals[0, 0, 0] = 1.0
        vals[1, 0, 0] = 1.0
        assert vx.iou(vx.ProbGrid(4, vals), gt, 0.3) == pytest.approx(0.5)

    def test_empty_vs_empty_is_one(self):
        gt = vx.VoxelGrid.empty(4)
        pred = vx.ProbGrid(4, np.zeros((4, 4, 4)))
        assert vx.iou(pred, gt, 0.3) == 1.0

    def test_empty_vs_nonempty_is_zero(self):
        gt = vx.VoxelGrid.empty(4)
        gt.occupancy[1, 1, 1] = True
        pred = vx.ProbGrid(4, np.zeros((4, 4, 4)))
        assert vx.iou(pred, gt, 0.3) == 0.0

    def test_symmetry_and_self(self):
        rng = np.random.default_rng(3)
        a = random_voxel_grid(rng)
        b = random_voxel_grid(rng)
        assert vx.iou(a, b) == vx.iou(b, a)
        assert vx.iou(a, a) == 1.0

    def test_resolution_mismatch(self):
        with pytest.raises(ResolutionMismatch):
            vx.iou(vx.ProbGrid(4, np.zeros((4, 4, 4))), vx.VoxelGrid.empty(8), 0.3)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            pred = random_prob_grid(rng)
            gt = random_voxel_grid(rng, density=rng.uniform(0, 0.8))
            got = vx.iou(pred, gt, 0.3)
            want = brute_force_iou(pred.values, gt.occupancy, 0.3)
            assert got == pytest.approx(want, abs=1e-12)


class TestVoxelToPoints:
    def test_empty(self):
        assert len(vx.voxel_to_points(vx.VoxelGrid.empty(4)).points) == 0

    def test_single_cell_center(self):
        g = vx.VoxelGrid.empty(32)
        g.occupancy[0, 0, 0] = True
        pts = vx.voxel_to_points(g).points
        np.testing.assert_allclose(pts, [[1 / 64, 1 / 64, 1 / 64]])

    def test_count_matches_popcount(self):
        rng = np.random.default_rng(5)
        g = random_voxel_grid(rng)
        assert len(vx.voxel_to_points(g).points) == g.count()

    def test_points_in_unit_cube(self):
        rng = np.random.default_rng(6)
        g = random_voxel_grid(rng)
        pts = vx.voxel_to_points(g).points
        assert np.all(pts > 0) and np.all(pts < 1)


class TestFScore:
    def test_identical_sets(self):
        rng = np.random.default_rng(7)
        pts = vx.PointSet(rng.uniform(size=(15, 3)))
        assert vx.fscore(pts, pts, 0.2) == 1.0

    def test_hand_computed_pair(self):
        a = vx.PointSet(np.array([[0.1, 0.5, 0.5]]))
        b = vx.PointSet(np.array([[0.4, 0.5, 0.5]]))
        assert vx.fscore(a, b, 0.2) == 0.0
        assert vx.fscore(a, b, 0.4) == 1.0

    def test_strict_inequality(self):
        a = vx.PointSet(np.array([[0.0, 0.0, 0.0]]))
        b = vx.PointSet(np.array([[0.2, 0.0, 0.0]]))
        assert vx.fscore(a, b, 0.2) == 0.0

    def test_empty_conventions(self):
        e = vx.PointSet(np.zeros((0, 3)))
        p = vx.PointSet(np.array([[0.5, 0.5, 0.5]]))
        assert vx.fscore(e, e, 0.2) == 1.0
        assert vx.fscore(e, p, 0.2) == 0.0
        assert vx.fscore(p, e, 0.2) == 0.0

    def test_symmetry(self):
        rng = np.random.default_rng(8)
        a = vx.PointSet(rng.uniform(size=(10, 3)))
        b = vx.PointSet(rng.uniform(size=(17, 3)))
        assert vx.fscore(a, b, 0.2) == pytest.approx(vx.fscore(b, a, 0.2), abs=1e-15)

    def test_monotone_in_distance(self):
        rng = np.random.default_rng(9)
        a = vx.PointSet(rng.uniform(size=(12, 3)))
        b = vx.PointSet(rng.uniform(size=(12, 3)))
        scores = [vx.fscore(a, b, d) for d in (0.05, 0.1, 0.2, 0.4, 0.8)]
        assert all(s1 <= s2 for s1, s2 in zip(scores, scores[1:]))

    def test_non_positive_distance(self):
        p = vx.PointSet(np.zeros((1, 3)))
        with pytest.raises(NonPositiveDistance):
            vx.fscore(p, p, 0.0)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(10)
        for _ in range(20):
            a = vx.PointSet(rng.uniform(size=(rng.integers(0, 25), 3)))
            b = vx.PointSet(rng.uniform(size=(rng.integers(0, 25), 3)))
            got = vx.fscore(a, b, 0.2)
            want = brute_force_fscore(a.points, b.points, 0.2)
            assert got == pytest.approx(want, abs=1e-12)


class TestVox1Format:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(11)
        g = random_voxel_grid(rng, r=9)
        path = tmp_path / "g.vox1"
        vx.write_vox1(g, path)
        r = vx.read_vox1(path)
        assert r.resolution == 9
        np.testing.assert_array_equal(r.occupancy, g.occupancy)

    def test_bit_order_x_fastest(self, tmp_path):
        g = vx.VoxelGrid.empty(4)
        g.occupancy[1, 0, 0] = True  # second bit in x-fastest order
        path = tmp_path / "b.vox1"
        vx.write_vox1(g, path)
        blob = path.read_bytes()
        assert blob[:8] == b"E2VVOX1\x00"
        assert np.frombuffer(blob, "<u2", 1, offset=8)[0] == 4
        assert blob[10] == 0b00000010

    def test_payload_size(self, tmp_path):
        g = vx.VoxelGrid.empty(32)
        path = tmp_path / "s.vox1"
        vx.write_vox1(g, path)
        assert path.stat().st_size == 8 + 2 + 32**3 // 8

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.vox1"
        path.write_bytes(b"XXXXXXXX" + b"\x00" * 10)
        with pytest.raises(FormatError):
            vx.read_vox1(path)

    def test_trailing_bytes_rejected(self, tmp_path):
        g = vx.VoxelGrid.empty(4)
        path = tmp_path / "t.vox1"
        vx.write_vox1(g, path)
        path.write_bytes(path.read_bytes() + b"\x01")
        with pytest.raises(FormatError):
            vx.read_vox1(path)

    def test_write_determinism(self, tmp_path):
        rng = np.random.default_rng(12)
        g = random_voxel_grid(rng, r=16)
        p1, p2 = tmp_path / "1.vox1", tmp_path / "2.vox1"
        vx.write_vox1(g, p1)
        vx.write_vox1(g, p2)
        assert p1.read_bytes() == p2.read_bytes()
