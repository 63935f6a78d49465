import numpy as np
import pytest

from radiofield.errors import InvalidStateError, OutOfBoundsError, ParseError
from radiofield.pointcloud import (
    FRAME_BS,
    PointCloud,
    VoxelSpec,
    density_at,
    density_from_bytes,
    density_lookup,
    density_to_bytes,
    first_obstacle_depth,
    first_obstacle_depth_dda,
    first_obstacle_depths,
    fit_voxel_spec,
    load_point_cloud,
    translate_to_bs,
    voxel_indices,
    voxelize,
)


class TestLoading:
    def test_csv_two_points(self):
        cloud = load_point_cloud("0,0,0\n1,2,3", "xyz-csv")
        assert cloud.size == 2
        assert np.array_equal(cloud.points[1], [1, 2, 3])

    def test_empty_stream(self):
        assert load_point_cloud("", "xyz-csv").size == 0

    def test_nan_row_names_line(self):
        with pytest.raises(ParseError, match="line 1"):
            load_point_cloud("1,2,NaN", "xyz-csv")
        with pytest.raises(ParseError, match="line 3"):
            load_point_cloud("0,0,0\n# c\n1,2,inf", "xyz-csv")

    def test_short_row_rejected(self):
        with pytest.raises(ParseError, match="coordinates"):
            load_point_cloud("1,2", "xyz-csv")

    def test_unknown_format(self):
        with pytest.raises(ValueError, match="format"):
            load_point_cloud("", "laz")

    def test_ascii_ply(self):
        text = (
            "ply\nformat ascii 1.0\nelement vertex 2\n"
            "property float x\nproperty float y\nproperty float z\n"
            "end_header\n0 0 0\n1.5 2 3\n"
        )
        cloud = load_point_cloud(text, "ascii-ply")
        assert cloud.size == 2
        assert np.allclose(cloud.points[1], [1.5, 2, 3])

    def test_truncated_ply(self):
        text = "ply\nformat ascii 1.0\nelement vertex 3\nend_header\n0 0 0\n"
        with pytest.raises(ParseError, match="truncated"):
            load_point_cloud(text, "ascii-ply")

    def test_bytes_input(self):
        cloud = load_point_cloud(b"4,5,6\n", "xyz-csv")
        assert np.array_equal(cloud.points[0], [4, 5, 6])


class TestTranslate:
    def test_bs_at_point(self):
        cloud = PointCloud(np.array([[5.0, 5.0, 5.0]]))
        out = translate_to_bs(cloud, [5.0, 5.0, 5.0])
        assert np.array_equal(out.points, [[0.0, 0.0, 0.0]])
        assert out.frame == FRAME_BS

    def test_origin_identity(self):
        pts = np.array([[1.0, 2.0, 3.0]])
        out = translate_to_bs(PointCloud(pts), [0.0, 0.0, 0.0])
        assert np.array_equal(out.points, pts)

    def test_round_trip_bitwise(self):
        # dyadic coordinates so the pure add/subtract round-trips exactly
        rng = np.random.default_rng(0)
        pts = rng.integers(-10240, 10240, (64, 3)) / 1024.0
        p_bs = np.array([512, -2048, 1536]) / 1024.0
        shifted = translate_to_bs(PointCloud(pts), p_bs).points
        assert np.array_equal(shifted + p_bs, pts)

    def test_double_translate_rejected(self):
        cloud = translate_to_bs(PointCloud(np.zeros((1, 3))), [1.0, 0.0, 0.0])
        with pytest.raises(InvalidStateError):
            translate_to_bs(cloud, [0.0, 0.0, 0.0])


class TestVoxelize:
    def spec(self):
        return VoxelSpec(np.zeros(3), np.full(3, 0.5), (4, 4, 4))

    def test_point_at_mins(self):
        cloud = PointCloud(np.zeros((1, 3)), FRAME_BS)
        grid = voxelize(cloud, self.spec())
        assert grid.rho[0, 0, 0] == 1
        assert grid.total == 1

    def test_interior_face_floor_rule(self):
        # coordinate exactly on an interior boundary goes to the upper voxel
        cloud = PointCloud(np.array([[0.5, 0.2, 0.2]]), FRAME_BS)
        grid = voxelize(cloud, self.spec())
        assert grid.rho[1, 0, 0] == 1

    def test_upper_face_clamped(self):
        cloud = PointCloud(np.array([[2.0, 2.0, 2.0]]), FRAME_BS)
        grid = voxelize(cloud, self.spec())
        assert grid.rho[3, 3, 3] == 1

    def test_conservation_random(self):
        rng = np.random.default_rng(2)
        pts = rng.uniform(0.0, 2.0, (1000, 3))
        grid = voxelize(PointCloud(pts, FRAME_BS), self.spec())
        assert grid.total == 1000

    def test_out_of_bounds_listed(self):
        pts = np.array([[0.1, 0.1, 0.1], [5.0, 0.1, 0.1], [0.1, -3.0, 0.1]])
        with pytest.raises(OutOfBoundsError) as err:
            voxelize(PointCloud(pts, FRAME_BS), self.spec())
        assert err.value.indices == (1, 2)

    def test_world_frame_rejected(self):
        with pytest.raises(InvalidStateError):
            voxelize(PointCloud(np.zeros((1, 3))), self.spec())

    def test_permutation_invariance(self):
        rng = np.random.default_rng(3)
        pts = rng.uniform(0.0, 2.0, (500, 3))
        g1 = voxelize(PointCloud(pts, FRAME_BS), self.spec())
        g2 = voxelize(PointCloud(pts[::-1], FRAME_BS), self.spec())
        assert np.array_equal(g1.rho, g2.rho)

    def test_fit_voxel_spec_covers(self):
        rng = np.random.default_rng(4)
        pts = rng.uniform(-3.0, 7.0, (200, 3))
        spec = fit_voxel_spec(pts, resolution=0.25)
        assert np.all(spec.maxs >= pts.max(axis=0) - 1e-12)
        grid = voxelize(PointCloud(pts, FRAME_BS), spec)
        assert grid.total == 200


class TestDensityQueries:
    def make_grid(self):
        spec = VoxelSpec(np.array([-1.0, -1.0, -1.0]), np.full(3, 0.5), (4, 4, 4))
        cloud = PointCloud(np.array([[0.3, 0.3, 0.3]]), FRAME_BS)
        return voxelize(cloud, spec)

    def test_empty_voxel_reads_zero(self):
        assert density_at(self.make_grid(), [-0.75, -0.75, -0.75]) == 0.0

    def test_occupied_voxel_reads_count(self):
        assert density_at(self.make_grid(), [0.3, 0.3, 0.3]) == 1.0

    def test_piecewise_constant(self):
        g = self.make_grid()
        assert density_at(g, [0.26, 0.4, 0.45]) == density_at(g, [0.3, 0.3, 0.3])

    def test_out_of_domain_flagged(self):
        values, inside = density_lookup(self.make_grid(), np.array([[10.0, 0.0, 0.0]]))
        assert values[0] == 0.0
        assert not inside[0]

    def test_lookup_matches_manual_floor_rule(self):
        rng = np.random.default_rng(5)
        spec = VoxelSpec(np.array([-2.0, 0.0, 1.0]), np.array([0.3, 0.5, 0.7]), (5, 6, 7))
        pts = spec.mins + rng.uniform(0, 1, (400, 3)) * (spec.maxs - spec.mins) * 0.999
        cloud = PointCloud(pts, FRAME_BS)
        grid = voxelize(cloud, spec)
        queries = rng.uniform(0, 1, (10000, 3)) * (spec.maxs - spec.mins) * 0.999 + spec.mins
        values, inside = density_lookup(grid, queries)
        assert inside.all()
        idx = np.floor((queries - spec.mins) / spec.resolutions).astype(int)
        expected = grid.rho[idx[:, 0], idx[:, 1], idx[:, 2]]
        assert np.array_equal(values, expected)


class TestFirstObstacleDepth:
    def make_grid(self, occupied):
        spec = VoxelSpec(np.array([-4.0, -4.0, -4.0]), np.full(3, 0.5), (16, 16, 16))
        rho = np.zeros((16, 16, 16), dtype=np.int64)
        for v in occupied:
            rho[v] = 3
        from radiofield.pointcloud import DensityGrid

        return DensityGrid(spec, rho)

    def test_hit_at_expected_sample(self):
        # voxel [2.0, 2.5) on the +x axis; samples every 0.5 from 0
        grid = self.make_grid([(12, 8, 8)])
        ts = np.arange(0.25, 4.0, 0.5)
        depth = first_obstacle_depth(grid, np.array([1.0, 0.0, 0.0]), ts)
        assert depth == pytest.approx(2.25)

    def test_empty_grid_absent(self):
        grid = self.make_grid([])
        assert first_obstacle_depth(grid, np.array([0.0, 0.0, 1.0]), [0.5, 1.0]) is None

    def test_nearest_of_two(self):
        grid = self.make_grid([(12, 8, 8), (14, 8, 8)])
        ts = np.arange(0.25, 4.0, 0.25)
        depth = first_obstacle_depth(grid, np.array([1.0, 0.0, 0.0]), ts)
        brute = min(
            t for t in ts if density_at(grid, t * np.array([1.0, 0.0, 0.0])) > 0
        )
        assert depth == pytest.approx(brute)

    def test_empty_samples_rejected(self):
        with pytest.raises(ValueError):
            first_obstacle_depth(self.make_grid([]), np.array([1.0, 0, 0]), [])

    def test_monotone_under_densification(self):
        rng = np.random.default_rng(6)
        ts = np.arange(0.1, 4.0, 0.1)
        for _ in range(100):
            base = [(int(a), int(b), int(c)) for a, b, c in rng.integers(0, 16, (3, 3))]
            extra = base + [tuple(int(v) for v in rng.integers(0, 16, 3))]
            d = rng.standard_normal(3)
            d /= np.linalg.norm(d)
            d1 = first_obstacle_depth(self.make_grid(base), d, ts)
            d2 = first_obstacle_depth(self.make_grid(extra), d, ts)
            if d1 is not None:
                assert d2 is not None and d2 <= d1

    def test_vectorized_matches_scalar(self):
        grid = self.make_grid([(12, 8, 8), (8, 12, 8)])
        dirs = np.array([[1.0, 0, 0], [0, 1.0, 0], [0, 0, -1.0]])
        ts = np.arange(0.25, 4.0, 0.5)
        depths = first_obstacle_depths(grid, dirs, ts)
        for k in range(3):
            expected = first_obstacle_depth(grid, dirs[k], ts)
            if expected is None:
                assert np.isnan(depths[k])
            else:
                assert depths[k] == pytest.approx(expected)

    def test_dda_agrees_with_fine_sampling(self):
        grid = self.make_grid([(12, 8, 8), (9, 10, 8)])
        rng = np.random.default_rng(7)
        ts = np.arange(1e-3, 6.0, 1e-3)
        for _ in range(50):
            d = rng.standard_normal(3)
            d /= np.linalg.norm(d)
            exact = first_obstacle_depth_dda(grid, d)
            sampled = first_obstacle_depth(grid, d, ts)
            if exact is None:
                assert sampled is None
            else:
                assert sampled is not None
                assert abs(sampled - exact) < 2e-3


def test_density_serialization_roundtrip():
    spec = VoxelSpec(np.array([-1.0, 0.0, 2.0]), np.array([0.5, 0.5, 1.0]), (3, 4, 2))
    rng = np.random.default_rng(8)
    pts = rng.uniform(0, 1, (64, 3)) * (spec.maxs - spec.mins) * 0.99 + spec.mins
    grid = voxelize(PointCloud(pts, FRAME_BS), spec)
    back = density_from_bytes(density_to_bytes(grid))
    assert np.array_equal(back.rho, grid.rho)
    assert np.allclose(back.spec.mins, spec.mins)
    assert back.spec.dims == spec.dims


def test_voxel_indices_upper_face_only_when_exact():
    spec = VoxelSpec(np.zeros(3), np.ones(3), (2, 2, 2))
    idx = voxel_indices(spec, np.array([[2.0, 2.0, 2.0], [2.0 + 1e-9, 0.5, 0.5]]))
    assert np.array_equal(idx[0], [1, 1, 1])
    assert idx[1, 0] == 2  # beyond the face is genuinely out of bounds
