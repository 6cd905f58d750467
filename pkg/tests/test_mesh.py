import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lungdeform.mesh import (
    InvertedOrientationWarning,
    MeshError,
    SurfaceMesh,
    apply_displacement,
    closest_point_on_surface,
    closest_points_brute_force,
    closest_points_on_surface,
    discrete_laplacian,
    geodesic_sphere,
    icosphere,
    mesh_volume,
    unit_cube,
)

from conftest import flat_grid, perturbed, random_rotation, unit_square


def dense_samples(mesh, n=200):
    """Points on every triangle on a barycentric lattice (edges included)."""
    out = []
    for tri in mesh.vertices[mesh.triangles]:
        for i in range(n + 1):
            for j in range(n + 1 - i):
                out.append((i * tri[1] + j * tri[2] + (n - i - j) * tri[0]) / n)
    return np.array(out)


class TestClosestPoint:
    def test_point_above_plane(self):
        q, d = closest_point_on_surface([0, 0, 1], unit_square())
        np.testing.assert_allclose(q, [0, 0, 0], atol=1e-15)
        assert d == 1.0

    def test_point_on_vertex(self):
        m = unit_square()
        q, d = closest_point_on_surface(m.vertices[2], m)
        np.testing.assert_array_equal(q, m.vertices[2])
        assert d == 0.0

    def test_point_beside_edge_matches_dense_sampling(self):
        m = unit_square()
        p = np.array([2.0, 0.5, 0.0])
        samples = dense_samples(m)
        ds = np.linalg.norm(samples - p, axis=1)
        oracle = samples[np.argmin(ds)]
        np.testing.assert_allclose(oracle, [1.0, 0.5, 0.0], atol=1e-12)
        q, d = closest_point_on_surface(p, m)
        np.testing.assert_allclose(q, [1.0, 0.5, 0.0], atol=1e-12)
        assert d == pytest.approx(1.0, abs=1e-12)
        assert d <= ds.min() + 1e-12

    def test_empty_surface(self):
        empty = SurfaceMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=int))
        with pytest.raises(MeshError, match="empty surface"):
            closest_point_on_surface([0, 0, 0], empty)

    @pytest.mark.parametrize("scale", [0.5, 5.0, 40.0])
    def test_index_equals_brute_force_exactly(self, case500, scale):
        rng = np.random.default_rng(int(scale * 10))
        m = case500.inflated
        pts = m.vertices[rng.choice(m.n_vertices, 300)] + rng.normal(scale=scale, size=(300, 3))
        fast = closest_points_on_surface(pts, m)
        slow = closest_points_brute_force(pts, m)
        np.testing.assert_array_equal(fast.distances, slow.distances)
        np.testing.assert_array_equal(fast.triangles, slow.triangles)
        np.testing.assert_array_equal(fast.points, slow.points)

    def test_barycentric_reconstructs_point(self, case500):
        rng = np.random.default_rng(3)
        m = case500.inflated
        pts = rng.normal(scale=60, size=(100, 3))
        res = closest_points_on_surface(pts, m)
        corners = m.vertices[m.triangles[res.triangles]]
        np.testing.assert_allclose(np.einsum("nk,nkd->nd", res.barycentric, corners), res.points, atol=1e-10)
        assert np.all(res.barycentric >= -1e-12)
        np.testing.assert_allclose(res.barycentric.sum(axis=1), 1.0, atol=1e-12)

    def test_distance_is_global_minimum_over_dense_samples(self):
        m = geodesic_sphere(2, 1.0)
        samples = dense_samples(m, 20)
        rng = np.random.default_rng(0)
        for p in rng.normal(scale=1.2, size=(10, 3)):
            _, d = closest_point_on_surface(p, m)
            assert d <= np.linalg.norm(samples - p, axis=1).min() + 1e-12


class TestLaplacian:
    def test_flat_grid_interior_is_zero(self):
        g = flat_grid(5)
        delta = discrete_laplacian(g)
        interior = [i for i in range(25) if 0 < i % 5 < 4 and 0 < i // 5 < 4]
        np.testing.assert_allclose(delta[interior], 0.0, atol=1e-15)

    def test_pyramid_apex(self):
        h = 1.7
        v = [[1, 0, 0], [0, 1, 0], [-1, 0, 0], [0, -1, 0], [0, 0, h]]
        t = [[0, 1, 4], [1, 2, 4], [2, 3, 4], [3, 0, 4], [0, 2, 1], [0, 3, 2]]
        delta = discrete_laplacian(SurfaceMesh(v, t))
        np.testing.assert_allclose(delta[4], [0, 0, h], atol=1e-15)

    def test_isolated_vertex(self):
        m = SurfaceMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0], [5, 5, 5]], [[0, 1, 2]])
        with pytest.raises(MeshError, match="isolated vertex"):
            discrete_laplacian(m)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_translation_invariant_rotation_equivariant(self, seed):
        rng = np.random.default_rng(seed)
        m = perturbed(icosphere(2), rng, 0.05)
        R = random_rotation(rng)
        t = rng.normal(scale=100, size=3)
        d0 = discrete_laplacian(m)
        np.testing.assert_allclose(discrete_laplacian(m.transformed(np.eye(3), t)), d0, atol=1e-10)
        np.testing.assert_allclose(discrete_laplacian(m.transformed(R)), d0 @ R.T, atol=1e-10)


class TestVolume:
    def test_unit_cube(self):
        assert mesh_volume(unit_cube()) == 1.0

    def test_scaled_cube(self):
        c = unit_cube()
        assert mesh_volume(c.with_vertices(2 * c.vertices)) == 8.0

    def test_icosphere_close_to_ball(self):
        vol = mesh_volume(icosphere(3))
        exact = 4.0 * math.pi / 3.0
        assert abs(vol - exact) / exact < 0.02
        assert vol < exact  # inscribed polyhedron

    def test_open_mesh(self):
        with pytest.raises(MeshError, match="mesh not closed"):
            mesh_volume(unit_square())

    def test_inverted_orientation_warns(self):
        c = unit_cube()
        flipped = SurfaceMesh(c.vertices, c.triangles[:, ::-1])
        with pytest.warns(InvertedOrientationWarning):
            assert mesh_volume(flipped) == 1.0

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_rigid_invariance(self, seed):
        rng = np.random.default_rng(seed)
        m = perturbed(icosphere(2, 50.0), rng, 1.0)
        moved = m.transformed(random_rotation(rng), rng.normal(scale=200, size=3))
        v0, v1 = mesh_volume(m), mesh_volume(moved)
        assert abs(v1 - v0) <= 1e-9 * v0


class TestDisplacement:
    def test_zero_field(self, case500):
        m = case500.inflated
        out = apply_displacement(m, np.zeros_like(m.vertices))
        np.testing.assert_array_equal(out.vertices, m.vertices)
        np.testing.assert_array_equal(out.triangles, m.triangles)

    def test_constant_field_keeps_volume(self, case500):
        m = case500.inflated
        out = apply_displacement(m, np.tile([3.0, -2.0, 7.5], (m.n_vertices, 1)))
        np.testing.assert_allclose(out.vertices, m.vertices + [3.0, -2.0, 7.5])
        assert mesh_volume(out) == pytest.approx(mesh_volume(m), rel=1e-12)

    def test_generator_field_reproduces_deflated(self, case500):
        out = apply_displacement(case500.inflated, case500.truth_field)
        np.testing.assert_allclose(out.vertices, case500.deflated.vertices, rtol=0, atol=1e-12)

    def test_length_mismatch(self, case500):
        with pytest.raises(MeshError):
            apply_displacement(case500.inflated, np.zeros((3, 3)))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_apply_then_subtract_is_bitwise_identity(self, seed):
        rng = np.random.default_rng(seed)
        # dyadic coordinates and offsets add and subtract without rounding
        s = icosphere(1, 10.0)
        m = s.with_vertices(np.round(s.vertices * 1024) / 1024)
        d = rng.integers(-64, 64, size=m.vertices.shape) / 8.0
        back = apply_displacement(apply_displacement(m, d), -d)
        np.testing.assert_array_equal(back.vertices, m.vertices)


class TestValidation:
    def test_index_out_of_range(self):
        with pytest.raises(MeshError, match="out of range"):
            SurfaceMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 3]])

    def test_repeated_index(self):
        with pytest.raises(MeshError, match="degenerate"):
            SurfaceMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 1]])

    def test_zero_area(self):
        with pytest.raises(MeshError, match="degenerate"):
            SurfaceMesh([[0, 0, 0], [1, 0, 0], [2, 0, 0]], [[0, 1, 2]])

    def test_non_finite(self):
        with pytest.raises(MeshError, match="non-finite"):
            SurfaceMesh([[0, 0, 0], [1, np.nan, 0], [0, 1, 0]], [[0, 1, 2]])

    def test_registrable_needs_four_vertices(self):
        unit_square().check_registrable()
        with pytest.raises(MeshError):
            SurfaceMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]]).check_registrable()

    def test_geodesic_counts(self):
        for f in (1, 3, 7):
            s = geodesic_sphere(f)
            assert s.n_vertices == 10 * f * f + 2
            assert s.n_triangles == 20 * f * f
            assert s.is_closed()
            assert mesh_volume(s) > 0
