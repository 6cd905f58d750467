import hashlib

import numpy as np
import pytest

from lungdeform.mesh import mesh_volume
from lungdeform.metrics import volume_change_ratio
from lungdeform.synthetic import (
    DeflationMap,
    DeflationParams,
    apply_deflation,
    default_hilum,
    generate_lung_like_mesh,
    hilum_axis_distance,
    make_case,
    make_dataset,
    with_params,
)


def winding_number(mesh, p):
    """Generalised winding number of a closed surface around ``p``."""
    a, b, c = (mesh.vertices[mesh.triangles[:, k]] - p for k in range(3))
    la, lb, lc = (np.linalg.norm(x, axis=1) for x in (a, b, c))
    num = np.einsum("ij,ij->i", a, np.cross(b, c))
    den = la * lb * lc + np.einsum("ij,ij->i", a, b) * lc + np.einsum("ij,ij->i", b, c) * la + np.einsum("ij,ij->i", c, a) * lb
    return 2 * np.arctan2(num, den).sum() / (4 * np.pi)


def digest(a):
    return hashlib.sha256(np.ascontiguousarray(a).tobytes()).hexdigest()


class TestGenerator:
    def test_deterministic(self):
        a, b = generate_lung_like_mesh(5), generate_lung_like_mesh(5)
        assert np.array_equal(a.vertices, b.vertices) and np.array_equal(a.triangles, b.triangles)

    @pytest.mark.parametrize("seed", range(10))
    def test_budget_and_volume(self, seed):
        m = generate_lung_like_mesh(seed, 500)
        assert 450 <= m.n_vertices <= 550
        assert m.is_closed()
        assert 5e5 <= mesh_volume(m) <= 2e6

    def test_small_budget(self):
        assert generate_lung_like_mesh(0, 100).n_vertices >= 90
        with pytest.raises(ValueError):
            generate_lung_like_mesh(0, 99)


class TestDeflation:
    def test_identity(self, case500):
        c = with_params(case500, contraction_ratio=1.0, rotation_deg=0.0, sag_mm=0.0)
        assert np.all(c.truth_field == 0.0)
        assert np.array_equal(c.deflated.vertices, c.inflated.vertices)
        assert np.array_equal(c.interior_deflated, c.interior.points)

    def test_contraction_ratio(self, case500):
        c = with_params(case500, contraction_ratio=0.33, rotation_deg=0.0, sag_mm=0.0)
        assert volume_change_ratio(c.inflated, c.deflated) == pytest.approx(0.33, abs=0.01)

    @pytest.mark.parametrize("ratio", [0.3, 0.45, 0.6, 0.9])
    def test_ratio_within_one_percent(self, case500, ratio):
        c = with_params(case500, contraction_ratio=ratio, rotation_deg=0.0, sag_mm=0.0)
        assert abs(volume_change_ratio(c.inflated, c.deflated) - ratio) <= 0.01 * ratio

    def test_rotation_preserves_axis_distance(self, case500):
        c = with_params(case500, contraction_ratio=1.0, rotation_deg=20.0, sag_mm=0.0)
        h = c.params.hilum_point
        np.testing.assert_allclose(hilum_axis_distance(c.deflated.vertices, h),
                                   hilum_axis_distance(c.inflated.vertices, h), rtol=0, atol=1e-9)
        assert np.abs(c.truth_field).max() > 1.0

    def test_deflated_is_inflated_plus_field(self, dataset12):
        for c in dataset12:
            assert np.array_equal(c.deflated.vertices, c.inflated.vertices + c.truth_field)
            assert np.array_equal(c.deflated.triangles, c.inflated.triangles)

    def test_clip_map_matches_field(self, dataset12):
        for c in dataset12:
            dmap = DeflationMap(c.params, c.extras["rho_max"])
            src = np.array([k.source_pos for k in c.clips])
            tgt = np.array([k.target_pos for k in c.clips])
            assert np.array_equal(dmap(src), tgt)
            transported = np.array([k.transported(c.deflated.vertices, c.deflated.triangles) for k in c.clips])
            np.testing.assert_allclose(transported, tgt, atol=1e-9)

    def test_two_clips_far_apart(self, dataset12):
        for c in dataset12:
            assert len(c.clips) == 2
            assert np.linalg.norm(c.clips[0].source_pos - c.clips[1].source_pos) >= 0.25 * c.inflated.diameter()

    def test_interior_inside(self, dataset12):
        for c in dataset12[:4]:
            for p in c.interior.points:
                assert winding_number(c.inflated, p) == pytest.approx(1.0, abs=1e-6)
            for p in c.interior_deflated:
                assert winding_number(c.deflated, p) == pytest.approx(1.0, abs=1e-6)

    def test_errors(self, case500):
        with pytest.raises(ValueError):
            with_params(case500, contraction_ratio=0.0)
        with pytest.raises(ValueError):
            apply_deflation(case500.inflated, DeflationParams(0.5, 0, 0, (1e4, 0, 0)))

    def test_hilum_inside_box(self):
        m = generate_lung_like_mesh(3)
        h = default_hilum(m)
        assert np.all(h > m.vertices.min(axis=0)) and np.all(h < m.vertices.max(axis=0))


class TestDataset:
    def test_twelve_distinct(self, dataset12):
        assert len(dataset12) == 12
        assert len({digest(c.inflated.vertices) for c in dataset12}) == 12
        assert len({c.case_id for c in dataset12}) == 12

    def test_params_in_ranges(self, dataset12):
        for c in dataset12:
            assert 0.3 <= c.params.contraction_ratio <= 0.6
            assert 5.0 <= c.params.rotation_deg <= 25.0
            assert 2.0 <= c.params.sag_mm <= 10.0

    def test_bitwise_reproducible(self, dataset12):
        again = make_dataset(12, 0)
        for a, b in zip(dataset12, again):
            assert digest(a.inflated.vertices) == digest(b.inflated.vertices)
            assert digest(a.truth_field) == digest(b.truth_field)
            assert a.params == b.params

    def test_other_seed_differs(self, dataset12):
        other = make_dataset(3, 1)
        ours = {digest(c.inflated.vertices) for c in dataset12}
        assert not ours & {digest(c.inflated.vertices) for c in other}

    def test_empty_range(self):
        with pytest.raises(ValueError):
            make_dataset(2, 0, {"rotation_deg": (10.0, 5.0)})

    def test_fixed_range(self):
        cases = make_dataset(2, 0, {"rotation_deg": (10.0, 10.0)}, vertex_budget=100)
        assert all(c.params.rotation_deg == 10.0 for c in cases)

    def test_make_case_deterministic(self):
        a, b = make_case(3, 100), make_case(3, 100)
        assert np.array_equal(a.truth_field, b.truth_field)
