import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lungdeform.mesh import MeshError, SurfaceMesh, icosphere
from lungdeform.metrics import (
    MetricsReport,
    hausdorff_distance,
    mean_distance,
    metrics_report,
    target_registration_error,
    volume_change_ratio,
)

from conftest import perturbed, random_rotation, unit_square


def brute_vertex_to_surface(a, b, samples=60):
    """Distance from each vertex of a to a dense sample of b's triangles."""
    pts = []
    for tri in b.vertices[b.triangles]:
        for i in range(samples + 1):
            for j in range(samples + 1 - i):
                pts.append((i * tri[1] + j * tri[2] + (samples - i - j) * tri[0]) / samples)
    pts = np.array(pts)
    return np.array([np.linalg.norm(pts - v, axis=1).min() for v in a.vertices])


def test_identical_meshes(case500):
    m = case500.inflated
    assert mean_distance(m, m) == 0.0
    assert hausdorff_distance(m, m) == 0.0


def test_parallel_sheets():
    a, b = unit_square(0.0), unit_square(2.0)
    # every vertex projects straight across, confirmed on a dense sample
    np.testing.assert_allclose(brute_vertex_to_surface(a, b), 2.0, atol=1e-12)
    np.testing.assert_allclose(brute_vertex_to_surface(b, a), 2.0, atol=1e-12)
    assert mean_distance(a, b) == pytest.approx(2.0, abs=1e-12)


def test_hausdorff_in_plane_shift():
    a, b = unit_square(), unit_square(shift=(3.0, 0.0))
    oracle = max(brute_vertex_to_surface(a, b).max(), brute_vertex_to_surface(b, a).max())
    assert oracle == pytest.approx(3.0, abs=1e-12)
    assert hausdorff_distance(a, b) == pytest.approx(3.0, abs=1e-12)


def test_empty_mesh():
    empty = SurfaceMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=int))
    with pytest.raises(MeshError):
        mean_distance(empty, unit_square())
    with pytest.raises(MeshError):
        hausdorff_distance(unit_square(), empty)


class TestTRE:
    def test_zero(self):
        p = [[1, 2, 3], [4, 5, 6]]
        assert target_registration_error(p, p) == [0.0, 0.0]

    def test_345(self):
        assert target_registration_error([[3, 4, 0]], [[0, 0, 0]]) == [5.0]

    def test_two(self):
        assert target_registration_error([[1, 0, 0], [0, 0, 2]], [[0, 0, 0], [0, 0, 0]]) == [1.0, 2.0]

    def test_mismatch(self):
        with pytest.raises(ValueError):
            target_registration_error([[0, 0, 0]], [[0, 0, 0], [1, 1, 1]])


class TestVolumeRatio:
    def test_identity(self, case500):
        assert volume_change_ratio(case500.inflated, case500.inflated) == 1.0

    def test_scaled(self, case500):
        m = case500.inflated
        assert volume_change_ratio(m, m.with_vertices(0.7 * m.vertices)) == pytest.approx(0.343, rel=1e-12)

    def test_generator_default_range(self, dataset12):
        # deflated lungs hold less than about a third to two thirds of the inflated volume
        ratios = [volume_change_ratio(c.inflated, c.deflated) for c in dataset12]
        assert min(ratios) >= 0.28 and max(ratios) <= 0.62


def test_random_pairs_symmetric_and_ordered():
    rng = np.random.default_rng(0)
    base = icosphere(2, 30.0)
    for _ in range(100):
        a = perturbed(base, rng, rng.uniform(0.1, 3.0))
        b = perturbed(base, rng, rng.uniform(0.1, 3.0))
        md_ab, md_ba = mean_distance(a, b), mean_distance(b, a)
        hd_ab, hd_ba = hausdorff_distance(a, b), hausdorff_distance(b, a)
        assert md_ab == md_ba
        assert hd_ab == hd_ba
        assert 0.0 <= md_ab <= hd_ab


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_rigid_invariance(seed):
    rng = np.random.default_rng(seed)
    base = icosphere(2, 30.0)
    a, b = perturbed(base, rng, 1.0), perturbed(base, rng, 1.0)
    R, t = random_rotation(rng), rng.normal(scale=50.0, size=3)
    ra, rb = a.transformed(R, t), b.transformed(R, t)
    assert abs(mean_distance(ra, rb) - mean_distance(a, b)) <= 1e-9
    assert abs(hausdorff_distance(ra, rb) - hausdorff_distance(a, b)) <= 1e-9
    p, q = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    np.testing.assert_allclose(target_registration_error(p @ R.T + t, q @ R.T + t),
                               target_registration_error(p, q), atol=1e-9)


def test_report_json_keys(case500):
    rep = metrics_report(case500.deflated, case500.deflated, [[0, 0, 0]], [[3, 4, 0]], case500.inflated)
    d = json.loads(rep.to_json())
    assert set(d) == {"md_mm", "hd_mm", "tre_mm", "volume_change_ratio"}
    assert d["tre_mm"] == [5.0]
    assert d["md_mm"] <= d["hd_mm"]
    assert d["volume_change_ratio"] > 0
    assert MetricsReport.from_dict(d) == rep
