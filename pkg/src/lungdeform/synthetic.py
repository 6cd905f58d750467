"""Synthetic lung-like meshes with analytic deflation fields.

Each case pairs an inflated surface with its deflated copy (same
connectivity), the exact per-vertex displacement between them, two surface
clips and a small interior "nodule" cloud moved by the same map.

The deflation map, applied to a point ``p`` in this fixed order:

1. contraction toward the hilum, scaling by ``ratio**0.4`` across the hilum
   axis and ``ratio**0.2`` along it (volume scales by exactly ``ratio``);
2. rotation by ``rotation_deg`` about the hilum axis;
3. sag of ``sag_mm * (rho / rho_max)**2`` along gravity, ``rho`` being the
   distance from the hilum axis and ``rho_max`` its maximum over the
   inflated mesh.

Shape and deflation of a case are driven by the same three latent numbers
drawn from the case seed: larger, rounder lungs collapse and turn more. This
coupling is what makes deflation predictable from shape at all.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .mesh import InteriorPointSet, SurfaceMesh, as_point, geodesic_sphere
from .registration import LandmarkPair, anchor_landmark

HILUM_AXIS = np.array([0.0, 0.0, 1.0])
GRAVITY = np.array([0.0, -1.0, 0.0])
BASE_SEMI_AXES = np.array([48.0, 63.0, 86.0])  # mm; ~170 mm tall lung
DEFAULT_RANGES = {
    "contraction_ratio": (0.3, 0.6),
    "rotation_deg": (5.0, 25.0),
    "sag_mm": (2.0, 10.0),
}


@dataclass(frozen=True)
class DeflationParams:
    contraction_ratio: float = 1.0
    rotation_deg: float = 0.0
    sag_mm: float = 0.0
    hilum_point: tuple = (0.0, 0.0, 0.0)
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "contraction_ratio": self.contraction_ratio,
            "rotation_deg": self.rotation_deg,
            "sag_mm": self.sag_mm,
            "hilum_point": [float(x) for x in self.hilum_point],
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d) -> "DeflationParams":
        return cls(float(d["contraction_ratio"]), float(d["rotation_deg"]), float(d["sag_mm"]),
                   tuple(float(x) for x in d["hilum_point"]), int(d["seed"]))


@dataclass
class SyntheticCase:
    case_id: str
    inflated: SurfaceMesh
    deflated: SurfaceMesh
    truth_field: np.ndarray
    clips: list[LandmarkPair]
    interior: InteriorPointSet
    interior_deflated: np.ndarray
    params: DeflationParams
    extras: dict = field(default_factory=dict)


def shape_latent(case_seed: int) -> np.ndarray:
    """Three uniform numbers in [0, 1) shared by a case's shape and deflation."""
    return np.random.default_rng([int(case_seed), 0]).uniform(size=3)


def _frequency(vertex_budget: int) -> int:
    return max(3, int(round(math.sqrt((vertex_budget - 2) / 10.0))))


def generate_lung_like_mesh(case_seed: int, vertex_budget: int = 500) -> SurfaceMesh:
    """Closed, outward-oriented lung-like surface, deterministic in ``case_seed``.

    A geodesic sphere is stretched to an apex-tapered ellipsoid whose size and
    proportions follow :func:`shape_latent`, then perturbed radially by a few
    random low-frequency waves.
    """
    if vertex_budget < 100:
        raise ValueError("vertex_budget must be >= 100")
    sphere = geodesic_sphere(_frequency(vertex_budget))
    n = sphere.vertices
    lat = shape_latent(case_seed)
    size = 0.93 + 0.14 * lat[0]
    roundness = 0.88 + 0.24 * lat[1]  # widens x/y relative to height
    depth = 0.95 + 0.1 * lat[2]
    axes = BASE_SEMI_AXES * size * np.array([roundness * depth, roundness, 1.0])

    rng = np.random.default_rng([int(case_seed), 1])
    radial = np.ones(len(n))
    for _ in range(4):
        k = rng.normal(size=3)
        k *= rng.uniform(1.0, 2.5) / np.linalg.norm(k)
        radial += rng.uniform(0.01, 0.025) * np.cos(n @ k + rng.uniform(0, 2 * np.pi))
    p = n * radial[:, None] * axes
    # narrower apex, broad base
    taper = 1.0 - 0.18 * (n[:, 2] + 1.0) / 2.0
    p[:, :2] *= taper[:, None]
    return SurfaceMesh(p, sphere.triangles)


def default_hilum(mesh: SurfaceMesh) -> np.ndarray:
    """Medial, slightly inferior point inside the mesh."""
    lo, hi = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
    c = 0.5 * (lo + hi)
    return np.array([lo[0] + 0.3 * (hi[0] - lo[0]), c[1], c[2] - 0.1 * (hi[2] - lo[2])])


def _rotation_about(axis, degrees):
    a = np.asarray(axis, dtype=float)
    a = a / np.linalg.norm(a)
    th = math.radians(degrees)
    K = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    # written as I + (R - I) so that a zero angle leaves exact zeros
    return math.sin(th) * K + (1.0 - math.cos(th)) * (K @ K)


@dataclass(frozen=True)
class DeflationMap:
    """Closed-form deflation displacement, valid for any point set."""

    params: DeflationParams
    rho_max: float

    def displacement(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        h = np.asarray(self.params.hilum_point, dtype=np.float64)
        ratio = self.params.contraction_ratio
        s_perp, s_par = ratio ** 0.4, ratio ** 0.2
        a = HILUM_AXIS
        rel = p - h
        along = (rel @ a)[:, None] * a
        u1 = (s_perp - 1.0) * (rel - along) + (s_par - 1.0) * along
        p1 = p + u1
        rot_minus_i = _rotation_about(a, self.params.rotation_deg)
        p2 = p1 + (p1 - h) @ rot_minus_i.T
        u3 = np.zeros_like(p)
        if self.params.sag_mm != 0.0:
            rel2 = p2 - h
            rho = np.linalg.norm(rel2 - (rel2 @ a)[:, None] * a, axis=1)
            u3 = self.params.sag_mm * (rho / self.rho_max)[:, None] ** 2 * GRAVITY
        p3 = p2 + u3
        return p3 - p

    def __call__(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return p + self.displacement(p)


def hilum_axis_distance(points, hilum) -> np.ndarray:
    rel = np.asarray(points, dtype=float) - np.asarray(hilum, dtype=float)
    return np.linalg.norm(rel - (rel @ HILUM_AXIS)[:, None] * HILUM_AXIS, axis=1)


def _pick_clips(mesh: SurfaceMesh, seed: int) -> tuple[int, int]:
    rng = np.random.default_rng([int(seed), 2])
    v = mesh.vertices
    diam = mesh.diameter()
    c = v.mean(axis=0)
    lateral = np.flatnonzero(v[:, 0] > c[0] + 0.2 * (v[:, 0].max() - c[0]))
    i = int(rng.choice(lateral))
    d = np.linalg.norm(v - v[i], axis=1)
    far = np.flatnonzero((d >= 0.25 * diam) & (d <= 0.4 * diam) & (v[:, 0] > c[0]))
    if len(far) == 0:
        far = np.flatnonzero(d >= 0.25 * diam)
    j = int(rng.choice(far))
    return i, j


def _nodule(mesh: SurfaceMesh, clip_vertices, seed: int) -> np.ndarray:
    rng = np.random.default_rng([int(seed), 3])
    v = mesh.vertices
    centroid = v.mean(axis=0)
    near = v[list(clip_vertices)].mean(axis=0)
    center = centroid + 0.55 * (near - centroid)
    offsets = rng.normal(scale=3.0, size=(6, 3))
    return np.vstack([center, center + offsets])


def apply_deflation(mesh: SurfaceMesh, params: DeflationParams, case_id: str = "case") -> SyntheticCase:
    """Deflate ``mesh`` with the analytic map and package the paired case."""
    if not params.contraction_ratio > 0:
        raise ValueError("contraction_ratio must be > 0")
    h = as_point(params.hilum_point, "hilum_point")
    lo, hi = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
    if np.any(h < lo) or np.any(h > hi):
        raise ValueError("hilum_point must lie inside the mesh bounding box")
    rho_max = float(hilum_axis_distance(mesh.vertices, h).max())
    dmap = DeflationMap(params, rho_max)
    truth = dmap.displacement(mesh.vertices)
    deflated = mesh.with_vertices(mesh.vertices + truth)

    ci, cj = _pick_clips(mesh, params.seed)
    clips = [anchor_landmark(mesh, mesh.vertices[k], deflated.vertices[k]) for k in (ci, cj)]
    interior = InteriorPointSet(_nodule(mesh, (ci, cj), params.seed), ("nodule",) * 7)
    return SyntheticCase(case_id, mesh, deflated, truth, clips, interior, dmap(interior.points), params,
                         {"rho_max": rho_max, "clip_vertices": [ci, cj]})


def _lerp(rng_pair, t):
    lo, hi = rng_pair
    return float(lo + (hi - lo) * t)


def make_case(case_seed: int, vertex_budget: int = 500, ranges=None, case_id=None) -> SyntheticCase:
    """One synthetic case whose deflation parameters follow its shape latent."""
    ranges = {**DEFAULT_RANGES, **(ranges or {})}
    mesh = generate_lung_like_mesh(case_seed, vertex_budget)
    lat = shape_latent(case_seed)
    params = DeflationParams(
        contraction_ratio=_lerp(ranges["contraction_ratio"], 1.0 - lat[0]),
        rotation_deg=_lerp(ranges["rotation_deg"], lat[1]),
        sag_mm=_lerp(ranges["sag_mm"], lat[2]),
        hilum_point=tuple(default_hilum(mesh)),
        seed=int(case_seed),
    )
    return apply_deflation(mesh, params, case_id or f"case{case_seed}")


def case_seeds(n_cases: int, base_seed: int) -> list[int]:
    ss = np.random.SeedSequence(int(base_seed))
    return [int(child.generate_state(1)[0]) for child in ss.spawn(n_cases)]


def make_dataset(n_cases: int = 12, base_seed: int = 0, param_ranges=None, vertex_budget: int = 500) -> list[SyntheticCase]:
    """``n_cases`` independent cases, fully determined by ``base_seed``."""
    ranges = {**DEFAULT_RANGES, **(param_ranges or {})}
    for key, (lo, hi) in ranges.items():
        if key not in DEFAULT_RANGES:
            raise ValueError(f"unknown parameter range {key!r}")
        if not hi >= lo:
            raise ValueError(f"empty range for {key}: ({lo}, {hi})")
    if n_cases < 1:
        raise ValueError("n_cases must be >= 1")
    return [make_case(s, vertex_budget, ranges, case_id=f"case{k:02d}")
            for k, s in enumerate(case_seeds(n_cases, base_seed))]


def with_params(case: SyntheticCase, **changes) -> SyntheticCase:
    """Re-deflate a case's inflated mesh with modified parameters."""
    return apply_deflation(case.inflated, replace(case.params, **changes), case.case_id)
