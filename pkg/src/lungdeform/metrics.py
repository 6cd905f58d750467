"""Surface-distance and landmark error metrics used to score registrations
and predictions.

MD and HD are sampled at mesh vertices: every vertex of one mesh is projected
onto the other surface, in both directions.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .mesh import MeshError, SurfaceMesh, as_points, closest_points_on_surface, mesh_volume


@dataclass
class MetricsReport:
    md_mm: float
    hd_mm: float
    tre_mm: list[float] = field(default_factory=list)
    volume_change_ratio: float = float("nan")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(float(d["md_mm"]), float(d["hd_mm"]), [float(x) for x in d["tre_mm"]],
                   float(d["volume_change_ratio"]))


def _one_sided(a: SurfaceMesh, b: SurfaceMesh) -> np.ndarray:
    if a.n_vertices == 0 or b.n_triangles == 0:
        raise MeshError("empty surface")
    return closest_points_on_surface(a.vertices, b).distances


def surface_distances(a: SurfaceMesh, b: SurfaceMesh) -> tuple[np.ndarray, np.ndarray]:
    """Vertex-to-surface distances a->b and b->a."""
    return _one_sided(a, b), _one_sided(b, a)


def _mean(x) -> float:
    return math.fsum(x) / len(x)


def mean_distance(a: SurfaceMesh, b: SurfaceMesh) -> float:
    """Symmetric mean of nearest point-to-surface distances (MD), in mm."""
    ab, ba = surface_distances(a, b)
    # sorted pair so that MD(a, b) == MD(b, a) bit for bit
    return 0.5 * sum(sorted((_mean(ab), _mean(ba))))


def hausdorff_distance(a: SurfaceMesh, b: SurfaceMesh) -> float:
    """Vertex-sampled symmetric Hausdorff distance (HD), in mm."""
    ab, ba = surface_distances(a, b)
    return float(max(ab.max(), ba.max()))


def target_registration_error(predicted, truth) -> list[float]:
    """Euclidean error per landmark."""
    p = as_points(predicted, "predicted landmarks")
    t = as_points(truth, "true landmarks")
    if len(p) != len(t):
        raise ValueError(f"landmark count mismatch: {len(p)} predicted vs {len(t)} true")
    if len(p) == 0:
        raise ValueError("need at least one landmark")
    return [float(x) for x in np.linalg.norm(p - t, axis=1)]


def volume_change_ratio(inflated: SurfaceMesh, deflated: SurfaceMesh) -> float:
    """Deflated volume divided by inflated volume."""
    v_in = mesh_volume(inflated)
    if v_in == 0.0:
        raise ValueError("inflated mesh has zero volume")
    return mesh_volume(deflated) / v_in


def metrics_report(predicted: SurfaceMesh, truth: SurfaceMesh, predicted_landmarks=None,
                   true_landmarks=None, inflated: SurfaceMesh | None = None) -> MetricsReport:
    """MD/HD of ``predicted`` vs ``truth`` plus landmark TREs.

    The volume-change ratio is that of ``predicted`` relative to ``inflated``
    when an inflated reference is given.
    """
    ab, ba = surface_distances(predicted, truth)
    md = 0.5 * sum(sorted((_mean(ab), _mean(ba))))
    hd = float(max(ab.max(), ba.max()))
    tre = []
    if predicted_landmarks is not None and len(predicted_landmarks):
        tre = target_registration_error(predicted_landmarks, true_landmarks)
    ratio = float("nan")
    if inflated is not None:
        ratio = volume_change_ratio(inflated, predicted)
    return MetricsReport(md, hd, tre, ratio)
