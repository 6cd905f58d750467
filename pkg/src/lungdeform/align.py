"""Landmark-based rigid alignment into a common reference frame."""
from __future__ import annotations

import numpy as np

from .mesh import SurfaceMesh, as_points


class DegenerateLandmarks(ValueError):
    pass


def kabsch(moving, fixed) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares proper rotation ``R`` and translation ``t`` with ``R @ m + t ~ f``.

    Arun, Huang & Blostein (1987), with the reflection fix of Umeyama.
    """
    m = as_points(moving, "moving landmarks")
    f = as_points(fixed, "fixed landmarks")
    if m.shape != f.shape:
        raise ValueError(f"landmark count mismatch: {len(m)} vs {len(f)}")
    if len(m) < 3:
        raise DegenerateLandmarks("degenerate landmark configuration: need at least 3 pairs")
    cm, cf = m.mean(axis=0), f.mean(axis=0)
    mc, fc = m - cm, f - cf
    sv = np.linalg.svd(mc, compute_uv=False)
    if sv[0] == 0 or sv[1] <= 1e-9 * sv[0]:
        raise DegenerateLandmarks("degenerate landmark configuration: landmarks are collinear")
    H = mc.T @ fc
    U, _, Vt = np.linalg.svd(H)
    s = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    R = Vt.T @ np.diag([1.0, 1.0, s]) @ U.T
    t = cf - R @ cm
    return R, t


def rigid_align(moving: SurfaceMesh, fixed_landmarks, moving_landmarks):
    """Rigidly map ``moving`` so its landmarks best match ``fixed_landmarks``.

    Returns ``(R, t, aligned_mesh)``.
    """
    R, t = kabsch(moving_landmarks, fixed_landmarks)
    return R, t, moving.transformed(R, t)


def residual_rms(R, t, moving, fixed) -> float:
    m = as_points(moving)
    f = as_points(fixed)
    return float(np.sqrt(np.mean(np.sum((m @ R.T + t - f) ** 2, axis=1))))
