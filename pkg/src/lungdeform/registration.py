"""Deformable mesh registration with optional surgical-clip landmarks.

The source mesh is deformed by per-vertex displacements ``u`` to minimise

    E(u) = E_shape + E_clip + E_laplacian

E_shape
    symmetric mean vertex-to-surface distance between the deformed source
    and the target (the MD metric).
E_clip
    ``clip_weight`` times the summed distance between each clip, carried
    along with the deformed source surface, and its target position.
E_laplacian
    ``laplacian_weight`` times the mean squared change of the umbrella
    Laplacian, keeping local surface shape while the mesh moves.

Minimisation alternates closest-point correspondence updates with a
preconditioned gradient step. Each step is accepted by backtracking on the
energy with correspondences frozen; that frozen energy bounds the true
energy from above and agrees with it at the current iterate, so the true
energy trace never increases.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .mesh import (
    MeshError,
    SurfaceMesh,
    adjacency_matrix,
    apply_displacement,
    as_point,
    closest_points_on_surface,
    laplacian_operator,
)
from .metrics import MetricsReport, metrics_report


class RegistrationDiverged(RuntimeError):
    """Non-finite energy during registration; ``trace`` holds the history so far."""

    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


SURFACE_TOLERANCE = 1e-3


@dataclass(frozen=True)
class LandmarkPair:
    """A clip seen on the source (inflated) and target (deflated) surfaces.

    The source side is attached to the source surface once: a host triangle,
    barycentric weights on it, and the (tiny) residual offset. Evaluating
    that attachment on a deformed copy of the source transports the clip.
    """

    source_pos: np.ndarray
    target_pos: np.ndarray
    triangle: int
    barycentric: np.ndarray
    offset: np.ndarray
    nearest_vertex: int

    def transported(self, vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
        corners = vertices[triangles[self.triangle]]
        return self.barycentric @ corners + self.offset


def anchor_landmark(source: SurfaceMesh, source_pos, target_pos, tol: float = SURFACE_TOLERANCE) -> LandmarkPair:
    """Attach a clip to ``source``; it must lie within ``tol`` mm of the surface."""
    p = as_point(source_pos, "source_pos")
    t = as_point(target_pos, "target_pos")
    res = closest_points_on_surface(p.reshape(1, 3), source)
    if res.distances[0] > tol:
        raise MeshError(f"clip at {p.tolist()} is {res.distances[0]:.3g} mm off the source surface")
    tri = int(res.triangles[0])
    bary = res.barycentric[0].copy()
    corners = source.triangles[tri]
    nearest = int(corners[np.argmax(bary)])
    return LandmarkPair(p, t, tri, bary, p - res.points[0], nearest)


@dataclass(frozen=True)
class RegistrationParams:
    clip_weight: float = 1.0
    laplacian_weight: float = 1.0
    max_iterations: int = 400
    convergence_tol: float = 1e-6
    # step control
    initial_step: float = 1.0
    backtrack: float = 0.5
    growth: float = 2.0
    armijo: float = 1e-4
    min_step: float = 1e-12
    # graph-Laplacian smoothing of the gradient, in units of edge hops squared
    smoothing: float = 100.0
    # iterations of the initial translation-only stage (0 skips it)
    translation_iterations: int = 100
    # clips closer than this to their target are held in place (active set)
    clip_snap_mm: float = 1e-3

    def __post_init__(self):
        if self.clip_weight < 0 or self.laplacian_weight < 0:
            raise ValueError("weights must be non-negative")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not self.convergence_tol > 0:
            raise ValueError("convergence_tol must be > 0")
        if not (0 < self.backtrack < 1) or self.growth < 1 or self.smoothing < 0 or self.translation_iterations < 0:
            raise ValueError("invalid step control parameters")


@dataclass(frozen=True)
class EnergyTerms:
    total: float
    shape: float
    clip: float
    laplacian: float

    def __iter__(self):
        return iter((self.total, self.shape, self.clip, self.laplacian))


@dataclass
class RegistrationResult:
    source: SurfaceMesh
    deformed: SurfaceMesh
    displacement: np.ndarray
    energy_trace: list[tuple[int, float, float, float, float]]
    converged: bool
    metrics: MetricsReport
    clips: list[LandmarkPair] = field(default_factory=list)

    def transported_clips(self) -> np.ndarray:
        return np.array([c.transported(self.deformed.vertices, self.deformed.triangles) for c in self.clips]).reshape(-1, 3)

    def trace_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "E", "E_shape", "E_clip", "E_laplacian"])
        for row in self.energy_trace:
            w.writerow([row[0]] + [repr(float(x)) for x in row[1:]])
        return buf.getvalue()


def correspondence_displacements(result: RegistrationResult) -> np.ndarray:
    """Displacement of every source vertex to its registered position."""
    return result.deformed.vertices - result.source.vertices


# energy internals ---------------------------------------------------------


@dataclass
class _Problem:
    source: SurfaceMesh
    target: SurfaceMesh
    clips: list[LandmarkPair]
    params: RegistrationParams
    L: sp.csr_matrix
    delta0: np.ndarray

    @classmethod
    def build(cls, source, target, clips, params):
        source.check_registrable()
        target.check_registrable()
        L = laplacian_operator(source)
        return cls(source, target, list(clips), params, L, L @ source.vertices)


@dataclass
class _Frozen:
    """Correspondences captured at one iterate."""

    src_to_tgt: np.ndarray  # closest target-surface point per deformed vertex
    tgt_tri: np.ndarray  # deformed-source triangle hosting each target vertex's closest point
    tgt_bary: np.ndarray


def _safe_unit(diff):
    n = np.linalg.norm(diff, axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        unit = np.where(n[..., None] > 0, diff / n[..., None], 0.0)
    return n, unit


def _correspond(prob: _Problem, X: np.ndarray) -> _Frozen:
    deformed = prob.source.with_vertices(X)
    fwd = closest_points_on_surface(X, prob.target)
    back = closest_points_on_surface(prob.target.vertices, deformed)
    return _Frozen(fwd.points, back.triangles, back.barycentric)


def _terms(prob: _Problem, X: np.ndarray, fr: _Frozen, with_grad: bool):
    p = prob.params
    tris = prob.source.triangles
    V = len(X)
    W = prob.target.n_vertices

    d_fwd, u_fwd = _safe_unit(X - fr.src_to_tgt)
    host = tris[fr.tgt_tri]  # (W, 3)
    q = np.einsum("wk,wkd->wd", fr.tgt_bary, X[host])
    d_back, u_back = _safe_unit(prob.target.vertices - q)
    shape = 0.5 * (math.fsum(d_fwd) / V + math.fsum(d_back) / W)

    clip = 0.0
    clip_dirs = []
    if p.clip_weight > 0:
        for c in prob.clips:
            diff = c.transported(X, tris) - c.target_pos
            n = float(np.linalg.norm(diff))
            clip += n
            clip_dirs.append(diff / n if n > 0 else np.zeros(3))
        clip *= p.clip_weight

    lap = 0.0
    resid = None
    if p.laplacian_weight > 0:
        resid = prob.L @ X - prob.delta0
        lap = p.laplacian_weight * math.fsum((resid * resid).ravel()) / V

    terms = EnergyTerms(shape + clip + lap, shape, clip, lap)
    if not with_grad:
        return terms, None

    g = u_fwd / (2.0 * V)
    contrib = -fr.tgt_bary[:, :, None] * u_back[:, None, :] / (2.0 * W)
    for k in range(3):
        g += _scatter(host[:, k], contrib[:, k], V)
    if p.clip_weight > 0:
        for c, unit in zip(prob.clips, clip_dirs):
            g[tris[c.triangle]] += p.clip_weight * c.barycentric[:, None] * unit[None, :]
    if resid is not None:
        g += (2.0 * p.laplacian_weight / V) * (prob.L.T @ resid)
    return terms, g


def _scatter(idx, vals, n):
    out = np.zeros((n, 3))
    for d in range(3):
        out[:, d] = np.bincount(idx, weights=vals[:, d], minlength=n)
    return out


def _check_inputs(source, u, target, clips, params):
    u = np.asarray(u, dtype=np.float64)
    if u.shape != source.vertices.shape:
        raise MeshError(f"displacement shape {u.shape} does not match source {source.vertices.shape}")
    if params.clip_weight < 0 or params.laplacian_weight < 0:
        raise ValueError("weights must be non-negative")
    return u


def registration_energy(source: SurfaceMesh, u, target: SurfaceMesh, clips, params: RegistrationParams) -> EnergyTerms:
    """Energy terms of displacement field ``u`` (V x 3, mm)."""
    u = _check_inputs(source, u, target, clips, params)
    prob = _Problem.build(source, target, clips, params)
    X = source.vertices + u
    return _terms(prob, X, _correspond(prob, X), with_grad=False)[0]


def registration_gradient(source: SurfaceMesh, u, target: SurfaceMesh, clips, params: RegistrationParams):
    """Energy terms and dE/du at ``u``."""
    u = _check_inputs(source, u, target, clips, params)
    prob = _Problem.build(source, target, clips, params)
    X = source.vertices + u
    return _terms(prob, X, _correspond(prob, X), with_grad=True)


class _Preconditioner:
    """Applies ``(I + s * G)^-1`` with ``G`` the combinatorial graph Laplacian."""

    def __init__(self, mesh: SurfaceMesh, strength: float):
        self.strength = strength
        if strength > 0:
            A = adjacency_matrix(mesh)
            G = sp.diags(np.asarray(A.sum(axis=1)).ravel()) - A
            self.lu = splu((sp.identity(mesh.n_vertices) + strength * G).tocsc())

    def __call__(self, g):
        if self.strength <= 0:
            return g
        return self.lu.solve(g)


def descent_direction(source: SurfaceMesh, gradient: np.ndarray, params: RegistrationParams) -> np.ndarray:
    """Search direction used by :func:`register` for a given gradient."""
    return -_Preconditioner(source, params.smoothing)(gradient) * source.n_vertices


def _clip_rows(prob: _Problem, ids) -> sp.csr_matrix:
    rows, cols, vals = [], [], []
    for r, ci in enumerate(ids):
        c = prob.clips[ci]
        rows += [r] * 3
        cols += list(prob.source.triangles[c.triangle])
        vals += list(c.barycentric)
    return sp.csr_matrix((vals, (rows, cols)), shape=(len(ids), prob.source.n_vertices))


def _clip_residuals(prob: _Problem, X) -> np.ndarray:
    tris = prob.source.triangles
    return np.array([np.linalg.norm(c.transported(X, tris) - c.target_pos) for c in prob.clips])


def _active_direction(prob, precond, g, X, snap):
    """Preconditioned descent direction holding snapped clips in place.

    A clip within ``snap`` mm of its target sits at the kink of its norm
    term. Such clips are held fixed by projecting the direction, unless the
    remaining energy pulls on them harder than ``clip_weight`` can resist.
    """
    p = prob.params
    V = len(X)
    if p.clip_weight == 0 or not prob.clips:
        return -precond(g) * V
    resid = _clip_residuals(prob, X)
    active = [i for i, r in enumerate(resid) if r < snap]
    tris = prob.source.triangles
    g_rest = g.copy()
    for i in active:
        # drop the (ill-defined) gradient of clips sitting at their kink
        c = prob.clips[i]
        diff = c.transported(X, tris) - c.target_pos
        n = np.linalg.norm(diff)
        if n > 0:
            g_rest[tris[c.triangle]] -= p.clip_weight * c.barycentric[:, None] * (diff / n)[None, :]
    while active:
        A = _clip_rows(prob, active)
        PAt = precond(A.T.toarray())
        M = A @ PAt
        Pg = precond(g_rest)
        lam = np.linalg.lstsq(M, A @ Pg, rcond=None)[0]  # (|C|, 3) holding forces
        force = np.linalg.norm(lam, axis=1)
        worst = int(np.argmax(force))
        if force[worst] <= p.clip_weight:
            return -(Pg - PAt @ lam) * V
        # released clip: its kink subgradient cannot hold, so use its one-sided pull
        released = active.pop(worst)
        c = prob.clips[released]
        diff = c.transported(X, tris) - c.target_pos
        n = np.linalg.norm(diff)
        pull = diff / n if n > 0 else -lam[worst] / force[worst]
        g_rest[tris[c.triangle]] += p.clip_weight * c.barycentric[:, None] * pull[None, :]
    return -precond(g_rest) * V


def _descend(prob, X, fr, terms, g, direction, iterations, trace, stage_tol):
    """Backtracking descent along ``direction(g, X)``; appends to ``trace``.

    Returns the final state and whether the stage stopped on its own
    criterion (as opposed to running out of iterations).
    """
    params = prob.params
    step = params.initial_step
    it0 = trace[-1][0]
    for it in range(it0 + 1, it0 + iterations + 1):
        if terms.total == 0.0:
            return X, fr, terms, g, True
        d = direction(g, X)
        # exact directional derivative of the frozen energy along d
        slope = _directional_slope(prob, X, fr, g, d)
        if not slope < 0:
            return X, fr, terms, g, True
        step = step * params.growth
        while True:
            trial = X + step * d
            trial_terms, _ = _terms(prob, trial, fr, with_grad=False)
            if not math.isfinite(trial_terms.total):
                raise RegistrationDiverged(f"diverged at iteration {it}", trace)
            if trial_terms.total <= terms.total + params.armijo * step * slope:
                break
            step *= params.backtrack
            if step < params.min_step:
                return X, fr, terms, g, True
        X = trial
        fr = _correspond(prob, X)
        new_terms, g = _terms(prob, X, fr, with_grad=True)
        if not math.isfinite(new_terms.total):
            raise RegistrationDiverged(f"diverged at iteration {it}", trace)
        decrease = terms.total - new_terms.total
        terms = new_terms
        trace.append((it, *terms))
        if decrease <= stage_tol * max(trace[-2][1], 1e-300):
            return X, fr, terms, g, True
    return X, fr, terms, g, False


def register(source: SurfaceMesh, target: SurfaceMesh, clips=(), params: RegistrationParams | None = None) -> RegistrationResult:
    """Deform ``source`` onto ``target``; see the module docstring for the energy.

    A short translation-only descent runs first (same energy, all vertices
    sharing one displacement), then the per-vertex descent. Both stages
    share one iteration budget and one monotone energy trace.

    With ``clip_weight == 0`` the clips are ignored by the optimisation and
    only used to report landmark errors.
    """
    params = params or RegistrationParams()
    clips = list(clips)
    prob = _Problem.build(source, target, clips if params.clip_weight > 0 else [], params)
    precond = _Preconditioner(source, params.smoothing)

    X = source.vertices.copy()
    fr = _correspond(prob, X)
    terms, g = _terms(prob, X, fr, with_grad=True)
    trace = [(0, *terms)]
    if not math.isfinite(terms.total):
        raise RegistrationDiverged("diverged: non-finite initial energy", trace)

    def shift(g, X):
        return np.broadcast_to(-g.sum(axis=0), X.shape)

    def free(g, X):
        return _active_direction(prob, precond, g, X, params.clip_snap_mm)

    budget = params.max_iterations
    n_shift = min(params.translation_iterations, budget)
    if n_shift:
        X, fr, terms, g, _ = _descend(prob, X, fr, terms, g, shift, n_shift, trace, params.convergence_tol)
    remaining = budget - trace[-1][0]
    converged = terms.total == 0.0
    if remaining > 0 and not converged:
        X, fr, terms, g, converged = _descend(prob, X, fr, terms, g, free, remaining, trace, params.convergence_tol)

    deformed = source.with_vertices(X)
    result = RegistrationResult(source, deformed, X - source.vertices, trace, converged,
                                MetricsReport(0.0, 0.0), clips)
    truth = np.array([c.target_pos for c in clips]).reshape(-1, 3)
    result.metrics = metrics_report(deformed, target, result.transported_clips() if clips else None, truth)
    return result


def _directional_slope(prob, X, fr, g, d) -> float:
    """One-sided derivative of the frozen energy along ``d``.

    Equals ``g . d`` except for clips sitting exactly on their target, whose
    norm term contributes ``clip_weight * |A d|``.
    """
    slope = float(np.sum(g * d))
    if prob.params.clip_weight == 0:
        return slope
    tris = prob.source.triangles
    for c in prob.clips:
        if np.linalg.norm(c.transported(X, tris) - c.target_pos) == 0:
            slope += prob.params.clip_weight * float(np.linalg.norm(c.barycentric @ d[tris[c.triangle]]))
    return slope


def apply_registration(result: RegistrationResult) -> SurfaceMesh:
    return apply_displacement(result.source, result.displacement)
