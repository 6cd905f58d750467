"""Per-region Gaussian kernel ridge regression of displacement fields.

Every vertex of every training case is one sample. Its feature vector stacks
the offsets ``v_i - v_j`` from the vertex to ``n`` reference vertices, so
features are translation invariant and rotate with the mesh. Targets are the
vertex displacements; the three components share one kernel matrix.

The kernel is ``k(x, x') = exp(-beta * |x - x'|^2 / N)`` with ``N`` the number
of training samples, and the weights solve ``(K + lam I) alpha = Y``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.spatial import cKDTree

from .mesh import InteriorPointSet, MeshError, SurfaceMesh, as_points

FORMAT_TAG = "lungdeform.kernel-model/1"
DEFAULT_LAMBDA = 0.1


class SingularSystemError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class SamplingScheme:
    """Which vertices serve as references for the relative-position features.

    ``fixed-ids`` shares ``ids`` across cases (vertex identity is the
    correspondence); when the owner vertex is itself a reference, ``spare``
    stands in for it. ``nearest-k`` uses the ``n`` Euclidean nearest other
    vertices of each owner, closest first.
    """

    n: int = 32
    mode: str = "fixed-ids"
    ids: tuple[int, ...] = ()
    spare: int = -1

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.mode not in ("fixed-ids", "nearest-k"):
            raise ValueError(f"unknown sampling mode {self.mode!r}")
        if self.mode == "fixed-ids":
            if len(self.ids) != self.n:
                raise ValueError(f"fixed-ids scheme needs {self.n} ids, got {len(self.ids)}")
            if len(set(self.ids)) != self.n or self.spare in self.ids:
                raise ValueError("reference ids must be distinct and exclude the spare")

    def to_dict(self) -> dict:
        return {"n": self.n, "mode": self.mode, "ids": list(self.ids), "spare": self.spare}

    @classmethod
    def from_dict(cls, d) -> "SamplingScheme":
        return cls(int(d["n"]), d["mode"], tuple(int(i) for i in d.get("ids", ())), int(d.get("spare", -1)))


def farthest_point_ids(mesh: SurfaceMesh, count: int, start: int = 0) -> list[int]:
    """Greedy farthest-point sample of vertex ids, starting at ``start``."""
    v = mesh.vertices
    if count > len(v):
        raise ValueError(f"cannot sample {count} of {len(v)} vertices")
    ids = [start]
    d = np.linalg.norm(v - v[start], axis=1)
    for _ in range(count - 1):
        nxt = int(np.argmax(d))
        ids.append(nxt)
        d = np.minimum(d, np.linalg.norm(v - v[nxt], axis=1))
    return ids


def fixed_scheme(reference: SurfaceMesh, n: int = 32) -> SamplingScheme:
    """Fixed reference ids by farthest-point sampling on ``reference``."""
    ids = farthest_point_ids(reference, n + 1)
    return SamplingScheme(n, "fixed-ids", tuple(ids[:n]), ids[n])


def extract_features(mesh: SurfaceMesh, scheme: SamplingScheme) -> np.ndarray:
    """Relative-position features, one row of length ``3n`` per vertex."""
    v = mesh.vertices
    V = len(v)
    if scheme.mode == "fixed-ids":
        ref = np.array(scheme.ids, dtype=np.int64)
        if ref.max() >= V or scheme.spare >= V or ref.min() < 0:
            raise MeshError(f"reference index out of range for mesh with {V} vertices")
        table = np.broadcast_to(ref, (V, scheme.n)).copy()
        owner = table == np.arange(V)[:, None]
        table[owner] = scheme.spare
    else:
        if scheme.n >= V:
            raise MeshError(f"nearest-k needs n < vertex count ({V})")
        _, nn = cKDTree(v).query(v, k=scheme.n + 1)
        table = np.empty((V, scheme.n), dtype=np.int64)
        for i in range(V):
            row = [j for j in nn[i] if j != i][: scheme.n]
            table[i] = row
    rel = v[:, None, :] - v[table]
    return rel.reshape(V, 3 * scheme.n)


def gaussian_kernel(xi, xj, beta: float, n_train: int) -> float:
    """``exp(-beta * |xi - xj|^2 / n_train)`` for two feature vectors."""
    a = np.asarray(xi, dtype=np.float64).ravel()
    b = np.asarray(xj, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"feature length mismatch: {a.shape[0]} vs {b.shape[0]}")
    if not beta > 0 or n_train < 1:
        raise ValueError("beta must be > 0 and n_train >= 1")
    diff = a - b
    return math.exp(-beta * float(diff @ diff) / n_train)


def squared_distances(A: np.ndarray, B: np.ndarray | None = None) -> np.ndarray:
    """Pairwise squared Euclidean distances; the diagonal is exact zero when ``B`` is None."""
    sym = B is None
    B = A if sym else B
    a2 = np.einsum("ij,ij->i", A, A)
    b2 = a2 if sym else np.einsum("ij,ij->i", B, B)
    D = a2[:, None] + b2[None, :] - 2.0 * (A @ B.T)
    np.maximum(D, 0.0, out=D)
    if sym:
        # symmetrise so K is exactly symmetric
        D = 0.5 * (D + D.T)
        np.fill_diagonal(D, 0.0)
    return D


def kernel_matrix(A, B=None, *, beta: float, n_train: int) -> np.ndarray:
    D = squared_distances(np.asarray(A, dtype=np.float64), None if B is None else np.asarray(B, dtype=np.float64))
    D *= -beta / n_train
    return np.exp(D, out=D)


def median_beta(X: np.ndarray, divide_by_n: bool = True, max_samples: int = 2000, seed: int = 0) -> float:
    """Median heuristic: ``beta * median(|xi - xj|^2) / N == 1``.

    Pairs are drawn from a deterministic subsample when ``X`` is large.
    """
    X = np.asarray(X, dtype=np.float64)
    N = len(X)
    if N < 2:
        return 1.0
    sub = X
    if N > max_samples:
        idx = np.random.default_rng(seed).choice(N, size=max_samples, replace=False)
        sub = X[np.sort(idx)]
    D = squared_distances(sub)
    med = float(np.median(D[np.triu_indices(len(sub), k=1)]))
    if med <= 0:
        return 1.0
    return (N if divide_by_n else 1.0) / med


@dataclass
class KernelModel:
    X: np.ndarray
    Y: np.ndarray
    alpha: np.ndarray
    beta: float
    lam: float
    sampling: SamplingScheme | None = None
    mode: str = "per-region"
    divide_by_n: bool = True
    meta: dict = field(default_factory=dict)

    @property
    def n_train(self) -> int:
        return len(self.X)

    @property
    def kernel_n(self) -> int:
        return self.n_train if self.divide_by_n else 1

    def gram(self) -> np.ndarray:
        return kernel_matrix(self.X, beta=self.beta, n_train=self.kernel_n)

    def residual_norm(self) -> float:
        K = self.gram()
        K[np.diag_indices_from(K)] += self.lam
        return float(np.linalg.norm(K @ self.alpha - self.Y))

    def to_json(self) -> str:
        return json.dumps({
            "format": FORMAT_TAG,
            "mode": self.mode,
            "beta": self.beta,
            "lambda": self.lam,
            "divide_by_n": self.divide_by_n,
            "sampling": None if self.sampling is None else self.sampling.to_dict(),
            "X": self.X.tolist(),
            "Y": self.Y.tolist(),
            "alpha": self.alpha.tolist(),
            "meta": self.meta,
        })

    @classmethod
    def from_json(cls, text: str) -> "KernelModel":
        d = json.loads(text)
        if d.get("format") != FORMAT_TAG:
            raise ValueError(f"not a kernel model file (format tag {d.get('format')!r})")
        return cls(
            np.array(d["X"], dtype=np.float64),
            np.array(d["Y"], dtype=np.float64),
            np.array(d["alpha"], dtype=np.float64),
            float(d["beta"]), float(d["lambda"]),
            None if d["sampling"] is None else SamplingScheme.from_dict(d["sampling"]),
            d["mode"], bool(d["divide_by_n"]), d.get("meta", {}),
        )


def _as_2d(a, name):
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2 or not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be a finite 2-D array")
    return arr


def fit(X, Y, beta: float | None = None, lam: float = DEFAULT_LAMBDA, *, sampling: SamplingScheme | None = None,
        mode: str = "per-region", divide_by_n: bool = True) -> KernelModel:
    """Closed-form kernel ridge weights ``alpha = (K + lam I)^-1 Y``.

    ``beta=None`` picks the median heuristic. Raises :class:`SingularSystemError`
    when ``K + lam I`` cannot be factorised (duplicate features at ``lam=0``).
    """
    X = _as_2d(X, "X")
    Y = _as_2d(Y, "Y")
    if len(X) != len(Y) or len(X) == 0:
        raise ValueError(f"X and Y need the same non-zero number of rows ({len(X)} vs {len(Y)})")
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    if beta is None:
        beta = median_beta(X, divide_by_n)
    if not beta > 0:
        raise ValueError("beta must be > 0")
    N = len(X)
    K = kernel_matrix(X, beta=beta, n_train=N if divide_by_n else 1)
    K[np.diag_indices_from(K)] += lam
    try:
        factor = scipy.linalg.cho_factor(K, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError("singular system, increase lambda") from exc
    alpha = scipy.linalg.cho_solve(factor, Y, check_finite=False)
    resid = np.linalg.norm(K @ alpha - Y)
    if not np.isfinite(resid) or resid > 1e-8 * max(np.linalg.norm(Y), 1e-300):
        raise SingularSystemError("singular system, increase lambda")
    return KernelModel(X, Y, alpha, float(beta), float(lam), sampling, mode, divide_by_n)


def predict(model: KernelModel, features) -> np.ndarray:
    """``y_i = sum_j alpha_j k(x_i, x_j)`` for every query row."""
    F = _as_2d(features, "features")
    if F.shape[1] != model.X.shape[1]:
        raise ValueError(f"feature length {F.shape[1]} does not match model ({model.X.shape[1]})")
    out = []
    for lo in range(0, len(F), 2048):
        Kq = kernel_matrix(F[lo:lo + 2048], model.X, beta=model.beta, n_train=model.kernel_n)
        out.append(Kq @ model.alpha)
    return np.vstack(out)


def ridge_cost(alpha, K, Y, lam) -> float:
    """``|Y - K alpha|^2 + lam * tr(alpha^T K alpha)``, summed over columns."""
    r = Y - K @ alpha
    return float(np.sum(r * r) + lam * np.sum(alpha * (K @ alpha)))


@dataclass
class TrainingCase:
    """An inflated mesh with its per-vertex displacement to the deflated state."""

    case_id: str
    mesh: SurfaceMesh
    displacement: np.ndarray


def build_training_set(cases, scheme: SamplingScheme, mode: str = "per-region"):
    """Stack features and displacements of every case.

    per-region: one row per vertex per case. per-patient: one row per case,
    features and displacements of all vertices concatenated.
    """
    if mode not in ("per-region", "per-patient"):
        raise ValueError(f"unknown mode {mode!r}")
    cases = list(cases)
    if not cases:
        raise ValueError("no training cases")
    if scheme.mode == "fixed-ids" or mode == "per-patient":
        counts = {c.mesh.n_vertices for c in cases}
        if len(counts) > 1:
            raise MeshError(f"cases have mismatched vertex counts {sorted(counts)}")
    Xs, Ys = [], []
    for c in cases:
        disp = np.asarray(c.displacement, dtype=np.float64)
        if disp.shape != c.mesh.vertices.shape:
            raise MeshError(f"case {c.case_id}: displacement shape {disp.shape} does not match mesh")
        F = extract_features(c.mesh, scheme)
        if mode == "per-region":
            Xs.append(F)
            Ys.append(disp)
        else:
            Xs.append(F.reshape(1, -1))
            Ys.append(disp.reshape(1, -1))
    return np.vstack(Xs), np.vstack(Ys)


def fit_cases(cases, scheme: SamplingScheme, *, lam: float = DEFAULT_LAMBDA, beta: float | None = None,
              mode: str = "per-region", divide_by_n: bool = True) -> KernelModel:
    X, Y = build_training_set(cases, scheme, mode)
    model = fit(X, Y, beta, lam, sampling=scheme, mode=mode, divide_by_n=divide_by_n)
    model.meta["cases"] = [c.case_id for c in cases]
    return model


def predict_mesh(model: KernelModel, mesh: SurfaceMesh) -> np.ndarray:
    """Displacement field (V x 3) predicted for an inflated mesh."""
    if model.sampling is None:
        raise ValueError("model has no sampling scheme")
    F = extract_features(mesh, model.sampling)
    if model.mode == "per-patient":
        return predict(model, F.reshape(1, -1)).reshape(mesh.n_vertices, 3)
    return predict(model, F)


def interpolate_interior(surface_before: SurfaceMesh, surface_disp, interior, m: int | None = None,
                         power: float = 3.0) -> np.ndarray:
    """Displacements of interior points from the surface displacements.

    Inverse-distance weights ``1 / d**power`` over the ``m`` nearest surface
    vertices (all of them by default), normalised to sum to one. A point
    coinciding with a vertex takes that vertex's displacement.

    With every vertex and ``power=3`` the normalised weights equal a discrete
    Poisson kernel on a sphere, so linear fields are reproduced closely deep
    inside the surface too; a handful of nearest vertices only works near it.
    """
    pts = interior.points if isinstance(interior, InteriorPointSet) else np.asarray(interior, dtype=np.float64)
    if len(pts) == 0:
        return np.zeros((0, 3))
    pts = as_points(pts, "interior points")
    disp = np.asarray(surface_disp, dtype=np.float64)
    if disp.shape != surface_before.vertices.shape:
        raise MeshError("surface displacement does not match surface vertices")
    m = surface_before.n_vertices if m is None else min(int(m), surface_before.n_vertices)
    if m < 1:
        raise ValueError("m must be >= 1")
    dist, idx = cKDTree(surface_before.vertices).query(pts, k=m)
    dist = dist.reshape(len(pts), m)
    idx = idx.reshape(len(pts), m)
    with np.errstate(divide="ignore"):
        w = 1.0 / dist ** power
    hit = dist[:, 0] == 0.0
    w[hit] = 0.0
    w[hit, 0] = 1.0
    w /= w.sum(axis=1, keepdims=True)
    return np.einsum("pk,pkd->pd", w, disp[idx])
