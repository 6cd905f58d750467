"""Leave-one-out evaluation of deflation prediction from inflated meshes."""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernel
from .align import kabsch
from .config import DEFAULT_CONFIG, registration_params
from .metrics import metrics_report, volume_change_ratio
from .registration import register

log = logging.getLogger(__name__)


class FoldError(RuntimeError):
    def __init__(self, case_id, cause):
        super().__init__(f"fold {case_id} failed: {cause}")
        self.case_id = case_id
        self.cause = cause


@dataclass
class FoldResult:
    case_id: str
    train_ids: list[str]
    vcr_true: float
    vcr_pred: float
    vcr_error: float
    clip_tre_mm: list[float]
    true_clip_disp_mm: list[float]
    md_mm: float
    hd_mm: float
    interior_error_mm: float | None = None
    note: str = ""


_AGGREGATED = ("vcr_error", "clip_tre_mm", "true_clip_disp_mm", "md_mm", "hd_mm", "interior_error_mm")


def _column(folds, key):
    vals = []
    for f in folds:
        v = getattr(f, key)
        if v is None:
            continue
        vals.extend(v if isinstance(v, list) else [v])
    return vals


def aggregate(folds) -> dict:
    """Mean, min and max of every per-fold quantity (lists are flattened)."""
    out = {}
    for key in _AGGREGATED:
        vals = _column(folds, key)
        if vals:
            out[key] = {"mean": math.fsum(vals) / len(vals), "min": min(vals), "max": max(vals)}
    return out


@dataclass
class CrossValReport:
    folds: list[FoldResult]
    aggregates: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def check_consistency(self) -> bool:
        return aggregate(self.folds) == self.aggregates

    def to_dict(self, ndigits: int = 6) -> dict:
        return _round({"folds": [asdict(f) for f in self.folds], "aggregates": self.aggregates,
                       "config": self.config}, ndigits)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        """Aligned table, one row per fold, then mean (min - max) rows."""
        head = f"{'case':<10}{'VCR true':>10}{'VCR pred':>10}{'VCR err':>10}{'MD':>8}{'HD':>8}  clip TRE [mm]"
        lines = [head, "-" * len(head)]
        for f in self.folds:
            tre = " ".join(f"{t:6.2f}" for t in f.clip_tre_mm)
            lines.append(f"{f.case_id:<10}{f.vcr_true:>10.3f}{f.vcr_pred:>10.3f}{f.vcr_error:>10.3f}"
                         f"{f.md_mm:>8.2f}{f.hd_mm:>8.2f}  {tre}")
        lines.append("")
        labels = {"vcr_error": "VCR error", "clip_tre_mm": "clip TRE [mm]", "true_clip_disp_mm": "clip disp [mm]",
                  "md_mm": "MD [mm]", "hd_mm": "HD [mm]", "interior_error_mm": "interior [mm]"}
        for key, agg in self.aggregates.items():
            lines.append(f"{labels[key]:<16}{agg['mean']:8.3f} ({agg['min']:.3f} - {agg['max']:.3f})")
        notes = sorted({f.note for f in self.folds if f.note})
        lines.extend(f"note: {n}" for n in notes)
        return "\n".join(lines) + "\n"


def _round(obj, nd):
    if isinstance(obj, float):
        return round(obj, nd)
    if isinstance(obj, dict):
        return {k: _round(v, nd) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round(v, nd) for v in obj]
    return obj


def _training_field(case, cfg, reg_params):
    if cfg["crossval"]["displacements"] == "registration":
        return register(case.inflated, case.deflated, case.clips, reg_params).displacement
    if case.truth_field is None:
        raise ValueError(f"case {case.case_id} has no truth field; use displacements: registration")
    return case.truth_field


def _normalised(case, reference):
    """Rotation and translation taking ``case.inflated`` onto ``reference`` by vertex correspondence."""
    return kabsch(case.inflated.vertices, reference.inflated.vertices)


def _fold(held, train, fields, cfg) -> FoldResult:
    kc = cfg["kernel"]
    frames = {}
    if cfg["crossval"]["normalize"]:
        for c in [*train, held]:
            frames[c.case_id] = _normalised(c, train[0])
    ident = (np.eye(3), np.zeros(3))

    def framed(c, disp=None):
        R, t = frames.get(c.case_id, ident)
        mesh = c.inflated.transformed(R, t)
        return mesh, (None if disp is None else disp @ R.T)

    tcases = []
    for c in train:
        mesh, disp = framed(c, fields[c.case_id])
        tcases.append(kernel.TrainingCase(c.case_id, mesh, disp))
    sc = kc["sampling"]
    if sc["mode"] == "fixed-ids":
        scheme = kernel.fixed_scheme(tcases[0].mesh, int(sc["n"]))
    else:
        scheme = kernel.SamplingScheme(int(sc["n"]), "nearest-k")
    model = kernel.fit_cases(tcases, scheme, lam=float(kc["lambda"]),
                             beta=None if kc["beta"] is None else float(kc["beta"]),
                             mode=kc["mode"], divide_by_n=bool(kc["divide_by_n"]))
    if held.case_id in model.meta["cases"]:
        raise AssertionError(f"held-out case {held.case_id} leaked into training")

    held_mesh, _ = framed(held)
    pred_framed = kernel.predict_mesh(model, held_mesh)
    R, _ = frames.get(held.case_id, ident)
    pred = pred_framed @ R  # back to the case's own frame
    predicted = held.inflated.with_vertices(held.inflated.vertices + pred)

    vt = volume_change_ratio(held.inflated, held.deflated)
    vp = volume_change_ratio(held.inflated, predicted)
    pred_clips = np.array([c.transported(predicted.vertices, predicted.triangles) for c in held.clips]).reshape(-1, 3)
    true_clips = np.array([c.target_pos for c in held.clips]).reshape(-1, 3)
    rep = metrics_report(predicted, held.deflated, pred_clips if len(pred_clips) else None, true_clips)
    disp = [float(np.linalg.norm(c.target_pos - c.source_pos)) for c in held.clips]

    interior_err, note = None, ""
    if held.interior is not None and len(held.interior) and held.interior_deflated is not None:
        moved = kernel.interpolate_interior(held.inflated, pred, held.interior, m=cfg["crossval"]["interior_neighbors"])
        interior_err = float(np.mean(np.linalg.norm(held.interior.points + moved - held.interior_deflated, axis=1)))
    else:
        note = "interior structures skipped (no interior point set)"
    return FoldResult(held.case_id, [c.case_id for c in train], vt, vp, abs(vp - vt), rep.tre_mm, disp,
                      rep.md_mm, rep.hd_mm, interior_err, note)


def run_crossval(dataset, config: dict | None = None) -> CrossValReport:
    """Leave-one-out: for every case, train on the rest and predict its deflation.

    ``dataset`` items need ``case_id``, ``inflated``, ``deflated``, ``clips``
    and, for truth-trained runs, ``truth_field``; ``interior`` and
    ``interior_deflated`` are optional.
    """
    cfg = config or DEFAULT_CONFIG
    cases = list(dataset)
    if len(cases) < 2:
        raise ValueError("leave-one-out needs at least 2 cases")
    ids = [c.case_id for c in cases]
    if len(set(ids)) != len(ids):
        raise ValueError("case ids must be unique")
    if cfg["crossval"]["displacements"] not in ("truth", "registration"):
        raise ValueError("crossval.displacements must be 'truth' or 'registration'")

    reg_params = registration_params(cfg)
    fields = {}
    for c in cases:
        try:
            fields[c.case_id] = _training_field(c, cfg, reg_params)
        except Exception as exc:
            raise FoldError(c.case_id, exc) from exc

    def run(k):
        held = cases[k]
        log.info("fold %s", held.case_id)
        try:
            return _fold(held, cases[:k] + cases[k + 1:], fields, cfg)
        except Exception as exc:
            raise FoldError(held.case_id, exc) from exc

    jobs = max(1, int(cfg["crossval"].get("jobs", 1)))
    if jobs == 1:
        folds = [run(k) for k in range(len(cases))]
    else:
        with ThreadPoolExecutor(jobs) as pool:
            folds = list(pool.map(run, range(len(cases))))
    folds.sort(key=lambda f: f.case_id)
    return CrossValReport(folds, aggregate(folds), {k: cfg[k] for k in ("kernel", "crossval")})
