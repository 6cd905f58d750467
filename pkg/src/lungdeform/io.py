"""File formats: ASCII OFF/PLY meshes, CSV displacement fields, JSON clips,
and on-disk synthetic case directories."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .mesh import InteriorPointSet, MeshError, SurfaceMesh
from .registration import LandmarkPair, anchor_landmark


class MeshFormatError(MeshError):
    def __init__(self, path, line, message):
        super().__init__(f"{path}:{line}: {message}")
        self.path = str(path)
        self.line = line


def _fmt(x: float) -> str:
    return repr(float(x))


def _tokens(path):
    """Non-empty, comment-stripped lines as (line number, tokens)."""
    with open(path, encoding="ascii") as fh:
        for no, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if line:
                yield no, line.split()


def _build(path, verts, tris, tri_lines):
    try:
        return SurfaceMesh(np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(tris, dtype=np.int64).reshape(-1, 3))
    except MeshError as exc:
        raise MeshFormatError(path, tri_lines[0] if tri_lines else 0, str(exc)) from exc


def _read_vertex(path, no, toks):
    if len(toks) < 3:
        raise MeshFormatError(path, no, "vertex needs 3 coordinates")
    try:
        return [float(t) for t in toks[:3]]
    except ValueError:
        raise MeshFormatError(path, no, f"bad vertex coordinates {toks[:3]}") from None


def _read_face(path, no, toks, n_verts):
    try:
        k = int(toks[0])
        idx = [int(t) for t in toks[1:1 + k]]
    except (ValueError, IndexError):
        raise MeshFormatError(path, no, "bad face record") from None
    if k != 3 or len(idx) != 3:
        raise MeshFormatError(path, no, "only triangles are supported")
    for i in idx:
        if not 0 <= i < n_verts:
            raise MeshFormatError(path, no, f"vertex index {i} out of range (0..{n_verts - 1})")
    return idx


def load_off(path) -> SurfaceMesh:
    lines = _tokens(path)
    try:
        no, head = next(lines)
    except StopIteration:
        raise MeshFormatError(path, 1, "empty file") from None
    if head[0] != "OFF":
        raise MeshFormatError(path, no, "missing OFF header")
    counts = head[1:]
    if not counts:
        no, counts = next(lines, (no + 1, []))
    try:
        nv, nf = int(counts[0]), int(counts[1])
    except (ValueError, IndexError):
        raise MeshFormatError(path, no, "bad element counts") from None
    verts, tris, tri_lines = [], [], []
    for _ in range(nv):
        no, toks = next(lines, (no + 1, None))
        if toks is None:
            raise MeshFormatError(path, no, "unexpected end of file in vertex list")
        verts.append(_read_vertex(path, no, toks))
    for _ in range(nf):
        no, toks = next(lines, (no + 1, None))
        if toks is None:
            raise MeshFormatError(path, no, "unexpected end of file in face list")
        tris.append(_read_face(path, no, toks, nv))
        tri_lines.append(no)
    return _build(path, verts, tris, tri_lines)


def save_off(mesh: SurfaceMesh, path):
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"OFF\n{mesh.n_vertices} {mesh.n_triangles} 0\n")
        for v in mesh.vertices:
            fh.write(" ".join(_fmt(x) for x in v) + "\n")
        for t in mesh.triangles:
            fh.write(f"3 {t[0]} {t[1]} {t[2]}\n")


def load_ply(path) -> SurfaceMesh:
    lines = _tokens(path)
    no, toks = next(lines, (1, None))
    if toks != ["ply"]:
        raise MeshFormatError(path, no, "missing ply magic")
    nv = nf = None
    for no, toks in lines:
        if toks[0] == "format" and toks[1:2] != ["ascii"]:
            raise MeshFormatError(path, no, "only ASCII PLY is supported")
        if toks[0] == "element":
            if toks[1] == "vertex":
                nv = int(toks[2])
            elif toks[1] == "face":
                nf = int(toks[2])
        if toks[0] == "end_header":
            break
    if nv is None or nf is None:
        raise MeshFormatError(path, no, "header lacks vertex or face element")
    verts, tris, tri_lines = [], [], []
    for _ in range(nv):
        no, toks = next(lines, (no + 1, None))
        if toks is None:
            raise MeshFormatError(path, no, "unexpected end of file in vertex list")
        verts.append(_read_vertex(path, no, toks))
    for _ in range(nf):
        no, toks = next(lines, (no + 1, None))
        if toks is None:
            raise MeshFormatError(path, no, "unexpected end of file in face list")
        tris.append(_read_face(path, no, toks, nv))
        tri_lines.append(no)
    return _build(path, verts, tris, tri_lines)


def save_ply(mesh: SurfaceMesh, path):
    with open(path, "w", encoding="ascii") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {mesh.n_vertices}\nproperty double x\nproperty double y\nproperty double z\n")
        fh.write(f"element face {mesh.n_triangles}\nproperty list uchar int vertex_indices\nend_header\n")
        for v in mesh.vertices:
            fh.write(" ".join(_fmt(x) for x in v) + "\n")
        for t in mesh.triangles:
            fh.write(f"3 {t[0]} {t[1]} {t[2]}\n")


_LOADERS = {".off": load_off, ".ply": load_ply}
_SAVERS = {".off": save_off, ".ply": save_ply}


def load_mesh(path) -> SurfaceMesh:
    """Read an ASCII OFF or PLY triangle mesh, chosen by file extension."""
    path = Path(path)
    ext = path.suffix.lower()
    if ext not in _LOADERS:
        raise MeshError(f"unsupported mesh extension {ext!r} (use .off or .ply)")
    if not path.exists():
        raise FileNotFoundError(path)
    return _LOADERS[ext](path)


def save_mesh(mesh: SurfaceMesh, path):
    path = Path(path)
    ext = path.suffix.lower()
    if ext not in _SAVERS:
        raise MeshError(f"unsupported mesh extension {ext!r} (use .off or .ply)")
    _SAVERS[ext](mesh, path)


def save_field(field, path):
    """Displacement field as CSV rows ``vertex, dx, dy, dz``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["vertex", "dx", "dy", "dz"])
        for i, d in enumerate(np.asarray(field)):
            w.writerow([i, _fmt(d[0]), _fmt(d[1]), _fmt(d[2])])


def load_field(path, n_vertices: int | None = None) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:1] != ["vertex"]:
        raise ValueError(f"{path}: missing CSV header")
    out = np.zeros((len(rows) - 1, 3))
    for line, row in enumerate(rows[1:], start=2):
        try:
            i = int(row[0])
            out[i] = [float(x) for x in row[1:4]]
        except (ValueError, IndexError):
            raise ValueError(f"{path}:{line}: bad displacement row") from None
    if n_vertices is not None and len(out) != n_vertices:
        raise ValueError(f"{path}: {len(out)} rows for {n_vertices} vertices")
    return out


def clips_to_json(clips) -> list[dict]:
    return [{"source": [float(x) for x in c.source_pos], "target": [float(x) for x in c.target_pos]} for c in clips]


def load_clip_positions(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path) as fh:
        data = json.load(fh)
    src = np.array([d["source"] for d in data], dtype=np.float64).reshape(-1, 3)
    tgt = np.array([d["target"] for d in data], dtype=np.float64).reshape(-1, 3)
    return src, tgt


def load_clips(path, source: SurfaceMesh) -> list[LandmarkPair]:
    src, tgt = load_clip_positions(path)
    return [anchor_landmark(source, s, t) for s, t in zip(src, tgt)]


def write_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# case directories ---------------------------------------------------------

CASE_FILES = ("inflated.off", "deflated.off", "clips.json")


@dataclass
class CaseRecord:
    """A case on disk; every referenced file is parsed by :func:`load_case`."""

    case_id: str
    source_path: Path
    target_path: Path
    clips_path: Path
    field_path: Path | None = None
    interior_path: Path | None = None
    params_path: Path | None = None
    frame_transform: np.ndarray | None = None


@dataclass
class LoadedCase:
    case_id: str
    inflated: SurfaceMesh
    deflated: SurfaceMesh
    clips: list[LandmarkPair]
    truth_field: np.ndarray | None = None
    interior: InteriorPointSet | None = None
    interior_deflated: np.ndarray | None = None
    params: dict | None = None


def save_case(case, directory):
    """Write a synthetic case as a directory of plain files."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_off(case.inflated, d / "inflated.off")
    save_off(case.deflated, d / "deflated.off")
    write_json(clips_to_json(case.clips), d / "clips.json")
    write_json(case.params.to_dict(), d / "params.json")
    save_field(case.truth_field, d / "truth_field.csv")
    if case.interior is not None and len(case.interior):
        write_json({"points": case.interior.points.tolist(), "deflated": np.asarray(case.interior_deflated).tolist(),
                    "names": list(case.interior.names)}, d / "interior.json")


def case_record(directory) -> CaseRecord:
    d = Path(directory)
    missing = [f for f in CASE_FILES if not (d / f).exists()]
    if missing:
        raise FileNotFoundError(f"case {d.name}: missing {', '.join(missing)}")
    opt = lambda name: (d / name) if (d / name).exists() else None  # noqa: E731
    frame = None
    if (d / "frame.json").exists():
        with open(d / "frame.json") as fh:
            frame = np.array(json.load(fh)["matrix"], dtype=np.float64)
    return CaseRecord(d.name, d / "inflated.off", d / "deflated.off", d / "clips.json",
                      opt("truth_field.csv"), opt("interior.json"), opt("params.json"), frame)


def load_case(rec: CaseRecord) -> LoadedCase:
    inflated = load_mesh(rec.source_path)
    deflated = load_mesh(rec.target_path)
    if rec.frame_transform is not None:
        T = rec.frame_transform
        inflated = inflated.transformed(T[:3, :3], T[:3, 3])
        deflated = deflated.transformed(T[:3, :3], T[:3, 3])
    src, tgt = load_clip_positions(rec.clips_path)
    if rec.frame_transform is not None:
        src = src @ T[:3, :3].T + T[:3, 3]
        tgt = tgt @ T[:3, :3].T + T[:3, 3]
    clips = [anchor_landmark(inflated, s, t) for s, t in zip(src, tgt)]
    field = None
    if rec.field_path is not None:
        field = load_field(rec.field_path, inflated.n_vertices)
        if rec.frame_transform is not None:
            field = field @ rec.frame_transform[:3, :3].T
    interior = interior_def = None
    if rec.interior_path is not None:
        with open(rec.interior_path) as fh:
            data = json.load(fh)
        interior = InteriorPointSet(np.array(data["points"], dtype=np.float64).reshape(-1, 3),
                                    tuple(data.get("names", ())))
        if "deflated" in data:
            interior_def = np.array(data["deflated"], dtype=np.float64).reshape(-1, 3)
    params = None
    if rec.params_path is not None:
        with open(rec.params_path) as fh:
            params = json.load(fh)
    return LoadedCase(rec.case_id, inflated, deflated, clips, field, interior, interior_def, params)


def load_dataset(directory) -> list[LoadedCase]:
    """Validate every case directory first, then load them in name order."""
    root = Path(directory)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {root} not found")
    dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not dirs:
        raise ValueError(f"no case directories under {root}")
    records = [case_record(p) for p in dirs]
    return [load_case(r) for r in records]
