"""Command-line entry point: ``lungdeform <verb> ...``.

Exit codes: 0 success, 1 validation error, 2 numerical failure.
"""
from __future__ import annotations

import functools
import json
import logging
import sys
from pathlib import Path

import click
import numpy as np

from . import io, kernel
from .config import DEFAULT_CONFIG_TEXT, load_config, registration_params, set_dotted
from .crossval import FoldError, run_crossval
from .metrics import metrics_report, volume_change_ratio
from .registration import RegistrationDiverged, register
from .synthetic import make_dataset

EXIT_VALIDATION = 1
EXIT_NUMERICAL = 2


def _guarded(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (RegistrationDiverged, kernel.SingularSystemError, np.linalg.LinAlgError) as exc:
            click.echo(f"numerical failure: {exc}", err=True)
            sys.exit(EXIT_NUMERICAL)
        except FoldError as exc:
            click.echo(str(exc), err=True)
            numerical = isinstance(exc.cause, (RegistrationDiverged, np.linalg.LinAlgError))
            sys.exit(EXIT_NUMERICAL if numerical else EXIT_VALIDATION)
        except (ValueError, FileNotFoundError, KeyError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_VALIDATION)
    return wrapper


def _config(path, sets):
    cfg = load_config(path)
    for item in sets:
        key, _, value = item.partition("=")
        set_dotted(cfg, key, value)
    return cfg


config_option = click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
                             help="YAML configuration file.")
set_option = click.option("--set", "sets", multiple=True, metavar="KEY=VALUE",
                          help="Override a config key, e.g. kernel.lambda=0.2 (repeatable).")


def _round(obj, nd=6):
    if isinstance(obj, float):
        return round(obj, nd)
    if isinstance(obj, dict):
        return {k: _round(v, nd) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_round(v, nd) for v in obj]
    return obj


def _emit(obj, out):
    text = json.dumps(_round(obj), indent=2, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n")
    else:
        click.echo(text)


class _Group(click.Group):
    """Maps click usage errors to the validation exit code."""

    def main(self, *args, standalone_mode=True, **kwargs):
        if not standalone_mode:
            return super().main(*args, standalone_mode=False, **kwargs)
        try:
            rv = super().main(*args, standalone_mode=False, **kwargs)
        except click.ClickException as exc:
            exc.show()
            sys.exit(EXIT_VALIDATION)
        except click.Abort:
            click.echo("Aborted!", err=True)
            sys.exit(EXIT_VALIDATION)
        sys.exit(rv if isinstance(rv, int) else 0)


@click.group(cls=_Group)
@click.option("-v", "--verbose", is_flag=True)
def main(verbose):
    """Pneumothorax-style lung deformation toolkit."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")


@main.command("default-config")
def default_config():
    """Print the default configuration file."""
    click.echo(DEFAULT_CONFIG_TEXT, nl=False)


@main.command()
@click.option("--out", required=True, type=click.Path(file_okay=False), help="Dataset directory to create.")
@click.option("--n-cases", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--vertex-budget", type=int, default=None)
@config_option
@set_option
@_guarded
def generate(out, n_cases, seed, vertex_budget, config_path, sets):
    """Write a synthetic paired dataset, one directory per case."""
    cfg = _config(config_path, sets)
    syn = cfg["synthetic"]
    cases = make_dataset(n_cases or syn["n_cases"], cfg["seed"] if seed is None else seed,
                         {k: tuple(v) for k, v in syn["ranges"].items()},
                         vertex_budget or syn["vertex_budget"])
    root = Path(out)
    for c in cases:
        io.save_case(c, root / c.case_id)
    summary = {c.case_id: {"vertices": c.inflated.n_vertices,
                           "volume_change_ratio": volume_change_ratio(c.inflated, c.deflated),
                           **c.params.to_dict()} for c in cases}
    _emit(summary, root / "summary.json")
    click.echo(f"wrote {len(cases)} cases to {root}")


@main.command("register")
@click.option("--source", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--target", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--clips", "clips_path", type=click.Path(exists=True, dir_okay=False), help="Clip JSON file.")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@config_option
@set_option
@_guarded
def register_cmd(source, target, clips_path, out, config_path, sets):
    """Register one source mesh onto a target mesh."""
    cfg = _config(config_path, sets)
    src = io.load_mesh(source)
    tgt = io.load_mesh(target)
    clips = io.load_clips(clips_path, src) if clips_path else []
    res = register(src, tgt, clips, registration_params(cfg))
    d = Path(out)
    d.mkdir(parents=True, exist_ok=True)
    io.save_mesh(res.deformed, d / "deformed.off")
    io.save_field(res.displacement, d / "displacement.csv")
    (d / "energy_trace.csv").write_text(res.trace_csv())
    _emit({"metrics": res.metrics.to_dict(), "converged": res.converged,
           "iterations": res.energy_trace[-1][0]}, d / "report.json")
    click.echo(f"MD {res.metrics.md_mm:.3f} mm, HD {res.metrics.hd_mm:.3f} mm, TRE {res.metrics.tre_mm}")


@main.command("fit")
@click.option("--dataset", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Model JSON to write.")
@click.option("--exclude", multiple=True, help="Case id to leave out (repeatable).")
@config_option
@set_option
@_guarded
def fit_cmd(dataset, out, exclude, config_path, sets):
    """Fit a kernel model on a dataset's displacement fields."""
    cfg = _config(config_path, sets)
    cases = [c for c in io.load_dataset(dataset) if c.case_id not in set(exclude)]
    if not cases:
        raise ValueError("no training cases left")
    reg_params = registration_params(cfg)
    train = []
    for c in cases:
        if cfg["crossval"]["displacements"] == "registration" or c.truth_field is None:
            disp = register(c.inflated, c.deflated, c.clips, reg_params).displacement
        else:
            disp = c.truth_field
        train.append(kernel.TrainingCase(c.case_id, c.inflated, disp))
    kc = cfg["kernel"]
    sc = kc["sampling"]
    scheme = (kernel.fixed_scheme(train[0].mesh, int(sc["n"])) if sc["mode"] == "fixed-ids"
              else kernel.SamplingScheme(int(sc["n"]), "nearest-k"))
    model = kernel.fit_cases(train, scheme, lam=float(kc["lambda"]),
                             beta=None if kc["beta"] is None else float(kc["beta"]),
                             mode=kc["mode"], divide_by_n=bool(kc["divide_by_n"]))
    Path(out).write_text(model.to_json())
    click.echo(f"fitted {model.n_train} samples from {len(train)} cases, beta={model.beta:.6g}")


@main.command("predict")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--mesh", "mesh_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Predicted deflated mesh (.off/.ply).")
@click.option("--field-out", type=click.Path(dir_okay=False), help="Also write the displacement CSV.")
@click.option("--interior", "interior_path", type=click.Path(exists=True, dir_okay=False),
              help="JSON with interior 'points' to move along.")
@_guarded
def predict_cmd(model_path, mesh_path, out, field_out, interior_path):
    """Predict the deflated state of an inflated mesh."""
    model = kernel.KernelModel.from_json(Path(model_path).read_text())
    mesh = io.load_mesh(mesh_path)
    disp = kernel.predict_mesh(model, mesh)
    predicted = mesh.with_vertices(mesh.vertices + disp)
    io.save_mesh(predicted, out)
    if field_out:
        io.save_field(disp, field_out)
    summary = {"volume_change_ratio": volume_change_ratio(mesh, predicted)}
    if interior_path:
        pts = np.array(json.loads(Path(interior_path).read_text())["points"], dtype=float).reshape(-1, 3)
        moved = pts + kernel.interpolate_interior(mesh, disp, pts)
        summary["interior"] = moved.tolist()
    _emit(summary, Path(out).with_suffix(".json"))
    click.echo(f"predicted volume change ratio {summary['volume_change_ratio']:.4f}")


@main.command("crossval")
@click.option("--dataset", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@config_option
@set_option
@_guarded
def crossval_cmd(dataset, out, config_path, sets):
    """Leave-one-out cross-validation over a dataset directory."""
    cfg = _config(config_path, sets)
    cases = io.load_dataset(dataset)
    report = run_crossval(cases, cfg)
    d = Path(out)
    d.mkdir(parents=True, exist_ok=True)
    (d / "crossval.json").write_text(report.to_json() + "\n")
    (d / "crossval.txt").write_text(report.to_text())
    click.echo(report.to_text(), nl=False)


@main.command("metrics")
@click.option("--a", "a_path", required=True, type=click.Path(exists=True, dir_okay=False), help="Predicted/registered mesh.")
@click.option("--b", "b_path", required=True, type=click.Path(exists=True, dir_okay=False), help="Reference mesh.")
@click.option("--landmarks-a", type=click.Path(exists=True, dir_okay=False), help="JSON list of points on a.")
@click.option("--landmarks-b", type=click.Path(exists=True, dir_okay=False), help="JSON list of points on b.")
@click.option("--inflated", type=click.Path(exists=True, dir_okay=False), help="Inflated mesh for the volume ratio of a.")
@click.option("--out", type=click.Path(dir_okay=False))
@_guarded
def metrics_cmd(a_path, b_path, landmarks_a, landmarks_b, inflated, out):
    """Compare two meshes: MD, HD, landmark TRE and volume-change ratio."""
    a = io.load_mesh(a_path)
    b = io.load_mesh(b_path)
    la = lb = None
    if landmarks_a or landmarks_b:
        if not (landmarks_a and landmarks_b):
            raise ValueError("give both --landmarks-a and --landmarks-b")
        la = json.loads(Path(landmarks_a).read_text())
        lb = json.loads(Path(landmarks_b).read_text())
    rep = metrics_report(a, b, la, lb, io.load_mesh(inflated) if inflated else None)
    d = rep.to_dict()
    if not inflated:
        d["volume_change_ratio"] = None
    _emit(d, out)


if __name__ == "__main__":
    main()
