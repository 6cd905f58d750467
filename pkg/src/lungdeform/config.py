"""Pipeline configuration: one YAML file, every key optional."""
from __future__ import annotations

import copy
from pathlib import Path

import yaml

from .registration import RegistrationParams

DEFAULT_CONFIG_TEXT = """\
# lungdeform pipeline configuration. Missing keys take the values shown here.

seed: 0                      # base seed for synthetic datasets

synthetic:
  n_cases: 12                # number of paired cases
  vertex_budget: 500         # approx. vertices per lung surface
  ranges:                    # uniform ranges for deflation parameters
    contraction_ratio: [0.3, 0.6]   # deflated / inflated volume
    rotation_deg: [5.0, 25.0]       # rotation about the hilum axis
    sag_mm: [2.0, 10.0]             # gravity sag amplitude

registration:
  clip_weight: 1.0           # weight of the clip landmark term (0 disables clips)
  laplacian_weight: 1.0      # weight of the Laplacian preservation term
  max_iterations: 400
  convergence_tol: 1.0e-6    # stop when the relative energy decrease falls below
  initial_step: 1.0
  backtrack: 0.5             # step shrink factor in the line search
  growth: 2.0                # step growth factor between iterations
  armijo: 1.0e-4             # sufficient-decrease constant
  min_step: 1.0e-12
  smoothing: 100.0           # graph-Laplacian smoothing of the gradient
  translation_iterations: 100  # initial translation-only descent steps (0 skips)
  clip_snap_mm: 1.0e-3       # clips this close to their target are held fixed

kernel:
  lambda: 0.1                # ridge regularisation
  beta: null                 # kernel width; null = median heuristic
  divide_by_n: true          # divide the exponent by the number of samples
  mode: per-region           # per-region | per-patient
  sampling:
    n: 32                    # reference vertices per feature vector
    mode: fixed-ids          # fixed-ids (farthest-point on reference case) | nearest-k

crossval:
  displacements: truth       # training fields: truth | registration
  normalize: false           # rigidly align cases to the first case before training
  interior_neighbors: null   # surface vertices used to move interior points; null = all
  jobs: 1                    # folds run concurrently
"""

DEFAULT_CONFIG = yaml.safe_load(DEFAULT_CONFIG_TEXT)


def _merge(base: dict, override: dict, path="") -> dict:
    out = copy.deepcopy(base)
    for key, val in (override or {}).items():
        if key not in base:
            raise ValueError(f"unknown config key {path}{key}")
        if isinstance(base[key], dict) and isinstance(val, dict):
            out[key] = _merge(base[key], val, f"{path}{key}.")
        else:
            out[key] = val
    return out


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Defaults, then the YAML file at ``path``, then ``overrides``."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        with open(Path(path)) as fh:
            cfg = _merge(cfg, yaml.safe_load(fh) or {})
    if overrides:
        cfg = _merge(cfg, overrides)
    return cfg


def set_dotted(cfg: dict, dotted: str, value) -> dict:
    """Override one nested key, e.g. ``kernel.lambda=0.2``; value parsed as YAML."""
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        if k not in node or not isinstance(node[k], dict):
            raise ValueError(f"unknown config key {dotted}")
        node = node[k]
    if keys[-1] not in node:
        raise ValueError(f"unknown config key {dotted}")
    node[keys[-1]] = yaml.safe_load(value) if isinstance(value, str) else value
    return cfg


def registration_params(cfg: dict) -> RegistrationParams:
    r = cfg["registration"]
    return RegistrationParams(
        clip_weight=float(r["clip_weight"]),
        laplacian_weight=float(r["laplacian_weight"]),
        max_iterations=int(r["max_iterations"]),
        convergence_tol=float(r["convergence_tol"]),
        initial_step=float(r["initial_step"]),
        backtrack=float(r["backtrack"]),
        growth=float(r["growth"]),
        armijo=float(r["armijo"]),
        min_step=float(r["min_step"]),
        smoothing=float(r["smoothing"]),
        translation_iterations=int(r["translation_iterations"]),
        clip_snap_mm=float(r["clip_snap_mm"]),
    )
