"""Lung deflation modelling: mesh registration with clip landmarks and
per-region kernel regression of displacement fields."""
from .mesh import SurfaceMesh, InteriorPointSet, MeshError
from .metrics import MetricsReport, hausdorff_distance, mean_distance, target_registration_error, volume_change_ratio
from .registration import LandmarkPair, RegistrationParams, RegistrationResult, anchor_landmark, register
from .kernel import KernelModel, SamplingScheme
from .synthetic import DeflationParams, SyntheticCase, make_dataset

__version__ = "0.1.0"
