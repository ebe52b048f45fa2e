"""Explicit finite-element shear tests of brain tissue and the brain-skull interface."""

from .cohesive import CohesiveLaw, CohesiveLawError, CohesiveState
from .material import Material, MaterialError, OgdenParams
from .mesh import Layer, Mesh, MeshError, generate_sample_mesh, load_mesh, save_mesh
from .solver import ForceDisplacementCurve, SimulationConfig, SolverError, run, stable_dt

__version__ = "0.1.0"

__all__ = [
    "CohesiveLaw", "CohesiveLawError", "CohesiveState",
    "Material", "MaterialError", "OgdenParams",
    "Layer", "Mesh", "MeshError", "generate_sample_mesh", "load_mesh", "save_mesh",
    "ForceDisplacementCurve", "SimulationConfig", "SolverError", "run", "stable_dt",
    "__version__",
]
