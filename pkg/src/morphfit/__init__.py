"""3D morphable model fitting toolkit: quaternion-pose projection, PNCC and
pose-adaptive features, parameter-space training costs, a cascaded linear
regressor, face profiling and NME evaluation."""

from .errors import (DegenerateInput, DegenerateModel, InvalidArgument, MorphfitError,
                     OutOfRange, SolverFailure)
from .model import (MorphableModel, ParamVector, compute_ncc, construct_shape, load_model,
                    pack, project, project_3d, rotation_from_euler, rotation_from_quaternion,
                    save_model, unpack)

__version__ = "0.1.0"

__all__ = [
    "DegenerateInput", "DegenerateModel", "InvalidArgument", "MorphfitError", "OutOfRange",
    "SolverFailure", "MorphableModel", "ParamVector", "compute_ncc", "construct_shape",
    "load_model", "pack", "project", "project_3d", "rotation_from_euler",
    "rotation_from_quaternion", "save_model", "unpack",
]
