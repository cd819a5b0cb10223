"""Surface-based spatial Bayesian GLM for task fMRI, fit by EM on sparse SPDE priors."""
from .em import (EMOptions, FitResult, PosteriorField, SubjectInput, classical_glm,
                 fit_subject, hutchinson_trace)
from .mesh import Mesh, build_fem_matrices, build_projector, load_mesh, save_mesh
from .spde import Hyperparameters, build_precision, build_qtilde

__version__ = "0.1.0"

__all__ = [
    "EMOptions", "FitResult", "Hyperparameters", "Mesh", "PosteriorField", "SubjectInput",
    "build_fem_matrices", "build_precision", "build_projector", "build_qtilde",
    "classical_glm", "fit_subject", "hutchinson_trace", "load_mesh", "save_mesh",
]
