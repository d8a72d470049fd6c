"""Functional ordinal regression on surfaces represented as currents in a vector-valued RKHS."""

__version__ = "0.1.0"

from .errors import (ConfigError, ConvergenceError, CurrentGLMError, DataError,  # noqa: E402
                     MeshFormatError, NumericalError, SingularSystemError)
from .geometry import TriMesh, load_mesh, triangle_descriptors, write_off  # noqa: E402
from .rkhs import (CurrentRepr, Grid, KernelSpec, build_grid, current_from_mesh,  # noqa: E402
                   hk_inner, l2_inner, project_to_grid)
from .bases import (BasisSet, build_basis, coefficients, covariance_basis,  # noqa: E402
                    kernel_basis, mixed_basis)
from .ordreg import (OrdinalDataset, OrdinalModel, fit_fixed, fit_mixed,  # noqa: E402
                     linear_predictor, predict_probs)
from .pipeline import StudyConfig, agreement_table, assemble_features, loso_cv  # noqa: E402

__all__ = [
    "ConfigError", "ConvergenceError", "CurrentGLMError", "DataError", "MeshFormatError",
    "NumericalError", "SingularSystemError", "TriMesh", "load_mesh", "triangle_descriptors",
    "write_off", "CurrentRepr", "Grid", "KernelSpec", "build_grid", "current_from_mesh",
    "hk_inner", "l2_inner", "project_to_grid", "BasisSet", "build_basis", "coefficients",
    "covariance_basis", "kernel_basis", "mixed_basis", "OrdinalDataset", "OrdinalModel",
    "fit_fixed", "fit_mixed", "linear_predictor", "predict_probs", "StudyConfig",
    "agreement_table", "assemble_features", "loso_cv",
]
