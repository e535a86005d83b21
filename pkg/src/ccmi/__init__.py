"""Multiple imputation and weighting for case-cohort studies with missing data.

Submodules
----------
dataset   cohort container, CSV I/O, design matrices
glm       weighted GLM fitting, robust variance
datagen   scenario definitions and synthetic cohort generation
weights   sampling and complete-record weights
mi        chained-equations imputation and Rubin's rules
methods   the analysis arms
harness   replication loop and performance measures
cli       command-line entry point
"""
__version__ = "0.1.0"

from ._backend import BACKEND  # noqa: E402
from .dataset import BIS_SCHEMA, CohortData, read_csv, write_csv  # noqa: E402
from .glm import fit, sandwich_cov  # noqa: E402
from .mi import ImputationSpec, fcs_impute, pool_rubin  # noqa: E402
from .methods import METHOD_NAMES, method_spec, run_method  # noqa: E402

__all__ = ["BACKEND", "BIS_SCHEMA", "CohortData", "read_csv", "write_csv", "fit",
           "sandwich_cov", "ImputationSpec", "fcs_impute", "pool_rubin", "METHOD_NAMES",
           "method_spec", "run_method"]
