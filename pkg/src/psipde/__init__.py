"""Progressive sparse identification of PDEs from noisy spatio-temporal data.

The toolkit covers the full discovery pipeline: benchmark simulation with
calibrated noise injection, neural-surrogate denoising, derivative and
library-matrix construction, frequency-domain low-pass regression,
progressive term selection, candidate refinement by forward solving, and a
sequential-threshold ridge baseline.
"""

from psipde.core import (
    CandidateEquation,
    FieldTensor,
    Grid,
    PsigError,
    SimSpec,
    SystemKind,
    TermSpec,
    field_stats,
    read_field,
    write_field,
)

__version__ = "0.1.0"

__all__ = [
    "CandidateEquation",
    "FieldTensor",
    "Grid",
    "PsigError",
    "SimSpec",
    "SystemKind",
    "TermSpec",
    "field_stats",
    "read_field",
    "write_field",
    "__version__",
]
