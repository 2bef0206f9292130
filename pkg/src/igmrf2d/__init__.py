"""Two-dimensional second-order intrinsic GMRF priors and a hierarchical
blood-pressure model fitted by Metropolis-within-Gibbs."""

from .diagnostics import diagnose, ess, split_rhat
from .errors import (
    ConfigurationError,
    ConstraintDegeneracyError,
    ImproperDistributionError,
    InvalidDimensionError,
    InvalidIndexError,
    MappingError,
    NumericalError,
    ValidationError,
)
from .gaussian import (
    CanonicalGaussian,
    LinearConstraint,
    condition_on_constraints,
    logdens_constrained,
    make_rng,
    sample_canonical,
    sample_constrained,
)
from .gmrf import (
    GridSpec,
    StructureKind,
    StructureMatrix,
    boundary_blocks,
    build_boundary_structure,
    build_rw1_precision,
    build_rw2_precision,
    build_thin_plate_structure,
    build_torus_C,
    build_torus_structure,
    eigendecompose,
    neighbor_count,
)
from .io import ingest_csv, load_config, read_chain, write_chain, write_dataset_csv
from .mcmc import ChainConfig, ChainOutput, Sampler, predictive_draws, run_chain
from .model import (
    Dataset,
    HierarchyMap,
    Level,
    ModelState,
    ObservationRecord,
    Scenario,
    build_translation,
    classify_scenario,
    constraint_matrix,
    log_likelihood,
)
from .sim import (
    SimDesign,
    coverage_and_error,
    cross_validate,
    export_fit_curve,
    make_cv_folds,
    simulate_dataset,
)

__all__ = [
    "boundary_blocks",
    "build_boundary_structure",
    "build_rw1_precision",
    "build_rw2_precision",
    "build_thin_plate_structure",
    "build_torus_C",
    "build_torus_structure",
    "build_translation",
    "CanonicalGaussian",
    "ChainConfig",
    "ChainOutput",
    "classify_scenario",
    "condition_on_constraints",
    "ConfigurationError",
    "constraint_matrix",
    "ConstraintDegeneracyError",
    "coverage_and_error",
    "cross_validate",
    "Dataset",
    "diagnose",
    "eigendecompose",
    "ess",
    "export_fit_curve",
    "GridSpec",
    "HierarchyMap",
    "ImproperDistributionError",
    "ingest_csv",
    "InvalidDimensionError",
    "InvalidIndexError",
    "Level",
    "LinearConstraint",
    "load_config",
    "log_likelihood",
    "logdens_constrained",
    "make_cv_folds",
    "make_rng",
    "MappingError",
    "ModelState",
    "neighbor_count",
    "NumericalError",
    "ObservationRecord",
    "predictive_draws",
    "read_chain",
    "run_chain",
    "sample_canonical",
    "sample_constrained",
    "Sampler",
    "Scenario",
    "SimDesign",
    "simulate_dataset",
    "split_rhat",
    "StructureKind",
    "StructureMatrix",
    "ValidationError",
    "write_chain",
    "write_dataset_csv",
]

__version__ = "0.1.0"
