"""Mixed multiscale finite elements for Darcy flow with random permeability."""
from .grid import GridHierarchy, build_hierarchy
from .randfield import CovarianceSpec, PermeabilityField, high_contrast_field, kl_decompose, sample_field
from .mixedfem import FlowSolution, SourceField, assemble_saddle, make_source, solve_fine
from .snapshot import LocalProblems, build_all_snapshots
from .spectral import build_offline_space, edge_spectral_problem
from .mssolver import MultiscaleSpace, load_space, save_space, solve_sample
from .enrichment import EnrichmentConfig, enrich
from .twophase import TwoPhaseConfig, impes_run
from .metrics import monte_carlo_sweep, velocity_error

__all__ = [
    "GridHierarchy", "build_hierarchy", "CovarianceSpec", "PermeabilityField", "high_contrast_field",
    "kl_decompose", "sample_field", "FlowSolution", "SourceField", "assemble_saddle", "make_source",
    "solve_fine", "LocalProblems", "build_all_snapshots", "build_offline_space", "edge_spectral_problem",
    "MultiscaleSpace", "load_space", "save_space", "solve_sample", "EnrichmentConfig", "enrich",
    "TwoPhaseConfig", "impes_run", "monte_carlo_sweep", "velocity_error",
]
