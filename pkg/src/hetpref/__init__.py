"""Low-rank estimation and inference for heterogeneous pairwise preferences."""

from .dataio import ComparisonDataset, SyntheticConfig, build_gap_matrix, generate_theta, sample_comparisons
from .debias import DebiasedEstimates, debias_pipeline, nr_debias
from .estimator import EstimateBundle, SolverConfig, estimate_pipeline, solve_convex
from .inference import BootstrapConfig, RankIntervals
from .pairspace import PairSpace, lex_index, lex_pair, signed_index

__version__ = "0.1.0"

__all__ = [
    "BootstrapConfig",
    "ComparisonDataset",
    "DebiasedEstimates",
    "EstimateBundle",
    "PairSpace",
    "RankIntervals",
    "SolverConfig",
    "SyntheticConfig",
    "build_gap_matrix",
    "debias_pipeline",
    "estimate_pipeline",
    "generate_theta",
    "lex_index",
    "lex_pair",
    "nr_debias",
    "sample_comparisons",
    "signed_index",
    "solve_convex",
]
