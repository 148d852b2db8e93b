"""Sparse/dense mixture factor analysis with three-parameter-beta shrinkage."""

__version__ = "0.1.0"

from .model import (  # noqa: E402
    DataMatrix,
    FactorState,
    Hyperparameters,
    ModelError,
    NumericalError,
    ShrinkageState,
    SimTruth,
    gig_mode,
    inv_beta_pdf,
    tpb_pdf,
)
from .em import FitReport, fit_em  # noqa: E402
from .gibbs import ChainSummary, GibbsConfig, run_gibbs, sample_gig  # noqa: E402
from .simgen import SimConfig, gen_dataset, preset  # noqa: E402
from .stability import dense_stability, sparse_stability  # noqa: E402

__all__ = [
    "__version__",
    "ChainSummary",
    "DataMatrix",
    "FactorState",
    "FitReport",
    "GibbsConfig",
    "Hyperparameters",
    "ModelError",
    "NumericalError",
    "ShrinkageState",
    "SimConfig",
    "SimTruth",
    "dense_stability",
    "fit_em",
    "gen_dataset",
    "gig_mode",
    "inv_beta_pdf",
    "preset",
    "run_gibbs",
    "sample_gig",
    "sparse_stability",
    "tpb_pdf",
]
