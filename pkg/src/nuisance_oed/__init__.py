"""Expected information gain for experimental design with nuisance parameters.

Double-loop Monte Carlo (plain, small-noise corrected, importance sampled),
Laplace-based Monte Carlo, the sample-size allocation rules tying them to an
error tolerance, and a complete-electrode finite element model of a two-ply
laminate as the heavyweight forward model.
"""

from .core import (DataSet, ExperimentSpec, ForwardModel, GaussianPrior, RngStream, UniformBoxPrior,
                   sample_prior, simulate_data)
from .errors import (DegeneratePilot, Infeasible, InvalidDesign, KirchhoffViolation, MapFailure,
                     NoConvergence, NoRootInUnitInterval, NotPD, NotSPD, OEDError, SolverFailure)
from .estimators import EigEstimate, dlmc_nuisance_free, dlmc_small_noise, dlmc_two_loops, dlmcis, mcla
from .laplace import LaplacePosterior, find_map
from .allocation import OptimalSetting, PilotConstants, allocate

__version__ = "0.1.0"

__all__ = [
    "DataSet", "ExperimentSpec", "ForwardModel", "GaussianPrior", "RngStream", "UniformBoxPrior",
    "sample_prior", "simulate_data", "DegeneratePilot", "Infeasible", "InvalidDesign", "KirchhoffViolation",
    "MapFailure", "NoConvergence", "NoRootInUnitInterval", "NotPD", "NotSPD", "OEDError", "SolverFailure",
    "EigEstimate", "dlmc_nuisance_free", "dlmc_small_noise", "dlmc_two_loops", "dlmcis", "mcla",
    "LaplacePosterior", "find_map", "OptimalSetting", "PilotConstants", "allocate", "__version__",
]
