"""Dynamic network spillover estimation for short panels with two groups of units."""
from .errors import EstimationError
from .estimator import EstimationResult, estimate
from .inference import chi2_1_quantile, squared_t_stats, stepdown
from .instruments import IvOption
from .panel import ClusterMap, GroupPartition, NetworkStack, PanelDataset, validate_dataset
from .simulate import SimulationConfig, TrueParams, mc_study, simulate_panel

__version__ = "0.1.0"

__all__ = [
    "ClusterMap", "EstimationError", "EstimationResult", "GroupPartition", "IvOption",
    "NetworkStack", "PanelDataset", "SimulationConfig", "TrueParams", "chi2_1_quantile",
    "estimate", "mc_study", "simulate_panel", "squared_t_stats", "stepdown",
    "validate_dataset",
]
