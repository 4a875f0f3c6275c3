"""Transfer learning for high-dimensional quantile regression."""

__version__ = "0.1.0"

from .core import Role, Study, StudyFormatError, check_loss, compute_metrics
from .inference import DebiasedResult, InferenceSettings, debias
from .qc import Decision, QcSettings, quality_control, shapiro_wilk
from .simgen import ScenarioConfig, generate_scenario
from .solver import PenaltySpec, SolverSettings, solve_l1qr, solve_unpenalized_qr
from .transfer import (DetectionThresholds, OracleSetSpec, TransferEstimate, fit_transfer,
                       fit_with_known_set)

__all__ = [
    "Role", "Study", "StudyFormatError", "check_loss", "compute_metrics",
    "DebiasedResult", "InferenceSettings", "debias",
    "Decision", "QcSettings", "quality_control", "shapiro_wilk",
    "ScenarioConfig", "generate_scenario",
    "PenaltySpec", "SolverSettings", "solve_l1qr", "solve_unpenalized_qr",
    "DetectionThresholds", "OracleSetSpec", "TransferEstimate", "fit_transfer",
    "fit_with_known_set",
]
