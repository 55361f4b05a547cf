"""Differential-integral neural operator for periodic 2D vorticity forecasting."""

from .diagnostics import (
    MetricSeries,
    SpectrumCurve,
    StabilityReport,
    correlation_series,
    enstrophy_spectrum,
    estimate_diff_dissipativity,
    estimate_int_operator_norm,
    estimate_spectral_radius,
    high_correlation_time,
    relative_l2,
    spectrum_slope,
    stability_report,
)
from .field import Grid2D, ScalarField2D, SpectralField2D, Trajectory, VelocityField2D
from .model import DinoConfig, DinoModel, forward_step, load_checkpoint, rollout, save_checkpoint
from .opdiff import DiffBranchConfig
from .opint import AttentionConfig
from .solver import ForcingSpec, InitialConditionSpec, SolverConfig, generate_dataset, simulate
from .storage import load_trajectory, save_trajectory
from .trainer import TrainConfig, TrainReport, evaluate_one_step, make_pairs, train

__version__ = "0.1.0"

__all__ = [
    "Grid2D", "ScalarField2D", "SpectralField2D", "VelocityField2D", "Trajectory",
    "ForcingSpec", "InitialConditionSpec", "SolverConfig", "simulate", "generate_dataset",
    "save_trajectory", "load_trajectory",
    "DiffBranchConfig", "AttentionConfig", "DinoConfig", "DinoModel",
    "forward_step", "rollout", "save_checkpoint", "load_checkpoint",
    "TrainConfig", "TrainReport", "make_pairs", "train", "evaluate_one_step",
    "relative_l2", "MetricSeries", "correlation_series", "high_correlation_time",
    "SpectrumCurve", "enstrophy_spectrum", "spectrum_slope",
    "StabilityReport", "estimate_int_operator_norm", "estimate_diff_dissipativity",
    "estimate_spectral_radius", "stability_report",
]
