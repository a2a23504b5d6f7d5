"""Robust particle mixture Kalman filtering with back-sampling of innovative
anomalies."""

from .baselines import FilterOutput, HuberConfig, classical_kf, huber_filter
from .calibration import calibrate, default_horizons, observability_index, steady_state
from .engine import CEBASS, AnomalyEvent, AnomalyReport, FilterConfig, Particle, anomaly_posteriors
from .errors import (
    CebassError,
    ConfigError,
    ConvergenceError,
    DataError,
    DegenerateFilterError,
    SingularCovarianceError,
    UnobservableModelError,
    ZeroColumnError,
)
from .model import GaussianState, NoiseScales, StateSpaceModel, kf_update
from .proposals import HyperParams

__version__ = "0.1.0"

__all__ = [
    "CEBASS",
    "AnomalyEvent",
    "AnomalyReport",
    "CebassError",
    "ConfigError",
    "ConvergenceError",
    "DataError",
    "DegenerateFilterError",
    "FilterConfig",
    "FilterOutput",
    "GaussianState",
    "HuberConfig",
    "HyperParams",
    "NoiseScales",
    "Particle",
    "SingularCovarianceError",
    "StateSpaceModel",
    "UnobservableModelError",
    "ZeroColumnError",
    "anomaly_posteriors",
    "calibrate",
    "classical_kf",
    "default_horizons",
    "huber_filter",
    "kf_update",
    "observability_index",
    "steady_state",
]
