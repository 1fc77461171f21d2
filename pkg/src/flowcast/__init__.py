"""Advection-based neural forecasting of gridded fields on a lat/lon grid."""

from .data import (DatasetManifest, SyntheticConfig, dataset_from_arrays, generate, read_frame, split_dataset,
                   synthetic_advection_dataset, write_frame)
from .dynamics import SystemState, advection_rhs, integrate, integrate_state, pack_state
from .forecast import Forecaster, persistence
from .grid import GridSpec
from .metrics import Region, acc, crps_gaussian, lat_rmse
from .model import AdvectionModel
from .network import ModelConfig, NetParams, init_params
from .training import NormStats, TrainConfig, fit, load_checkpoint, nll_loss
from .velocity import RbfPrior, VelocityFitConfig, estimate_velocity, infer_initial_velocity

__version__ = "0.1.0"

__all__ = [
    "AdvectionModel", "DatasetManifest", "Forecaster", "GridSpec", "ModelConfig", "NetParams", "NormStats",
    "RbfPrior", "Region", "SyntheticConfig", "SystemState", "TrainConfig", "VelocityFitConfig", "acc",
    "advection_rhs", "crps_gaussian", "dataset_from_arrays", "estimate_velocity", "fit", "generate",
    "infer_initial_velocity", "init_params", "integrate", "integrate_state", "lat_rmse", "load_checkpoint",
    "nll_loss", "pack_state", "persistence", "read_frame", "split_dataset", "synthetic_advection_dataset",
    "write_frame",
]
