"""Geofence enforcement for a single-track vehicle.

Physics-encoded control-affine dynamics with learned residual
corrections, a preview-based barrier filter solved as a tiny exact QP,
a braking-trigger baseline, and a desk-scale closed-loop harness that
scores containment, intervention precision, and clearance.
"""

from .dynamics import (
    ActuatorBounds,
    BodyState,
    ControlInput,
    VehicleParams,
    body_derivative,
)
from .geometry import Polygon, load_polygon, save_polygon
from .integrate import WorldState, rk4_step, rollout_zoh, semi_implicit_step
from .models import (
    AnalyticalModel,
    load_weights,
    make_neural_ode,
    make_pcarnn_shared,
    make_pcarnn_split,
    make_residual,
    save_weights,
)
from .safety import (
    DcbfConfig,
    DecisionKind,
    FilterDecision,
    dcbf_filter,
    emergency_brake,
    ttc_controller,
)
from .training import (
    Dataset,
    TrainConfig,
    TrajectorySample,
    calibrate_params,
    derivative_mse,
    train_residuals,
)

__version__ = "0.1.0"

__all__ = [
    "ActuatorBounds",
    "AnalyticalModel",
    "BodyState",
    "ControlInput",
    "Dataset",
    "DcbfConfig",
    "DecisionKind",
    "FilterDecision",
    "Polygon",
    "TrainConfig",
    "TrajectorySample",
    "VehicleParams",
    "WorldState",
    "body_derivative",
    "calibrate_params",
    "dcbf_filter",
    "derivative_mse",
    "emergency_brake",
    "load_polygon",
    "load_weights",
    "make_neural_ode",
    "make_pcarnn_shared",
    "make_pcarnn_split",
    "make_residual",
    "rk4_step",
    "rollout_zoh",
    "save_polygon",
    "save_weights",
    "semi_implicit_step",
    "train_residuals",
    "ttc_controller",
]
