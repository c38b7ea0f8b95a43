"""Preview-based safety filter and the max-braking baseline.

The filter previews the closed-loop state t_h seconds ahead under the
nominal command, reads the fence clearance there, and demands it stay
above a contracting schedule beta.  When the preview falls short, the
clearance is linearized in the two inputs (central/one-sided difference
in steering rate, a bound-secant toward full braking in force) and the
minimal deviation from the nominal command is found by the exact QP.
Anything numerically suspect collapses to a full emergency brake.

The TTC baseline answers a cruder question: would flat-out braking,
started one control period from now, still keep the vehicle inside?
If not it brakes immediately.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .dynamics import ActuatorBounds, ControlInput, WorldState
from .geometry import Polygon
from .integrate import rk4_step, rollout_zoh, semi_implicit_step
from .qp import QpProblem, QpStatus
from .qp import solve as qp_solve

__all__ = [
    "DegenerateSecant",
    "DcbfConfig",
    "DecisionKind",
    "FilterDecision",
    "kappa",
    "beta_schedule",
    "barrier_jacobian",
    "dcbf_filter",
    "emergency_brake",
    "ttc_unsafe",
    "ttc_controller",
    "TTC_BREACH_TOLERANCE",
]

TTC_BREACH_TOLERANCE = -0.5  # m; sdf below this counts as a breach
_TTC_GRID_DT = 0.1
_TTC_HORIZON = 5.0
_CONTROL_PERIOD = 0.02
_SECANT_EPS = 1e-9  # N; force gap below this has no braking authority


class DegenerateSecant(RuntimeWarning):
    """Nominal force already at the braking bound; force entry zeroed."""


class DecisionKind(enum.Enum):
    NoIntervention = "no_intervention"
    Corrected = "corrected"
    EmergencyBrake = "emergency_brake"


@dataclass(frozen=True)
class DcbfConfig:
    t_h: float = 0.30
    n_sub: int = 3
    gamma: float = 0.4
    h_target: float = 0.5
    eps_delta_dot: float = 0.25
    gamma_clip: float = 1e6
    force_scale: float = 1e-3
    rho_slack: float = 1e6

    def __post_init__(self):
        if not self.t_h > 0:
            raise ValueError("t_h must be positive")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if self.h_target < 0:
            raise ValueError("h_target must be nonnegative")
        if not self.eps_delta_dot > 0:
            raise ValueError("eps_delta_dot must be positive")
        if not self.n_sub >= 1:
            raise ValueError("n_sub must be >= 1")


class FilterDecision(NamedTuple):
    command: ControlInput
    kind: DecisionKind
    h_nom: float
    beta: float
    jacobian: tuple[float, float]
    slack_inf_norm: float


def kappa(cfg: DcbfConfig) -> float:
    """Contraction rate: beta decays by factor (1 - gamma) every t_h."""
    return -math.log(1.0 - cfg.gamma) / cfg.t_h


def beta_schedule(h0: float, tau: float, cfg: DcbfConfig) -> float:
    if not tau > 0:
        raise ValueError("tau must be positive")
    return max(cfg.h_target, h0 * math.exp(-kappa(cfg) * tau))


def emergency_brake(bounds: ActuatorBounds) -> ControlInput:
    return ControlInput(0.0, bounds.F_x_min)


def _terminal_h(m, x0: WorldState, u: ControlInput, poly: Polygon, cfg: DcbfConfig) -> float:
    ws = rollout_zoh(x0, u, m, cfg.t_h, cfg.n_sub, semi_implicit_step)
    return poly.signed_distance((ws.p_x, ws.p_y))


def _clip_mag(x: float, lim: float) -> float:
    return min(max(x, -lim), lim)


def barrier_jacobian(m, x0: WorldState, u_nom: ControlInput, bounds: ActuatorBounds,
                     poly: Polygon, cfg: DcbfConfig, h_nom: float | None = None):
    """Sensitivity of the previewed clearance to the two inputs.

    Steering rate: central difference over the clamped pair
    delta_dot_nom +- eps; when both clamp onto the same bound the
    difference is taken one-sided against the nominal point instead.
    Force: secant from the nominal command to full braking at the same
    steering rate.  With a nominal already at the braking bound there is
    no authority left; that entry is zero and a DegenerateSecant warning
    records it.  Entries are magnitude-clipped.  Returns (J, h_nom).
    """
    if h_nom is None:
        h_nom = _terminal_h(m, x0, u_nom, poly, cfg)

    dd_nom, f_nom = u_nom
    up = min(max(dd_nom + cfg.eps_delta_dot, bounds.delta_dot_min), bounds.delta_dot_max)
    dn = min(max(dd_nom - cfg.eps_delta_dot, bounds.delta_dot_min), bounds.delta_dot_max)
    if up > dn:
        h_up = _terminal_h(m, x0, ControlInput(up, f_nom), poly, cfg)
        h_dn = _terminal_h(m, x0, ControlInput(dn, f_nom), poly, cfg)
        j_steer = (h_up - h_dn) / (up - dn)
    else:
        # both clamped onto one bound: nominal sits >= eps outside it
        h_at = _terminal_h(m, x0, ControlInput(up, f_nom), poly, cfg)
        j_steer = (h_at - h_nom) / (up - dd_nom)

    if abs(f_nom - bounds.F_x_min) < _SECANT_EPS:
        warnings.warn(DegenerateSecant("nominal force at braking bound"))
        j_force = 0.0
    else:
        h_brk = _terminal_h(m, x0, ControlInput(dd_nom, bounds.F_x_min), poly, cfg)
        j_force = (h_brk - h_nom) / (bounds.F_x_min - f_nom)

    j = (_clip_mag(j_steer, cfg.gamma_clip), _clip_mag(j_force, cfg.gamma_clip))
    return j, h_nom


def dcbf_filter(m, x0: WorldState, u_nom: ControlInput, bounds: ActuatorBounds,
                poly: Polygon, cfg: DcbfConfig) -> FilterDecision:
    """One filter cycle: early exit, else linearize + QP, else brake."""
    h0 = poly.signed_distance((x0.p_x, x0.p_y))
    beta = beta_schedule(h0, cfg.t_h, cfg)
    h_nom = _terminal_h(m, x0, u_nom, poly, cfg)
    if h_nom >= beta:
        return FilterDecision(u_nom, DecisionKind.NoIntervention, h_nom, beta, (0.0, 0.0), 0.0)

    j, h_nom = barrier_jacobian(m, x0, u_nom, bounds, poly, cfg, h_nom=h_nom)
    a = np.array(j)
    b = beta - h_nom + float(a @ np.array(u_nom))
    problem = QpProblem(
        u_nom=np.array(u_nom),
        W=np.diag([1.0, cfg.force_scale**2]),
        rho=cfg.rho_slack,
        rows=((a, b),),
        u_min=np.array([bounds.delta_dot_min, bounds.F_x_min]),
        u_max=np.array([bounds.delta_dot_max, bounds.F_x_max]),
    )
    sol = qp_solve(problem)
    if sol.status is not QpStatus.Optimal:
        return FilterDecision(
            emergency_brake(bounds), DecisionKind.EmergencyBrake, h_nom, beta, j, 0.0
        )
    command = ControlInput(float(sol.u_star[0]), float(sol.u_star[1]))
    return FilterDecision(
        command, DecisionKind.Corrected, h_nom, beta, j, float(np.max(sol.xi_star))
    )


def ttc_unsafe(m, x0: WorldState, bounds: ActuatorBounds, poly: Polygon) -> bool:
    """Would braking flat-out from x0 cross the fence by more than the
    tolerance?  Samples a 0.1 s grid, stopping once the vehicle rests."""
    u_eb = emergency_brake(bounds)
    ws = x0
    n = int(round(_TTC_HORIZON / _TTC_GRID_DT))
    for k in range(n + 1):
        if poly.signed_distance((ws.p_x, ws.p_y)) < TTC_BREACH_TOLERANCE:
            return True
        if ws.v_x <= 0.0 or k == n:
            return False
        ws = rk4_step(ws, u_eb, m, _TTC_GRID_DT)
    return False


def ttc_controller(m, x0: WorldState, u_nom: ControlInput, bounds: ActuatorBounds,
                   poly: Polygon) -> FilterDecision:
    """Brake now iff the state one control period ahead fails the test."""
    x1 = rk4_step(x0, u_nom, m, _CONTROL_PERIOD)
    h0 = poly.signed_distance((x0.p_x, x0.p_y))
    if ttc_unsafe(m, x1, bounds, poly):
        return FilterDecision(
            emergency_brake(bounds), DecisionKind.EmergencyBrake, h0, 0.0, (0.0, 0.0), 0.0
        )
    return FilterDecision(u_nom, DecisionKind.NoIntervention, h0, 0.0, (0.0, 0.0), 0.0)
