"""Control-affine dynamic bicycle model with Pacejka lateral tire forces.

Body-frame dynamic state x = [v_x, v_y, omega, delta], input
u = [delta_dot, F_x].  The derivative splits as

    xdot = f(x) + g(x) u

with the drift f carrying the tire forces and the control matrix g
projecting steering rate and longitudinal force through the current
steering angle.  Slip angles use a safeguarded longitudinal velocity

    v_safe = sign(v_x) * max(|v_x|, eps),  sign(0) = +1

so the model stays finite through standstill.  Lateral forces follow the
Magic Formula

    F_y(alpha) = -D sin(C arctan(B alpha - E (B alpha - arctan(B alpha))))

with per-axle peak factor D = mu m g / 2 and stiffness factors
B_f = C_f / (C D), B_r = C_r / (C D), which makes the small-slip slope
exactly -C_f (resp. -C_r).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

__all__ = [
    "VehicleParams",
    "BodyState",
    "WorldState",
    "ControlInput",
    "ActuatorBounds",
    "InconsistentWheelAngles",
    "slip_angles",
    "stiffness_factors",
    "lateral_force",
    "drift",
    "control_matrix",
    "body_derivative",
    "derivative_batch",
    "ackermann_effective_delta",
]


class InconsistentWheelAngles(ValueError):
    """Wheel angles do not share a turn center within tolerance."""


@dataclass(frozen=True)
class VehicleParams:
    """Single-track model parameters (SI units)."""

    m: float = 2000.0          # kg
    I_z: float = 3500.0        # kg m^2
    l_f: float = 1.4           # m, CoG to front axle
    l_r: float = 1.4           # m, CoG to rear axle
    C_f: float = 1.2e5         # N/rad front cornering stiffness
    C_r: float = 1.4e5         # N/rad rear cornering stiffness
    mu: float = 1.0            # friction
    C_shape: float = 1.5       # Magic Formula shape
    E_curv: float = 0.97       # Magic Formula curvature
    g_accel: float = 9.81      # m/s^2
    v_eps: float = 0.1         # m/s slip-angle safeguard

    def __post_init__(self):
        for name in ("m", "I_z", "l_f", "l_r", "C_f", "C_r", "mu", "C_shape", "v_eps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"VehicleParams.{name} must be > 0")
        if not (-10.0 < self.E_curv <= 1.0):
            raise ValueError("VehicleParams.E_curv must lie in (-10, 1]")


class BodyState(NamedTuple):
    v_x: float
    v_y: float
    omega: float
    delta: float


class WorldState(NamedTuple):
    """Pose plus body-frame dynamic states; psi kept wrapped to [-pi, pi]."""

    p_x: float
    p_y: float
    psi: float
    v_x: float
    v_y: float
    omega: float
    delta: float

    @property
    def body(self) -> BodyState:
        return BodyState(self.v_x, self.v_y, self.omega, self.delta)

    @classmethod
    def from_body(cls, p_x, p_y, psi, body: BodyState) -> "WorldState":
        return cls(p_x, p_y, psi, *body)


class ControlInput(NamedTuple):
    delta_dot: float
    F_x: float


@dataclass(frozen=True)
class ActuatorBounds:
    delta_dot_min: float = -0.7
    delta_dot_max: float = 0.7
    F_x_min: float = -11979.0
    F_x_max: float = 7000.0

    def __post_init__(self):
        if not self.delta_dot_min < self.delta_dot_max:
            raise ValueError("delta_dot bounds inverted")
        if not self.F_x_min < self.F_x_max:
            raise ValueError("F_x bounds inverted")
        if not self.F_x_min < 0:
            raise ValueError("F_x_min must be negative (braking available)")

    def clip(self, u: ControlInput) -> ControlInput:
        return ControlInput(
            min(max(u.delta_dot, self.delta_dot_min), self.delta_dot_max),
            min(max(u.F_x, self.F_x_min), self.F_x_max),
        )


def _v_safe(v_x: float, eps: float) -> float:
    # sign(0) = +1 keeps the rest state well defined
    if v_x < 0.0:
        return -max(-v_x, eps)
    return max(v_x, eps)


def slip_angles(s: BodyState, r: VehicleParams) -> tuple[float, float]:
    """Front and rear slip angles (rad)."""
    vs = _v_safe(s.v_x, r.v_eps)
    alpha_f = math.atan2(s.v_y + r.l_f * s.omega, vs) - s.delta
    alpha_r = math.atan2(s.v_y - r.l_r * s.omega, vs)
    return alpha_f, alpha_r


def stiffness_factors(r: VehicleParams) -> tuple[float, float, float]:
    """(B_f, B_r, D): per-axle stiffness factors and peak force."""
    D = r.mu * r.m * r.g_accel / 2.0
    return r.C_f / (r.C_shape * D), r.C_r / (r.C_shape * D), D


def lateral_force(alpha: float, B_axle: float, r: VehicleParams) -> float:
    """Magic Formula lateral force; positive slip gives negative force."""
    D = r.mu * r.m * r.g_accel / 2.0
    Ba = B_axle * alpha
    arg = Ba - r.E_curv * (Ba - math.atan(Ba))
    return -D * math.sin(r.C_shape * math.atan(arg))


def _tire_forces(s: BodyState, r: VehicleParams) -> tuple[float, float]:
    B_f, B_r, _ = stiffness_factors(r)
    alpha_f, alpha_r = slip_angles(s, r)
    return lateral_force(alpha_f, B_f, r), lateral_force(alpha_r, B_r, r)


def drift(s: BodyState, r: VehicleParams) -> np.ndarray:
    """Uncontrolled evolution f_phys(x); last row is 0 (delta_dot is input)."""
    F_yf, F_yr = _tire_forces(s, r)
    sd, cd = math.sin(s.delta), math.cos(s.delta)
    return np.array(
        [
            -F_yf * sd / r.m + s.v_y * s.omega,
            (F_yr + F_yf * cd) / r.m - s.v_x * s.omega,
            (r.l_f * F_yf * cd - r.l_r * F_yr) / r.I_z,
            0.0,
        ]
    )


def control_matrix(s: BodyState, r: VehicleParams) -> np.ndarray:
    """g_phys(x): column 1 actuates delta, column 2 projects F_x."""
    sd, cd = math.sin(s.delta), math.cos(s.delta)
    return np.array(
        [
            [0.0, cd / r.m],
            [0.0, sd / r.m],
            [0.0, r.l_f * sd / r.I_z],
            [1.0, 0.0],
        ]
    )


def body_derivative(s: BodyState, u: ControlInput, r: VehicleParams) -> tuple:
    """Fused drift(s) + control_matrix(s) @ u on plain floats (hot path).

    Mirrors the term grouping of the matrix form so results agree with
    drift + g @ u to machine precision.
    """
    F_yf, F_yr = _tire_forces(s, r)
    sd, cd = math.sin(s.delta), math.cos(s.delta)
    return (
        (-F_yf * sd / r.m + s.v_y * s.omega) + (cd / r.m) * u.F_x,
        ((F_yr + F_yf * cd) / r.m - s.v_x * s.omega) + (sd / r.m) * u.F_x,
        (r.l_f * F_yf * cd - r.l_r * F_yr) / r.I_z + (r.l_f * sd / r.I_z) * u.F_x,
        0.0 + u.delta_dot,
    )


def derivative_batch(states: np.ndarray, controls: np.ndarray, r: VehicleParams) -> np.ndarray:
    """Vectorized analytical derivative for (n,4) states and (n,2) controls."""
    v_x, v_y, omega, delta = states.T
    delta_dot, F_x = controls.T
    vs = np.where(v_x < 0, -np.maximum(-v_x, r.v_eps), np.maximum(v_x, r.v_eps))
    alpha_f = np.arctan2(v_y + r.l_f * omega, vs) - delta
    alpha_r = np.arctan2(v_y - r.l_r * omega, vs)
    B_f, B_r, D = stiffness_factors(r)

    def fy(alpha, B):
        Ba = B * alpha
        arg = Ba - r.E_curv * (Ba - np.arctan(Ba))
        return -D * np.sin(r.C_shape * np.arctan(arg))

    F_yf, F_yr = fy(alpha_f, B_f), fy(alpha_r, B_r)
    sd, cd = np.sin(delta), np.cos(delta)
    out = np.empty((states.shape[0], 4))
    out[:, 0] = (-F_yf * sd / r.m + v_y * omega) + (cd / r.m) * F_x
    out[:, 1] = ((F_yr + F_yf * cd) / r.m - v_x * omega) + (sd / r.m) * F_x
    out[:, 2] = (r.l_f * F_yf * cd - r.l_r * F_yr) / r.I_z + (r.l_f * sd / r.I_z) * F_x
    out[:, 3] = delta_dot
    return out


def ackermann_effective_delta(
    delta_inner: float, delta_outer: float, track_width: float, wheelbase: float
) -> float:
    """Equivalent single-track steering angle from two wheel angles.

    The wheels share a turn center when cot(delta_inner) and
    cot(delta_outer) differ by track/wheelbase; the midline radius is the
    wheelbase times the average cotangent, and the bicycle angle is
    atan(wheelbase / R_mid).  Implied radii disagreeing by more than 10%
    mean the angles are not Ackermann-consistent.
    """
    if abs(delta_inner) < 1e-9 and abs(delta_outer) < 1e-9:
        return 0.0
    sign = 1.0 if (delta_inner + delta_outer) > 0 else -1.0
    di, do = sign * delta_inner, sign * delta_outer
    if di <= 0 or do <= 0:
        raise InconsistentWheelAngles("wheel angles have opposite signs")
    cot_i, cot_o = 1.0 / math.tan(di), 1.0 / math.tan(do)
    R_from_inner = wheelbase * cot_i + track_width / 2.0
    R_from_outer = wheelbase * cot_o - track_width / 2.0
    mean_R = 0.5 * (abs(R_from_inner) + abs(R_from_outer))
    if abs(R_from_inner - R_from_outer) > 0.10 * mean_R:
        raise InconsistentWheelAngles(
            f"implied radii {R_from_inner:.3f} and {R_from_outer:.3f} disagree > 10%"
        )
    R_mid = wheelbase * 0.5 * (cot_i + cot_o)
    return sign * math.atan(wheelbase / R_mid)
