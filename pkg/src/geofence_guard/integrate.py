"""Fixed-step integrators for the planar vehicle.

The full state is a WorldState: pose (p_x, p_y, psi) driven by kinematic
transport of the body velocities, body states driven by the dynamics
model.  Two steppers with different jobs:

* ``rk4_step``            classic fourth order, used wherever accuracy
                          matters (training data, truth rollouts, TTC)
* ``semi_implicit_step``  first order symplectic-style update used for
                          the safety-filter previews; velocities advance
                          first, the pose then moves with the *new*
                          velocities rotated by the *old* heading

Both hold the control fixed across the step (zero-order hold); heading
is wrapped to [-pi, pi) on the way out.
"""

from __future__ import annotations

import math

from .dynamics import WorldState

__all__ = [
    "wrap_angle",
    "full_derivative",
    "rk4_step",
    "semi_implicit_step",
    "rollout_zoh",
]

_TWO_PI = 2.0 * math.pi


def wrap_angle(psi: float) -> float:
    """Map any angle to the half-open interval [-pi, pi)."""
    return (psi + math.pi) % _TWO_PI - math.pi


def full_derivative(ws: WorldState, u, model):
    """Seven-component time derivative of the world state under model."""
    d = model.derivative(ws.body, u)
    c, s = math.cos(ws.psi), math.sin(ws.psi)
    return (
        ws.v_x * c - ws.v_y * s,
        ws.v_x * s + ws.v_y * c,
        ws.omega,
        d[0],
        d[1],
        d[2],
        d[3],
    )


def rk4_step(ws: WorldState, u, model, dt: float) -> WorldState:
    k1 = full_derivative(ws, u, model)
    half = 0.5 * dt
    k2 = full_derivative(WorldState(*(x + half * k for x, k in zip(ws, k1))), u, model)
    k3 = full_derivative(WorldState(*(x + half * k for x, k in zip(ws, k2))), u, model)
    k4 = full_derivative(WorldState(*(x + dt * k for x, k in zip(ws, k3))), u, model)
    sixth = dt / 6.0
    out = [
        x + sixth * (a + 2.0 * (b + c) + d)
        for x, a, b, c, d in zip(ws, k1, k2, k3, k4)
    ]
    out[2] = wrap_angle(out[2])
    return WorldState(*out)


def semi_implicit_step(ws: WorldState, u, model, dt: float) -> WorldState:
    d = model.derivative(ws.body, u)
    v_x = ws.v_x + dt * d[0]
    v_y = ws.v_y + dt * d[1]
    omega = ws.omega + dt * d[2]
    delta = ws.delta + dt * d[3]
    c, s = math.cos(ws.psi), math.sin(ws.psi)
    return WorldState(
        ws.p_x + dt * (v_x * c - v_y * s),
        ws.p_y + dt * (v_x * s + v_y * c),
        wrap_angle(ws.psi + dt * omega),
        v_x,
        v_y,
        omega,
        delta,
    )


def rollout_zoh(ws: WorldState, u, model, tau: float, n_sub: int, stepper=semi_implicit_step) -> WorldState:
    """Advance the state by tau under a held control, in n_sub substeps."""
    if tau <= 0.0:
        raise ValueError("tau must be positive")
    if n_sub < 1:
        raise ValueError("n_sub must be >= 1")
    dt = tau / n_sub
    for _ in range(n_sub):
        ws = stepper(ws, u, model, dt)
    return ws
