import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geofence_guard.dynamics import (
    ActuatorBounds,
    BodyState,
    ControlInput,
    InconsistentWheelAngles,
    VehicleParams,
    WorldState,
    ackermann_effective_delta,
    body_derivative,
    control_matrix,
    derivative_batch,
    drift,
    lateral_force,
    slip_angles,
    stiffness_factors,
)

PARAMS = VehicleParams()


def random_states(rng, n):
    return [
        BodyState(
            float(rng.uniform(-5, 35)),
            float(rng.uniform(-5, 5)),
            float(rng.uniform(-1.5, 1.5)),
            float(rng.uniform(-0.6, 0.6)),
        )
        for _ in range(n)
    ]


# -- parameter validation ----------------------------------------------


def test_params_validation():
    with pytest.raises(ValueError):
        VehicleParams(m=-1)
    with pytest.raises(ValueError):
        VehicleParams(E_curv=1.5)
    VehicleParams(E_curv=1.0)  # boundary allowed


def test_bounds_validation_and_clip():
    with pytest.raises(ValueError):
        ActuatorBounds(F_x_min=10.0)
    with pytest.raises(ValueError):
        ActuatorBounds(delta_dot_min=1.0, delta_dot_max=-1.0)
    b = ActuatorBounds()
    assert b.clip(ControlInput(5.0, 1e6)) == ControlInput(b.delta_dot_max, b.F_x_max)


def test_world_state_body_view():
    x = WorldState(1, 2, 0.3, 10, 0.1, 0.02, 0.05)
    assert x.body == BodyState(10, 0.1, 0.02, 0.05)
    assert WorldState.from_body(1, 2, 0.3, x.body) == x


# -- slip angles -------------------------------------------------------


def test_slip_angles_trivial():
    assert slip_angles(BodyState(10, 0, 0, 0), PARAMS) == (0.0, 0.0)
    af, ar = slip_angles(BodyState(10, 0, 0, 0.1), PARAMS)
    assert af == pytest.approx(-0.1)
    assert ar == 0.0


def test_slip_angle_safeguard_active():
    # v_safe = sign(0) * max(0, 0.1) = +0.1
    _, ar = slip_angles(BodyState(0.0, 0.5, 0, 0), PARAMS)
    assert ar == pytest.approx(math.atan2(0.5, 0.1), abs=1e-12)
    assert ar == pytest.approx(1.3734, abs=1e-4)


def test_slip_angle_safeguard_reverse():
    af_fwd, _ = slip_angles(BodyState(0.05, 0.2, 0, 0), PARAMS)
    af_rev, _ = slip_angles(BodyState(-0.05, 0.2, 0, 0), PARAMS)
    assert af_fwd == pytest.approx(math.atan2(0.2, 0.1))
    assert af_rev == pytest.approx(math.atan2(0.2, -0.1))


# -- lateral force -----------------------------------------------------


def test_lateral_force_odd_and_zero():
    B_f, _, _ = stiffness_factors(PARAMS)
    assert lateral_force(0.0, B_f, PARAMS) == 0.0
    assert lateral_force(0.2, B_f, PARAMS) == pytest.approx(
        -lateral_force(-0.2, B_f, PARAMS)
    )


def test_lateral_force_slope_is_minus_stiffness():
    B_f, B_r, _ = stiffness_factors(PARAMS)
    h = 1e-6
    for B, C_axle in ((B_f, PARAMS.C_f), (B_r, PARAMS.C_r)):
        slope = (lateral_force(h, B, PARAMS) - lateral_force(-h, B, PARAMS)) / (2 * h)
        assert slope == pytest.approx(-C_axle, rel=1e-3)


def test_lateral_force_saturates_at_peak():
    B_f, _, D = stiffness_factors(PARAMS)
    alphas = np.linspace(0, 1.0, 2001)
    vals = np.array([abs(lateral_force(a, B_f, PARAMS)) for a in alphas])
    assert vals.max() <= D + 1e-9
    # the large-slip asymptote is D*|sin(C*pi/2)|
    assert abs(lateral_force(1e6, B_f, PARAMS)) == pytest.approx(
        D * abs(math.sin(PARAMS.C_shape * math.pi / 2)), rel=1e-3
    )


@settings(max_examples=300, deadline=None)
@given(alpha=st.floats(-5, 5), mu=st.floats(0.3, 1.5), cs=st.floats(1.1, 2.0))
def test_lateral_force_bounded_by_D(alpha, mu, cs):
    r = VehicleParams(mu=mu, C_shape=cs)
    B_f, _, D = stiffness_factors(r)
    assert abs(lateral_force(alpha, B_f, r)) <= D + 1e-9


# -- drift / control matrix --------------------------------------------


def test_drift_straight_coast_is_zero():
    np.testing.assert_array_equal(drift(BodyState(10, 0, 0, 0), PARAMS), np.zeros(4))


def test_drift_last_row_always_zero():
    rng = np.random.default_rng(0)
    for s in random_states(rng, 50):
        assert drift(s, PARAMS)[3] == 0.0


def test_drift_against_symbolic_oracle():
    sympy = pytest.importorskip("sympy")
    vx, vy, om, de, vs = sympy.symbols("vx vy om de vs")
    r = PARAMS
    D = r.mu * r.m * r.g_accel / 2
    Bf, Br = r.C_f / (r.C_shape * D), r.C_r / (r.C_shape * D)
    a_f = sympy.atan2(vy + r.l_f * om, vs) - de
    a_r = sympy.atan2(vy - r.l_r * om, vs)

    def fy(a, B):
        Ba = B * a
        return -D * sympy.sin(
            r.C_shape * sympy.atan(Ba - r.E_curv * (Ba - sympy.atan(Ba)))
        )

    Fyf, Fyr = fy(a_f, Bf), fy(a_r, Br)
    rows = [
        -Fyf * sympy.sin(de) / r.m + vy * om,
        (Fyr + Fyf * sympy.cos(de)) / r.m - vx * om,
        (r.l_f * Fyf * sympy.cos(de) - r.l_r * Fyr) / r.I_z,
    ]
    f_oracle = sympy.lambdify((vx, vy, om, de, vs), rows, "math")

    rng = np.random.default_rng(1)
    for s in random_states(rng, 20):
        v_safe = math.copysign(max(abs(s.v_x), r.v_eps), s.v_x) if s.v_x != 0 else r.v_eps
        expected = f_oracle(s.v_x, s.v_y, s.omega, s.delta, v_safe)
        got = drift(s, PARAMS)
        np.testing.assert_allclose(got[:3], expected, rtol=1e-12, atol=1e-12)


def test_control_matrix_values():
    g0 = control_matrix(BodyState(5, 0, 0, 0), PARAMS)
    np.testing.assert_allclose(g0[:, 1], [1 / PARAMS.m, 0, 0, 0])
    g = control_matrix(BodyState(5, 0, 0, math.pi / 6), VehicleParams(m=2000, I_z=3500, l_f=1.4))
    np.testing.assert_allclose(
        g[:, 1],
        [math.cos(math.pi / 6) / 2000, math.sin(math.pi / 6) / 2000,
         1.4 * math.sin(math.pi / 6) / 3500, 0.0],
        rtol=1e-15,
    )
    rng = np.random.default_rng(2)
    for s in random_states(rng, 20):
        gm = control_matrix(s, PARAMS)
        assert gm[3, 0] == 1.0 and gm[3, 1] == 0.0
        np.testing.assert_array_equal(gm[:3, 0], np.zeros(3))


def test_control_affinity_exact():
    rng = np.random.default_rng(3)
    for s in random_states(rng, 100):
        u1 = ControlInput(float(rng.uniform(-1, 1)), float(rng.uniform(-1e4, 7e3)))
        u2 = ControlInput(float(rng.uniform(-1, 1)), float(rng.uniform(-1e4, 7e3)))
        d1 = np.array(body_derivative(s, u1, PARAMS))
        d12 = np.array(body_derivative(s, ControlInput(u1[0] + u2[0], u1[1] + u2[1]), PARAMS))
        resid = d12 - d1 - control_matrix(s, PARAMS) @ np.array(u2)
        assert np.max(np.abs(resid)) <= 1e-9


def test_fused_derivative_matches_matrix_form():
    rng = np.random.default_rng(4)
    for s in random_states(rng, 100):
        u = ControlInput(float(rng.uniform(-1, 1)), float(rng.uniform(-1.2e4, 7e3)))
        fused = np.array(body_derivative(s, u, PARAMS))
        matrix = drift(s, PARAMS) + control_matrix(s, PARAMS) @ np.array(u)
        np.testing.assert_allclose(fused, matrix, rtol=1e-12, atol=1e-12)


def test_batch_derivative_matches_scalar():
    rng = np.random.default_rng(5)
    states = np.array(random_states(rng, 200))
    controls = np.stack(
        [rng.uniform(-1, 1, 200), rng.uniform(-1.2e4, 7e3, 200)], axis=1
    )
    batch = derivative_batch(states, controls, PARAMS)
    for i in range(200):
        scalar = body_derivative(BodyState(*states[i]), ControlInput(*controls[i]), PARAMS)
        np.testing.assert_allclose(batch[i], scalar, rtol=1e-12, atol=1e-12)


def test_lateral_symmetry():
    rng = np.random.default_rng(6)
    for s in random_states(rng, 100):
        sm = BodyState(s.v_x, -s.v_y, -s.omega, -s.delta)
        f, fm = drift(s, PARAMS), drift(sm, PARAMS)
        assert fm[0] == pytest.approx(f[0], abs=1e-9)
        assert fm[1] == pytest.approx(-f[1], abs=1e-9)
        assert fm[2] == pytest.approx(-f[2], abs=1e-9)


# -- Ackermann reduction -----------------------------------------------


def test_ackermann_trivial_zero():
    assert ackermann_effective_delta(0.0, 0.0, 1.6, 2.8) == 0.0


def test_ackermann_zero_track_limit():
    for d in (0.1, 0.3, -0.25):
        assert ackermann_effective_delta(d, d, 0.0, 2.8) == pytest.approx(d, abs=1e-12)


def test_ackermann_roundtrip():
    wheelbase, track, d_inner = 2.8, 1.6, 0.30
    R = wheelbase / math.tan(d_inner) + track / 2
    d_outer = math.atan(wheelbase / (R + track / 2))
    d_mid = ackermann_effective_delta(d_inner, d_outer, track, wheelbase)
    # reconstruct both wheel angles from the output radius
    R_mid = wheelbase / math.tan(d_mid)
    assert math.atan(wheelbase / (R_mid - track / 2)) == pytest.approx(d_inner, abs=1e-9)
    assert math.atan(wheelbase / (R_mid + track / 2)) == pytest.approx(d_outer, abs=1e-9)


def test_ackermann_inconsistent_raises():
    with pytest.raises(InconsistentWheelAngles):
        ackermann_effective_delta(0.30, 0.10, 1.6, 2.8)
    with pytest.raises(InconsistentWheelAngles):
        ackermann_effective_delta(0.30, -0.30, 1.6, 2.8)
