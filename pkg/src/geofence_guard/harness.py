"""Synthetic plant, scenario sampling, closed-loop episodes, and metrics.

The plant is what every controller is judged against: the same
single-track model the filter previews internally, but with
multiplicative parameter perturbations, quadratic longitudinal drag,
and a first-order lag on the steering-rate command.  With all three
switched off it reduces bit-for-bit to ``rk4_step`` on the analytical
model, so any closed-loop gap is attributable to the mismatch knobs.

Scenarios are rejection-sampled: a candidate initial state is kept only
if full braking from it stops inside the fence, so "safe by giving up"
is always available and an intervention failure is a controller fault
rather than an impossible ask.  Each scenario carries a ground-truth
label obtained by rolling the nominal policy with no controller at all
(including the forced braking tail every episode ends with), which is
exactly what a null-controller episode reproduces.

Metrics are counted per episode: an episode is predicted-positive if
the controller ever intervened, ground-truth-positive by the scenario
label, and a containment failure (CF) is a ground-truth-positive
episode where intervention happened but the fence was still crossed.
"""

from __future__ import annotations

import bisect
import csv
import dataclasses
import enum
import math
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from .dynamics import (
    ActuatorBounds,
    BodyState,
    ControlInput,
    VehicleParams,
    WorldState,
    body_derivative,
)
from .geometry import Polygon
from .integrate import rk4_step, rollout_zoh, semi_implicit_step, wrap_angle
from .models import AnalyticalModel
from .safety import (
    DcbfConfig,
    DecisionKind,
    FilterDecision,
    dcbf_filter,
    emergency_brake,
    ttc_controller,
)

__all__ = [
    "CONTROL_PERIOD",
    "REST_SPEED",
    "BREACH_DEPTH",
    "SPEED_THRESHOLD",
    "STEER_THRESHOLD",
    "STEER_LOCK",
    "POLICY_FAMILIES",
    "SamplingExhausted",
    "PlantConfig",
    "plant_step",
    "PiecewiseControl",
    "sample_policy",
    "Label",
    "Regime",
    "Scenario",
    "applied_command",
    "panic_brake_solvable",
    "generate_scenarios",
    "null_controller",
    "dcbf_controller",
    "ttc_baseline_controller",
    "EpisodeSummary",
    "EpisodeLog",
    "run_episode",
    "MetricsReport",
    "compute_metrics",
    "format_metrics",
    "linearity_analysis",
    "LINEARITY_CHANNELS",
    "write_episode_csv",
    "read_episode_summary",
    "write_metrics_csv",
    "write_linearity_csv",
]

CONTROL_PERIOD = 0.02   # s, controller cycle
REST_SPEED = 0.01       # m/s, below this the vehicle counts as stopped
BREACH_DEPTH = 5.0      # m outside the fence; deeper ends the episode
_TAIL_MAX = 20.0        # s cap on the forced braking tail

# regime split thresholds: initial speed and peak steering angle
SPEED_THRESHOLD = 8.0   # m/s
STEER_THRESHOLD = 0.35  # rad

STEER_LOCK = 0.6        # rad, mechanical steering limit at the plant


class SamplingExhausted(RuntimeError):
    """Rejection sampling burned its candidate budget before filling n."""


# -- ground-truth plant -------------------------------------------------


@dataclasses.dataclass(frozen=True)
class PlantConfig:
    """Mismatch knobs layered on the analytical single-track model.

    ``param_perturbation`` maps VehicleParams field names to
    multiplicative factors; drag is quadratic in v_x; the steering-rate
    command passes through a first-order lag with time constant
    ``steering_lag_tau`` (0 disables the lag state entirely).
    """

    base: VehicleParams = VehicleParams()
    param_perturbation: Mapping[str, float] = dataclasses.field(default_factory=dict)
    drag_coeff: float = 0.4      # N s^2 / m^2
    steering_lag_tau: float = 0.05  # s

    def __post_init__(self):
        for name, factor in dict(self.param_perturbation).items():
            if not hasattr(self.base, name):
                raise ValueError(f"unknown vehicle parameter {name!r}")
            if not 0.5 <= factor <= 2.0:
                raise ValueError(f"perturbation factor for {name} must lie in [0.5, 2.0]")
        if self.drag_coeff < 0:
            raise ValueError("drag_coeff must be nonnegative")
        if self.steering_lag_tau < 0:
            raise ValueError("steering_lag_tau must be nonnegative")
        object.__setattr__(self, "param_perturbation", dict(self.param_perturbation))
        scaled = {
            k: getattr(self.base, k) * f for k, f in self.param_perturbation.items()
        }
        object.__setattr__(
            self, "_params", dataclasses.replace(self.base, **scaled) if scaled else self.base
        )

    @property
    def params(self) -> VehicleParams:
        """Perturbed parameter set actually driving the plant."""
        return self._params


class _DragModel:
    """Analytical body dynamics plus quadratic longitudinal drag."""

    def __init__(self, params: VehicleParams, drag: float):
        self.params = params
        self.drag = drag

    def derivative(self, s: BodyState, u: ControlInput):
        d = body_derivative(s, u, self.params)
        return (d[0] - self.drag * s.v_x * abs(s.v_x) / self.params.m, d[1], d[2], d[3])


def _lagged_rates(params, drag, tau, y, u: ControlInput):
    # y = (p_x, p_y, psi, v_x, v_y, omega, delta, steer_rate)
    rate = y[7]
    d = body_derivative(BodyState(y[3], y[4], y[5], y[6]), ControlInput(rate, u.F_x), params)
    c, s = math.cos(y[2]), math.sin(y[2])
    return (
        y[3] * c - y[4] * s,
        y[3] * s + y[4] * c,
        y[5],
        d[0] - drag * y[3] * abs(y[3]) / params.m,
        d[1],
        d[2],
        d[3],
        (u.delta_dot - rate) / tau,
    )


def plant_step(cfg: PlantConfig, x: WorldState, u: ControlInput, dt: float,
               steer_rate: float = 0.0) -> tuple[WorldState, float]:
    """One RK4 step of the ground-truth plant.

    Returns (next state, next effective steering rate).  The rate is the
    lag state and must be threaded between consecutive calls; with
    ``steering_lag_tau == 0`` the command applies directly and the
    returned rate is just ``u.delta_dot``.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    params = cfg.params
    tau = cfg.steering_lag_tau
    if tau == 0.0:
        model = AnalyticalModel(params) if cfg.drag_coeff == 0.0 else _DragModel(params, cfg.drag_coeff)
        return rk4_step(x, u, model, dt), u.delta_dot
    y = (*x, steer_rate)
    k1 = _lagged_rates(params, cfg.drag_coeff, tau, y, u)
    half = 0.5 * dt
    k2 = _lagged_rates(params, cfg.drag_coeff, tau,
                       tuple(a + half * k for a, k in zip(y, k1)), u)
    k3 = _lagged_rates(params, cfg.drag_coeff, tau,
                       tuple(a + half * k for a, k in zip(y, k2)), u)
    k4 = _lagged_rates(params, cfg.drag_coeff, tau,
                       tuple(a + dt * k for a, k in zip(y, k3)), u)
    sixth = dt / 6.0
    out = [a + sixth * (p + 2.0 * (q + r) + s)
           for a, p, q, r, s in zip(y, k1, k2, k3, k4)]
    out[2] = wrap_angle(out[2])
    return WorldState(*out[:7]), out[7]


# -- nominal policies ---------------------------------------------------

POLICY_FAMILIES = ("constant", "step", "ramp", "sinusoid")
_POLICY_SEG_DT = 0.25  # s, piecewise-constant segment length


@dataclasses.dataclass(frozen=True)
class PiecewiseControl:
    """Piecewise-constant (delta_dot, F_x) schedule; the last segment holds."""

    times: tuple[float, ...]
    controls: tuple[ControlInput, ...]
    steer_family: str = ""
    force_family: str = ""

    def __post_init__(self):
        if not self.times or len(self.times) != len(self.controls):
            raise ValueError("times and controls must be nonempty and aligned")
        if self.times[0] != 0.0:
            raise ValueError("schedule must start at t = 0")
        if any(b <= a for a, b in zip(self.times, self.times[1:])):
            raise ValueError("segment times must increase strictly")
        object.__setattr__(self, "times", tuple(float(t) for t in self.times))
        object.__setattr__(self, "controls", tuple(ControlInput(*c) for c in self.controls))

    def at(self, t: float) -> ControlInput:
        i = bisect.bisect_right(self.times, t) - 1
        return self.controls[max(i, 0)]


def _profile(rng: np.random.Generator, family: str, lo: float, hi: float,
             t_grid: np.ndarray) -> np.ndarray:
    span_t = t_grid[-1] if t_grid[-1] > 0 else 1.0
    if family == "constant":
        return np.full(t_grid.shape, rng.uniform(lo, hi))
    if family == "step":
        t_s = rng.uniform(0.2, 0.8) * span_t
        a, b = rng.uniform(lo, hi), rng.uniform(lo, hi)
        return np.where(t_grid < t_s, a, b)
    if family == "ramp":
        a, b = rng.uniform(lo, hi), rng.uniform(lo, hi)
        return a + (b - a) * t_grid / span_t
    if family == "sinusoid":
        mid = rng.uniform(lo + 0.25 * (hi - lo), hi - 0.25 * (hi - lo))
        amp = rng.uniform(0.0, min(mid - lo, hi - mid))
        freq = rng.uniform(0.1, 0.5)       # Hz
        phase = rng.uniform(0.0, 2.0 * math.pi)
        return mid + amp * np.sin(2.0 * math.pi * freq * t_grid + phase)
    raise ValueError(f"unknown policy family {family!r}")


# steering aggressiveness tiers; without them every random-walk policy
# eventually rides the steering lock and the straight regimes die out
_STEER_TIERS = (0.1, 0.4, 1.0)


def sample_policy(rng: np.random.Generator, bounds: ActuatorBounds,
                  horizon: float = 20.0, families=None) -> PiecewiseControl:
    """Draw one nominal policy: independent steering-rate and force
    profiles from the constant/step/ramp/sinusoid families, discretized
    to piecewise-constant segments.  Force stays inside half the
    actuator range so nominal driving is assertive but not saturated;
    the steering amplitude is drawn from three tiers so the suite spans
    lane-keeping wiggles up to lock-to-lock swerving.  ``families``
    pins (steer_family, force_family) instead of drawing them, which
    lets the dataset generator sweep the grid systematically."""
    t_grid = np.arange(0.0, horizon, _POLICY_SEG_DT)
    if families is None:
        steer_family = POLICY_FAMILIES[rng.integers(len(POLICY_FAMILIES))]
        force_family = POLICY_FAMILIES[rng.integers(len(POLICY_FAMILIES))]
    else:
        steer_family, force_family = families
        if steer_family not in POLICY_FAMILIES or force_family not in POLICY_FAMILIES:
            raise ValueError(f"unknown policy family in {families!r}")
    dd_cap = min(0.5, bounds.delta_dot_max) * _STEER_TIERS[rng.integers(len(_STEER_TIERS))]
    dd = _profile(rng, steer_family, -dd_cap, dd_cap, t_grid)
    fx = _profile(rng, force_family, 0.5 * bounds.F_x_min, 0.5 * bounds.F_x_max, t_grid)
    controls = tuple(ControlInput(float(a), float(b)) for a, b in zip(dd, fx))
    return PiecewiseControl(tuple(float(t) for t in t_grid), controls,
                            steer_family, force_family)


# -- scenarios ----------------------------------------------------------


class Label(enum.Enum):
    Safe = "safe"
    Unsafe = "unsafe"


class Regime(enum.Enum):
    LowStraight = "low_straight"
    LowSharp = "low_sharp"
    HighStraight = "high_straight"
    HighSharp = "high_sharp"


@dataclasses.dataclass(frozen=True)
class Scenario:
    x0: WorldState
    fence: Polygon
    nominal_policy: PiecewiseControl
    label: Label
    regime: Regime


def applied_command(ws: WorldState, u: ControlInput) -> ControlInput:
    """Actuation semantics at the plant boundary.

    Brakes cannot push a stopped vehicle backward, so negative force is
    dropped once forward motion is gone (drive force still launches from
    rest), and the steering rack stops at its lock: rate commands that
    would push |delta| past STEER_LOCK are zeroed.  Steering back toward
    center is always available, which is all the safety filter ever
    relies on.
    """
    dd, fx = u
    if ws.v_x <= 0.0 and fx < 0.0:
        fx = 0.0
    if (ws.delta >= STEER_LOCK and dd > 0.0) or (ws.delta <= -STEER_LOCK and dd < 0.0):
        dd = 0.0
    return ControlInput(dd, fx)


def panic_brake_solvable(cfg: PlantConfig, x0: WorldState, bounds: ActuatorBounds,
                         fence: Polygon, max_t: float = 20.0) -> bool:
    """True when full braking from x0 stops inside the fence without ever
    leaving it.  An already-stopped vehicle inside the fence is solvable
    by definition."""
    if fence.signed_distance((x0.p_x, x0.p_y)) < 0.0:
        return False
    u_eb = emergency_brake(bounds)
    ws, rate = x0, 0.0
    for _ in range(int(round(max_t / CONTROL_PERIOD))):
        if ws.v_x <= REST_SPEED:
            return True
        ws, rate = plant_step(cfg, ws, u_eb, CONTROL_PERIOD, rate)
        if fence.signed_distance((ws.p_x, ws.p_y)) < 0.0:
            return False
    return ws.v_x <= REST_SPEED


def _nominal_rollout(cfg: PlantConfig, x0: WorldState, policy: PiecewiseControl,
                     fence: Polygon, bounds: ActuatorBounds,
                     max_t: float) -> tuple[bool, float]:
    """(breached, peak |delta|) for the uncontrolled nominal rollout,
    following the same protocol as run_episode with a null controller:
    main phase to max_t, then forced braking until rest."""
    ws, rate = x0, 0.0
    peak = abs(x0.delta)
    if fence.signed_distance((x0.p_x, x0.p_y)) < 0.0:
        return True, peak
    u_eb = emergency_brake(bounds)
    n_main = int(round(max_t / CONTROL_PERIOD))
    n_hard = n_main + int(round(_TAIL_MAX / CONTROL_PERIOD))
    for k in range(n_hard):
        tail = k >= n_main
        if tail and ws.v_x <= REST_SPEED:
            break
        u = u_eb if tail else policy.at(k * CONTROL_PERIOD)
        ws, rate = plant_step(cfg, ws, applied_command(ws, u), CONTROL_PERIOD, rate)
        peak = max(peak, abs(ws.delta))
        if fence.signed_distance((ws.p_x, ws.p_y)) < 0.0:
            return True, peak
    return False, peak


def _regime_of(v_x0: float, peak_delta: float) -> Regime:
    high = v_x0 >= SPEED_THRESHOLD
    sharp = peak_delta >= STEER_THRESHOLD
    if high:
        return Regime.HighSharp if sharp else Regime.HighStraight
    return Regime.LowSharp if sharp else Regime.LowStraight


def generate_scenarios(fence: Polygon, n: int, seed, plant: PlantConfig,
                       bounds: ActuatorBounds, v_max: float = 35.0,
                       max_t: float = 20.0) -> list[Scenario]:
    """Rejection-sample n solvable scenarios inside the fence.

    Pose, speed, and steering angle are uniform (speed in [0, v_max],
    delta in [-0.5, 0.5] rad); a candidate survives only if the panic
    brake keeps it inside the fence.  The label comes from rolling the
    nominal policy with no controller attached.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    verts = fence.vertices
    (xmin, ymin), (xmax, ymax) = verts.min(axis=0), verts.max(axis=0)
    out: list[Scenario] = []
    budget = 10_000 * n
    rejected = 0
    while len(out) < n:
        if rejected > budget:
            raise SamplingExhausted(
                f"rejected {rejected} candidates with only {len(out)}/{n} scenarios kept"
            )
        p_x = rng.uniform(xmin, xmax)
        p_y = rng.uniform(ymin, ymax)
        psi = rng.uniform(-math.pi, math.pi)
        v_x = rng.uniform(0.0, v_max)
        delta = rng.uniform(-0.5, 0.5)
        if fence.signed_distance((p_x, p_y)) <= 0.0:
            rejected += 1
            continue
        x0 = WorldState(p_x, p_y, psi, v_x, 0.0, 0.0, delta)
        if not panic_brake_solvable(plant, x0, bounds, fence):
            rejected += 1
            continue
        policy = sample_policy(rng, bounds, horizon=max_t)
        breached, peak = _nominal_rollout(plant, x0, policy, fence, bounds, max_t)
        out.append(Scenario(
            x0, fence, policy,
            Label.Unsafe if breached else Label.Safe,
            _regime_of(v_x, peak),
        ))
    return out


# -- controllers --------------------------------------------------------


def null_controller(fence: Polygon):
    """Passes the nominal through untouched; logs clearance only."""

    def control(ws: WorldState, u_nom: ControlInput) -> FilterDecision:
        h = fence.signed_distance((ws.p_x, ws.p_y))
        return FilterDecision(u_nom, DecisionKind.NoIntervention, h, 0.0, (0.0, 0.0), 0.0)

    return control


def dcbf_controller(model, bounds: ActuatorBounds, fence: Polygon,
                    cfg: DcbfConfig = DcbfConfig()):
    def control(ws: WorldState, u_nom: ControlInput) -> FilterDecision:
        return dcbf_filter(model, ws, u_nom, bounds, fence, cfg)

    return control


def ttc_baseline_controller(model, bounds: ActuatorBounds, fence: Polygon):
    def control(ws: WorldState, u_nom: ControlInput) -> FilterDecision:
        return ttc_controller(model, ws, u_nom, bounds, fence)

    return control


# -- episodes -----------------------------------------------------------


class EpisodeSummary(NamedTuple):
    label: Label
    regime: Regime
    intervened: bool
    breach: bool
    min_sdf: float


@dataclasses.dataclass(frozen=True)
class EpisodeLog:
    """Cycle-by-cycle record of one closed-loop run.

    States are at cycle start; min_sdf covers every plant state the
    episode visited, including the forced braking tail.  The tail's
    emergency-brake rows are protocol, not controller decisions, so they
    never set the intervened flag.
    """

    scenario: Scenario
    t: np.ndarray           # (n,)
    states: np.ndarray      # (n, 7)
    u_nom: np.ndarray       # (n, 2)
    u_applied: np.ndarray   # (n, 2)
    kinds: tuple[DecisionKind, ...]
    h: np.ndarray
    beta: np.ndarray
    jacobians: np.ndarray   # (n, 2)
    slack: np.ndarray
    min_sdf: float
    breach: bool
    intervened: bool

    def __post_init__(self):
        n = len(self.t)
        cols = (self.states, self.u_nom, self.u_applied, self.kinds,
                self.h, self.beta, self.jacobians, self.slack)
        if any(len(c) != n for c in cols):
            raise ValueError("log columns must share one length")
        if n > 1 and np.max(np.abs(np.diff(self.t) - CONTROL_PERIOD)) > 1e-9:
            raise ValueError("cycle times must advance by the control period")

    def __len__(self):
        return len(self.t)

    def summary(self) -> EpisodeSummary:
        return EpisodeSummary(self.scenario.label, self.scenario.regime,
                              self.intervened, self.breach, self.min_sdf)


def run_episode(controller, plant: PlantConfig, scenario: Scenario,
                max_t: float = 20.0,
                bounds: ActuatorBounds = ActuatorBounds()) -> EpisodeLog:
    """Run one closed-loop episode at the 0.02 s control period.

    The controller sees the plant's exact state.  The episode ends at
    max_t, at rest after an intervention, or once the vehicle is deeper
    than BREACH_DEPTH outside the fence; a forced braking tail after
    max_t brings the vehicle to rest so every log ends stationary.
    """
    fence = scenario.fence
    ws, rate = scenario.x0, 0.0
    u_eb = emergency_brake(bounds)
    ts, states, nom, applied, kinds, hs, betas, jacs, slacks = \
        [], [], [], [], [], [], [], [], []
    min_sdf = fence.signed_distance((ws.p_x, ws.p_y))
    intervened = False
    n_main = int(round(max_t / CONTROL_PERIOD))
    n_hard = n_main + int(round(_TAIL_MAX / CONTROL_PERIOD))
    k = 0
    while k < n_hard:
        tail = k >= n_main
        if tail and ws.v_x <= REST_SPEED:
            break
        t = k * CONTROL_PERIOD
        u_nom = scenario.nominal_policy.at(t)
        if tail:
            h_here = fence.signed_distance((ws.p_x, ws.p_y))
            d = FilterDecision(u_eb, DecisionKind.EmergencyBrake, h_here, 0.0, (0.0, 0.0), 0.0)
        else:
            d = controller(ws, u_nom)
            if d.kind is not DecisionKind.NoIntervention:
                intervened = True
        u_app = applied_command(ws, d.command)
        ts.append(t)
        states.append(tuple(ws))
        nom.append(tuple(u_nom))
        applied.append(tuple(u_app))
        kinds.append(d.kind)
        hs.append(d.h_nom)
        betas.append(d.beta)
        jacs.append(tuple(d.jacobian))
        slacks.append(d.slack_inf_norm)
        ws, rate = plant_step(plant, ws, u_app, CONTROL_PERIOD, rate)
        sdf = fence.signed_distance((ws.p_x, ws.p_y))
        min_sdf = min(min_sdf, sdf)
        k += 1
        if sdf < -BREACH_DEPTH:
            break
        if not tail and intervened and ws.v_x <= REST_SPEED:
            break
    return EpisodeLog(
        scenario,
        np.asarray(ts), np.asarray(states), np.asarray(nom), np.asarray(applied),
        tuple(kinds), np.asarray(hs), np.asarray(betas), np.asarray(jacs),
        np.asarray(slacks),
        float(min_sdf), bool(min_sdf < 0.0), intervened,
    )


# -- metrics ------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class MetricsReport:
    tp: int
    fp: int
    tn: int
    fn: int
    cf: int
    cf1: float
    fpr: float
    mcd_plus: float
    per_regime: Mapping[Regime, "MetricsReport"] = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        if self.cf > self.tp:
            raise ValueError("containment failures cannot exceed true positives")
        if not 0.0 <= self.cf1 <= 1.0:
            raise ValueError("cf1 must lie in [0, 1]")
        if not 0.0 <= self.fpr <= 1.0:
            raise ValueError("fpr must lie in [0, 1]")


def _summary_of(e) -> EpisodeSummary:
    return e if isinstance(e, EpisodeSummary) else e.summary()


def _score(summaries: Sequence[EpisodeSummary], per_regime: Mapping) -> MetricsReport:
    tp = sum(1 for s in summaries if s.label is Label.Unsafe and s.intervened)
    fp = sum(1 for s in summaries if s.label is Label.Safe and s.intervened)
    tn = sum(1 for s in summaries if s.label is Label.Safe and not s.intervened)
    fn = sum(1 for s in summaries if s.label is Label.Unsafe and not s.intervened)
    cf = sum(1 for s in summaries
             if s.label is Label.Unsafe and s.intervened and s.breach)
    if tp == 0:
        cf1 = 0.0
    else:
        precision = tp / (tp + fp)
        recall = tp / (tp + fn)
        f1 = 2.0 * precision * recall / (precision + recall)
        cf1 = f1 * (tp - cf) / tp
    fpr = fp / (fp + tn) if (fp + tn) > 0 else 0.0
    mcd = float(np.median([s.min_sdf for s in summaries]))
    return MetricsReport(tp, fp, tn, fn, cf, cf1, fpr, mcd, per_regime)


def compute_metrics(episodes) -> MetricsReport:
    """Episode-level confusion counts plus CF1, FPR, and MCD+.

    Accepts EpisodeLogs or EpisodeSummary rows.  Predicted positive
    means the controller intervened at least once; ground truth is the
    scenario label; CF counts required interventions that still ended
    in a breach.  TP = 0 forces CF1 to 0.
    """
    summaries = [_summary_of(e) for e in episodes]
    if not summaries:
        raise ValueError("episodes must be nonempty")
    per = {}
    for regime in Regime:
        sub = [s for s in summaries if s.regime is regime]
        if sub:
            per[regime] = _score(sub, {})
    return _score(summaries, per)


def format_metrics(report: MetricsReport) -> str:
    def line(scope: str, r: MetricsReport) -> str:
        n = r.tp + r.fp + r.tn + r.fn
        return (f"{scope:>14}  n={n:<4d} TP={r.tp:<3d} FP={r.fp:<3d} TN={r.tn:<3d} "
                f"FN={r.fn:<3d} CF={r.cf:<3d} CF1={r.cf1:.3f} FPR={r.fpr:.3f} "
                f"MCD+={r.mcd_plus:.3f} m")

    rows = [line("overall", report)]
    rows += [line(reg.value, sub) for reg, sub in report.per_regime.items()]
    return "\n".join(rows)


# -- control-linearity analysis -----------------------------------------

LINEARITY_CHANNELS = ("steer+", "steer-", "force+", "force-")
_LIN_PREVIEW = 0.3  # s, same horizon the safety filter previews
_LIN_N_SUB = 3


def linearity_analysis(m, states: Sequence[WorldState], fence: Polygon,
                       bounds: ActuatorBounds,
                       u_nom: ControlInput = ControlInput(0.0, 0.0),
                       steer_delta: float = 0.25,
                       force_delta: float = 800.0) -> np.ndarray:
    """How far the previewed barrier is from linear in the input.

    For each state: central-difference Jacobian of the preview-terminal
    signed distance about u_nom, then for each of the four probe inputs
    the discrepancy |Δh_actual − J·Δu|.  Returns an (n, 4) array with
    columns LINEARITY_CHANNELS.
    """
    if not states:
        raise ValueError("states must be nonempty")

    def h(ws, u):
        end = rollout_zoh(ws, u, m, _LIN_PREVIEW, _LIN_N_SUB, semi_implicit_step)
        return fence.signed_distance((end.p_x, end.p_y))

    u0 = bounds.clip(u_nom)
    out = np.empty((len(states), 4))
    for i, ws in enumerate(states):
        h0 = h(ws, u0)
        probes = (
            bounds.clip(ControlInput(u0.delta_dot + steer_delta, u0.F_x)),
            bounds.clip(ControlInput(u0.delta_dot - steer_delta, u0.F_x)),
            bounds.clip(ControlInput(u0.delta_dot, u0.F_x + force_delta)),
            bounds.clip(ControlInput(u0.delta_dot, u0.F_x - force_delta)),
        )
        h_probe = [h(ws, u) for u in probes]
        for chan, (lo, hi) in enumerate(((0, 1), (2, 3))):
            gap = probes[lo][chan] - probes[hi][chan]
            jac = (h_probe[lo] - h_probe[hi]) / gap if gap != 0.0 else 0.0
            for side in (lo, hi):
                du = probes[side][chan] - u0[chan]
                out[i, side] = abs((h_probe[side] - h0) - jac * du)
    return out


# -- file formats --------------------------------------------------------

_EPISODE_COLUMNS = (
    "t", "p_x", "p_y", "psi", "v_x", "v_y", "omega", "delta",
    "delta_dot_nom", "F_x_nom", "delta_dot_cmd", "F_x_cmd",
    "kind", "h", "beta", "J_delta_dot", "J_F_x", "xi_inf",
)


def write_episode_csv(log: EpisodeLog, path) -> None:
    """One episode per file: two summary comment lines, then cycle rows.
    Floats are written with repr so a rewrite is byte-identical."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# label={log.scenario.label.value} regime={log.scenario.regime.value}\n")
        fh.write(f"# min_sdf={log.min_sdf!r} breach={int(log.breach)}"
                 f" intervened={int(log.intervened)}\n")
        w = csv.writer(fh)
        w.writerow(_EPISODE_COLUMNS)
        for i in range(len(log)):
            row = [repr(float(v)) for v in (log.t[i], *log.states[i],
                                            *log.u_nom[i], *log.u_applied[i])]
            row.append(log.kinds[i].value)
            row += [repr(float(v)) for v in (log.h[i], log.beta[i],
                                             *log.jacobians[i], log.slack[i])]
            w.writerow(row)


def read_episode_summary(path) -> EpisodeSummary:
    """Recover the metrics inputs from an episode file's summary lines."""
    with open(path, "r", encoding="utf-8") as fh:
        first = dict(kv.split("=") for kv in fh.readline()[1:].split())
        second = dict(kv.split("=") for kv in fh.readline()[1:].split())
    return EpisodeSummary(
        Label(first["label"]),
        Regime(first["regime"]),
        bool(int(second["intervened"])),
        bool(int(second["breach"])),
        float(second["min_sdf"]),
    )


def write_metrics_csv(report: MetricsReport, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("scope", "tp", "fp", "tn", "fn", "cf", "cf1", "fpr", "mcd_plus"))

        def row(scope, r):
            w.writerow((scope, r.tp, r.fp, r.tn, r.fn, r.cf,
                        repr(r.cf1), repr(r.fpr), repr(r.mcd_plus)))

        row("overall", report)
        for regime, sub in report.per_regime.items():
            row(regime.value, sub)


def write_linearity_csv(eps: np.ndarray, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("state_id", "channel", "eps_lin"))
        for i in range(eps.shape[0]):
            for j, chan in enumerate(LINEARITY_CHANNELS):
                w.writerow((i, chan, repr(float(eps[i, j]))))
