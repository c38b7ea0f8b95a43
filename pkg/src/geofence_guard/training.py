"""Dataset construction and the two-stage fitting pipeline.

Stage one calibrates four tire scalars against logged derivatives; stage
two trains the residual networks on whatever physics still misses.  Both
consume the same sample form: a body state, the command held over the
step, and a finite-difference estimate of the body derivative.

Gradients: the calibration scalars use central finite differences (step
1e-5 in the optimizer's own coordinates, i.e. log-stiffness space); the
networks use the hand-coded reverse pass in models.Mlp.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .dynamics import (
    BodyState,
    ControlInput,
    VehicleParams,
    body_derivative,
    derivative_batch,
)
from .geometry import Polygon
from .models import (
    NeuralOdeModel,
    PcarnnShared,
    PcarnnSplit,
    ResidualModel,
    WrongVariant,
    spectral_normalize,
)

__all__ = [
    "NonUniformTimestamps",
    "EmptyDataset",
    "DivergedLoss",
    "TrajectorySample",
    "Dataset",
    "TrainConfig",
    "finite_diff_derivatives",
    "mirror_augment",
    "stratified_split",
    "calibrate_params",
    "train_residuals",
    "derivative_mse",
]


class NonUniformTimestamps(ValueError):
    """Log timestamps drift from the declared fixed period."""


class EmptyDataset(ValueError):
    pass


class DivergedLoss(RuntimeError):
    """Training or calibration loss became non-finite."""


@dataclass(frozen=True)
class TrajectorySample:
    body: BodyState
    u: ControlInput
    xdot_gt: tuple  # 4 floats, ground-truth body derivative


@dataclass
class Dataset:
    """Samples plus a stratum tag apiece; `runs` marks spans of samples
    that are contiguous in time (needed for rollout validation), `dt`
    their sampling period."""

    samples: list
    strata: list
    runs: tuple = ()
    dt: float = 0.02

    def __post_init__(self):
        if len(self.strata) != len(self.samples):
            raise ValueError("strata must tag every sample")
        n = len(self.samples)
        for start, stop in self.runs:
            if not (0 <= start < stop <= n):
                raise ValueError(f"run ({start}, {stop}) out of range")

    def __len__(self) -> int:
        return len(self.samples)

    def arrays(self):
        """(states, controls, derivatives) as (n,4), (n,2), (n,4)."""
        S = np.array([t.body for t in self.samples], dtype=float)
        U = np.array([t.u for t in self.samples], dtype=float)
        Y = np.array([t.xdot_gt for t in self.samples], dtype=float)
        return S, U, Y


def finite_diff_derivatives(states, controls, dt: float, times=None):
    """Central differences inside, 3-point one-sided at the ends."""
    n = len(states)
    if n < 3:
        raise ValueError("need at least 3 samples for 3-point differences")
    if len(controls) != n:
        raise ValueError("states and controls must align")
    if times is not None:
        gaps = np.diff(np.asarray(times, dtype=float))
        if np.any(np.abs(gaps - dt) > 1e-9 * max(1.0, dt)):
            raise NonUniformTimestamps(
                f"spacing varies over [{gaps.min():.3e}, {gaps.max():.3e}], want {dt:.3e}"
            )
    X = np.asarray(states, dtype=float)
    D = np.empty_like(X)
    D[1:-1] = (X[2:] - X[:-2]) / (2.0 * dt)
    D[0] = (-3.0 * X[0] + 4.0 * X[1] - X[2]) / (2.0 * dt)
    D[-1] = (3.0 * X[-1] - 4.0 * X[-2] + X[-3]) / (2.0 * dt)
    return [
        TrajectorySample(BodyState(*X[k]), ControlInput(*controls[k]), tuple(D[k]))
        for k in range(n)
    ]


def _mirror_sample(t: TrajectorySample) -> TrajectorySample:
    b, u, d = t.body, t.u, t.xdot_gt
    return TrajectorySample(
        BodyState(b.v_x, -b.v_y, -b.omega, -b.delta),
        ControlInput(-u.delta_dot, u.F_x),
        (d[0], -d[1], -d[2], -d[3]),
    )


def mirror_augment(d: Dataset) -> Dataset:
    """Append the lateral mirror image of every sample.

    The single-track dynamics are odd in (v_y, omega, delta, delta_dot),
    so the mirrored samples are exactly as physical as the originals and
    kill any left/right bias in the logs.
    """
    n = len(d.samples)
    samples = d.samples + [_mirror_sample(t) for t in d.samples]
    runs = d.runs + tuple((start + n, stop + n) for start, stop in d.runs)
    return Dataset(samples, d.strata + list(d.strata), runs, d.dt)


def _largest_remainder(n: int, fractions) -> list:
    raw = [f * n for f in fractions]
    counts = [int(math.floor(r)) for r in raw]
    order = sorted(range(len(raw)), key=lambda i: counts[i] - raw[i])
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def stratified_split(d: Dataset, fractions, seed: int):
    """Per-stratum proportional split into (train, val, test).

    Counts per stratum follow the largest-remainder rule, so any stratum
    with at least 8 members lands in every split at the default 75/12.5/
    12.5 fractions.  Shuffling is seeded; the output datasets carry no
    runs (sample order is no longer temporal).
    """
    if len(d) == 0:
        raise EmptyDataset("nothing to split")
    if len(fractions) != 3:
        raise ValueError("expected (train, val, test) fractions")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must sum to 1")
    groups: dict = {}
    for idx, tag in enumerate(d.strata):
        groups.setdefault(tag, []).append(idx)
    rng = np.random.default_rng(seed)
    buckets = ([], [], [])
    for tag in sorted(groups, key=repr):
        members = np.array(groups[tag])[rng.permutation(len(groups[tag]))]
        counts = _largest_remainder(len(members), fractions)
        at = 0
        for bucket, c in zip(buckets, counts):
            bucket.extend(int(i) for i in members[at : at + c])
            at += c
    return tuple(
        Dataset([d.samples[i] for i in b], [d.strata[i] for i in b], (), d.dt)
        for b in buckets
    )


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 256
    max_epochs: int = 60
    patience: int = 5
    val_horizon: int = 50  # T, rollout steps for calibration validation
    cosine_floor: float = 1e-5
    weight_decay: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.adam_eps <= 0:
            raise ValueError("rates must be positive")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.batch_size < 1 or self.max_epochs < 1 or self.val_horizon < 1:
            raise ValueError("counts must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.cosine_floor < 0 or self.weight_decay < 0:
            raise ValueError("floors must be nonnegative")


class _Adam:
    """Adam over a flat list of arrays, with optional decoupled decay."""

    def __init__(self, params, cfg: TrainConfig):
        self.cfg = cfg
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads, lr: float, decay_mask=None, lr_scales=None):
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.adam_beta1**self.t
        bc2 = 1.0 - c.adam_beta2**self.t
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = c.adam_beta1 * self.m[i] + (1.0 - c.adam_beta1) * g
            self.v[i] = c.adam_beta2 * self.v[i] + (1.0 - c.adam_beta2) * g * g
            step = lr * (self.m[i] / bc1) / (np.sqrt(self.v[i] / bc2) + c.adam_eps)
            if lr_scales is not None and lr_scales[i] is not None:
                step = step * lr_scales[i]
            p -= step
            if decay_mask is not None and decay_mask[i]:
                p -= lr * c.weight_decay * p


def _cosine_lr(epoch: int, cfg: TrainConfig) -> float:
    if cfg.max_epochs == 1:
        return cfg.learning_rate
    span = cfg.learning_rate - cfg.cosine_floor
    phase = math.pi * epoch / (cfg.max_epochs - 1)
    return cfg.cosine_floor + 0.5 * span * (1.0 + math.cos(phase))


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for at in range(0, n, batch_size):
        yield order[at : at + batch_size]


# -- stage one: tire-scalar calibration --------------------------------

_CALIB_FD_STEP = 1e-5
_E_DOMAIN = (-10.0 + 1e-6, 1.0)  # admissible tire curvature, see VehicleParams
_VAL_FENCE = Polygon([(-50.0, -50.0), (50.0, -50.0), (50.0, 50.0), (-50.0, 50.0)])


def _theta_of(params: VehicleParams) -> np.ndarray:
    return np.array(
        [math.log(params.C_f), math.log(params.C_r), math.log(params.C_shape), params.E_curv]
    )


def _params_of(theta, base: VehicleParams) -> VehicleParams:
    # a wildly misconfigured optimizer can push a log-parameter past the
    # float range, collapsing exp()'s result to 0 or inf; both mean the
    # fit diverged, not that the caller built bad parameters
    try:
        return replace(
            base,
            C_f=math.exp(theta[0]),
            C_r=math.exp(theta[1]),
            C_shape=math.exp(theta[2]),
            E_curv=min(max(float(theta[3]), _E_DOMAIN[0]), _E_DOMAIN[1]),
        )
    except (OverflowError, ValueError) as e:
        raise DivergedLoss(f"parameters left the admissible domain: {e}") from None


def _calib_loss(theta, base, S, U, Y) -> float:
    err = derivative_batch(S, U, _params_of(theta, base)) - Y
    return float(np.mean(np.sum(err * err, axis=1)))


def _rk4_body(s: BodyState, u: ControlInput, params: VehicleParams, dt: float) -> BodyState:
    k1 = body_derivative(s, u, params)
    k2 = body_derivative(BodyState(*(x + 0.5 * dt * k for x, k in zip(s, k1))), u, params)
    k3 = body_derivative(BodyState(*(x + 0.5 * dt * k for x, k in zip(s, k2))), u, params)
    k4 = body_derivative(BodyState(*(x + dt * k for x, k in zip(s, k3))), u, params)
    return BodyState(
        *(x + dt / 6.0 * (a + 2 * b + 2 * c + e) for x, a, b, c, e in zip(s, k1, k2, k3, k4))
    )


def _pose_track(bodies, dt: float) -> np.ndarray:
    """Explicit-Euler pose from a body-state sequence, seeded at origin.

    Both the reference and the candidate sequence go through this same
    accumulation, so a perfect body forecast scores exactly zero."""
    out = np.zeros((len(bodies), 2))
    px = py = psi = 0.0
    for k, s in enumerate(bodies[:-1]):
        c, si = math.cos(psi), math.sin(psi)
        px += dt * (s.v_x * c - s.v_y * si)
        py += dt * (s.v_x * si + s.v_y * c)
        psi += dt * s.omega
        out[k + 1] = (px, py)
    return out


def _rollout_score(theta, base, d: Dataset, run, horizon: int, fence: Polygon) -> float:
    params = _params_of(theta, base)
    start, stop = run
    steps = min(horizon, stop - start - 1)
    ref = [d.samples[start + k].body for k in range(steps + 1)]
    pred = [ref[0]]
    for k in range(steps):
        pred.append(_rk4_body(pred[-1], d.samples[start + k].u, params, d.dt))
    p_ref = _pose_track(ref, d.dt)
    p_pred = _pose_track(pred, d.dt)
    pos_err = float(np.sqrt(np.mean(np.sum((p_pred - p_ref) ** 2, axis=1))))
    barrier_gap = abs(
        fence.signed_distance(tuple(p_pred[-1])) - fence.signed_distance(tuple(p_ref[-1]))
    )
    return pos_err + barrier_gap


def calibrate_params(
    d: Dataset, init: VehicleParams, cfg: TrainConfig, fence: Polygon = _VAL_FENCE
) -> VehicleParams:
    """Fit (log C_f, log C_r, log C_shape, E_curv) by Adam on the mean
    squared one-step derivative error.

    Validation for early stopping: when the dataset carries runs, an
    eighth of them are held out and scored by T-step RK4 body rollouts
    (position error plus the fence-clearance gap at the horizon);
    without runs the held-out score falls back to the one-step loss.
    Returns the parameters that scored best, which for already-correct
    init is init itself.
    """
    if len(d) == 0:
        raise EmptyDataset("cannot calibrate on an empty dataset")
    rng = np.random.default_rng(cfg.seed)
    S, U, Y = d.arrays()

    if d.runs:
        order = rng.permutation(len(d.runs))
        n_val = max(1, round(0.125 * len(d.runs)))
        val_runs = [d.runs[i] for i in order[:n_val]]
        held = np.zeros(len(d), dtype=bool)
        for start, stop in val_runs:
            held[start:stop] = True
        train_idx = np.flatnonzero(~held)
        if len(train_idx) == 0:  # single-run dataset: train on it anyway
            train_idx = np.arange(len(d))

        def val_score(theta):
            return sum(
                _rollout_score(theta, init, d, run, cfg.val_horizon, fence)
                for run in val_runs
            ) / len(val_runs)

    else:
        order = rng.permutation(len(d))
        n_val = max(1, round(0.125 * len(d)))
        val_idx, train_idx = order[:n_val], order[n_val:]
        if len(train_idx) == 0:
            train_idx = val_idx

        def val_score(theta):
            return _calib_loss(theta, init, S[val_idx], U[val_idx], Y[val_idx])

    theta = _theta_of(init)
    opt = _Adam([theta], cfg)
    best_theta, best_score, stale = theta.copy(), val_score(theta), 0
    h = _CALIB_FD_STEP
    for _ in range(cfg.max_epochs):
        for batch in _batches(len(train_idx), cfg.batch_size, rng):
            idx = train_idx[batch]
            Sb, Ub, Yb = S[idx], U[idx], Y[idx]
            loss = _calib_loss(theta, init, Sb, Ub, Yb)
            if not math.isfinite(loss):
                raise DivergedLoss(f"calibration loss {loss}")
            grad = np.zeros(4)
            for i in range(4):
                e = np.zeros(4)
                e[i] = h
                grad[i] = (
                    _calib_loss(theta + e, init, Sb, Ub, Yb)
                    - _calib_loss(theta - e, init, Sb, Ub, Yb)
                ) / (2.0 * h)
            opt.step([theta], [grad], cfg.learning_rate)
            theta[3] = min(max(theta[3], _E_DOMAIN[0]), _E_DOMAIN[1])
        score = val_score(theta)
        if not math.isfinite(score):
            raise DivergedLoss(f"validation score {score}")
        if score < best_score - 1e-12:
            best_theta, best_score, stale = theta.copy(), score, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    return _params_of(best_theta, init)


# -- stage two: residual-network training ------------------------------


def _predict_batch(model, S: np.ndarray, U: np.ndarray):
    """Batched model derivative plus the forward caches needed to push
    gradients back through each net.  Returns (pred, caches_by_net)."""
    if isinstance(model, (ResidualModel, NeuralOdeModel)):
        feats = np.hstack([S, U])
        out, caches = model.net.forward_cached(feats)
        base = derivative_batch(S, U, model.params) if isinstance(model, ResidualModel) else 0.0
        return base + out, {"net": caches}
    if isinstance(model, PcarnnShared):
        out, caches = model.net.forward_cached(S)
        pred = derivative_batch(S, U, model.params) + out[:, :4]
        gain = out[:, 4:].reshape(-1, 3, 2)
        pred[:, :3] += np.einsum("nij,nj->ni", gain, U)
        return pred, {"net": caches}
    if isinstance(model, PcarnnSplit):
        out_f, caches_f = model.net_f.forward_cached(S)
        out_g, caches_g = model.net_g.forward_cached(S)
        pred = derivative_batch(S, U, model.params) + out_f
        gain = out_g.reshape(-1, 3, 2)
        pred[:, :3] += np.einsum("nij,nj->ni", gain, U)
        return pred, {"net_f": caches_f, "net_g": caches_g}
    raise WrongVariant(f"{type(model).__name__} has no trainable residual")


def _gain_grad_out(r_scaled: np.ndarray, U: np.ndarray) -> np.ndarray:
    # dL/d(gain output 2i+j) = dL/dpred_i * u_j, rows 1-3 only
    return (r_scaled[:, :3, None] * U[:, None, :]).reshape(len(U), 6)


def _loss_and_grads(model, S, U, Y):
    """Mean squared derivative error on a batch and its gradients,
    keyed by net attribute name."""
    pred, caches = _predict_batch(model, S, U)
    r = pred - Y
    loss = float(np.mean(np.sum(r * r, axis=1)))
    rs = 2.0 * r / len(S)  # upstream grad of the batch mean
    grads = {}
    if isinstance(model, (ResidualModel, NeuralOdeModel)):
        grads["net"] = model.net.backward(caches["net"], rs)
    elif isinstance(model, PcarnnShared):
        go = np.hstack([rs, _gain_grad_out(rs, U)])
        grads["net"] = model.net.backward(caches["net"], go)
    elif isinstance(model, PcarnnSplit):
        grads["net_f"] = model.net_f.backward(caches["net_f"], rs)
        grads["net_g"] = model.net_g.backward(caches["net_g"], _gain_grad_out(rs, U))
    return loss, grads


def _trainable_nets(model) -> dict:
    if isinstance(model, (ResidualModel, NeuralOdeModel, PcarnnShared)):
        return {"net": model.net}
    if isinstance(model, PcarnnSplit):
        return {"net_f": model.net_f, "net_g": model.net_g}
    raise WrongVariant(f"{type(model).__name__} has no trainable residual")


_FORCE_GAIN_LR_SCALE = 1e-3  # kilonewton convention for force-facing heads


def _head_lr_scales(model) -> dict:
    """Per-output learning-rate scale for final layers emitting gain
    corrections.  The force column of the learned gain multiplies raw
    newtons, so Adam's unit-free steps would otherwise wobble the
    force-gain outputs three orders louder than the steering ones."""
    if isinstance(model, PcarnnShared):
        v = np.ones(10)
        v[5::2] = _FORCE_GAIN_LR_SCALE  # outputs 4+2i+1, the force column
        return {"net": v}
    if isinstance(model, PcarnnSplit):
        v = np.ones(6)
        v[1::2] = _FORCE_GAIN_LR_SCALE
        return {"net_g": v}
    return {}


def train_residuals(d: Dataset, model, cfg: TrainConfig, co_train_physics=False,
                    loss_history=None):
    """AdamW on the residual nets against the logged derivatives.

    Weight decay touches weight matrices only, never biases or physics
    parameters; the learning rate follows cosine annealing down to the
    configured floor; spectrally flagged nets are renormalized after
    every step so the Lipschitz budget holds throughout training, not
    just at the end.  With co_train_physics the four calibration
    scalars are nudged by the same batch loss (finite differences).
    Mutates and returns the model.
    """
    if len(d) == 0:
        raise EmptyDataset("cannot train on an empty dataset")
    nets = _trainable_nets(model)
    if co_train_physics and not isinstance(model, (PcarnnShared, PcarnnSplit)):
        raise WrongVariant("only the structured variants carry physics parameters")
    S, U, Y = d.arrays()
    rng = np.random.default_rng(cfg.seed)

    # parameter aliases are rebuilt per batch: spectral renormalization
    # swaps the weight arrays, so stored references would go stale
    def flat_params():
        out = []
        for name in sorted(nets):
            out += nets[name].weights + nets[name].biases
        return out

    masks, scales = [], []
    head_scales = _head_lr_scales(model)
    for name in sorted(nets):
        net = nets[name]
        head = head_scales.get(name)
        w_scales = [None] * net.n_layers
        b_scales = [None] * net.n_layers
        if head is not None:
            w_scales[-1] = head[:, None]
            b_scales[-1] = head
        masks += [True] * len(net.weights) + [False] * len(net.biases)
        scales += w_scales + b_scales
    opt = _Adam(flat_params(), cfg)
    if co_train_physics:
        theta = _theta_of(model.params)
        opt_theta = _Adam([theta], cfg)

    for epoch in range(cfg.max_epochs):
        lr = _cosine_lr(epoch, cfg)
        epoch_loss, n_batches = 0.0, 0
        for batch in _batches(len(S), cfg.batch_size, rng):
            Sb, Ub, Yb = S[batch], U[batch], Y[batch]
            loss, grads = _loss_and_grads(model, Sb, Ub, Yb)
            if not math.isfinite(loss):
                raise DivergedLoss(f"training loss {loss} at epoch {epoch}")
            epoch_loss += loss
            n_batches += 1
            flat_g = []
            for name in sorted(nets):
                gw, gb = grads[name]
                flat_g += gw + gb
            opt.step(flat_params(), flat_g, lr, masks, scales)
            for net in nets.values():
                if net.spec.spectral_norm:
                    spectral_normalize(net, 3)
            if co_train_physics:
                h = _CALIB_FD_STEP
                g = np.zeros(4)
                for i in range(4):
                    e = np.zeros(4)
                    e[i] = h
                    up = _predict_physics_loss(model, theta + e, Sb, Ub, Yb)
                    dn = _predict_physics_loss(model, theta - e, Sb, Ub, Yb)
                    g[i] = (up - dn) / (2.0 * h)
                opt_theta.step([theta], [g], lr)
                theta[3] = min(max(theta[3], _E_DOMAIN[0]), _E_DOMAIN[1])
                model.params = _params_of(theta, model.params)
        if loss_history is not None:
            loss_history.append(epoch_loss / max(1, n_batches))
    return model


def _predict_physics_loss(model, theta, S, U, Y) -> float:
    saved = model.params
    model.params = _params_of(theta, saved)
    try:
        pred, _ = _predict_batch(model, S, U)
    finally:
        model.params = saved
    err = pred - Y
    return float(np.mean(np.sum(err * err, axis=1)))


def derivative_mse(model, d: Dataset) -> float:
    """Mean squared one-step derivative error over a dataset."""
    S, U, Y = d.arrays()
    if isinstance(model, (ResidualModel, NeuralOdeModel, PcarnnShared, PcarnnSplit)):
        pred, _ = _predict_batch(model, S, U)
    else:
        pred = derivative_batch(S, U, model.params)
    err = pred - Y
    return float(np.mean(np.sum(err * err, axis=1)))
