"""Derivative providers for the controller and the training stack.

Five variants share one calling convention (``model.derivative(body, u)``
returns the 4-component body derivative):

* ``AnalyticalModel``      xdot = f_phys(x) + g_phys(x) u
* ``ResidualModel``        xdot = f_phys + g_phys u + net(x, u)
* ``NeuralOdeModel``       xdot = net(x, u)
* ``PcarnnShared``         xdot = (f_phys + df(x)) + (g_phys + dg(x)) u, one backbone
* ``PcarnnSplit``          same structure, separate drift and gain nets

The PCARNN variants stay control-affine by construction: the nets see
only the body state, the learned gain correction fills rows 1-3 of g,
and the last row of the total gain matrix is bound to [1, 0] so the
steering integrator channel is never corrupted.  Zero-initialized
correction heads reproduce the analytical model exactly, which is the
graceful-degradation property the safety filter relies on.

MLPs are plain numpy: affine layers, SiLU on hidden layers, identity
output, optional spectral normalization by power iteration (weights are
divided by the top-singular-value estimate only when it exceeds 1).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .dynamics import (
    BodyState,
    ControlInput,
    VehicleParams,
    body_derivative,
    control_matrix,
    drift,
)

__all__ = [
    "ShapeMismatch",
    "WrongVariant",
    "MlpSpec",
    "Mlp",
    "init_mlp",
    "mlp_forward",
    "spectral_normalize",
    "AnalyticalModel",
    "ResidualModel",
    "NeuralOdeModel",
    "PcarnnShared",
    "PcarnnSplit",
    "model_derivative",
    "pcarnn_fg",
    "make_residual",
    "make_neural_ode",
    "make_pcarnn_shared",
    "make_pcarnn_split",
    "save_weights",
    "load_weights",
    "weights_to_json",
]

WEIGHTS_MAGIC = b"PCARNN1\x00"

# fixed feature scales: raw body states span tens of m/s, the long force
# spans thousands of N; these keep net inputs O(1)
BODY_INPUT_SCALE = (0.1, 0.5, 1.0, 2.0)
CONTROL_INPUT_SCALE = (1.0, 1e-3)  # (delta_dot, F_x); force scale mandated

_VARIANT_TAGS = {"residual": 1, "neural_ode": 2, "pcarnn_shared": 3, "pcarnn_split": 4}
_TAG_VARIANTS = {v: k for k, v in _VARIANT_TAGS.items()}


class ShapeMismatch(ValueError):
    """Input or weight shapes disagree with the layer spec."""


class WrongVariant(TypeError):
    """Operation requested on a model variant that does not support it."""


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden: tuple[int, ...]
    output_dim: int
    spectral_norm: bool = False
    input_scale: tuple[float, ...] = ()

    def __post_init__(self):
        if self.input_dim < 1 or self.output_dim < 1 or any(h < 1 for h in self.hidden):
            raise ShapeMismatch("all layer widths must be >= 1")
        scale = tuple(self.input_scale) or (1.0,) * self.input_dim
        if len(scale) != self.input_dim:
            raise ShapeMismatch("input_scale length must equal input_dim")
        object.__setattr__(self, "hidden", tuple(self.hidden))
        object.__setattr__(self, "input_scale", scale)

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden, self.output_dim)


def _silu(z):
    return z / (1.0 + np.exp(-z))


def _silu_grad(z):
    s = 1.0 / (1.0 + np.exp(-z))
    return s * (1.0 + z * (1.0 - s))


@dataclass
class Mlp:
    """Weights and biases for one feedforward net, plus power-iteration state."""

    spec: MlpSpec
    weights: list = field(default_factory=list)   # per layer, (out, in)
    biases: list = field(default_factory=list)    # per layer, (out,)
    u_vectors: list = field(default_factory=list)  # per layer, (in,) or None

    def __post_init__(self):
        dims = self.spec.dims
        if len(self.weights) != len(dims) - 1 or len(self.biases) != len(dims) - 1:
            raise ShapeMismatch("layer count disagrees with spec")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (dims[i + 1], dims[i]) or b.shape != (dims[i + 1],):
                raise ShapeMismatch(f"layer {i} shape {w.shape} != {(dims[i + 1], dims[i])}")
        if not self.u_vectors:
            self.u_vectors = [None] * len(self.weights)

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def copy(self) -> "Mlp":
        return Mlp(
            self.spec,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            [None if u is None else u.copy() for u in self.u_vectors],
        )

    def forward(self, x):
        """Evaluate the net on a single vector or an (n, input_dim) batch."""
        out, _ = self.forward_cached(x)
        return out

    def forward_cached(self, x):
        """Forward pass keeping pre-activations for the backward pass.

        Returns (output, caches); caches[i] = (layer input, pre-activation).
        """
        a = np.asarray(x, dtype=float)
        single = a.ndim == 1
        if single:
            a = a[None, :]
        if a.shape[1] != self.spec.input_dim:
            raise ShapeMismatch(
                f"input dim {a.shape[1]} != spec input_dim {self.spec.input_dim}"
            )
        a = a * np.asarray(self.spec.input_scale)
        caches = []
        last = self.n_layers - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ w.T + b
            caches.append((a, z))
            a = z if i == last else _silu(z)
        return (a[0] if single else a), caches

    def backward(self, caches, grad_out):
        """Reverse-mode gradients of a scalar loss through the net.

        grad_out is dL/d(output), shape (n, output_dim).  Returns
        (weight grads, bias grads) matching self.weights / self.biases.
        """
        g = np.asarray(grad_out, dtype=float)
        if g.ndim == 1:
            g = g[None, :]
        grads_w = [None] * self.n_layers
        grads_b = [None] * self.n_layers
        dz = g  # output layer is identity
        for i in range(self.n_layers - 1, -1, -1):
            a_in, z = caches[i]
            grads_w[i] = dz.T @ a_in
            grads_b[i] = dz.sum(axis=0)
            if i > 0:
                da = dz @ self.weights[i]
                dz = da * _silu_grad(caches[i - 1][1])
        return grads_w, grads_b


def init_mlp(spec: MlpSpec, rng: np.random.Generator, final_zero=False, final_std=1e-3) -> Mlp:
    """He-style init on hidden layers; final layer zeroed or small-noise."""
    dims = spec.dims
    weights, biases = [], []
    for i in range(len(dims) - 1):
        fan_in, fan_out = dims[i], dims[i + 1]
        if i == len(dims) - 2:
            if final_zero:
                w = np.zeros((fan_out, fan_in))
            else:
                w = rng.normal(0.0, final_std, size=(fan_out, fan_in))
        else:
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in))
        weights.append(w)
        biases.append(np.zeros(fan_out))
    mlp = Mlp(spec, weights, biases)
    if spec.spectral_norm:
        mlp.u_vectors = [
            (lambda v: v / np.linalg.norm(v))(rng.normal(size=w.shape[1]))
            for w in weights
        ]
    return mlp


def mlp_forward(mlp: Mlp, x):
    return mlp.forward(x)


def spectral_normalize(mlp: Mlp, iterations: int = 3) -> Mlp:
    """Divide flagged layers by their power-iteration top-singular-value
    estimate when it exceeds 1 (shrink only, never grow).  Mutates and
    returns the same Mlp; the per-layer iteration vector persists so
    repeated cheap calls keep refining the estimate."""
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if not mlp.spec.spectral_norm:
        return mlp
    for i, w in enumerate(mlp.weights):
        u = mlp.u_vectors[i]
        if u is None or u.shape != (w.shape[1],):
            u = np.ones(w.shape[1]) / np.sqrt(w.shape[1])
        sigma = 0.0
        for _ in range(iterations):
            v = w @ u
            nv = np.linalg.norm(v)
            if nv == 0.0:
                sigma = 0.0
                break
            v /= nv
            u = w.T @ v
            nu = np.linalg.norm(u)
            if nu == 0.0:
                sigma = 0.0
                break
            u /= nu
            sigma = float(v @ (w @ u))
        mlp.u_vectors[i] = u
        if sigma > 1.0:
            mlp.weights[i] = w / sigma
    return mlp


# -- model variants ----------------------------------------------------


class AnalyticalModel:
    """Pure physics baseline."""

    def __init__(self, params: VehicleParams):
        self.params = params

    def derivative(self, s: BodyState, u: ControlInput):
        return body_derivative(s, u, self.params)


def _control_features(s: BodyState, u: ControlInput):
    return (s.v_x, s.v_y, s.omega, s.delta, u[0], u[1])


class ResidualModel:
    """Physics plus an unstructured state-and-input correction."""

    def __init__(self, params: VehicleParams, net: Mlp):
        if net.spec.input_dim != 6 or net.spec.output_dim != 4:
            raise ShapeMismatch("residual net must map 6 -> 4")
        self.params = params
        self.net = net

    def derivative(self, s: BodyState, u: ControlInput):
        base = body_derivative(s, u, self.params)
        corr = self.net.forward(np.array(_control_features(s, u)))
        return (base[0] + corr[0], base[1] + corr[1], base[2] + corr[2], base[3] + corr[3])


class NeuralOdeModel:
    """Fully learned derivative, no physics prior."""

    def __init__(self, net: Mlp):
        if net.spec.input_dim != 6 or net.spec.output_dim != 4:
            raise ShapeMismatch("neural-ODE net must map 6 -> 4")
        self.net = net

    def derivative(self, s: BodyState, u: ControlInput):
        out = self.net.forward(np.array(_control_features(s, u)))
        return (out[0], out[1], out[2], out[3])


class PcarnnShared:
    """One backbone emitting 4 drift + 6 gain corrections (rows 1-3 x 2)."""

    def __init__(self, params: VehicleParams, net: Mlp):
        if net.spec.input_dim != 4 or net.spec.output_dim != 10:
            raise ShapeMismatch("shared PCARNN net must map 4 -> 10")
        self.params = params
        self.net = net

    def fg(self, s: BodyState):
        out = self.net.forward(np.array(s))
        f = drift(s, self.params)
        g = control_matrix(s, self.params)
        f += out[:4]
        g[:3, :] += out[4:].reshape(3, 2)
        g[3, 0], g[3, 1] = 1.0, 0.0  # hard binding of the steering row
        return f, g

    def derivative(self, s: BodyState, u: ControlInput):
        f, g = self.fg(s)
        return f + g @ np.asarray(u)


class PcarnnSplit:
    """Separate drift and gain correction nets."""

    def __init__(self, params: VehicleParams, net_f: Mlp, net_g: Mlp):
        if net_f.spec.input_dim != 4 or net_f.spec.output_dim != 4:
            raise ShapeMismatch("split PCARNN drift net must map 4 -> 4")
        if net_g.spec.input_dim != 4 or net_g.spec.output_dim != 6:
            raise ShapeMismatch("split PCARNN gain net must map 4 -> 6")
        self.params = params
        self.net_f = net_f
        self.net_g = net_g

    def fg(self, s: BodyState):
        s4 = np.array(s)
        f = drift(s, self.params) + self.net_f.forward(s4)
        g = control_matrix(s, self.params)
        g[:3, :] += self.net_g.forward(s4).reshape(3, 2)
        g[3, 0], g[3, 1] = 1.0, 0.0
        return f, g

    def derivative(self, s: BodyState, u: ControlInput):
        f, g = self.fg(s)
        return f + g @ np.asarray(u)


def model_derivative(m, s: BodyState, u: ControlInput):
    """Variant-dispatched body derivative (4 components)."""
    return m.derivative(s, u)


def pcarnn_fg(m, s: BodyState):
    """Total (f, g) of a PCARNN variant; WrongVariant otherwise."""
    if not isinstance(m, (PcarnnShared, PcarnnSplit)):
        raise WrongVariant(f"{type(m).__name__} has no drift/gain decomposition")
    return m.fg(s)


# -- factories ---------------------------------------------------------


def make_residual(params, hidden=(64, 64), rng=None, spectral_norm=False) -> ResidualModel:
    rng = rng or np.random.default_rng(0)
    spec = MlpSpec(6, tuple(hidden), 4, spectral_norm, BODY_INPUT_SCALE + CONTROL_INPUT_SCALE)
    net = spectral_normalize(init_mlp(spec, rng), 50)
    return ResidualModel(params, net)


def make_neural_ode(hidden=(64, 64), rng=None) -> NeuralOdeModel:
    rng = rng or np.random.default_rng(0)
    spec = MlpSpec(6, tuple(hidden), 4, False, BODY_INPUT_SCALE + CONTROL_INPUT_SCALE)
    return NeuralOdeModel(init_mlp(spec, rng, final_std=0.1))


def make_pcarnn_shared(params, hidden=(64, 64), rng=None) -> PcarnnShared:
    """Shared backbone, spectrally normalized end to end; the gain rows of
    the final layer start exactly zero, the drift rows start small."""
    rng = rng or np.random.default_rng(0)
    spec = MlpSpec(4, tuple(hidden), 10, True, BODY_INPUT_SCALE)
    net = init_mlp(spec, rng, final_std=1e-3)
    net.weights[-1][4:, :] = 0.0
    net.biases[-1][4:] = 0.0
    return PcarnnShared(params, spectral_normalize(net, 50))


def make_pcarnn_split(params, hidden_f=(64, 64), hidden_g=(64, 64), rng=None) -> PcarnnSplit:
    """Split nets; spectral normalization only on the gain net."""
    rng = rng or np.random.default_rng(0)
    spec_f = MlpSpec(4, tuple(hidden_f), 4, False, BODY_INPUT_SCALE)
    spec_g = MlpSpec(4, tuple(hidden_g), 6, True, BODY_INPUT_SCALE)
    net_f = init_mlp(spec_f, rng, final_std=1e-3)
    net_g = spectral_normalize(init_mlp(spec_g, rng, final_zero=True), 50)
    return PcarnnSplit(params, net_f, net_g)


# -- serialization -----------------------------------------------------


def _pack_mlp(mlp: Mlp) -> bytes:
    spec = mlp.spec
    parts = [struct.pack("<I", spec.input_dim), struct.pack("<I", len(spec.hidden))]
    parts += [struct.pack("<I", h) for h in spec.hidden]
    parts.append(struct.pack("<I", spec.output_dim))
    parts.append(struct.pack("<I", 1 if spec.spectral_norm else 0))
    parts.append(np.asarray(spec.input_scale, dtype="<f8").tobytes())
    for i in range(mlp.n_layers):
        parts.append(np.ascontiguousarray(mlp.weights[i], dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(mlp.biases[i], dtype="<f8").tobytes())
        if spec.spectral_norm:
            u = mlp.u_vectors[i]
            if u is None:
                u = np.ones(mlp.weights[i].shape[1]) / np.sqrt(mlp.weights[i].shape[1])
            parts.append(np.ascontiguousarray(u, dtype="<f8").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def u32(self):
        (v,) = struct.unpack_from("<I", self.buf, self.pos)
        self.pos += 4
        return v

    def f64s(self, n):
        arr = np.frombuffer(self.buf, dtype="<f8", count=n, offset=self.pos).copy()
        self.pos += 8 * n
        return arr


def _unpack_mlp(r: _Reader) -> Mlp:
    input_dim = r.u32()
    n_hidden = r.u32()
    hidden = tuple(r.u32() for _ in range(n_hidden))
    output_dim = r.u32()
    spectral = bool(r.u32())
    scale = tuple(r.f64s(input_dim))
    spec = MlpSpec(input_dim, hidden, output_dim, spectral, scale)
    dims = spec.dims
    weights, biases, u_vecs = [], [], []
    for i in range(len(dims) - 1):
        weights.append(r.f64s(dims[i + 1] * dims[i]).reshape(dims[i + 1], dims[i]))
        biases.append(r.f64s(dims[i + 1]))
        u_vecs.append(r.f64s(dims[i]) if spectral else None)
    return Mlp(spec, weights, biases, u_vecs)


def _variant_name(m) -> str:
    return {
        ResidualModel: "residual",
        NeuralOdeModel: "neural_ode",
        PcarnnShared: "pcarnn_shared",
        PcarnnSplit: "pcarnn_split",
    }[type(m)]


def _nets_of(m) -> list:
    if isinstance(m, PcarnnSplit):
        return [m.net_f, m.net_g]
    return [m.net]


def save_weights(path, m) -> None:
    """Versioned binary weights file; layout is magic, variant tag, then
    per net the MlpSpec integers, input scales, and flat little-endian
    float64 layer arrays in declaration order."""
    if isinstance(m, AnalyticalModel):
        raise WrongVariant("analytical model has no weights to save")
    nets = _nets_of(m)
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        fh.write(struct.pack("<I", _VARIANT_TAGS[_variant_name(m)]))
        fh.write(struct.pack("<I", len(nets)))
        for net in nets:
            fh.write(_pack_mlp(net))


def load_weights(path, params: VehicleParams | None = None, renorm_iterations: int = 50):
    """Load a weights file back into its model variant.

    Physics-based variants need VehicleParams (from the run config).
    Spectrally normalized nets are re-normalized with the stated number
    of power iterations at load time.
    """
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != WEIGHTS_MAGIC:
        raise ValueError(f"{path}: not a weights file (bad magic)")
    r = _Reader(buf[8:])
    variant = _TAG_VARIANTS.get(r.u32())
    if variant is None:
        raise ValueError(f"{path}: unknown variant tag")
    n_nets = r.u32()
    nets = [spectral_normalize(_unpack_mlp(r), renorm_iterations) for _ in range(n_nets)]
    if variant != "neural_ode" and params is None:
        raise ValueError(f"{variant} weights need VehicleParams to rebuild the model")
    if variant == "residual":
        return ResidualModel(params, nets[0])
    if variant == "neural_ode":
        return NeuralOdeModel(nets[0])
    if variant == "pcarnn_shared":
        return PcarnnShared(params, nets[0])
    return PcarnnSplit(params, nets[0], nets[1])


def weights_to_json(m) -> str:
    """Textual export of the same content for inspection."""
    nets = []
    for net in _nets_of(m):
        nets.append(
            {
                "input_dim": net.spec.input_dim,
                "hidden": list(net.spec.hidden),
                "output_dim": net.spec.output_dim,
                "spectral_norm": net.spec.spectral_norm,
                "input_scale": list(net.spec.input_scale),
                "layers": [
                    {"W": w.tolist(), "b": b.tolist()}
                    for w, b in zip(net.weights, net.biases)
                ],
            }
        )
    return json.dumps({"variant": _variant_name(m), "nets": nets}, indent=1)
