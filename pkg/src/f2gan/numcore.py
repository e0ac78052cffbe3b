"""Dense MLPs with hand-written backprop, GAN losses, Adam and spectral norm.

Everything is float64 numpy. Batches are 2-D arrays of shape
``(rows, features)``; dense weights are stored as ``(in_dim, out_dim)`` so a
layer computes ``x @ W + b``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ConfigurationError, NumericDomainError, UsageError

ACTIVATIONS = ("relu", "leaky_relu", "tanh", "sigmoid", "linear")


def as_tensor2d(data, cols: Optional[int] = None) -> np.ndarray:
    """Coerce ``data`` to a finite float64 matrix."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1) if cols is None else arr.reshape(-1, cols)
    if arr.ndim != 2:
        raise ConfigurationError(f"expected a 2-D batch, got shape {arr.shape}")
    if cols is not None and arr.shape[1] != cols:
        raise ConfigurationError(f"expected {cols} columns, got {arr.shape[1]}")
    if not np.all(np.isfinite(arr)):
        raise NumericDomainError("tensor contains non-finite entries")
    return arr


def _sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _activate(kind, slope, pre):
    if kind == "linear":
        return pre
    if kind == "relu":
        return np.maximum(pre, 0.0)
    if kind == "leaky_relu":
        return np.where(pre > 0, pre, slope * pre)
    if kind == "tanh":
        return np.tanh(pre)
    if kind == "sigmoid":
        return _sigmoid(pre)
    raise ConfigurationError(f"unknown activation {kind!r}")


def _activation_grad(kind, slope, pre, post, grad):
    if kind == "linear":
        return grad
    if kind == "relu":
        return grad * (pre > 0)
    if kind == "leaky_relu":
        return grad * np.where(pre > 0, 1.0, slope)
    if kind == "tanh":
        return grad * (1.0 - post * post)
    if kind == "sigmoid":
        return grad * post * (1.0 - post)
    raise ConfigurationError(f"unknown activation {kind!r}")


@dataclass
class SpectralNormState:
    """Running estimate of the leading left singular vector of one weight."""

    u: np.ndarray
    power_iterations: int = 0

    @classmethod
    def init(cls, rows: int, rng: np.random.Generator) -> "SpectralNormState":
        u = rng.standard_normal(rows)
        return cls(u / np.linalg.norm(u))


def _sigma_and_v(weight, u):
    wtu = weight.T @ u
    sigma = float(np.linalg.norm(wtu))
    if sigma == 0.0:
        return 0.0, np.zeros_like(wtu)
    return sigma, wtu / sigma


def power_iteration(weight: np.ndarray, state: SpectralNormState) -> None:
    """Advance ``state.u`` by one power-iteration step on ``weight``."""
    _, v = _sigma_and_v(weight, state.u)
    wv = weight @ v
    norm = np.linalg.norm(wv)
    if norm == 0.0:
        return
    state.u = wv / norm
    state.power_iterations += 1


def spectral_normalize(weight: np.ndarray, state: SpectralNormState) -> np.ndarray:
    """One power iteration, then ``weight / sigma``.

    A zero matrix is returned unchanged and leaves ``state.u`` alone.
    """
    weight = np.asarray(weight, dtype=np.float64)
    if state.u.shape != (weight.shape[0],):
        raise ConfigurationError(
            f"u has length {state.u.shape[0]} but weight has {weight.shape[0]} rows"
        )
    if not np.any(weight):
        return weight.copy()
    power_iteration(weight, state)
    sigma, _ = _sigma_and_v(weight, state.u)
    return weight / sigma


@dataclass
class Dense:
    weight: np.ndarray
    bias: np.ndarray
    activation: str = "linear"
    slope: float = 0.2
    sn: Optional[SpectralNormState] = None

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if self.weight.ndim != 2 or self.bias.shape[0] != self.weight.shape[1]:
            raise ConfigurationError(
                f"weight {self.weight.shape} and bias {self.bias.shape} do not chain"
            )
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        if self.activation == "leaky_relu" and not self.slope > 0:
            raise ConfigurationError("leaky_relu slope must be positive")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]


@dataclass
class MLPModel:
    """Feed-forward stack of :class:`Dense` layers.

    ``version`` is bumped on every parameter update so that a forward cache
    can be recognised as stale.
    """

    layers: list
    version: int = 0

    def __post_init__(self):
        if not self.layers:
            raise ConfigurationError("an MLP needs at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise ConfigurationError(
                    f"layer dims do not chain: {a.out_dim} -> {b.in_dim}"
                )

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    def parameters(self) -> list:
        out = []
        for layer in self.layers:
            out += [layer.weight, layer.bias]
        return out

    def copy(self) -> "MLPModel":
        layers = []
        for l in self.layers:
            sn = None if l.sn is None else SpectralNormState(l.sn.u.copy(), l.sn.power_iterations)
            layers.append(Dense(l.weight.copy(), l.bias.copy(), l.activation, l.slope, sn))
        return MLPModel(layers, self.version)

    def refresh_spectral_norm(self) -> None:
        """One power iteration for every spectrally normalised layer."""
        for layer in self.layers:
            if layer.sn is not None and np.any(layer.weight):
                power_iteration(layer.weight, layer.sn)


def build_mlp(
    sizes,
    hidden_activation: str = "leaky_relu",
    output_activation: str = "linear",
    rng: Optional[np.random.Generator] = None,
    slope: float = 0.2,
    spectral_norm: bool = False,
) -> MLPModel:
    """Glorot-uniform initialised MLP with layer widths ``sizes``."""
    rng = rng if rng is not None else np.random.default_rng()
    layers = []
    for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        act = output_activation if k == len(sizes) - 2 else hidden_activation
        sn = SpectralNormState.init(fan_in, rng) if spectral_norm else None
        layers.append(Dense(w, np.zeros(fan_out), act, slope, sn))
    return MLPModel(layers)


@dataclass
class ForwardCache:
    model_id: int
    version: int
    inputs: list = field(default_factory=list)
    pre: list = field(default_factory=list)
    post: list = field(default_factory=list)
    effective: list = field(default_factory=list)  # (W_used, sigma, v)


def _effective_weight(layer):
    if layer.sn is None:
        return layer.weight, None, None
    sigma, v = _sigma_and_v(layer.weight, layer.sn.u)
    if sigma == 0.0:
        return layer.weight, None, None
    return layer.weight / sigma, sigma, v


def forward(model: MLPModel, batch) -> tuple:
    """Run ``batch`` through ``model``; returns ``(outputs, cache)``."""
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ConfigurationError(
            f"batch shape {x.shape} does not match model input_dim {model.input_dim}"
        )
    cache = ForwardCache(id(model), model.version)
    for layer in model.layers:
        w, sigma, v = _effective_weight(layer)
        pre = x @ w + layer.bias
        post = _activate(layer.activation, layer.slope, pre)
        cache.inputs.append(x)
        cache.pre.append(pre)
        cache.post.append(post)
        cache.effective.append((w, sigma, v))
        x = post
    return x, cache


def predict(model: MLPModel, batch) -> np.ndarray:
    return forward(model, batch)[0]


def backward(model: MLPModel, cache: ForwardCache, output_grad) -> tuple:
    """Backpropagate ``output_grad``; returns ``(param_grads, input_grad)``.

    ``param_grads`` is ordered like :meth:`MLPModel.parameters`. Gradients of
    spectrally normalised weights account for the dependence of sigma on the
    raw weight, with the power-iteration vector held fixed.
    """
    if cache.model_id != id(model) or cache.version != model.version:
        raise UsageError("forward cache is stale; rerun forward on the current model")
    g = np.asarray(output_grad, dtype=np.float64)
    if g.shape != cache.post[-1].shape:
        raise ConfigurationError(
            f"output_grad shape {g.shape} != outputs shape {cache.post[-1].shape}"
        )
    grads = [None] * (2 * len(model.layers))
    for k in reversed(range(len(model.layers))):
        layer = model.layers[k]
        w, sigma, v = cache.effective[k]
        g = _activation_grad(layer.activation, layer.slope, cache.pre[k], cache.post[k], g)
        gw = cache.inputs[k].T @ g
        if sigma is not None:
            u = layer.sn.u
            gw = (gw - np.sum(gw * w) * np.outer(u, v)) / sigma
        grads[2 * k] = gw
        grads[2 * k + 1] = g.sum(axis=0)
        g = g @ w.T
    return grads, g


@dataclass(frozen=True)
class LossSpec:
    kind: str = "mse"
    y_real: float = 1.0
    y_fake: float = 0.0
    y_real_for_g: float = 1.0

    def __post_init__(self):
        if self.kind not in ("mse", "bce"):
            raise ConfigurationError(f"unknown loss kind {self.kind!r}")
        if self.kind == "mse" and (self.y_real, self.y_fake, self.y_real_for_g) != (1.0, 0.0, 1.0):
            raise ConfigurationError("mse loss uses y_real = y_real_for_g = 1, y_fake = 0")


def pointwise_loss(spec: LossSpec, outputs, label: float) -> tuple:
    """Per-entry loss and its derivative with respect to each output."""
    o = np.asarray(outputs, dtype=np.float64)
    if spec.kind == "mse":
        diff = o - label
        return 0.5 * diff * diff, diff
    if np.any(o <= 0.0) or np.any(o >= 1.0):
        raise NumericDomainError("bce loss needs outputs strictly inside (0, 1)")
    loss = -(label * np.log(o) + (1.0 - label) * np.log1p(-o))
    grad = -label / o + (1.0 - label) / (1.0 - o)
    return loss, grad


def loss_and_grad(spec: LossSpec, outputs, label: float) -> tuple:
    """Mean loss over all entries of ``outputs`` and its gradient."""
    o = np.asarray(outputs, dtype=np.float64)
    loss, grad = pointwise_loss(spec, o, label)
    n = o.size
    return float(loss.sum() / n), grad / n


@dataclass
class AdamState:
    first_moment: list
    second_moment: list
    step_count: int = 0
    eta: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params, **hyper) -> "AdamState":
        state = cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **hyper)
        if not (0 <= state.beta1 < 1 and 0 <= state.beta2 < 1):
            raise ConfigurationError("Adam betas must lie in [0, 1)")
        return state


def adam_step(params: list, grads: list, state: AdamState) -> list:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise ConfigurationError("params, grads and Adam moments differ in length")
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if p.shape != g.shape or p.shape != m.shape:
            raise ConfigurationError(f"shape mismatch in adam_step: {p.shape} vs {g.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.eta * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return params


def apply_gradients(model: MLPModel, grads: list, state: AdamState) -> None:
    adam_step(model.parameters(), grads, state)
    model.version += 1


def finite_diff(fn: Callable[[np.ndarray], np.ndarray], point, h: float = 1e-5) -> np.ndarray:
    """Central-difference derivative of ``fn`` at ``point``.

    A scalar ``fn`` gives the gradient, shaped like ``point``; an array-valued
    one gives the Jacobian with shape ``fn_shape + point_shape``.
    """
    if not h > 0:
        raise ConfigurationError("finite-difference step must be positive")
    x = np.array(point, dtype=np.float64)
    flat = x.reshape(-1)
    columns = []
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        up = np.asarray(fn(x), dtype=np.float64)
        flat[k] = orig - h
        down = np.asarray(fn(x), dtype=np.float64)
        flat[k] = orig
        columns.append((up - down) / (2.0 * h))
    jac = np.stack(columns, axis=-1)
    return jac.reshape(jac.shape[:-1] + x.shape)
