"""Ways of turning several discriminators' judgments into one generator signal.

Judgment matrices have shape ``(num_clients, batch)``: row ``i`` holds
``D_i(x_s)`` for every generated sample ``x_s``. Input gradients have shape
``(num_clients, batch, sample_dim)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigurationError
from .numcore import AdamState, LossSpec, adam_step, pointwise_loss

STRATEGY_KINDS = ("f2u", "f2a", "mdgan", "gman_star", "gman0", "fixed_lambda")


@dataclass(frozen=True)
class JudgmentBatch:
    values: np.ndarray
    input_grads: np.ndarray
    client_ids: tuple = ()

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        grads = np.asarray(self.input_grads, dtype=np.float64)
        if values.ndim != 2:
            raise ConfigurationError("judgment values must be (num_clients, batch)")
        if grads.ndim != 3 or grads.shape[:2] != values.shape:
            raise ConfigurationError(
                f"input_grads shape {grads.shape} inconsistent with values {values.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise ConfigurationError("judgment values must be finite")
        ids = tuple(self.client_ids) or tuple(range(values.shape[0]))
        if len(ids) != values.shape[0]:
            raise ConfigurationError("one client id per judgment row is required")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "input_grads", grads)
        object.__setattr__(self, "client_ids", ids)

    @property
    def num_clients(self) -> int:
        return self.values.shape[0]


@dataclass
class LambdaParam:
    """Aggregation sharpness stored pre-ReLU, as ``lambda = max(0, lambda_star)``."""

    lambda_star: float = 0.1
    beta: float = 0.1
    trainable: bool = True

    def __post_init__(self):
        if self.beta < 0:
            raise ConfigurationError("beta must be non-negative")

    @property
    def value(self) -> float:
        return max(0.0, float(self.lambda_star))


@dataclass
class AggregationStrategy:
    kind: str
    lam: Optional[LambdaParam] = None
    optimizer: Optional[AdamState] = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ConfigurationError(
                f"unknown strategy {self.kind!r}; expected one of {', '.join(STRATEGY_KINDS)}"
            )
        if self.kind in ("f2a", "gman_star", "fixed_lambda") and self.lam is None:
            raise ConfigurationError(f"strategy {self.kind} needs a lambda parameter")
        if self.kind == "gman0":
            self.lam = LambdaParam(0.0, 0.0, trainable=False)

    @classmethod
    def make(cls, kind, lambda_init=0.1, beta=0.1, fixed_value=None, **adam) -> "AggregationStrategy":
        if kind == "fixed_lambda":
            if fixed_value is None or fixed_value < 0:
                raise ConfigurationError("fixed_lambda needs a non-negative value")
            return cls(kind, LambdaParam(float(fixed_value), 0.0, trainable=False))
        if kind in ("f2a", "gman_star"):
            lam = LambdaParam(float(lambda_init), float(beta), trainable=True)
            return cls(kind, lam, AdamState.for_params([np.zeros(1)], **adam))
        return cls(kind)

    @property
    def lambda_value(self) -> float:
        return 0.0 if self.lam is None else self.lam.value

    @property
    def uses_all_clients(self) -> bool:
        return self.kind != "mdgan"


def f2u_select(values) -> tuple:
    """Most forgiving judgment per sample; ties go to the lowest client index."""
    values = np.asarray(values, dtype=np.float64)
    idx = np.argmax(values, axis=0)
    return values[idx, np.arange(values.shape[1])], idx


def softmax_weights(values, lam: float) -> np.ndarray:
    """Softmax of ``lam * values`` over clients (axis 0)."""
    if lam < 0:
        raise ConfigurationError("lambda must be non-negative")
    values = np.asarray(values, dtype=np.float64)
    scaled = lam * values
    scaled = scaled - scaled.max(axis=0, keepdims=True)
    e = np.exp(scaled)
    return e / e.sum(axis=0, keepdims=True)


def f2a_aggregate(values, lam: float) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if lam == 0.0:
        return values.mean(axis=0)
    s = softmax_weights(values, lam)
    return np.sum(s * values, axis=0)


def dagg_dlambda(values, lam: float) -> np.ndarray:
    """Derivative of the aggregate with respect to lambda: an S-weighted variance."""
    values = np.asarray(values, dtype=np.float64)
    s = softmax_weights(values, lam)
    mean = np.sum(s * values, axis=0)
    # centred form; equal to E_S[D^2] - E_S[D]^2 but without cancellation
    return np.sum(s * (values - mean) ** 2, axis=0)


def dagg_dvalues(values, lam: float) -> np.ndarray:
    """Partial derivatives of the aggregate with respect to every ``D_i``.

    Shape ``(num_clients, batch)``. Entry ``[i, s]`` is
    ``S_i + lam * S_i * (D_i - D_agg)``; the softmax coupling terms from the
    other clients are included.
    """
    values = np.asarray(values, dtype=np.float64)
    s = softmax_weights(values, lam)
    agg = np.sum(s * values, axis=0)
    return s + lam * s * (values - agg)


def dagg_ddi(values, lam: float, i: int) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if not 0 <= i < values.shape[0]:
        raise ConfigurationError(f"client index {i} out of range")
    return dagg_dvalues(values, lam)[i]


def dagg_ddi_printed(values, lam: float, i: int) -> np.ndarray:
    """``S_i + lam * D_i * S_i * (1 - S_i)``, the diagonal-only approximation.

    Kept for comparison; it drops the ``-lam * S_i * sum_j S_j D_j`` coupling
    and does not match finite differences of the aggregate.
    """
    values = np.asarray(values, dtype=np.float64)
    s = softmax_weights(values, lam)[i]
    return s + lam * values[i] * s * (1.0 - s)


def lambda_gradient(loss_grad_wrt_dagg, values, lam: LambdaParam) -> float:
    """Gradient of the regularised generator objective with respect to ``lambda_star``.

    ``loss_grad_wrt_dagg`` holds the per-sample derivative of the loss with
    respect to the aggregated judgment; the batch mean is taken here.
    """
    if lam.lambda_star <= 0.0:
        return 0.0
    lg = np.asarray(loss_grad_wrt_dagg, dtype=np.float64)
    return float(np.mean(lg * dagg_dlambda(values, lam.value)) + 2.0 * lam.beta * lam.value)


def gman_aggregate(losses, lam: LambdaParam, trainable: bool = True) -> tuple:
    """Softmax-weighted loss; higher losses get more weight.

    Returns ``(aggregated_loss, weights)``. With ``trainable=False`` lambda is
    pinned to zero and the result is the plain mean.
    """
    losses = np.asarray(losses, dtype=np.float64).reshape(-1, 1)
    value = lam.value if trainable else 0.0
    w = softmax_weights(losses, value)[:, 0]
    return float(np.sum(w * losses[:, 0])), w


def mdgan_schedule(round_index: int, num_clients: int) -> int:
    if num_clients < 1:
        raise ConfigurationError("need at least one client")
    return round_index % num_clients


@dataclass
class GeneratorSignal:
    """What the server needs to update G for one batch.

    ``coeffs[i, s]`` is the derivative of the generator loss with respect to
    ``D_i(x_s)`` (batch averaging included), so the per-sample gradient is
    ``sum_i coeffs[i, s] * input_grads[i, s]``.
    """

    loss: float
    coeffs: np.ndarray
    lambda_grad: float = 0.0
    regularizer: float = 0.0


def combine(strategy: AggregationStrategy, values, loss_spec: LossSpec) -> GeneratorSignal:
    """Generator loss and per-judgment coefficients for ``strategy``.

    For ``mdgan`` the caller passes only the scheduled client's row.
    """
    values = np.asarray(values, dtype=np.float64)
    n_clients, batch = values.shape
    label = loss_spec.y_real_for_g
    kind = strategy.kind

    if kind == "f2u":
        dmax, idx = f2u_select(values)
        loss, dl = pointwise_loss(loss_spec, dmax, label)
        coeffs = np.zeros_like(values)
        coeffs[idx, np.arange(batch)] = dl / batch
        return GeneratorSignal(float(loss.mean()), coeffs)

    if kind == "mdgan":
        if n_clients != 1:
            raise ConfigurationError("mdgan combines a single scheduled client per round")
        loss, dl = pointwise_loss(loss_spec, values[0], label)
        return GeneratorSignal(float(loss.mean()), (dl / batch)[None, :])

    if kind in ("f2a", "fixed_lambda"):
        lam = strategy.lam.value
        agg = f2a_aggregate(values, lam)
        loss, dl = pointwise_loss(loss_spec, agg, label)
        coeffs = (dl / batch)[None, :] * dagg_dvalues(values, lam)
        lgrad = lambda_gradient(dl, values, strategy.lam) if strategy.lam.trainable else 0.0
        reg = strategy.lam.beta * lam * lam
        return GeneratorSignal(float(loss.mean()), coeffs, lgrad, reg)

    # gman_star / gman0: softmax over the per-discriminator batch losses
    loss, dl = pointwise_loss(loss_spec, values, label)
    per_client = loss.mean(axis=1)
    lam = strategy.lam.value
    total, w = gman_aggregate(per_client, strategy.lam, trainable=kind == "gman_star")
    jac = w + lam * w * (per_client - total)
    coeffs = jac[:, None] * (dl / batch)
    lgrad = 0.0
    reg = 0.0
    if kind == "gman_star":
        reg = strategy.lam.beta * lam * lam
        if strategy.lam.lambda_star > 0.0:
            var = float(np.sum(w * (per_client - total) ** 2))
            lgrad = var + 2.0 * strategy.lam.beta * lam
    return GeneratorSignal(total, coeffs, lgrad, reg)


def update_lambda(strategy: AggregationStrategy, lambda_grad: float) -> None:
    """One Adam step on ``lambda_star`` for strategies that learn lambda."""
    if strategy.lam is None or not strategy.lam.trainable or strategy.optimizer is None:
        return
    param = np.array([strategy.lam.lambda_star])
    adam_step([param], [np.array([lambda_grad])], strategy.optimizer)
    strategy.lam.lambda_star = float(param[0])
