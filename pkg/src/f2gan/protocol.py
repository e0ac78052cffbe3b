"""Server and client roles of the decentralised GAN, and the training loop.

Clients keep their data distribution to themselves. The only things that
cross the client boundary are the immutable message types below: generated
samples go out, and discriminator losses, judgments and input gradients come
back. The transport is synchronous and in-process; every message passes
through an optional trace hook.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field, fields
from functools import partial
from typing import Callable, Optional, Sequence

import numpy as np

from . import aggregation as agg
from .analysis import DiscreteDensity, empirical_divergence, mode_coverage, p_max_reference
from .config import RunConfig
from .datagen import ClientDistribution, compute_Z, default_grid
from .errors import ConfigurationError, NonFiniteError, ProtocolError
from .numcore import (
    AdamState,
    LossSpec,
    MLPModel,
    apply_gradients,
    backward,
    build_mlp,
    forward,
    loss_and_grad,
    pointwise_loss,
    predict,
)


def _frozen(arr) -> np.ndarray:
    out = np.array(arr, dtype=np.float64, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class FakeBatch:
    """Generated samples sent to a client for discriminator training."""

    samples: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "samples", _frozen(self.samples))


@dataclass(frozen=True)
class JudgeRequest:
    samples: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "samples", _frozen(self.samples))


@dataclass(frozen=True)
class JudgmentReply:
    client_id: int
    values: np.ndarray
    input_grads: np.ndarray

    def __post_init__(self):
        values = _frozen(self.values).reshape(-1)
        grads = _frozen(self.input_grads)
        if grads.ndim != 2 or grads.shape[0] != values.shape[0]:
            raise ProtocolError(f"reply shapes disagree: values {values.shape}, grads {grads.shape}")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "input_grads", grads)


@dataclass(frozen=True)
class TrainAck:
    client_id: int
    disc_loss: float


MESSAGE_TYPES = (FakeBatch, JudgeRequest, JudgmentReply, TrainAck)


def build_generator(cfg: RunConfig, rng: np.random.Generator) -> MLPModel:
    m = cfg.model
    sizes = [m.noise_dim, *m.generator_hidden, cfg.scenario.dim]
    g = build_mlp(sizes, m.generator_activation or m.hidden_activation, "linear", rng, slope=m.slope)
    g.layers[-1].weight *= m.generator_output_gain
    return g


def build_discriminator(cfg: RunConfig, rng: np.random.Generator) -> MLPModel:
    m = cfg.model
    head = "sigmoid" if cfg.loss == "bce" else "linear"
    sizes = [cfg.scenario.dim, *m.discriminator_hidden, 1]
    return build_mlp(sizes, m.hidden_activation, head, rng, slope=m.slope,
                     spectral_norm=m.spectral_norm)


def _adam(cfg: RunConfig, params, discriminator: bool = False) -> AdamState:
    o = cfg.optimizer
    eta = o.disc_eta if discriminator and o.disc_eta is not None else o.eta
    return AdamState.for_params(params, eta=eta, beta1=o.beta1, beta2=o.beta2, epsilon=o.epsilon)


class ClientState:
    """One client: a private data source and its own discriminator."""

    def __init__(self, client_id: int, discriminator: MLPModel, optimizer: AdamState,
                 distribution: ClientDistribution, loss_spec: LossSpec,
                 rng: np.random.Generator, buffer_size: Optional[int] = None):
        self.client_id = client_id
        self.discriminator = discriminator
        self.disc_optimizer = optimizer
        self.loss_spec = loss_spec
        self._distribution = distribution
        self._rng = rng
        self._buffer = None
        if buffer_size is not None:
            self._buffer = distribution.sample(buffer_size, rng)
        self.real_sample_hook: Optional[Callable[[np.ndarray], None]] = None

    def _real_batch(self, n: int) -> np.ndarray:
        if self._buffer is None:
            x = self._distribution.sample(n, self._rng)
        else:
            x = self._buffer[self._rng.integers(0, self._buffer.shape[0], size=n)]
        if self.real_sample_hook is not None:
            self.real_sample_hook(x)
        return x

    def train_step(self, fake_batch) -> TrainAck:
        fakes = fake_batch.samples if isinstance(fake_batch, FakeBatch) else np.asarray(fake_batch)
        d = self.discriminator
        if fakes.ndim != 2 or fakes.shape[1] != d.input_dim:
            raise ConfigurationError(
                f"client {self.client_id}: fake batch shape {fakes.shape} does not match D input {d.input_dim}"
            )
        real = self._real_batch(fakes.shape[0])
        d.refresh_spectral_norm()
        out, cache = forward(d, np.vstack([real, fakes]))
        n = real.shape[0]
        l_real, g_real = loss_and_grad(self.loss_spec, out[:n], self.loss_spec.y_real)
        l_fake, g_fake = loss_and_grad(self.loss_spec, out[n:], self.loss_spec.y_fake)
        grads, _ = backward(d, cache, np.vstack([g_real, g_fake]))
        apply_gradients(d, grads, self.disc_optimizer)
        return TrainAck(self.client_id, l_real + l_fake)

    def judge(self, samples) -> JudgmentReply:
        x = samples.samples if isinstance(samples, JudgeRequest) else np.asarray(samples)
        out, cache = forward(self.discriminator, x)
        _, input_grad = backward(self.discriminator, cache, np.ones_like(out))
        return JudgmentReply(self.client_id, out[:, 0], input_grad)

    def handle(self, message):
        if isinstance(message, FakeBatch):
            return self.train_step(message)
        if isinstance(message, JudgeRequest):
            return self.judge(message)
        raise ProtocolError(f"client cannot handle {type(message).__name__}")


def client_train_step(c: ClientState, fake_batch) -> TrainAck:
    return c.train_step(fake_batch)


def client_judge(c: ClientState, samples) -> JudgmentReply:
    return c.judge(samples)


class InProcessTransport:
    """Synchronous delivery to clients, keyed by client id, with trace hooks.

    Hooks are called as ``hook(direction, client_id, message)`` where
    direction is ``"to_client"`` or ``"to_server"``.
    """

    def __init__(self, clients: Sequence[ClientState], hooks: Sequence[Callable] = ()):
        self._clients = {c.client_id: c for c in clients}
        self.hooks = list(hooks)

    @property
    def client_ids(self) -> list:
        return sorted(self._clients)

    def _trace(self, direction, cid, msg):
        if not isinstance(msg, MESSAGE_TYPES):
            raise ProtocolError(f"refusing to carry {type(msg).__name__}")
        for hook in self.hooks:
            hook(direction, cid, msg)

    def send(self, client_id: int, message):
        self._trace("to_client", client_id, message)
        reply = self._clients[client_id].handle(message)
        self._trace("to_server", client_id, reply)
        return reply

    def broadcast(self, message, client_ids: Optional[Sequence[int]] = None) -> list:
        ids = self.client_ids if client_ids is None else list(client_ids)
        return [self.send(cid, message) for cid in ids]


@dataclass
class ServerState:
    generator: MLPModel
    gen_optimizer: AdamState
    strategy: agg.AggregationStrategy
    noise_dim: int
    loss_spec: LossSpec
    rng: np.random.Generator
    iteration: int = 0
    _pending: Optional[tuple] = field(default=None, repr=False)

    def generate(self, n: int) -> np.ndarray:
        """Sample ``z ~ N(0, I)``, run G, and remember the cache for the update."""
        z = self.rng.standard_normal((n, self.noise_dim))
        x, cache = forward(self.generator, z)
        self._pending = (x, cache)
        return x


@dataclass
class GeneratorReport:
    loss: float
    lam: float
    lambda_grad: float
    regularizer: float


def stack_replies(replies: Sequence[JudgmentReply]) -> agg.JudgmentBatch:
    replies = sorted(replies, key=lambda r: r.client_id)
    return agg.JudgmentBatch(
        np.stack([r.values for r in replies]),
        np.stack([r.input_grads for r in replies]),
        tuple(r.client_id for r in replies),
    )


def server_generator_step(s: ServerState, replies: Sequence[JudgmentReply],
                          expected_ids: Optional[Sequence[int]] = None) -> GeneratorReport:
    """Aggregate the judgments, backprop into G, take one Adam step (and one on lambda)."""
    if s._pending is None:
        raise ProtocolError("no generated batch is awaiting judgment")
    if not replies:
        raise ProtocolError("no judgment replies received")
    got = sorted(r.client_id for r in replies)
    if expected_ids is not None and got != sorted(expected_ids):
        raise ProtocolError(f"expected replies from clients {sorted(expected_ids)}, got {got}")
    x, cache = s._pending
    batch = stack_replies(replies)
    if batch.values.shape[1] != x.shape[0]:
        raise ProtocolError("replies do not judge the pending batch")
    signal = agg.combine(s.strategy, batch.values, s.loss_spec)
    sample_grads = np.sum(signal.coeffs[:, :, None] * batch.input_grads, axis=0)
    grads, _ = backward(s.generator, cache, sample_grads)
    apply_gradients(s.generator, grads, s.gen_optimizer)
    agg.update_lambda(s.strategy, signal.lambda_grad)
    s._pending = None
    s.iteration += 1
    return GeneratorReport(signal.loss, s.strategy.lambda_value, signal.lambda_grad, signal.regularizer)


@dataclass
class MetricsRecord:
    iteration: int
    lam: float
    generator_loss: float
    disc_losses: list
    covered_count: int
    num_modes: int
    mode_fractions: list
    empirical_divergence: float
    wall_time: float = 0.0


@dataclass
class TrainingResult:
    config: RunConfig
    generator: MLPModel
    clients: list
    strategy: agg.AggregationStrategy
    records: list
    lambda_trajectory: list
    sample_dumps: list
    Z: float
    grid_warnings: list
    param_trace: Optional[list] = None

    @property
    def final_record(self) -> Optional[MetricsRecord]:
        return self.records[-1] if self.records else None


@dataclass
class Evaluator:
    """Ground-truth side of the simulation: coverage and divergence of G's samples."""

    modes: list
    reference: DiscreteDensity
    radius: float
    threshold: float
    n_samples: int
    noise_dim: int
    rng: np.random.Generator

    def samples(self, generator: MLPModel) -> np.ndarray:
        z = self.rng.standard_normal((self.n_samples, self.noise_dim))
        return predict(generator, z)

    def score(self, x: np.ndarray) -> tuple:
        cov = mode_coverage(x, self.modes, self.radius, self.threshold)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            div = empirical_divergence(x, self.reference, min_samples=1)
        return cov, div


def seed_streams(seed: int, num_clients: int) -> dict:
    """Independent generators for every random consumer in a run."""
    root = np.random.SeedSequence(seed)
    gen_init, noise, evaluation, *client_seqs = root.spawn(3 + num_clients)
    clients = []
    for seq in client_seqs:
        init, data = seq.spawn(2)
        clients.append((np.random.default_rng(init), np.random.default_rng(data)))
    return {
        "gen_init": np.random.default_rng(gen_init),
        "noise": np.random.default_rng(noise),
        "eval": np.random.default_rng(evaluation),
        "clients": clients,
    }


def _setup(cfg: RunConfig):
    distributions = cfg.scenario.build_clients()
    n = len(distributions)
    streams = seed_streams(cfg.seed, n)
    loss_spec = LossSpec(cfg.loss)
    generator = build_generator(cfg, streams["gen_init"])
    clients = []
    for cid, (dist, (init_rng, data_rng)) in enumerate(zip(distributions, streams["clients"])):
        d = build_discriminator(cfg, init_rng)
        opt = _adam(cfg, d.parameters(), discriminator=True)
        clients.append(ClientState(cid, d, opt, dist, loss_spec, data_rng, cfg.scenario.buffer_size))
    o = cfg.optimizer
    strategy = agg.AggregationStrategy.make(
        cfg.strategy, lambda_init=cfg.lam.init, beta=cfg.lam.beta, fixed_value=cfg.lam.fixed,
        eta=o.eta, beta1=o.beta1, beta2=o.beta2, epsilon=o.epsilon,
    )
    server = ServerState(generator, _adam(cfg, generator.parameters()), strategy,
                         cfg.model.noise_dim, loss_spec, streams["noise"])

    grid = default_grid(distributions, cfg.metrics.grid_points)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        Z = compute_Z(distributions, grid)
    evaluator = Evaluator(
        [c.mean for c in cfg.scenario.class_densities()],
        p_max_reference(distributions, grid),
        cfg.metrics.coverage_radius,
        cfg.metrics.coverage_threshold,
        cfg.metrics.eval_samples,
        cfg.model.noise_dim,
        streams["eval"],
    )
    return server, clients, evaluator, Z, [str(w.message) for w in caught]


def _dump_points(iterations: int) -> list:
    return sorted({0, iterations // 2, iterations})


def _check_finite(iteration, **values):
    for name, v in values.items():
        if not np.all(np.isfinite(v)):
            raise NonFiniteError(f"non-finite {name} at iteration {iteration}", iteration)


class BoundaryAudit:
    """Watches a run for real data leaving a client.

    Every real batch a client draws and every array carried by a message is
    recorded; :meth:`report` counts message values that coincide exactly
    with a real sample value. Checks run in chunks so memory stays bounded
    by the real data plus one chunk of payloads.
    """

    def __init__(self, chunk_values: int = 1_000_000):
        self.chunk_values = chunk_values
        self.messages = 0
        self.payload_values = 0
        self.leaks = 0
        self._real = []
        self._real_sorted = np.empty(0)
        self._pending = []
        self._pending_size = 0

    def on_real(self, client_id: int, x: np.ndarray) -> None:
        self._real.append(np.array(x, dtype=np.float64).ravel())

    def on_message(self, direction: str, client_id: int, message) -> None:
        self.messages += 1
        for f in fields(message):
            v = getattr(message, f.name)
            if isinstance(v, float):
                v = np.array([v])
            if isinstance(v, np.ndarray):
                self._pending.append(v.ravel())
                self._pending_size += v.size
        if self._pending_size >= self.chunk_values:
            self._flush()

    def _flush(self) -> None:
        if self._real:
            self._real_sorted = np.unique(np.concatenate([self._real_sorted, *self._real]))
            self._real = []
        if self._pending:
            sent = np.concatenate(self._pending)
            self.payload_values += sent.size
            if self._real_sorted.size:
                self.leaks += int(np.isin(sent, self._real_sorted, assume_unique=False).sum())
            self._pending, self._pending_size = [], 0

    def report(self) -> dict:
        self._flush()
        return {"messages": self.messages, "payload_values": self.payload_values,
                "real_values": int(self._real_sorted.size), "leaks": self.leaks}


def run_training(cfg: RunConfig, hooks: Sequence[Callable] = (),
                 on_record: Optional[Callable[[MetricsRecord], None]] = None,
                 trace_params: bool = False,
                 audit: Optional[BoundaryAudit] = None) -> TrainingResult:
    """Alternate client discriminator steps and server generator steps.

    Each iteration: the server draws one fake batch; every client trains its
    discriminator on it and then judges it (or a fresh batch when
    ``fresh_judge_batch`` is set); the server aggregates the judgments and
    updates G and lambda.
    """
    server, clients, evaluator, Z, grid_warnings = _setup(cfg)
    hooks = list(hooks)
    if audit is not None:
        hooks.append(audit.on_message)
        for c in clients:
            c.real_sample_hook = partial(audit.on_real, c.client_id)
    transport = InProcessTransport(clients, hooks)
    ids = transport.client_ids
    records, lam_traj, dumps = [], [], []
    param_trace = [] if trace_params else None
    dump_at = set(_dump_points(cfg.iterations))
    start = time.perf_counter()
    if 0 in dump_at:
        dumps.append((0, evaluator.samples(server.generator)))

    for t in range(1, cfg.iterations + 1):
        with np.errstate(over="ignore", invalid="ignore"):
            x = server.generate(cfg.batch_size)
            _check_finite(t, generated_samples=x)
            acks = transport.broadcast(FakeBatch(x))
            disc_losses = [a.disc_loss for a in sorted(acks, key=lambda a: a.client_id)]
            _check_finite(t, disc_losses=disc_losses)
            if cfg.fresh_judge_batch:
                x = server.generate(cfg.batch_size)
                _check_finite(t, generated_samples=x)
            targets = ids if server.strategy.uses_all_clients else [ids[agg.mdgan_schedule(t - 1, len(ids))]]
            replies = transport.broadcast(JudgeRequest(x), targets)
            for r in replies:
                _check_finite(t, judgments=r.values, input_gradients=r.input_grads)
            report = server_generator_step(server, replies, targets)
        _check_finite(t, generator_loss=report.loss, lam=report.lam)
        lam_traj.append((t, report.lam))
        if trace_params:
            param_trace.append(_snapshot(server, clients, report, disc_losses))

        if t % cfg.metrics.cadence == 0 or t == cfg.iterations:
            samples = evaluator.samples(server.generator)
            _check_finite(t, generated_samples=samples)
            cov, div = evaluator.score(samples)
            rec = MetricsRecord(t, report.lam, report.loss, disc_losses, cov.covered_count,
                                cov.num_modes, cov.mass_fractions, div, time.perf_counter() - start)
            records.append(rec)
            if on_record is not None:
                on_record(rec)
            if t in dump_at:
                dumps.append((t, samples))
        elif t in dump_at:
            dumps.append((t, evaluator.samples(server.generator)))

    return TrainingResult(cfg, server.generator, clients, server.strategy, records, lam_traj,
                          dumps, Z, grid_warnings, param_trace)


def _snapshot(server, clients, report, disc_losses):
    return {
        "generator": [p.copy() for p in server.generator.parameters()],
        "discriminators": [[p.copy() for p in c.discriminator.parameters()] for c in clients],
        "generator_loss": report.loss,
        "disc_losses": list(disc_losses),
    }


def run_centralized(cfg: RunConfig, trace_params: bool = False) -> TrainingResult:
    """Plain single-discriminator GAN training without the message layer.

    Uses the same random streams as a one-client :func:`run_training`, so the
    two must agree bit for bit.
    """
    distributions = cfg.scenario.build_clients()
    if len(distributions) != 1:
        raise ConfigurationError("centralized baseline expects a single data distribution")
    streams = seed_streams(cfg.seed, 1)
    spec = LossSpec(cfg.loss)
    g = build_generator(cfg, streams["gen_init"])
    init_rng, data_rng = streams["clients"][0]
    d = build_discriminator(cfg, init_rng)
    g_opt, d_opt = _adam(cfg, g.parameters()), _adam(cfg, d.parameters(), discriminator=True)
    dist = distributions[0]
    noise = streams["noise"]
    trace = [] if trace_params else None
    lam_traj = []
    for t in range(1, cfg.iterations + 1):
        z = noise.standard_normal((cfg.batch_size, cfg.model.noise_dim))
        x, g_cache = forward(g, z)
        real = dist.sample(cfg.batch_size, data_rng)
        d.refresh_spectral_norm()
        out, d_cache = forward(d, np.vstack([real, x]))
        n = real.shape[0]
        l_real, g_real = loss_and_grad(spec, out[:n], spec.y_real)
        l_fake, g_fake = loss_and_grad(spec, out[n:], spec.y_fake)
        d_grads, _ = backward(d, d_cache, np.vstack([g_real, g_fake]))
        apply_gradients(d, d_grads, d_opt)
        if cfg.fresh_judge_batch:
            z = noise.standard_normal((cfg.batch_size, cfg.model.noise_dim))
            x, g_cache = forward(g, z)
        judged, j_cache = forward(d, x)
        _, dx = backward(d, j_cache, np.ones_like(judged))
        loss, dl = pointwise_loss(spec, judged[:, 0], spec.y_real_for_g)
        sample_grads = (dl / x.shape[0])[:, None] * dx
        g_grads, _ = backward(g, g_cache, sample_grads)
        apply_gradients(g, g_grads, g_opt)
        lam_traj.append((t, 0.0))
        if trace_params:
            trace.append({
                "generator": [p.copy() for p in g.parameters()],
                "discriminators": [[p.copy() for p in d.parameters()]],
                "generator_loss": float(loss.mean()),
                "disc_losses": [l_real + l_fake],
            })
    return TrainingResult(cfg, g, [], agg.AggregationStrategy("f2u"), [], lam_traj, [], 1.0, [], trace)
