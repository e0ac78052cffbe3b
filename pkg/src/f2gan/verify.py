"""Numerical self-checks: gradients against finite differences, and the
divergence identities on random discrete densities.

Every check returns a :class:`CheckResult` with the worst error it measured.
Functions under test are looked up on their modules at call time, so a patched
implementation is what gets checked.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import aggregation as agg
from . import analysis
from .datagen import GridDomain
from .numcore import LossSpec, backward, build_mlp, finite_diff, forward

PROFILES = {"default": 1.0, "strict": 0.5}


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float
    seconds: float = 0.0
    detail: str = ""

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error <= self.tolerance)

    def line(self) -> str:
        mark = "PASS" if self.passed else "FAIL"
        extra = f"  {self.detail}" if self.detail else ""
        return f"{mark}  {self.name:<34} error={self.error:.3e}  tol={self.tolerance:.1e}  ({self.seconds:.2f}s){extra}"


def _rel(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def _random_judgments(rng, max_clients=6, max_batch=5):
    n = int(rng.integers(2, max_clients + 1))
    b = int(rng.integers(1, max_batch + 1))
    return rng.uniform(-0.5, 1.5, size=(n, b)), float(rng.uniform(0.0, 5.0))


def check_aggregate_lambda_derivative(rng, tol, instances=1000) -> float:
    worst = 0.0
    for _ in range(instances):
        values, lam = _random_judgments(rng)
        lam = max(lam, 1e-3)
        fd = finite_diff(lambda p: agg.f2a_aggregate(values, p[0]), np.array([lam]))[:, 0]
        worst = max(worst, _rel(agg.dagg_dlambda(values, lam), fd))
    return worst


def check_aggregate_jacobian(rng, tol, instances=1000) -> float:
    worst = 0.0
    for _ in range(instances):
        values, lam = _random_judgments(rng)
        n, b = values.shape
        i = int(rng.integers(0, n))

        def agg_of_row(row):
            v = values.copy()
            v[i] = row
            return agg.f2a_aggregate(v, lam)

        # sample s only depends on column s, so the Jacobian is diagonal
        jac = finite_diff(agg_of_row, values[i].copy())
        worst = max(worst, _rel(agg.dagg_ddi(values, lam, i), np.diag(jac)))
    return worst


def check_lambda_gradient(rng, tol, instances=1000) -> float:
    spec = LossSpec()
    worst = 0.0
    for _ in range(instances):
        values, _ = _random_judgments(rng)
        lam_star = float(rng.uniform(0.05, 5.0))
        beta = float(rng.uniform(0.0, 1.0))
        param = agg.LambdaParam(lam_star, beta)

        def objective(p):
            lam = max(0.0, p[0])
            loss, _ = agg.pointwise_loss(spec, agg.f2a_aggregate(values, lam), spec.y_real_for_g)
            return loss.mean() + beta * lam * lam

        fd = finite_diff(objective, np.array([lam_star]))
        _, dl = agg.pointwise_loss(spec, agg.f2a_aggregate(values, param.value), spec.y_real_for_g)
        worst = max(worst, _rel(agg.lambda_gradient(dl, values, param), fd))
    return worst


def _generator_gradient_error(rng, kind) -> float:
    spec = LossSpec()
    dim = int(rng.integers(1, 3))
    g = build_mlp([2, 3, dim], "tanh", "linear", rng)
    ds = [build_mlp([dim, 4, 1], "tanh", "linear", rng) for _ in range(int(rng.integers(2, 4)))]
    z = rng.standard_normal((4, 2))
    strategy = agg.AggregationStrategy.make(kind, lambda_init=float(rng.uniform(0.1, 4.0)))

    def judge(x):
        vals, grads = [], []
        for d in ds:
            out, cache = forward(d, x)
            _, gx = backward(d, cache, np.ones_like(out))
            vals.append(out[:, 0])
            grads.append(gx)
        return np.array(vals), np.array(grads)

    x, g_cache = forward(g, z)
    values, input_grads = judge(x)
    signal = agg.combine(strategy, values, spec)
    sample_grads = np.sum(signal.coeffs[:, :, None] * input_grads, axis=0)
    grads, _ = backward(g, g_cache, sample_grads)
    analytic = np.concatenate([p.ravel() for p in grads])

    params = g.parameters()
    flat = np.concatenate([p.ravel() for p in params])

    def loss_at(theta):
        offset = 0
        for p in params:
            p[...] = theta[offset:offset + p.size].reshape(p.shape)
            offset += p.size
        out, _ = forward(g, z)
        v, _ = judge(out)
        return agg.combine(strategy, v, spec).loss

    numeric = finite_diff(loss_at, flat.copy())
    loss_at(flat)
    return _rel(analytic, numeric)


def check_generator_gradient(rng, tol, instances=1000) -> float:
    kinds = ("f2a", "gman_star", "f2u")
    return max(_generator_gradient_error(rng, kinds[k % len(kinds)]) for k in range(instances))


def _random_pair(rng):
    cells = int(rng.integers(64, 4097))
    grid = GridDomain(1, (0.0,), (1.0,), cells)
    p_max = rng.random(cells) * (rng.random(cells) > 0.2)
    p_g = rng.random(cells) * (rng.random(cells) > 0.2)
    if p_max.sum() == 0:
        p_max[0] = 1.0
    if p_g.sum() == 0:
        p_g[-1] = 1.0
    alpha = float(rng.uniform(0.05, 1.0))
    return (analysis.DiscreteDensity.from_masses(grid, p_max),
            analysis.DiscreteDensity.from_masses(grid, p_g), alpha)


def check_max_discriminator_identity(rng, tol, instances=100) -> float:
    worst = 0.0
    for _ in range(instances):
        cells = int(rng.integers(64, 4097))
        n = int(rng.integers(2, 6))
        masses = rng.random((n, cells)) * (rng.random((n, cells)) > 0.3)
        masses /= np.maximum(masses.sum(axis=1, keepdims=True), 1e-300)
        p_g = rng.random(cells)
        p_g /= p_g.sum()
        worst = max(worst, analysis.lemma_gap(masses, p_g))
    return worst


def check_lsgan_objective_identity(rng, tol, instances=100) -> float:
    worst = 0.0
    for _ in range(instances):
        p_max, p_g, alpha = _random_pair(rng)
        rep = analysis.f_divergence_lsgan(p_g, p_max, alpha)
        direct = analysis.lsgan_generator_objective(p_max, p_g, alpha)
        worst = max(worst, abs(0.5 * rep.value - 0.5 * rep.constant_C - direct))
    return worst


def check_bce_objective_identity(rng, tol, instances=100) -> float:
    worst = 0.0
    for _ in range(instances):
        p_max, p_g, alpha = _random_pair(rng)
        rep = analysis.f_divergence_bce(p_g, p_max, alpha)
        direct = analysis.bce_generator_objective(p_max, p_g, alpha)
        worst = max(worst, abs(rep.value - rep.constant_C - direct))
    return worst


def check_f_convexity(rng, tol, instances=None) -> float:
    """Worst of ``|f(1)|`` and ``max(0, -f'')`` for both f variants."""
    x = np.linspace(0.0, 10.0, 2001)
    worst = 0.0
    for alpha in (0.1, 0.5, 1.0):
        for f, f2 in ((analysis.f_lsgan, analysis.f_lsgan_second_derivative),
                      (analysis.f_bce, analysis.f_bce_second_derivative)):
            worst = max(worst, abs(float(f(1.0, alpha))))
            worst = max(worst, float(np.max(np.maximum(0.0, -f2(x, alpha)))))
    return worst


def check_f_second_derivative(rng, tol, instances=None) -> float:
    """Closed-form ``f''`` against a second difference, away from ``x = 0``."""
    x = np.linspace(0.1, 10.0, 200)
    h = 1e-4
    worst = 0.0
    for alpha in (0.1, 0.5, 1.0):
        for f, f2 in ((analysis.f_lsgan, analysis.f_lsgan_second_derivative),
                      (analysis.f_bce, analysis.f_bce_second_derivative)):
            numeric = (f(x + h, alpha) - 2.0 * f(x, alpha) + f(x - h, alpha)) / (h * h)
            worst = max(worst, _rel(f2(x, alpha), numeric))
    return worst


def check_f2a_limits(rng, tol, instances=1000) -> float:
    """Exact mean at lambda 0, and agreement with the max at lambda 1000."""
    worst = 0.0
    for _ in range(instances):
        values, _ = _random_judgments(rng)
        if not np.array_equal(agg.f2a_aggregate(values, 0.0), values.mean(axis=0)):
            return float("inf")
        top = np.sort(values, axis=0)
        values[np.argmax(values, axis=0), np.arange(values.shape[1])] += np.maximum(0.0, 0.1 - (top[-1] - top[-2]))
        dmax, _ = agg.f2u_select(values)
        worst = max(worst, float(np.max(np.abs(agg.f2a_aggregate(values, 1e3) - dmax))))
    return worst


CHECKS: list[tuple[str, Callable, float]] = [
    ("aggregate_lambda_derivative", check_aggregate_lambda_derivative, 1e-5),
    ("aggregate_jacobian", check_aggregate_jacobian, 1e-5),
    ("lambda_gradient", check_lambda_gradient, 1e-5),
    ("generator_gradient", check_generator_gradient, 1e-4),
    ("max_discriminator_identity", check_max_discriminator_identity, 1e-12),
    ("lsgan_objective_identity", check_lsgan_objective_identity, 1e-10),
    ("bce_objective_identity", check_bce_objective_identity, 1e-10),
    ("f_convexity", check_f_convexity, 1e-12),
    ("f_second_derivative", check_f_second_derivative, 1e-4),
    ("f2a_limits", check_f2a_limits, 1e-6),
]


def run_checks(profile: str = "default", seed: int = 0, names=None) -> list:
    if profile not in PROFILES:
        raise ValueError(f"unknown tolerance profile {profile!r}")
    scale = PROFILES[profile]
    results = []
    for k, (name, fn, tol) in enumerate(CHECKS):
        if names is not None and name not in names:
            continue
        rng = np.random.default_rng([seed, k])
        start = time.perf_counter()
        try:
            err = fn(rng, tol * scale)
            detail = ""
        except Exception as exc:  # a crashing check is a failing check
            err, detail = float("inf"), f"{type(exc).__name__}: {exc}"
        results.append(CheckResult(name, float(err), tol * scale, time.perf_counter() - start, detail))
    return results
