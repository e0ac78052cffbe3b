import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from f2gan.errors import ConfigurationError, NumericDomainError, UsageError
from f2gan.numcore import (
    AdamState,
    Dense,
    LossSpec,
    MLPModel,
    SpectralNormState,
    adam_step,
    apply_gradients,
    backward,
    build_mlp,
    finite_diff,
    forward,
    loss_and_grad,
    predict,
    spectral_normalize,
)


def _flat_params(model):
    return np.concatenate([p.ravel() for p in model.parameters()])


def _set_params(model, theta):
    offset = 0
    for p in model.parameters():
        p[...] = theta[offset:offset + p.size].reshape(p.shape)
        offset += p.size


def test_identity_layer():
    m = MLPModel([Dense(np.eye(2), np.zeros(2))])
    assert np.array_equal(predict(m, [[1.0, 2.0]]), [[1.0, 2.0]])


def test_relu_layer():
    m = MLPModel([Dense(np.eye(2), np.zeros(2), "relu")])
    assert np.array_equal(predict(m, [[-1.0, 3.0]]), [[0.0, 3.0]])


def test_two_layer_matches_matrix_chain():
    rng = np.random.default_rng(3)
    m = build_mlp([3, 5, 2], "tanh", "linear", rng)
    x = rng.standard_normal((7, 3))
    w0, b0, w1, b1 = m.parameters()
    expected = np.tanh(x @ w0 + b0) @ w1 + b1
    np.testing.assert_allclose(predict(m, x), expected, rtol=0, atol=1e-12)


def test_forward_rejects_wrong_width():
    m = build_mlp([3, 4, 1], rng=np.random.default_rng(0))
    with pytest.raises(ConfigurationError):
        forward(m, np.zeros((2, 2)))


def test_linear_slope_two_gives_input_grad_two():
    m = MLPModel([Dense(np.array([[2.0]]), np.zeros(1))])
    out, cache = forward(m, np.array([[0.3], [-1.2]]))
    _, gx = backward(m, cache, np.ones_like(out))
    assert np.array_equal(gx, [[2.0], [2.0]])


def test_zero_output_grad_gives_zero_grads():
    rng = np.random.default_rng(1)
    m = build_mlp([2, 4, 1], rng=rng)
    out, cache = forward(m, rng.standard_normal((5, 2)))
    grads, gx = backward(m, cache, np.zeros_like(out))
    assert all(not np.any(g) for g in grads)
    assert not np.any(gx)


def test_stale_cache_raises():
    rng = np.random.default_rng(2)
    m = build_mlp([2, 3, 1], rng=rng)
    out, cache = forward(m, rng.standard_normal((4, 2)))
    grads, _ = backward(m, cache, np.ones_like(out))
    apply_gradients(m, grads, AdamState.for_params(m.parameters()))
    with pytest.raises(UsageError):
        backward(m, cache, np.ones_like(out))


@pytest.mark.parametrize("act", ["tanh", "sigmoid", "leaky_relu", "relu", "linear"])
@pytest.mark.parametrize("spectral_norm", [False, True])
def test_backward_matches_finite_differences(act, spectral_norm):
    rng = np.random.default_rng(11)
    m = build_mlp([3, 6, 4, 2], act, "linear", rng, spectral_norm=spectral_norm)
    x = rng.standard_normal((5, 3))
    upstream = rng.standard_normal((5, 2))
    out, cache = forward(m, x)
    grads, gx = backward(m, cache, upstream)

    theta = _flat_params(m)

    def objective(t):
        _set_params(m, t)
        return float(np.sum(predict(m, x) * upstream))

    numeric = finite_diff(objective, theta.copy())
    _set_params(m, theta)
    analytic = np.concatenate([g.ravel() for g in grads])
    np.testing.assert_allclose(analytic, numeric, rtol=1e-5, atol=1e-8)

    numeric_x = finite_diff(lambda xx: float(np.sum(predict(m, xx) * upstream)), x.copy())
    np.testing.assert_allclose(gx, numeric_x, rtol=1e-5, atol=1e-8)


@settings(max_examples=25, deadline=None)
@given(
    sizes=st.lists(st.integers(1, 16), min_size=2, max_size=4),
    seed=st.integers(0, 2**31 - 1),
)
def test_backward_property_random_mlps(sizes, seed):
    rng = np.random.default_rng(seed)
    m = build_mlp(sizes, "tanh", "linear", rng)
    x = rng.standard_normal((3, sizes[0]))
    upstream = rng.standard_normal((3, sizes[-1]))
    out, cache = forward(m, x)
    grads, _ = backward(m, cache, upstream)
    theta = _flat_params(m)

    def objective(t):
        _set_params(m, t)
        return float(np.sum(predict(m, x) * upstream))

    numeric = finite_diff(objective, theta.copy())
    _set_params(m, theta)
    analytic = np.concatenate([g.ravel() for g in grads])
    np.testing.assert_allclose(analytic, numeric, rtol=1e-5, atol=1e-8)


def test_mse_examples():
    spec = LossSpec()
    assert loss_and_grad(spec, np.array([1.0]), 1.0) == (0.0, np.array([0.0]))
    loss, grad = loss_and_grad(spec, np.array([0.0]), 1.0)
    assert loss == 0.5 and grad[0] == -1.0


def test_mse_labels_are_fixed():
    with pytest.raises(ConfigurationError):
        LossSpec("mse", y_fake=-1.0)


def test_bce_domain():
    with pytest.raises(NumericDomainError):
        loss_and_grad(LossSpec("bce"), np.array([1.0]), 1.0)


@pytest.mark.parametrize("label", [0.0, 1.0])
def test_bce_grad_matches_finite_differences(label):
    spec = LossSpec("bce")
    o = np.array([0.1, 0.35, 0.8, 0.97])
    _, grad = loss_and_grad(spec, o, label)
    numeric = finite_diff(lambda v: loss_and_grad(spec, v, label)[0], o.copy())
    np.testing.assert_allclose(grad, numeric, rtol=1e-5)


def test_adam_zero_grad_is_identity():
    p = [np.array([1.0, -2.0])]
    state = AdamState.for_params(p)
    adam_step(p, [np.zeros(2)], state)
    assert np.array_equal(p[0], [1.0, -2.0])
    assert state.step_count == 1


def test_adam_first_step_closed_form():
    # with bias correction the first step is eta * g / (|g| + eps / ...)
    g = np.array([0.3, -4.0])
    p = [np.zeros(2)]
    state = AdamState.for_params(p)
    adam_step(p, [g], state)
    expected = -2e-4 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(p[0], expected, rtol=1e-12)


def test_adam_deterministic():
    def run():
        rng = np.random.default_rng(5)
        p = [rng.standard_normal(3)]
        s = AdamState.for_params(p)
        for _ in range(10):
            adam_step(p, [rng.standard_normal(3)], s)
        return p[0]

    assert np.array_equal(run(), run())


def test_spectral_normalize_scaled_identity():
    state = SpectralNormState.init(2, np.random.default_rng(0))
    for _ in range(5):
        out = spectral_normalize(3.0 * np.eye(2), state)
    np.testing.assert_allclose(out, np.eye(2), atol=1e-12)


def test_spectral_normalize_rank_one():
    u = np.array([0.6, 0.8])
    v = np.array([1.0, 0.0])
    w = 5.0 * np.outer(u, v)
    out = spectral_normalize(w, SpectralNormState.init(2, np.random.default_rng(1)))
    assert np.linalg.svd(out, compute_uv=False)[0] == pytest.approx(1.0, abs=1e-12)


def test_spectral_normalize_unit_sigma_unchanged():
    w = np.diag([1.0, 0.5])
    state = SpectralNormState.init(2, np.random.default_rng(2))
    for _ in range(30):
        out = spectral_normalize(w, state)
    np.testing.assert_allclose(out, w, atol=1e-6)


def test_spectral_normalize_zero_matrix():
    state = SpectralNormState.init(3, np.random.default_rng(3))
    u = state.u.copy()
    out = spectral_normalize(np.zeros((3, 2)), state)
    assert not np.any(out)
    assert np.array_equal(state.u, u)


@settings(max_examples=30, deadline=None)
@given(rows=st.integers(1, 8), cols=st.integers(1, 8), seed=st.integers(0, 10**6))
def test_spectral_normalize_converges(rows, cols, seed):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((rows, cols))
    state = SpectralNormState.init(rows, rng)
    for _ in range(200):
        out = spectral_normalize(w, state)
    assert np.linalg.norm(state.u) == pytest.approx(1.0, abs=1e-12)
    assert np.linalg.svd(out, compute_uv=False)[0] == pytest.approx(1.0, abs=1e-3)


def test_finite_diff_examples():
    assert finite_diff(lambda x: x[0] ** 2, np.array([3.0]), h=1e-4)[0] == pytest.approx(6.0, abs=1e-6)
    assert np.all(finite_diff(lambda x: 4.0, np.ones(3)) == 0.0)
    a = np.array([[2.0, 0.5], [0.5, 1.0]])
    x = np.array([0.3, -0.7])
    np.testing.assert_allclose(finite_diff(lambda v: v @ a @ v, x), 2 * a @ x, rtol=1e-8)


def test_finite_diff_rejects_bad_step():
    with pytest.raises(ConfigurationError):
        finite_diff(lambda x: 0.0, np.zeros(1), h=0.0)
