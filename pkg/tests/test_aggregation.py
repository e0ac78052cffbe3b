import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from f2gan import aggregation as agg
from f2gan.errors import ConfigurationError
from f2gan.numcore import LossSpec, finite_diff

# exp-based values evaluated at 30 digits with mpmath
SOFTMAX_02_08 = (0.354343693774204547, 0.645656306225795453)
AGG_02_08 = 0.587393783735477276

judgments = st.integers(1, 10).flatmap(
    lambda n: arrays(np.float64, (n, 6), elements=st.floats(-2, 2, allow_nan=False))
)


def test_f2u_examples():
    dmax, idx = agg.f2u_select(np.array([[0.2], [0.8], [0.5]]))
    assert (dmax[0], idx[0]) == (0.8, 1)
    dmax, idx = agg.f2u_select(np.array([[0.4], [0.4]]))
    assert (dmax[0], idx[0]) == (0.4, 0)


def test_f2u_matches_linear_scan():
    rng = np.random.default_rng(0)
    values = rng.standard_normal((5, 32))
    dmax, idx = agg.f2u_select(values)
    for s in range(32):
        best = 0
        for i in range(1, 5):
            if values[i, s] > values[best, s]:
                best = i
        assert idx[s] == best and dmax[s] == values[best, s]


def test_softmax_examples():
    np.testing.assert_array_equal(agg.softmax_weights(np.zeros((4, 1)), 0.0)[:, 0], [0.25] * 4)
    s = agg.softmax_weights(np.array([[0.1], [0.9]]), 1000.0)[:, 0]
    assert s[0] < 1e-300 and s[1] == 1.0
    s = agg.softmax_weights(np.array([[0.2], [0.8]]), 1.0)[:, 0]
    np.testing.assert_allclose(s, SOFTMAX_02_08, rtol=1e-14)


def test_softmax_rejects_negative_lambda():
    with pytest.raises(ConfigurationError):
        agg.softmax_weights(np.zeros((2, 1)), -0.1)


def test_softmax_is_stable_for_large_inputs():
    s = agg.softmax_weights(np.array([[1e4], [1e4 - 1.0]]), 50.0)
    assert np.all(np.isfinite(s)) and s.sum() == pytest.approx(1.0)


def test_aggregate_examples():
    v = np.array([[0.2, 1.0], [0.8, 3.0]])
    np.testing.assert_array_equal(agg.f2a_aggregate(v, 0.0), [0.5, 2.0])
    same = np.full((3, 4), 0.37)
    np.testing.assert_array_equal(agg.f2a_aggregate(same, 2.5), same[0])
    assert agg.f2a_aggregate(np.array([[0.2], [0.8]]), 1.0)[0] == pytest.approx(AGG_02_08, rel=1e-14)


@settings(max_examples=200, deadline=None)
@given(values=judgments, lam=st.floats(0, 50))
def test_aggregate_bounds_and_weights(values, lam):
    s = agg.softmax_weights(values, lam)
    assert np.all(s >= 0)
    np.testing.assert_allclose(s.sum(axis=0), 1.0, atol=1e-12)
    d = agg.f2a_aggregate(values, lam)
    assert np.all(d >= values.min(axis=0) - 1e-12)
    assert np.all(d <= values.max(axis=0) + 1e-12)
    assert np.all(agg.dagg_dlambda(values, lam) >= 0)


@settings(max_examples=200, deadline=None)
@given(values=judgments, lam=st.floats(1e-3, 50))
def test_softmax_argmax_matches_f2u(values, lam):
    gaps = lam * (values.max(axis=0) - values)
    # tiny gaps round away inside exp
    assume(np.all((gaps == 0) | (gaps > 1e-9)))
    _, idx = agg.f2u_select(values)
    np.testing.assert_array_equal(np.argmax(agg.softmax_weights(values, lam), axis=0), idx)


def test_dagg_dlambda_examples():
    assert not np.any(agg.dagg_dlambda(np.full((3, 2), 0.6), 1.3))
    assert agg.dagg_dlambda(np.array([[0.0], [1.0]]), 0.0)[0] == 0.25


@pytest.mark.parametrize("n", [2, 5, 10])
def test_derivatives_match_finite_differences(n):
    rng = np.random.default_rng(n)
    for _ in range(100):
        values = rng.uniform(-2, 2, size=(n, 4))
        lam = float(rng.uniform(0, 5))
        fd = finite_diff(lambda p: agg.f2a_aggregate(values, p[0]), np.array([lam + 1e-3]))[:, 0]
        np.testing.assert_allclose(agg.dagg_dlambda(values, lam + 1e-3), fd, rtol=1e-6, atol=1e-9)
        jac = agg.dagg_dvalues(values, lam)
        for i in range(n):
            def row(r, i=i):
                v = values.copy()
                v[i] = r
                return agg.f2a_aggregate(v, lam)
            np.testing.assert_allclose(jac[i], np.diag(finite_diff(row, values[i].copy())),
                                       rtol=1e-6, atol=1e-9)


def test_dagg_ddi_examples():
    v = np.random.default_rng(4).uniform(size=(4, 3))
    np.testing.assert_allclose(agg.dagg_ddi(v, 0.0, 2), 0.25, rtol=1e-15)
    np.testing.assert_array_equal(agg.dagg_ddi(v[:1], 7.0, 0), 1.0)
    with pytest.raises(ConfigurationError):
        agg.dagg_ddi(v, 1.0, 4)


def test_printed_jacobian_form_differs_from_finite_differences():
    v = np.array([[0.2], [0.9], [0.5]])
    lam = 2.0
    fd = finite_diff(lambda r: agg.f2a_aggregate(np.vstack([r, v[1:]]), lam), v[0].copy())[0]
    assert agg.dagg_ddi(v, lam, 0)[0] == pytest.approx(fd[0], rel=1e-8)
    assert abs(agg.dagg_ddi_printed(v, lam, 0)[0] - fd[0]) > 1e-2


def test_lambda_gradient_examples():
    same = np.full((3, 5), 0.4)
    g = agg.lambda_gradient(np.full(5, -0.6), same, agg.LambdaParam(0.1, 0.1))
    assert g == pytest.approx(0.02, abs=1e-15)
    assert agg.lambda_gradient(np.ones(5), same + np.arange(3)[:, None], agg.LambdaParam(-0.5, 0.1)) == 0.0


def test_lambda_gradient_matches_objective():
    rng = np.random.default_rng(9)
    spec = LossSpec()
    values = rng.uniform(-1, 2, size=(4, 16))
    param = agg.LambdaParam(0.7, 0.1)

    def objective(p):
        lam = max(0.0, p[0])
        loss, _ = agg.pointwise_loss(spec, agg.f2a_aggregate(values, lam), 1.0)
        return loss.mean() + 0.1 * lam * lam

    _, dl = agg.pointwise_loss(spec, agg.f2a_aggregate(values, 0.7), 1.0)
    fd = finite_diff(objective, np.array([0.7]))[0]
    assert agg.lambda_gradient(dl, values, param) == pytest.approx(fd, rel=1e-5)


def test_gman_examples():
    losses = np.array([0.3, 1.2, 0.6])
    total, w = agg.gman_aggregate(losses, agg.LambdaParam(5.0), trainable=False)
    assert total == pytest.approx(losses.mean(), rel=1e-15)
    total, _ = agg.gman_aggregate(losses, agg.LambdaParam(1e4))
    assert total == pytest.approx(1.2, abs=1e-12)
    total, w = agg.gman_aggregate(losses, agg.LambdaParam(1.0))
    e = np.exp(losses)
    assert total == pytest.approx(float(e @ losses / e.sum()), rel=1e-14)


def test_mdgan_schedule():
    assert agg.mdgan_schedule(0, 5) == 0
    assert agg.mdgan_schedule(7, 5) == 2
    visits = [agg.mdgan_schedule(r, 4) for r in range(8)]
    assert sorted(visits) == [0, 0, 1, 1, 2, 2, 3, 3]
    with pytest.raises(ConfigurationError):
        agg.mdgan_schedule(0, 0)


def test_f2a_at_zero_differs_from_gman0():
    spec = LossSpec()
    v = np.array([[0.2], [0.8]])
    f2a = agg.combine(agg.AggregationStrategy.make("fixed_lambda", fixed_value=0.0), v, spec)
    gman0 = agg.combine(agg.AggregationStrategy.make("gman0"), v, spec)
    assert f2a.loss == pytest.approx(0.125, abs=1e-15)
    assert gman0.loss == pytest.approx(0.17, abs=1e-15)


@pytest.mark.parametrize("kind", ["f2u", "f2a", "mdgan", "gman_star", "gman0", "fixed_lambda"])
def test_single_client_signals_agree(kind):
    spec = LossSpec()
    v = np.array([[0.3, -0.2, 1.4]])
    strat = agg.AggregationStrategy.make(kind, fixed_value=2.0)
    sig = agg.combine(strat, v, spec)
    _, dl = agg.pointwise_loss(spec, v[0], 1.0)
    np.testing.assert_array_equal(sig.coeffs[0], dl / 3)


def test_strategy_validation():
    with pytest.raises(ConfigurationError):
        agg.AggregationStrategy("median")
    with pytest.raises(ConfigurationError):
        agg.AggregationStrategy.make("fixed_lambda")
    assert agg.AggregationStrategy.make("gman0").lambda_value == 0.0
    assert not agg.AggregationStrategy.make("mdgan").uses_all_clients


def test_update_lambda_moves_against_gradient():
    strat = agg.AggregationStrategy.make("f2a")
    agg.update_lambda(strat, -1.0)
    assert strat.lam.lambda_star == pytest.approx(0.1 + 2e-4)
    fixed = agg.AggregationStrategy.make("fixed_lambda", fixed_value=3.6)
    agg.update_lambda(fixed, -1.0)
    assert fixed.lambda_value == 3.6


def test_judgment_batch_validation():
    with pytest.raises(ConfigurationError):
        agg.JudgmentBatch(np.zeros((2, 3)), np.zeros((2, 4, 1)))
    with pytest.raises(ConfigurationError):
        agg.JudgmentBatch(np.array([[np.nan]]), np.zeros((1, 1, 1)))
    jb = agg.JudgmentBatch(np.zeros((2, 3)), np.zeros((2, 3, 1)))
    assert jb.client_ids == (0, 1) and jb.num_clients == 2
