import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from tvbo.gp import (BackToPriorTemporal, Dataset, ExactGP, HyperPriors, NumericalFailure,
                     Observation, ParamPoint, SpatialKernelParams, TimeInvariant,
                     WienerTemporal, b2p_kernel, fit_hyperparameters, gram_matrix,
                     jitter_cholesky, log_marginal_likelihood, posterior, predict, se_kernel,
                     spatio_temporal_kernel, wiener_kernel)

SP1 = SpatialKernelParams([1.0], 1.0)

finite = st.floats(-5, 5, allow_nan=False)
steps = st.integers(0, 500)


def obs(theta, t, y):
    return Observation(ParamPoint(theta, t), y)


# -- data containers ---------------------------------------------------------


def test_param_point_rejects_negative_or_fractional_time():
    with pytest.raises(ValueError):
        ParamPoint([0.0], -1)
    with pytest.raises(ValueError):
        ParamPoint([0.0], 1.5)


def test_imputed_observation_must_be_unstable():
    with pytest.raises(ValueError):
        Observation(ParamPoint([0.0], 0), 1.0, stable=True, imputed=True)
    Observation(ParamPoint([0.0], 0), 1.0, stable=False, imputed=True)


def test_observation_value_must_be_finite():
    with pytest.raises(ValueError):
        Observation(ParamPoint([0.0], 0), math.inf)


def test_dataset_enforces_time_order():
    d = Dataset([obs([0.0], 0, 1.0), obs([1.0], 0, 2.0)])
    d.append(obs([0.5], 3, 0.0))
    with pytest.raises(ValueError):
        d.append(obs([0.5], 2, 0.0))
    with pytest.raises(ValueError):
        Dataset([obs([0.0], 2, 1.0), obs([0.0], 1, 1.0)])


def test_dataset_window_keeps_most_recent():
    d = Dataset([obs([float(i)], i, float(i)) for i in range(6)])
    assert d.window(None) is d
    assert list(d.window(2).t) == [4.0, 5.0]


# -- kernels -----------------------------------------------------------------


def test_se_kernel_examples():
    p = SpatialKernelParams([0.7, 2.0], 1.5)
    assert se_kernel([0.3, -1.0], [0.3, -1.0], p) == 1.5
    assert se_kernel([0.0], [1.0], SP1) == pytest.approx(math.exp(-0.5), abs=1e-12)
    assert se_kernel([1.0, 2.0], [1.0, 2.0], SpatialKernelParams([1.0, 1.0])) == 1.0


def test_se_kernel_dimension_mismatch():
    with pytest.raises(ValueError):
        se_kernel([0.0, 1.0], [0.0], SP1)


def test_wiener_kernel_examples():
    for s in (1e-4, 0.03, 1.0, 7.0):
        assert wiener_kernel(0, 7, WienerTemporal(s)) == 1.0
    assert wiener_kernel(2, 3, WienerTemporal(0.03)) == pytest.approx(1.06, abs=1e-12)
    assert wiener_kernel(5, 5, WienerTemporal(0.03)) == pytest.approx(1.15, abs=1e-12)
    assert WienerTemporal(0.03).c0 == pytest.approx(-1 / 0.03)


def test_b2p_kernel_examples():
    p = BackToPriorTemporal(0.03)
    assert b2p_kernel(4, 4, p) == 1.0
    assert b2p_kernel(0, 2, p) == pytest.approx(0.97, abs=1e-12)
    assert b2p_kernel(0, 4, p) == pytest.approx(0.9409, abs=1e-12)
    with pytest.raises(ValueError):
        BackToPriorTemporal(1.0)


def test_spatio_temporal_kernel_is_product():
    a, b = ParamPoint([0.0], 2), ParamPoint([0.0], 3)
    assert spatio_temporal_kernel(a, a, SP1, WienerTemporal(0.03)) == pytest.approx(1.06)
    p = SpatialKernelParams([1.0], 0.5)
    assert spatio_temporal_kernel(a, b, p, WienerTemporal(0.03)) == pytest.approx(0.53)
    assert spatio_temporal_kernel(a, b, p, TimeInvariant()) == 0.5


def test_small_wiener_rate_recovers_spatial_kernel():
    a, b = ParamPoint([0.2], 40), ParamPoint([0.9], 90)
    k = spatio_temporal_kernel(a, b, SP1, WienerTemporal(1e-12))
    assert k == pytest.approx(se_kernel([0.2], [0.9], SP1), rel=1e-9)


def test_reparametrized_rate_is_independent_of_output_variance():
    for sk2 in (0.1, 1.0, 20.0):
        tp = WienerTemporal.from_rate(0.03, sk2)
        assert sk2 * (tp(10, 10) - tp(0, 0)) == pytest.approx(0.3)


@settings(max_examples=100, deadline=None)
@given(st.lists(finite, min_size=2, max_size=2), st.lists(finite, min_size=2, max_size=2),
       steps, steps, st.floats(1e-4, 1.0), st.floats(0.01, 0.99))
def test_kernels_are_symmetric(a, b, t1, t2, s, eps):
    p = SpatialKernelParams([0.4, 1.3], 2.0)
    assert se_kernel(a, b, p) == se_kernel(b, a, p)
    assert wiener_kernel(t1, t2, WienerTemporal(s)) == wiener_kernel(t2, t1, WienerTemporal(s))
    assert b2p_kernel(t1, t2, BackToPriorTemporal(eps)) == b2p_kernel(t2, t1, BackToPriorTemporal(eps))
    pa, pb = ParamPoint(a, t1), ParamPoint(b, t2)
    for tp in (WienerTemporal(s), BackToPriorTemporal(eps), TimeInvariant()):
        assert spatio_temporal_kernel(pa, pb, p, tp) == spatio_temporal_kernel(pb, pa, p, tp)


@settings(max_examples=50, deadline=None)
@given(steps, st.floats(1e-6, 10.0))
def test_wiener_anchoring_property(t, s):
    assert wiener_kernel(0, t, WienerTemporal(s)) == 1.0
    assert wiener_kernel(t, 0, WienerTemporal(s)) == 1.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.integers(2, 25))
def test_gram_matrix_is_psd(seed, n):
    rng = np.random.default_rng(seed)
    pts = [ParamPoint(rng.uniform(-2, 2, 3), int(t)) for t in rng.integers(0, 300, n)]
    sp = SpatialKernelParams(rng.uniform(0.1, 2, 3), 1.3)
    for tp in (WienerTemporal(0.03), BackToPriorTemporal(0.03), TimeInvariant()):
        ev = np.linalg.eigvalsh(gram_matrix(pts, sp, tp))
        assert ev.min() > -1e-8 * ev.max()


def test_gram_matrix_examples():
    assert gram_matrix([ParamPoint([0.3], 0)], SP1, WienerTemporal(0.03)).tolist() == [[1.0]]
    p = ParamPoint([0.3, 0.1], 4)
    K = gram_matrix([p, p], SpatialKernelParams([1.0, 1.0]), WienerTemporal(0.03))
    assert np.linalg.matrix_rank(K) == 1
    assert np.all(K == K[0, 0])


def test_gram_matrix_matches_entrywise_oracle():
    rng = np.random.default_rng(3)
    pts = [ParamPoint(rng.normal(size=2), int(t)) for t in (0, 3, 8)]
    sp = SpatialKernelParams([0.5, 1.5], 0.8)
    tp = WienerTemporal(0.05)
    K = gram_matrix(pts, sp, tp)
    for i, a in enumerate(pts):
        for j, b in enumerate(pts):
            assert K[i, j] == pytest.approx(spatio_temporal_kernel(a, b, sp, tp), rel=1e-14)


# -- inference ---------------------------------------------------------------


def test_jitter_escalates_for_singular_matrix():
    K = np.ones((3, 3))
    L, jit = jitter_cholesky(K)
    assert jit > 0
    np.testing.assert_allclose(L @ L.T, K + jit * np.eye(3), atol=1e-12)


def test_jitter_gives_up_on_indefinite_matrix():
    with pytest.raises(NumericalFailure):
        jitter_cholesky(np.diag([1.0, -1.0]))


def test_posterior_without_data_is_prior():
    q = [ParamPoint([0.2], 4), ParamPoint([0.5], 9)]
    tp = WienerTemporal(0.03)
    post = posterior(Dataset(), q, SP1, tp, 0.1)
    assert np.all(post.mean == 0)
    np.testing.assert_allclose(post.covariance, gram_matrix(q, SP1, tp))


def test_noiseless_interpolation():
    d = Dataset([obs([0.4], 0, 1.7)])
    post = predict(d, [[0.4]], 0, SP1, TimeInvariant(), 1e-10)
    assert post.mean[0] == pytest.approx(1.7, abs=1e-4)


def test_posterior_matches_dense_formula():
    rng = np.random.default_rng(0)
    X = rng.uniform(0, 1, (6, 2))
    t = np.array([0, 0, 1, 2, 2, 5])
    y = rng.normal(size=6)
    d = Dataset([obs(x, int(s), float(v)) for x, s, v in zip(X, t, y)])
    sp = SpatialKernelParams([0.3, 0.6], 1.4)
    tp = WienerTemporal(0.1)
    q = [ParamPoint([0.5, 0.5], 6), ParamPoint([0.1, 0.9], 3)]
    pts = [r.point for r in d.records]
    K = gram_matrix(pts, sp, tp) + 0.05 * np.eye(6)
    Kq = np.array([[spatio_temporal_kernel(a, b, sp, tp) for b in q] for a in pts])
    Kqq = gram_matrix(q, sp, tp)
    mean = Kq.T @ np.linalg.solve(K, y)
    cov = Kqq - Kq.T @ np.linalg.solve(K, Kq)
    post = posterior(d, q, sp, tp, 0.05)
    np.testing.assert_allclose(post.mean, mean, atol=1e-9)
    np.testing.assert_allclose(post.covariance, cov, atol=1e-9)
    np.testing.assert_allclose(post.variance, np.diag(cov), atol=1e-9)


@pytest.mark.parametrize("sk2", [0.5, 1.0, 3.0])
def test_variance_growth_law(sk2):
    sw = 0.03
    sp = SpatialKernelParams([0.5], sk2)
    tp = WienerTemporal(sw)
    d = Dataset([obs([0.2], 10, 0.7)])
    gp = ExactGP(d, sp, tp, 1e-12)
    base = gp.predict([[0.2]], 10).variance[0]
    for delta in (1, 7, 50):
        v = gp.predict([[0.2]], 10 + delta).variance[0]
        assert v - base == pytest.approx(sk2 * sw * delta, rel=1e-6)


def test_ui_keeps_mean_while_b2p_decays():
    d = Dataset([obs([0.0], 0, 1.0)])
    ui = ExactGP(d, SP1, WienerTemporal(0.03), 1e-12)
    b2p = ExactGP(d, SP1, BackToPriorTemporal(0.03), 1e-12)
    for delta in (1, 10, 100, 1000):
        assert ui.predict([[0.0]], delta).mean[0] == pytest.approx(1.0, abs=1e-6)
    m = [b2p.predict([[0.0]], delta).mean[0] for delta in (0, 10, 100, 1000)]
    assert np.all(np.diff(m) < 0)
    assert m[-1] == pytest.approx(0.0, abs=1e-6)


def test_small_rate_limit_matches_spatial_gp():
    rng = np.random.default_rng(5)
    recs = [obs(rng.uniform(0, 1, 1), 0, float(rng.normal())) for _ in range(4)]
    recs += [obs(rng.uniform(0, 1, 1), t, float(rng.normal())) for t in range(1, 5)]
    d = Dataset(recs)
    Xq = np.linspace(0, 1, 21)[:, None]
    a = predict(d, Xq, 5, SP1, WienerTemporal(1e-8), 0.01)
    b = predict(d, Xq, 5, SP1, TimeInvariant(), 0.01)
    np.testing.assert_allclose(a.mean, b.mean, atol=1e-4)
    np.testing.assert_allclose(a.variance, b.variance, atol=1e-4)


# -- marginal likelihood and fitting -----------------------------------------


def test_single_point_marginal_likelihood():
    d = Dataset([obs([0.0], 0, 0.0)])
    val = log_marginal_likelihood(d, SP1, TimeInvariant(), 1.0)
    assert val == pytest.approx(-0.5 * math.log(2 * math.pi * 2), abs=1e-12)


def test_gamma_log_density():
    assert HyperPriors([2.0], [1.0]).logpdf([1.0]) == pytest.approx(-1.0, abs=1e-12)
    pri = HyperPriors.default(2)
    expected = stats.gamma(3, scale=1 / 6).logpdf([0.2, 0.7]).sum()
    assert pri.logpdf([0.2, 0.7]) == pytest.approx(expected, rel=1e-12)
    with pytest.raises(ValueError):
        HyperPriors([0.0], [1.0])


def test_marginal_likelihood_matches_dense_oracle():
    rng = np.random.default_rng(1)
    X = rng.uniform(0, 1, (5, 2))
    y = rng.normal(size=5)
    d = Dataset([obs(x, i, float(v)) for i, (x, v) in enumerate(zip(X, y))])
    sp = SpatialKernelParams([0.4, 0.9], 1.2)
    tp = WienerTemporal(0.05)
    K = gram_matrix([r.point for r in d.records], sp, tp) + 0.2 * np.eye(5)
    oracle = stats.multivariate_normal(np.zeros(5), K).logpdf(y)
    pri = HyperPriors.default(2)
    val = log_marginal_likelihood(d, sp, tp, 0.2, pri)
    assert val == pytest.approx(oracle + pri.logpdf(sp.lengthscales), abs=1e-8)


def _synthetic(seed, n=50, ls=1.0):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-4, 4, (n, 1))
    sp = SpatialKernelParams([ls], 1.0)
    K = gram_matrix([ParamPoint(x, 0) for x in X], sp, TimeInvariant())
    f = np.linalg.cholesky(K + 1e-8 * np.eye(n)) @ rng.normal(size=n)
    y = f + 0.1 * rng.normal(size=n)
    return Dataset([obs(x, 0, float(v)) for x, v in zip(X, y)])


def test_fit_recovers_lengthscale():
    for seed in range(3):
        d = _synthetic(seed)
        sp, noise = fit_hyperparameters(d, SpatialKernelParams([0.3], 0.5), TimeInvariant(),
                                        None, 0.1)
        assert 0.5 <= sp.lengthscales[0] <= 2.0
        assert noise > 0


def test_fit_is_fixed_point_at_optimum():
    d = _synthetic(7)
    tp = TimeInvariant()
    sp, noise = fit_hyperparameters(d, SpatialKernelParams([0.5], 1.0), tp, None, 0.1)
    again, noise2 = fit_hyperparameters(d, sp, tp, None, noise)
    before = log_marginal_likelihood(d, sp, tp, noise)
    after = log_marginal_likelihood(d, again, tp, noise2)
    assert abs(after - before) < 1e-9 or after > before


def test_fit_keeps_noise_above_floor():
    d = Dataset([obs([x], 0, math.sin(3 * x)) for x in np.linspace(0, 1, 12)])
    _, noise = fit_hyperparameters(d, SpatialKernelParams([0.3], 1.0), TimeInvariant(), None, 0.1)
    assert noise >= 1e-6 * (1 - 1e-9)


def test_fit_needs_two_records():
    with pytest.raises(ValueError):
        fit_hyperparameters(Dataset([obs([0.0], 0, 1.0)]), SP1, TimeInvariant(), None, 0.1)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.sampled_from(["ui", "b2p", "none"]))
def test_fit_never_worsens_objective(seed, kind):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 15))
    t = np.sort(rng.integers(0, 20, n))
    d = Dataset([obs(rng.uniform(0, 1, 2), int(s), float(rng.normal())) for s in t])
    tp = {"ui": WienerTemporal(0.03), "b2p": BackToPriorTemporal(0.03), "none": TimeInvariant()}[kind]
    init = SpatialKernelParams(rng.uniform(0.05, 2, 2), float(rng.uniform(0.1, 3)))
    pri = HyperPriors.default(2)
    noise0 = float(rng.uniform(1e-3, 1))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        sp, noise = fit_hyperparameters(d, init, tp, pri, noise0)
    assert (log_marginal_likelihood(d, sp, tp, noise, pri)
            >= log_marginal_likelihood(d, init, tp, noise0, pri) - 1e-9)
