import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tvbo import lqr
from tvbo.lqr import (CartPoleParams, ConfigurationError, EpisodeConfig, FrictionSchedule,
                      InstabilityThreshold, NumericalFailure, calibrate_threshold, discretize,
                      expected_cost, friction, is_unstable, make_initial_dataset, make_problem,
                      optimal_gain, regret, riccati_residual, simulate_episode, solve_dare,
                      system_matrices)

TAU0 = 2.2e-3


def test_friction_schedule_values():
    s = FrictionSchedule()
    assert friction(0, s) == TAU0
    assert friction(49, s) == TAU0
    assert friction(50, s) == pytest.approx(TAU0, abs=1e-18)
    assert friction(75, s) == pytest.approx(2.5 * TAU0, rel=1e-12)
    assert friction(150, s) == pytest.approx(3.5 * TAU0, rel=1e-12)


def test_friction_jump_at_t2_is_kept():
    s = FrictionSchedule()
    assert friction(100, s) == pytest.approx(4.0 * TAU0, rel=1e-12)
    assert friction(101, s) == pytest.approx(3.0 * TAU0 + 0.5 * TAU0 * math.sin(-math.pi * 1.01))


def test_friction_schedule_validation():
    with pytest.raises(ValueError):
        FrictionSchedule(t1=60, t2=50)


def test_system_matrices_entries():
    p = CartPoleParams()
    A, B = system_matrices(0)
    assert A[0, 1] == 1.0 and A[1, 1] == -1.0
    expected_b = -0.5 * (p.m_p * p.l / p.J_d) * (p.K_u / p.T1)
    assert B[3, 0] == pytest.approx(expected_b, rel=1e-14)
    assert B[3, 0] == pytest.approx(-10.1658, abs=1e-4)
    assert B[1, 0] == 1.0
    assert A[3, 3] == pytest.approx(-2.2e-3 / 0.5813e-3, rel=1e-14)
    assert A[3, 3] == pytest.approx(-3.7846, abs=1e-4)
    A150, _ = system_matrices(150)
    diff = A150 - A
    assert np.count_nonzero(diff) == 1 and diff[3, 3] != 0


def test_discretize_zero_dynamics_and_scalar():
    b = np.array([[1.0], [2.0]])
    Ad, Bd = discretize(np.zeros((2, 2)), b, 0.1)
    np.testing.assert_allclose(Ad, np.eye(2), atol=1e-15)
    np.testing.assert_allclose(Bd, 0.1 * b, atol=1e-15)
    Ad, Bd = discretize([[-0.7]], [[1.0]], 0.3)
    assert Ad[0, 0] == pytest.approx(math.exp(-0.21), rel=1e-14)
    assert Bd[0, 0] == pytest.approx((1 - math.exp(-0.21)) / 0.7, rel=1e-12)


def test_discretize_cart_pole_matches_series():
    A, B = system_matrices(0)
    dt = 0.02
    Ad, Bd = discretize(A, B, dt)
    # the fourth-order truncation is only good to ~4e-5 here because of the
    # large gravity entry; eight terms bring the remainder below 1e-10
    terms_a = [np.eye(4)]
    terms_b = [np.eye(4) * dt]
    for k in range(1, 9):
        terms_a.append(terms_a[-1] @ A * dt / k)
        terms_b.append(terms_b[-1] @ A * dt / (k + 1))
    np.testing.assert_allclose(Ad, sum(terms_a), atol=1e-9)
    np.testing.assert_allclose(Bd, sum(terms_b) @ B, atol=1e-9)


def test_scalar_dare_golden_ratio():
    P, K = solve_dare([[1.0]], [[1.0]], [[1.0]], [[1.0]])
    golden = (1 + math.sqrt(5)) / 2
    assert P[0, 0] == pytest.approx(golden, abs=1e-10)
    assert K[0] == pytest.approx(golden / (1 + golden), abs=1e-10)


@pytest.mark.parametrize("t", [0, 60, 75, 100, 101, 150, 300])
def test_cart_pole_dare(t):
    Ad, Bd = lqr.discrete_plant(t)
    cfg = EpisodeConfig()
    P, K = solve_dare(Ad, Bd, cfg.Q, cfg.R)
    assert riccati_residual(P, Ad, Bd, cfg.Q, [[cfg.R]]) < 1e-10
    assert np.max(np.abs(np.linalg.eigvals(Ad - Bd @ K[None, :]))) < 1
    np.testing.assert_allclose(K, optimal_gain(t), rtol=1e-12)


def test_dare_uncontrollable_unstable_system_fails():
    with pytest.raises(NumericalFailure):
        solve_dare([[2.0]], [[0.0]], [[1.0]], [[1.0]])


def test_dare_gain_beats_random_perturbations():
    K = optimal_gain(0)
    cfg = EpisodeConfig(x0=np.array([0.0, 0.0, 0.05, 0.0]))
    base = simulate_episode(K, 0, cfg, noise=False).cost
    rng = np.random.default_rng(0)
    for _ in range(100):
        d = rng.normal(size=4)
        d *= 0.05 / np.linalg.norm(d)
        assert simulate_episode(K + d, 0, cfg, noise=False).cost > base


def test_optimal_gain_schedule_properties():
    assert np.array_equal(optimal_gain(0), optimal_gain(49))
    assert np.linalg.norm(optimal_gain(0) - optimal_gain(150)) > 1e-3
    # the ramp moves the angle gain by about 7.4 over 50 steps, so single
    # steps peak near 0.24 at the steepest part of the cosine
    steps = [np.linalg.norm(optimal_gain(t) - optimal_gain(t - 1)) for t in range(51, 101)]
    assert max(steps) < 0.25
    assert max(steps) == max(steps[20:30])


def test_episode_examples():
    K = optimal_gain(0)
    quiet = EpisodeConfig(process_noise_std=np.zeros(4))
    assert simulate_episode(K, 0, quiet).cost == 0.0
    assert simulate_episode(K, 0).stable
    open_loop = simulate_episode(np.zeros(4), 0, EpisodeConfig(x0=np.array([0, 0, 0.01, 0])))
    assert not open_loop.stable
    Ad, _ = lqr.discrete_plant(0)
    assert np.max(np.abs(np.linalg.eigvals(Ad))) > 1


def test_episode_cost_matches_stationary_formula():
    K = optimal_gain(0)
    costs = [simulate_episode(K, 0, rng_seed=s).cost for s in range(20)]
    assert np.mean(costs) == pytest.approx(expected_cost(K, 0), rel=0.1)


def test_episode_determinism():
    K = optimal_gain(0) * 1.1
    a = simulate_episode(K, 3, rng_seed=42)
    b = simulate_episode(K, 3, rng_seed=42)
    assert a.cost == b.cost


def test_zero_noise_zero_state_costs_nothing():
    quiet = EpisodeConfig(process_noise_std=np.zeros(4))
    for scale in (0.8, 1.0, 1.3):
        assert simulate_episode(optimal_gain(0) * scale, 0, quiet).cost == 0.0


def test_instability_detector():
    assert is_unstable(math.inf, 1.0)
    assert is_unstable(1.0, math.nan)
    assert is_unstable(5.0, 1.0, InstabilityThreshold(cost_limit=4.0))
    assert is_unstable(1.0, 2e3)
    assert not is_unstable(1.0, 1.0, InstabilityThreshold(cost_limit=4.0))


def test_diverging_closed_loop_is_flagged():
    K = optimal_gain(0).copy()
    K[2] = 0.0
    Ad, Bd = lqr.discrete_plant(0)
    assert np.max(np.abs(np.linalg.eigvals(Ad - Bd @ K[None, :]))) > 1
    res = simulate_episode(K, 0, EpisodeConfig(x0=np.array([0, 0, 0.01, 0]),
                                               process_noise_std=np.zeros(4)))
    assert not res.stable


def test_regret_examples():
    total, inc = regret([True] * 3, [1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
    assert total == 0.0
    total, inc = regret([True, False, True], [1.0, 2.0, 3.0], [0.0, 0.0, 0.0])
    assert total == 4.0 and inc.tolist() == [1.0, 0.0, 3.0]
    with pytest.raises(ValueError):
        regret([True], [1.0, 2.0], [0.0, 0.0])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 300), st.lists(st.floats(-0.6, 0.6), min_size=4, max_size=4),
       st.floats(0.0, 0.2))
def test_oracle_is_optimal(t, rel, angle):
    cfg = EpisodeConfig(x0=np.array([0.0, 0.0, angle, 0.0]))
    K = optimal_gain(t, cfg=cfg)
    f_opt = expected_cost(K, t, cfg)
    f = expected_cost(K * (1 + np.asarray(rel)), t, cfg)
    assert f >= f_opt - 1e-12 * f_opt


def test_expected_cost_includes_transient():
    K = optimal_gain(0)
    x0 = np.array([0.0, 0.0, 0.1, 0.0])
    cfg = EpisodeConfig(x0=x0, process_noise_std=np.zeros(4))
    sim = simulate_episode(K, 0, cfg, noise=False).cost
    assert expected_cost(K, 0, cfg) == pytest.approx(sim, rel=1e-6)


def test_expected_cost_infinite_when_unstable():
    assert expected_cost(np.zeros(4), 0) == math.inf


def test_problem_presets():
    k0 = optimal_gain(0)
    p2 = make_problem("lqr2d")
    assert p2.free == (2, 3)
    np.testing.assert_allclose(p2.lower, k0[[2, 3]] - 1.5 * np.abs(k0[[2, 3]]))
    red = make_problem("lqr4d-reduced")
    np.testing.assert_allclose(red.upper, k0 + 0.4 * np.abs(k0))
    g = p2.gain([1.0, 2.0], 120)
    assert g[2] == 1.0 and g[3] == 2.0
    np.testing.assert_allclose(g[:2], optimal_gain(120)[:2])
    with pytest.raises(ValueError):
        make_problem("lqr9d")


def test_reduced_box_is_stable():
    red = make_problem("lqr4d-reduced")
    rng = np.random.default_rng(0)
    for _ in range(50):
        theta = rng.uniform(red.lower, red.upper)
        assert math.isfinite(red.f(theta, 0))


def test_initial_dataset():
    p = make_problem("lqr2d")
    d = make_initial_dataset(p, 30, rng_seed=3)
    assert len(d) == 30
    assert all(r.stable and r.point.t == 0 for r in d.records)
    again = make_initial_dataset(p, 30, rng_seed=3)
    assert np.array_equal(d.X, again.X) and np.array_equal(d.y, again.y)
    th = calibrate_threshold(d)
    assert th.cost_limit == pytest.approx(100 * np.median(d.y))
    # the t = 0 optimum never trips the calibrated detector
    assert p.simulate(p.optimum(0), 0, 0, th).stable


def test_hostile_box_raises():
    p = make_problem("lqr2d")
    bad = lqr.Problem("bad", p.free, np.array([50.0, 50.0]), np.array([60.0, 60.0]))
    with pytest.raises(ConfigurationError):
        make_initial_dataset(bad, 5, max_attempts=200)
