"""Time-varying LQR benchmark on a linearized cart-pole.

The pole bearing friction follows a fixed schedule over TVBO steps, so the
closed-loop cost of a static state-feedback gain changes over time. Each
TVBO step simulates one episode of ``M`` sampling periods with the plant
frozen at that step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import linalg

from .gp import Dataset, Observation, ParamPoint
from .seeding import child_seed


class NumericalFailure(RuntimeError):
    """Raised when a numerical routine does not converge."""


class ConfigurationError(ValueError):
    """Raised when a benchmark configuration cannot produce usable data."""


@dataclass(frozen=True)
class CartPoleParams:
    m_p: float = 0.0804
    l: float = 0.147
    J_d: float = 0.5813e-3
    tau_p0: float = 2.2e-3
    T1: float = 1.0
    K_u: float = 1.0
    g: float = 9.81

    def __post_init__(self):
        for name in ("m_p", "l", "J_d", "tau_p0", "T1", "K_u", "g"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class FrictionSchedule:
    t1: int = 50
    t2: int = 100
    tau_p0: float = 2.2e-3

    def __post_init__(self):
        if not 0 < self.t1 < self.t2:
            raise ValueError("need 0 < t1 < t2")


@dataclass(frozen=True)
class EpisodeConfig:
    """Closed-loop episode settings.

    ``x0`` defaults to the origin; excitation then comes entirely from the
    additive process noise.
    """

    M: int = 1000
    dt: float = 0.02
    Q: np.ndarray = field(default_factory=lambda: 10.0 * np.eye(4))
    R: float = 1.0
    x0: np.ndarray = field(default_factory=lambda: np.zeros(4))
    process_noise_std: np.ndarray = field(default_factory=lambda: np.full(4, 1e-3))

    def __post_init__(self):
        if self.M < 1 or self.dt <= 0:
            raise ValueError("need M >= 1 and dt > 0")
        if self.R <= 0 or np.any(np.linalg.eigvalsh(self.Q) <= 0):
            raise ValueError("Q must be positive definite and R > 0")

    def __hash__(self):
        return hash((self.M, self.dt, self.R, self.Q.tobytes(), self.x0.tobytes(),
                     np.asarray(self.process_noise_std, float).tobytes()))

    def __eq__(self, other):
        return isinstance(other, EpisodeConfig) and hash(self) == hash(other)


@dataclass(frozen=True)
class InstabilityThreshold:
    """Heuristic instability detector settings.

    ``cost_limit`` is usually set to a multiple of the median initial cost by
    :func:`calibrate_threshold`; ``inf`` disables the cost test.
    """

    cost_limit: float = math.inf
    state_norm_limit: float = 1e3


@dataclass
class EpisodeResult:
    cost: float
    stable: bool
    max_state_norm: float


def friction(t: int, s: FrictionSchedule = FrictionSchedule()) -> float:
    """Bearing friction at TVBO step ``t``.

    The middle and last branches do not meet at ``t2`` (4 vs. roughly 3
    times the initial value); the formula is used as written.
    """
    tau0 = s.tau_p0
    if t < s.t1:
        return tau0
    if t <= s.t2:
        return tau0 + 1.5 * tau0 * (1.0 - math.cos(math.pi / s.t1 * (t - s.t1)))
    return 3.0 * tau0 + 0.5 * tau0 * math.sin(-math.pi / s.t2 * t)


def system_matrices(t: int, p: CartPoleParams = CartPoleParams(),
                    s: FrictionSchedule = FrictionSchedule()):
    """Continuous-time ``(A, B)`` of the cart-pole linearized upright."""
    c = 0.5 * p.m_p * p.l / p.J_d
    A = np.array([
        [0.0, 1.0, 0.0, 0.0],
        [0.0, -1.0 / p.T1, 0.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
        [0.0, c / p.T1, c * p.g, -friction(t, s) / p.J_d],
    ])
    B = np.array([[0.0], [p.K_u / p.T1], [0.0], [-c * p.K_u / p.T1]])
    return A, B


def discretize(A, B, dt: float):
    """Zero-order-hold discretization through the augmented matrix exponential."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    n, m = B.shape
    aug = np.zeros((n + m, n + m))
    aug[:n, :n] = A
    aug[:n, n:] = B
    E = linalg.expm(aug * dt)
    return E[:n, :n], E[:n, n:]


def _riccati_map(P, A, B, Q, R):
    BtP = B.T @ P
    G = np.linalg.solve(R + BtP @ B, BtP @ A)
    return Q + A.T @ P @ A - A.T @ P @ B @ G


def solve_dare(Ad, Bd, Qd, Rd, tol: float = 1e-11, max_iter: int = 500):
    """Solve the discrete algebraic Riccati equation.

    A Schur-based solve provides the starting point; Riccati fixed-point
    sweeps then polish it until the residual is below ``tol``.

    Returns
    -------
    P : ndarray
        Stabilizing solution.
    K : ndarray
        Gain vector for ``u = -K^T x``, i.e. ``(R + B'PB)^{-1} B'PA`` flattened.
    """
    Ad = np.atleast_2d(np.asarray(Ad, dtype=float))
    Bd = np.asarray(Bd, dtype=float).reshape(Ad.shape[0], -1)
    Qd = np.atleast_2d(np.asarray(Qd, dtype=float))
    Rd = np.atleast_2d(np.asarray(Rd, dtype=float))
    try:
        P = linalg.solve_discrete_are(Ad, Bd, Qd, Rd)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NumericalFailure(f"DARE solve failed: {exc}") from exc
    # polish until the absolute residual meets ``tol``; if round-off stalls
    # the iteration first, accept a residual at the relative precision floor
    floor = 1e-13 * max(1.0, float(np.linalg.norm(P)))
    best_res = math.inf
    for _ in range(max_iter):
        P_next = _riccati_map(P, Ad, Bd, Qd, Rd)
        P_next = 0.5 * (P_next + P_next.T)
        res = float(np.linalg.norm(P_next - P))
        P = P_next
        best_res = min(best_res, res)
        if res < tol:
            break
    else:
        if not best_res < max(tol, floor):
            raise NumericalFailure("Riccati iteration did not converge")
    BtP = Bd.T @ P
    K = np.linalg.solve(Rd + BtP @ Bd, BtP @ Ad)
    if np.max(np.abs(np.linalg.eigvals(Ad - Bd @ K))) >= 1.0:
        raise NumericalFailure("DARE solution is not stabilizing")
    return P, K.ravel()


def riccati_residual(P, Ad, Bd, Qd, Rd) -> float:
    Bd = np.asarray(Bd, dtype=float).reshape(np.shape(Ad)[0], -1)
    return float(np.linalg.norm(P - _riccati_map(P, Ad, Bd, np.atleast_2d(Qd), np.atleast_2d(Rd))))


@lru_cache(maxsize=4096)
def _plant(t: int, p: CartPoleParams, s: FrictionSchedule, dt: float):
    return discretize(*system_matrices(t, p, s), dt)


@lru_cache(maxsize=4096)
def _optimal(t: int, p: CartPoleParams, s: FrictionSchedule, cfg: EpisodeConfig):
    Ad, Bd = _plant(t, p, s, cfg.dt)
    return solve_dare(Ad, Bd, cfg.Q, cfg.R)


def discrete_plant(t: int, p: CartPoleParams = CartPoleParams(),
                   s: FrictionSchedule = FrictionSchedule(), dt: float = 0.02):
    """Cached ZOH plant ``(Ad, Bd)`` at TVBO step ``t``."""
    Ad, Bd = _plant(int(t), p, s, float(dt))
    return Ad.copy(), Bd.copy()


def optimal_gain(t: int, p: CartPoleParams = CartPoleParams(),
                 s: FrictionSchedule = FrictionSchedule(),
                 cfg: EpisodeConfig = EpisodeConfig()) -> np.ndarray:
    """Riccati-optimal gain ``K*_t`` (cached per step)."""
    return _optimal(int(t), p, s, cfg)[1].copy()


def is_unstable(cost: float, max_state_norm: float,
                threshold: InstabilityThreshold = InstabilityThreshold()) -> bool:
    if not (math.isfinite(cost) and math.isfinite(max_state_norm)):
        return True
    return cost > threshold.cost_limit or max_state_norm > threshold.state_norm_limit


def simulate_episode(K, t: int, cfg: EpisodeConfig = EpisodeConfig(),
                     p: CartPoleParams = CartPoleParams(),
                     s: FrictionSchedule = FrictionSchedule(),
                     rng_seed=0,
                     threshold: InstabilityThreshold = InstabilityThreshold(),
                     noise: bool = True) -> EpisodeResult:
    """Simulate ``u = -K^T x`` on the plant frozen at step ``t``.

    The returned cost is the average stage cost ``x'Qx + u'Ru`` over the
    ``M`` simulation steps. Divergent runs return ``cost = inf``.
    """
    K = np.asarray(K, dtype=float).ravel()
    Ad, Bd = _plant(int(t), p, s, cfg.dt)
    Acl = Ad - Bd @ K[None, :]
    n = Ad.shape[0]
    x = np.array(cfg.x0, dtype=float).copy()
    if noise:
        rng = np.random.default_rng(rng_seed)
        W = rng.standard_normal((cfg.M, n)) * np.asarray(cfg.process_noise_std, dtype=float)
    else:
        W = np.zeros((cfg.M, n))
    QK = cfg.Q + cfg.R * np.outer(K, K)
    total = 0.0
    max_norm = float(np.linalg.norm(x))
    diverged = False
    for m in range(cfg.M):
        total += x @ QK @ x
        x = Acl @ x + W[m]
        nx = np.linalg.norm(x)
        if nx > max_norm:
            max_norm = nx
        if not np.isfinite(nx) or nx > 1e12:
            diverged = True
            break
    if diverged:
        return EpisodeResult(cost=math.inf, stable=False, max_state_norm=math.inf)
    cost = total / cfg.M
    return EpisodeResult(cost=float(cost), stable=not is_unstable(cost, max_norm, threshold),
                         max_state_norm=max_norm)


def expected_cost(K, t: int, cfg: EpisodeConfig = EpisodeConfig(),
                  p: CartPoleParams = CartPoleParams(),
                  s: FrictionSchedule = FrictionSchedule()) -> float:
    """Expected episode cost of gain ``K``, used as the objective ``f_t``.

    With ``P_K`` the closed-loop cost-to-go (``P = Q + R K K' + Acl' P Acl``)
    this is ``x0' P_K x0 / M + tr(P_K W)``: the initial-state transient
    spread over the episode plus the stationary cost of the process noise
    ``W``. Both terms are minimized by the Riccati gain, so regret
    increments are never negative. Returns ``inf`` when the closed loop is
    not Schur stable.
    """
    K = np.asarray(K, dtype=float).ravel()
    Ad, Bd = _plant(int(t), p, s, cfg.dt)
    Acl = Ad - Bd @ K[None, :]
    if np.max(np.abs(np.linalg.eigvals(Acl))) >= 1.0:
        return math.inf
    W = np.diag(np.asarray(cfg.process_noise_std, dtype=float) ** 2)
    P = linalg.solve_discrete_lyapunov(Acl.T, cfg.Q + cfg.R * np.outer(K, K))
    x0 = np.asarray(cfg.x0, dtype=float)
    return float(x0 @ P @ x0 / cfg.M + np.trace(P @ W))


def regret(stable, query_values, oracle_values):
    """Cumulative regret over stable steps.

    Parameters
    ----------
    stable : sequence of bool
        Step verdicts; unstable steps contribute nothing.
    query_values, oracle_values : sequence of float
        Noise-free ``f_t`` at the queried and at the optimal parameters.

    Returns
    -------
    total : float
    increments : ndarray
        Per-step regret, zero on skipped steps.
    """
    stable = np.asarray(stable, dtype=bool)
    q = np.asarray(query_values, dtype=float)
    o = np.asarray(oracle_values, dtype=float)
    if not (stable.shape == q.shape == o.shape):
        raise ValueError("stable flags and objective values must have equal length")
    keep = stable & np.isfinite(q) & np.isfinite(o)
    inc = np.where(keep, q - np.where(keep, o, 0.0), 0.0)
    return float(inc.sum()), inc


@dataclass(frozen=True)
class Problem:
    """A benchmark preset: which gain entries are tuned and over which box.

    Entries not in ``free`` are pinned to the current optimal gain ``K*_t``.
    """

    name: str
    free: tuple
    lower: np.ndarray
    upper: np.ndarray
    params: CartPoleParams = CartPoleParams()
    schedule: FrictionSchedule = FrictionSchedule()
    episode: EpisodeConfig = EpisodeConfig()

    @property
    def dim(self) -> int:
        return len(self.free)

    def gain(self, theta, t: int) -> np.ndarray:
        K = optimal_gain(t, self.params, self.schedule, self.episode)
        K[list(self.free)] = np.asarray(theta, dtype=float)
        return K

    def optimum(self, t: int) -> np.ndarray:
        return optimal_gain(t, self.params, self.schedule, self.episode)[list(self.free)]

    def simulate(self, theta, t: int, rng_seed, threshold=InstabilityThreshold()) -> EpisodeResult:
        return simulate_episode(self.gain(theta, t), t, self.episode, self.params,
                                self.schedule, rng_seed, threshold)

    def f(self, theta, t: int) -> float:
        return expected_cost(self.gain(theta, t), t, self.episode, self.params, self.schedule)

    def f_opt(self, t: int) -> float:
        return self.f(self.optimum(t), t)


def make_problem(name: str = "lqr2d", spread: float | None = None, **overrides) -> Problem:
    """Build one of the presets ``lqr2d``, ``lqr4d`` or ``lqr4d-reduced``.

    The box is ``K*_0 +/- spread * |K*_0|`` on the free entries; ``spread``
    defaults to 1.5, or 0.4 for the reduced preset.
    """
    params = overrides.pop("params", CartPoleParams())
    schedule = overrides.pop("schedule", FrictionSchedule(tau_p0=params.tau_p0))
    episode = overrides.pop("episode", EpisodeConfig())
    if overrides:
        raise TypeError(f"unknown options: {sorted(overrides)}")
    if name == "lqr2d":
        free, default_spread = (2, 3), 1.5
    elif name == "lqr4d":
        free, default_spread = (0, 1, 2, 3), 1.5
    elif name == "lqr4d-reduced":
        free, default_spread = (0, 1, 2, 3), 0.4
    else:
        raise ValueError(f"unknown problem preset {name!r}")
    spread = default_spread if spread is None else float(spread)
    k0 = optimal_gain(0, params, schedule, episode)[list(free)]
    half = spread * np.abs(k0)
    return Problem(name, free, k0 - half, k0 + half, params, schedule, episode)


def make_initial_dataset(problem: Problem, n: int = 30, rng_seed=0,
                         max_attempts: int = 10_000):
    """Rejection-sample ``n`` stable gains uniformly in the box at ``t = 0``.

    Stability here means a finite episode whose closed loop is Schur stable
    and whose state stays below the divergence bound. Costs are raw.

    Returns
    -------
    Dataset
        Records at ``t = 0`` with raw costs as ``y``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(child_seed(rng_seed, "initial"))
    records = []
    attempts = 0
    while len(records) < n:
        if attempts >= max_attempts:
            if len(records) < 0.01 * attempts:
                raise ConfigurationError(
                    f"only {len(records)} stable samples in {attempts} attempts")
            max_attempts += max_attempts
        theta = rng.uniform(problem.lower, problem.upper)
        res = problem.simulate(theta, 0, child_seed(rng_seed, "initial-episode", attempts))
        attempts += 1
        if res.stable and math.isfinite(problem.f(theta, 0)):
            records.append(Observation(ParamPoint(theta, 0), res.cost, stable=True))
    return Dataset(records)


def calibrate_threshold(initial: Dataset, factor: float = 100.0,
                        state_norm_limit: float = 1e3) -> InstabilityThreshold:
    """Cost threshold at ``factor`` times the median initial cost."""
    med = float(np.median([r.y for r in initial.records]))
    return InstabilityThreshold(cost_limit=factor * med, state_norm_limit=state_norm_limit)
