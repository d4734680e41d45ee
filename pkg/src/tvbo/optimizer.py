"""Time-varying Bayesian optimization loop.

Each step refits the surrogate, minimizes a lower confidence bound at the
next time step over a box, queries the objective, and appends the result.
Unstable queries are imputed from the current posterior as
``mean + 3 * std`` so they do not distort the hyperparameter fit.

The loop is coordinate-agnostic; the benchmark runs it on the unit cube.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy import optimize
from scipy.stats import qmc

from .constrained import SamplerDiagnostics, constrained_posterior_samples, place_vops
from .gp import (BackToPriorTemporal, Dataset, ExactGP, HyperPriors, NumericalFailure,
                 Observation, ParamPoint, SpatialKernelParams, TimeInvariant, WienerTemporal,
                 fit_hyperparameters)
from .region import TrustRegion
from .seeding import child_seed

log = logging.getLogger(__name__)

Objective = Callable[[np.ndarray, int], tuple]


class DegenerateData(ValueError):
    """Raised when observations cannot be normalized."""


@dataclass(frozen=True)
class Normalizer:
    mean: float
    std: float

    def __post_init__(self):
        if not self.std > 0:
            raise DegenerateData("normalizer std must be positive")

    def __call__(self, raw):
        return (np.asarray(raw, dtype=float) - self.mean) / self.std

    def inverse(self, values):
        return np.asarray(values, dtype=float) * self.std + self.mean


def normalize(raw_values):
    """Standardize to zero mean and unit (population) standard deviation."""
    raw = np.asarray(raw_values, dtype=float)
    if raw.size < 2:
        raise DegenerateData("need at least two values")
    std = float(raw.std())
    if std == 0.0 or not math.isfinite(std):
        raise DegenerateData("values are all identical")
    nz = Normalizer(float(raw.mean()), std)
    return nz(raw), nz


def lcb(mean, std, beta: float):
    """Lower confidence bound ``mean - sqrt(beta) * std``."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    return np.asarray(mean) - math.sqrt(beta) * np.asarray(std)


def local_region(best, widths, feasible: TrustRegion) -> TrustRegion:
    """Box of the given widths centred on ``best``, clipped to ``feasible``."""
    widths = np.asarray(widths, dtype=float)
    if np.any(widths <= 0):
        raise ValueError("widths must be positive")
    if np.all(feasible.widths == 0):
        raise ValueError("feasible set is degenerate")
    best = feasible.clip(np.asarray(best, dtype=float))
    lo = np.maximum(best - widths / 2, feasible.lower)
    hi = np.minimum(best + widths / 2, feasible.upper)
    return TrustRegion(lo, hi)


@dataclass
class AcquisitionConfig:
    """Acquisition and surrogate settings.

    ``vops_per_dim`` defaults to 5 for up to two dimensions and 3 above.
    """

    beta: float = 2.0
    use_constraints: bool = False
    n_posterior_samples: int = 64
    region_fraction: float = 0.4
    vops_per_dim: int | None = None
    max_constraints: int = 200
    grid_per_dim: int = 50
    max_candidates: int = 4096
    refine: bool = True
    gibbs_threshold: int = 60
    burn_in: int = 200
    refit: bool = True
    window: int | None = None

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if self.n_posterior_samples < 1:
            raise ValueError("n_posterior_samples must be >= 1")


@dataclass
class StepRecord:
    t: int
    query: np.ndarray
    y_raw: float
    y: float
    stable: bool
    imputed: bool
    wall_ms: float
    sampler: str = ""


@dataclass
class OptimizerState:
    """Everything carried between iterations.

    ``strategy`` selects the temporal kernel: ``"ui"`` (Wiener process whose
    variance grows by ``forgetting`` per step in units of the output
    variance), ``"b2p"`` (stationary forgetting with ``epsilon = forgetting``)
    or ``"none"``.
    """

    data: Dataset
    t: int
    best_estimate: np.ndarray
    spatial_params: SpatialKernelParams
    noise_variance: float
    normalizer: Normalizer
    feasible: TrustRegion
    strategy: str = "ui"
    forgetting: float = 0.03
    priors: HyperPriors | None = None
    history: list = field(default_factory=list)

    @property
    def temporal_params(self):
        if self.strategy == "ui":
            return WienerTemporal.from_rate(self.forgetting, self.spatial_params.output_variance)
        if self.strategy == "b2p":
            return BackToPriorTemporal(self.forgetting)
        if self.strategy == "none":
            return TimeInvariant()
        raise ValueError(f"unknown forgetting strategy {self.strategy!r}")

    def model(self) -> ExactGP:
        return ExactGP(self.data, self.spatial_params, self.temporal_params, self.noise_variance)


def candidate_set(region: TrustRegion, config: AcquisitionConfig, rng_seed) -> np.ndarray:
    """Grid over ``region``, or a seeded Latin hypercube once the grid is too large."""
    D = region.dim
    if config.grid_per_dim ** D <= config.max_candidates:
        return region.grid(config.grid_per_dim)
    sampler = qmc.LatinHypercube(d=D, seed=np.random.default_rng(rng_seed))
    U = sampler.random(config.max_candidates)
    return region.lower + U * region.widths


def initialize(initial: Dataset, feasible: TrustRegion, strategy: str = "ui",
               forgetting: float = 0.03, config: AcquisitionConfig | None = None,
               lengthscale: float = 0.5, noise_variance: float = 0.1,
               priors: HyperPriors | None = None, rng_seed=0) -> OptimizerState:
    """Optimizer state from an initial design whose ``y`` holds raw values.

    The normalizer is estimated here once and kept fixed afterwards.
    """
    config = config or AcquisitionConfig()
    ynorm, nz = normalize(initial.y)
    data = Dataset([replace(r, y=float(v)) for r, v in zip(initial.records, ynorm)])
    D = feasible.dim
    priors = priors if priors is not None else HyperPriors.default(D)
    t0 = max((r.point.t for r in data.records), default=0)
    state = OptimizerState(data, t0, feasible.clip((feasible.lower + feasible.upper) / 2),
                           SpatialKernelParams(np.full(D, lengthscale), 1.0), noise_variance,
                           nz, feasible, strategy, forgetting, priors)
    if config.refit and len(data) >= 2:
        _refit(state, config)
    cands = candidate_set(feasible, config, child_seed(rng_seed, "init-candidates"))
    state.best_estimate = _mean_argmin(state, cands, t0)
    return state


def _refit(state: OptimizerState, config: AcquisitionConfig) -> None:
    data = state.data.window(config.window)
    sp, noise = fit_hyperparameters(data, state.spatial_params, state.temporal_params,
                                    state.priors, state.noise_variance)
    state.spatial_params = sp
    state.noise_variance = noise


def _mean_argmin(state: OptimizerState, cands: np.ndarray, t: int) -> np.ndarray:
    mean = state.model().predict(cands, t).mean
    return cands[int(np.argmin(mean))].copy()


def trust_region(state: OptimizerState, config: AcquisitionConfig) -> TrustRegion:
    if not config.use_constraints:
        return state.feasible
    widths = config.region_fraction * state.feasible.widths
    return local_region(state.best_estimate, np.maximum(widths, 1e-12), state.feasible)


def select_query(state: OptimizerState, config: AcquisitionConfig, region: TrustRegion,
                 rng_seed=0, diagnostics: SamplerDiagnostics | None = None) -> np.ndarray:
    """Minimizer of the LCB at step ``state.t + 1`` over ``region``.

    Unconstrained: closed-form posterior on a candidate set, then bounded
    local refinement from the best candidate. Constrained: empirical mean
    and std of constrained posterior samples on the candidate set.
    Ties go to the first candidate in enumeration order.
    """
    if np.all(region.widths == 0):
        return region.lower.copy()
    t_next = state.t + 1
    cands = candidate_set(region, config, child_seed(rng_seed, "candidates"))
    tp = state.temporal_params
    if config.use_constraints:
        per_dim = config.vops_per_dim or (5 if region.dim <= 2 else 3)
        vops = place_vops(region, per_dim, t_next, config.max_constraints)
        data = state.data.window(config.window)
        res = constrained_posterior_samples(
            data, vops, cands, state.spatial_params, tp, state.noise_variance,
            config.n_posterior_samples, child_seed(rng_seed, "constrained"), joint=False,
            gibbs_threshold=config.gibbs_threshold, burn_in=config.burn_in)
        if diagnostics is not None:
            diagnostics.__dict__.update(res.diagnostics.__dict__)
        acq = lcb(res.mean_estimate, res.std_estimate, config.beta)
    else:
        model = ExactGP(state.data.window(config.window), state.spatial_params, tp,
                        state.noise_variance)
        post = model.predict(cands, t_next)
        acq = lcb(post.mean, post.std, config.beta)
    finite = np.isfinite(acq)
    if not np.any(finite):
        raise NumericalFailure("acquisition is non-finite at every candidate")
    acq = np.where(finite, acq, np.inf)
    best = cands[int(np.argmin(acq))].copy()
    if config.refine and not config.use_constraints:
        best = _refine(model, best, float(np.min(acq)), t_next, config.beta, region)
    return best


def _refine(model: ExactGP, x0, a0: float, t: int, beta: float, region: TrustRegion):
    free = region.widths > 0

    def fun(z):
        x = x0.copy()
        x[free] = z
        post = model.predict(x[None, :], t)
        return float(lcb(post.mean, post.std, beta)[0])

    try:
        res = optimize.minimize(fun, x0[free], method="L-BFGS-B",
                                bounds=list(zip(region.lower[free], region.upper[free])),
                                options={"maxiter": 50})
    except (ValueError, FloatingPointError):
        return x0
    if res.success or res.status == 1:
        if np.isfinite(res.fun) and res.fun < a0:
            x = x0.copy()
            x[free] = res.x
            return region.clip(x)
    return x0


def impute_unstable(theta_bar, state: OptimizerState, t: int | None = None) -> float:
    """Normalized stand-in value ``mean + 3 * std`` at an unstable query.

    The posterior is taken at step ``t`` (default: the next step).
    """
    t = state.t + 1 if t is None else t
    post = state.model().predict(np.atleast_2d(theta_bar), t)
    return float(post.mean[0] + 3.0 * post.std[0])


def tvbo_step(state: OptimizerState, config: AcquisitionConfig, objective: Objective,
              rng_seed=0) -> OptimizerState:
    """One iteration; mutates and returns ``state`` and appends a :class:`StepRecord`."""
    start = time.perf_counter()
    if config.refit and len(state.data) >= 2:
        _refit(state, config)
    region = trust_region(state, config)
    diag = SamplerDiagnostics()
    t_next = state.t + 1
    query = select_query(state, config, region, child_seed(rng_seed, "acquisition", t_next), diag)
    y_raw, stable = objective(query, t_next)
    stable = bool(stable) and math.isfinite(y_raw)
    if stable:
        y = float(state.normalizer(y_raw))
    else:
        y = impute_unstable(query, state, t_next)
    state.data.append(Observation(ParamPoint(query, t_next), y, stable=stable,
                                  imputed=not stable))
    state.t = t_next
    cands = candidate_set(region, config, child_seed(rng_seed, "best", t_next))
    state.best_estimate = _mean_argmin(state, cands, t_next)
    state.history.append(StepRecord(t_next, query.copy(), float(y_raw), y, stable, not stable,
                                    1e3 * (time.perf_counter() - start), diag.sampler))
    return state


def run(initial_data: Dataset, config: AcquisitionConfig, objective: Objective, horizon: int,
        rng_seed=0, *, feasible: TrustRegion, strategy: str = "ui", forgetting: float = 0.03,
        state: OptimizerState | None = None) -> list:
    """Run ``horizon`` steps from an initial design with raw ``y`` values.

    Returns
    -------
    list of StepRecord
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if state is None:
        state = initialize(initial_data, feasible, strategy, forgetting, config,
                           rng_seed=rng_seed)
    for _ in range(horizon):
        tvbo_step(state, config, objective, rng_seed)
    return state.history
