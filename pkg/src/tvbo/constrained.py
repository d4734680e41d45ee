"""Convexity-constrained GP posteriors.

Convexity is approximated by requiring every diagonal second derivative
``d^2 f / d theta_i^2`` to be non-negative at a finite set of virtual
observation points (VOPs), all placed at a single time step. The
posterior of the derivative values given the data is a Gaussian which,
restricted to the constraint set, becomes a truncated normal. Function
values at query points are then drawn from the Gaussian conditional on
the data and on each derivative draw.

Only the SE spatial kernel is supported; because the temporal factor does
not depend on ``theta``, every derivative block is the corresponding
derivative of the SE kernel times the temporal kernel.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .gp import (Dataset, ParamPoint, SpatialKernelParams, jitter_cholesky, kernel_matrix,
                 predict, prior_variance, se_matrix)
from .region import TrustRegion
from .truncnorm import FallbackNeeded, gibbs_truncated_mvn, sample_truncated_mvn

log = logging.getLogger(__name__)


class BudgetExceeded(ValueError):
    """Too many virtual constraints for the sampler budget."""


class InfeasibleConstraints(RuntimeError):
    """The truncated derivative distribution could not be sampled."""


@dataclass(frozen=True)
class VirtualObservationSet:
    locations: np.ndarray
    dims: tuple
    t_slice: int
    lower_bound: float = 0.0

    def __post_init__(self):
        loc = np.atleast_2d(np.asarray(self.locations, dtype=float))
        object.__setattr__(self, "locations", loc)
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if any(d < 0 or d >= loc.shape[1] for d in self.dims):
            raise ValueError("constraint dimension out of range")

    @property
    def n_constraints(self) -> int:
        return len(self.locations) * len(self.dims)

    def pairs(self):
        """Constraint locations and dimension indices, location-major."""
        X = np.repeat(self.locations, len(self.dims), axis=0)
        dims = np.tile(np.array(self.dims, dtype=int), len(self.locations))
        return X, dims


@dataclass
class SamplerDiagnostics:
    sampler: str = "none"
    acceptance_rate: float = float("nan")
    condition_number: float = float("nan")
    n_constraints: int = 0


@dataclass
class ConstrainedPosteriorSamples:
    samples: np.ndarray
    mean_estimate: np.ndarray
    std_estimate: np.ndarray
    derivative_samples: np.ndarray
    diagnostics: SamplerDiagnostics = field(default_factory=SamplerDiagnostics)


# ---------------------------------------------------------------------------
# SE kernel derivatives
# ---------------------------------------------------------------------------


def _second(r, ls):
    # d^2/dr^2 of exp(-r^2 / 2l^2), divided by the kernel value
    return r ** 2 / ls ** 4 - 1.0 / ls ** 2


def _fourth(r, ls):
    return 3.0 / ls ** 4 - 6.0 * r ** 2 / ls ** 6 + r ** 4 / ls ** 8


def kernel_second_derivatives(a: ParamPoint, b: ParamPoint, i: int, j: int | None,
                              sp: SpatialKernelParams, tp) -> float:
    """Derivatives of the product kernel with respect to ``theta``.

    Returns ``d^2 k / d a_i^2`` when ``j`` is None, otherwise
    ``d^4 k / d a_i^2 d b_j^2``.
    """
    if not isinstance(sp, SpatialKernelParams):
        raise TypeError("closed-form derivatives need the SE spatial kernel")
    ta = np.asarray(a.theta, dtype=float)
    tb = np.asarray(b.theta, dtype=float)
    if ta.size != sp.dim or tb.size != sp.dim:
        raise ValueError("dimension mismatch")
    ls = sp.lengthscales
    r = ta - tb
    k = sp.output_variance * np.exp(-0.5 * np.sum((r / ls) ** 2)) * tp(a.t, b.t)
    if j is None:
        return float(k * _second(r[i], ls[i]))
    if i == j:
        return float(k * _fourth(r[i], ls[i]))
    return float(k * _second(r[i], ls[i]) * _second(r[j], ls[j]))


def d2_block(X, t, V, dims, t_v, sp: SpatialKernelParams, tp) -> np.ndarray:
    """Covariance between ``f(X, t)`` and ``d^2 f / d theta_{dims}^2`` at ``(V, t_v)``.

    Rows follow ``X``, columns follow the constraint pairs ``(V, dims)``.
    """
    X = np.atleast_2d(X)
    K = kernel_matrix(X, t, V, np.full(len(V), float(t_v)), sp, tp)
    ls = sp.lengthscales[dims]
    R = X[:, dims] - V[np.arange(len(V)), dims][None, :]
    return K * _second(R, ls[None, :])


def d4_block(V1, dims1, V2, dims2, t_v, sp: SpatialKernelParams, tp) -> np.ndarray:
    """Covariance between second derivatives at two constraint sets, same step."""
    K = se_matrix(V1, V2, sp) * tp(t_v, t_v)
    ls = sp.lengthscales
    same = dims1[:, None] == dims2[None, :]
    Ri = V1[np.arange(len(V1)), dims1][:, None] - V2[:, dims1].T
    Rj = V1[:, dims2] - V2[np.arange(len(V2)), dims2][None, :]
    li = ls[dims1][:, None]
    lj = ls[dims2][None, :]
    cross = _second(Ri, li) * _second(Rj, lj)
    diag = _fourth(Ri, li)
    return K * np.where(same, diag, cross)


def place_vops(region: TrustRegion, per_dim: int, t_next: int,
               max_constraints: int = 200, lower_bound: float = 0.0) -> VirtualObservationSet:
    """Equidistant grid of VOPs spanning ``region``, constraining every dimension."""
    if per_dim < 2:
        raise ValueError("per_dim must be >= 2")
    D = region.dim
    n_full = per_dim ** D * D
    if n_full > max_constraints:
        raise BudgetExceeded(f"{n_full} constraints exceed the budget of {max_constraints}")
    return VirtualObservationSet(region.grid(per_dim), tuple(range(D)), int(t_next), lower_bound)


# ---------------------------------------------------------------------------
# Constrained posterior
# ---------------------------------------------------------------------------


def _queries(queries, t_default):
    if len(queries) and isinstance(queries[0], ParamPoint):
        return (np.array([q.theta for q in queries], dtype=float),
                np.array([q.t for q in queries], dtype=float))
    Xq = np.atleast_2d(np.asarray(queries, dtype=float))
    return Xq, np.full(len(Xq), float(t_default))


def sample_derivatives(mean, cov, lower, n, rng, diagnostics: SamplerDiagnostics,
                       gibbs_threshold: int = 60, cond_threshold: float = 1e10,
                       burn_in: int = 200, min_acceptance: float = 0.02):
    """Draw the truncated derivative vector, choosing the sampler."""
    m = mean.size
    diagnostics.n_constraints = m
    try:
        diagnostics.condition_number = float(np.linalg.cond(cov))
    except np.linalg.LinAlgError:
        diagnostics.condition_number = float("inf")
    use_gibbs = m > gibbs_threshold or not diagnostics.condition_number <= cond_threshold
    if not use_gibbs:
        info = {}
        try:
            draws = sample_truncated_mvn(mean, cov, lower, n, rng, max_dim=gibbs_threshold,
                                         min_acceptance=min_acceptance, diagnostics=info)
            diagnostics.sampler = "tilting"
            diagnostics.acceptance_rate = info["acceptance_rate"]
            return draws
        except FallbackNeeded as exc:
            log.info("tilting sampler fell back to Gibbs: %s", exc)
    diagnostics.sampler = "gibbs"
    diagnostics.acceptance_rate = 1.0
    return gibbs_truncated_mvn(mean, cov, lower, n, burn_in=burn_in, rng_seed=rng)


def constrained_posterior_samples(data: Dataset, vops: VirtualObservationSet, queries,
                                  sp: SpatialKernelParams, tp, noise_variance: float,
                                  n_samples: int, rng_seed=None, *, joint: bool = True,
                                  constraint_noise: float = 1e-6, gibbs_threshold: int = 60,
                                  cond_threshold: float = 1e10,
                                  burn_in: int = 200) -> ConstrainedPosteriorSamples:
    """Sample the posterior at ``queries`` under the VOP convexity constraints.

    Parameters
    ----------
    queries : sequence of ParamPoint, or (n, D) array
        Array queries are placed at ``vops.t_slice``.
    joint : bool
        Draw correlated samples across queries. With ``joint=False`` each
        query receives its exact marginal: the conditional mean given the
        derivative draw plus conditional standard deviation times one
        normal variate shared by all queries in that draw. This avoids the
        query-by-query covariance and gives smooth sample surfaces.
    constraint_noise : float
        Variance added to the derivative block, as virtual observation noise.

    Returns
    -------
    ConstrainedPosteriorSamples
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = np.random.default_rng(rng_seed)
    Xq, tq = _queries(queries, vops.t_slice)
    nq = len(Xq)
    diag = SamplerDiagnostics()
    if vops.n_constraints == 0:
        post = predict(data, Xq, tq, sp, tp, noise_variance, full_cov=joint)
        if joint:
            Lq, _ = jitter_cholesky(post.covariance)
            S = post.mean + rng.standard_normal((n_samples, nq)) @ Lq.T
        else:
            S = post.mean + np.outer(rng.standard_normal(n_samples), post.std)
        return ConstrainedPosteriorSamples(S, S.mean(0), S.std(0), np.zeros((n_samples, 0)), diag)

    V, dims = vops.pairs()
    m = len(V)
    t_v = float(vops.t_slice)
    n = len(data)
    X, t, y = (data.X, data.t, data.y) if n else (np.zeros((0, sp.dim)), np.zeros(0), np.zeros(0))

    Kcc = d4_block(V, dims, V, dims, t_v, sp, tp)
    Kcc = 0.5 * (Kcc + Kcc.T) + constraint_noise * np.eye(m)
    Kfc = d2_block(X, t, V, dims, t_v, sp, tp) if n else np.zeros((0, m))
    Kff = kernel_matrix(X, t, X, t, sp, tp) + noise_variance * np.eye(n) if n else np.zeros((0, 0))
    Kqf = kernel_matrix(Xq, tq, X, t, sp, tp) if n else np.zeros((nq, 0))
    Kqc = d2_block(Xq, tq, V, dims, t_v, sp, tp)

    # derivative posterior given the data
    if n:
        Lf, _ = jitter_cholesky(0.5 * (Kff + Kff.T))
        A = linalg.solve_triangular(Lf, Kfc, lower=True, check_finite=False)
        a = linalg.solve_triangular(Lf, y, lower=True, check_finite=False)
        mc = A.T @ a
        Sc = Kcc - A.T @ A
    else:
        mc = np.zeros(m)
        Sc = Kcc.copy()
    Sc = 0.5 * (Sc + Sc.T)
    if not (np.all(np.isfinite(mc)) and np.all(np.isfinite(Sc))):
        raise InfeasibleConstraints("non-finite derivative posterior")
    lower = np.full(m, vops.lower_bound)
    C = sample_derivatives(mc, Sc, lower, n_samples, rng, diag, gibbs_threshold,
                           cond_threshold, burn_in)
    if np.any(C < lower - 1e-9) or not np.all(np.isfinite(C)):
        raise InfeasibleConstraints(
            f"derivative draws violate the bound (sampler={diag.sampler}, "
            f"cond={diag.condition_number:.3g})")

    # function values given data and derivatives: joint conditioning on [y; c]
    B = np.block([[Kff, Kfc], [Kfc.T, Kcc]])
    LB, _ = jitter_cholesky(0.5 * (B + B.T))
    Kq = np.hstack([Kqf, Kqc])
    W = linalg.solve_triangular(LB, Kq.T, lower=True, check_finite=False)
    obs = np.hstack([np.broadcast_to(y, (n_samples, n)), C])
    Z = linalg.solve_triangular(LB, obs.T, lower=True, check_finite=False)
    means = (W.T @ Z).T
    prior_var = prior_variance(tq, sp, tp)
    if joint:
        Kqq = kernel_matrix(Xq, tq, Xq, tq, sp, tp)
        cov = Kqq - W.T @ W
        Lq, _ = jitter_cholesky(0.5 * (cov + cov.T))
        S = means + rng.standard_normal((n_samples, nq)) @ Lq.T
    else:
        sd = np.sqrt(np.maximum(prior_var - np.einsum("ij,ij->j", W, W), 0.0))
        S = means + np.outer(rng.standard_normal(n_samples), sd)
    return ConstrainedPosteriorSamples(S, S.mean(0), S.std(0), C, diag)


def conditional_moments(data: Dataset, vops: VirtualObservationSet, queries,
                        sp: SpatialKernelParams, tp, noise_variance: float, derivatives=None,
                        constraint_noise: float = 1e-6):
    """Gaussian mean and covariance at ``queries`` given data and derivative values.

    With an empty VOP set this is the unconstrained posterior.
    """
    Xq, tq = _queries(queries, vops.t_slice)
    if vops.n_constraints == 0:
        post = predict(data, Xq, tq, sp, tp, noise_variance, full_cov=True)
        return post.mean, post.covariance
    V, dims = vops.pairs()
    m = len(V)
    t_v = float(vops.t_slice)
    X, t, y = data.X, data.t, data.y
    n = len(data)
    Kcc = d4_block(V, dims, V, dims, t_v, sp, tp) + constraint_noise * np.eye(m)
    Kfc = d2_block(X, t, V, dims, t_v, sp, tp) if n else np.zeros((0, m))
    Kff = kernel_matrix(X, t, X, t, sp, tp) + noise_variance * np.eye(n) if n else np.zeros((0, 0))
    B = np.block([[Kff, Kfc], [Kfc.T, Kcc]])
    Kq = np.hstack([kernel_matrix(Xq, tq, X, t, sp, tp) if n else np.zeros((len(Xq), 0)),
                    d2_block(Xq, tq, V, dims, t_v, sp, tp)])
    LB, _ = jitter_cholesky(0.5 * (B + B.T))
    W = linalg.solve_triangular(LB, Kq.T, lower=True, check_finite=False)
    obs = np.concatenate([y if n else np.zeros(0), np.asarray(derivatives, dtype=float)])
    mean = W.T @ linalg.solve_triangular(LB, obs, lower=True, check_finite=False)
    cov = kernel_matrix(Xq, tq, Xq, tq, sp, tp) - W.T @ W
    return mean, 0.5 * (cov + cov.T)
