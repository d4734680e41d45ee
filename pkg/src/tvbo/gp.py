"""Spatio-temporal Gaussian process regression.

Covariances are separable: a squared-exponential kernel over parameters
times a temporal kernel over integer TVBO steps. Three temporal kernels
are provided:

* :class:`WienerTemporal`: uncertainty injection. The posterior mean is
  kept over time while the variance grows linearly.
* :class:`BackToPriorTemporal`: stationary forgetting, the posterior
  decays back to the prior.
* :class:`TimeInvariant`: no temporal structure.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg, optimize, special


class NumericalFailure(RuntimeError):
    """Raised when a covariance matrix cannot be factorized."""


# ---------------------------------------------------------------------------
# Data containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ParamPoint:
    theta: np.ndarray
    t: int = 0

    def __post_init__(self):
        theta = np.atleast_1d(np.asarray(self.theta, dtype=float))
        if theta.ndim != 1 or theta.size < 1:
            raise ValueError("theta must be a non-empty vector")
        if int(self.t) != self.t or self.t < 0:
            raise ValueError("t must be a non-negative integer")
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "t", int(self.t))


@dataclass(frozen=True)
class Observation:
    point: ParamPoint
    y: float
    stable: bool = True
    imputed: bool = False

    def __post_init__(self):
        if self.imputed and self.stable:
            raise ValueError("imputed observations must be flagged unstable")
        if not math.isfinite(self.y):
            raise ValueError("observation value must be finite")


@dataclass
class Dataset:
    """Time-ordered observations.

    Timestamps must be non-decreasing. Several records may share a step
    (the initial design sits at ``t = 0``).
    """

    records: list = field(default_factory=list)

    def __post_init__(self):
        self.records = list(self.records)
        ts = [r.point.t for r in self.records]
        if any(b < a for a, b in zip(ts, ts[1:])):
            raise ValueError("timestamps must be non-decreasing")

    def __len__(self):
        return len(self.records)

    def append(self, obs: Observation) -> None:
        if self.records and obs.point.t < self.records[-1].point.t:
            raise ValueError("timestamps must be non-decreasing")
        self.records.append(obs)

    def copy(self) -> "Dataset":
        return Dataset(list(self.records))

    def window(self, size: int | None) -> "Dataset":
        """The ``size`` most recent records (all when ``size`` is None)."""
        if size is None or size >= len(self.records):
            return self
        return Dataset(self.records[-size:])

    @property
    def X(self) -> np.ndarray:
        return np.array([r.point.theta for r in self.records], dtype=float)

    @property
    def t(self) -> np.ndarray:
        return np.array([r.point.t for r in self.records], dtype=float)

    @property
    def y(self) -> np.ndarray:
        return np.array([r.y for r in self.records], dtype=float)


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SpatialKernelParams:
    lengthscales: np.ndarray
    output_variance: float = 1.0

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=float))
        if np.any(ls <= 0) or not self.output_variance > 0:
            raise ValueError("lengthscales and output variance must be positive")
        object.__setattr__(self, "lengthscales", ls)
        object.__setattr__(self, "output_variance", float(self.output_variance))

    @property
    def dim(self) -> int:
        return self.lengthscales.size


@dataclass(frozen=True)
class WienerTemporal:
    """Wiener-process kernel ``sigma_w_sq * (min(t, t') - c0)``.

    ``c0 = -1 / sigma_w_sq`` so that the kernel equals one whenever either
    argument is zero.
    """

    sigma_w_sq: float

    def __post_init__(self):
        if not self.sigma_w_sq > 0:
            raise ValueError("sigma_w_sq must be positive")

    @property
    def c0(self) -> float:
        return -1.0 / self.sigma_w_sq

    @classmethod
    def from_rate(cls, rate: float, output_variance: float) -> "WienerTemporal":
        """Kernel whose product with an SE kernel adds ``rate`` variance per step."""
        return cls(rate / output_variance)

    def __call__(self, t, t2) -> float:
        return wiener_kernel(t, t2, self)

    def matrix(self, t1, t2) -> np.ndarray:
        # 1 + s*min(t, t') equals s*(min - c0) without the cancellation
        return 1.0 + self.sigma_w_sq * np.minimum.outer(t1, t2)

    def diag(self, t) -> np.ndarray:
        return 1.0 + self.sigma_w_sq * np.asarray(t, dtype=float)


@dataclass(frozen=True)
class BackToPriorTemporal:
    """Stationary forgetting ``(1 - epsilon) ** (|t - t'| / 2)``."""

    epsilon: float

    def __post_init__(self):
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError("epsilon must lie in (0, 1)")

    def __call__(self, t, t2) -> float:
        return b2p_kernel(t, t2, self)

    def matrix(self, t1, t2) -> np.ndarray:
        return (1.0 - self.epsilon) ** (0.5 * np.abs(np.subtract.outer(t1, t2)))

    def diag(self, t) -> np.ndarray:
        return np.ones(np.shape(t))


@dataclass(frozen=True)
class TimeInvariant:
    def __call__(self, t, t2) -> float:
        return 1.0

    def matrix(self, t1, t2) -> np.ndarray:
        return np.ones((np.size(t1), np.size(t2)))

    def diag(self, t) -> np.ndarray:
        return np.ones(np.shape(t))


def _check_dims(a, b, p: SpatialKernelParams):
    if a.shape[-1] != b.shape[-1] or a.shape[-1] != p.dim:
        raise ValueError(
            f"dimension mismatch: {a.shape[-1]}, {b.shape[-1]}, kernel {p.dim}")


def se_kernel(a, b, p: SpatialKernelParams) -> float:
    a = np.atleast_1d(np.asarray(a, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    _check_dims(a, b, p)
    r = (a - b) / p.lengthscales
    return float(p.output_variance * np.exp(-0.5 * np.dot(r, r)))


def se_matrix(X1, X2, p: SpatialKernelParams) -> np.ndarray:
    """SE Gram block between row sets ``X1`` (n, D) and ``X2`` (m, D)."""
    X1 = np.atleast_2d(np.asarray(X1, dtype=float))
    X2 = np.atleast_2d(np.asarray(X2, dtype=float))
    _check_dims(X1, X2, p)
    return p.output_variance * np.exp(-0.5 * scaled_sqdist(X1, X2, p.lengthscales))


def scaled_sqdist(X1, X2, lengthscales) -> np.ndarray:
    diff = (X1[:, None, :] - X2[None, :, :]) / lengthscales
    return np.einsum("ijk,ijk->ij", diff, diff)


def wiener_kernel(t: int, t2: int, p: WienerTemporal) -> float:
    if t < 0 or t2 < 0:
        raise ValueError("time steps must be non-negative")
    # s * (min - c0) with c0 = -1/s, written so that min = 0 gives exactly 1
    return float(1.0 + p.sigma_w_sq * min(t, t2))


def b2p_kernel(t: int, t2: int, p: BackToPriorTemporal) -> float:
    if t < 0 or t2 < 0:
        raise ValueError("time steps must be non-negative")
    return float((1.0 - p.epsilon) ** (abs(t - t2) / 2.0))


def spatio_temporal_kernel(a: ParamPoint, b: ParamPoint, sp: SpatialKernelParams, tp) -> float:
    return se_kernel(a.theta, b.theta, sp) * tp(a.t, b.t)


def kernel_matrix(X1, t1, X2, t2, sp: SpatialKernelParams, tp) -> np.ndarray:
    """Product-kernel block between ``(X1, t1)`` and ``(X2, t2)``."""
    return se_matrix(X1, X2, sp) * tp.matrix(np.asarray(t1, float).ravel(), np.asarray(t2, float).ravel())


def _stack(points: Sequence[ParamPoint]):
    X = np.array([p.theta for p in points], dtype=float)
    t = np.array([p.t for p in points], dtype=float)
    return X, t


def gram_matrix(points: Sequence[ParamPoint], sp: SpatialKernelParams, tp) -> np.ndarray:
    if len(points) == 0:
        raise ValueError("need at least one point")
    X, t = _stack(points)
    K = kernel_matrix(X, t, X, t, sp, tp)
    return 0.5 * (K + K.T)


def prior_variance(t, sp: SpatialKernelParams, tp) -> np.ndarray:
    return sp.output_variance * tp.diag(np.asarray(t, dtype=float).ravel())


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------


def jitter_cholesky(K: np.ndarray, base: float = 1e-8, max_jitter: float = 1e-4):
    """Lower Cholesky factor of ``K`` plus a small escalating diagonal jitter.

    A plain factorization is tried first. On failure a jitter of ``base``
    times the mean diagonal is added and grown tenfold up to ``max_jitter``
    times the mean diagonal.

    Returns
    -------
    L : ndarray
    jitter : float
        Absolute jitter that was added.
    """
    scale = float(np.mean(np.diag(K))) if K.size else 1.0
    if not np.isfinite(scale) or scale <= 0:
        scale = 1.0
    rel = 0.0
    while rel <= max_jitter * (1 + 1e-12):
        jit = rel * scale
        try:
            L = linalg.cholesky(K + jit * np.eye(K.shape[0]), lower=True, check_finite=False)
            if np.all(np.isfinite(L)):
                return L, jit
        except linalg.LinAlgError:
            pass
        rel = base if rel == 0.0 else rel * 10.0
    raise NumericalFailure("covariance matrix not positive definite after jitter escalation")


@dataclass
class GPPosterior:
    """Predictive distribution of the latent function at query points.

    ``covariance`` is None when only the marginal variances were requested.
    """

    mean: np.ndarray
    variance: np.ndarray
    covariance: np.ndarray | None = None

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(np.maximum(self.variance, 0.0))


class ExactGP:
    """Zero-mean GP conditioned on a dataset, with the factorization cached.

    Parameters
    ----------
    data : Dataset
    sp : SpatialKernelParams
    tp : temporal kernel
    noise_variance : float
        Observation noise variance, must be positive.
    """

    def __init__(self, data: Dataset, sp: SpatialKernelParams, tp, noise_variance: float):
        if not noise_variance > 0:
            raise ValueError("noise_variance must be positive")
        self.sp, self.tp, self.noise_variance = sp, tp, noise_variance
        self.n = len(data)
        if self.n:
            self.X, self.t, self.y = data.X, data.t, data.y
            K = kernel_matrix(self.X, self.t, self.X, self.t, sp, tp)
            K = 0.5 * (K + K.T) + noise_variance * np.eye(self.n)
            self.L, self.jitter = jitter_cholesky(K)
            self.alpha = linalg.cho_solve((self.L, True), self.y, check_finite=False)

    def predict(self, Xq, tq, full_cov: bool = False) -> GPPosterior:
        """Posterior of the latent function at rows ``Xq`` and steps ``tq``."""
        Xq = np.atleast_2d(np.asarray(Xq, dtype=float))
        tq = np.broadcast_to(np.asarray(tq, dtype=float), (Xq.shape[0],)).copy()
        prior_var = prior_variance(tq, self.sp, self.tp)
        Kqq = None
        if full_cov:
            Kqq = kernel_matrix(Xq, tq, Xq, tq, self.sp, self.tp)
            Kqq = 0.5 * (Kqq + Kqq.T)
        if self.n == 0:
            return GPPosterior(np.zeros(Xq.shape[0]), prior_var, Kqq)
        Kfq = kernel_matrix(self.X, self.t, Xq, tq, self.sp, self.tp)
        mean = Kfq.T @ self.alpha
        V = linalg.solve_triangular(self.L, Kfq, lower=True, check_finite=False)
        var = prior_var - np.einsum("ij,ij->j", V, V)
        cov = None
        if full_cov:
            cov = Kqq - V.T @ V
            cov = 0.5 * (cov + cov.T)
        return GPPosterior(mean, var, cov)


def predict(data: Dataset, Xq, tq, sp: SpatialKernelParams, tp, noise_variance: float,
            full_cov: bool = False) -> GPPosterior:
    """Posterior at query rows ``Xq`` and steps ``tq``; the prior when ``data`` is empty."""
    return ExactGP(data, sp, tp, noise_variance).predict(Xq, tq, full_cov)


def posterior(data: Dataset, queries: Sequence[ParamPoint], sp: SpatialKernelParams, tp,
              noise_variance: float) -> GPPosterior:
    """Full posterior (mean and covariance) at ``queries``."""
    Xq, tq = _stack(queries)
    return predict(data, Xq, tq, sp, tp, noise_variance, full_cov=True)


@dataclass(frozen=True)
class HyperPriors:
    """Gamma priors (shape, rate) on each lengthscale."""

    shape: np.ndarray
    rate: np.ndarray

    def __post_init__(self):
        shape = np.atleast_1d(np.asarray(self.shape, dtype=float))
        rate = np.atleast_1d(np.asarray(self.rate, dtype=float))
        if np.any(shape <= 0) or np.any(rate <= 0):
            raise ValueError("Gamma shape and rate must be positive")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "rate", rate)

    @classmethod
    def default(cls, dim: int) -> "HyperPriors":
        return cls(np.full(dim, 3.0), np.full(dim, 6.0))

    def logpdf(self, lengthscales) -> float:
        l = np.asarray(lengthscales, dtype=float)
        a, b = np.broadcast_to(self.shape, l.shape), np.broadcast_to(self.rate, l.shape)
        return float(np.sum(a * np.log(b) - special.gammaln(a) + (a - 1) * np.log(l) - b * l))


def _gaussian_lml(y, L, alpha) -> float:
    n = y.size
    return float(-0.5 * y @ alpha - np.log(np.diag(L)).sum() - 0.5 * n * math.log(2 * math.pi))


def log_marginal_likelihood(data: Dataset, sp: SpatialKernelParams, tp, noise_variance: float,
                            priors: HyperPriors | None = None) -> float:
    """Gaussian log evidence plus the Gamma log-densities of the lengthscales."""
    if len(data) == 0:
        raise ValueError("need data")
    gp = ExactGP(data, sp, tp, noise_variance)
    val = _gaussian_lml(gp.y, gp.L, gp.alpha)
    if priors is not None:
        val += priors.logpdf(sp.lengthscales)
    return val


_LOG_NOISE_MIN = math.log(1e-6)


def _objective(phi, X, T, y, priors, fit_noise, fixed_noise):
    D = X.shape[1]
    ls = np.exp(phi[:D])
    sk2 = math.exp(phi[D])
    sn2 = math.exp(phi[D + 1]) if fit_noise else fixed_noise
    diffs = [np.subtract.outer(X[:, i], X[:, i]) ** 2 for i in range(D)]
    R = sum(d / l ** 2 for d, l in zip(diffs, ls))
    C = np.exp(-0.5 * R) * T
    K = sk2 * C + sn2 * np.eye(y.size)
    try:
        L, jit = jitter_cholesky(0.5 * (K + K.T))
    except NumericalFailure:
        return math.inf, np.zeros_like(phi)
    alpha = linalg.cho_solve((L, True), y, check_finite=False)
    lml = _gaussian_lml(y, L, alpha)
    Kinv = linalg.cho_solve((L, True), np.eye(y.size), check_finite=False)
    W = np.outer(alpha, alpha) - Kinv
    grad = np.empty_like(phi)
    for i in range(D):
        grad[i] = 0.5 * np.sum(W * (sk2 * C * diffs[i] / ls[i] ** 2))
    grad[D] = 0.5 * np.sum(W * sk2 * C)
    if fit_noise:
        grad[D + 1] = 0.5 * sn2 * np.trace(W)
    if priors is not None:
        lml += priors.logpdf(ls)
        grad[:D] += (priors.shape - 1.0) - priors.rate * ls
    return -lml, -grad


def fit_hyperparameters(data: Dataset, initial: SpatialKernelParams, tp,
                        priors: HyperPriors | None, noise_variance: float,
                        fit_noise: bool = True, bounds: dict | None = None):
    """Maximize the penalized log marginal likelihood over spatial hyperparameters.

    Lengthscales, output variance and (optionally) the noise variance are
    optimized in log space with L-BFGS-B, warm-started at ``initial``.
    The temporal kernel ``tp`` is held fixed. If the optimizer does not
    improve on the starting point, the starting point is returned.

    Returns
    -------
    params : SpatialKernelParams
    noise_variance : float
    """
    if len(data) < 2:
        raise ValueError("need at least two records to fit hyperparameters")
    b = {"lengthscale": (1e-3, 1e3), "output_variance": (1e-4, 1e4), "noise_variance": (1e-6, 1e2)}
    b.update(bounds or {})
    X, t, y = data.X, data.t, data.y
    T = tp.matrix(t, t)
    D = initial.dim
    phi0 = np.concatenate([np.log(initial.lengthscales), [math.log(initial.output_variance)]])
    bnds = [tuple(np.log(b["lengthscale"]))] * D + [tuple(np.log(b["output_variance"]))]
    if fit_noise:
        phi0 = np.append(phi0, math.log(max(noise_variance, 1e-6)))
        bnds.append((max(math.log(b["noise_variance"][0]), _LOG_NOISE_MIN), math.log(b["noise_variance"][1])))
    phi0 = np.clip(phi0, [lo for lo, _ in bnds], [hi for _, hi in bnds])
    args = (X, T, y, priors, fit_noise, noise_variance)
    f0, _ = _objective(phi0, *args)
    start_params = SpatialKernelParams(np.exp(phi0[:D]), math.exp(phi0[D]))
    start_noise = math.exp(phi0[D + 1]) if fit_noise else noise_variance
    f_init = -log_marginal_likelihood(data, initial, tp, noise_variance, priors)
    try:
        res = optimize.minimize(_objective, phi0, args=args, jac=True, method="L-BFGS-B",
                                bounds=bnds, options={"maxiter": 200})
        phi, fval = res.x, res.fun
    except (ValueError, FloatingPointError, NumericalFailure):
        phi, fval = phi0, f0
    if not np.isfinite(fval) or fval > f_init or not np.all(np.isfinite(phi)):
        if f0 <= f_init:
            return start_params, start_noise
        warnings.warn("hyperparameter optimization did not improve; keeping initial values")
        return initial, noise_variance
    params = SpatialKernelParams(np.exp(phi[:D]), math.exp(phi[D]))
    noise = math.exp(phi[D + 1]) if fit_noise else noise_variance
    return params, noise
