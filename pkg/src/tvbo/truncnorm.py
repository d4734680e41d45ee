"""Sampling from multivariate normals truncated below.

Two samplers are provided. :func:`sample_truncated_mvn` is an exact
accept-reject sampler with an exponentially tilted sequential proposal
whose tilt solves a minimax problem; it produces i.i.d. draws.
:func:`gibbs_truncated_mvn` is a coordinatewise Gibbs sampler used for
high-dimensional or nearly singular covariances.
"""

from __future__ import annotations

import logging
import math

import numpy as np
from scipy import linalg, optimize, special

log = logging.getLogger(__name__)

_SQRT2PI = math.sqrt(2.0 * math.pi)


class FallbackNeeded(RuntimeError):
    """The tilting sampler cannot be used; switch to Gibbs sampling."""


def log_norm_prob(a, b):
    """``log(Phi(b) - Phi(a))`` evaluated without cancellation, ``a < b``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    a, b = np.broadcast_arrays(a, b)
    out = np.empty(a.shape)
    right = a > 0
    left = b < 0
    mid = ~(right | left)
    if np.any(right):
        pa = special.log_ndtr(-a[right])
        pb = special.log_ndtr(-b[right])
        out[right] = pa + np.log1p(-np.exp(pb - pa))
    if np.any(left):
        pa = special.log_ndtr(a[left])
        pb = special.log_ndtr(b[left])
        out[left] = pb + np.log1p(-np.exp(pa - pb))
    if np.any(mid):
        out[mid] = np.log1p(-special.ndtr(a[mid]) - special.ndtr(-b[mid]))
    return out


def _trandn(lower, upper, rng):
    """Standard normal draws truncated to ``[lower, upper]`` elementwise.

    Inverse-CDF sampling, carried out on whichever side of zero keeps the
    tail probabilities representable.
    """
    lower, upper = np.broadcast_arrays(np.asarray(lower, dtype=float),
                                       np.asarray(upper, dtype=float))
    u = rng.uniform(size=lower.shape)
    out = np.empty(lower.shape)
    right = lower > 0
    left = ~right
    if np.any(left):
        # [l, u] with l <= 0: invert the lower CDF
        pl = special.ndtr(lower[left])
        pu = special.ndtr(upper[left])
        out[left] = special.ndtri(pl + u[left] * (pu - pl))
    if np.any(right):
        # l > 0: invert the survival function, S(x) = ndtr(-x)
        sl = special.ndtr(-lower[right])
        su = special.ndtr(-upper[right])
        x = -special.ndtri(sl - u[right] * (sl - su))
        far = sl < 1e-300
        if np.any(far):
            lf = lower[right][far]
            x[far] = np.sqrt(lf ** 2 - 2.0 * np.log1p(-u[right][far]))
        out[right] = x
    return np.clip(out, lower, upper)


def _cholperm(S, lower, upper):
    """Cholesky factor with the greedy variable ordering of minimax tilting.

    At each step the remaining variable with the smallest conditional
    truncation probability is moved forward.
    """
    d = S.shape[0]
    S = S.copy()
    lower = lower.copy()
    upper = upper.copy()
    perm = np.arange(d)
    L = np.zeros((d, d))
    z = np.zeros(d)
    eps = 1e-10
    for j in range(d):
        rest = np.arange(j, d)
        s = np.diag(S)[rest] - np.sum(L[rest, :j] ** 2, axis=1)
        s = np.sqrt(np.maximum(s, eps))
        shift = L[rest, :j] @ z[:j]
        pr = log_norm_prob((lower[rest] - shift) / s, (upper[rest] - shift) / s)
        k = j + int(np.argmin(pr))
        if k != j:
            S[[j, k], :] = S[[k, j], :]
            S[:, [j, k]] = S[:, [k, j]]
            L[[j, k], :] = L[[k, j], :]
            lower[[j, k]] = lower[[k, j]]
            upper[[j, k]] = upper[[k, j]]
            perm[[j, k]] = perm[[k, j]]
        s = S[j, j] - L[j, :j] @ L[j, :j]
        if s < -0.01 * max(S[j, j], eps):
            raise FallbackNeeded("covariance is not positive semidefinite")
        L[j, j] = math.sqrt(max(s, eps))
        L[j + 1:, j] = (S[j + 1:, j] - L[j + 1:, :j] @ L[j, :j]) / L[j, j]
        shift = L[j, :j] @ z[:j]
        tl = (lower[j] - shift) / L[j, j]
        tu = (upper[j] - shift) / L[j, j]
        w = log_norm_prob(tl, tu)
        z[j] = (np.exp(-0.5 * tl ** 2 - w) - np.exp(-0.5 * tu ** 2 - w)) / _SQRT2PI
    return L, perm, lower, upper


def _psi(x, L, lower, upper, mu):
    """Log of the proposal-to-target likelihood ratio bound at tilt ``mu``."""
    x = np.append(x, 0.0)
    mu = np.append(mu, 0.0)
    c = L @ x
    lt = lower - mu - c
    ut = upper - mu - c
    return float(np.sum(log_norm_prob(lt, ut) + 0.5 * mu ** 2 - x * mu))


def _grad_psi(y, L, lower, upper):
    """Gradient and Jacobian of the minimax saddle-point equations."""
    d = lower.size
    x = np.zeros(d)
    mu = np.zeros(d)
    x[:d - 1] = y[:d - 1]
    mu[:d - 1] = y[d - 1:]
    c = np.zeros(d)
    c[1:] = L[1:, :] @ x
    lt = lower - mu - c
    ut = upper - mu - c
    w = log_norm_prob(lt, ut)
    pl = np.exp(-0.5 * lt ** 2 - w) / _SQRT2PI
    pu = np.exp(-0.5 * ut ** 2 - w) / _SQRT2PI
    P = pl - pu
    dfdx = -mu[:d - 1] + (P @ L[:, :d - 1])
    dfdm = mu - x + P
    grad = np.concatenate([dfdx, dfdm[:d - 1]])
    lt = np.where(np.isinf(lt), 0.0, lt)
    ut = np.where(np.isinf(ut), 0.0, ut)
    dP = -P ** 2 + lt * pl - ut * pu
    DL = dP[:, None] * L
    mx = -np.eye(d) + DL
    xx = L.T @ DL
    mx = mx[:d - 1, :d - 1]
    xx = xx[:d - 1, :d - 1]
    jac = np.block([[xx, mx.T], [mx, np.diag(1.0 + dP[:d - 1])]])
    return grad, jac


def _proposal(n, L, lower, upper, mu, rng):
    """Sequential tilted proposal; returns draws and their log weights."""
    d = lower.size
    mu = np.append(mu, 0.0)
    Z = np.zeros((d, n))
    logw = np.zeros(n)
    for k in range(d):
        col = L[k, :k] @ Z[:k, :]
        tl = lower[k] - mu[k] - col
        tu = upper[k] - mu[k] - col
        Z[k, :] = mu[k] + _trandn(tl, tu, rng)
        logw += log_norm_prob(tl, tu) + 0.5 * mu[k] ** 2 - mu[k] * Z[k, :]
    return Z, logw


def _as_inputs(mean, cov, lower):
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    lower = np.broadcast_to(np.asarray(lower, dtype=float), mean.shape).copy()
    if cov.shape != (mean.size, mean.size):
        raise ValueError("mean and covariance shapes disagree")
    return mean, 0.5 * (cov + cov.T), lower


def sample_truncated_mvn(mean, cov, lower, n: int, rng_seed=None, max_dim: int = 60,
                         min_acceptance: float = 1e-3, diagnostics: dict | None = None):
    """I.i.d. draws from ``N(mean, cov)`` restricted to ``x >= lower``.

    Parameters
    ----------
    mean : (d,) array_like
    cov : (d, d) array_like
        Positive semidefinite covariance.
    lower : (d,) array_like or float
        Lower bounds; ``-inf`` leaves a coordinate unbounded.
    n : int
        Number of draws.
    rng_seed : int, SeedSequence or Generator
    max_dim : int
        Dimensions above this raise :class:`FallbackNeeded`.
    min_acceptance : float
        Raise :class:`FallbackNeeded` when the running acceptance rate
        falls below this value.
    diagnostics : dict, optional
        Filled with ``acceptance_rate``.

    Returns
    -------
    ndarray, shape (n, d)
    """
    mean, cov, lower = _as_inputs(mean, cov, lower)
    d = mean.size
    if d > max_dim:
        raise FallbackNeeded(f"dimension {d} exceeds tilting threshold {max_dim}")
    rng = np.random.default_rng(rng_seed)
    lo = lower - mean
    hi = np.full(d, np.inf)
    if d == 1:
        sd = math.sqrt(max(cov[0, 0], 0.0))
        if sd == 0.0:
            draws = np.full((n, 1), max(mean[0], lower[0]))
        else:
            draws = mean + sd * _trandn(np.full(n, lo[0] / sd), np.full(n, np.inf), rng)[:, None]
        if diagnostics is not None:
            diagnostics["acceptance_rate"] = 1.0
        return draws

    Lfull, perm, lo_p, hi_p = _cholperm(cov, lo, hi)
    D = np.diag(Lfull).copy()
    lo_s = lo_p / D
    hi_s = hi_p / D
    L = Lfull / D[:, None] - np.eye(d)

    def fun(y):
        return _grad_psi(y, L, lo_s, hi_s)

    sol = optimize.root(fun, np.zeros(2 * (d - 1)), jac=True, method="hybr")
    y = sol.x
    if not sol.success or not np.all(np.isfinite(y)):
        raise FallbackNeeded(f"tilting equations not solved: {sol.message}")
    x_opt, mu_opt = y[:d - 1], y[d - 1:]
    psistar = _psi(x_opt, L, lo_s, hi_s, mu_opt)

    accepted = []
    n_acc = 0
    n_prop = 0
    while n_acc < n:
        batch = max(n - n_acc, 16)
        Z, logw = _proposal(batch, L, lo_s, hi_s, mu_opt, rng)
        keep = -np.log(rng.uniform(size=batch)) > (psistar - logw)
        n_prop += batch
        if np.any(keep):
            accepted.append(Z[:, keep])
            n_acc += int(keep.sum())
        if n_prop >= 1000 and n_acc / n_prop < min_acceptance:
            raise FallbackNeeded(f"acceptance rate {n_acc / n_prop:.2e} too low")
    Z = np.concatenate(accepted, axis=1)[:, :n]
    X = Lfull @ Z
    out = np.empty_like(X)
    out[perm, :] = X
    if diagnostics is not None:
        diagnostics["acceptance_rate"] = n_acc / n_prop
    # truncation holds in exact arithmetic; clip round-off from the back-transform
    return np.maximum(out.T + mean, lower)


def gibbs_truncated_mvn(mean, cov, lower, n: int, burn_in: int = 200, rng_seed=None,
                        thin: int = 1, initial=None):
    """Correlated draws from ``N(mean, cov)`` restricted to ``x >= lower`` by Gibbs sweeps.

    Each sweep updates every coordinate from its univariate truncated-normal
    full conditional. Coordinates whose conditional variance vanishes are set
    to their conditional mean clipped at the bound.
    """
    mean, cov, lower = _as_inputs(mean, cov, lower)
    d = mean.size
    rng = np.random.default_rng(rng_seed)
    prec = linalg.pinvh(cov + 1e-10 * np.mean(np.diag(cov)) * np.eye(d))
    cond_var = 1.0 / np.diag(prec)
    cond_sd = np.sqrt(np.maximum(cond_var, 0.0))
    singular = ~np.isfinite(cond_sd) | (cond_sd < 1e-12)
    if np.any(singular):
        log.info("gibbs: %d coordinates with vanishing conditional variance", int(singular.sum()))
    if initial is None:
        x = np.where(np.isfinite(lower), np.maximum(mean, lower + 1e-6 * np.sqrt(np.diag(cov))), mean)
    else:
        x = np.maximum(np.asarray(initial, dtype=float), lower)
    dev = x - mean
    out = np.empty((n, d))
    total = burn_in + n * thin
    k = 0
    for sweep in range(total):
        # batch the uniform/normal draws of a sweep to keep the loop light
        u = rng.uniform(size=d)
        for i in range(d):
            cm = mean[i] - cond_var[i] * (prec[i] @ dev - prec[i, i] * dev[i])
            if singular[i]:
                xi = max(cm, lower[i])
            else:
                a = (lower[i] - cm) / cond_sd[i]
                xi = cm + cond_sd[i] * _inv_cdf_above(a, u[i])
            dev[i] = xi - mean[i]
        if sweep >= burn_in and (sweep - burn_in) % thin == 0:
            out[k] = dev + mean
            k += 1
    return np.maximum(out, lower)


def _inv_cdf_above(a: float, u: float) -> float:
    """Inverse-CDF draw of a standard normal truncated to ``[a, inf)``."""
    if a == -np.inf:
        return float(special.ndtri(u))
    if a <= 0.0:
        pa = special.ndtr(a)
        return float(special.ndtri(pa + u * (1.0 - pa)))
    if a < 35.0:
        # invert through the upper tail to keep precision for large a
        return float(-special.ndtri(special.ndtr(-a) * (1.0 - u)))
    return a - math.log1p(-u) / a
