"""Posterior predictive simulation and forecast/fit metrics.

Conventions: LMPL sums log conditional predictive ordinates (harmonic-mean
estimator over draws); FLMPL averages, over posterior draws, the log
predictive density of the held-out block; FES is the energy score of the
predictive sample; FRMSE is the root mean squared Euclidean error of the
predictive sample (no division by the block size).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special
from scipy.linalg import solve_triangular
from scipy.spatial.distance import pdist

from .errors import DataValidationError
from .gibbs import PosteriorDraws
from .model import ModelParams, PanelData, linear_predictor, temporal_factor
from .skew import _std_tn_lower
from .spatial import make_spatial_operator

_LOG2PI = math.log(2 * math.pi)


@dataclass
class PredictiveDraws:
    """Simulated future observations, shape ``(S, T_future, K)``."""

    samples: np.ndarray
    seed: int | None = None
    chain: int | None = None

    @property
    def flat(self) -> np.ndarray:
        return self.samples.reshape(self.samples.shape[0], -1)


def _check_future(draws: PosteriorDraws, X_future, T_future):
    X_future = np.asarray(X_future, dtype=float)
    K = draws.theta.shape[2]
    if X_future.shape[:2] != (T_future, K) or X_future.shape[2] != draws.beta.shape[1]:
        raise DataValidationError(
            f"X_future must have shape ({T_future}, {K}, {draws.beta.shape[1]}), got {X_future.shape}")
    if len(draws) == 0:
        raise DataValidationError("no posterior draws")
    return X_future


def predict_future(draws: PosteriorDraws, X_future, T_future: int, rng, seed=None) -> PredictiveDraws:
    """One future trajectory per kept draw, rolling the AR recursion from ``theta_T``."""
    X_future = _check_future(draws, X_future, T_future)
    S = len(draws)
    K = draws.theta.shape[2]
    U = draws.cache.eigvecs
    out = np.empty((S, T_future, K))
    for i in range(S):
        p = draws.params(i)
        k = p.skew
        op = make_spatial_operator(draws.cache, p.tau2, p.rhoS)
        s2 = 1 + k.lam**2
        eps = rng.standard_normal((T_future, K))
        alpha = math.sqrt(s2) * np.abs(rng.standard_normal((T_future, K)))
        noise = rng.standard_normal((T_future, K))
        inner = -k.b * k.delta * k.gamma + (k.gamma / math.sqrt(s2)) * eps + (k.gamma * k.lam / s2) * alpha
        w = ((inner @ U) * np.sqrt(op.omega_eigvals)) @ U.T
        theta = draws.theta[i, -1]
        mean = linear_predictor(X_future, p.beta)
        for s in range(T_future):
            theta = p.rhoT * theta + w[s]
            out[i, s] = mean[s] + theta + math.sqrt(p.sigma2) * noise[s]
    return PredictiveDraws(out, seed=seed, chain=draws.chain)


def observation_logdensity(y, X, draws: PosteriorDraws) -> np.ndarray:
    """``log N(y_tk; (X_t beta)_k + theta_tk, sigma2)`` per draw, shape ``(S, T, K)``."""
    mean = np.einsum("tkr,sr->stk", X, draws.beta) + draws.theta
    s2 = draws.sigma2[:, None, None]
    return -0.5 * (_LOG2PI + np.log(s2) + (y[None] - mean) ** 2 / s2)


def lmpl(draws: PosteriorDraws, data: PanelData) -> float:
    """Sum of log CPOs, each the harmonic mean of the observation density over draws."""
    if len(draws) == 0:
        raise DataValidationError("no posterior draws")
    with np.errstate(over="ignore"):
        logp = observation_logdensity(data.y, data.X, draws)
        log_cpo = math.log(logp.shape[0]) - special.logsumexp(-logp, axis=0)
    return float(np.sum(log_cpo))


def predictive_logdensity(params: ModelParams, theta_last, y_future, X_future, cache, rng, M: int = 100) -> float:
    """Monte Carlo estimate of ``log p(y_future | parameters, theta_T)``.

    Stacking the future block as ``y = b + A alpha + eps`` with ``alpha`` the
    truncated-normal innovation parts and ``eps`` Gaussian, the density is::

        2^n N(y; b, C + s^2 A A') P(alpha >= 0 | y)

    where ``alpha | y`` (before truncation) is Gaussian.  The orthant
    probability is estimated by GHK importance sampling with ``M`` paths.
    With ``lam = 0`` the result is the exact Gaussian log-density.
    """
    if M < 1:
        raise DataValidationError("M must be at least 1")
    y_future = np.asarray(y_future, dtype=float)
    Tf, K = y_future.shape
    n = Tf * K
    k = params.skew
    op = make_spatial_operator(cache, params.tau2, params.rhoS)
    rho = params.rhoT
    s2 = 1 + k.lam**2
    c = k.gamma**2 / s2
    kappa = k.gamma * k.lam / s2

    Lf = temporal_factor(rho, Tf)
    Rf = Lf @ Lf.T
    root = op.omega_sqrt()
    m0 = -k.b * k.delta * k.gamma * root.sum(axis=1)
    powers = rho ** np.arange(1, Tf + 1)
    b = linear_predictor(X_future, params.beta) + np.outer(powers, theta_last) + Lf.sum(axis=1)[:, None] * m0
    resid = (y_future - b).reshape(-1)
    C = c * np.kron(Rf, op.omega()) + params.sigma2 * np.eye(n)
    if k.lam == 0.0:
        return _mvn_logpdf(resid, C)

    A = kappa * np.kron(Lf, root)
    gauss = _mvn_logpdf(resid, C + s2 * A @ A.T)
    Lc = np.linalg.cholesky(C)
    G = _chol_solve(Lc, A)
    prec = np.eye(n) / s2 + A.T @ G
    La = np.linalg.cholesky(prec)
    cov_a = _chol_solve(La, np.eye(n))
    mu_a = cov_a @ (G.T @ resid)
    log_orthant = ghk_log_orthant(mu_a, cov_a, rng, M)
    return float(gauss + n * math.log(2.0) + log_orthant)


def _chol_solve(L, B):
    return solve_triangular(L.T, solve_triangular(L, B, lower=True), lower=False)


def _mvn_logpdf(resid, cov) -> float:
    L = np.linalg.cholesky(cov)
    z = solve_triangular(L, resid, lower=True)
    return float(-0.5 * (len(resid) * _LOG2PI + z @ z) - np.sum(np.log(np.diag(L))))


def ghk_log_orthant(mean, cov, rng, M: int = 100) -> float:
    """GHK estimate of ``log P(x >= 0)`` for ``x ~ N(mean, cov)``."""
    mean = np.asarray(mean, dtype=float)
    n = len(mean)
    L = np.linalg.cholesky(cov)
    z = np.zeros((M, n))
    logw = np.zeros(M)
    for i in range(n):
        # x_i = mean_i + L[i, :i] z_{:i} + L[i, i] z_i >= 0
        lower = -(mean[i] + z[:, :i] @ L[i, :i]) / L[i, i]
        logw += special.log_ndtr(-lower)
        z[:, i] = _std_tn_lower(lower, rng)
    return float(special.logsumexp(logw) - math.log(M))


def flmpl(draws: PosteriorDraws, y_future, X_future, M: int, rng) -> float:
    y_future = np.asarray(y_future, dtype=float)
    X_future = _check_future(draws, X_future, y_future.shape[0])
    vals = [
        predictive_logdensity(draws.params(i), draws.theta[i, -1], y_future, X_future, draws.cache, rng, M)
        for i in range(len(draws))
    ]
    return float(np.mean(vals))


def energy_score(y_future, samples) -> float:
    y = np.asarray(y_future, dtype=float).reshape(-1)
    x = np.asarray(samples, dtype=float).reshape(len(samples), -1)
    S = x.shape[0]
    if S < 1 or x.shape[1] != y.size:
        raise DataValidationError("samples must be (S, n) with n matching y_future")
    first = float(np.mean(np.linalg.norm(x - y, axis=1)))
    second = 2.0 * float(np.sum(pdist(x))) / (2.0 * S * S) if S > 1 else 0.0
    return first - second


def frmse(y_future, samples) -> float:
    y = np.asarray(y_future, dtype=float).reshape(-1)
    x = np.asarray(samples, dtype=float).reshape(len(samples), -1)
    if x.shape[0] < 1 or x.shape[1] != y.size:
        raise DataValidationError("samples must be (S, n) with n matching y_future")
    return float(math.sqrt(np.mean(np.sum((x - y) ** 2, axis=1))))


def parameter_rmse(draws: PosteriorDraws, truth: ModelParams) -> dict[str, float]:
    """Per-parameter ``sqrt(mean_i (draw_i - truth)^2)`` over kept draws."""
    if len(draws) == 0:
        raise DataValidationError("no posterior draws")
    truth_vals = {f"beta_{j}": b for j, b in enumerate(truth.beta)}
    truth_vals.update(sigma2=truth.sigma2, tau2=truth.tau2, rhoS=truth.rhoS, rhoT=truth.rhoT, **{"lambda": truth.lam})
    return {name: float(np.sqrt(np.mean((trace - truth_vals[name]) ** 2)))
            for name, trace in draws.scalar_traces().items()}


def forecast_metrics(draws: PosteriorDraws, train: PanelData, future: PanelData, rng, M: int = 100) -> dict:
    """LMPL on the training block plus FLMPL, FES and FRMSE on the future block."""
    pred = predict_future(draws, future.X, future.T, rng)
    y_flat = future.y.reshape(-1)
    return {
        "lmpl": lmpl(draws, train),
        "flmpl": flmpl(draws, future.y, future.X, M, rng),
        "fes": energy_score(y_flat, pred.flat),
        "frmse": frmse(y_flat, pred.flat),
    }
