"""Blocked Gibbs sampler for the dynamic FS-CSN model.

Given the truncated-normal augmentation ``alpha``, each innovation is Gaussian::

    theta_t - rho_T theta_{t-1} | alpha_t ~ N(m_t, c Omega)
    m_t = -b delta gamma Omega^s 1 + kappa Omega^s alpha_t
    c = gamma^2 / (1 + lam^2),  kappa = gamma lam / (1 + lam^2)

so ``theta | alpha`` is a linear-Gaussian state space model.  Every filter
covariance is a rational function of ``Omega`` and therefore diagonal in the
Laplacian eigenbasis; the recursions run as ``K`` independent scalar filters
after one orthogonal rotation per time step.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .errors import DataValidationError, NumericalError
from .model import DCAR, DFSCSN, MODEL_KINDS, ModelParams, PanelData, innovations, linear_predictor
from .skew import sample_truncated_normal_interval, sample_truncated_normal_lower0, skew_constants
from .spatial import SpatialEigenCache, SpatialOperator, eigendecompose_laplacian, make_spatial_operator

log = logging.getLogger(__name__)

_LOG2PI = math.log(2 * math.pi)
_VAR_FLOOR = 1e-300


@dataclass(frozen=True)
class Priors:
    sigma2_beta: float = 100.0
    a_sigma2: float = 1.0
    b_sigma2: float = 0.01
    a_tau2: float = 1.0
    b_tau2: float = 0.01
    sigma2_lambda: float = 9.0

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if not value > 0:
                raise DataValidationError(f"prior {name} must be positive, got {value}")


BLOCKS = ("theta", "lambda", "alpha", "beta", "sigma2", "rhoT", "spatial")


@dataclass(frozen=True)
class ChainConfig:
    iterations: int = 2000
    burnin: int = 1000
    thin: int = 1
    seed: int = 0
    model_kind: str = DFSCSN
    step_log_tau2: float = 0.3
    step_logit_rhoS: float = 0.5
    step_lambda: float = 0.5
    adapt: bool = True
    target_accept: float = 0.44
    fixed: tuple = ()

    def __post_init__(self):
        if self.model_kind not in MODEL_KINDS:
            raise DataValidationError(f"model_kind must be one of {MODEL_KINDS}, got {self.model_kind!r}")
        if not (self.iterations > 0 and 0 <= self.burnin < self.iterations and self.thin >= 1):
            raise DataValidationError("need iterations > burnin >= 0 and thin >= 1")
        if min(self.step_log_tau2, self.step_logit_rhoS, self.step_lambda) < 0:
            raise DataValidationError("MH step sizes must be nonnegative")
        unknown = set(self.fixed) - set(BLOCKS)
        if unknown:
            raise DataValidationError(f"unknown blocks in fixed: {sorted(unknown)}")
        object.__setattr__(self, "fixed", tuple(self.fixed))

    @property
    def n_kept(self) -> int:
        return len(range(self.burnin, self.iterations, self.thin))


@dataclass
class PosteriorDraws:
    model_kind: str
    iteration: np.ndarray
    beta: np.ndarray
    sigma2: np.ndarray
    tau2: np.ndarray
    rhoS: np.ndarray
    rhoT: np.ndarray
    lam: np.ndarray
    theta: np.ndarray
    alpha: np.ndarray
    cache: SpatialEigenCache
    acceptance: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    chain: int = 0
    seed: int = 0

    def __len__(self) -> int:
        return len(self.sigma2)

    def params(self, i: int) -> ModelParams:
        return ModelParams(self.beta[i], self.sigma2[i], self.tau2[i], self.rhoS[i], self.rhoT[i], self.lam[i])

    def scalar_traces(self) -> dict[str, np.ndarray]:
        out = {f"beta_{j}": self.beta[:, j] for j in range(self.beta.shape[1])}
        out.update(sigma2=self.sigma2, tau2=self.tau2, rhoS=self.rhoS, rhoT=self.rhoT)
        if self.model_kind == DFSCSN:
            out["lambda"] = self.lam
        return out

    @classmethod
    def concatenate(cls, parts: list["PosteriorDraws"]) -> "PosteriorDraws":
        first = parts[0]
        cat = {name: np.concatenate([getattr(p, name) for p in parts]) for name in
               ("iteration", "beta", "sigma2", "tau2", "rhoS", "rhoT", "lam", "theta", "alpha")}
        return cls(first.model_kind, cache=first.cache, acceptance=dict(first.acceptance),
                   timings=dict(first.timings), chain=first.chain, seed=first.seed, **cat)


# ---------------------------------------------------------------------------
# theta | alpha


def _offsets(alpha, params: ModelParams, op: SpatialOperator, u1):
    """Innovation means ``m_t`` rotated into the eigenbasis, shape ``(T, K)``."""
    k = params.skew
    sqrt_d = np.sqrt(op.omega_eigvals)
    base = -k.b * k.delta * k.gamma * u1
    if k.lam == 0.0:
        return np.broadcast_to(sqrt_d * base, alpha.shape)
    kappa = k.gamma * k.lam / (1 + k.lam**2)
    return sqrt_d * (base + kappa * (alpha @ op.cache.eigvecs))


def _forward_filter(y, X, alpha, params: ModelParams, op: SpatialOperator):
    U = op.cache.eigvecs
    k = params.skew
    T, K = y.shape
    c = k.gamma**2 / (1 + k.lam**2)
    q = c * op.omega_eigvals
    yt = (y - linear_predictor(X, params.beta)) @ U
    m = _offsets(alpha, params, op, np.ones(K) @ U)
    rho = params.rhoT
    s2 = params.sigma2
    mp = np.empty((T, K))
    Pp = np.empty((T, K))
    mf = np.empty((T, K))
    Pf = np.empty((T, K))
    for t in range(T):
        if t == 0:
            mp[t] = m[0]
            Pp[t] = q
        else:
            mp[t] = rho * mf[t - 1] + m[t]
            Pp[t] = rho * rho * Pf[t - 1] + q
        gain = Pp[t] / (Pp[t] + s2)
        mf[t] = mp[t] + gain * (yt[t] - mp[t])
        Pf[t] = np.maximum(s2 * gain, _VAR_FLOOR)
    return mp, Pp, mf, Pf


def ffbs_theta(y, X, alpha, params: ModelParams, operator: SpatialOperator, rng) -> np.ndarray:
    """One joint draw of ``theta_{1:T}`` from its Gaussian full conditional given ``alpha``."""
    mp, Pp, mf, Pf = _forward_filter(y, X, alpha, params, operator)
    T, K = mf.shape
    rho = params.rhoT
    z = rng.standard_normal((T, K))
    out = np.empty((T, K))
    out[-1] = mf[-1] + np.sqrt(Pf[-1]) * z[-1]
    for t in range(T - 2, -1, -1):
        J = rho * Pf[t] / Pp[t + 1]
        mean = mf[t] + J * (out[t + 1] - mp[t + 1])
        var = np.maximum(Pf[t] - J * rho * Pf[t], 0.0)
        out[t] = mean + np.sqrt(var) * z[t]
    theta = out @ operator.cache.eigvecs.T
    if not np.all(np.isfinite(theta)):
        raise NumericalError("non-finite theta from FFBS")
    return theta


def theta_conditional_moments(y, X, alpha, params: ModelParams, operator: SpatialOperator):
    """Exact mean ``(T, K)`` and covariance ``(TK, TK)`` of the distribution :func:`ffbs_theta` draws from."""
    mp, Pp, mf, Pf = _forward_filter(y, X, alpha, params, operator)
    T, K = mf.shape
    rho = params.rhoT
    mean = np.empty((T, K))
    C = np.zeros((K, T, T))
    mean[-1] = mf[-1]
    C[:, -1, -1] = Pf[-1]
    for t in range(T - 2, -1, -1):
        J = rho * Pf[t] / Pp[t + 1]
        mean[t] = mf[t] + J * (mean[t + 1] - mp[t + 1])
        var = Pf[t] - J * rho * Pf[t]
        C[:, t, t + 1:] = J[:, None] * C[:, t + 1, t + 1:]
        C[:, t + 1:, t] = C[:, t, t + 1:]
        C[:, t, t] = var + J * J * C[:, t + 1, t + 1]
    U = operator.cache.eigvecs
    cov = np.einsum("ik,kts,jk->tisj", U, C, U).reshape(T * K, T * K)
    return mean @ U.T, cov


# ---------------------------------------------------------------------------
# alpha | theta


def alpha_conditional_mean(theta, params: ModelParams, operator: SpatialOperator) -> np.ndarray:
    k = params.skew
    r = operator.apply_omega_inv_sqrt(innovations(theta, params.rhoT))
    return (k.lam / k.gamma) * r + k.lam * k.b * k.delta


def sample_alpha(theta, params: ModelParams, operator: SpatialOperator, rng) -> np.ndarray:
    """Independent unit-variance normals truncated at zero, one per ``(t, k)``."""
    return sample_truncated_normal_lower0(alpha_conditional_mean(theta, params, operator), 1.0, rng)


# ---------------------------------------------------------------------------
# conjugate blocks


def beta_conditional(y, X, theta, sigma2: float, priors: Priors):
    Xf = X.reshape(-1, X.shape[-1])
    r = Xf.shape[1]
    prec = Xf.T @ Xf / sigma2 + np.eye(r) / priors.sigma2_beta
    cov = np.linalg.inv(prec)
    cov = 0.5 * (cov + cov.T)
    mean = cov @ (Xf.T @ (y - theta).reshape(-1)) / sigma2
    return mean, cov


def sample_beta(y, X, theta, sigma2: float, priors: Priors, rng) -> np.ndarray:
    mean, cov = beta_conditional(y, X, theta, sigma2, priors)
    return mean + np.linalg.cholesky(cov) @ rng.standard_normal(len(mean))


def sample_inverse_gamma(shape: float, scale: float, rng) -> float:
    return float(scale / rng.gamma(shape))


def sigma2_conditional(y, X, theta, beta, priors: Priors):
    resid = y - theta - linear_predictor(X, beta)
    return priors.a_sigma2 + 0.5 * resid.size, priors.b_sigma2 + 0.5 * float(np.sum(resid**2))


def sample_sigma2(y, X, theta, beta, priors: Priors, rng) -> float:
    return sample_inverse_gamma(*sigma2_conditional(y, X, theta, beta, priors), rng)


def rho_t_conditional(theta, alpha, params: ModelParams, operator: SpatialOperator):
    """Mean and variance of the (untruncated) normal conditional of ``rho_T``; ``None`` when ``T = 1``."""
    T = theta.shape[0]
    if T < 2:
        return None
    k = params.skew
    prev = theta[:-1]
    target = theta[1:] - _innovation_means(alpha[1:], params, operator)
    wprev = operator.apply_omega_inv(prev)
    scale = (1 + k.lam**2) / k.gamma**2
    prec = scale * float(np.sum(wprev * prev))
    if prec <= 0:
        return None
    var = 1.0 / prec
    mean = scale * var * float(np.sum(wprev * target))
    return mean, var


def _innovation_means(alpha, params: ModelParams, operator: SpatialOperator):
    k = params.skew
    kappa = k.gamma * k.lam / (1 + k.lam**2)
    return operator.apply_omega_sqrt(-k.b * k.delta * k.gamma + kappa * alpha)


def sample_rho_t(theta, alpha, params: ModelParams, operator: SpatialOperator, rng) -> float:
    cond = rho_t_conditional(theta, alpha, params, operator)
    if cond is None:
        return float(rng.random())
    mean, var = cond
    return sample_truncated_normal_interval(mean, math.sqrt(var), 0.0, 1.0, rng)


# ---------------------------------------------------------------------------
# Metropolis-Hastings blocks


def mh_step(x: float, log_target, step: float, rng):
    """Gaussian random-walk MH on an unconstrained scalar; returns ``(x, accepted)``."""
    prop = x + step * rng.standard_normal()
    u = rng.random()
    if step == 0.0:
        return x, True
    lp_prop = log_target(prop)
    if math.log(u) < lp_prop - log_target(x):
        return prop, True
    return x, False


def _spatial_log_target(theta, alpha, params: ModelParams, priors: Priors, cache: SpatialEigenCache):
    """Closure over ``(log tau2, logit rhoS)`` of the Gaussian ``theta | alpha`` density times priors and Jacobian."""
    U = cache.eigvecs
    T, K = theta.shape
    k = params.skew
    c = k.gamma**2 / (1 + k.lam**2)
    kappa = k.gamma * k.lam / (1 + k.lam**2)
    innov = innovations(theta, params.rhoT) @ U
    skew_part = -k.b * k.delta * k.gamma * (np.ones(K) @ U) + kappa * (alpha @ U)

    def log_target(log_tau2: float, logit_rho: float) -> float:
        tau2 = math.exp(log_tau2)
        rho = special.expit(logit_rho)
        if not (0.0 < rho < 1.0) or not (0.0 < tau2 < math.inf):
            return -math.inf
        d = tau2 / (rho * cache.eigvals + 1.0 - rho)
        e = innov - np.sqrt(d) * skew_part
        ll = -0.5 * (T * np.sum(np.log(c * d)) + np.sum(e * e / (c * d)))
        # inverse-gamma prior on tau2 with log-Jacobian log tau2; uniform rhoS with logit Jacobian
        lp = -(priors.a_tau2 + 1) * log_tau2 - priors.b_tau2 / tau2 + log_tau2
        lp += math.log(rho) + math.log1p(-rho)
        return float(ll + lp)

    return log_target


def mh_update_spatial(theta, alpha, params: ModelParams, priors: Priors, cache: SpatialEigenCache, rng,
                      steps=(0.3, 0.5)):
    """Two coordinate-wise random-walk MH steps on ``log tau2`` then ``logit rhoS``.

    Returns ``(tau2, rhoS, (accepted_tau2, accepted_rhoS))``.
    """
    target = _spatial_log_target(theta, alpha, params, priors, cache)
    u = math.log(params.tau2)
    v = special.logit(params.rhoS) if params.rhoS > 0 else -30.0
    u, acc_u = mh_step(u, lambda x: target(x, v), steps[0], rng)
    v, acc_v = mh_step(v, lambda x: target(u, x), steps[1], rng)
    rho = float(special.expit(v))
    return math.exp(u), min(rho, 1.0 - 1e-12), (acc_u, acc_v)


def _lambda_log_target(theta, params: ModelParams, priors: Priors, operator: SpatialOperator):
    """Closure over ``lam`` of the alpha-marginal latent density times the normal prior."""
    T, K = theta.shape
    n = T * K
    r = operator.apply_omega_inv_sqrt(innovations(theta, params.rhoT))
    base = -0.5 * (n * _LOG2PI + T * operator.log_det_omega)

    def log_target(lam: float) -> float:
        k = skew_constants(lam)
        rl = r + k.b * k.delta * k.gamma
        val = base - n * math.log(k.gamma) - 0.5 * float(np.sum(rl * rl)) / k.gamma**2
        if lam != 0.0:
            val += float(np.sum(special.log_ndtr((lam / k.gamma) * rl))) + n * math.log(2.0)
        return val - 0.5 * lam * lam / priors.sigma2_lambda

    return log_target


def mh_update_lambda(theta, params: ModelParams, priors: Priors, operator: SpatialOperator, rng, step=0.5):
    """Random-walk MH for ``lam`` with ``alpha`` integrated out; refresh ``alpha`` right after."""
    return mh_step(params.lam, _lambda_log_target(theta, params, priors, operator), step, rng)


# ---------------------------------------------------------------------------
# chain orchestration


def initial_params(data: PanelData) -> tuple[ModelParams, np.ndarray]:
    Xf = data.X.reshape(-1, data.r)
    beta, *_ = np.linalg.lstsq(Xf, data.y.reshape(-1), rcond=None)
    resid = data.y - linear_predictor(data.X, beta)
    half = max(float(np.var(resid)) / 2.0, 1e-6)
    return ModelParams(beta, half, half, 0.5, 0.5, 0.0), resid


class _Adapter:
    """Robbins-Monro scaling of a log step size; frozen once ``active`` is cleared."""

    def __init__(self, step: float, target: float):
        self.log_step = math.log(step) if step > 0 else None
        self.target = target
        self.n = 0
        self.accepted = 0
        self.proposed = 0

    @property
    def step(self) -> float:
        return 0.0 if self.log_step is None else math.exp(self.log_step)

    def record(self, accepted: bool, adapting: bool):
        self.n += 1
        if adapting and self.log_step is not None:
            self.log_step += (float(accepted) - self.target) / self.n**0.6
        else:
            self.accepted += int(accepted)
            self.proposed += 1

    @property
    def rate(self) -> float:
        return self.accepted / self.proposed if self.proposed else float("nan")


def run_chain(data: PanelData, priors: Priors, config: ChainConfig, rng=None, init: ModelParams | None = None,
              cache: SpatialEigenCache | None = None, chain: int = 0) -> PosteriorDraws:
    """Run one Gibbs chain.

    Sweep order: theta, lambda (alpha integrated out), alpha, beta, sigma2,
    rho_T, (tau2, rho_S).  Blocks listed in ``config.fixed`` keep their initial
    values.  For ``model_kind="dcar"`` lambda is pinned at zero and the alpha
    and lambda blocks are skipped.
    """
    rng = np.random.default_rng(config.seed) if rng is None else rng
    cache = eigendecompose_laplacian(data.graph) if cache is None else cache
    y, X = data.y, data.X
    T, K = y.shape
    gaussian = config.model_kind == DCAR
    fixed = set(config.fixed)
    if gaussian:
        fixed |= {"lambda", "alpha"}

    start, resid = initial_params(data)
    params = start if init is None else init
    if gaussian and params.lam != 0.0:
        params = params.replace(lam=0.0)
    theta = resid.copy()
    alpha = np.full((T, K), params.skew.b * math.sqrt(1 + params.lam**2))
    op = make_spatial_operator(cache, params.tau2, params.rhoS)

    adapt_tau = _Adapter(config.step_log_tau2, config.target_accept)
    adapt_rho = _Adapter(config.step_logit_rhoS, config.target_accept)
    adapt_lam = _Adapter(config.step_lambda, config.target_accept)

    n_keep = config.n_kept
    r = data.r
    out = dict(
        iteration=np.empty(n_keep, dtype=int), beta=np.empty((n_keep, r)), sigma2=np.empty(n_keep),
        tau2=np.empty(n_keep), rhoS=np.empty(n_keep), rhoT=np.empty(n_keep), lam=np.empty(n_keep),
        theta=np.empty((n_keep, T, K)), alpha=np.empty((n_keep, T, K)),
    )
    timings = dict.fromkeys(BLOCKS, 0.0)
    j = 0
    for it in range(config.iterations):
        adapting = config.adapt and it < config.burnin
        try:
            t0 = time.perf_counter()
            if "theta" not in fixed:
                theta = ffbs_theta(y, X, alpha, params, op, rng)
            t1 = time.perf_counter()
            if "lambda" not in fixed:
                lam, acc = mh_update_lambda(theta, params, priors, op, rng, adapt_lam.step)
                adapt_lam.record(acc, adapting)
                params = params.replace(lam=lam)
            t2 = time.perf_counter()
            if "alpha" not in fixed:
                alpha = sample_alpha(theta, params, op, rng)
            t3 = time.perf_counter()
            if "beta" not in fixed:
                params = params.replace(beta=sample_beta(y, X, theta, params.sigma2, priors, rng))
            t4 = time.perf_counter()
            if "sigma2" not in fixed:
                params = params.replace(sigma2=sample_sigma2(y, X, theta, params.beta, priors, rng))
            t5 = time.perf_counter()
            if "rhoT" not in fixed:
                params = params.replace(rhoT=min(sample_rho_t(theta, alpha, params, op, rng), 1.0 - 1e-12))
            t6 = time.perf_counter()
            if "spatial" not in fixed:
                tau2, rhoS, (acc_t, acc_r) = mh_update_spatial(
                    theta, alpha, params, priors, cache, rng, (adapt_tau.step, adapt_rho.step))
                adapt_tau.record(acc_t, adapting)
                adapt_rho.record(acc_r, adapting)
                params = params.replace(tau2=tau2, rhoS=rhoS)
                op = make_spatial_operator(cache, params.tau2, params.rhoS)
            t7 = time.perf_counter()
        except (np.linalg.LinAlgError, FloatingPointError, NumericalError) as exc:
            raise NumericalError(f"chain {chain} failed: {exc}", iteration=it) from exc
        if not (np.all(np.isfinite(theta)) and np.all(np.isfinite(params.beta)) and math.isfinite(params.sigma2)):
            raise NumericalError(f"chain {chain} produced non-finite state", iteration=it)
        for name, dt in zip(BLOCKS, (t1 - t0, t2 - t1, t3 - t2, t4 - t3, t5 - t4, t6 - t5, t7 - t6)):
            timings[name] += dt
        if it >= config.burnin and (it - config.burnin) % config.thin == 0:
            out["iteration"][j] = it
            out["beta"][j] = params.beta
            out["sigma2"][j] = params.sigma2
            out["tau2"][j] = params.tau2
            out["rhoS"][j] = params.rhoS
            out["rhoT"][j] = params.rhoT
            out["lam"][j] = params.lam
            out["theta"][j] = theta
            out["alpha"][j] = alpha
            j += 1

    acceptance = {"tau2": adapt_tau.rate, "rhoS": adapt_rho.rate}
    if not gaussian:
        acceptance["lambda"] = adapt_lam.rate
    log.debug("chain %d done: acceptance %s", chain, acceptance)
    return PosteriorDraws(config.model_kind, cache=cache, acceptance=acceptance, timings=timings,
                          chain=chain, seed=config.seed, **out)


def run_chains(data: PanelData, priors: Priors, config: ChainConfig, n_chains: int = 1, threads: int = 1,
               init: ModelParams | None = None) -> list[PosteriorDraws]:
    """Independent chains with RNG streams spawned from ``config.seed`` by chain index."""
    cache = eigendecompose_laplacian(data.graph)
    streams = np.random.SeedSequence(config.seed).spawn(n_chains)

    def work(c):
        return run_chain(data, priors, config, np.random.default_rng(streams[c]), init=init, cache=cache, chain=c)

    if threads <= 1 or n_chains == 1:
        return [work(c) for c in range(n_chains)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(work, range(n_chains)))


# ---------------------------------------------------------------------------
# diagnostics


def autocorrelation(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    n = len(x)
    d = x - x.mean()
    m = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(d, m)
    acov = np.fft.irfft(f * np.conj(f), m)[:n] / n
    return acov / acov[0]


def effective_sample_size(trace) -> float:
    """Initial positive sequence estimate ``N / (-1 + 2 sum_k Gamma_k)``.

    ``Gamma_k`` are sums of adjacent autocorrelation pairs, truncated at the
    first nonpositive pair.  A constant trace has ESS 1.
    """
    x = np.asarray(trace, dtype=float)
    n = len(x)
    if n < 10:
        raise DataValidationError("effective_sample_size needs at least 10 draws")
    if np.ptp(x) == 0:
        return 1.0
    rho = autocorrelation(x)
    total = 0.0
    for k in range(0, n - 1, 2):
        pair = rho[k] + rho[k + 1]
        if pair <= 0:
            break
        total += pair
    tau = -1.0 + 2.0 * total
    return float(n / max(tau, 1e-12))
