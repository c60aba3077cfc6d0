"""Truncated normals, the flexible-subclass closed skew-normal, and Mardia moments.

An FS-CSN vector with location ``mu``, covariance ``Omega``, skewness ``lam`` and
square root ``S`` (``S S' = Omega``) has the additive form::

    z = mu - b*delta*gamma * S 1 + psi + gamma*lam/(1+lam^2) * S alpha
    psi   ~ N(0, gamma^2/(1+lam^2) * Omega)
    alpha ~ N(0, (1+lam^2) I) truncated below at 0

so its mean is ``mu`` and its covariance is ``Omega`` for every ``lam``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate, special, stats

from .errors import DomainError

B = math.sqrt(2.0 / math.pi)
_LOG2 = math.log(2.0)
_LOG2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class SkewConstants:
    lam: float
    b: float
    delta: float
    gamma: float


def skew_constants(lam: float) -> SkewConstants:
    lam = float(lam)
    if not math.isfinite(lam):
        raise DomainError(f"lambda must be finite, got {lam}")
    delta = lam / math.sqrt(1.0 + lam * lam)
    gamma = 1.0 / math.sqrt(1.0 - B * B * delta * delta)
    return SkewConstants(lam, B, delta, gamma)


# ---------------------------------------------------------------------------
# truncated normal


_TAIL_SWITCH = 5.0


def _std_tn_lower(a, rng):
    """Standard normal draws conditioned on ``Z >= a`` (``a`` an array)."""
    a = np.asarray(a, dtype=float)
    out = np.empty(a.shape)
    easy = a < _TAIL_SWITCH
    if np.any(easy):
        ae = a[easy]
        u = rng.random(ae.shape)
        # -Z is truncated above at -a; invert its CDF on the small side
        p = u * special.ndtr(-ae)
        z = -special.ndtri(p)
        # u == 0 maps to +inf; nudge to the lower bound instead
        out[easy] = np.where(np.isfinite(z), np.maximum(z, ae), ae)
    hard = ~easy
    if np.any(hard):
        out[hard] = _robert_tail(a[hard], rng)
    return out


def _robert_tail(a, rng):
    """Exponential-proposal rejection sampler for ``Z >= a`` with large ``a``."""
    rate = 0.5 * (a + np.sqrt(a * a + 4.0))
    out = np.empty(a.shape)
    todo = np.arange(a.size)
    while todo.size:
        z = a[todo] + rng.exponential(1.0, todo.size) / rate[todo]
        accept = rng.random(todo.size) <= np.exp(-0.5 * (z - rate[todo]) ** 2)
        out[todo[accept]] = z[accept]
        todo = todo[~accept]
    return out


def sample_truncated_normal_lower0(mean, sd, rng, size=None):
    """Draw from ``N(mean, sd^2)`` conditioned on being nonnegative.

    ``mean`` and ``sd`` broadcast; ``size`` overrides the broadcast shape.
    Uses inverse-CDF sampling unless the bound sits more than five standard
    deviations above the mean, where an exponential rejection sampler takes over.
    """
    mean = np.asarray(mean, dtype=float)
    sd = np.asarray(sd, dtype=float)
    if np.any(sd <= 0):
        raise DomainError("sd must be positive")
    shape = np.broadcast_shapes(mean.shape, sd.shape) if size is None else size
    mean = np.broadcast_to(mean, shape)
    sd = np.broadcast_to(sd, shape)
    z = _std_tn_lower(-mean / sd, rng)
    x = np.maximum(mean + sd * z, 0.0)
    return x if x.ndim else float(x)


def sample_truncated_normal_interval(mean: float, sd: float, lo: float, hi: float, rng) -> float:
    """Scalar draw from ``N(mean, sd^2)`` restricted to ``[lo, hi]``."""
    a = (lo - mean) / sd
    b = (hi - mean) / sd
    u = rng.random()
    if a > 0:
        # both bounds in the upper tail: work with survival probabilities
        sa, sb = special.ndtr(-a), special.ndtr(-b)
        mass = sa - sb
        if mass <= 0:
            return lo
        z = -special.ndtri(sb + u * mass)
    else:
        ca, cb = special.ndtr(a), special.ndtr(b)
        mass = cb - ca
        if mass <= 0:
            return hi
        z = special.ndtri(ca + u * mass)
    return float(min(max(mean + sd * z, lo), hi))


# ---------------------------------------------------------------------------
# FS-CSN


class DenseCovariance:
    """Explicit covariance matrix together with a chosen square root ``S``.

    ``root="symmetric"`` uses the spectral square root, ``root="cholesky"`` the
    lower Cholesky factor.  A precomputed factor can be supplied with
    :meth:`from_root`.
    """

    def __init__(self, omega, root: str = "symmetric"):
        omega = np.array(omega, dtype=float)
        if omega.ndim != 2 or omega.shape[0] != omega.shape[1]:
            raise DomainError("covariance must be square")
        if root == "symmetric":
            vals, vecs = np.linalg.eigh(0.5 * (omega + omega.T))
            if np.any(vals <= 0):
                raise DomainError("covariance is not positive definite")
            S = (vecs * np.sqrt(vals)) @ vecs.T
        elif root == "cholesky":
            try:
                S = np.linalg.cholesky(omega)
            except np.linalg.LinAlgError as exc:
                raise DomainError("covariance is not positive definite") from exc
        else:
            raise ValueError(f"unknown root {root!r}")
        self._set(omega, S)

    @classmethod
    def from_root(cls, S, omega=None):
        obj = cls.__new__(cls)
        S = np.array(S, dtype=float)
        obj._set(S @ S.T if omega is None else np.array(omega, dtype=float), S)
        return obj

    def _set(self, omega, S):
        self.omega = omega
        self.sqrt = S
        self.inv_sqrt = np.linalg.inv(S)
        sign, logdet = np.linalg.slogdet(S)
        if sign == 0:
            raise DomainError("square root is singular")
        self.log_det = 2.0 * logdet

    @property
    def dim(self) -> int:
        return self.omega.shape[0]

    def apply_sqrt(self, x):
        return np.asarray(x, dtype=float) @ self.sqrt.T

    def apply_inv_sqrt(self, x):
        return np.asarray(x, dtype=float) @ self.inv_sqrt.T


@dataclass(frozen=True)
class FsCsnSpec:
    """``FS-CSN_p(mu, Omega, lam, S)``; ``cov`` supplies ``S`` and ``S^{-1}``."""

    mu: np.ndarray
    cov: object
    skew: SkewConstants

    @property
    def dim(self) -> int:
        return self.cov.dim

    def shifted_location(self) -> np.ndarray:
        """Location ``mu - b delta gamma S 1`` of the underlying CSN."""
        k = self.skew
        return np.asarray(self.mu, dtype=float) - k.b * k.delta * k.gamma * self.cov.apply_sqrt(np.ones(self.dim))


def fscsn_spec(mu, cov, lam) -> FsCsnSpec:
    skew = lam if isinstance(lam, SkewConstants) else skew_constants(lam)
    return FsCsnSpec(np.asarray(mu, dtype=float), cov, skew)


def fscsn_sample(spec: FsCsnSpec, rng, size=None) -> np.ndarray:
    """Exact draws through the additive representation; shape ``size + (p,)``."""
    k = spec.skew
    p = spec.dim
    shape = (() if size is None else tuple(np.atleast_1d(size))) + (p,)
    s2 = 1.0 + k.lam * k.lam
    eps = rng.standard_normal(shape)
    alpha = np.sqrt(s2) * np.abs(rng.standard_normal(shape))
    inner = (k.gamma / math.sqrt(s2)) * eps + (k.gamma * k.lam / s2) * alpha
    return spec.shifted_location() + spec.cov.apply_sqrt(inner)


def fscsn_logpdf(z, spec: FsCsnSpec):
    """Log-density of ``FS-CSN_p``; ``z`` may carry leading batch axes.

    With ``xi`` the shifted location and ``r = S^{-1}(z - xi)``::

        log phi_p(z; xi, gamma^2 Omega) + sum_i log Phi(lam/gamma * r_i) + p log 2

    The CSN normalizer is exactly ``2^{-p}`` because ``D (gamma^2 Omega) D' =
    lam^2 I`` for ``D = (lam/gamma) S^{-1}``.
    """
    k = spec.skew
    p = spec.dim
    r = spec.cov.apply_inv_sqrt(np.asarray(z, dtype=float) - spec.shifted_location())
    quad = np.sum(r * r, axis=-1) / (k.gamma * k.gamma)
    gauss = -0.5 * (p * _LOG2PI + p * math.log(k.gamma * k.gamma) + spec.cov.log_det + quad)
    if k.lam == 0.0:
        return gauss
    skew_term = np.sum(special.log_ndtr((k.lam / k.gamma) * r), axis=-1) + p * _LOG2
    return gauss + skew_term


# ---------------------------------------------------------------------------
# general CSN (test oracle, q <= 2)


@dataclass(frozen=True)
class CsnParams:
    mu: np.ndarray
    Sigma: np.ndarray
    D: np.ndarray
    nu: np.ndarray
    Delta: np.ndarray

    @property
    def p(self) -> int:
        return len(self.mu)

    @property
    def q(self) -> int:
        return len(self.nu)


def bivariate_normal_cdf(h: float, k: float, rho: float) -> float:
    """``P(X <= h, Y <= k)`` for standard bivariate normal with correlation ``rho``.

    Plackett's identity: the derivative in ``rho`` is the bivariate density, so
    the CDF is the independent product plus a one-dimensional integral.
    """
    if rho == 0.0:
        return float(special.ndtr(h) * special.ndtr(k))

    def integrand(r):
        s = 1.0 - r * r
        return math.exp(-(h * h - 2.0 * r * h * k + k * k) / (2.0 * s)) / math.sqrt(s)

    val, _ = integrate.quad(integrand, 0.0, rho, epsabs=1e-15, epsrel=1e-13, limit=200)
    return float(special.ndtr(h) * special.ndtr(k) + val / (2.0 * math.pi))


def _log_normal_cdf(x, mean, cov) -> float:
    x = np.atleast_1d(np.asarray(x, dtype=float)) - np.atleast_1d(mean)
    cov = np.atleast_2d(cov)
    if x.size == 1:
        return float(special.log_ndtr(x[0] / math.sqrt(cov[0, 0])))
    if x.size == 2:
        s = np.sqrt(np.diag(cov))
        rho = cov[0, 1] / (s[0] * s[1])
        return math.log(bivariate_normal_cdf(x[0] / s[0], x[1] / s[1], float(rho)))
    raise DomainError(f"normal CDF of dimension {x.size} is not supported (q <= 2)")


def csn_logpdf_oracle(z, params: CsnParams) -> float:
    """``log[phi_p(z; mu, Sigma) Phi_q(D(z-mu); nu, Delta) / Phi_q(0; nu, Delta + D Sigma D')]``."""
    if params.q > 2:
        raise DomainError(f"csn_logpdf_oracle supports q <= 2, got q={params.q}")
    z = np.asarray(z, dtype=float)
    D = np.atleast_2d(params.D)
    Sigma = np.atleast_2d(params.Sigma)
    gauss = stats.multivariate_normal(params.mu, Sigma).logpdf(z)
    num = _log_normal_cdf(D @ (z - params.mu), params.nu, params.Delta)
    den = _log_normal_cdf(np.zeros(params.q), params.nu, np.atleast_2d(params.Delta) + D @ Sigma @ D.T)
    return float(gauss + num - den)


def fscsn_as_csn(spec: FsCsnSpec) -> CsnParams:
    """CSN parameters of an FS-CSN parameter set with a dense covariance."""
    k = spec.skew
    p = spec.dim
    return CsnParams(
        mu=spec.shifted_location(),
        Sigma=k.gamma**2 * spec.cov.omega,
        D=(k.lam / k.gamma) * spec.cov.inv_sqrt,
        nu=np.zeros(p),
        Delta=np.eye(p),
    )


# ---------------------------------------------------------------------------
# Mardia moments


def mardia_closed_form(p: int, lam: float) -> tuple[float, float]:
    """Population Mardia skewness and kurtosis of ``FS-CSN_p`` (any location/covariance)."""
    k = skew_constants(lam)
    b2 = k.b**2
    dg = k.delta * k.gamma
    ms = p * b2 * (2 * b2 - 1) ** 2 * dg**6
    mk = p * (p + 2 + 2 * b2 * (2 - 3 * b2) * dg**4)
    return ms, mk


def mardia_limit(p: int) -> tuple[float, float]:
    """Limits of :func:`mardia_closed_form` as ``|lam| -> inf`` (independent half-normals)."""
    b2 = B * B
    ms = p * (B * (2 * b2 - 1) / (1 - b2) ** 1.5) ** 2
    mk = p * (p + 2 + 2 * b2 * (2 - 3 * b2) / (1 - b2) ** 2)
    return ms, mk


def mardia_empirical(samples) -> tuple[float, float]:
    """Sample Mardia skewness ``N^-2 sum_ij (d_i'S^-1 d_j)^3`` and kurtosis ``N^-1 sum_i (d_i'S^-1 d_i)^2``.

    ``S`` is the biased covariance.  The double sum is evaluated as the squared
    Frobenius norm of the third-moment tensor of whitened data, O(N p^3).
    """
    x = np.asarray(samples, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n, p = x.shape
    if n <= p:
        raise DomainError("need more samples than dimensions")
    d = x - x.mean(axis=0)
    S = d.T @ d / n
    try:
        L = np.linalg.cholesky(S)
    except np.linalg.LinAlgError as exc:
        raise DomainError("sample covariance is singular") from exc
    a = np.linalg.solve(L, d.T).T
    m3 = np.einsum("ni,nj,nk->ijk", a, a, a, optimize=True) / n
    ms = float(np.sum(m3 * m3))
    mk = float(np.mean(np.sum(a * a, axis=1) ** 2))
    return ms, mk
