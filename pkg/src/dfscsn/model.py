"""Dynamic FS-CSN spatio-temporal model and its AR(1) form.

Latent field: ``theta_t = rho_T theta_{t-1} + w_t`` with ``theta_0 = 0`` and
``w_t ~ FS-CSN_K(0, Omega, lam, Omega^s)``.  Observations:
``y_t = X_t beta + theta_t + v_t``, ``v_t ~ N(0, sigma2 I)``.  Stacking over time
gives ``FS-CSN_TK(0, R kron Omega, lam, L kron Omega^s)`` with ``L`` lower
triangular, ``L[t1, t2] = rho_T^(t1 - t2)``.  Setting ``lam = 0`` recovers the
Gaussian dynamic CAR model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DataValidationError, DomainError
from .skew import DenseCovariance, SkewConstants, fscsn_logpdf, fscsn_spec, skew_constants
from .spatial import AdjacencyGraph, SpatialOperator, eigendecompose_laplacian, make_spatial_operator

DCAR = "dcar"
DFSCSN = "dfscsn"
MODEL_KINDS = (DFSCSN, DCAR)

DENSE_CAP = 200


@dataclass(frozen=True)
class ModelParams:
    beta: np.ndarray
    sigma2: float
    tau2: float
    rhoS: float
    rhoT: float
    lam: float = 0.0
    skew: SkewConstants = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "beta", np.atleast_1d(np.asarray(self.beta, dtype=float)))
        if not self.sigma2 > 0:
            raise DomainError(f"sigma2 must be positive, got {self.sigma2}")
        if not self.tau2 > 0:
            raise DomainError(f"tau2 must be positive, got {self.tau2}")
        if not 0 <= self.rhoS < 1:
            raise DomainError(f"rhoS must lie in [0, 1), got {self.rhoS}")
        if not 0 <= self.rhoT < 1:
            raise DomainError(f"rhoT must lie in [0, 1), got {self.rhoT}")
        object.__setattr__(self, "skew", skew_constants(self.lam))

    def replace(self, **changes) -> "ModelParams":
        return replace(self, **changes)

    def as_dict(self) -> dict:
        return {
            "beta": self.beta.tolist(),
            "sigma2": self.sigma2,
            "tau2": self.tau2,
            "rhoS": self.rhoS,
            "rhoT": self.rhoT,
            "lambda": self.lam,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelParams":
        return cls(
            beta=d["beta"],
            sigma2=d["sigma2"],
            tau2=d["tau2"],
            rhoS=d["rhoS"],
            rhoT=d["rhoT"],
            lam=d.get("lambda", d.get("lam", 0.0)),
        )


@dataclass(frozen=True)
class PanelData:
    """Observations ``y`` (T, K), features ``X`` (T, K, r) and the areal graph."""

    y: np.ndarray
    X: np.ndarray
    graph: AdjacencyGraph

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        X = np.asarray(self.X, dtype=float)
        if y.ndim != 2:
            raise DataValidationError(f"y must be (T, K), got shape {y.shape}")
        if X.ndim != 3 or X.shape[:2] != y.shape:
            raise DataValidationError(f"X must be (T, K, r) matching y {y.shape}, got {X.shape}")
        if y.shape[1] != self.graph.K:
            raise DataValidationError(f"y has {y.shape[1]} areas but the graph has {self.graph.K}")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(X))):
            raise DataValidationError("y and X must be finite")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)

    @property
    def T(self) -> int:
        return self.y.shape[0]

    @property
    def K(self) -> int:
        return self.y.shape[1]

    @property
    def r(self) -> int:
        return self.X.shape[2]

    def split(self, T_train: int) -> tuple["PanelData", "PanelData"]:
        """Split along time into training ``[0, T_train)`` and the remaining future block."""
        if not 0 < T_train < self.T:
            raise DataValidationError(f"cannot split T={self.T} at {T_train}")
        return (
            PanelData(self.y[:T_train], self.X[:T_train], self.graph),
            PanelData(self.y[T_train:], self.X[T_train:], self.graph),
        )


@dataclass
class LatentState:
    theta: np.ndarray
    alpha: np.ndarray


def temporal_covariance(rhoT: float, T: int) -> np.ndarray:
    """``R`` with ``R[t,t] = sum_{i<=t} rho^(2(i-1))`` and ``R[t1,t2] = rho^(t2-t1) R[t1,t1]`` for ``t1 < t2``."""
    diag = np.cumsum(rhoT ** (2.0 * np.arange(T)))
    R = np.empty((T, T))
    for t1 in range(T):
        for t2 in range(t1, T):
            R[t1, t2] = R[t2, t1] = rhoT ** (t2 - t1) * diag[t1]
    return R


def temporal_factor(rhoT: float, T: int) -> np.ndarray:
    """Lower-triangular ``L`` with ``L[t1, t2] = rho^(t1 - t2)``, so ``L L' = R``."""
    idx = np.arange(T)
    lag = idx[:, None] - idx[None, :]
    return np.where(lag >= 0, float(rhoT) ** np.maximum(lag, 0), 0.0)


def lagged(theta: np.ndarray) -> np.ndarray:
    """``theta_{t-1}`` for each row, with ``theta_0 = 0``."""
    prev = np.zeros_like(theta)
    prev[1:] = theta[:-1]
    return prev


def innovations(theta: np.ndarray, rhoT: float) -> np.ndarray:
    return theta - rhoT * lagged(theta)


def linear_predictor(X: np.ndarray, beta: np.ndarray) -> np.ndarray:
    return np.einsum("tkr,r->tk", X, beta)


def simulate(params: ModelParams, X, graph: AdjacencyGraph, T: int, rng, cache=None):
    """Forward draw ``(LatentState, y)`` through the AR recursion.

    The recorded ``alpha`` is the truncated-normal part of each innovation on the
    scale used by the Gibbs sampler (``N(0, 1+lam^2)`` truncated at zero).
    """
    X = np.asarray(X, dtype=float)
    if X.shape[:2] != (T, graph.K):
        raise DataValidationError(f"X must have shape ({T}, {graph.K}, r), got {X.shape}")
    cache = eigendecompose_laplacian(graph) if cache is None else cache
    op = make_spatial_operator(cache, params.tau2, params.rhoS)
    k = params.skew
    K = graph.K
    s2 = 1.0 + k.lam**2
    alpha = math.sqrt(s2) * np.abs(rng.standard_normal((T, K)))
    eps = rng.standard_normal((T, K))
    inner = -k.b * k.delta * k.gamma + (k.gamma / math.sqrt(s2)) * eps + (k.gamma * k.lam / s2) * alpha
    w = op.apply_omega_sqrt(inner)
    theta = np.empty((T, K))
    prev = np.zeros(K)
    for t in range(T):
        prev = params.rhoT * prev + w[t]
        theta[t] = prev
    y = linear_predictor(X, params.beta) + theta + math.sqrt(params.sigma2) * rng.standard_normal((T, K))
    return LatentState(theta, alpha), y


def latent_logpdf_ar(theta, params: ModelParams, operator: SpatialOperator) -> float:
    """Sum over time of FS-CSN log-densities of the innovations ``theta_t - rho_T theta_{t-1}``."""
    theta = np.asarray(theta, dtype=float)
    spec = fscsn_spec(np.zeros(operator.dim), operator, params.skew)
    return float(np.sum(fscsn_logpdf(innovations(theta, params.rhoT), spec)))


def latent_logpdf_kron(theta, params: ModelParams, operator: SpatialOperator) -> float:
    """Joint FS-CSN log-density with dense ``R kron Omega`` and root ``L kron Omega^s``."""
    theta = np.asarray(theta, dtype=float)
    T, K = theta.shape
    if T * K > DENSE_CAP:
        raise DomainError(f"dense Kronecker form limited to T*K <= {DENSE_CAP}, got {T * K}")
    R = temporal_covariance(params.rhoT, T)
    L = temporal_factor(params.rhoT, T)
    cov = DenseCovariance.from_root(np.kron(L, operator.omega_sqrt()), omega=np.kron(R, operator.omega()))
    spec = fscsn_spec(np.zeros(T * K), cov, params.skew)
    return float(fscsn_logpdf(theta.reshape(-1), spec))


def observation_loglik(y, X, theta, params: ModelParams) -> float:
    resid = np.asarray(y, dtype=float) - linear_predictor(np.asarray(X, dtype=float), params.beta) - theta
    n = resid.size
    return float(-0.5 * n * math.log(2 * math.pi * params.sigma2) - 0.5 * np.sum(resid**2) / params.sigma2)


def default_design(T: int, K: int, rng) -> np.ndarray:
    """Intercept plus one standard-normal covariate, shape ``(T, K, 2)``."""
    X = np.ones((T, K, 2))
    X[:, :, 1] = rng.standard_normal((T, K))
    return X
