"""Areal graphs and Leroux-precision linear algebra via the Laplacian eigenbasis.

The Leroux precision is ``Q = rho_S * (diag(W 1) - W) + (1 - rho_S) * I`` and the
spatial covariance is ``Omega = tau2 * Q^{-1}``.  With ``L = U diag(e) U'`` the
graph Laplacian, every function of ``Omega`` is diagonal in ``U``, so one
eigendecomposition per graph serves all ``(tau2, rho_S)`` values.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataValidationError, DomainError, NumericalError


@dataclass(frozen=True)
class AdjacencyGraph:
    """Symmetric binary adjacency matrix of ``K`` areas."""

    W: np.ndarray
    degrees: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        W = np.array(self.W, dtype=float)
        if W.ndim != 2 or W.shape[0] != W.shape[1] or W.shape[0] < 1:
            raise DataValidationError(f"adjacency must be a non-empty square matrix, got shape {W.shape}")
        if not np.all((W == 0) | (W == 1)):
            raise DataValidationError("adjacency entries must be 0 or 1")
        if np.any(np.diag(W) != 0):
            raise DataValidationError("adjacency diagonal must be zero")
        if not np.array_equal(W, W.T):
            bad = np.argwhere(W != W.T)[0]
            raise DataValidationError(f"adjacency is asymmetric at ({bad[0]}, {bad[1]})")
        W.setflags(write=False)
        deg = W.sum(axis=1)
        deg.setflags(write=False)
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "degrees", deg)

    @property
    def K(self) -> int:
        return self.W.shape[0]

    @property
    def laplacian(self) -> np.ndarray:
        return np.diag(self.degrees) - self.W

    def edges(self) -> list[tuple[int, int]]:
        i, j = np.nonzero(np.triu(self.W))
        return list(zip(i.tolist(), j.tolist()))

    @classmethod
    def from_edges(cls, edges, K: int) -> "AdjacencyGraph":
        W = np.zeros((K, K))
        for i, j in edges:
            if not (0 <= i < K and 0 <= j < K):
                raise DataValidationError(f"edge ({i}, {j}) out of range for K={K}")
            if i == j:
                raise DataValidationError(f"self-loop at node {i}")
            W[i, j] = W[j, i] = 1.0
        return cls(W)


def build_grid_graph(rows: int, cols: int) -> AdjacencyGraph:
    """Rook adjacency on a ``rows x cols`` lattice, nodes in row-major order."""
    if rows < 1 or cols < 1:
        raise DomainError("grid dimensions must be positive")
    K = rows * cols
    W = np.zeros((K, K))
    for r in range(rows):
        for c in range(cols):
            k = r * cols + c
            if c + 1 < cols:
                W[k, k + 1] = W[k + 1, k] = 1.0
            if r + 1 < rows:
                W[k, k + cols] = W[k + cols, k] = 1.0
    return AdjacencyGraph(W)


@dataclass(frozen=True)
class SpatialEigenCache:
    """Eigenpairs of the graph Laplacian, eigenvalues ascending."""

    eigvals: np.ndarray
    eigvecs: np.ndarray

    @property
    def K(self) -> int:
        return self.eigvals.shape[0]


def eigendecompose_laplacian(graph: AdjacencyGraph) -> SpatialEigenCache:
    try:
        vals, vecs = np.linalg.eigh(graph.laplacian)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"Laplacian eigendecomposition failed: {exc}") from exc
    # Laplacian is PSD; clip roundoff below zero.
    vals = np.where(np.abs(vals) < 1e-12, 0.0, vals)
    vals.setflags(write=False)
    vecs.setflags(write=False)
    return SpatialEigenCache(vals, vecs)


class SpatialOperator:
    """Actions of ``Omega``, its symmetric square root, and their inverses.

    All ``apply_*`` methods act on the last axis, so a ``(T, K)`` array is
    transformed row by row.
    """

    def __init__(self, cache: SpatialEigenCache, tau2: float, rhoS: float):
        if not tau2 > 0:
            raise DomainError(f"tau2 must be positive, got {tau2}")
        if not 0 <= rhoS <= 1:
            raise DomainError(f"rhoS must lie in [0, 1), got {rhoS}")
        q = rhoS * cache.eigvals + (1.0 - rhoS)
        if np.any(q <= 0):
            raise DomainError("Leroux precision is singular (rhoS = 1 with a zero Laplacian eigenvalue)")
        self.cache = cache
        self.tau2 = float(tau2)
        self.rhoS = float(rhoS)
        self.q_eigvals = q
        # eigenvalues of Omega
        self.omega_eigvals = self.tau2 / q

    @property
    def K(self) -> int:
        return self.cache.K

    @property
    def dim(self) -> int:
        return self.cache.K

    def _apply(self, x, scale):
        U = self.cache.eigvecs
        return ((np.asarray(x, dtype=float) @ U) * scale) @ U.T

    def apply_omega(self, x):
        return self._apply(x, self.omega_eigvals)

    def apply_omega_inv(self, x):
        return self._apply(x, 1.0 / self.omega_eigvals)

    def apply_omega_sqrt(self, x):
        return self._apply(x, np.sqrt(self.omega_eigvals))

    def apply_omega_inv_sqrt(self, x):
        return self._apply(x, 1.0 / np.sqrt(self.omega_eigvals))

    # FS-CSN covariance protocol (see skew.DenseCovariance)
    apply_sqrt = apply_omega_sqrt
    apply_inv_sqrt = apply_omega_inv_sqrt

    @property
    def log_det_omega(self) -> float:
        return float(self.K * np.log(self.tau2) - np.sum(np.log(self.q_eigvals)))

    log_det = log_det_omega

    def _dense(self, scale):
        U = self.cache.eigvecs
        M = (U * scale) @ U.T
        return 0.5 * (M + M.T)

    def omega(self):
        return self._dense(self.omega_eigvals)

    def omega_inv(self):
        return self._dense(1.0 / self.omega_eigvals)

    def omega_sqrt(self):
        return self._dense(np.sqrt(self.omega_eigvals))

    def omega_inv_sqrt(self):
        return self._dense(1.0 / np.sqrt(self.omega_eigvals))


def make_spatial_operator(cache: SpatialEigenCache, tau2: float, rhoS: float) -> SpatialOperator:
    return SpatialOperator(cache, tau2, rhoS)
