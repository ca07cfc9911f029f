"""
PerfectLES — Nodal Basis and Mesh
=================================
Legendre-Gauss-Lobatto nodal basis (nodes, quadrature weights, Lagrange
differentiation and interpolation matrices) and the periodic Cartesian mesh
shared by the DNS and LES grids.

Field arrays throughout the package use the layout
``(var, ex, ey, ez, i, j, k)``: element indices first, then the tensor-product
node indices, so direction ``d`` maps to element axis ``d`` and node axis
``3 + d`` of a scalar field.

Usage:
    basis = NodalBasis.from_degree(5)
    mesh = CartesianMesh(4)
    x, y, z = mesh.node_coordinates(basis)
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Tuple

import numpy as np

from pl_errors import ConfigurationError, ConvergenceError

LGL_TOLERANCE = 1.0e-15
LGL_MAX_ITER = 100


# =============================================================================
# LGL NODES
# =============================================================================


def _legendre_table(x: np.ndarray, n: int) -> np.ndarray:
    """Columns P_0..P_n evaluated at x by the three-term recursion."""
    P = np.zeros((x.size, n + 1))
    P[:, 0] = 1.0
    if n >= 1:
        P[:, 1] = x
    for k in range(2, n + 1):
        P[:, k] = ((2 * k - 1) * x * P[:, k - 1] - (k - 1) * P[:, k - 2]) / k
    return P


def lgl_nodes_weights(N: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Legendre-Gauss-Lobatto nodes (roots of (1-x^2) P'_N) and weights.

    Newton iteration from the Chebyshev-Gauss-Lobatto points. Exact for
    polynomials of degree <= 2N-1.
    """
    if int(N) != N or N < 1:
        raise ConfigurationError(f"LGL degree must be an integer >= 1, got {N}")
    N = int(N)

    x = -np.cos(np.pi * np.arange(N + 1) / N)
    diff = np.inf
    for _ in range(LGL_MAX_ITER):
        P = _legendre_table(x, N)
        x_old = x
        x = x_old - (x_old * P[:, N] - P[:, N - 1]) / ((N + 1) * P[:, N])
        diff = np.max(np.abs(x - x_old))
        if diff <= LGL_TOLERANCE:
            break
    if not diff <= 10.0 * np.finfo(float).eps:
        raise ConvergenceError(f"LGL Newton iteration did not converge for N={N}", residual=float(diff))

    # symmetric by construction, pin endpoints
    x = 0.5 * (x - x[::-1])
    x[0], x[-1] = -1.0, 1.0
    P = _legendre_table(x, N)
    w = 2.0 / (N * (N + 1) * P[:, N] ** 2)
    w = 0.5 * (w + w[::-1])
    return x, w


# =============================================================================
# LAGRANGE OPERATORS
# =============================================================================


def barycentric_weights(nodes: np.ndarray) -> np.ndarray:
    nodes = np.asarray(nodes, dtype=float)
    delta = nodes[:, None] - nodes[None, :]
    np.fill_diagonal(delta, 1.0)
    if np.any(delta == 0.0):
        raise ConfigurationError("interpolation nodes must be distinct")
    return 1.0 / np.prod(delta, axis=1)


def lagrange_diff_matrix(nodes: np.ndarray) -> np.ndarray:
    """D[i, j] = l'_j(x_i) for the Lagrange polynomials on ``nodes``."""
    nodes = np.asarray(nodes, dtype=float)
    bw = barycentric_weights(nodes)
    delta = nodes[:, None] - nodes[None, :]
    np.fill_diagonal(delta, 1.0)
    D = (bw[None, :] / bw[:, None]) / delta
    np.fill_diagonal(D, 0.0)
    # negative-sum trick: rows annihilate constants to round-off
    np.fill_diagonal(D, -D.sum(axis=1))
    return D


def interp_matrix(src_nodes: np.ndarray, tgt_points: np.ndarray) -> np.ndarray:
    """Row i evaluates every Lagrange basis function of ``src_nodes`` at ``tgt_points[i]``."""
    src = np.asarray(src_nodes, dtype=float)
    tgt = np.atleast_1d(np.asarray(tgt_points, dtype=float))
    bw = barycentric_weights(src)

    delta = tgt[:, None] - src[None, :]
    hit = delta == 0.0
    safe = np.where(hit, 1.0, delta)
    terms = bw[None, :] / safe
    M = terms / terms.sum(axis=1, keepdims=True)

    rows = np.any(hit, axis=1)
    if np.any(rows):
        M[rows] = hit[rows].astype(float)
    return M


# =============================================================================
# BASIS AND MESH
# =============================================================================


@dataclass(frozen=True)
class NodalBasis:
    """LGL nodal basis of degree N (p = N + 1 points per direction)."""

    degree: int
    nodes: np.ndarray
    weights: np.ndarray
    diff_matrix: np.ndarray

    @classmethod
    def from_degree(cls, degree: int) -> "NodalBasis":
        return _cached_basis(int(degree))

    @property
    def n_nodes(self) -> int:
        return self.degree + 1

    @property
    def weights3d(self) -> np.ndarray:
        """Tensor-product weights, shape (p, p, p)."""
        w = self.weights
        return w[:, None, None] * w[None, :, None] * w[None, None, :]


@lru_cache(maxsize=None)
def _cached_basis(degree: int) -> NodalBasis:
    nodes, weights = lgl_nodes_weights(degree)
    D = lagrange_diff_matrix(nodes)
    for arr in (nodes, weights, D):
        arr.setflags(write=False)
    return NodalBasis(degree=degree, nodes=nodes, weights=weights, diff_matrix=D)


@dataclass(frozen=True)
class CartesianMesh:
    """Uniform periodic mesh of elements_per_dir^3 cubes on [0, L]^3."""

    elements_per_dir: int
    domain_length: float = 2.0 * math.pi

    def __post_init__(self):
        if int(self.elements_per_dir) != self.elements_per_dir or self.elements_per_dir < 1:
            raise ConfigurationError("elements_per_dir must be an integer >= 1")

    @property
    def periodic(self) -> bool:
        return True

    @property
    def h(self) -> float:
        return self.domain_length / self.elements_per_dir

    @property
    def n_elements(self) -> int:
        return self.elements_per_dir ** 3

    @property
    def volume(self) -> float:
        return self.domain_length ** 3

    def element_origins(self) -> np.ndarray:
        return np.arange(self.elements_per_dir) * self.h

    def node_coordinates_1d(self, basis: NodalBasis) -> np.ndarray:
        """Shape (K, p): physical coordinate of node i in element e along one axis."""
        return self.element_origins()[:, None] + 0.5 * self.h * (basis.nodes[None, :] + 1.0)

    def node_coordinates(self, basis: NodalBasis) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Physical x, y, z of every node, each shaped (K, K, K, p, p, p)."""
        K, p = self.elements_per_dir, basis.n_nodes
        c = self.node_coordinates_1d(basis)
        shape = (K, K, K, p, p, p)
        x = np.broadcast_to(c[:, None, None, :, None, None], shape)
        y = np.broadcast_to(c[None, :, None, None, :, None], shape)
        z = np.broadcast_to(c[None, None, :, None, None, :], shape)
        return x.copy(), y.copy(), z.copy()

    def quadrature_weights(self, basis: NodalBasis) -> np.ndarray:
        """Volume quadrature weights per node, shape (p, p, p), identical for all elements."""
        return basis.weights3d * (0.5 * self.h) ** 3

    def integrate(self, values: np.ndarray, basis: NodalBasis) -> np.ndarray:
        """Domain integral of nodal data shaped (..., K, K, K, p, p, p)."""
        wq = self.quadrature_weights(basis)
        return np.einsum("...abcijk,ijk->...", values, wq)
