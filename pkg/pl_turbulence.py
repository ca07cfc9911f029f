"""
PerfectLES — Decaying Turbulence Initial Conditions
===================================================
Random divergence-free velocity fields following the Chasnov model spectrum,
built mode by mode in Fourier space (Rogallo's two-angle construction), and the
compressible initial state: unit density, incompressible pressure fluctuation
from a spectral Poisson solve, and a mean pressure that fixes the peak Mach
number.

Usage:
    spec = SpectrumSpec()
    vel = rogallo_field(spec, InitConfig(seed=7, spectral_resolution=32), mesh, basis)
    state = initialize_state(vel, InitConfig(), gas)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy import integrate

from pl_basis import CartesianMesh, NodalBasis
from pl_dgsem import SolutionField
from pl_errors import ConfigurationError, ConvergenceError
from pl_fluxes import GasModel, conservative_from_primitive
from pl_logging import get_logger

logger = get_logger("turbulence")


# =============================================================================
# SPECTRUM
# =============================================================================


@dataclass(frozen=True)
class SpectrumSpec:
    s: int = 4
    u0_sq: float = 5.0
    kp: float = 4.0
    a_s: Optional[float] = None

    def __post_init__(self):
        if self.s < 1 or not self.u0_sq > 0.0 or not self.kp > 0.0:
            raise ConfigurationError("spectrum requires s >= 1, u0_sq > 0 and kp > 0")
        if self.a_s is not None and not self.a_s > 0.0:
            raise ConfigurationError("a_s must be positive")

    def normalized(self) -> "SpectrumSpec":
        if self.a_s is not None:
            return self
        return replace(self, a_s=spectrum_normalization(self))


@dataclass(frozen=True)
class InitConfig:
    seed: int = 1
    mach: float = 0.1
    spectral_resolution: int = 64

    def __post_init__(self):
        if not self.mach > 0.0:
            raise ConfigurationError("mach must be positive")
        if self.spectral_resolution < 2 or self.spectral_resolution % 2:
            raise ConfigurationError("spectral_resolution must be even and >= 2")


def chasnov_energy(k, spec: SpectrumSpec):
    """E(k) = 1/2 a_s u0^2 / kp (k/kp)^s exp(-s/2 (k/kp)^2)."""
    a_s = spec.a_s if spec.a_s is not None else spectrum_normalization(spec)
    x = np.asarray(k, dtype=float) / spec.kp
    value = 0.5 * a_s * spec.u0_sq / spec.kp * x ** spec.s * np.exp(-0.5 * spec.s * x * x)
    return float(value) if np.ndim(value) == 0 else value


def spectrum_normalization(spec: SpectrumSpec) -> float:
    """a_s such that the integral of E(k) over [0, inf) equals 3/2 u0^2."""
    s = spec.s
    moment, abserr, info = integrate.quad(
        lambda x: x ** s * math.exp(-0.5 * s * x * x), 0.0, np.inf,
        epsabs=0.0, epsrel=1e-13, limit=200, full_output=True,
    )[:3]
    if not moment > 0.0 or abserr > 1e-10 * moment:
        raise ConvergenceError("spectrum normalization quadrature did not converge", error=abserr)
    return 3.0 / moment


# =============================================================================
# FOURIER HELPERS
# =============================================================================


def wavenumbers(M: int) -> np.ndarray:
    """Integer wavenumbers of an M-point periodic grid on [0, 2*pi)."""
    return np.fft.fftfreq(M, d=1.0 / M)


def evaluate_fourier(coeffs: np.ndarray, mesh: CartesianMesh, basis: NodalBasis) -> np.ndarray:
    """
    Evaluate a real trigonometric series at the DG nodes.

    coeffs has shape (..., M, M, M) in numpy FFT ordering, u(x) = sum c_k e^{ik.x},
    on a box of length 2*pi. Returns (..., K, K, K, p, p, p).
    """
    M = coeffs.shape[-1]
    K, p = mesh.elements_per_dir, basis.n_nodes
    scale = 2.0 * math.pi / mesh.domain_length
    x = mesh.node_coordinates_1d(basis).reshape(-1) * scale
    E = np.exp(1j * np.outer(x, wavenumbers(M)))  # (K*p, M)
    vals = np.einsum("...abc,xa->...xbc", coeffs, E)
    vals = np.einsum("...xbc,yb->...xyc", vals, E)
    vals = np.einsum("...xyc,zc->...xyz", vals, E).real
    lead = vals.shape[:-3]
    vals = vals.reshape(lead + (K, p, K, p, K, p))
    n = len(lead)
    order = tuple(range(n)) + (n, n + 2, n + 4, n + 1, n + 3, n + 5)
    return np.ascontiguousarray(vals.transpose(order))


@dataclass
class SpectralVelocity:
    """Velocity as Fourier coefficients plus its values at the DG nodes."""

    coeffs: np.ndarray  # (3, M, M, M)
    nodal: np.ndarray  # (3, K, K, K, p, p, p)
    mesh: CartesianMesh
    basis: NodalBasis

    @property
    def resolution(self) -> int:
        return self.coeffs.shape[-1]

    @classmethod
    def from_grid(cls, grid_velocity: np.ndarray, mesh: CartesianMesh, basis: NodalBasis) -> "SpectralVelocity":
        """Build from velocity samples on a uniform M^3 grid (3, M, M, M)."""
        M = grid_velocity.shape[-1]
        coeffs = np.fft.fftn(grid_velocity, axes=(1, 2, 3)) / M ** 3
        return cls(coeffs, evaluate_fourier(coeffs, mesh, basis), mesh, basis)

    def divergence_residual(self) -> float:
        k = wavenumbers(self.resolution)
        div = (k[:, None, None] * self.coeffs[0] + k[None, :, None] * self.coeffs[1]
               + k[None, None, :] * self.coeffs[2])
        return float(np.max(np.abs(div)))


# =============================================================================
# ROGALLO FIELD
# =============================================================================


def rogallo_field(
    spec: SpectrumSpec, config: InitConfig, mesh: CartesianMesh, basis: NodalBasis
) -> SpectralVelocity:
    """Divergence-free random velocity whose integer-shell energies equal E(k)."""
    M = config.spectral_resolution
    if M < 2 * spec.kp or M // 2 <= spec.kp:
        raise ConfigurationError(f"spectral_resolution {M} cannot represent kp={spec.kp}")
    spec = spec.normalized()

    k1d = wavenumbers(M)
    kx, ky, kz = np.meshgrid(k1d, k1d, k1d, indexing="ij")
    kmag = np.sqrt(kx * kx + ky * ky + kz * kz)
    nyq = M // 2
    active = (kmag > 0.0) & (np.abs(kx) != nyq) & (np.abs(ky) != nyq) & (np.abs(kz) != nyq)

    shell = np.rint(kmag).astype(int)
    counts = np.bincount(shell[active], minlength=shell.max() + 1)
    amp = np.zeros_like(kmag)
    amp[active] = np.sqrt(2.0 * chasnov_energy(shell[active], spec) / counts[shell[active]])

    # orthonormal pair spanning the plane normal to k
    kh = np.sqrt(kx * kx + ky * ky)
    on_axis = kh == 0.0
    safe_kh = np.where(on_axis, 1.0, kh)
    safe_k = np.where(kmag == 0.0, 1.0, kmag)
    e1 = np.stack([np.where(on_axis, 1.0, ky / safe_kh), np.where(on_axis, 0.0, -kx / safe_kh), np.zeros_like(kx)])
    khat = np.stack([kx, ky, kz]) / safe_k
    e2 = np.cross(khat, e1, axis=0)

    rng = np.random.Generator(np.random.Philox(config.seed))
    theta1 = rng.uniform(0.0, 2.0 * math.pi, size=kmag.shape)
    theta2 = rng.uniform(0.0, 2.0 * math.pi, size=kmag.shape)
    phi = rng.uniform(0.0, 2.0 * math.pi, size=kmag.shape)
    alpha = amp * np.exp(1j * theta1) * np.cos(phi)
    beta = amp * np.exp(1j * theta2) * np.sin(phi)
    coeffs = alpha[None] * e1 + beta[None] * e2

    # Hermitian symmetry: the mode with the smaller flat index owns the pair
    idx = np.arange(M)
    neg = (-idx) % M
    partner = np.ravel_multi_index(np.meshgrid(neg, neg, neg, indexing="ij"), (M, M, M))
    own = np.arange(M ** 3).reshape(M, M, M)
    follower = partner < own
    mirrored = np.conj(coeffs.reshape(3, -1)[:, partner[follower]])
    coeffs[:, follower] = mirrored
    coeffs[:, ~active] = 0.0

    nodal = evaluate_fourier(coeffs, mesh, basis)
    logger.run_event("rogallo_field", seed=config.seed, resolution=M, modes=int(np.count_nonzero(active)))
    return SpectralVelocity(coeffs, nodal, mesh, basis)


def shell_energy(coeffs: np.ndarray) -> np.ndarray:
    """E on integer shells directly from Fourier coefficients (3, M, M, M)."""
    M = coeffs.shape[-1]
    k1d = wavenumbers(M)
    kmag = np.sqrt(k1d[:, None, None] ** 2 + k1d[None, :, None] ** 2 + k1d[None, None, :] ** 2)
    shell = np.rint(kmag).astype(int).ravel()
    energy = 0.5 * np.sum(np.abs(coeffs) ** 2, axis=0).ravel()
    return np.bincount(shell, weights=energy)


# =============================================================================
# COMPRESSIBLE STATE
# =============================================================================


def pressure_fluctuation_coeffs(coeffs: np.ndarray, rho: float = 1.0) -> np.ndarray:
    """
    Fourier coefficients of p' solving lap p' = -rho du_i/dx_j du_j/dx_i.

    Products are formed on a grid of twice the resolution, which holds the
    quadratic term exactly.
    """
    M = coeffs.shape[-1]
    P = 2 * M
    padded = np.zeros((3, P, P, P), dtype=complex)
    k_small = wavenumbers(M).astype(int)
    ix = np.ix_(k_small % P, k_small % P, k_small % P)
    for c in range(3):
        padded[c][ix] = coeffs[c]
    k = wavenumbers(P)
    kvec = (k[:, None, None], k[None, :, None], k[None, None, :])
    grad = np.empty((3, 3, P, P, P))
    for i in range(3):
        for j in range(3):
            grad[i, j] = np.fft.ifftn(1j * kvec[j] * padded[i]).real * P ** 3
    source = -rho * np.einsum("ijxyz,jixyz->xyz", grad, grad)
    s_hat = np.fft.fftn(source) / P ** 3
    k2 = kvec[0] ** 2 + kvec[1] ** 2 + kvec[2] ** 2
    p_hat = np.where(k2 > 0.0, -s_hat / np.where(k2 > 0.0, k2, 1.0), 0.0)
    return p_hat


def mean_pressure(umax: float, mach: float, gas: GasModel, rho: float = 1.0) -> float:
    """Mean pressure for which umax / sqrt(gamma p / rho) equals mach; unit sound speed at rest."""
    if umax > 0.0:
        return rho * (umax / mach) ** 2 / gas.gamma
    return rho / gas.gamma


def initialize_state(
    velocity: SpectralVelocity, config: InitConfig, gas: GasModel, time: float = 0.0
) -> SolutionField:
    """Unit density, mean pressure fixing max|u|/c = mach, spectral pressure fluctuation."""
    rho = 1.0
    vel = velocity.nodal
    umax = float(np.max(np.sqrt(np.sum(vel * vel, axis=0))))
    p_mean = mean_pressure(umax, config.mach, gas, rho)
    if umax > 0.0:
        p_prime = evaluate_fourier(pressure_fluctuation_coeffs(velocity.coeffs, rho), velocity.mesh, velocity.basis)
    else:
        p_prime = np.zeros(vel.shape[1:])
    p = p_mean + p_prime
    if np.any(p <= 0.0):
        raise ConfigurationError("negative total pressure; mach too large for the velocity field", mach=config.mach)

    data = conservative_from_primitive(np.full(p.shape, rho), vel[0], vel[1], vel[2], p, gas)
    logger.run_event("initial_state", p_mean=p_mean, umax=umax, mach=config.mach)
    return SolutionField(velocity.mesh, velocity.basis, data, time)


def peak_mach(state: SolutionField, gas: GasModel, p_mean: Optional[float] = None) -> float:
    """max |u| / sqrt(gamma p_mean / rho); p_mean defaults to the volume-mean pressure."""
    rho, u, v, w, p, _ = state.primitives(gas)
    if p_mean is None:
        p_mean = float(state.mesh.integrate(p, state.basis) / state.mesh.volume)
    umax = float(np.max(np.sqrt(u * u + v * v + w * w)))
    return umax / math.sqrt(gas.gamma * p_mean / float(np.mean(rho)))
