"""
PerfectLES — Gas Model and Flux Functions
=========================================
Pointwise kernels of the compressible Navier-Stokes equations for an ideal gas.
Every function is vectorized: states are arrays shaped ``(5, ...)`` holding
``[rho, rho*u, rho*v, rho*w, rho*e]`` with any trailing shape, and a direction is
the axis index 0, 1 or 2 (x, y, z).

Fluxes provided:
  euler_flux          physical convective flux
  split_volume_flux   kinetic-energy-preserving two-point flux (Kennedy-Gruber form)
  riemann_flux        interface flux: roe-lowdiss, roe, llf or the dissipation-free central split flux
  viscous_flux        Newtonian stress and Fourier heat flux, linear in mu
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np

from pl_errors import ConfigurationError, StateInvalidError
from pl_logging import get_logger

logger = get_logger("fluxes")

ArrayLike = Union[float, np.ndarray]
RIEMANN_VARIANTS = ("roe-lowdiss", "roe", "llf", "central")


@dataclass(frozen=True)
class GasModel:
    """Calorically perfect gas."""

    gamma: float = 1.4
    gas_constant: float = 1.0
    prandtl: float = 0.72
    mu0: float = 0.0

    def __post_init__(self):
        if not self.gamma > 1.0:
            raise ConfigurationError("gamma must be greater than 1")
        if self.mu0 < 0.0:
            raise ConfigurationError("mu0 must be non-negative")
        if not self.prandtl > 0.0:
            raise ConfigurationError("prandtl must be positive")

    @property
    def c_v(self) -> float:
        return self.gas_constant / (self.gamma - 1.0)

    @property
    def c_p(self) -> float:
        return self.gamma * self.c_v

    def heat_conductivity(self, mu: ArrayLike) -> ArrayLike:
        return mu * self.c_p / self.prandtl

    @classmethod
    def from_settings(cls, settings) -> "GasModel":
        return cls(
            gamma=settings.gamma,
            gas_constant=settings.gas_constant,
            prandtl=settings.prandtl,
            mu0=settings.mu0,
        )


# =============================================================================
# STATE CONVERSION
# =============================================================================


def _locate(mask: np.ndarray) -> Tuple[Tuple[int, ...], Tuple[int, ...]]:
    """First flagged position split into (element, node) for field-shaped masks."""
    idx = tuple(int(i) for i in np.unravel_index(int(np.argmax(mask)), mask.shape))
    if mask.ndim == 6:
        return idx[:3], idx[3:]
    return (), idx


def pressure(U: np.ndarray, gas: GasModel) -> np.ndarray:
    rho = U[0]
    kinetic = 0.5 * (U[1] ** 2 + U[2] ** 2 + U[3] ** 2) / rho
    return (gas.gamma - 1.0) * (U[4] - kinetic)


def primitive_from_conservative(U: np.ndarray, gas: GasModel, check: bool = True):
    """Return (rho, u, v, w, p, T); raises StateInvalidError when rho or p is not positive."""
    U = np.asarray(U, dtype=float)
    rho = U[0]
    if check and np.any(~(rho > 0.0)):
        element, node = _locate(~(rho > 0.0))
        raise StateInvalidError("non-positive density", element=element, node=node)
    u = U[1] / rho
    v = U[2] / rho
    w = U[3] / rho
    p = (gas.gamma - 1.0) * (U[4] - 0.5 * rho * (u * u + v * v + w * w))
    if check and np.any(~(p > 0.0)):
        element, node = _locate(~(p > 0.0))
        raise StateInvalidError("non-positive pressure", element=element, node=node)
    T = p / (rho * gas.gas_constant)
    return rho, u, v, w, p, T


def conservative_from_primitive(rho, u, v, w, p, gas: GasModel) -> np.ndarray:
    rho = np.asarray(rho, dtype=float)
    energy = p / (gas.gamma - 1.0) + 0.5 * rho * (u * u + v * v + w * w)
    return np.stack(np.broadcast_arrays(rho, rho * u, rho * v, rho * w, energy)).astype(float)


def sound_speed(rho: ArrayLike, p: ArrayLike, gas: GasModel) -> ArrayLike:
    """sqrt(gamma p / rho)."""
    return np.sqrt(gas.gamma * p / rho)


# =============================================================================
# CONVECTIVE FLUXES
# =============================================================================


def euler_flux(U: np.ndarray, direction: int, gas: GasModel, check: bool = True) -> np.ndarray:
    """Convective flux of the conserved variables in one coordinate direction."""
    rho, u, v, w, p, _ = primitive_from_conservative(U, gas, check=check)
    vel = (u, v, w)
    un = vel[direction]
    F = np.empty(np.shape(U), dtype=float)
    F[0] = rho * un
    for i in range(3):
        F[1 + i] = rho * un * vel[i]
    F[1 + direction] += p
    F[4] = un * (U[4] + p)
    return F


def split_flux_from_primitives(rho_l, vel_l, p_l, e_l, rho_r, vel_r, p_r, e_r, direction: int) -> np.ndarray:
    """Kennedy-Gruber two-point flux from primitive pairs (arithmetic means only)."""
    rho_a = 0.5 * (rho_l + rho_r)
    vel_a = [0.5 * (vel_l[i] + vel_r[i]) for i in range(3)]
    p_a = 0.5 * (p_l + p_r)
    e_a = 0.5 * (e_l + e_r)
    mass = rho_a * vel_a[direction]
    F = np.empty((5,) + np.shape(mass), dtype=float)
    F[0] = mass
    for i in range(3):
        F[1 + i] = mass * vel_a[i]
    F[1 + direction] += p_a
    F[4] = mass * e_a + p_a * vel_a[direction]
    return F


def split_volume_flux(U_L: np.ndarray, U_R: np.ndarray, direction: int, gas: GasModel) -> np.ndarray:
    """Symmetric, consistent, kinetic-energy-preserving two-point flux."""
    rho_l, u_l, v_l, w_l, p_l, _ = primitive_from_conservative(U_L, gas)
    rho_r, u_r, v_r, w_r, p_r, _ = primitive_from_conservative(U_R, gas)
    e_l = U_L[4] / rho_l
    e_r = U_R[4] / rho_r
    return split_flux_from_primitives(
        rho_l, (u_l, v_l, w_l), p_l, e_l, rho_r, (u_r, v_r, w_r), p_r, e_r, direction
    )


def _llf(U_L, U_R, f_l, f_r, lam):
    return 0.5 * (f_l + f_r) - 0.5 * lam * (U_R - U_L)


def riemann_flux(
    U_L: np.ndarray,
    U_R: np.ndarray,
    direction: int,
    gas: GasModel,
    variant: str = "roe-lowdiss",
) -> np.ndarray:
    """
    Interface flux seen from the left state, normal along +direction.

    roe          Roe flux in primitive-jump wave-strength form
    roe-lowdiss  Roe with velocity jumps scaled by min(1, max(M_L, M_R))
    llf          local Lax-Friedrichs (Rusanov)
    central      the two-point split flux, no dissipation

    Nodes whose Roe average is degenerate fall back to llf with a warning.
    """
    if variant not in RIEMANN_VARIANTS:
        raise ConfigurationError(f"unknown Riemann variant {variant!r}")
    if variant == "central":
        return split_volume_flux(U_L, U_R, direction, gas)

    g = gas.gamma
    rho_l, u_l, v_l, w_l, p_l, _ = primitive_from_conservative(U_L, gas)
    rho_r, u_r, v_r, w_r, p_r, _ = primitive_from_conservative(U_R, gas)
    f_l = euler_flux(U_L, direction, gas, check=False)
    f_r = euler_flux(U_R, direction, gas, check=False)
    a_l = sound_speed(rho_l, p_l, gas)
    a_r = sound_speed(rho_r, p_r, gas)
    vel_l = (u_l, v_l, w_l)
    vel_r = (u_r, v_r, w_r)
    qn_l = vel_l[direction]
    qn_r = vel_r[direction]

    if variant == "llf":
        lam = np.maximum(np.abs(qn_l) + a_l, np.abs(qn_r) + a_r)
        return _llf(U_L, U_R, f_l, f_r, lam)

    H_l = (U_L[4] + p_l) / rho_l
    H_r = (U_R[4] + p_r) / rho_r
    RT = np.sqrt(rho_r / rho_l)
    rho = RT * rho_l
    u = (u_l + RT * u_r) / (1.0 + RT)
    v = (v_l + RT * v_r) / (1.0 + RT)
    w = (w_l + RT * w_r) / (1.0 + RT)
    H = (H_l + RT * H_r) / (1.0 + RT)
    q2 = u * u + v * v + w * w
    a2 = (g - 1.0) * (H - 0.5 * q2)
    degenerate = ~(a2 > 0.0) | ~np.isfinite(a2)
    a = np.sqrt(np.where(degenerate, 1.0, a2))
    vel = (u, v, w)
    qn = vel[direction]

    drho = rho_r - rho_l
    dp = p_r - p_l
    dvel = [vel_r[i] - vel_l[i] for i in range(3)]
    if variant == "roe-lowdiss":
        z = np.minimum(1.0, np.maximum(np.sqrt(u_l**2 + v_l**2 + w_l**2) / a_l,
                                       np.sqrt(u_r**2 + v_r**2 + w_r**2) / a_r))
        dvel = [z * dv for dv in dvel]
    dqn = dvel[direction]

    # wave strengths and speeds: left acoustic, right acoustic, entropy, shear
    L0 = (dp - rho * a * dqn) / (2.0 * a * a)
    L1 = (dp + rho * a * dqn) / (2.0 * a * a)
    L2 = drho - dp / (a * a)
    ws0 = np.abs(qn - a)
    ws1 = np.abs(qn + a)
    ws2 = np.abs(qn)

    normal = [1.0 if i == direction else 0.0 for i in range(3)]
    diss = np.empty(np.shape(U_L), dtype=float)
    diss[0] = ws0 * L0 + ws1 * L1 + ws2 * L2
    for i in range(3):
        shear = dvel[i] - dqn * normal[i]
        diss[1 + i] = (
            ws0 * L0 * (vel[i] - a * normal[i])
            + ws1 * L1 * (vel[i] + a * normal[i])
            + ws2 * L2 * vel[i]
            + ws2 * rho * shear
        )
    shear_energy = sum(vel[i] * dvel[i] for i in range(3)) - qn * dqn
    diss[4] = ws0 * L0 * (H - a * qn) + ws1 * L1 * (H + a * qn) + ws2 * L2 * 0.5 * q2 + ws2 * rho * shear_energy

    flux = 0.5 * (f_l + f_r - diss)
    if np.any(degenerate):
        count = int(np.count_nonzero(degenerate))
        logger.warning(
            f"Degenerate Roe average at {count} interface nodes, using llf there",
            extra={"nodes": count, "variant": variant},
        )
        lam = np.maximum(np.abs(qn_l) + a_l, np.abs(qn_r) + a_r)
        flux = np.where(degenerate, _llf(U_L, U_R, f_l, f_r, lam), flux)
    return flux


# =============================================================================
# VISCOUS FLUX
# =============================================================================


def primitive_gradients(U: np.ndarray, grad_U: np.ndarray, gas: GasModel):
    """
    Velocity and temperature gradients from conservative gradients.

    grad_U has shape (3, 5, ...) with the derivative direction first. Returns
    (vel, grad_vel, grad_T) with grad_vel[i][j] = d u_i / d x_j.
    """
    rho, u, v, w, p, _ = primitive_from_conservative(U, gas, check=False)
    vel = (u, v, w)
    grad_rho = grad_U[:, 0]
    grad_vel = [[(grad_U[j, 1 + i] - vel[i] * grad_rho[j]) / rho for j in range(3)] for i in range(3)]
    grad_T = []
    R = gas.gas_constant
    for j in range(3):
        d_kinetic = 0.5 * (u * u + v * v + w * w) * grad_rho[j] + rho * sum(vel[i] * grad_vel[i][j] for i in range(3))
        d_p = (gas.gamma - 1.0) * (grad_U[j, 4] - d_kinetic)
        grad_T.append((d_p / rho - p * grad_rho[j] / (rho * rho)) / R)
    return vel, grad_vel, grad_T


def viscous_flux(U: np.ndarray, grad_U: np.ndarray, gas: GasModel, mu: ArrayLike = None) -> np.ndarray:
    """
    Viscous flux for all three directions, shape (3, 5, ...).

    mu is a scalar or a nodal field; defaults to gas.mu0. The heat conductivity
    follows the same mu through mu*c_p/Pr.
    """
    if mu is None:
        mu = gas.mu0
    vel, gv, gT = primitive_gradients(U, grad_U, gas)
    kappa = gas.heat_conductivity(mu)
    div = gv[0][0] + gv[1][1] + gv[2][2]
    F = np.zeros((3,) + np.shape(U), dtype=float)
    for j in range(3):
        energy = kappa * gT[j]
        for i in range(3):
            sigma = mu * (gv[i][j] + gv[j][i])
            if i == j:
                sigma = sigma - mu * (2.0 / 3.0) * div
            F[j, 1 + i] = sigma
            energy = energy + sigma * vel[i]
        F[j, 4] = energy
    return F
