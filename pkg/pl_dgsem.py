"""
PerfectLES — Split-Form DGSEM Operator and Time Integration
===========================================================
Discrete spatial operator of the compressible Navier-Stokes equations on a
periodic Cartesian mesh: flux-differencing volume terms with the
kinetic-energy-preserving two-point flux, Riemann surface fluxes and BR1
viscous terms. The same operator serves the fine (DNS) and coarse (LES)
resolutions. Time integration is third-order Adams-Bashforth with a fixed step
and an SSP-RK3 self-start.

Every operator returns the tendency dU/dt of a field shaped
(5, K, K, K, p, p, p).

Usage:
    op = DGOperator(CartesianMesh(4), NodalBasis.from_degree(5), gas, "roe-lowdiss")
    dudt = op.tendency(field.data)
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Deque, List, Optional, Sequence

import numpy as np

from pl_basis import CartesianMesh, NodalBasis
from pl_errors import ConfigurationError, RunAbortedError, StateInvalidError
from pl_fluxes import (
    RIEMANN_VARIANTS,
    GasModel,
    primitive_from_conservative,
    riemann_flux,
    sound_speed,
    split_flux_from_primitives,
    viscous_flux,
)
from pl_logging import get_logger

logger = get_logger("dgsem")

NVAR = 5


# =============================================================================
# SOLUTION FIELD
# =============================================================================


@dataclass
class SolutionField:
    """Nodal conserved variables on every element plus the simulation time."""

    mesh: CartesianMesh
    basis: NodalBasis
    data: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        K, p = self.mesh.elements_per_dir, self.basis.n_nodes
        expected = (NVAR, K, K, K, p, p, p)
        if self.data.shape != expected:
            raise ConfigurationError(f"field data shape {self.data.shape} != {expected}")

    @classmethod
    def zeros(cls, mesh: CartesianMesh, basis: NodalBasis, time: float = 0.0) -> "SolutionField":
        K, p = mesh.elements_per_dir, basis.n_nodes
        return cls(mesh, basis, np.zeros((NVAR, K, K, K, p, p, p)), time)

    @classmethod
    def uniform(cls, mesh, basis, rho, velocity, p, gas: GasModel, time: float = 0.0) -> "SolutionField":
        out = cls.zeros(mesh, basis, time)
        u, v, w = velocity
        out.data[0] = rho
        out.data[1] = rho * u
        out.data[2] = rho * v
        out.data[3] = rho * w
        out.data[4] = p / (gas.gamma - 1.0) + 0.5 * rho * (u * u + v * v + w * w)
        return out

    def copy(self) -> "SolutionField":
        return SolutionField(self.mesh, self.basis, self.data.copy(), self.time)

    def with_data(self, data: np.ndarray, time: Optional[float] = None) -> "SolutionField":
        return SolutionField(self.mesh, self.basis, data, self.time if time is None else time)

    def velocity(self) -> np.ndarray:
        return self.data[1:4] / self.data[0]

    def primitives(self, gas: GasModel):
        return primitive_from_conservative(self.data, gas)

    def check_valid(self, gas: GasModel) -> None:
        """Raise StateInvalidError or RunAbortedError if the field is unusable."""
        if not np.all(np.isfinite(self.data)):
            element, _ = _first_bad_element(self.data)
            raise RunAbortedError("non-finite values in field", time=self.time, element=element)
        primitive_from_conservative(self.data, gas)


def _first_bad_element(data: np.ndarray):
    bad = ~np.isfinite(data)
    if not np.any(bad):
        return None, None
    idx = np.unravel_index(int(np.argmax(bad)), bad.shape)
    return tuple(int(i) for i in idx[1:4]), tuple(int(i) for i in idx[4:7])


# =============================================================================
# LINE OPERATORS
# =============================================================================


def _face(values: np.ndarray, node_axis: int, index: int) -> np.ndarray:
    return np.take(values, index, axis=node_axis)


def _surface_correction(values_shape, node_axis, n, w, right, left, right_face_val, left_face_val):
    """(1/w_N)(f*_R - f_N) at node N and -(1/w_0)(f*_L - f_0) at node 0."""
    corr = np.zeros(values_shape)
    sl_r = [slice(None)] * len(values_shape)
    sl_l = [slice(None)] * len(values_shape)
    sl_r[node_axis] = n - 1
    sl_l[node_axis] = 0
    corr[tuple(sl_r)] = (right - right_face_val) / w[-1]
    corr[tuple(sl_l)] = -(left - left_face_val) / w[0]
    return corr


class DGOperator:
    """Split-form DGSEM spatial operator with BR1 viscous terms."""

    def __init__(self, mesh: CartesianMesh, basis: NodalBasis, gas: GasModel, riemann: str = "roe-lowdiss"):
        if riemann not in RIEMANN_VARIANTS:
            raise ConfigurationError(f"unknown Riemann variant {riemann!r}")
        self.mesh = mesh
        self.basis = basis
        self.gas = gas
        self.riemann = riemann
        self.jacobian = 2.0 / mesh.h
        self.D = np.asarray(basis.diff_matrix)
        self.w = np.asarray(basis.weights)
        self.D2 = 2.0 * self.D

    # --- helpers on fields shaped (5, K, K, K, p, p, p) ---------------------

    def _neighbors(self, U: np.ndarray, d: int):
        """Left/right traces at the interface e+1/2 along direction d."""
        elem_axis, node_axis = 1 + d, 4 + d
        n = self.basis.n_nodes
        U_minus = _face(U, node_axis, n - 1)
        U_plus = np.roll(_face(U, node_axis, 0), -1, axis=elem_axis)
        return U_minus, U_plus

    def _derivative(self, values: np.ndarray, d: int, node_axis_offset: int = 4) -> np.ndarray:
        moved = np.moveaxis(values, node_axis_offset + d, -1)
        return np.moveaxis(moved @ self.D.T, -1, node_axis_offset + d)

    # --- convective part ------------------------------------------------------

    def convective_tendency(self, U: np.ndarray) -> np.ndarray:
        gas = self.gas
        rho, u, v, w, p, _ = primitive_from_conservative(U, gas)
        e = U[4] / rho
        vel = (u, v, w)
        n = self.basis.n_nodes
        out = np.zeros_like(U)

        for d in range(3):
            ax = 3 + d  # node axis in scalar fields
            rho_t = np.moveaxis(rho, ax, -1)
            vel_t = [np.moveaxis(c, ax, -1) for c in vel]
            p_t = np.moveaxis(p, ax, -1)
            e_t = np.moveaxis(e, ax, -1)
            F = split_flux_from_primitives(
                rho_t[..., :, None], [c[..., :, None] for c in vel_t], p_t[..., :, None], e_t[..., :, None],
                rho_t[..., None, :], [c[..., None, :] for c in vel_t], p_t[..., None, :], e_t[..., None, :],
                d,
            )
            volume = np.einsum("im,v...im->v...i", self.D2, F)
            volume = np.moveaxis(volume, -1, 4 + d)

            U_minus, U_plus = self._neighbors(U, d)
            f_star = riemann_flux(U_minus, U_plus, d, gas, self.riemann)
            f_left = np.roll(f_star, 1, axis=1 + d)
            # physical flux at the element faces is the diagonal of the split flux
            fN = _face_flux(F, n - 1)
            f0 = _face_flux(F, 0)
            corr = _surface_correction(U.shape, 4 + d, n, self.w, f_star, f_left, fN, f0)
            out -= self.jacobian * (volume + corr)
        return out

    # --- viscous part ---------------------------------------------------------

    def gradients(self, U: np.ndarray) -> np.ndarray:
        """BR1 lifted gradients of the conserved variables, shape (3, 5, K, K, K, p, p, p)."""
        n = self.basis.n_nodes
        grads = np.empty((3,) + U.shape)
        for d in range(3):
            U_minus, U_plus = self._neighbors(U, d)
            U_star = 0.5 * (U_minus + U_plus)
            U_star_left = np.roll(U_star, 1, axis=1 + d)
            corr = _surface_correction(
                U.shape, 4 + d, n, self.w, U_star, U_star_left,
                _face(U, 4 + d, n - 1), _face(U, 4 + d, 0),
            )
            grads[d] = self.jacobian * (self._derivative(U, d) + corr)
        return grads

    def viscous_tendency(self, U: np.ndarray, grads: Optional[np.ndarray] = None, mu=None) -> np.ndarray:
        """Divergence of the viscous flux with central (BR1) interface fluxes."""
        if grads is None:
            grads = self.gradients(U)
        Fv = viscous_flux(U, grads, self.gas, mu)
        n = self.basis.n_nodes
        out = np.zeros_like(U)
        for d in range(3):
            Fd = Fv[d]
            F_minus, F_plus = self._neighbors(Fd, d)
            F_star = 0.5 * (F_minus + F_plus)
            F_star_left = np.roll(F_star, 1, axis=1 + d)
            corr = _surface_correction(
                U.shape, 4 + d, n, self.w, F_star, F_star_left,
                _face(Fd, 4 + d, n - 1), _face(Fd, 4 + d, 0),
            )
            out += self.jacobian * (self._derivative(Fd, d) + corr)
        return out

    # --- full operator --------------------------------------------------------

    def tendency(self, U: np.ndarray, mu=None) -> np.ndarray:
        """dU/dt; mu overrides gas.mu0 with a scalar or nodal field."""
        out = self.convective_tendency(U)
        mu_eff = self.gas.mu0 if mu is None else mu
        if np.any(np.asarray(mu_eff) != 0.0):
            out += self.viscous_tendency(U, mu=mu_eff)
        return out

    def stable_timestep(self, U: np.ndarray, cfl: float, mu_max: Optional[float] = None) -> float:
        """Advective limit h/((N+1)^2 (|u|+c)) combined with h^2/((N+1)^4 mu/rho)."""
        if not cfl > 0.0:
            raise ConfigurationError("cfl must be positive")
        rho, u, v, w, p, _ = primitive_from_conservative(U, self.gas)
        c = sound_speed(rho, p, self.gas)
        speed = np.sqrt(u * u + v * v + w * w) + c
        if not np.all(np.isfinite(speed)):
            raise RunAbortedError("non-finite wave speed in timestep estimate")
        h = self.mesh.h
        n = self.basis.n_nodes
        dt = h / (n ** 2 * float(np.max(speed)))
        mu = self.gas.mu0 if mu_max is None else mu_max
        if mu > 0.0:
            dt = min(dt, h * h / (n ** 4 * mu / float(np.min(rho))))
        return cfl * dt


def _face_flux(F: np.ndarray, index: int) -> np.ndarray:
    """Physical flux at node ``index`` from the diagonal of the two-point flux array."""
    return F[..., index, index]


# =============================================================================
# MODULE-LEVEL OPERATIONS
# =============================================================================


def br1_gradients(field_: SolutionField, op: DGOperator) -> np.ndarray:
    return op.gradients(field_.data)


def spatial_operator(field_: SolutionField, op: DGOperator, mu=None) -> np.ndarray:
    return op.tendency(field_.data, mu=mu)


def stable_timestep(field_: SolutionField, op: DGOperator, cfl: float, mu_max: Optional[float] = None) -> float:
    return op.stable_timestep(field_.data, cfl, mu_max)


def fit_timestep(dt_max: float, interval: float) -> float:
    """Largest step <= dt_max that divides ``interval`` into an integer count."""
    if not dt_max > 0.0 or not interval > 0.0:
        raise ConfigurationError("timestep and interval must be positive")
    return interval / math.ceil(interval / dt_max - 1e-12)


# =============================================================================
# TIME INTEGRATION
# =============================================================================

RHS = Callable[[np.ndarray, float], np.ndarray]


@dataclass
class TimeIntegrator:
    """AB3 with fixed dt; the first two steps are SSP-RK3."""

    dt: float
    cfl: float = 0.2
    history: Deque[np.ndarray] = field(default_factory=lambda: deque(maxlen=3))
    steps_taken: int = 0

    def __post_init__(self):
        if not self.dt > 0.0:
            raise ConfigurationError("time step must be positive")

    def reset(self) -> None:
        self.history.clear()
        self.steps_taken = 0

    def step(self, U: np.ndarray, t: float, rhs: RHS, f_now: Optional[np.ndarray] = None) -> np.ndarray:
        dt = self.dt
        f0 = rhs(U, t) if f_now is None else f_now
        self.history.append(f0)
        if self.steps_taken < 2:
            U1 = U + dt * f0
            U2 = 0.75 * U + 0.25 * (U1 + dt * rhs(U1, t + dt))
            U_new = U / 3.0 + (2.0 / 3.0) * (U2 + dt * rhs(U2, t + 0.5 * dt))
        else:
            f2, f1, f0_ = self.history[-3], self.history[-2], self.history[-1]
            U_new = U + dt * ((23.0 / 12.0) * f0_ - (16.0 / 12.0) * f1 + (5.0 / 12.0) * f2)
        self.steps_taken += 1
        return U_new


class SourceTerm:
    """Time-sampled source with a fixed cadence; linear interpolation between samples."""

    def __init__(self, t0: float, cadence: float, samples: Sequence[np.ndarray]):
        self.t0 = t0
        self.cadence = cadence
        self.samples = list(samples)

    def __call__(self, t: float) -> np.ndarray:
        pos = (t - self.t0) / self.cadence
        i = int(math.floor(pos + 1e-9))
        frac = pos - i
        if abs(frac) < 1e-9 or abs(frac - 1.0) < 1e-9:
            j = int(round(pos))
            if not 0 <= j < len(self.samples):
                raise ConfigurationError(f"source archive has no sample at t={t:.9g}")
            return self.samples[j]
        if not 0 <= i < len(self.samples) - 1:
            raise ConfigurationError(f"source archive has no sample around t={t:.9g}")
        return (1.0 - frac) * self.samples[i] + frac * self.samples[i + 1]


Observer = Callable[[int, float, np.ndarray, np.ndarray], None]


def advance(
    field_: SolutionField,
    integrator: TimeIntegrator,
    t_end: float,
    rhs: RHS,
    source: Optional[Callable[[float], np.ndarray]] = None,
    snapshot_every: int = 0,
    observer: Optional[Observer] = None,
) -> List[SolutionField]:
    """
    Integrate ``field_`` to ``t_end`` with fixed dt.

    rhs(U, t) is the operator tendency; ``source(t)`` is added on top. The
    observer sees (step, time, U, rhs(U, t)) at every step point, including the
    final one. Returns the snapshots every ``snapshot_every`` steps plus the final
    state.
    """
    t0 = field_.time
    if not t_end > t0:
        raise ConfigurationError("t_end must be after the field time")
    dt = integrator.dt
    n_steps = int(round((t_end - t0) / dt))
    if n_steps < 1 or abs(n_steps * dt - (t_end - t0)) > 1e-8 * max(dt, 1.0):
        raise ConfigurationError(f"interval {t_end - t0:.9g} is not a multiple of dt={dt:.9g}")
    cadence = getattr(source, "cadence", None)
    if cadence is not None and abs(cadence - dt) > 1e-9 * dt:
        raise ConfigurationError(f"source cadence {cadence:.9g} differs from dt {dt:.9g}")

    def total(U: np.ndarray, t: float, base: Optional[np.ndarray] = None) -> np.ndarray:
        f = rhs(U, t) if base is None else base
        if source is not None:
            f = f + source(t)
        return f

    U = field_.data.copy()
    trajectory: List[SolutionField] = []
    for n in range(n_steps + 1):
        t = t0 + n * dt
        base = rhs(U, t)
        if observer is not None:
            observer(n, t, U, base)
        if snapshot_every and n % snapshot_every == 0 or n == n_steps:
            trajectory.append(field_.with_data(U.copy(), t))
        if n == n_steps:
            break
        U = integrator.step(U, t, total, f_now=total(U, t, base))
        if not np.all(np.isfinite(U)):
            element, node = _first_bad_element(U)
            raise RunAbortedError("non-finite state", time=t + dt, step=n + 1, element=element, node=node)
        logger.step_progress(n + 1, t + dt)
    return trajectory
