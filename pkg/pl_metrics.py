"""
PerfectLES — Metrics and Spectra
================================
Model-quality and flow diagnostics:

- cross-correlation coefficient, also split into element-inner and surface nodes
- volume-integrated kinetic energy, its decay exponent and its drift under the inviscid operator
- shell-averaged kinetic-energy spectra from a uniform resampling of the DG solution

All functions are pure. Results convert to pandas DataFrames for the CSV writers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from pl_basis import CartesianMesh, NodalBasis, interp_matrix
from pl_dgsem import DGOperator, SolutionField, TimeIntegrator, advance
from pl_errors import ConfigurationError, ShapeError
from pl_logging import get_logger

logger = get_logger("metrics")


# =============================================================================
# CROSS-CORRELATION
# =============================================================================


def cross_correlation(a, b) -> Optional[float]:
    """
    Centered covariance over the product of centered norms.

    Returns None when either input has zero variance.
    """
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size != b.size:
        raise ShapeError("cross-correlation inputs differ in length", a=a.size, b=b.size)
    if a.size < 2:
        raise ShapeError("cross-correlation needs at least two values")
    if np.ptp(a) == 0.0 or np.ptp(b) == 0.0:
        return None
    da = a - a.mean()
    db = b - b.mean()
    denom = np.sqrt(np.dot(da, da) * np.dot(db, db))
    if denom == 0.0:
        return None
    return float(np.clip(np.dot(da, db) / denom, -1.0, 1.0))


def inner_mask(p: int) -> np.ndarray:
    """Boolean (p, p, p) mask of nodes not on the element boundary."""
    mask = np.zeros((p, p, p), dtype=bool)
    if p >= 3:
        mask[1:p - 1, 1:p - 1, 1:p - 1] = True
    return mask


@dataclass
class CorrelationReport:
    """Per output component: CC over all nodes, inner nodes and surface nodes."""

    overall: List[Optional[float]]
    inner: List[Optional[float]]
    surface: List[Optional[float]]

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for i, (o, n, s) in enumerate(zip(self.overall, self.inner, self.surface)):
            rows.append({"component": i + 1, "overall": o, "inner": n, "surface": s})
        return pd.DataFrame(rows, columns=["component", "overall", "inner", "surface"])


def cc_inner_surface(pred: np.ndarray, label: np.ndarray, p: Optional[int] = None) -> CorrelationReport:
    """
    Correlate prediction and label per component, shapes (c, p, p, p) or (n, c, p, p, p).
    """
    pred = np.asarray(pred, dtype=float)
    label = np.asarray(label, dtype=float)
    if pred.shape != label.shape:
        raise ShapeError("prediction and label shapes differ", pred=pred.shape, label=label.shape)
    if pred.ndim == 4:
        pred, label = pred[None], label[None]
    if pred.ndim != 5:
        raise ShapeError("expected (c, p, p, p) or (n, c, p, p, p) tensors", shape=pred.shape)
    p = pred.shape[-1] if p is None else p
    if pred.shape[-3:] != (p, p, p):
        raise ShapeError("spatial shape does not match p", shape=pred.shape, p=p)

    inner = inner_mask(p)
    surface = ~inner
    report = CorrelationReport([], [], [])
    for c in range(pred.shape[1]):
        x, y = pred[:, c], label[:, c]
        report.overall.append(cross_correlation(x, y))
        report.surface.append(cross_correlation(x[:, surface], y[:, surface]))
        if inner.any():
            report.inner.append(cross_correlation(x[:, inner], y[:, inner]))
        else:
            report.inner.append(None)
    return report


# =============================================================================
# ENERGY
# =============================================================================


def kinetic_energy(field_: SolutionField) -> float:
    """Volume integral of 0.5 * rho * |u|^2 by LGL quadrature."""
    U = field_.data
    density = 0.5 * np.sum(U[1:4] ** 2, axis=0) / U[0]
    return float(field_.mesh.integrate(density, field_.basis))


@dataclass
class EnergyTrace:
    times: List[float] = field(default_factory=list)
    energies: List[float] = field(default_factory=list)

    def append(self, time: float, energy: float) -> None:
        if self.times and time <= self.times[-1]:
            raise ConfigurationError("energy trace times must be strictly increasing", time=time, last=self.times[-1])
        self.times.append(float(time))
        self.energies.append(float(energy))

    def __len__(self) -> int:
        return len(self.times)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"t": self.times, "ke": self.energies})

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> "EnergyTrace":
        trace = cls()
        for t, e in zip(frame["t"], frame["ke"]):
            trace.append(float(t), float(e))
        return trace


def fit_decay_exponent(trace: EnergyTrace, window: Optional[Tuple[float, float]] = None) -> float:
    """Least-squares slope of log E over log t inside ``window``."""
    t = np.asarray(trace.times, dtype=float)
    e = np.asarray(trace.energies, dtype=float)
    if window is not None:
        lo, hi = window
        keep = (t >= lo - 1e-12) & (t <= hi + 1e-12)
        t, e = t[keep], e[keep]
    if t.size < 3:
        raise ConfigurationError("decay fit needs at least three points", points=int(t.size))
    if np.any(e <= 0.0) or np.any(t <= 0.0):
        raise ConfigurationError("decay fit needs positive times and energies")
    slope, _ = np.polyfit(np.log(t), np.log(e), 1)
    return float(slope)


def energy_drift(field_: SolutionField, op: DGOperator, steps: int, cfl: float = 0.2) -> float:
    """Largest relative kinetic-energy change over ``steps`` fixed steps of the plain operator."""
    if steps < 1:
        raise ConfigurationError("energy drift needs at least one step")
    dt = op.stable_timestep(field_.data, cfl)
    ke0 = kinetic_energy(field_)
    if not ke0 > 0.0:
        raise ConfigurationError("energy drift needs a moving flow")
    worst = [0.0]

    def observer(n: int, t: float, U: np.ndarray, tendency: np.ndarray) -> None:
        ke = kinetic_energy(field_.with_data(U, t))
        worst[0] = max(worst[0], abs(ke - ke0) / ke0)

    advance(field_, TimeIntegrator(dt), field_.time + steps * dt, lambda U, t: op.tendency(U), observer=observer)
    logger.debug(f"kinetic energy drift {worst[0]:.3e} over {steps} steps", extra={"type": "energy_drift"})
    return worst[0]


# =============================================================================
# SPECTRA
# =============================================================================


def resample_matrix(mesh: CartesianMesh, basis: NodalBasis, n: int) -> np.ndarray:
    """(n, K, p) evaluation of the element polynomials at n uniform points per direction."""
    x = np.arange(n) * mesh.domain_length / n
    element = np.minimum((x / mesh.h).astype(int), mesh.elements_per_dir - 1)
    xi = 2.0 * (x - element * mesh.h) / mesh.h - 1.0
    R = np.zeros((n, mesh.elements_per_dir, basis.n_nodes))
    R[np.arange(n), element] = interp_matrix(basis.nodes, xi)
    return R


def resample_uniform(values: np.ndarray, mesh: CartesianMesh, basis: NodalBasis, n: int) -> np.ndarray:
    """Evaluate nodal data (..., K, K, K, p, p, p) on a uniform n^3 grid."""
    R = resample_matrix(mesh, basis, n)
    out = np.einsum("xai,...abcijk->...xbcjk", R, values)
    out = np.einsum("ybj,...xbcjk->...xyck", R, out)
    return np.einsum("zck,...xyck->...xyz", R, out)


@dataclass
class SpectrumSeries:
    time: float
    wavenumbers: np.ndarray
    energy: np.ndarray
    resolution: int
    cutoffs: Dict[str, float] = field(default_factory=dict)

    @property
    def total(self) -> float:
        return float(np.sum(self.energy))

    def band_energy(self, k_lo: float, k_hi: float) -> float:
        sel = (self.wavenumbers >= k_lo) & (self.wavenumbers <= k_hi)
        return float(np.sum(self.energy[sel]))

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({"t": self.time, "k": self.wavenumbers, "E": self.energy})
        for name, value in self.cutoffs.items():
            frame[name] = value
        return frame


def shell_spectrum(velocity: np.ndarray, rho_mean: float, domain_length: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    Shell sums of 0.5 * rho_mean * V * |u_hat|^2 over shells [k - 1/2, k + 1/2).

    ``velocity`` is (3, n, n, n) on a uniform grid.
    """
    n = velocity.shape[-1]
    u_hat = np.fft.fftn(velocity, axes=(-3, -2, -1)) / n ** 3
    power = np.sum(np.abs(u_hat) ** 2, axis=0)
    k1 = np.fft.fftfreq(n, d=1.0 / n) * (2.0 * np.pi / domain_length)
    kx, ky, kz = np.meshgrid(k1, k1, k1, indexing="ij")
    shell = np.floor(np.sqrt(kx ** 2 + ky ** 2 + kz ** 2) + 0.5).astype(int)
    energy = np.bincount(shell.ravel(), weights=power.ravel())
    energy *= 0.5 * rho_mean * domain_length ** 3
    return np.arange(energy.size), energy


def energy_spectrum(field_: SolutionField, resample_n: Optional[int] = None) -> SpectrumSeries:
    """Kinetic-energy spectrum of a DG solution resampled on a uniform grid."""
    mesh, basis = field_.mesh, field_.basis
    dof = mesh.elements_per_dir * basis.n_nodes
    n = 2 * dof if resample_n is None else int(resample_n)
    if n < 2:
        raise ConfigurationError("resample resolution must be at least 2")
    if n < 2 * dof:
        logger.warning(f"spectrum resample n={n} is below the recommended {2 * dof}")

    velocity = resample_uniform(field_.velocity(), mesh, basis, n)
    rho = resample_uniform(field_.data[0], mesh, basis, n)
    k, energy = shell_spectrum(velocity, float(np.mean(rho)), mesh.domain_length)
    scale = 2.0 * np.pi / mesh.domain_length
    cutoffs = {"k_cut_3ppw": scale * dof / 3.0, "k_cut_4ppw": scale * dof / 4.0}
    return SpectrumSeries(field_.time, k, energy, n, cutoffs)


def spectra_frame(series: Sequence[SpectrumSeries]) -> pd.DataFrame:
    if not series:
        return pd.DataFrame(columns=["t", "k", "E"])
    return pd.concat([s.to_frame() for s in series], ignore_index=True)
