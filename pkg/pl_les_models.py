"""
PerfectLES — LES Closure Models and Driver
==========================================
Closure variants for the coarse DG operator and the LES time loop.

Modes:
    none         coarse operator only
    smagorinsky  mu = mu0 + rho * (Cs * Delta)^2 |S|
    perfect      archived exact closure added as a source each step
    ann-direct   momentum tendency replaced by the network prediction
    ann-eddy     eddy viscosity fitted to the network closure, clipped
    op-eddy      eddy viscosity fitted to the coarse operator alone, clipped

Every tendency follows the package sign convention (dU/dt); the closure source
is the filtered fine tendency minus the coarse tendency.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional

import numpy as np
import pandas as pd

from pl_basis import NodalBasis
from pl_config import CLOSURE_MODES
from pl_dgsem import DGOperator, SolutionField, SourceTerm, TimeIntegrator, advance, fit_timestep
from pl_errors import ConfigurationError, RunAbortedError
from pl_filter import ClosureDataset, elementwise
from pl_fluxes import primitive_gradients
from pl_logging import get_logger
from pl_metrics import EnergyTrace, SpectrumSeries, energy_spectrum, kinetic_energy
from pl_nn_layers import Network
from pl_nn_trainer import FeatureSet, cycle_once, infer, select_inputs

logger = get_logger("les")

DEGENERATE_BASIS = 1.0e-30


# =============================================================================
# VISCOSITY MODELS
# =============================================================================


def strain_rate_magnitude(grad_vel) -> np.ndarray:
    """|S| = sqrt(2 S_ij S_ij) for grad_vel[i][j] = d u_i / d x_j."""
    total = 0.0
    for i in range(3):
        for j in range(3):
            s = 0.5 * (grad_vel[i][j] + grad_vel[j][i])
            total = total + s * s
    return np.sqrt(2.0 * total)


def smagorinsky_viscosity(grad_vel, cs: float, delta: float) -> np.ndarray:
    """Kinematic eddy viscosity (Cs * Delta)^2 |S|."""
    return (cs * delta) ** 2 * strain_rate_magnitude(grad_vel)


def filter_width(op: DGOperator) -> float:
    return op.mesh.h / op.basis.n_nodes


def eddy_viscosity_fit(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """
    Zero-bias least squares of a ~ mu * b over the leading component axis.

    Nodes where sum(b^2) < 1e-30 get mu = 0.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ConfigurationError("closure and viscous basis shapes differ", a=a.shape, b=b.shape)
    num = np.sum(a * b, axis=0)
    den = np.sum(b * b, axis=0)
    degenerate = den < DEGENERATE_BASIS
    return np.where(degenerate, 0.0, num / np.where(degenerate, 1.0, den))


def clip_viscosity(mu: np.ndarray, mu0: float, lo: float = -1.0, hi: float = 20.0) -> np.ndarray:
    if not mu0 > 0.0:
        raise ConfigurationError("mu0 must be positive for clipping")
    return np.clip(mu, lo * mu0, hi * mu0)


# =============================================================================
# CLOSURE MODE
# =============================================================================


@dataclass
class ClosureMode:
    kind: str = "none"
    cs: float = 0.17
    clip: bool = True
    clip_lo: float = -1.0
    clip_hi: float = 20.0
    network: Optional[Network] = None
    feature_set: Optional[FeatureSet] = None
    source: Optional[SourceTerm] = None

    def __post_init__(self):
        if self.kind not in CLOSURE_MODES:
            raise ConfigurationError(f"closure mode must be one of {CLOSURE_MODES}, got {self.kind!r}")
        if self.kind in ("ann-direct", "ann-eddy") and (self.network is None or self.feature_set is None):
            raise ConfigurationError(f"mode {self.kind} needs a trained network checkpoint")
        if self.kind == "perfect" and self.source is None:
            raise ConfigurationError("perfect mode needs a closure archive")
        if self.kind == "smagorinsky" and self.cs < 0.0:
            raise ConfigurationError("Smagorinsky constant must be non-negative")
        if self.clip and self.clip_lo > self.clip_hi:
            raise ConfigurationError("clip_lo must not exceed clip_hi")

    def describe(self) -> Dict:
        info = {"mode": self.kind}
        if self.kind == "smagorinsky":
            info["cs"] = self.cs
        if self.kind in ("ann-eddy", "op-eddy"):
            info.update(clip=self.clip, clip_lo=self.clip_lo, clip_hi=self.clip_hi)
        if self.network is not None:
            info.update(network=self.network.tag, feature_set=self.feature_set.number)
        return info


def _to_field_layout(per_element: np.ndarray, K: int) -> np.ndarray:
    """(K^3, c, p, p, p) -> (c, K, K, K, p, p, p)."""
    c, p = per_element.shape[1], per_element.shape[-1]
    arr = per_element.reshape(K, K, K, c, p, p, p)
    return np.moveaxis(arr, 3, 0)


def predict_momentum_tendency(
    network: Network, fset: FeatureSet, U: np.ndarray, les_tendency: np.ndarray, gas
) -> np.ndarray:
    """Network prediction of the filtered fine momentum tendency, field layout (3, K, ...)."""
    rho = U[0]
    vel = U[1:4] / rho
    p = (gas.gamma - 1.0) * (U[4] - 0.5 * np.sum(U[1:4] * vel, axis=0))
    features = elementwise(np.concatenate([vel, les_tendency[1:4]]))
    aux = elementwise(np.stack([rho, p, U[4] / rho]))
    K = U.shape[1]
    if fset.out_channels == 3:
        pred = infer(network, select_inputs(features, aux, fset))
        return _to_field_layout(pred, K)
    # component-wise network: cycle the inputs so each component takes the first slot
    labels = np.zeros((features.shape[0], 3) + features.shape[2:])
    out = np.empty_like(labels)
    f = features
    for comp in range(3):
        out[:, comp] = infer(network, select_inputs(f, aux, fset))[:, 0]
        f, _ = cycle_once(f, labels)
    return _to_field_layout(out, K)


class ClosureModel:
    """Builds the closed right-hand side rhs(U, t) for one mode."""

    def __init__(self, mode: ClosureMode, op: DGOperator):
        self.mode = mode
        self.op = op
        self.gas = op.gas
        self.delta = filter_width(op)
        self.viscosity_log: List[Dict] = []

    def source(self) -> Optional[Callable[[float], np.ndarray]]:
        return self.mode.source if self.mode.kind == "perfect" else None

    def smagorinsky_mu(self, U: np.ndarray, grads: Optional[np.ndarray] = None):
        if self.mode.cs == 0.0:
            return None
        grads = self.op.gradients(U) if grads is None else grads
        _, grad_vel, _ = primitive_gradients(U, grads, self.gas)
        nu_t = smagorinsky_viscosity(grad_vel, self.mode.cs, self.delta)
        return self.gas.mu0 + U[0] * nu_t

    def eddy_mu(self, U: np.ndarray, convective: np.ndarray, grads: np.ndarray) -> np.ndarray:
        basis_term = self.op.viscous_tendency(U, grads, mu=1.0)
        les_tendency = convective + self.gas.mu0 * basis_term
        if self.mode.kind == "ann-eddy":
            target = predict_momentum_tendency(self.mode.network, self.mode.feature_set, U, les_tendency, self.gas)
        else:
            target = np.zeros_like(les_tendency[1:4])
        mu = eddy_viscosity_fit(target - les_tendency[1:4], basis_term[1:4])
        if self.mode.clip:
            mu = clip_viscosity(mu, self.gas.mu0, self.mode.clip_lo, self.mode.clip_hi)
        return mu

    def __call__(self, U: np.ndarray, t: float) -> np.ndarray:
        kind = self.mode.kind
        op = self.op
        if kind in ("none", "perfect"):
            return op.tendency(U)
        if kind == "smagorinsky":
            return op.tendency(U, mu=self.smagorinsky_mu(U))
        if kind == "ann-direct":
            out = op.tendency(U)
            out[1:4] = predict_momentum_tendency(self.mode.network, self.mode.feature_set, U, out, self.gas)
            return out
        convective = op.convective_tendency(U)
        grads = op.gradients(U)
        mu = self.eddy_mu(U, convective, grads)
        if self.mode.clip:
            lo, hi = self.mode.clip_lo * self.gas.mu0, self.mode.clip_hi * self.gas.mu0
            if np.min(mu) < lo - 1e-15 or np.max(mu) > hi + 1e-15:
                raise RunAbortedError("eddy viscosity outside clip bounds", time=t)
        self.viscosity_log.append({"t": t, "mu_min": float(np.min(mu)), "mu_max": float(np.max(mu)),
                                   "mu_mean": float(np.mean(mu))})
        return convective + op.viscous_tendency(U, grads, mu=self.gas.mu0 + mu)


# =============================================================================
# LES DRIVER
# =============================================================================


@dataclass
class LESResult:
    final: SolutionField
    snapshots: List[SolutionField]
    trace: EnergyTrace
    spectra: List[SpectrumSeries]
    viscosity: pd.DataFrame = field(default_factory=pd.DataFrame)
    recovery: pd.DataFrame = field(default_factory=pd.DataFrame)
    dt: float = 0.0


def les_timestep(initial: SolutionField, op: DGOperator, mode: ClosureMode, cfl: float, interval: float) -> float:
    """Stable step fitted to ``interval``, accounting for the largest viscosity the mode can apply."""
    mu_max = op.gas.mu0
    if mode.kind in ("ann-eddy", "op-eddy") and mode.clip:
        mu_max = op.gas.mu0 * (1.0 + mode.clip_hi)
    elif mode.kind in ("ann-eddy", "op-eddy"):
        # unbounded fit: size the step from the initial viscosity with room to double
        U = initial.data
        eddy = ClosureModel(mode, op).eddy_mu(U, op.convective_tendency(U), op.gradients(U))
        mu_max = op.gas.mu0 + 2.0 * float(np.max(np.abs(eddy)))
    elif mode.kind == "smagorinsky" and mode.cs > 0.0:
        # allow the eddy part to double during the run
        eddy = ClosureModel(mode, op).smagorinsky_mu(initial.data) - op.gas.mu0
        mu_max = op.gas.mu0 + 2.0 * float(np.max(eddy))
    return fit_timestep(op.stable_timestep(initial.data, cfl, mu_max), interval)


def les_run(
    initial: SolutionField,
    mode: ClosureMode,
    t_end: float,
    op: DGOperator,
    dt: float,
    output_interval: float = 0.1,
    reference: Optional[Mapping[float, np.ndarray]] = None,
    resample_n: Optional[int] = None,
) -> LESResult:
    """
    Advance the coarse solution with the selected closure.

    ``reference`` maps times to filtered fine states; the relative L2 mismatch
    against it is recorded whenever a step lands on one of those times.
    """
    model = ClosureModel(mode, op)
    integrator = TimeIntegrator(dt)
    every = max(int(round(output_interval / dt)), 1)
    t0 = initial.time
    trace = EnergyTrace()
    spectra: List[SpectrumSeries] = []
    recovery_rows = []
    ref = {round(t, 9): v for t, v in (reference or {}).items()}

    def observer(n: int, t: float, U: np.ndarray, base: np.ndarray) -> None:
        state = initial.with_data(U, t)
        trace.append(t, kinetic_energy(state))
        if n % every == 0:
            spectra.append(energy_spectrum(state, resample_n))
        key = round(t, 9)
        if key in ref:
            target = ref[key]
            err = float(np.linalg.norm(U - target) / np.linalg.norm(target))
            recovery_rows.append({"t": t, "relative_l2": err})

    logger.run_event("les_start", t0=t0, t_end=t_end, dt=dt, **mode.describe())
    snapshots = advance(initial, integrator, t_end, model, source=model.source(),
                        snapshot_every=every, observer=observer)
    final = snapshots[-1]
    ke = trace.energies[-1]
    if not np.isfinite(ke) or ke <= 0.0:
        raise RunAbortedError("kinetic energy is not finite and positive", time=final.time)
    logger.run_event("les_end", time=final.time, kinetic_energy=ke, steps=integrator.steps_taken)
    return LESResult(
        final=final,
        snapshots=snapshots,
        trace=trace,
        spectra=spectra,
        viscosity=pd.DataFrame(model.viscosity_log, columns=["t", "mu_min", "mu_max", "mu_mean"]),
        recovery=pd.DataFrame(recovery_rows, columns=["t", "relative_l2"]),
        dt=dt,
    )


# =============================================================================
# DISSIPATIVITY
# =============================================================================


@dataclass
class DissipativityReport:
    values: List[float]
    skipped: int = 0

    @property
    def fraction_positive(self) -> float:
        if not self.values:
            return float("nan")
        return float(np.mean(np.asarray(self.values) > 0.0))

    @property
    def median(self) -> float:
        return float(np.median(self.values)) if self.values else float("nan")

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"batch": np.arange(len(self.values)), "de": self.values})


def energy_ratio(pred: np.ndarray, true: np.ndarray, velocity: np.ndarray, weights3d: np.ndarray) -> Optional[float]:
    """Predicted over true energy contribution for (n, 3, p, p, p) arrays; None if the true one is zero."""
    den = float(np.sum(np.sum(true * velocity, axis=1) * weights3d))
    if den == 0.0:
        return None
    return float(np.sum(np.sum(pred * velocity, axis=1) * weights3d)) / den


def predict_labels(network: Network, fset: FeatureSet, dataset: ClosureDataset) -> np.ndarray:
    """Full three-component predictions for a dataset, cycling component-wise networks."""
    if fset.out_channels == 3:
        return infer(network, select_inputs(dataset.features, dataset.aux, fset))
    out = np.empty_like(dataset.labels)
    f, lab = dataset.features, dataset.labels
    for comp in range(3):
        out[:, comp] = infer(network, select_inputs(f, dataset.aux, fset))[:, 0]
        f, lab = cycle_once(f, lab)
    return out


def dissipativity_check(
    network: Network, fset: FeatureSet, test_set: ClosureDataset, batch_size: int = 32,
    predictions: Optional[np.ndarray] = None,
) -> DissipativityReport:
    """Energy-contribution ratio per consecutive mini-batch of the test set."""
    weights3d = NodalBasis.from_degree(test_set.p - 1).weights3d
    pred = predict_labels(network, fset, test_set) if predictions is None else predictions
    report = DissipativityReport([])
    for start in range(0, len(test_set), batch_size):
        sl = slice(start, start + batch_size)
        value = energy_ratio(pred[sl], test_set.labels[sl], test_set.features[sl, 0:3], weights3d)
        if value is None:
            report.skipped += 1
            logger.warning(f"skipping batch at {start}: zero energy contribution")
            continue
        report.values.append(value)
    return report
