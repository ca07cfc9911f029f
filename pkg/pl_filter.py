"""
PerfectLES — DNS-to-LES Operator and Closure Extraction
=======================================================
L2 projection of the fine DG solution onto the coarse polynomial space, the
exact closure term that makes the coarse discretization reproduce the filtered
fine solution, and assembly of training samples.

Features per LES element (channel order fixed):
    0-2  filtered velocity  u, v, w
    3-5  LES operator momentum tendency computed on the filtered state
Labels:
    0-2  filtered DNS momentum tendency
Auxiliary channels (sensitivity studies):
    0-2  filtered density, pressure, specific total energy
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from pl_basis import CartesianMesh, NodalBasis, interp_matrix, lgl_nodes_weights
from pl_dgsem import DGOperator, SolutionField
from pl_errors import ConfigurationError
from pl_fluxes import primitive_from_conservative
from pl_logging import get_logger
from pl_metrics import cross_correlation

logger = get_logger("filter")

FEATURE_NAMES = ("u", "v", "w", "R1", "R2", "R3")
LABEL_NAMES = ("Y1", "Y2", "Y3")
AUX_NAMES = ("rho", "p", "e")
SPLITS = ("training", "validation", "test")


# =============================================================================
# PROJECTION
# =============================================================================


@dataclass(frozen=True)
class FilterConfig:
    """Nested DNS/LES meshes: m fine elements per coarse element and direction."""

    coarsening_ratio: int
    N_dns: int
    N_les: int
    les_mesh: CartesianMesh
    quadrature_extra: int = 2

    def __post_init__(self):
        if self.coarsening_ratio < 2:
            raise ConfigurationError("coarsening ratio must be at least 2")
        if self.N_les + 1 > self.coarsening_ratio * (self.N_dns + 1):
            raise ConfigurationError("coarse degree exceeds the fine nodes per LES element")
        if self.N_les < 1:
            raise ConfigurationError("N_les must be at least 1")

    @property
    def dns_mesh(self) -> CartesianMesh:
        return CartesianMesh(self.les_mesh.elements_per_dir * self.coarsening_ratio, self.les_mesh.domain_length)

    @property
    def les_basis(self) -> NodalBasis:
        return NodalBasis.from_degree(self.N_les)

    @property
    def dns_basis(self) -> NodalBasis:
        return NodalBasis.from_degree(self.N_dns)

    @classmethod
    def from_config(cls, config) -> "FilterConfig":
        if config.dns.elements_per_dir % config.les.elements_per_dir:
            raise ConfigurationError("DNS and LES meshes are not nested")
        return cls(
            coarsening_ratio=config.dns.elements_per_dir // config.les.elements_per_dir,
            N_dns=config.dns.degree,
            N_les=config.les.degree,
            les_mesh=CartesianMesh(config.les.elements_per_dir),
            quadrature_extra=config.extract.quadrature_extra,
        )

    def check_nested(self, dns_mesh: CartesianMesh, dns_basis: NodalBasis) -> None:
        if dns_mesh.elements_per_dir != self.les_mesh.elements_per_dir * self.coarsening_ratio:
            raise ConfigurationError(
                "DNS mesh is not nested in the LES mesh",
                dns_elements=dns_mesh.elements_per_dir,
                les_elements=self.les_mesh.elements_per_dir,
                ratio=self.coarsening_ratio,
            )
        if dns_basis.degree != self.N_dns:
            raise ConfigurationError("DNS degree does not match the filter configuration")
        if abs(dns_mesh.domain_length - self.les_mesh.domain_length) > 1e-12:
            raise ConfigurationError("DNS and LES domains differ")


def _sub_element_points(m: int, local: np.ndarray) -> np.ndarray:
    """Coarse reference coordinate of local points on each of m sub-elements, shape (m, q)."""
    s = np.arange(m)[:, None]
    return -1.0 + (2.0 * s + 1.0 + local[None, :]) / m


def projection_matrix(m: int, N_dns: int, N_les: int, extra: int = 2) -> np.ndarray:
    """
    1D Galerkin projection, shape (N_les+1, m*(N_dns+1)).

    Fine data ordered sub-element major; integrals use LGL quadrature with
    N_dns + extra points per sub-element.
    """
    fine_nodes, _ = lgl_nodes_weights(N_dns)
    coarse_nodes, _ = lgl_nodes_weights(N_les)
    q_nodes, q_weights = lgl_nodes_weights(N_dns + extra)
    xi = _sub_element_points(m, q_nodes)  # (m, q)
    w = np.broadcast_to(q_weights / m, xi.shape)

    L = interp_matrix(coarse_nodes, xi.ravel())  # (m*q, pc)
    F = interp_matrix(fine_nodes, q_nodes)  # (q, pf)
    mass = L.T @ (w.ravel()[:, None] * L)
    pf = N_dns + 1
    B = np.zeros((N_les + 1, m * pf))
    for s in range(m):
        rows = slice(s * len(q_nodes), (s + 1) * len(q_nodes))
        B[:, s * pf:(s + 1) * pf] = (L[rows] * w[s][:, None]).T @ F
    return np.linalg.solve(mass, B)


def prolongation_matrix(m: int, N_dns: int, N_les: int) -> np.ndarray:
    """Evaluate coarse polynomials at the fine nodes, shape (m*(N_dns+1), N_les+1)."""
    fine_nodes, _ = lgl_nodes_weights(N_dns)
    coarse_nodes, _ = lgl_nodes_weights(N_les)
    return interp_matrix(coarse_nodes, _sub_element_points(m, fine_nodes).ravel())


def _gather_blocks(data: np.ndarray, K: int, m: int, pf: int) -> np.ndarray:
    """(..., K*m, K*m, K*m, pf, pf, pf) -> (..., K, K, K, m*pf, m*pf, m*pf)."""
    lead = data.shape[:-6]
    n = len(lead)
    arr = data.reshape(lead + (K, m, K, m, K, m, pf, pf, pf))
    order = tuple(range(n)) + tuple(n + i for i in (0, 2, 4, 1, 6, 3, 7, 5, 8))
    return arr.transpose(order).reshape(lead + (K, K, K, m * pf, m * pf, m * pf))


def _scatter_blocks(data: np.ndarray, K: int, m: int, pf: int) -> np.ndarray:
    """Inverse of _gather_blocks."""
    lead = data.shape[:-6]
    n = len(lead)
    arr = data.reshape(lead + (K, K, K, m, pf, m, pf, m, pf))
    order = tuple(range(n)) + tuple(n + i for i in (0, 3, 1, 5, 2, 7, 4, 6, 8))
    return arr.transpose(order).reshape(lead + (K * m, K * m, K * m, pf, pf, pf))


def _apply_tensor(matrix: np.ndarray, data: np.ndarray) -> np.ndarray:
    out = np.einsum("ai,...ijk->...ajk", matrix, data)
    out = np.einsum("bj,...ajk->...abk", matrix, out)
    return np.einsum("ck,...abk->...abc", matrix, out)


def project_array(data: np.ndarray, filter_config: FilterConfig) -> np.ndarray:
    """Project nodal data shaped (..., Kf, Kf, Kf, pf, pf, pf) to the LES space."""
    fc = filter_config
    P = projection_matrix(fc.coarsening_ratio, fc.N_dns, fc.N_les, fc.quadrature_extra)
    blocks = _gather_blocks(data, fc.les_mesh.elements_per_dir, fc.coarsening_ratio, fc.N_dns + 1)
    return _apply_tensor(P, blocks)


def dns_to_les(dns_field: SolutionField, filter_config: FilterConfig) -> SolutionField:
    """Galerkin L2 projection onto tensor polynomials of degree N_les per LES element."""
    filter_config.check_nested(dns_field.mesh, dns_field.basis)
    coarse = project_array(dns_field.data, filter_config)
    return SolutionField(filter_config.les_mesh, filter_config.les_basis, coarse, dns_field.time)


def les_to_dns(les_field: SolutionField, filter_config: FilterConfig) -> SolutionField:
    """Embed the coarse polynomial solution into the fine space (exact only for N_les <= N_dns)."""
    fc = filter_config
    if fc.N_les > fc.N_dns:
        raise ConfigurationError("coarse polynomials do not embed in a lower fine degree")
    E = prolongation_matrix(fc.coarsening_ratio, fc.N_dns, fc.N_les)
    blocks = _apply_tensor(E, les_field.data)
    fine = _scatter_blocks(blocks, fc.les_mesh.elements_per_dir, fc.coarsening_ratio, fc.N_dns + 1)
    return SolutionField(fc.dns_mesh, fc.dns_basis, fine, les_field.time)


# =============================================================================
# CLOSURE TERMS
# =============================================================================


@dataclass
class ClosureTerms:
    """Filtered state and the two tendencies whose difference is the closure."""

    filtered: SolutionField
    les_tendency: np.ndarray
    filtered_dns_tendency: np.ndarray

    @property
    def closure(self) -> np.ndarray:
        """Source that turns the coarse tendency into the filtered fine one."""
        return self.filtered_dns_tendency - self.les_tendency


def exact_closure(
    dns_field: SolutionField,
    dns_tendency: SolutionField,
    filter_config: FilterConfig,
    les_operator: DGOperator,
) -> ClosureTerms:
    """Perfect closure for all five equations at one instant."""
    if abs(dns_field.time - dns_tendency.time) > 1e-12 * max(1.0, abs(dns_field.time)):
        raise ConfigurationError(
            "state and tendency are from different times",
            state_time=dns_field.time,
            tendency_time=dns_tendency.time,
        )
    filtered = dns_to_les(dns_field, filter_config)
    filtered_tendency = project_array(dns_tendency.data, filter_config)
    les_tendency = les_operator.tendency(filtered.data)
    return ClosureTerms(filtered, les_tendency, filtered_tendency)


def closure_energy_contribution(term: np.ndarray, filtered: SolutionField) -> float:
    """Volume integral of the momentum part of ``term`` dotted with the filtered velocity."""
    mom = term[1:4] if term.shape[0] == 5 else term
    vel = filtered.velocity()
    return float(filtered.mesh.integrate(np.sum(mom * vel, axis=0), filtered.basis))


def relative_energy_contribution(pred: np.ndarray, true: np.ndarray, filtered: SolutionField) -> Optional[float]:
    """Ratio of predicted to true energy contribution; None when the true one vanishes."""
    denom = closure_energy_contribution(true, filtered)
    if denom == 0.0:
        return None
    return closure_energy_contribution(pred, filtered) / denom


def closure_energy_budget(terms: ClosureTerms) -> Dict[str, float]:
    """Energy contributions of the closure, its filtered-DNS part and its LES-operator part."""
    return {
        "closure": closure_energy_contribution(terms.closure, terms.filtered),
        "dns_component": closure_energy_contribution(terms.filtered_dns_tendency, terms.filtered),
        "les_component": closure_energy_contribution(-terms.les_tendency, terms.filtered),
    }


def closure_magnitude_ratios(terms: ClosureTerms) -> Dict[str, float]:
    """RMS of the closure over RMS of the coarse tendency, per conservation equation."""
    names = ("mass", "momentum_x", "momentum_y", "momentum_z", "energy")
    out = {}
    for i, name in enumerate(names):
        denom = float(np.sqrt(np.mean(terms.les_tendency[i] ** 2)))
        num = float(np.sqrt(np.mean(terms.closure[i] ** 2)))
        out[name] = num / denom if denom > 0.0 else float("nan")
    return out


# =============================================================================
# SAMPLES AND DATASETS
# =============================================================================


@dataclass
class ClosureSample:
    features: np.ndarray  # (6, p, p, p)
    labels: np.ndarray  # (3, p, p, p)
    aux: np.ndarray  # (3, p, p, p)
    run_id: str
    time: float
    element: Tuple[int, int, int]


@dataclass
class ClosureDataset:
    """Samples stored as stacked arrays plus per-sample metadata."""

    features: np.ndarray  # (n, 6, p, p, p)
    labels: np.ndarray  # (n, 3, p, p, p)
    aux: np.ndarray  # (n, 3, p, p, p)
    run_ids: List[str]
    times: np.ndarray
    elements: np.ndarray  # (n, 3) int
    split: str = "training"
    provenance: Dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.features.shape[0]
        if self.features.ndim != 5 or self.features.shape[1] != 6:
            raise ConfigurationError("features must be shaped (n, 6, p, p, p)")
        if self.labels.shape != (n, 3) + self.features.shape[2:]:
            raise ConfigurationError("labels must be shaped (n, 3, p, p, p)")
        if self.aux.shape != (n, 3) + self.features.shape[2:]:
            raise ConfigurationError("aux must be shaped (n, 3, p, p, p)")
        if len(self.run_ids) != n or len(self.times) != n or len(self.elements) != n:
            raise ConfigurationError("metadata length does not match sample count")
        if self.split not in SPLITS:
            raise ConfigurationError(f"split must be one of {SPLITS}")

    def __len__(self) -> int:
        return self.features.shape[0]

    def __getitem__(self, i: int) -> ClosureSample:
        return ClosureSample(
            self.features[i], self.labels[i], self.aux[i], self.run_ids[i], float(self.times[i]),
            tuple(int(v) for v in self.elements[i]),
        )

    @property
    def p(self) -> int:
        return self.features.shape[-1]

    @property
    def runs(self) -> List[str]:
        return sorted(set(self.run_ids))

    def subset(self, indices: Sequence[int]) -> "ClosureDataset":
        idx = np.asarray(indices, dtype=int)
        return ClosureDataset(
            self.features[idx], self.labels[idx], self.aux[idx], [self.run_ids[i] for i in idx],
            self.times[idx], self.elements[idx], self.split, dict(self.provenance),
        )

    @classmethod
    def empty(cls, p: int, split: str = "training") -> "ClosureDataset":
        z = np.zeros((0, 6, p, p, p))
        return cls(z, z[:, :3].copy(), z[:, :3].copy(), [], np.zeros(0), np.zeros((0, 3), dtype=int), split)

    @classmethod
    def concatenate(cls, parts: Sequence["ClosureDataset"], split: str) -> "ClosureDataset":
        if not parts:
            raise ConfigurationError("cannot concatenate an empty list of datasets")
        provenance = {"runs": {}}
        for part in parts:
            provenance["runs"].update(part.provenance.get("runs", {}))
        return cls(
            np.concatenate([d.features for d in parts]),
            np.concatenate([d.labels for d in parts]),
            np.concatenate([d.aux for d in parts]),
            [r for d in parts for r in d.run_ids],
            np.concatenate([d.times for d in parts]),
            np.concatenate([d.elements for d in parts]),
            split,
            provenance,
        )


def sample_times(start: float, end: float, interval: float) -> List[float]:
    count = int(round((end - start) / interval))
    return [round(start + i * interval, 12) for i in range(count + 1)]


def elementwise(arr: np.ndarray) -> np.ndarray:
    """(c, K, K, K, p, p, p) -> (K^3, c, p, p, p) in element-major order."""
    c = arr.shape[0]
    K = arr.shape[1]
    p = arr.shape[-1]
    return np.ascontiguousarray(np.moveaxis(arr, 0, 3)).reshape(K ** 3, c, p, p, p)


def samples_from_terms(terms: ClosureTerms, gas) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-element (features, labels, aux) arrays from one set of closure terms."""
    filtered = terms.filtered
    rho, u, v, w, p, _ = primitive_from_conservative(filtered.data, gas)
    e = filtered.data[4] / rho
    features = np.concatenate([np.stack([u, v, w]), terms.les_tendency[1:4]])
    labels = terms.filtered_dns_tendency[1:4]
    aux = np.stack([rho, p, e])
    return elementwise(features), elementwise(labels), elementwise(aux)


def extract_dataset(
    snapshots: Mapping[float, Tuple[SolutionField, SolutionField]],
    filter_config: FilterConfig,
    les_operator: DGOperator,
    times: Iterable[float],
    run_id: str,
    split: str = "training",
    provenance: Optional[Dict] = None,
) -> ClosureDataset:
    """
    One sample per LES element and requested time.

    ``snapshots`` maps time -> (state, tendency) at DNS resolution.
    """
    times = list(times)
    available = {round(t, 9): pair for t, pair in snapshots.items()}
    missing = [t for t in times if round(t, 9) not in available]
    if missing:
        raise ConfigurationError(f"missing snapshots at times {missing}", run=run_id)

    feats, labs, auxs, meta_t, meta_e = [], [], [], [], []
    K = filter_config.les_mesh.elements_per_dir
    elements = np.stack(np.unravel_index(np.arange(K ** 3), (K, K, K)), axis=1)
    for t in times:
        state, tendency = available[round(t, 9)]
        terms = exact_closure(state, tendency, filter_config, les_operator)
        f, l, a = samples_from_terms(terms, les_operator.gas)
        feats.append(f)
        labs.append(l)
        auxs.append(a)
        meta_t.append(np.full(K ** 3, t))
        meta_e.append(elements)
        logger.debug(f"extracted {K ** 3} samples at t={t:.4f}", extra={"run": run_id})

    info = dict(provenance or {})
    dataset = ClosureDataset(
        np.concatenate(feats), np.concatenate(labs), np.concatenate(auxs),
        [run_id] * (len(times) * K ** 3), np.concatenate(meta_t), np.concatenate(meta_e),
        split, {"runs": {run_id: info}},
    )
    logger.run_event("extract", run=run_id, samples=len(dataset), times=len(times))
    return dataset


def assign_splits(
    run_datasets: Mapping[str, ClosureDataset],
    train_runs: Sequence[str],
    validation_runs: Sequence[str],
    test_runs: Sequence[str],
) -> Dict[str, ClosureDataset]:
    """Group per-run datasets into disjoint training/validation/test sets by run."""
    roles = {"training": list(train_runs), "validation": list(validation_runs), "test": list(test_runs)}
    seen: Dict[str, str] = {}
    for split, runs in roles.items():
        for run in runs:
            if run in seen:
                raise ConfigurationError(f"run {run!r} assigned to both {seen[run]} and {split}")
            if run not in run_datasets:
                raise ConfigurationError(f"run {run!r} has no extracted data")
            seen[run] = split
    out = {}
    for split, runs in roles.items():
        if runs:
            out[split] = ClosureDataset.concatenate([run_datasets[r] for r in runs], split)
    check_run_isolation(out)
    return out


def check_run_isolation(splits: Mapping[str, ClosureDataset]) -> None:
    """Raise if any run contributes samples to more than one split."""
    owner: Dict[str, str] = {}
    for split, dataset in splits.items():
        for run in dataset.runs:
            if run in owner and owner[run] != split:
                raise ConfigurationError(f"run {run!r} appears in {owner[run]} and {split}")
            owner[run] = split


def feature_label_correlations(dataset: ClosureDataset) -> pd.DataFrame:
    """
    Cross-correlation of each coarse quantity with each label over all samples.

    Returns a DataFrame indexed by feature name; undefined correlations are NaN.
    """
    if len(dataset) == 0:
        raise ConfigurationError("cannot correlate an empty dataset")
    columns = {
        "rho": dataset.aux[:, 0], "u": dataset.features[:, 0], "v": dataset.features[:, 1],
        "w": dataset.features[:, 2], "p": dataset.aux[:, 1], "e": dataset.aux[:, 2],
        "R1": dataset.features[:, 3], "R2": dataset.features[:, 4], "R3": dataset.features[:, 5],
    }
    table = {}
    for j, label in enumerate(LABEL_NAMES):
        y = dataset.labels[:, j].ravel()
        table[label] = {}
        for name, values in columns.items():
            cc = cross_correlation(values.ravel(), y)
            table[label][name] = math.nan if cc is None else cc
    return pd.DataFrame(table)
