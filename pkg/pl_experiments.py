"""
PerfectLES — Experiment Driver
==============================
Desk-scale experiments built from the pipeline commands. Each experiment takes
a ConfigManager and an output directory, reuses any run directory that already
holds a manifest, and returns a flat dict of metrics with a ``passed`` flag.

Experiments:
    perfect_recovery       perfect-closure LES vs filtered DNS, dt and dt/2
    operator_independence  same recovery with the llf coarse flux
    closure_dissipativity  sign of the filtered fine closure energy contribution
    decay_exponent         log-log decay slope of the DNS kinetic energy
    energy_conservation    kinetic-energy drift of the inviscid central-flux DNS operator
    analytic_training      RNN1 fitted to y = x^2 on synthetic samples
    learning_vs_features   trained correlation vs best single input correlation
    depth_ablation         RNN0 vs RNN4, 3-seed medians
    feature_ablation       feature sets 1, 2 and 3, 3-seed medians
    trained_dissipativity  positive energy ratio on hidden-test mini-batches
    eddy_les               clipped ann-eddy LES vs no model vs filtered DNS
    pileup                 no-model spectrum excess at high wavenumbers

Usage:
    python pl_cli.py report --config configs/desk.conf --experiment perfect_recovery --out exp/recovery
"""

from __future__ import annotations

from dataclasses import replace
from pathlib import Path
from statistics import median
from typing import Callable, Dict, List, Optional

import numpy as np

from pl_cli import cmd_dns, cmd_extract, cmd_les, cmd_train, load_pair, RunContext
from pl_config import ConfigManager
from pl_dgsem import DGOperator
from pl_errors import ConfigurationError
from pl_filter import ClosureDataset, closure_energy_budget, exact_closure
from pl_io import read_csv, read_manifest, write_manifest
from pl_logging import get_logger
from pl_metrics import energy_drift
from pl_nn_trainer import train
from pl_turbulence import InitConfig, SpectrumSpec, initialize_state, rogallo_field

logger = get_logger("experiments")

DESK_RUNS = 6
ABLATION_SEEDS = (0, 1, 2)
RECOVERY_TOLERANCE = 1.0e-5
HALVING_BAND = (5.0, 10.0)
ENERGY_DRIFT_STEPS = 1000
ENERGY_DRIFT_TOLERANCE = 1.0e-3


# =============================================================================
# SHARED RUNS
# =============================================================================


def _cached(run_dir: Path, build: Callable[[], Dict]) -> Dict:
    manifest = run_dir / "manifest.json"
    if manifest.exists():
        logger.info(f"reusing {run_dir}")
        return read_manifest(manifest)
    return build()


def _window_manager(manager: ConfigManager, scale: float = 1.0, riemann: Optional[str] = None) -> ConfigManager:
    """DNS stopped at the end of the closure archive window, LES spanning that window."""
    dns = manager.get().dns
    overrides = {
        "dns.t_end": dns.archive_end,
        "dns.archive_dt_scale": scale,
        "les.t_start": dns.archive_start,
        "les.t_end": dns.archive_end,
    }
    if riemann is not None:
        overrides["les.riemann"] = riemann
    return manager.with_overrides(overrides)


def _window_archive(manager: ConfigManager, out: Path, scale: float = 1.0) -> Path:
    run_dir = out / f"dns_window_dt{scale:g}"
    _cached(run_dir, lambda: cmd_dns(_window_manager(manager, scale), run_dir))
    return run_dir


def _desk_archives(manager: ConfigManager, out: Path) -> List[Path]:
    base = manager.get().init.seed
    runs = []
    for seed in range(base, base + DESK_RUNS):
        run_dir = out / "dns" / f"seed{seed}"
        _cached(run_dir, lambda s=seed, d=run_dir: cmd_dns(manager.with_overrides({"init.seed": s}), d, s))
        runs.append(run_dir)
    return runs


def _desk_dataset(manager: ConfigManager, out: Path) -> Path:
    data_dir = out / "data"
    archives = _desk_archives(manager, out)
    _cached(data_dir, lambda: cmd_extract(manager, [str(a) for a in archives], data_dir))
    return data_dir


def _trained(manager: ConfigManager, out: Path, tag: str, fset: int, seed: int) -> Dict:
    data_dir = _desk_dataset(manager, out)
    run_dir = out / "nets" / f"{tag}_set{fset}_seed{seed}"
    derived = manager.with_overrides({"train.network": tag, "train.feature_set": fset, "train.seed": seed})
    return _cached(run_dir, lambda: cmd_train(derived, data_dir, run_dir))


def _mean_defined(values) -> float:
    defined = [v for v in values if v is not None]
    return float(np.mean(defined)) if defined else float("nan")


# =============================================================================
# EXPERIMENTS
# =============================================================================


def perfect_recovery(manager: ConfigManager, out: Path) -> Dict:
    errors = {}
    for scale in (1.0, 0.5):
        archive = _window_archive(manager, out, scale)
        les_dir = out / f"les_perfect_dt{scale:g}"
        result = _cached(les_dir, lambda: cmd_les(_window_manager(manager, scale), archive, les_dir, mode="perfect"))
        errors[scale] = result["final_recovery_error"]
    ratio = errors[1.0] / errors[0.5] if errors[0.5] else float("inf")
    return {
        "error_dt": errors[1.0],
        "error_half_dt": errors[0.5],
        "halving_ratio": ratio,
        "passed": errors[1.0] < RECOVERY_TOLERANCE and HALVING_BAND[0] <= ratio <= HALVING_BAND[1],
    }


def operator_independence(manager: ConfigManager, out: Path) -> Dict:
    archive = _window_archive(manager, out)
    les_dir = out / "les_perfect_llf"
    result = _cached(les_dir, lambda: cmd_les(_window_manager(manager, riemann="llf"), archive, les_dir,
                                              mode="perfect"))
    error = result["final_recovery_error"]
    return {"riemann": "llf", "error": error, "passed": error < RECOVERY_TOLERANCE}


def closure_dissipativity(manager: ConfigManager, out: Path) -> Dict:
    archive = _window_archive(manager, out)
    ctx = RunContext.build(_window_manager(manager))
    manifest = read_manifest(archive / "manifest.json")
    budgets = [closure_energy_budget(exact_closure(*load_pair(archive, e), ctx.filter, ctx.les_op))
               for e in manifest["entries"]]
    negative = float(np.mean([b["dns_component"] < 0.0 for b in budgets]))
    return {
        "steps": len(budgets),
        "fraction_negative": negative,
        "median_les_component": float(np.median([b["les_component"] for b in budgets])),
        "passed": negative >= 0.95,
    }


def decay_exponent(manager: ConfigManager, out: Path) -> Dict:
    exponents = [read_manifest(a / "manifest.json")["decay_exponent"] for a in _desk_archives(manager, out)]
    defined = [e for e in exponents if e is not None]
    return {
        "exponents": exponents,
        "passed": bool(defined) and all(-3.0 <= e <= -1.2 for e in defined),
    }


def energy_conservation(manager: ConfigManager, out: Path) -> Dict:
    """Inviscid split-form DNS operator with the central interface flux."""
    ctx = RunContext.build(manager)
    config = ctx.config
    fc = ctx.filter
    gas = replace(ctx.gas, mu0=0.0)
    init = InitConfig(config.init.seed, config.init.mach, config.init.spectral_resolution)
    spec = SpectrumSpec(config.init.s, config.init.u0_sq, config.init.kp)
    state = initialize_state(rogallo_field(spec, init, fc.dns_mesh, fc.dns_basis), init, gas)
    op = DGOperator(fc.dns_mesh, fc.dns_basis, gas, "central")
    drift = energy_drift(state, op, ENERGY_DRIFT_STEPS, config.dns.cfl)
    return {"steps": ENERGY_DRIFT_STEPS, "drift": drift, "passed": drift < ENERGY_DRIFT_TOLERANCE}


def analytic_dataset(p: int, n: int, seed: int, split: str) -> ClosureDataset:
    """Synthetic samples whose labels are the squares of the first three feature channels."""
    rng = np.random.default_rng(seed)
    features = rng.uniform(-1.0, 1.0, size=(n, 6, p, p, p))
    labels = features[:, :3] ** 2
    aux = np.ones((n, 3, p, p, p))
    times = np.zeros(n)
    elements = np.zeros((n, 3), dtype=int)
    return ClosureDataset(features, labels, aux, [f"synthetic-{split}"] * n, times, elements, split,
                          {"kind": "analytic x^2"})


def analytic_training(manager: ConfigManager, out: Path) -> Dict:
    settings = manager.with_overrides({"train.network": "RNN1", "train.epochs": 50, "train.feature_set": 1}).get().train
    p = manager.get().les.degree + 1
    result = train(analytic_dataset(p, 64, 11, "training"), analytic_dataset(p, 16, 12, "validation"), settings)
    initial = float(result.curves["validation_cost"].iloc[0])
    final = float(result.curves["validation_cost"].iloc[-1])
    reduction = 1.0 - final / initial
    return {"initial_cost": initial, "final_cost": final, "reduction": reduction, "passed": reduction >= 0.99}


def learning_vs_features(manager: ConfigManager, out: Path) -> Dict:
    data_dir = _desk_dataset(manager, out)
    table = read_csv(data_dir / "correlations.csv").set_index("feature")
    best_inputs = [float(np.nanmax(np.abs(table[col].to_numpy()))) for col in table.columns]
    result = _trained(manager, out, "RNN4", 1, manager.get().train.seed)
    overall = result["test_cc"]
    inner_beats_surface = all(
        i is not None and s is not None and i > s for i, s in zip(result["test_cc_inner"], result["test_cc_surface"])
    )
    margin = all(o is not None and o >= b + 0.05 for o, b in zip(overall, best_inputs))
    return {
        "trained_cc": overall,
        "best_input_cc": best_inputs,
        "inner_beats_surface": inner_beats_surface,
        "passed": margin and inner_beats_surface,
    }


def _median_cc(manager: ConfigManager, out: Path, tag: str, fset: int) -> float:
    return median(_mean_defined(_trained(manager, out, tag, fset, s)["test_cc"]) for s in ABLATION_SEEDS)


def depth_ablation(manager: ConfigManager, out: Path) -> Dict:
    shallow = _median_cc(manager, out, "RNN0", 1)
    deep = _median_cc(manager, out, "RNN4", 1)
    return {"RNN0": shallow, "RNN4": deep, "passed": deep >= shallow}


def feature_ablation(manager: ConfigManager, out: Path) -> Dict:
    scores = {f"set{n}": _median_cc(manager, out, "RNN4", n) for n in (1, 2, 3)}
    return {**scores, "passed": scores["set1"] > max(scores["set2"], scores["set3"])}


def trained_dissipativity(manager: ConfigManager, out: Path) -> Dict:
    result = _trained(manager, out, "RNN4", 1, manager.get().train.seed)
    fraction = result["de_fraction_positive"]
    return {"fraction_positive": fraction, "median": result["de_median"], "passed": fraction >= 0.8}


def _les_pair(manager: ConfigManager, out: Path) -> Dict[str, Dict]:
    data_dir = _desk_dataset(manager, out)
    test_run = read_manifest(data_dir / "manifest.json")["hidden_test_runs"][0]
    archive = out / "dns" / test_run
    net_dir = out / "nets" / f"RNN4_set1_seed{manager.get().train.seed}"
    _trained(manager, out, "RNN4", 1, manager.get().train.seed)
    runs = {}
    for mode in ("none", "ann-eddy"):
        les_dir = out / "les" / mode
        checkpoint = str(net_dir / "checkpoint.nnck") if mode == "ann-eddy" else None
        runs[mode] = _cached(les_dir, lambda m=mode, d=les_dir, c=checkpoint: cmd_les(manager, archive, d, m, c))
    runs["archive"] = {"dir": str(archive)}
    return runs


def eddy_les(manager: ConfigManager, out: Path) -> Dict:
    runs = _les_pair(manager, out)
    filtered = read_csv(Path(runs["archive"]["dir"]) / "filtered" / "energy_trace.csv")
    t_end = manager.get().les.t_end
    reference = float(np.interp(t_end, filtered["t"], filtered["ke"]))
    eddy_ke = runs["ann-eddy"]["final_kinetic_energy"]
    none_ke = runs["none"]["final_kinetic_energy"]
    return {
        "filtered_dns_ke": reference,
        "ann_eddy_ke": eddy_ke,
        "no_model_ke": none_ke,
        "passed": bool(np.isfinite(eddy_ke)) and eddy_ke > 0.0 and abs(eddy_ke - reference) < abs(none_ke - reference),
    }


def _top_third_energy(frame, time: float) -> float:
    times = frame["t"].unique()
    rows = frame[frame["t"] == times[np.argmin(np.abs(times - time))]]
    k_max = 1.5 * float(rows["k_cut_3ppw"].iloc[0])
    top = rows[(rows["k"] > 2.0 * k_max / 3.0) & (rows["k"] <= k_max)]
    return float(top["E"].sum())


def pileup(manager: ConfigManager, out: Path) -> Dict:
    runs = _les_pair(manager, out)
    t_end = manager.get().les.t_end
    none_frame = read_csv(out / "les" / "none" / "spectra.csv")
    filtered_frame = read_csv(Path(runs["archive"]["dir"]) / "filtered" / "spectra.csv")
    ratio = _top_third_energy(none_frame, t_end) / _top_third_energy(filtered_frame, t_end)
    return {"energy_ratio": ratio, "passed": ratio >= 1.5}


EXPERIMENTS: Dict[str, Callable[[ConfigManager, Path], Dict]] = {
    "perfect_recovery": perfect_recovery,
    "operator_independence": operator_independence,
    "closure_dissipativity": closure_dissipativity,
    "decay_exponent": decay_exponent,
    "energy_conservation": energy_conservation,
    "analytic_training": analytic_training,
    "learning_vs_features": learning_vs_features,
    "depth_ablation": depth_ablation,
    "feature_ablation": feature_ablation,
    "trained_dissipativity": trained_dissipativity,
    "eddy_les": eddy_les,
    "pileup": pileup,
}


def run_experiment(name: str, manager: ConfigManager, out_dir) -> Dict:
    if name not in EXPERIMENTS:
        raise ConfigurationError(f"unknown experiment {name!r}; choose from {sorted(EXPERIMENTS)}")
    out = Path(out_dir)
    logger.run_event("experiment_start", name=name)
    metrics = EXPERIMENTS[name](manager, out)
    write_manifest(out / f"experiment_{name}.json", {"experiment": name, **metrics})
    logger.run_event("experiment_end", name=name, passed=metrics.get("passed"))
    return metrics
