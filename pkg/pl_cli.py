"""
PerfectLES — Command Line
=========================
Pipeline commands: dns -> extract -> train -> les -> report.

Every command reads the flat run configuration (``--config``), accepts
``--seed`` and writes into ``--out``. Exit codes: 0 success, 2 usage or
configuration error, 1 runtime failure.

Usage:
    python pl_cli.py dns --config configs/desk.conf --seed 1 --out runs/seed1
    python pl_cli.py extract --config configs/desk.conf --archives runs/seed1 runs/seed2 --out data
    python pl_cli.py train --config configs/desk.conf --datasets data --out nets/rnn4
    python pl_cli.py les --config configs/desk.conf --archive runs/seed6 --mode perfect --out les/perfect
    python pl_cli.py report --config configs/desk.conf --runs les/none runs/seed6/filtered --out report
"""

from __future__ import annotations

import argparse
import math
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from pl_basis import CartesianMesh, NodalBasis
from pl_config import CLOSURE_MODES, NETWORK_TAGS, ConfigManager, TestbedConfig
from pl_dgsem import DGOperator, SolutionField, SourceTerm, TimeIntegrator, advance, fit_timestep
from pl_errors import ConfigurationError, FormatError, PerfectLESError
from pl_filter import (
    ClosureDataset,
    FilterConfig,
    assign_splits,
    check_run_isolation,
    closure_energy_budget,
    closure_magnitude_ratios,
    dns_to_les,
    exact_closure,
    extract_dataset,
    feature_label_correlations,
    sample_times,
)
from pl_fluxes import GasModel
from pl_io import (
    check_storage,
    read_checkpoint,
    read_csv,
    read_dataset,
    read_manifest,
    read_snapshot,
    snapshot_bytes,
    write_checkpoint,
    write_csv,
    write_dataset,
    write_manifest,
    write_snapshot,
)
from pl_les_models import ClosureMode, dissipativity_check, les_run, les_timestep, predict_labels
from pl_logging import configure_logging, get_logger
from pl_metrics import (
    EnergyTrace,
    cc_inner_surface,
    energy_spectrum,
    fit_decay_exponent,
    kinetic_energy,
    spectra_frame,
)
from pl_nn_trainer import feature_set, train
from pl_turbulence import InitConfig, SpectrumSpec, initialize_state, rogallo_field

logger = get_logger("cli")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


# =============================================================================
# SHARED CONTEXT
# =============================================================================


@dataclass
class RunContext:
    config: TestbedConfig
    config_hash: str
    gas: GasModel
    filter: FilterConfig
    dns_op: DGOperator
    les_op: DGOperator

    @classmethod
    def build(cls, manager: ConfigManager) -> "RunContext":
        config = manager.get()
        gas = GasModel.from_settings(config.gas)
        fc = FilterConfig.from_config(config)
        dns_op = DGOperator(fc.dns_mesh, fc.dns_basis, gas, config.dns.riemann)
        les_op = DGOperator(fc.les_mesh, fc.les_basis, gas, config.les.riemann)
        return cls(config, manager.config_hash(), gas, fc, dns_op, les_op)

    def resample_n(self, mesh: CartesianMesh, basis: NodalBasis) -> int:
        return self.config.report.resample_factor * mesh.elements_per_dir * basis.n_nodes


def _key(t: float) -> float:
    return round(float(t), 9)


def archive_entries(manifest: Dict) -> Dict[float, Dict]:
    return {_key(e["time"]): e for e in manifest["entries"]}


def load_pair(run_dir, entry: Dict) -> Tuple[SolutionField, SolutionField]:
    run_dir = Path(run_dir)
    state, _ = read_snapshot(run_dir / entry["state"])
    tendency, _ = read_snapshot(run_dir / entry["tendency"])
    return state, tendency


def archive_timestep(filtered: SolutionField, les_op: DGOperator, cfl: float, interval: float, scale: float) -> float:
    """LES step for the closure archive: CFL-stable, fitted to ``interval``, then scaled."""
    dt = fit_timestep(les_op.stable_timestep(filtered.data, cfl), interval) * scale
    count = interval / dt
    if abs(count - round(count)) > 1e-9 * count:
        raise ConfigurationError("archive_dt_scale must divide the sample interval into whole steps", scale=scale)
    return dt


# =============================================================================
# COMMANDS
# =============================================================================


def cmd_dns(manager: ConfigManager, out_dir, seed: Optional[int] = None) -> Dict:
    """Run one DNS realization and archive state/tendency pairs at the LES cadence."""
    ctx = RunContext.build(manager)
    config = ctx.config
    seed = config.init.seed if seed is None else int(seed)
    out = Path(out_dir)
    run_id = f"seed{seed}"
    fc = ctx.filter

    spec = SpectrumSpec(config.init.s, config.init.u0_sq, config.init.kp)
    init = InitConfig(seed, config.init.mach, config.init.spectral_resolution)
    velocity = rogallo_field(spec, init, fc.dns_mesh, fc.dns_basis)
    state = initialize_state(velocity, init, ctx.gas)

    interval = config.extract.sample_interval
    dt_les = archive_timestep(
        dns_to_les(state, fc), ctx.les_op, config.les.cfl, interval, config.dns.archive_dt_scale
    )
    dt_cfl = ctx.dns_op.stable_timestep(state.data, config.dns.cfl)
    substeps = max(1, math.ceil(dt_les / dt_cfl - 1e-12))
    dt_dns = dt_les / substeps

    samples = sample_times(config.extract.sample_start, config.extract.sample_end, interval)
    sample_steps = {int(round(t / dt_les)) for t in samples if t <= config.dns.t_end + 1e-12}
    first = int(round(config.dns.archive_start / dt_les))
    last = int(round(config.dns.archive_end / dt_les))
    archive_steps = set(range(first, last + 1)) | sample_steps
    check_storage(
        2 * len(archive_steps) * snapshot_bytes(fc.dns_mesh.elements_per_dir, fc.N_dns),
        config.system.storage_cap_gb,
        out,
    )
    logger.run_event("dns_start", run=run_id, dt_les=dt_les, dt_dns=dt_dns, substeps=substeps,
                     archived=len(archive_steps))

    trace, filtered_trace = EnergyTrace(), EnergyTrace()
    spectra, filtered_spectra = [], []
    entries: List[Dict] = []
    n_dns = ctx.resample_n(fc.dns_mesh, fc.dns_basis)
    n_les = ctx.resample_n(fc.les_mesh, fc.les_basis)

    def observer(n: int, t: float, U: np.ndarray, tendency: np.ndarray) -> None:
        if n % substeps:
            return
        k = n // substeps
        t_k = round(k * dt_les, 12)
        current = state.with_data(U, t_k)
        trace.append(t_k, kinetic_energy(current))
        if k in sample_steps:
            filtered = dns_to_les(current, fc)
            filtered_trace.append(t_k, kinetic_energy(filtered))
            spectra.append(energy_spectrum(current, n_dns))
            filtered_spectra.append(energy_spectrum(filtered, n_les))
        if k in archive_steps:
            entry = {"step": k, "time": t_k, "state": f"snapshots/state_{k:06d}.dhit",
                     "tendency": f"snapshots/tendency_{k:06d}.dhit"}
            write_snapshot(out / entry["state"], current, ctx.gas, "state", seed)
            write_snapshot(out / entry["tendency"], state.with_data(tendency, t_k), ctx.gas, "tendency", seed)
            entries.append(entry)

    advance(state, TimeIntegrator(dt_dns, config.dns.cfl), config.dns.t_end, ctx.dns_op.tendency,
            observer=observer)

    try:
        decay = fit_decay_exponent(trace, (config.extract.sample_start, config.extract.sample_end))
    except ConfigurationError:
        decay = None

    write_csv(out / "energy_trace.csv", trace.to_frame())
    write_csv(out / "spectra.csv", spectra_frame(spectra))
    write_csv(out / "filtered" / "energy_trace.csv", filtered_trace.to_frame())
    write_csv(out / "filtered" / "spectra.csv", spectra_frame(filtered_spectra))
    write_manifest(out / "filtered" / "manifest.json", {"label": "filtered-dns", "run_id": run_id})
    manifest = {
        "label": "dns",
        "run_id": run_id,
        "seed": seed,
        "config_hash": ctx.config_hash,
        "dt_les": dt_les,
        "dt_dns": dt_dns,
        "substeps": substeps,
        "sample_times": samples,
        "archive_window": [config.dns.archive_start, config.dns.archive_end],
        "entries": entries,
        "decay_exponent": decay,
    }
    write_manifest(out / "manifest.json", manifest)
    logger.run_event("dns_end", run=run_id, entries=len(entries), decay_exponent=decay)
    return manifest


def default_split(run_ids: Sequence[str]) -> Tuple[List[str], List[str], List[str]]:
    """Last run is the hidden test run, the one before it validation, the rest training."""
    runs = sorted(run_ids)
    if len(runs) >= 3:
        return runs[:-2], [runs[-2]], [runs[-1]]
    if len(runs) == 2:
        return runs[:1], runs[1:], []
    return runs, [], []


def cmd_extract(manager: ConfigManager, archives: Sequence[str], out_dir) -> Dict:
    """Closure datasets per split, correlation table and closure budgets."""
    ctx = RunContext.build(manager)
    config = ctx.config
    out = Path(out_dir)
    times = sample_times(config.extract.sample_start, config.extract.sample_end, config.extract.sample_interval)

    per_run: Dict[str, ClosureDataset] = {}
    budget_rows, ratio_rows = [], []
    for archive in archives:
        manifest = read_manifest(Path(archive) / "manifest.json")
        run_id = manifest["run_id"]
        if run_id in per_run:
            raise ConfigurationError(f"run {run_id!r} given twice")
        entries = archive_entries(manifest)
        snapshots = {t: load_pair(archive, entries[_key(t)]) for t in times if _key(t) in entries}
        per_run[run_id] = extract_dataset(
            snapshots, ctx.filter, ctx.les_op, times, run_id,
            provenance={"archive": str(archive), "config_hash": manifest["config_hash"], "seed": manifest["seed"]},
        )
        for entry in manifest["entries"]:
            terms = exact_closure(*load_pair(archive, entry), ctx.filter, ctx.les_op)
            budget_rows.append({"run": run_id, "t": entry["time"], **closure_energy_budget(terms)})
            ratio_rows.append({"run": run_id, "t": entry["time"], **closure_magnitude_ratios(terms)})

    roles = (config.extract.train_runs, config.extract.validation_runs, config.extract.test_runs)
    if not any(roles):
        roles = default_split(per_run)
    splits = assign_splits(per_run, *roles)
    for split, dataset in splits.items():
        write_dataset(out / f"{split}.ctrn", dataset)

    table = feature_label_correlations(splits["training"])
    write_csv(out / "correlations.csv", table.rename_axis("feature").reset_index())
    write_csv(out / "closure_budget.csv", pd.DataFrame(budget_rows))
    write_csv(out / "closure_ratios.csv", pd.DataFrame(ratio_rows))
    manifest = {
        "config_hash": ctx.config_hash,
        "splits": {split: dataset.runs for split, dataset in splits.items()},
        "samples": {split: len(dataset) for split, dataset in splits.items()},
        "hidden_test_runs": splits["test"].runs if "test" in splits else [],
        "sample_times": times,
    }
    write_manifest(out / "manifest.json", manifest)
    logger.run_event("extract_end", **manifest["samples"])
    return manifest


def cmd_train(manager: ConfigManager, dataset_dir, out_dir, network: Optional[str] = None,
              feature_set_number: Optional[int] = None) -> Dict:
    """Train a closure network; report test correlations and dissipativity."""
    config = manager.get()
    data = Path(dataset_dir)
    out = Path(out_dir)
    splits = {"training": read_dataset(data / "training.ctrn"), "validation": read_dataset(data / "validation.ctrn")}
    if (data / "test.ctrn").exists():
        splits["test"] = read_dataset(data / "test.ctrn")
    check_run_isolation(splits)

    settings = config.train
    if network is not None:
        settings = replace(settings, network=network)
    if feature_set_number is not None:
        settings = replace(settings, feature_set=feature_set_number)
    result = train(splits["training"], splits["validation"], settings)
    extra = {
        "train": result.settings,
        "feature_set": result.feature_set.number,
        "rng_state": result.rng_state,
        "training_runs": splits["training"].runs,
        "config_hash": manager.config_hash("train"),
    }
    write_checkpoint(out / "checkpoint.nnck", result.network, result.optimizer, extra)
    write_csv(out / "curves.csv", result.curves)

    manifest = {
        "network": settings.network,
        "feature_set": settings.feature_set,
        "seed": settings.seed,
        "training_runs": splits["training"].runs,
        "validation_runs": splits["validation"].runs,
        "final_train_cost": float(result.curves["train_cost"].iloc[-1]),
        "final_validation_cost": float(result.curves["validation_cost"].iloc[-1]),
    }
    if "test" in splits:
        test = splits["test"]
        pred = predict_labels(result.network, result.feature_set, test)
        report = cc_inner_surface(pred, test.labels)
        write_csv(out / "correlation_report.csv", report.to_frame())
        de = dissipativity_check(result.network, result.feature_set, test, settings.batch_size, pred)
        write_csv(out / "dissipativity.csv", de.to_frame())
        manifest.update(test_runs=test.runs, test_cc=report.overall, test_cc_inner=report.inner,
                        test_cc_surface=report.surface, de_fraction_positive=de.fraction_positive,
                        de_median=de.median)
    write_manifest(out / "manifest.json", manifest)
    return manifest


def _mode_label(mode: ClosureMode) -> str:
    if mode.kind == "smagorinsky":
        return f"smagorinsky-cs{mode.cs:g}"
    if mode.kind in ("ann-eddy", "op-eddy") and not mode.clip:
        return f"{mode.kind}-unclipped"
    return mode.kind


def cmd_les(manager: ConfigManager, archive, out_dir, mode: Optional[str] = None, checkpoint: Optional[str] = None,
            cfl: Optional[float] = None) -> Dict:
    """LES from the filtered DNS state at les.t_start with the chosen closure."""
    ctx = RunContext.build(manager)
    les = ctx.config.les
    mode_name = mode or les.mode
    cfl = les.cfl if cfl is None else cfl
    out = Path(out_dir)
    archive = Path(archive)

    network = fset = None
    if mode_name in ("ann-direct", "ann-eddy"):
        if checkpoint is None:
            raise ConfigurationError(f"mode {mode_name} requires --checkpoint")
        network, _, extra = read_checkpoint(checkpoint)
        fset = feature_set(extra["feature_set"])

    dns_manifest = read_manifest(archive / "manifest.json")
    entries = archive_entries(dns_manifest)
    if _key(les.t_start) not in entries:
        raise ConfigurationError(f"archive has no state at t={les.t_start}", archive=str(archive))
    initial = dns_to_les(load_pair(archive, entries[_key(les.t_start)])[0], ctx.filter)

    sampled = {_key(t) for t in dns_manifest["sample_times"]}
    reference = {}
    for key, entry in entries.items():
        if key in sampled and les.t_start - 1e-12 <= entry["time"] <= les.t_end + 1e-12:
            reference[entry["time"]] = dns_to_les(load_pair(archive, entry)[0], ctx.filter).data

    source = None
    if mode_name == "perfect":
        dt = dns_manifest["dt_les"]
        steps = int(round((les.t_end - les.t_start) / dt))
        closures = []
        for k in range(steps + 1):
            key = _key(les.t_start + k * dt)
            if key not in entries:
                raise ConfigurationError(f"closure archive has no step at t={key}", archive=str(archive))
            terms = exact_closure(*load_pair(archive, entries[key]), ctx.filter, ctx.les_op)
            closures.append(terms.closure)
            reference[entries[key]["time"]] = terms.filtered.data
        source = SourceTerm(les.t_start, dt, closures)

    closure = ClosureMode(mode_name, les.cs, les.clip, les.clip_lo, les.clip_hi, network, fset, source)
    if mode_name != "perfect":
        dt = les_timestep(initial, ctx.les_op, closure, cfl, les.output_interval)
    result = les_run(initial, closure, les.t_end, ctx.les_op, dt, les.output_interval, reference,
                     ctx.resample_n(ctx.filter.les_mesh, ctx.filter.les_basis))

    write_csv(out / "energy_trace.csv", result.trace.to_frame())
    write_csv(out / "spectra.csv", spectra_frame(result.spectra))
    if len(result.recovery):
        write_csv(out / "recovery.csv", result.recovery)
    if len(result.viscosity):
        write_csv(out / "viscosity.csv", result.viscosity)
    manifest = {
        "label": _mode_label(closure),
        "closure": closure.describe(),
        "run_id": dns_manifest["run_id"],
        "dt": dt,
        "cfl": cfl,
        "riemann": les.riemann,
        "operator_hash": manager.config_hash("gas", "les"),
        "final_time": result.final.time,
        "final_kinetic_energy": result.trace.energies[-1],
        "final_recovery_error": float(result.recovery["relative_l2"].iloc[-1]) if len(result.recovery) else None,
    }
    write_manifest(out / "manifest.json", manifest)
    return manifest


def _merge_traces(traces: Sequence[Tuple[str, pd.DataFrame]]) -> pd.DataFrame:
    label0, base = traces[0]
    merged = pd.DataFrame({"t": base["t"].to_numpy(), label0: base["ke"].to_numpy()})
    t0 = merged["t"].to_numpy()
    for label, frame in traces[1:]:
        t = frame["t"].to_numpy()
        if len(t) == len(t0) and np.allclose(t, t0, rtol=0.0, atol=1e-9):
            merged[label] = frame["ke"].to_numpy()
        else:
            logger.warning(f"time grid of {label} differs; interpolating onto {label0}")
            merged[label] = np.interp(t0, t, frame["ke"].to_numpy(), left=np.nan, right=np.nan)
    return merged


def _merge_spectra(spectra: Sequence[Tuple[str, pd.DataFrame]], time: Optional[float]) -> pd.DataFrame:
    if time is None:
        time = min(float(frame["t"].max()) for _, frame in spectra)
    merged: Optional[pd.DataFrame] = None
    for label, frame in spectra:
        times = frame["t"].unique()
        nearest = times[np.argmin(np.abs(times - time))]
        if abs(nearest - time) > 1e-9:
            logger.warning(f"{label} has no spectrum at t={time:g}; using t={nearest:g}")
        rows = frame[frame["t"] == nearest][["k", "E"]].rename(columns={"E": label})
        merged = rows if merged is None else merged.merge(rows, on="k", how="outer")
    merged = merged.sort_values("k").reset_index(drop=True)
    merged.insert(0, "t", time)
    return merged


def _unique(label: str, seen: Dict[str, int]) -> str:
    seen[label] = seen.get(label, 0) + 1
    return label if seen[label] == 1 else f"{label}-{seen[label]}"


def cmd_report(manager: ConfigManager, runs: Sequence[str], out_dir, experiment: Optional[str] = None) -> Dict:
    """Merge energy traces and spectra of completed runs into comparison tables."""
    if experiment is not None:
        from pl_experiments import run_experiment

        return run_experiment(experiment, manager, out_dir)
    if not runs:
        raise ConfigurationError("report needs at least one run directory")
    out = Path(out_dir)
    traces, spectra, seen = [], [], {}
    for run in runs:
        run = Path(run)
        for name in ("manifest.json", "energy_trace.csv", "spectra.csv"):
            if not (run / name).exists():
                raise FormatError(f"missing file {run / name}", path=str(run / name))
        label = _unique(read_manifest(run / "manifest.json").get("label", run.name), seen)
        traces.append((label, read_csv(run / "energy_trace.csv")))
        spectra.append((label, read_csv(run / "spectra.csv")))

    ke = _merge_traces(traces)
    spec = _merge_spectra(spectra, manager.get().report.spectra_time)
    write_csv(out / "ke_comparison.csv", ke)
    write_csv(out / "spectra_comparison.csv", spec)
    manifest = {"runs": [str(r) for r in runs], "labels": [label for label, _ in traces],
                "spectra_time": float(spec["t"].iloc[0])}
    write_manifest(out / "manifest.json", manifest)
    return manifest


# =============================================================================
# ENTRY POINT
# =============================================================================


def build_parser() -> argparse.ArgumentParser:
    from pl_experiments import EXPERIMENTS

    parser = argparse.ArgumentParser(
        description="PerfectLES testbed",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=__doc__.split("Usage:", 1)[1],
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    def common(sub: argparse.ArgumentParser) -> None:
        sub.add_argument("--config", help="flat run configuration file (section.key = value)")
        sub.add_argument("--seed", type=int, help="random seed for this command")
        sub.add_argument("--out", required=True, help="output directory")

    dns = subparsers.add_parser("dns", help="run a DNS realization and archive closure data")
    common(dns)

    extract = subparsers.add_parser("extract", help="build closure datasets from DNS archives")
    common(extract)
    extract.add_argument("--archives", nargs="+", required=True, help="DNS run directories")

    train_p = subparsers.add_parser("train", help="train a closure network")
    common(train_p)
    train_p.add_argument("--datasets", required=True, help="directory written by extract")
    train_p.add_argument("--network", choices=NETWORK_TAGS)
    train_p.add_argument("--feature-set", type=int, choices=[1, 2, 3, 4, 5])

    les = subparsers.add_parser("les", help="run an LES with a closure model")
    common(les)
    les.add_argument("--archive", required=True, help="DNS run directory providing the initial state")
    les.add_argument("--mode", choices=CLOSURE_MODES)
    les.add_argument("--checkpoint", help="network checkpoint for ann modes")
    les.add_argument("--cfl", type=float, help="override les.cfl")
    les.add_argument("--cs", type=float, help="override les.cs")
    les.add_argument("--no-clip", action="store_true", help="disable eddy-viscosity clipping")

    report = subparsers.add_parser("report", help="merge run outputs into comparison tables")
    common(report)
    report.add_argument("--runs", nargs="*", default=[], help="run directories")
    report.add_argument("--experiment", choices=sorted(EXPERIMENTS))
    return parser


def _overrides(args: argparse.Namespace) -> Dict:
    overrides = {}
    if args.seed is not None:
        overrides["train.seed" if args.command == "train" else "init.seed"] = args.seed
    if args.command == "les":
        if args.cs is not None:
            overrides["les.cs"] = args.cs
        if args.no_clip:
            overrides["les.clip"] = False
    return overrides


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK

    try:
        manager = ConfigManager(args.config, _overrides(args))
        configure_logging(manager.get().system)
        if args.command == "dns":
            cmd_dns(manager, args.out, args.seed)
        elif args.command == "extract":
            cmd_extract(manager, args.archives, args.out)
        elif args.command == "train":
            cmd_train(manager, args.datasets, args.out, args.network, args.feature_set)
        elif args.command == "les":
            cmd_les(manager, args.archive, args.out, args.mode, args.checkpoint, args.cfl)
        elif args.command == "report":
            cmd_report(manager, args.runs, args.out, args.experiment)
    except ConfigurationError as e:
        logger.error(f"configuration error: {e}")
        return EXIT_USAGE
    except PerfectLESError as e:
        logger.error(f"{args.command} failed: {e}")
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
