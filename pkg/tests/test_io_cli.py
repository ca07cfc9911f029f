"""
PerfectLES — File Format and Command Line Tests
===============================================
Run: python3 -m pytest tests/test_io_cli.py -v
"""

import math
import os
import sys
import tempfile
import unittest
from pathlib import Path
from unittest import mock

import numpy as np

sys.path.insert(0, str(Path(__file__).parent.parent))


def small_field(time=1.25):
    from pl_basis import CartesianMesh, NodalBasis
    from pl_dgsem import SolutionField
    rng = np.random.default_rng(0)
    return SolutionField(CartesianMesh(2), NodalBasis.from_degree(2), rng.normal(size=(5, 2, 2, 2, 3, 3, 3)), time)


def small_dataset(n=4, p=3):
    from pl_filter import ClosureDataset
    rng = np.random.default_rng(1)
    return ClosureDataset(
        rng.normal(size=(n, 6, p, p, p)), rng.normal(size=(n, 3, p, p, p)), rng.normal(size=(n, 3, p, p, p)),
        ["seed1"] * n, np.linspace(1.0, 1.3, n), np.arange(3 * n).reshape(n, 3) % 2, "validation",
        {"runs": {"seed1": {"seed": 1}}},
    )


class TempDirTestCase(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()


class TestContainers(TempDirTestCase):
    """Tests for snapshot, dataset and checkpoint containers"""

    def test_snapshot_round_trip(self):
        from pl_fluxes import GasModel
        from pl_io import encode_snapshot, read_snapshot, write_snapshot
        gas = GasModel(mu0=0.02)
        state = small_field()
        path = self.dir / "state_000001.dhit"
        write_snapshot(path, state, gas, "tendency", seed=4)
        loaded, header = read_snapshot(path)
        np.testing.assert_array_equal(loaded.data, state.data)
        self.assertEqual(loaded.time, 1.25)
        self.assertEqual(header["kind"], "tendency")
        self.assertEqual(header["seed"], 4)
        self.assertEqual(header["mu0"], 0.02)
        self.assertEqual(encode_snapshot(loaded, gas, "tendency", seed=4), path.read_bytes())

    def test_snapshot_payload_order(self):
        from pl_fluxes import GasModel
        from pl_io import decode_container, encode_snapshot, SNAPSHOT_MAGIC
        state = small_field()
        _, payload = decode_container(encode_snapshot(state, GasModel()), SNAPSHOT_MAGIC)
        values = np.frombuffer(payload, dtype="<f8")
        self.assertEqual(values[0], state.data[0, 0, 0, 0, 0, 0, 0])
        self.assertEqual(values[1], state.data[1, 0, 0, 0, 0, 0, 0])
        self.assertEqual(values[5], state.data[0, 0, 0, 0, 0, 0, 1])

    def test_snapshot_bytes(self):
        from pl_io import snapshot_bytes
        self.assertEqual(snapshot_bytes(16, 3), 16 ** 3 * 4 ** 3 * 5 * 8)

    def test_corruption_detected(self):
        from pl_errors import FormatError
        from pl_fluxes import GasModel
        from pl_io import read_snapshot, write_snapshot
        path = self.dir / "state.dhit"
        write_snapshot(path, small_field(), GasModel())
        good = path.read_bytes()

        for label, data in (
            ("magic", b"XXXXXXXX" + good[8:]),
            ("header", good[:20] + bytes([good[20] ^ 0xFF]) + good[21:]),
            ("payload", good[:-3] + bytes([good[-3] ^ 0x01]) + good[-2:]),
            ("truncated", good[:-8]),
            ("short", good[:6]),
        ):
            path.write_bytes(data)
            with self.assertRaises(FormatError, msg=label):
                read_snapshot(path)
        with self.assertRaises(FormatError):
            read_snapshot(self.dir / "absent.dhit")

    def test_wrong_container_kind(self):
        from pl_errors import FormatError
        from pl_io import read_snapshot, write_dataset
        path = self.dir / "train.ctrn"
        write_dataset(path, small_dataset())
        with self.assertRaises(FormatError):
            read_snapshot(path)

    def test_dataset_round_trip(self):
        from pl_io import encode_dataset, read_dataset, write_dataset
        dataset = small_dataset()
        path = self.dir / "validation.ctrn"
        write_dataset(path, dataset)
        loaded = read_dataset(path)
        for name in ("features", "labels", "aux", "times", "elements"):
            np.testing.assert_array_equal(getattr(loaded, name), getattr(dataset, name), err_msg=name)
        self.assertEqual(loaded.run_ids, dataset.run_ids)
        self.assertEqual(loaded.split, "validation")
        self.assertEqual(loaded.provenance, dataset.provenance)
        self.assertEqual(encode_dataset(loaded), path.read_bytes())

    def test_checkpoint_round_trip(self):
        from pl_io import read_checkpoint, write_checkpoint
        from pl_nn_layers import AdamState, build_network
        net = build_network("RNN1", nf1=4, nf2=4, p=3, seed=2)
        net.forward(np.random.default_rng(3).normal(size=(2, 6, 3, 3, 3)), train=True)
        optimizer = AdamState.for_params(net.parameters())
        optimizer.step = 7
        optimizer.m["stem.b"][...] = 0.5
        path = self.dir / "checkpoint.nnck"
        write_checkpoint(path, net, optimizer, {"feature_set": 1, "training_runs": ["seed1"]})
        loaded, opt, extra = read_checkpoint(path)
        self.assertEqual(loaded.tag, "RNN1")
        for key, value in net.state_dict().items():
            np.testing.assert_array_equal(loaded.state_dict()[key], value, err_msg=key)
        self.assertEqual(opt.step, 7)
        np.testing.assert_array_equal(opt.m["stem.b"], 0.5)
        self.assertEqual(extra, {"feature_set": 1, "training_runs": ["seed1"]})

    def test_checkpoint_without_optimizer(self):
        from pl_io import read_checkpoint, write_checkpoint
        from pl_nn_layers import build_network
        path = self.dir / "mlp.nnck"
        write_checkpoint(path, build_network("MLP100", p=3))
        loaded, opt, extra = read_checkpoint(path)
        self.assertIsNone(opt)
        self.assertEqual(extra, {})
        self.assertEqual(loaded.n_parameters, 1003)


class TestTablesAndStorage(TempDirTestCase):
    """Tests for CSV, manifest and storage helpers"""

    def test_csv_undefined_and_precision(self):
        import pandas as pd
        from pl_io import read_csv, write_csv
        path = self.dir / "table.csv"
        write_csv(path, pd.DataFrame({"t": [0.1, 0.2], "cc": [0.5, math.nan]}))
        text = path.read_text()
        self.assertIn("undefined", text)
        self.assertIn("0.10000000000000001", text)
        frame = read_csv(path)
        self.assertEqual(frame["t"].iloc[0], 0.1)
        self.assertTrue(math.isnan(frame["cc"].iloc[1]))

    def test_manifest_numpy_values(self):
        from pl_io import read_manifest, write_manifest
        path = self.dir / "manifest.json"
        write_manifest(path, {"n": np.int64(3), "x": np.float64(0.5), "arr": np.arange(2), "path": self.dir})
        manifest = read_manifest(path)
        self.assertEqual(manifest["n"], 3)
        self.assertEqual(manifest["arr"], [0, 1])
        self.assertEqual(manifest["path"], str(self.dir))

    def test_storage_cap(self):
        from pl_errors import ConfigurationError
        from pl_io import check_storage
        with self.assertRaises(ConfigurationError):
            check_storage(2 * 1024 ** 3, 1.0, self.dir)
        check_storage(1024, 1.0, self.dir / "not" / "yet")


def write_run(run_dir, label, times, energies):
    import pandas as pd
    from pl_io import write_csv, write_manifest
    run_dir = Path(run_dir)
    write_manifest(run_dir / "manifest.json", {"label": label})
    write_csv(run_dir / "energy_trace.csv", pd.DataFrame({"t": times, "ke": energies}))
    rows = [{"t": t, "k": k, "E": e / (k + 1.0)} for t, e in zip(times, energies) for k in range(3)]
    write_csv(run_dir / "spectra.csv", pd.DataFrame(rows))


class TestReport(TempDirTestCase):
    """Tests for cmd_report and default_split"""

    def setUp(self):
        super().setUp()
        from pl_config import ConfigManager
        self.manager = ConfigManager()

    def test_default_split(self):
        from pl_cli import default_split
        runs = [f"seed{i}" for i in range(6, 0, -1)]
        self.assertEqual(default_split(runs), (["seed1", "seed2", "seed3", "seed4"], ["seed5"], ["seed6"]))
        self.assertEqual(default_split(["seed2", "seed1"]), (["seed1"], ["seed2"], []))
        self.assertEqual(default_split(["seed1"]), (["seed1"], [], []))

    def test_single_run_passes_through(self):
        from pl_cli import cmd_report
        from pl_io import read_csv
        write_run(self.dir / "a", "none", [0.0, 0.1, 0.2], [3.0, 2.0, 1.0])
        manifest = cmd_report(self.manager, [self.dir / "a"], self.dir / "report")
        ke = read_csv(self.dir / "report" / "ke_comparison.csv")
        self.assertEqual(list(ke.columns), ["t", "none"])
        np.testing.assert_allclose(ke["none"], [3.0, 2.0, 1.0])
        self.assertEqual(manifest["labels"], ["none"])
        self.assertAlmostEqual(manifest["spectra_time"], 0.2)

    def test_duplicate_labels_and_interpolation(self):
        from pl_cli import cmd_report
        from pl_io import read_csv
        write_run(self.dir / "a", "none", [0.0, 0.1, 0.2], [3.0, 2.0, 1.0])
        write_run(self.dir / "b", "none", [0.0, 0.1, 0.2], [3.0, 2.5, 2.0])
        write_run(self.dir / "c", "perfect", [0.0, 0.2], [3.0, 1.0])
        cmd_report(self.manager, [self.dir / n for n in "abc"], self.dir / "report")
        ke = read_csv(self.dir / "report" / "ke_comparison.csv")
        self.assertEqual(list(ke.columns), ["t", "none", "none-2", "perfect"])
        np.testing.assert_allclose(ke["none-2"], [3.0, 2.5, 2.0])
        np.testing.assert_allclose(ke["perfect"], [3.0, 2.0, 1.0])
        spectra = read_csv(self.dir / "report" / "spectra_comparison.csv")
        self.assertEqual(list(spectra.columns), ["t", "k", "none", "none-2", "perfect"])
        np.testing.assert_allclose(spectra["t"], 0.2)
        np.testing.assert_allclose(spectra["perfect"], [1.0, 0.5, 1.0 / 3.0])

    def test_missing_file(self):
        from pl_cli import cmd_report
        from pl_errors import FormatError
        write_run(self.dir / "a", "none", [0.0, 0.1], [3.0, 2.0])
        (self.dir / "a" / "spectra.csv").unlink()
        with self.assertRaises(FormatError):
            cmd_report(self.manager, [self.dir / "a"], self.dir / "report")


TINY_PIPELINE = {
    "init.kp": 2.0,
    "init.spectral_resolution": 8,
    "dns.elements_per_dir": 2,
    "dns.degree": 1,
    "dns.t_end": 0.02,
    "dns.archive_start": 0.01,
    "dns.archive_end": 0.02,
    "les.elements_per_dir": 1,
    "les.degree": 1,
    "les.t_start": 0.01,
    "les.t_end": 0.02,
    "les.output_interval": 0.01,
    "extract.sample_start": 0.01,
    "extract.sample_end": 0.02,
    "extract.sample_interval": 0.01,
    "train.network": "RNN0",
    "train.nf1": 4,
    "train.nf2": 4,
    "train.batch_size": 4,
    "train.epochs": 2,
}


class TestPipeline(unittest.TestCase):
    """dns -> extract -> train -> les -> report on a 2^3 element DNS"""

    @classmethod
    def setUpClass(cls):
        from pl_cli import cmd_dns, cmd_extract, cmd_les, cmd_train
        from pl_config import ConfigManager
        cls.tmp = tempfile.TemporaryDirectory()
        cls.dir = Path(cls.tmp.name)
        cls.manager = ConfigManager(None, TINY_PIPELINE)
        cls.dns = {seed: cmd_dns(cls.manager, cls.dir / f"seed{seed}", seed) for seed in (1, 2, 3)}
        cls.extract = cmd_extract(cls.manager, [str(cls.dir / f"seed{s}") for s in (1, 2, 3)], cls.dir / "data")
        cls.train = cmd_train(cls.manager, cls.dir / "data", cls.dir / "net")
        cls.perfect = cmd_les(cls.manager, cls.dir / "seed3", cls.dir / "les_perfect", mode="perfect")
        cls.eddy = cmd_les(cls.manager, cls.dir / "seed3", cls.dir / "les_eddy", mode="ann-eddy",
                           checkpoint=str(cls.dir / "net" / "checkpoint.nnck"))

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()

    def test_dns_archive(self):
        from pl_cli import load_pair
        manifest = self.dns[1]
        times = [round(e["time"], 9) for e in manifest["entries"]]
        self.assertIn(0.01, times)
        self.assertIn(0.02, times)
        self.assertEqual(manifest["run_id"], "seed1")
        state, tendency = load_pair(self.dir / "seed1", manifest["entries"][0])
        self.assertEqual(state.data.shape, (5, 2, 2, 2, 2, 2, 2))
        self.assertEqual(state.time, tendency.time)
        self.assertTrue((self.dir / "seed1" / "filtered" / "spectra.csv").exists())

    def test_extract_splits_by_run(self):
        from pl_io import read_csv, read_dataset
        self.assertEqual(self.extract["splits"], {"training": ["seed1"], "validation": ["seed2"], "test": ["seed3"]})
        self.assertEqual(self.extract["samples"]["training"], 2)
        self.assertEqual(self.extract["hidden_test_runs"], ["seed3"])
        training = read_dataset(self.dir / "data" / "training.ctrn")
        self.assertEqual(training.features.shape, (2, 6, 2, 2, 2))
        self.assertTrue(np.all(np.isfinite(training.labels)))
        budget = read_csv(self.dir / "data" / "closure_budget.csv")
        self.assertEqual(len(budget), sum(len(m["entries"]) for m in self.dns.values()))
        table = read_csv(self.dir / "data" / "correlations.csv")
        self.assertEqual(list(table.columns), ["feature", "Y1", "Y2", "Y3"])

    def test_training_outputs(self):
        from pl_io import read_checkpoint, read_csv
        self.assertEqual(len(read_csv(self.dir / "net" / "curves.csv")), 3)
        network, optimizer, extra = read_checkpoint(self.dir / "net" / "checkpoint.nnck")
        self.assertEqual(network.tag, "RNN0")
        self.assertEqual(extra["training_runs"], ["seed1"])
        self.assertGreater(optimizer.step, 0)
        self.assertEqual(self.train["test_runs"], ["seed3"])
        self.assertEqual(len(self.train["test_cc"]), 3)

    def test_perfect_les_tracks_filtered_dns(self):
        self.assertEqual(self.perfect["label"], "perfect")
        self.assertAlmostEqual(self.perfect["final_time"], 0.02)
        self.assertLess(self.perfect["final_recovery_error"], 1e-2)
        self.assertTrue((self.dir / "les_perfect" / "recovery.csv").exists())

    def test_eddy_les_logs_viscosity(self):
        self.assertEqual(self.eddy["label"], "ann-eddy")
        self.assertGreater(self.eddy["final_kinetic_energy"], 0.0)
        self.assertTrue((self.dir / "les_eddy" / "viscosity.csv").exists())

    def test_report_merges_runs(self):
        from pl_cli import cmd_report
        from pl_io import read_csv
        out = self.dir / "report"
        cmd_report(self.manager, [self.dir / "les_perfect", self.dir / "les_eddy", self.dir / "seed3" / "filtered"], out)
        ke = read_csv(out / "ke_comparison.csv")
        self.assertEqual(list(ke.columns), ["t", "perfect", "ann-eddy", "filtered-dns"])
        self.assertTrue(np.all(np.isfinite(ke["perfect"])))


class TestMain(TempDirTestCase):
    """Tests for the command-line entry point and its exit codes"""

    def setUp(self):
        super().setUp()
        patcher = mock.patch.dict(os.environ, {"PERFECTLES_LOG_FILE": str(self.dir / "logs" / "cli.log")})
        patcher.start()
        self.addCleanup(patcher.stop)

    def test_usage_errors(self):
        from pl_cli import EXIT_OK, EXIT_USAGE, main
        with mock.patch("sys.stderr"), mock.patch("sys.stdout"):
            self.assertEqual(main([]), EXIT_USAGE)
            self.assertEqual(main(["dns"]), EXIT_USAGE)
            self.assertEqual(main(["simulate", "--out", str(self.dir)]), EXIT_USAGE)
            self.assertEqual(main(["--help"]), EXIT_OK)

    def test_missing_config_file(self):
        from pl_cli import EXIT_USAGE, main
        code = main(["report", "--config", str(self.dir / "absent.conf"), "--out", str(self.dir / "r")])
        self.assertEqual(code, EXIT_USAGE)

    def test_ann_mode_needs_checkpoint(self):
        from pl_cli import EXIT_USAGE, main
        code = main(["les", "--archive", str(self.dir), "--mode", "ann-direct", "--out", str(self.dir / "les")])
        self.assertEqual(code, EXIT_USAGE)

    def test_missing_run_files_fail(self):
        from pl_cli import EXIT_FAILURE, main
        code = main(["report", "--runs", str(self.dir / "nowhere"), "--out", str(self.dir / "r")])
        self.assertEqual(code, EXIT_FAILURE)

    def test_report_command(self):
        from pl_cli import EXIT_OK, main
        write_run(self.dir / "a", "smagorinsky-cs0.17", [0.0, 0.1], [3.0, 2.0])
        code = main(["report", "--runs", str(self.dir / "a"), "--out", str(self.dir / "r")])
        self.assertEqual(code, EXIT_OK)
        self.assertTrue((self.dir / "r" / "ke_comparison.csv").exists())

    def test_seed_overrides(self):
        import argparse
        from pl_cli import _overrides
        args = argparse.Namespace(command="train", seed=3)
        self.assertEqual(_overrides(args), {"train.seed": 3})
        args = argparse.Namespace(command="les", seed=None, cs=0.1, no_clip=True)
        self.assertEqual(_overrides(args), {"les.cs": 0.1, "les.clip": False})


if __name__ == "__main__":
    unittest.main()
