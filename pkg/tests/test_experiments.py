"""
PerfectLES — Experiment Driver Tests
====================================
Run: python3 -m pytest tests/test_experiments.py -v
"""

import math
from unittest import mock
import sys
import tempfile
import unittest
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent.parent))


class TestExperimentHelpers(unittest.TestCase):
    """Tests for shared experiment plumbing"""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def test_analytic_dataset(self):
        from pl_experiments import analytic_dataset
        dataset = analytic_dataset(3, 5, 0, "validation")
        self.assertEqual(dataset.features.shape, (5, 6, 3, 3, 3))
        np.testing.assert_array_equal(dataset.labels, dataset.features[:, :3] ** 2)
        self.assertEqual(dataset.split, "validation")
        self.assertEqual(dataset.runs, ["synthetic-validation"])

    def test_mean_defined(self):
        from pl_experiments import _mean_defined
        self.assertAlmostEqual(_mean_defined([0.2, None, 0.4]), 0.3)
        self.assertTrue(math.isnan(_mean_defined([None, None])))

    def test_window_manager(self):
        from pl_config import ConfigManager
        from pl_experiments import _window_manager
        base = ConfigManager()
        dns = base.get().dns
        window = _window_manager(base, 0.5, "llf").get()
        self.assertEqual(window.dns.t_end, dns.archive_end)
        self.assertEqual(window.dns.archive_dt_scale, 0.5)
        self.assertEqual(window.les.t_start, dns.archive_start)
        self.assertEqual(window.les.t_end, dns.archive_end)
        self.assertEqual(window.les.riemann, "llf")
        self.assertEqual(base.get().les.riemann, "roe-lowdiss")

    def test_cached_reuses_manifest(self):
        from pl_experiments import _cached
        from pl_io import write_manifest
        calls = []
        run_dir = self.dir / "run"
        self.assertEqual(_cached(run_dir, lambda: calls.append(1) or {"fresh": True}), {"fresh": True})
        write_manifest(run_dir / "manifest.json", {"fresh": False})
        self.assertEqual(_cached(run_dir, lambda: calls.append(1) or {"fresh": True}), {"fresh": False})
        self.assertEqual(len(calls), 1)

    def test_top_third_energy(self):
        import pandas as pd
        from pl_experiments import _top_third_energy
        rows = [{"t": t, "k": k, "E": 1.0 + k, "k_cut_3ppw": 4.0} for t in (0.5, 1.0) for k in range(8)]
        self.assertAlmostEqual(_top_third_energy(pd.DataFrame(rows), 0.99), 6.0 + 7.0)

    def test_unknown_experiment(self):
        from pl_config import ConfigManager
        from pl_errors import ConfigurationError
        from pl_experiments import run_experiment
        with self.assertRaises(ConfigurationError):
            run_experiment("nonexistent", ConfigManager(), self.dir)

    def test_decay_exponent_from_existing_runs(self):
        from pl_config import ConfigManager
        from pl_experiments import DESK_RUNS, run_experiment
        from pl_io import read_manifest, write_manifest
        manager = ConfigManager()
        base = manager.get().init.seed
        for i, seed in enumerate(range(base, base + DESK_RUNS)):
            write_manifest(self.dir / "dns" / f"seed{seed}" / "manifest.json",
                           {"decay_exponent": None if i == 0 else -2.0 + 0.1 * i})
        metrics = run_experiment("decay_exponent", manager, self.dir)
        self.assertTrue(metrics["passed"])
        self.assertIsNone(metrics["exponents"][0])
        saved = read_manifest(self.dir / "experiment_decay_exponent.json")
        self.assertEqual(saved["experiment"], "decay_exponent")

    def test_decay_exponent_out_of_band(self):
        from pl_config import ConfigManager
        from pl_experiments import DESK_RUNS, decay_exponent
        from pl_io import write_manifest
        manager = ConfigManager()
        base = manager.get().init.seed
        for seed in range(base, base + DESK_RUNS):
            write_manifest(self.dir / "dns" / f"seed{seed}" / "manifest.json", {"decay_exponent": -0.5})
        self.assertFalse(decay_exponent(manager, self.dir)["passed"])

    def test_energy_conservation_on_small_mesh(self):
        from pl_config import ConfigManager
        from pl_experiments import ENERGY_DRIFT_TOLERANCE, run_experiment
        from pl_io import read_manifest
        manager = ConfigManager(None, {
            "init.kp": 2.0, "init.spectral_resolution": 8,
            "dns.elements_per_dir": 2, "dns.degree": 1, "dns.t_end": 0.02,
            "dns.archive_start": 0.01, "dns.archive_end": 0.02,
            "les.elements_per_dir": 1, "les.degree": 1, "les.t_start": 0.01, "les.t_end": 0.02,
            "les.output_interval": 0.01,
            "extract.sample_start": 0.01, "extract.sample_end": 0.02, "extract.sample_interval": 0.01,
        })
        with mock.patch("pl_experiments.ENERGY_DRIFT_STEPS", 20):
            metrics = run_experiment("energy_conservation", manager, self.dir)
        self.assertEqual(metrics["steps"], 20)
        self.assertTrue(math.isfinite(metrics["drift"]))
        self.assertEqual(metrics["passed"], metrics["drift"] < ENERGY_DRIFT_TOLERANCE)
        self.assertEqual(read_manifest(self.dir / "experiment_energy_conservation.json")["steps"], 20)


if __name__ == "__main__":
    unittest.main()
