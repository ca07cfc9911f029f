"""
PerfectLES — Flux Tests
=======================
Run: python3 -m pytest tests/test_fluxes.py -v
"""

import sys
import unittest
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent.parent))


def _state(rho, u, v, w, p, gamma=1.4):
    return np.array([rho, rho * u, rho * v, rho * w, p / (gamma - 1.0) + 0.5 * rho * (u * u + v * v + w * w)])


class TestGasAndPrimitives(unittest.TestCase):
    """Tests for GasModel and state conversion"""

    def test_gas_validation(self):
        from pl_errors import ConfigurationError
        from pl_fluxes import GasModel
        with self.assertRaises(ConfigurationError):
            GasModel(gamma=1.0)
        with self.assertRaises(ConfigurationError):
            GasModel(mu0=-1.0)

    def test_from_settings(self):
        from pl_config import GasSettings
        from pl_fluxes import GasModel
        gas = GasModel.from_settings(GasSettings())
        self.assertEqual(gas.mu0, 0.03)
        self.assertAlmostEqual(gas.c_p, 3.5)

    def test_sound_speed(self):
        from pl_fluxes import GasModel, sound_speed
        gas = GasModel()
        self.assertAlmostEqual(float(sound_speed(1.0, 1.0 / 1.4, gas)), 1.0, places=14)
        np.testing.assert_allclose(sound_speed(np.array([1.0, 4.0]), np.array([1.4, 1.4]), gas) ** 2, [1.96, 0.49])

    def test_primitive_round_trip(self):
        from pl_fluxes import GasModel, conservative_from_primitive, primitive_from_conservative
        gas = GasModel()
        U = conservative_from_primitive(1.2, 0.3, -0.1, 0.2, 0.9, gas)
        rho, u, v, w, p, T = primitive_from_conservative(U, gas)
        self.assertAlmostEqual(float(rho), 1.2)
        self.assertAlmostEqual(float(v), -0.1)
        self.assertAlmostEqual(float(p), 0.9)
        self.assertAlmostEqual(float(T), 0.75)

    def test_negative_density_reports_location(self):
        from pl_errors import StateInvalidError
        from pl_fluxes import GasModel, primitive_from_conservative
        U = np.ones((5, 2, 2, 2, 3, 3, 3))
        U[4] = 5.0
        U[0, 1, 0, 1, 2, 0, 1] = -1.0
        with self.assertRaises(StateInvalidError) as ctx:
            primitive_from_conservative(U, GasModel())
        self.assertEqual(ctx.exception.element, (1, 0, 1))
        self.assertEqual(ctx.exception.node, (2, 0, 1))


class TestConvectiveFlux(unittest.TestCase):
    """Tests for euler_flux, split_volume_flux and riemann_flux"""

    def setUp(self):
        from pl_fluxes import GasModel
        self.gas = GasModel()

    def test_euler_flux_example(self):
        from pl_fluxes import euler_flux
        F = euler_flux(np.array([1.0, 1.0, 0.0, 0.0, 3.0]), 0, self.gas)
        np.testing.assert_allclose(F, [1.0, 2.0, 0.0, 0.0, 4.0], atol=1e-14)

    def test_split_flux_consistent(self):
        from pl_fluxes import euler_flux, split_volume_flux
        U = _state(1.1, 0.2, -0.3, 0.4, 0.8)
        for d in range(3):
            np.testing.assert_allclose(split_volume_flux(U, U, d, self.gas), euler_flux(U, d, self.gas), atol=1e-14)

    def test_split_flux_symmetric(self):
        from pl_fluxes import split_volume_flux
        UL = _state(1.1, 0.2, -0.3, 0.4, 0.8)
        UR = _state(0.9, -0.1, 0.0, 0.3, 1.2)
        np.testing.assert_allclose(split_volume_flux(UL, UR, 1, self.gas), split_volume_flux(UR, UL, 1, self.gas))

    def test_riemann_consistency_all_variants(self):
        from pl_fluxes import RIEMANN_VARIANTS, euler_flux, riemann_flux
        U = _state(1.0, 0.3, 0.1, -0.2, 1.0)
        for variant in RIEMANN_VARIANTS:
            for d in range(3):
                np.testing.assert_allclose(
                    riemann_flux(U, U, d, self.gas, variant), euler_flux(U, d, self.gas), atol=1e-13,
                    err_msg=variant,
                )

    def test_roe_supersonic_upwind(self):
        from pl_fluxes import euler_flux, riemann_flux
        UL = _state(1.0, 3.0, 0.1, 0.0, 1.0)
        UR = _state(1.2, 2.9, 0.0, 0.1, 1.1)
        for variant in ("roe", "roe-lowdiss"):
            np.testing.assert_allclose(
                riemann_flux(UL, UR, 0, self.gas, variant), euler_flux(UL, 0, self.gas), rtol=1e-10, atol=1e-12,
            )

    def test_llf_supersonic_is_not_upwind(self):
        from pl_fluxes import euler_flux, riemann_flux
        UL = _state(1.0, 3.0, 0.0, 0.0, 1.0)
        UR = _state(1.2, 2.9, 0.0, 0.0, 1.1)
        F = riemann_flux(UL, UR, 0, self.gas, "llf")
        self.assertGreater(float(np.max(np.abs(F - euler_flux(UL, 0, self.gas)))), 1e-3)

    def test_unknown_variant(self):
        from pl_errors import ConfigurationError
        from pl_fluxes import riemann_flux
        U = _state(1.0, 0.0, 0.0, 0.0, 1.0)
        with self.assertRaises(ConfigurationError):
            riemann_flux(U, U, 0, self.gas, "hllc")


class TestViscousFlux(unittest.TestCase):
    """Tests for primitive_gradients and viscous_flux"""

    def test_pure_shear(self):
        from pl_fluxes import GasModel, viscous_flux
        gas = GasModel(mu0=0.03)
        U = _state(1.0, 0.5, 0.0, 0.0, 1.0)
        grad_U = np.zeros((3, 5))
        grad_U[1, 1] = 1.0  # d(rho u)/dy
        grad_U[1, 4] = 0.5  # d(E)/dy keeping p uniform
        F = viscous_flux(U, grad_U, gas)
        self.assertAlmostEqual(F[1, 1], 0.03)
        self.assertAlmostEqual(F[0, 2], 0.03)
        self.assertAlmostEqual(F[1, 4], 0.015)
        self.assertAlmostEqual(F[0, 1], 0.0)
        self.assertAlmostEqual(F[2, 4], 0.0)

    def test_mu_override(self):
        from pl_fluxes import GasModel, viscous_flux
        gas = GasModel(mu0=0.03)
        U = _state(1.0, 0.5, 0.0, 0.0, 1.0)
        grad_U = np.zeros((3, 5))
        grad_U[1, 1] = 1.0
        grad_U[1, 4] = 0.5
        self.assertAlmostEqual(viscous_flux(U, grad_U, gas, mu=0.1)[1, 1], 0.1)


if __name__ == "__main__":
    unittest.main()
