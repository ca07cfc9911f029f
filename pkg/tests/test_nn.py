"""
PerfectLES — Network Layer and Training Tests
=============================================
Run: python3 -m pytest tests/test_nn.py -v
"""

import sys
import unittest
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent.parent))


def numeric_grad(f, arr, indices, eps=1e-6):
    """Central differences of scalar ``f()`` with respect to ``arr`` at ``indices``."""
    out = []
    for idx in indices:
        saved = arr[idx]
        arr[idx] = saved + eps
        plus = f()
        arr[idx] = saved - eps
        minus = f()
        arr[idx] = saved
        out.append((plus - minus) / (2.0 * eps))
    return np.array(out)


def all_indices(arr):
    return list(np.ndindex(arr.shape))


def sampled_indices(arr, count, rng):
    flat = rng.choice(arr.size, size=min(count, arr.size), replace=False)
    return [np.unravel_index(i, arr.shape) for i in flat]


def rel_error(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-300))


def small_dataset(n=6, p=3, seed=0, linear=True):
    from pl_filter import ClosureDataset
    rng = np.random.default_rng(seed)
    features = rng.normal(size=(n, 6, p, p, p))
    labels = 2.0 * features[:, 3:6] if linear else rng.normal(size=(n, 3, p, p, p))
    aux = rng.normal(size=(n, 3, p, p, p))
    return ClosureDataset(features, labels, aux, ["seed1"] * n, np.zeros(n), np.zeros((n, 3), dtype=int))


class TestConvolution(unittest.TestCase):
    """Tests for ConvLayer"""

    def test_ones_kernel_counts_neighbours(self):
        from pl_nn_layers import ConvLayer, conv3d_forward
        layer = ConvLayer(1, 1, 3)
        layer.params["W"][...] = 1.0
        y = conv3d_forward(np.full((1, 3, 3, 3), 2.0), layer)
        self.assertAlmostEqual(y[0, 1, 1, 1], 54.0)
        self.assertAlmostEqual(y[0, 0, 1, 1], 36.0)
        self.assertAlmostEqual(y[0, 0, 1, 0], 24.0)
        self.assertAlmostEqual(y[0, 0, 0, 0], 16.0)

    def test_matches_loop_oracle(self):
        from pl_nn_layers import ConvLayer
        rng = np.random.default_rng(0)
        layer = ConvLayer(2, 3, 3, rng)
        layer.params["b"][...] = rng.normal(size=3)
        x = rng.normal(size=(2, 2, 3, 3, 3))
        y = layer.forward(x)
        padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
        expected = np.zeros((2, 3, 3, 3, 3))
        for n in range(2):
            for o in range(3):
                for i, j, k in np.ndindex(3, 3, 3):
                    window = padded[n, :, i:i + 3, j:j + 3, k:k + 3]
                    expected[n, o, i, j, k] = np.sum(window * layer.W[o]) + layer.b[o]
        np.testing.assert_allclose(y, expected, atol=1e-12)

    def test_pointwise_kernel(self):
        from pl_nn_layers import ConvLayer
        rng = np.random.default_rng(1)
        layer = ConvLayer(4, 2, 1, rng)
        x = rng.normal(size=(3, 4, 2, 2, 2))
        expected = np.einsum("oc,ncxyz->noxyz", layer.W[:, :, 0, 0, 0], x)
        np.testing.assert_allclose(layer.forward(x), expected, atol=1e-13)

    def test_gradients(self):
        from pl_nn_layers import ConvLayer, conv3d_backward
        rng = np.random.default_rng(2)
        layer = ConvLayer(2, 3, 3, rng)
        x = rng.normal(size=(2, 2, 3, 3, 3))
        R = rng.normal(size=(2, 3, 3, 3, 3))
        f = lambda: float(np.sum(layer.forward(x) * R))
        dx, dW, db = (g.copy() for g in conv3d_backward(x, layer, R))
        self.assertLess(rel_error(dx.ravel(), numeric_grad(f, x, all_indices(x))), 1e-7)
        self.assertLess(rel_error(dW.ravel(), numeric_grad(f, layer.W, all_indices(layer.W))), 1e-7)
        self.assertLess(rel_error(db.ravel(), numeric_grad(f, layer.b, all_indices(layer.b))), 1e-7)

    def test_single_tensor_gradients(self):
        from pl_nn_layers import ConvLayer, conv3d_backward
        rng = np.random.default_rng(5)
        layer = ConvLayer(2, 2, 3, rng)
        x = rng.normal(size=(2, 3, 3, 3))
        R = rng.normal(size=(2, 3, 3, 3))
        dx, dW, db = conv3d_backward(x, layer, R)
        self.assertEqual(dx.shape, x.shape)
        batched, dW_b, db_b = conv3d_backward(x[None], layer, R[None])
        np.testing.assert_allclose(dx, batched[0], atol=1e-14)
        np.testing.assert_allclose(dW, dW_b, atol=1e-14)
        np.testing.assert_allclose(db, R.sum(axis=(1, 2, 3)), atol=1e-13)

    def test_even_kernel_rejected(self):
        from pl_errors import ConfigurationError
        from pl_nn_layers import ConvLayer
        with self.assertRaises(ConfigurationError):
            ConvLayer(1, 1, 2)

    def test_channel_mismatch(self):
        from pl_errors import ShapeError
        from pl_nn_layers import ConvLayer
        with self.assertRaises(ShapeError):
            ConvLayer(2, 1, 3).forward(np.zeros((1, 3, 3, 3, 3)))


class TestNormalizationAndActivation(unittest.TestCase):
    """Tests for BatchNorm and ReLU"""

    def test_train_mode_normalizes(self):
        from pl_nn_layers import BatchNorm
        rng = np.random.default_rng(3)
        bn = BatchNorm(2)
        x = rng.normal(loc=3.0, scale=2.0, size=(4, 2, 3, 3, 3))
        y = bn.forward(x, train=True)
        np.testing.assert_allclose(y.mean(axis=(0, 2, 3, 4)), 0.0, atol=1e-12)
        np.testing.assert_allclose(y.var(axis=(0, 2, 3, 4)), 1.0, rtol=1e-4)
        np.testing.assert_allclose(bn.buffers["running_mean"], 0.01 * x.mean(axis=(0, 2, 3, 4)), rtol=1e-12)

    def test_infer_mode_uses_running_stats(self):
        from pl_nn_layers import BatchNorm, batchnorm_forward
        bn = BatchNorm(1)
        bn.params["gamma"][...] = 2.0
        bn.params["beta"][...] = 0.5
        x = np.full((1, 1, 2, 2, 2), 3.0)
        np.testing.assert_allclose(batchnorm_forward(x, bn, "infer"), 2.0 * 3.0 / np.sqrt(1.0 + 1e-5) + 0.5)

    def test_single_sample_train_batch_rejected(self):
        from pl_errors import ShapeError
        from pl_nn_layers import BatchNorm
        with self.assertRaises(ShapeError):
            BatchNorm(1).forward(np.zeros((1, 1, 2, 2, 2)), train=True)

    def test_batchnorm_gradients(self):
        from pl_nn_layers import BatchNorm
        rng = np.random.default_rng(4)
        bn = BatchNorm(2)
        bn.params["gamma"][...] = rng.normal(size=2)
        bn.params["beta"][...] = rng.normal(size=2)
        x = rng.normal(size=(3, 2, 2, 2, 2))
        R = rng.normal(size=x.shape)
        f = lambda: float(np.sum(bn.forward(x, train=True) * R))
        bn.forward(x, train=True)
        dx = bn.backward(R)
        grads = {k: v.copy() for k, v in bn.grads.items()}
        self.assertLess(rel_error(dx.ravel(), numeric_grad(f, x, all_indices(x))), 1e-6)
        for key in ("gamma", "beta"):
            arr = bn.params[key]
            self.assertLess(rel_error(grads[key], numeric_grad(f, arr, all_indices(arr))), 1e-7, msg=key)

    def test_relu(self):
        from pl_nn_layers import ReLU, relu, relu_backward
        x = np.array([-1.0, 0.0, 2.0])
        np.testing.assert_array_equal(relu(x), [0.0, 0.0, 2.0])
        np.testing.assert_array_equal(relu_backward(x, np.ones(3)), [0.0, 0.0, 1.0])
        layer = ReLU()
        layer.forward(x)
        np.testing.assert_array_equal(layer.backward(np.full(3, 5.0)), [0.0, 0.0, 5.0])


class TestNetworks(unittest.TestCase):
    """Tests for ResidualBlock, build_network and the parameter maps"""

    def _check_network_gradients(self, net, x, tol):
        rng = np.random.default_rng(5)
        R = rng.normal(size=(x.shape[0], net.spec.out_channels) + x.shape[2:])
        f = lambda: float(np.sum(net.forward(x, train=True) * R))
        net.forward(x, train=True)
        dx = net.backward(R)
        grads = {k: v.copy() for k, v in net.gradients().items()}
        idx = sampled_indices(x, 30, rng)
        self.assertLess(rel_error(dx[tuple(np.array(idx).T)], numeric_grad(f, x, idx)), tol)
        for key, arr in net.parameters().items():
            idx = sampled_indices(arr, 12, rng)
            analytic = grads[key][tuple(np.array(idx).T)]
            self.assertLess(rel_error(analytic, numeric_grad(f, arr, idx)), tol, msg=key)

    def test_residual_block_identity_plus_branch(self):
        from pl_nn_layers import ResidualBlock, residual_block_forward
        rng = np.random.default_rng(6)
        block = ResidualBlock(2, 3, rng)
        x = rng.normal(size=(2, 2, 3, 3, 3))
        np.testing.assert_allclose(residual_block_forward(x, block), x + block.branch.forward(x))

    def test_residual_block_gradients(self):
        from pl_nn_layers import ResidualBlock
        rng = np.random.default_rng(7)
        block = ResidualBlock(2, 3, rng)
        x = rng.normal(size=(3, 2, 3, 3, 3))
        R = rng.normal(size=x.shape)
        f = lambda: float(np.sum(block.forward(x, train=True) * R))
        block.forward(x, train=True)
        dx = block.backward(R)
        idx = sampled_indices(x, 40, rng)
        self.assertLess(rel_error(dx[tuple(np.array(idx).T)], numeric_grad(f, x, idx)), 1e-5)
        conv1 = dict(block.children())["conv1"]
        grad_W = conv1.grads["W"].copy()
        idx = sampled_indices(conv1.W, 20, rng)
        self.assertLess(rel_error(grad_W[tuple(np.array(idx).T)], numeric_grad(f, conv1.params["W"], idx)), 1e-5)

    def test_rnn1_gradients(self):
        from pl_nn_layers import build_network
        net = build_network("RNN1", nf1=4, nf2=4, p=3, seed=1)
        x = np.random.default_rng(8).normal(size=(3, 6, 3, 3, 3))
        self._check_network_gradients(net, x, 1e-5)

    def test_mlp100_gradients(self):
        from pl_nn_layers import build_network
        net = build_network("MLP100", p=3, seed=2)
        x = np.random.default_rng(9).normal(size=(2, 6, 3, 3, 3))
        self._check_network_gradients(net, x, 1e-6)

    def test_mlp100_parameter_count(self):
        from pl_nn_layers import build_network
        self.assertEqual(build_network("MLP100").n_parameters, 1003)

    def test_rnn_layout(self):
        from pl_nn_layers import build_network
        net = build_network("RNN2", nf1=8, nf2=16, p=4, seed=0)
        names = [name for name, _ in net.layers]
        self.assertEqual(names[0], "stem")
        self.assertEqual(names[1:3], ["block0", "block1"])
        self.assertEqual(names[-1], "output")
        self.assertEqual(net.parameters()["compress0.W"].shape, (16, 8, 1, 1, 1))
        self.assertEqual(net.parameters()["compress1.W"].shape, (8, 16, 1, 1, 1))
        self.assertEqual(net.forward(np.zeros((2, 6, 4, 4, 4))).shape, (2, 3, 4, 4, 4))

    def test_seeded_initialization(self):
        from pl_nn_layers import build_network
        a = build_network("RNN1", nf1=4, nf2=4, p=3, seed=11).parameters()
        b = build_network("RNN1", nf1=4, nf2=4, p=3, seed=11).parameters()
        c = build_network("RNN1", nf1=4, nf2=4, p=3, seed=12).parameters()
        for key in a:
            np.testing.assert_array_equal(a[key], b[key])
        self.assertFalse(np.allclose(a["stem.W"], c["stem.W"]))

    def test_state_dict_round_trip(self):
        from pl_errors import ShapeError
        from pl_nn_layers import build_network
        source = build_network("RNN1", nf1=4, nf2=4, p=3, seed=1)
        source.forward(np.random.default_rng(0).normal(size=(2, 6, 3, 3, 3)), train=True)
        target = build_network("RNN1", nf1=4, nf2=4, p=3, seed=2)
        target.load_state_dict(source.state_dict())
        for key, value in source.state_dict().items():
            np.testing.assert_array_equal(target.state_dict()[key], value)
        with self.assertRaises(ShapeError):
            build_network("RNN0", nf1=4, nf2=4, p=3).load_state_dict(source.state_dict())

    def test_input_shape_checked(self):
        from pl_errors import ConfigurationError, ShapeError
        from pl_nn_layers import build_network
        with self.assertRaises(ShapeError):
            build_network("RNN0", p=3).forward(np.zeros((1, 6, 4, 4, 4)))
        with self.assertRaises(ConfigurationError):
            build_network("RNN3")


class TestCostAndOptimizer(unittest.TestCase):
    """Tests for cost_lgl, adam_step and lr_schedule"""

    def test_lgl_weighted_cost(self):
        from pl_basis import NodalBasis
        from pl_nn_layers import cost_lgl
        w3 = NodalBasis.from_degree(2).weights3d
        pred = np.ones((2, 3, 3, 3, 3))
        self.assertAlmostEqual(cost_lgl(pred, np.zeros_like(pred), w3), 48.0)
        self.assertAlmostEqual(cost_lgl(pred, np.zeros_like(pred), w3, "mean"), 24.0)

    def test_cost_gradient(self):
        from pl_basis import NodalBasis
        from pl_nn_layers import cost_lgl, cost_lgl_grad
        rng = np.random.default_rng(10)
        w3 = NodalBasis.from_degree(2).weights3d
        pred = rng.normal(size=(1, 3, 3, 3, 3))
        label = rng.normal(size=pred.shape)
        idx = sampled_indices(pred, 10, rng)
        numeric = numeric_grad(lambda: cost_lgl(pred, label, w3), pred, idx)
        analytic = cost_lgl_grad(pred, label, w3)[tuple(np.array(idx).T)]
        self.assertLess(rel_error(analytic, numeric), 1e-8)

    def test_adam_first_step(self):
        from pl_nn_layers import AdamState, adam_step
        params = {"x": np.array([1.0, -2.0])}
        state = AdamState.for_params(params)
        adam_step(params, {"x": np.array([0.5, -3.0])}, state, lr=0.1)
        np.testing.assert_allclose(params["x"], [0.9, -1.9], atol=1e-7)
        self.assertEqual(state.step, 1)

    def test_adam_minimizes_quadratic(self):
        from pl_nn_layers import AdamState, adam_step
        params = {"x": np.array([3.0])}
        state = AdamState.for_params(params)
        for _ in range(2000):
            adam_step(params, {"x": 2.0 * (params["x"] - 1.0)}, state, lr=0.01)
        self.assertAlmostEqual(float(params["x"][0]), 1.0, places=3)

    def test_lr_schedule(self):
        from pl_errors import ConfigurationError
        from pl_nn_layers import lr_schedule
        self.assertAlmostEqual(lr_schedule(0, 1e-3, 0.5, 10), 1e-3)
        self.assertAlmostEqual(lr_schedule(10, 1e-3, 0.5, 10), 5e-4)
        self.assertAlmostEqual(lr_schedule(5, 1e-3, 0.25, 10), 5e-4)
        with self.assertRaises(ConfigurationError):
            lr_schedule(1, 1e-3, 0.5, 0)


class TestTrainer(unittest.TestCase):
    """Tests for feature sets, augmentation and the training loop"""

    def test_feature_sets(self):
        from pl_errors import ConfigurationError
        from pl_nn_trainer import feature_set, select_inputs
        self.assertEqual((feature_set(1).in_channels, feature_set(1).out_channels), (6, 3))
        self.assertEqual(feature_set(4).in_channels, 9)
        self.assertEqual((feature_set(5).in_channels, feature_set(5).out_channels), (2, 1))
        dataset = small_dataset(2)
        inputs = select_inputs(dataset.features, dataset.aux, feature_set(4))
        np.testing.assert_array_equal(inputs[:, 0:3], dataset.aux)
        np.testing.assert_array_equal(inputs[:, 3:9], dataset.features)
        with self.assertRaises(ConfigurationError):
            feature_set(6)

    def test_cyclic_augmentation(self):
        from pl_nn_trainer import augment_arrays, augment_cyclic, cycle_once
        dataset = small_dataset(2)
        f, l = cycle_once(dataset.features, dataset.labels)
        np.testing.assert_array_equal(f[:, 0], dataset.features[:, 1])
        np.testing.assert_array_equal(f[:, 5], dataset.features[:, 3])
        np.testing.assert_array_equal(l[:, 2], dataset.labels[:, 0])
        features, labels, aux = augment_arrays(dataset.features, dataset.labels, dataset.aux)
        self.assertEqual(features.shape[0], 6)
        np.testing.assert_array_equal(aux[4], dataset.aux[0])
        variants = augment_cyclic(dataset[0])
        self.assertEqual(len(variants), 3)
        back, _ = cycle_once(variants[2].features[None], variants[2].labels[None])
        np.testing.assert_array_equal(back[0], dataset.features[0])

    def test_batches_merge_trailing_single(self):
        from pl_nn_trainer import _batches
        self.assertEqual([len(b) for b in _batches(np.arange(65), 32)], [32, 33])
        self.assertEqual([len(b) for b in _batches(np.arange(64), 32)], [32, 32])
        self.assertEqual([len(b) for b in _batches(np.arange(70), 32)], [32, 32, 6])
        self.assertEqual([len(b) for b in _batches(np.arange(1), 32)], [1])

    def _settings(self, **kwargs):
        from pl_config import TrainSettings
        base = dict(network="RNN0", nf1=4, nf2=4, batch_size=4, epochs=2, seed=3)
        base.update(kwargs)
        return TrainSettings(**base)

    def test_training_is_deterministic(self):
        from pl_nn_trainer import train
        train_set, val_set = small_dataset(6, seed=1), small_dataset(3, seed=2)
        a = train(train_set, val_set, self._settings())
        b = train(train_set, val_set, self._settings())
        self.assertEqual(len(a.curves), 3)
        self.assertEqual(list(a.curves["epoch"]), [0, 1, 2])
        np.testing.assert_array_equal(a.curves.to_numpy(), b.curves.to_numpy())
        for key, value in a.network.parameters().items():
            np.testing.assert_array_equal(b.network.parameters()[key], value)
        self.assertEqual(a.optimizer.step, 2 * 5)

    def test_linear_closure_is_learned(self):
        from pl_nn_trainer import train
        settings = self._settings(network="MLP100", epochs=60, base_lr=1e-2, decay_rate=1.0, batch_size=4, augment=False)
        result = train(small_dataset(12, seed=4), small_dataset(4, seed=5), settings)
        costs = result.curves["train_cost"].to_numpy()
        self.assertLess(costs[-1], 0.25 * costs[0])

    def test_empty_sets_rejected(self):
        from pl_errors import ConfigurationError
        from pl_filter import ClosureDataset
        from pl_nn_trainer import train
        with self.assertRaises(ConfigurationError):
            train(small_dataset(4), ClosureDataset.empty(3), self._settings())
        with self.assertRaises(ConfigurationError):
            train(ClosureDataset.empty(3), small_dataset(4), self._settings())

    def test_network_must_fit_feature_set(self):
        from pl_errors import ShapeError
        from pl_nn_layers import build_network
        from pl_nn_trainer import train
        net = build_network("MLP100", p=3)
        with self.assertRaises(ShapeError):
            train(small_dataset(4), small_dataset(2), self._settings(feature_set=2), network=net)

    def test_infer_and_predict(self):
        from pl_nn_layers import build_network
        from pl_nn_trainer import feature_set, infer, predict_dataset
        net = build_network("MLP100", p=3, seed=1)
        dataset = small_dataset(5)
        batch = predict_dataset(net, dataset, feature_set(1))
        self.assertEqual(batch.shape, (5, 3, 3, 3, 3))
        np.testing.assert_allclose(infer(net, dataset.features[2]), batch[2], atol=1e-14)
        np.testing.assert_allclose(infer(net, dataset.features, chunk=2), batch, atol=1e-14)


if __name__ == "__main__":
    unittest.main()
