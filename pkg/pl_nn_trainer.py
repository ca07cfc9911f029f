"""
PerfectLES — Network Training
=============================
Feature-set selection, cyclic augmentation, the mini-batch Adam training
loop and inference for closure networks.

Feature sets (input channels -> output channels):
    1  u, v, w, R1, R2, R3        -> Y1, Y2, Y3
    2  u, v, w                    -> Y1, Y2, Y3
    3  R1, R2, R3                 -> Y1, Y2, Y3
    4  rho, p, e, u, v, w, R1..R3 -> Y1, Y2, Y3
    5  u, R1                      -> Y1   (component-wise)

Usage:
    result = train(train_set, val_set, settings)
    pred = infer(result.network, features)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from pl_basis import NodalBasis
from pl_errors import ConfigurationError, RunAbortedError, ShapeError
from pl_filter import ClosureDataset, ClosureSample
from pl_logging import get_logger
from pl_nn_layers import (
    AdamState,
    Network,
    adam_step,
    build_network,
    cost_lgl,
    cost_lgl_grad,
    lr_schedule,
)

logger = get_logger("trainer")

EVAL_CHUNK = 64


# =============================================================================
# FEATURE SETS AND AUGMENTATION
# =============================================================================


@dataclass(frozen=True)
class FeatureSet:
    number: int
    feature_channels: Tuple[int, ...]
    aux_channels: Tuple[int, ...]
    label_channels: Tuple[int, ...]

    @property
    def in_channels(self) -> int:
        return len(self.aux_channels) + len(self.feature_channels)

    @property
    def out_channels(self) -> int:
        return len(self.label_channels)


FEATURE_SETS: Dict[int, FeatureSet] = {
    1: FeatureSet(1, (0, 1, 2, 3, 4, 5), (), (0, 1, 2)),
    2: FeatureSet(2, (0, 1, 2), (), (0, 1, 2)),
    3: FeatureSet(3, (3, 4, 5), (), (0, 1, 2)),
    4: FeatureSet(4, (0, 1, 2, 3, 4, 5), (0, 1, 2), (0, 1, 2)),
    5: FeatureSet(5, (0, 3), (), (0,)),
}


def feature_set(number: int) -> FeatureSet:
    if number not in FEATURE_SETS:
        raise ConfigurationError(f"feature set must be one of {sorted(FEATURE_SETS)}, got {number}")
    return FEATURE_SETS[number]


def select_inputs(features: np.ndarray, aux: np.ndarray, fset: FeatureSet) -> np.ndarray:
    parts = []
    if fset.aux_channels:
        parts.append(aux[:, list(fset.aux_channels)])
    parts.append(features[:, list(fset.feature_channels)])
    return np.concatenate(parts, axis=1)


def select_labels(labels: np.ndarray, fset: FeatureSet) -> np.ndarray:
    return labels[:, list(fset.label_channels)]


# cyclic shift of vector components: (u, v, w) -> (v, w, u)
_FEATURE_CYCLE = np.array([1, 2, 0, 4, 5, 3])
_LABEL_CYCLE = np.array([1, 2, 0])


def cycle_once(features: np.ndarray, labels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Apply one cyclic relabeling to (n, 6, ...) features and (n, 3, ...) labels."""
    return features[:, _FEATURE_CYCLE], labels[:, _LABEL_CYCLE]


def augment_arrays(features: np.ndarray, labels: np.ndarray, aux: np.ndarray):
    """Triple a batch of samples with the two cyclic relabelings appended."""
    f1, l1 = features, labels
    f2, l2 = cycle_once(f1, l1)
    f3, l3 = cycle_once(f2, l2)
    return (
        np.concatenate([f1, f2, f3]),
        np.concatenate([l1, l2, l3]),
        np.concatenate([aux, aux, aux]),
    )


def augment_cyclic(sample: ClosureSample) -> List[ClosureSample]:
    """The sample and its two cyclic relabelings, in that order."""
    out = [sample]
    for _ in range(2):
        prev = out[-1]
        f, l = cycle_once(prev.features[None], prev.labels[None])
        out.append(ClosureSample(f[0], l[0], prev.aux, prev.run_id, prev.time, prev.element))
    return out


# =============================================================================
# TRAINING
# =============================================================================


@dataclass
class TrainingResult:
    network: Network
    optimizer: AdamState
    curves: pd.DataFrame
    feature_set: FeatureSet
    settings: Dict = field(default_factory=dict)
    rng_state: Dict = field(default_factory=dict)


def _batches(indices: np.ndarray, batch_size: int) -> List[np.ndarray]:
    """Split shuffled indices; a trailing batch of one joins the previous batch."""
    chunks = [indices[i:i + batch_size] for i in range(0, len(indices), batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    return chunks


def infer(network: Network, features: np.ndarray, chunk: int = EVAL_CHUNK) -> np.ndarray:
    """Deterministic forward pass with frozen batch-norm statistics."""
    single = features.ndim == 4
    x = features[None] if single else features
    if x.ndim != 5:
        raise ShapeError("features must be (c, p, p, p) or (n, c, p, p, p)", shape=features.shape)
    parts = [network.forward(x[i:i + chunk], train=False) for i in range(0, x.shape[0], chunk)]
    out = np.concatenate(parts) if parts else np.zeros((0, network.spec.out_channels) + x.shape[2:])
    return out[0] if single else out


def evaluate_cost(network: Network, inputs: np.ndarray, labels: np.ndarray, weights3d: np.ndarray) -> float:
    """Summed LGL cost per sample in inference mode."""
    if inputs.shape[0] == 0:
        return float("nan")
    pred = infer(network, inputs)
    return cost_lgl(pred, labels, weights3d) / inputs.shape[0]


def prepare(dataset: ClosureDataset, fset: FeatureSet, augment: bool) -> Tuple[np.ndarray, np.ndarray]:
    features, labels, aux = dataset.features, dataset.labels, dataset.aux
    if augment:
        features, labels, aux = augment_arrays(features, labels, aux)
    return select_inputs(features, aux, fset), select_labels(labels, fset)


def train(
    train_set: ClosureDataset,
    validation_set: ClosureDataset,
    settings,
    network: Optional[Network] = None,
) -> TrainingResult:
    """
    Mini-batch Adam over ``settings.epochs`` epochs.

    Shuffling of epoch e uses ``default_rng([seed, e])``. The curves frame has
    one row per epoch plus the initial evaluation (epoch 0).
    """
    if len(train_set) == 0:
        raise ConfigurationError("training set is empty")
    if len(validation_set) == 0:
        raise ConfigurationError("validation set is empty")
    if settings.batch_size < 1:
        raise ConfigurationError("batch size must be at least 1")
    if not settings.base_lr > 0.0:
        raise ConfigurationError("learning rate must be positive")

    fset = feature_set(settings.feature_set)
    p = train_set.p
    if network is None:
        network = build_network(
            settings.network, settings.nf1, settings.nf2, p, settings.seed, fset.in_channels, fset.out_channels
        )
    if network.spec.in_channels != fset.in_channels or network.spec.out_channels != fset.out_channels:
        raise ShapeError("network channels do not match the feature set", feature_set=fset.number)
    weights3d = NodalBasis.from_degree(p - 1).weights3d

    x_train, y_train = prepare(train_set, fset, settings.augment)
    x_val, y_val = prepare(validation_set, fset, False)
    n = x_train.shape[0]
    batches_per_epoch = len(_batches(np.arange(n), settings.batch_size))
    decay_steps = settings.decay_steps or batches_per_epoch
    params = network.parameters()
    optimizer = AdamState.for_params(params)

    rows = [{"epoch": 0, "train_cost": evaluate_cost(network, x_train, y_train, weights3d),
             "validation_cost": evaluate_cost(network, x_val, y_val, weights3d)}]
    logger.epoch_summary(0, rows[0]["train_cost"], rows[0]["validation_cost"])

    rng = None
    for epoch in range(1, settings.epochs + 1):
        rng = np.random.default_rng([settings.seed, epoch])
        for b, idx in enumerate(_batches(rng.permutation(n), settings.batch_size)):
            xb, yb = x_train[idx], y_train[idx]
            pred = network.forward(xb, train=True)
            cost = cost_lgl(pred, yb, weights3d, settings.cost_normalization)
            if not math.isfinite(cost):
                raise RunAbortedError("non-finite training cost", epoch=epoch, batch=b)
            network.backward(cost_lgl_grad(pred, yb, weights3d, settings.cost_normalization))
            lr = lr_schedule(optimizer.step, settings.base_lr, settings.decay_rate, decay_steps)
            adam_step(params, network.gradients(), optimizer, lr)
        row = {
            "epoch": epoch,
            "train_cost": evaluate_cost(network, x_train, y_train, weights3d),
            "validation_cost": evaluate_cost(network, x_val, y_val, weights3d),
        }
        if not (math.isfinite(row["train_cost"]) and math.isfinite(row["validation_cost"])):
            raise RunAbortedError("non-finite evaluation cost", epoch=epoch)
        rows.append(row)
        logger.epoch_summary(epoch, row["train_cost"], row["validation_cost"])

    curves = pd.DataFrame(rows, columns=["epoch", "train_cost", "validation_cost"])
    return TrainingResult(
        network=network,
        optimizer=optimizer,
        curves=curves,
        feature_set=fset,
        settings=dict(vars(settings)),
        rng_state=rng.bit_generator.state if rng is not None else {},
    )


def predict_dataset(network: Network, dataset: ClosureDataset, fset: FeatureSet) -> np.ndarray:
    return infer(network, select_inputs(dataset.features, dataset.aux, fset))
