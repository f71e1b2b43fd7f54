"""The training loop: warm-up, periodic scaling refresh, scaled updates, metrics.

Per epoch: if spatial scaling is enabled and the epoch is past warm-up on the
refresh cadence, sample a few batches, capture each convolution's input
feature map in evaluation mode, and rebuild the per-layer scaling matrices.
Every optimizer step then multiplies each conv weight gradient by its layer's
scaling at the configured position; dense layers, batch-norm parameters, and
1x1 convolutions are never scaled.

Runs are bitwise deterministic for a given config and seed: weight init,
batch shuffling, and refresh sampling draw from three separate child streams
of the run seed, so enabling an analytic scaling measure does not perturb the
data order.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import dependence
from .data import LabeledDataset
from .dependence import BinningConfig, EstimatorError
from .layers import ConvLayer
from .network import Network, build_network
from .optim import LearningRateSchedule, OptimizerConfig, make_state, step
from .reparam import standard_mask_sets
from .scaling import ScalingMatrix, finalize, from_masks, k_transform

logger = logging.getLogger(__name__)

MEASURES = ("mi", "autocorr", "alpha_beta", "fixed", "masks")


class TrainingDivergedError(RuntimeError):
    """Training hit a non-finite loss and was aborted."""


@dataclass
class SgsSettings:
    enabled: bool = True
    measure: str = "mi"
    k: float = 5.0
    refresh_every: int = 5
    refresh_batches: int = 2
    warmup_epochs: int = 1
    bins: int = 32
    epsilon_floor: float = 1e-3
    redundancy_filter: float | str | None = None
    scaling_position: str = "pre"
    alpha: float = 1.0
    beta: float = 1.0
    fixed_values: np.ndarray | None = None
    mask_family: str = "acb"

    def __post_init__(self) -> None:
        if self.measure not in MEASURES:
            raise ValueError(f"unknown measure {self.measure!r}, expected one of {MEASURES}")
        if self.k <= 0:
            raise ValueError("k must be positive")
        if self.refresh_every < 1 or self.refresh_batches < 1:
            raise ValueError("refresh_every and refresh_batches must be >= 1")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be >= 0")
        if self.scaling_position not in ("pre", "post"):
            raise ValueError("scaling_position must be 'pre' or 'post'")

    @property
    def needs_feature_maps(self) -> bool:
        return self.measure in ("mi", "autocorr")


@dataclass
class TrainingConfig:
    epochs: int
    batch_size: int
    lr: float
    schedule: str = "constant"  # constant | cosine
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    seed: int = 0
    precision: int = 64
    sgs: SgsSettings = field(default_factory=SgsSettings)

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError("schedule must be 'constant' or 'cosine'")
        if self.precision not in (32, 64):
            raise ValueError("precision must be 32 or 64")

    @property
    def dtype(self):
        return np.float64 if self.precision == 64 else np.float32

    def lr_schedule(self) -> LearningRateSchedule:
        kind = "constant" if self.schedule == "constant" else "cosine_annealing"
        return LearningRateSchedule(kind=kind, initial_lr=self.lr, total_steps=self.epochs)


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    train_acc: float
    eval_acc: float
    wall_seconds: float


@dataclass
class TrainResult:
    metrics: list[EpochMetrics]
    network: Network
    scaling_history: list[dict]

    def final_weights(self) -> dict[str, np.ndarray]:
        return self.network.named_weights()


def _uniform_for(layer: ConvLayer) -> ScalingMatrix:
    return ScalingMatrix.uniform(layer.spec.kernel)


def _analytic_scaling(layer: ConvLayer, sgs: SgsSettings) -> ScalingMatrix:
    kernel = layer.spec.kernel
    if sgs.measure == "fixed":
        if sgs.fixed_values is None:
            return ScalingMatrix.uniform(kernel)
        values = np.asarray(sgs.fixed_values, dtype=np.float64)
        if values.shape != kernel:
            raise EstimatorError(
                f"fixed scaling shape {values.shape} does not match kernel {kernel}"
            )
        return ScalingMatrix(values)
    if sgs.measure == "alpha_beta":
        if kernel != (3, 3):
            raise EstimatorError(f"alpha/beta scaling is 3x3 only, layer kernel is {kernel}")
        return dependence.alpha_beta_scaling(sgs.alpha, sgs.beta)
    if sgs.measure == "masks":
        try:
            masks = standard_mask_sets(kernel, sgs.mask_family)
        except ValueError as exc:
            raise EstimatorError(str(exc)) from exc
        normalized, _ = from_masks(masks)
        return normalized
    raise AssertionError(f"not an analytic measure: {sgs.measure}")


def _estimated_scaling(maps: Sequence[np.ndarray], layer: ConvLayer, sgs: SgsSettings,
                       ) -> tuple[dependence.SpatialDependenceMatrix, ScalingMatrix]:
    kernel = layer.spec.kernel
    if sgs.measure == "mi":
        cfg = BinningConfig(bins=sgs.bins, redundancy_filter=sgs.redundancy_filter)
        s = dependence.spatial_dependence_mi(maps, kernel, cfg)
    else:
        s = dependence.spatial_dependence_autocorr(maps, kernel)
    return s, finalize(k_transform(s.values, sgs.k), sgs.epsilon_floor)


def _capture_feature_maps(net: Network, dataset: LabeledDataset, sgs: SgsSettings,
                          rng: np.random.Generator, batch_size: int,
                          ) -> dict[int, list[np.ndarray]]:
    captured: dict[int, list[np.ndarray]] = {i: [] for i in net.conv_indices}
    n = len(dataset)
    take = min(n, sgs.refresh_batches * batch_size)
    order = rng.choice(n, size=take, replace=False)
    for start in range(0, take, batch_size):
        batch_idx = order[start : start + batch_size]
        capture: dict[int, np.ndarray] = {}
        net.forward(dataset.images[batch_idx], train=False, capture_conv_inputs=capture)
        for layer_idx, fmap in capture.items():
            captured[layer_idx].append(fmap)
    return captured


def inspect_scalings(net: Network, dataset: LabeledDataset, sgs: SgsSettings,
                     rng: np.random.Generator, batch_size: int,
                     ) -> dict[int, tuple[dependence.SpatialDependenceMatrix | None, ScalingMatrix]]:
    """Per-conv-layer (dependence matrix, scaling matrix) without any training.

    Analytic measures have no dependence matrix and report ``None`` there.
    Estimator failures degrade the layer to the uniform scaling, as during
    training.
    """
    captured: dict[int, list[np.ndarray]] = {}
    if sgs.needs_feature_maps:
        captured = _capture_feature_maps(net, dataset, sgs, rng, batch_size)
    out: dict[int, tuple[dependence.SpatialDependenceMatrix | None, ScalingMatrix]] = {}
    for layer_idx in net.conv_indices:
        layer = net.layers[layer_idx]
        assert isinstance(layer, ConvLayer)
        if layer.spec.kernel == (1, 1):
            out[layer_idx] = (None, _uniform_for(layer))
            continue
        try:
            if sgs.needs_feature_maps:
                out[layer_idx] = _estimated_scaling(captured[layer_idx], layer, sgs)
            else:
                out[layer_idx] = (None, _analytic_scaling(layer, sgs))
        except EstimatorError as exc:
            logger.warning("layer %d: %s; falling back to uniform scaling", layer_idx, exc)
            out[layer_idx] = (None, _uniform_for(layer))
    return out


def refresh_scalings(net: Network, dataset: LabeledDataset, sgs: SgsSettings,
                     rng: np.random.Generator, batch_size: int) -> dict[int, ScalingMatrix]:
    """Recompute one ScalingMatrix per conv layer.

    Estimator-backed measures sample ``refresh_batches`` random batches and
    forward them in evaluation mode, recording each conv layer's input feature
    map. A per-layer estimator failure (degenerate maps, undersized spatial
    extent, mismatched analytic kernel) degrades that layer to the uniform
    scaling with a warning; a refresh never aborts the run.
    """
    return {idx: pair[1]
            for idx, pair in inspect_scalings(net, dataset, sgs, rng, batch_size).items()}


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def train(model_spec: list, train_ds: LabeledDataset, eval_ds: LabeledDataset,
          cfg: TrainingConfig) -> TrainResult:
    """Run the full training loop; see the module docstring for the shape of it."""
    dtype = cfg.dtype
    train_ds = train_ds.astype(dtype)
    eval_ds = eval_ds.astype(dtype)
    if train_ds.class_count < 2:
        raise ValueError("training needs a dataset with at least 2 classes")

    seeds = np.random.SeedSequence(cfg.seed).spawn(3)
    init_rng = np.random.default_rng(seeds[0])
    shuffle_rng = np.random.default_rng(seeds[1])
    refresh_rng = np.random.default_rng(seeds[2])

    input_shape = train_ds.images.shape[1:]
    net = build_network(model_spec, input_shape, train_ds.class_count, init_rng, dtype)

    opt_states = {
        (idx, name): make_state(cfg.optimizer, value)
        for idx, _, name, value in net.parameters()
    }
    schedule = cfg.lr_schedule()
    sgs = cfg.sgs

    scalings: dict[int, ScalingMatrix] = {}
    scaling_values: dict[int, np.ndarray] = {}
    history: list[dict] = []
    metrics: list[EpochMetrics] = []

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        if sgs.enabled and epoch >= sgs.warmup_epochs \
                and (epoch - sgs.warmup_epochs) % sgs.refresh_every == 0:
            scalings = refresh_scalings(net, train_ds, sgs, refresh_rng, cfg.batch_size)
            scaling_values = {
                idx: np.asarray(m.values, dtype=dtype) for idx, m in scalings.items()
            }
            history.extend(
                m.to_record(layer=f"conv{idx}", epoch=epoch) for idx, m in sorted(scalings.items())
            )

        lr = schedule.value(epoch)
        loss_sum = 0.0
        hit = 0
        seen = 0
        for batch_idx in _batches(len(train_ds), cfg.batch_size, shuffle_rng):
            x = train_ds.images[batch_idx]
            labels = train_ds.labels[batch_idx]
            value, probs = net.loss(x, labels, train=True)
            if not np.isfinite(value):
                raise TrainingDivergedError(
                    f"non-finite loss {value} at epoch {epoch}, sample offset {seen}"
                )
            loss_sum += value * len(batch_idx)
            hit += int((probs.argmax(axis=1) == labels).sum())
            seen += len(batch_idx)
            net.backward(net.head.grad())
            for idx, layer, name, value_arr in list(net.parameters()):
                grad = layer.grads()[name]
                scaling = None
                if sgs.enabled and name == "W" and idx in scaling_values \
                        and isinstance(layer, ConvLayer) and layer.spec.kernel != (1, 1):
                    scaling = scaling_values[idx]
                updated = step(opt_states[(idx, name)], value_arr, grad, lr=lr,
                               scaling=scaling, position=sgs.scaling_position)
                layer.set_param(name, updated)

        eval_hit = 0
        for start in range(0, len(eval_ds), cfg.batch_size):
            x = eval_ds.images[start : start + cfg.batch_size]
            labels = eval_ds.labels[start : start + cfg.batch_size]
            eval_hit += int((net.predict(x) == labels).sum())
        metrics.append(EpochMetrics(
            epoch=epoch,
            train_loss=loss_sum / seen,
            train_acc=hit / seen,
            eval_acc=eval_hit / len(eval_ds),
            wall_seconds=time.perf_counter() - t0,
        ))
    return TrainResult(metrics=metrics, network=net, scaling_history=history)


METRICS_FIELDS = ("epoch", "train_loss", "train_acc", "eval_acc", "wall_seconds")


def metrics_to_csv(metrics: Sequence[EpochMetrics], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(METRICS_FIELDS)
        for m in metrics:
            writer.writerow([m.epoch, repr(m.train_loss), repr(m.train_acc),
                             repr(m.eval_acc), repr(m.wall_seconds)])


def scaling_history_to_jsonl(history: Sequence[dict], path: str | Path) -> None:
    with open(path, "w") as f:
        for record in history:
            f.write(json.dumps(record) + "\n")


def save_weights(weights: dict[str, np.ndarray], path: str | Path) -> None:
    np.savez(path, **weights)


def load_weights(path: str | Path) -> dict[str, np.ndarray]:
    with np.load(path) as archive:
        return {name: archive[name] for name in archive.files}
