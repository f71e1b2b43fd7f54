import logging

import numpy as np
import pytest

from spatialgrad.data import synth_digits
from spatialgrad.network import (
    ConvLayerSpec,
    DenseSpec,
    FlattenSpec,
    GlobalAvgPoolSpec,
    MaxPoolSpec,
    SoftmaxXentSpec,
    build_network,
    kernel_magnitude_matrix,
    validate_model_spec,
)
from spatialgrad.optim import OptimizerConfig
from spatialgrad.training import (
    SgsSettings,
    TrainingConfig,
    TrainingDivergedError,
    metrics_to_csv,
    refresh_scalings,
    train,
)


def two_conv_model():
    return [
        ConvLayerSpec(out_channels=8, kernel=(3, 3), padding=1),
        MaxPoolSpec(),
        ConvLayerSpec(out_channels=16, kernel=(3, 3), padding=1),
        MaxPoolSpec(),
        FlattenSpec(),
        DenseSpec(out_features=10),
        SoftmaxXentSpec(),
    ]


def tiny_model():
    return [
        ConvLayerSpec(out_channels=2, kernel=(3, 3), padding=1, batch_norm=False),
        MaxPoolSpec(),
        FlattenSpec(),
        DenseSpec(out_features=3),
        SoftmaxXentSpec(),
    ]


def momentum_cfg(**kwargs):
    defaults = dict(epochs=2, batch_size=32, lr=0.05,
                    optimizer=OptimizerConfig(kind="sgd_momentum", momentum=0.9), seed=0)
    defaults.update(kwargs)
    return TrainingConfig(**defaults)


class TestNetworkSpecValidation:
    def test_requires_single_trailing_head(self):
        with pytest.raises(ValueError):
            validate_model_spec([ConvLayerSpec(4, (3, 3))])
        with pytest.raises(ValueError):
            validate_model_spec([SoftmaxXentSpec(), DenseSpec(3)])

    def test_shape_chain_errors_before_training(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError, match="flatten"):
            build_network([DenseSpec(4), SoftmaxXentSpec()], (1, 8, 8), 4, rng)
        with pytest.raises(ValueError, match="class count"):
            build_network([FlattenSpec(), DenseSpec(4), SoftmaxXentSpec()], (1, 2, 2), 7, rng)
        with pytest.raises(Exception):
            build_network([ConvLayerSpec(2, (9, 9)), FlattenSpec(), DenseSpec(3),
                           SoftmaxXentSpec()], (1, 4, 4), 3, rng)

    def test_gap_then_dense_chain(self):
        rng = np.random.default_rng(1)
        net = build_network([ConvLayerSpec(6, (3, 3), padding=1), GlobalAvgPoolSpec(),
                             FlattenSpec(), DenseSpec(4), SoftmaxXentSpec()],
                            (1, 8, 8), 4, rng)
        logits = net.forward(np.random.default_rng(2).normal(size=(3, 1, 8, 8)), train=False)
        assert logits.shape == (3, 4)

    def test_strided_conv_chain(self):
        rng = np.random.default_rng(2)
        net = build_network([ConvLayerSpec(4, (3, 3), stride=2, padding=1), FlattenSpec(),
                             DenseSpec(5), SoftmaxXentSpec()], (1, 8, 8), 5, rng)
        logits = net.forward(rng.normal(size=(2, 1, 8, 8)), train=False)
        assert logits.shape == (2, 5)


class TestEndToEndGradients:
    def test_full_network_matches_finite_differences(self):
        """Loss gradient w.r.t. every parameter of a 2-layer net via central differences."""
        rng = np.random.default_rng(3)
        net = build_network(tiny_model(), (1, 6, 6), 3, rng)
        x = rng.normal(size=(3, 1, 6, 6))
        labels = rng.integers(0, 3, size=3)

        value, _ = net.loss(x, labels, train=True)
        net.backward(net.head.grad())
        analytic = {(idx, name): layer.grads()[name]
                    for idx, layer, name, _ in net.parameters()}

        h = 1e-5
        for idx, layer, name, param in list(net.parameters()):
            num = np.zeros_like(param)
            it = np.nditer(param, flags=["multi_index"])
            for _ in it:
                pidx = it.multi_index
                original = param[pidx]
                param[pidx] = original + h
                up, _ = net.loss(x, labels, train=True)
                param[pidx] = original - h
                down, _ = net.loss(x, labels, train=True)
                param[pidx] = original
                num[pidx] = (up - down) / (2 * h)
            np.testing.assert_allclose(analytic[(idx, name)], num, rtol=1e-4, atol=1e-8)

    def test_batch_norm_network_gradients(self):
        rng = np.random.default_rng(4)
        model = [ConvLayerSpec(2, (3, 3), padding=1, batch_norm=True), FlattenSpec(),
                 DenseSpec(3), SoftmaxXentSpec()]
        net = build_network(model, (1, 4, 4), 3, rng)
        x = rng.normal(size=(4, 1, 4, 4))
        labels = rng.integers(0, 3, size=4)
        net.loss(x, labels, train=True)
        net.backward(net.head.grad())
        analytic = {(idx, name): layer.grads()[name].copy()
                    for idx, layer, name, _ in net.parameters()}
        h = 1e-5
        for idx, layer, name, param in list(net.parameters()):
            flat = param.reshape(-1)
            probe = min(6, flat.size)
            for k in range(probe):
                original = flat[k]
                flat[k] = original + h
                up, _ = net.loss(x, labels, train=True)
                flat[k] = original - h
                down, _ = net.loss(x, labels, train=True)
                flat[k] = original
                num = (up - down) / (2 * h)
                np.testing.assert_allclose(analytic[(idx, name)].reshape(-1)[k], num,
                                           rtol=2e-4, atol=1e-7)


class TestTrainLoop:
    def test_smoke_loss_decreases(self):
        train_ds = synth_digits(512, seed=0)
        test_ds = synth_digits(128, seed=1)
        cfg = momentum_cfg(epochs=3, batch_size=64, sgs=SgsSettings(enabled=False))
        result = train(two_conv_model(), train_ds, test_ds, cfg)
        assert result.metrics[-1].train_loss < result.metrics[0].train_loss

    def test_bitwise_determinism(self):
        train_ds = synth_digits(128, seed=2)
        test_ds = synth_digits(64, seed=3)
        cfg = momentum_cfg(sgs=SgsSettings(enabled=True, measure="mi", warmup_epochs=0,
                                           refresh_every=1))
        a = train(two_conv_model(), train_ds, test_ds, cfg)
        b = train(two_conv_model(), train_ds, test_ds, cfg)
        assert [m.train_loss for m in a.metrics] == [m.train_loss for m in b.metrics]
        assert [m.eval_acc for m in a.metrics] == [m.eval_acc for m in b.metrics]
        wa, wb = a.final_weights(), b.final_weights()
        assert all(np.array_equal(wa[k], wb[k]) for k in wa)

    def test_identity_scaling_bitwise_equals_disabled(self):
        train_ds = synth_digits(128, seed=4)
        test_ds = synth_digits(64, seed=5)
        base_cfg = momentum_cfg(sgs=SgsSettings(enabled=False))
        ones_cfg = momentum_cfg(sgs=SgsSettings(enabled=True, measure="fixed",
                                                warmup_epochs=0, refresh_every=1))
        a = train(two_conv_model(), train_ds, test_ds, base_cfg)
        b = train(two_conv_model(), train_ds, test_ds, ones_cfg)
        assert [m.train_loss for m in a.metrics] == [m.train_loss for m in b.metrics]
        wa, wb = a.final_weights(), b.final_weights()
        assert all(np.array_equal(wa[k], wb[k]) for k in wa)

    def test_scaling_history_valid_and_seeded_refreshes(self):
        train_ds = synth_digits(128, seed=6)
        test_ds = synth_digits(64, seed=7)
        cfg = momentum_cfg(epochs=4, sgs=SgsSettings(enabled=True, measure="mi",
                                                     warmup_epochs=1, refresh_every=2))
        result = train(two_conv_model(), train_ds, test_ds, cfg)
        # refreshes at epochs 1 and 3, two conv layers each
        epochs = [r["epoch"] for r in result.scaling_history]
        assert epochs == [1, 1, 3, 3]
        for record in result.scaling_history:
            values = np.array(record["values"])
            assert values.min() > 0
            assert abs(values.mean() - 1.0) <= 1e-9

    def test_warmup_delays_first_refresh(self):
        train_ds = synth_digits(96, seed=8)
        test_ds = synth_digits(32, seed=9)
        cfg = momentum_cfg(epochs=2, sgs=SgsSettings(enabled=True, measure="mi",
                                                     warmup_epochs=5, refresh_every=1))
        result = train(two_conv_model(), train_ds, test_ds, cfg)
        assert result.scaling_history == []

    def test_float32_precision_runs(self):
        train_ds = synth_digits(96, seed=10)
        test_ds = synth_digits(32, seed=11)
        cfg = momentum_cfg(precision=32, sgs=SgsSettings(enabled=True, measure="mi",
                                                         warmup_epochs=0, refresh_every=1))
        result = train(two_conv_model(), train_ds, test_ds, cfg)
        assert result.final_weights()["conv0.W"].dtype == np.float32

    def test_nan_loss_aborts_with_diagnostic(self):
        train_ds = synth_digits(96, seed=12)
        test_ds = synth_digits(32, seed=13)
        # one step at this rate overflows the weights; the next forward is NaN
        cfg = momentum_cfg(lr=1e308, epochs=3, sgs=SgsSettings(enabled=False))
        with np.errstate(all="ignore"), pytest.raises(TrainingDivergedError, match="epoch"):
            train(two_conv_model(), train_ds, test_ds, cfg)

    def test_metrics_csv_format(self, tmp_path):
        train_ds = synth_digits(64, seed=14)
        test_ds = synth_digits(32, seed=15)
        cfg = momentum_cfg(epochs=1, sgs=SgsSettings(enabled=False))
        result = train(two_conv_model(), train_ds, test_ds, cfg)
        path = tmp_path / "metrics.csv"
        metrics_to_csv(result.metrics, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "epoch,train_loss,train_acc,eval_acc,wall_seconds"
        assert len(lines) == 2


class TestRefreshScalings:
    def build_net(self, model, hw=(1, 28, 28), classes=10, seed=0):
        return build_network(model, hw, classes, np.random.default_rng(seed))

    def test_fixed_measure_gives_uniform(self):
        net = self.build_net(two_conv_model())
        ds = synth_digits(64, seed=0)
        sgs = SgsSettings(enabled=True, measure="fixed")
        out = refresh_scalings(net, ds, sgs, np.random.default_rng(0), 32)
        for matrix in out.values():
            np.testing.assert_array_equal(matrix.values, np.ones((3, 3)))

    def test_mi_on_noise_images_center_spike(self):
        rng = np.random.default_rng(1)
        from spatialgrad.data import LabeledDataset

        noise = LabeledDataset(rng.uniform(size=(256, 1, 28, 28)),
                               rng.integers(0, 10, size=256), 10)
        net = self.build_net(two_conv_model())
        sgs = SgsSettings(enabled=True, measure="mi", k=5.0, refresh_batches=4)
        out = refresh_scalings(net, noise, sgs, np.random.default_rng(2), 64)
        first = out[0].values  # first conv sees the raw noise
        assert first[1, 1] == first.max()
        off = np.delete(first.ravel(), 4)
        assert np.all(first[1, 1] > 3 * off)

    def test_alpha_beta_measure(self):
        net = self.build_net(two_conv_model())
        ds = synth_digits(64, seed=3)
        sgs = SgsSettings(enabled=True, measure="alpha_beta", alpha=2.0, beta=4.0)
        out = refresh_scalings(net, ds, sgs, np.random.default_rng(0), 32)
        for matrix in out.values():
            assert matrix.values[1, 1] == pytest.approx(2.25, rel=1e-12)

    def test_masks_measure(self):
        net = self.build_net(two_conv_model())
        ds = synth_digits(64, seed=4)
        sgs = SgsSettings(enabled=True, measure="masks", mask_family="acb")
        out = refresh_scalings(net, ds, sgs, np.random.default_rng(0), 32)
        raw = np.array([[1, 2, 1], [2, 3, 2], [1, 2, 1]], dtype=float)
        for matrix in out.values():
            np.testing.assert_allclose(matrix.values, raw / raw.mean(), rtol=1e-12)

    def test_degenerate_layer_degrades_to_uniform_with_warning(self, caplog):
        from spatialgrad.data import LabeledDataset

        constant = LabeledDataset(np.full((64, 1, 28, 28), 0.5),
                                  np.zeros(64, dtype=np.int64), 10)
        net = self.build_net(two_conv_model())
        # constant images plus the redundancy filter empty every off-center
        # displacement of the first layer
        sgs = SgsSettings(enabled=True, measure="mi", redundancy_filter=0.5)
        with caplog.at_level(logging.WARNING):
            out = refresh_scalings(net, constant, sgs, np.random.default_rng(0), 32)
        assert any("uniform" in rec.message for rec in caplog.records)
        np.testing.assert_array_equal(out[0].values, np.ones((3, 3)))

    def test_one_by_one_kernels_stay_uniform(self):
        model = [
            ConvLayerSpec(out_channels=4, kernel=(1, 1)),
            ConvLayerSpec(out_channels=4, kernel=(3, 3), padding=1),
            FlattenSpec(),
            DenseSpec(out_features=10),
            SoftmaxXentSpec(),
        ]
        net = build_network(model, (1, 8, 8), 10, np.random.default_rng(5))
        ds = synth_digits(64, seed=5, image_size=8, jitter=0)
        sgs = SgsSettings(enabled=True, measure="mi")
        out = refresh_scalings(net, ds, sgs, np.random.default_rng(0), 32)
        first_conv, second_conv = net.conv_indices
        np.testing.assert_array_equal(out[first_conv].values, np.ones((1, 1)))
        assert out[second_conv].kernel == (3, 3)


class TestKernelMagnitude:
    def test_uniform_weights(self):
        np.testing.assert_array_equal(kernel_magnitude_matrix(np.full((4, 3, 3, 3), -2.0)),
                                      np.ones((3, 3)))

    def test_doubled_center_column_oracle(self):
        rng = np.random.default_rng(6)
        w = rng.uniform(0.5, 1.0, size=(4, 2, 3, 3))
        w[:, :, :, 1] *= 2
        matrix = kernel_magnitude_matrix(w)
        # direct arithmetic oracle
        expected = np.abs(w).mean(axis=(0, 1))
        expected /= expected.mean()
        np.testing.assert_allclose(matrix, expected, rtol=1e-12)
        assert matrix[:, 1].min() > matrix[:, 0].max()
        assert matrix.mean() == pytest.approx(1.0, rel=1e-12)

    def test_zero_weights_degenerate(self):
        with pytest.raises(ValueError, match="degenerate"):
            kernel_magnitude_matrix(np.zeros((2, 2, 3, 3)))
