import numpy as np
import pytest

import eventsnn.ann as ann
import eventsnn.conversion as conv
import eventsnn.snn as snn
from eventsnn.errors import ValidationError


def two_layer_net(b2=0.4):
    w1 = np.array([[0.7], [0.3]])
    w2 = np.array([[0.5, 0.5]])
    return ann.Network([ann.Dense(w1, np.zeros(2), relu=True),
                        ann.Dense(w2, np.array([b2]))], (1,), 1)


class TestConvert:
    def test_threshold_and_bias_scaling(self):
        # ceilings 2 then 4 over a unit input scale: thresholds 2 and 2,
        # second bias divided by the first ceiling
        net = two_layer_net(b2=0.4)
        stats = ann.ActivationStats(lambdas={0: 2.0, 1: 4.0})
        out = conv.convert(net, stats, lambda_input=1.0)
        assert out.layers[0].v_thr == pytest.approx(2.0)
        assert out.layers[1].v_thr == pytest.approx(2.0)
        assert out.layers[1].bias[0] == pytest.approx(0.2)
        assert out.layers[0].bias[0] == pytest.approx(0.0)

    def test_unit_ceilings_change_nothing(self):
        net = two_layer_net(b2=0.4)
        stats = ann.ActivationStats(lambdas={0: 1.0, 1: 1.0})
        out = conv.convert(net, stats)
        assert out.layers[0].v_thr == 1.0
        assert out.layers[1].v_thr == 1.0
        assert out.layers[1].bias[0] == pytest.approx(0.4)
        np.testing.assert_array_equal(out.layers[0].kernel.weight,
                                      net.layers[0].weight)

    def test_uniform_ceiling_scale_cancels(self):
        net = two_layer_net()
        base = conv.convert(net, ann.ActivationStats(lambdas={0: 2.0, 1: 4.0}))
        # scaling every ceiling (including the input's) by c leaves ratios alone
        scaled = conv.convert(
            net, ann.ActivationStats(lambdas={0: 6.0, 1: 12.0}),
            lambda_input=3.0)
        for a, b in zip(base.layers, scaled.layers):
            assert a.v_thr == pytest.approx(b.v_thr)

    def test_missing_ceiling_rejected(self):
        net = two_layer_net()
        with pytest.raises(ValidationError, match="layer 1"):
            conv.convert(net, ann.ActivationStats(lambdas={0: 2.0}))

    def test_batchnorm_must_be_folded_first(self):
        rng = np.random.default_rng(0)
        net = ann.Network([ann.Dense.create(3, 4, True, rng),
                           ann.BatchNorm.create(4),
                           ann.Dense.create(4, 2, False, rng)], (3,), 2)
        with pytest.raises(ValidationError, match="fold"):
            conv.convert(net, ann.ActivationStats(lambdas={0: 1.0, 2: 1.0}))

    def test_double_conversion_rejected(self):
        net = two_layer_net()
        stats = ann.ActivationStats(lambdas={0: 2.0, 1: 4.0})
        out = conv.convert(net, stats)
        with pytest.raises(TypeError, match="already converted"):
            conv.convert(out, stats)

    def test_pooling_and_flatten_attach_to_next_layer(self):
        rng = np.random.default_rng(1)
        net = ann.Network([ann.Conv2d.create(2, 3, 3, True, rng, padding=1),
                           ann.AvgPool2d(2),
                           ann.Flatten(),
                           ann.Dense.create(3 * 2 * 2, 2, False, rng)],
                          (2, 4, 4), 2)
        stats = ann.ActivationStats(lambdas={0: 1.5, 3: 2.0})
        out = conv.convert(net, stats)
        assert len(out.layers) == 2
        assert [op.kind for op in out.layers[1].pre_ops] == ["avgpool", "flatten"]
        assert out.layers[0].out_shape == (3, 4, 4)

    def test_charge_modes(self):
        net = two_layer_net()
        stats = ann.ActivationStats(lambdas={0: 2.0, 1: 4.0})
        assert conv.convert(net, stats).extra_charge == "initial"
        assert conv.convert(net, stats, initial_charge=False).extra_charge == "none"
        per_tick = conv.convert(net, stats, initial_charge=False,
                                per_tick_charge=True)
        assert per_tick.extra_charge == "per-tick"
        with pytest.raises(ValidationError):
            conv.convert(net, stats, initial_charge=True, per_tick_charge=True)

    def test_per_tick_charge_injects_half_threshold(self):
        net = two_layer_net()
        stats = ann.ActivationStats(lambdas={0: 1.0, 1: 1.0})
        out = conv.convert(net, stats, initial_charge=False,
                           per_tick_charge=True)
        state = snn.init_state(out)
        snn.step(state, out, np.zeros(1))
        # with zero input and bias 0 / 0.4: layer 0 gets 0.5 -> no spike
        assert state.v[0][0, 0] == pytest.approx(0.5)


class TestVerifyEquivalence:
    def trained_like_net(self, seed=0):
        rng = np.random.default_rng(seed)
        layers = [ann.Dense.create(8, 10, True, rng),
                  ann.Dense.create(10, 6, True, rng),
                  ann.Dense.create(6, 3, False, rng)]
        net = ann.Network(layers, (8,), 3)
        for layer in layers:
            layer.bias[:] = rng.uniform(0, 0.05, size=layer.bias.shape)
        return net

    def convert_with_data(self, net, rates_batch):
        stats = ann.collect_lambda(net, rates_batch)
        return conv.convert(net, stats, initial_charge=True)

    def test_constant_rate_long_horizon_final_layer(self):
        net = self.trained_like_net()
        rng = np.random.default_rng(3)
        rates_batch = rng.uniform(0, 1, size=(20, 8))
        out = self.convert_with_data(net, rates_batch)
        report = conv.verify_equivalence(net, out, rates_batch[0], ticks=2000)
        final = report[-1]
        # desired rate of the logits layer: positive logits over its ceiling
        acts, logits = ann.forward(net, rates_batch[0])
        ceiling = np.prod([l.v_thr for l in out.layers])
        desired = np.maximum(logits, 0) / ceiling
        assert final.rate_error <= 0.02 * np.linalg.norm(desired) + 1e-9
        assert final.cos_phi > 0.999

    def test_zero_input_zero_rates(self):
        net = self.trained_like_net(seed=5)
        for layer in net.layers:
            layer.bias[:] = 0.0
        stats = ann.ActivationStats(lambdas={0: 1.0, 1: 1.0, 2: 1.0})
        out = conv.convert(net, stats, initial_charge=False)
        report = conv.verify_equivalence(net, out, np.zeros(8), ticks=50)
        for sim in report:
            assert sim.cos_phi is None  # desired rate vanished
            assert sim.rate_error == pytest.approx(0.0)

    def test_error_shrinks_with_horizon(self):
        net = self.trained_like_net(seed=7)
        rng = np.random.default_rng(8)
        rates_batch = rng.uniform(0, 1, size=(20, 8))
        out = self.convert_with_data(net, rates_batch)
        errors = []
        for ticks in (50, 100, 200, 400, 800):
            report = conv.verify_equivalence(net, out, rates_batch[1], ticks)
            errors.append(report[-1].rate_error)
        # O(1/t) decay: each doubling should not increase the error
        for earlier, later in zip(errors, errors[1:]):
            assert later <= earlier + 1e-9


class TestSnnFiles:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(2)
        net = ann.Network([ann.Conv2d.create(2, 3, 3, True, rng, padding=1),
                           ann.AvgPool2d(2),
                           ann.Flatten(),
                           ann.Dense.create(3 * 2 * 2, 2, False, rng)],
                          (2, 4, 4), 2, metadata={"seed": 2})
        stats = ann.ActivationStats(lambdas={0: 1.5, 3: 2.0})
        out = conv.convert(net, stats)
        out.metadata["dataset_stats"] = {"n_max": 4, "s_r": 4000.0}
        path = tmp_path / "snn.json"
        conv.save_snn(out, path)
        loaded = conv.load_snn(path)
        assert loaded.n_classes == 2
        assert loaded.extra_charge == "initial"
        assert loaded.metadata["dataset_stats"]["n_max"] == 4
        for a, b in zip(out.layers, loaded.layers):
            assert a.v_thr == pytest.approx(b.v_thr)
            np.testing.assert_array_equal(a.kernel.weight, b.kernel.weight)
            np.testing.assert_array_equal(a.bias, b.bias)
            assert a.out_shape == tuple(b.out_shape)
        # behaviour identical tick for tick
        state_a, state_b = snn.init_state(out), snn.init_state(loaded)
        rng = np.random.default_rng(0)
        for _ in range(20):
            x = (rng.random((1, 2, 4, 4)) < 0.3).astype(float)
            np.testing.assert_array_equal(snn.step(state_a, out, x),
                                          snn.step(state_b, loaded, x))

    def test_ann_loader_rejects_converted_file(self, tmp_path):
        net = two_layer_net()
        stats = ann.ActivationStats(lambdas={0: 2.0, 1: 4.0})
        out = conv.convert(net, stats)
        path = tmp_path / "snn.json"
        conv.save_snn(out, path)
        with pytest.raises(ValidationError, match="convert"):
            ann.load_model(path)

    def test_snn_loader_rejects_plain_model(self, tmp_path):
        net = two_layer_net()
        path = tmp_path / "model.json"
        ann.save_model(net, path)
        with pytest.raises(ValidationError, match="not a converted"):
            conv.load_snn(path)
