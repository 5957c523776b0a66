import math

import numpy as np
import pytest

import eventsnn.ann as ann
from eventsnn.errors import TrainingDivergedError, ValidationError


def dense_net(sizes, input_dim, n_classes, seed=0):
    rng = np.random.default_rng(seed)
    layers = []
    dim = input_dim
    for units in sizes:
        layers.append(ann.Dense.create(dim, units, True, rng))
        dim = units
    layers.append(ann.Dense.create(dim, n_classes, False, rng))
    return ann.Network(layers, (input_dim,), n_classes)


class TestForward:
    def test_zero_input_zero_bias_gives_zero_logits(self):
        net = dense_net([4], 3, 2)
        _, logits = ann.forward(net, np.zeros(3))
        assert logits == pytest.approx(np.zeros(2))

    def test_single_dense_matches_hand_product(self):
        w = np.array([[1.0, 2.0], [3.0, -1.0]])
        b = np.array([0.5, -0.5])
        net = ann.Network([ann.Dense(w, b)], (2,), 2)
        _, logits = ann.forward(net, np.array([2.0, 1.0]))
        # [1*2 + 2*1 + 0.5, 3*2 - 1*1 - 0.5]
        assert logits == pytest.approx([4.5, 4.5])

    def test_relu_clamps_negative_preactivations(self):
        w = np.eye(2)
        net = ann.Network([ann.Dense(w, np.zeros(2), relu=True),
                           ann.Dense(np.eye(2), np.zeros(2))], (2,), 2)
        acts, _ = ann.forward(net, np.array([-1.0, 2.0]))
        assert acts[0][0] == pytest.approx([0.0, 2.0])

    def test_shape_mismatch_rejected(self):
        net = dense_net([4], 3, 2)
        with pytest.raises(ValidationError):
            ann.forward(net, np.zeros(5))

    def test_network_must_end_in_plain_dense(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValidationError):
            ann.Network([ann.Dense.create(3, 2, True, rng)], (3,), 2)

    def test_batchnorm_must_follow_affine(self):
        with pytest.raises(ValidationError, match="batchnorm"):
            ann.Network([ann.BatchNorm.create(3),
                         ann.Dense(np.eye(3), np.zeros(3))], (3,), 3)


class TestTemporalLoss:
    def test_single_frame_equals_cross_entropy(self):
        logits = np.array([[2.0, -1.0, 0.5]])
        labels = np.array([0])
        expected = -math.log(math.exp(2.0) /
                             (math.exp(2.0) + math.exp(-1.0) + math.exp(0.5)))
        assert ann.temporal_loss(logits, labels) == pytest.approx(expected)

    def test_mean_of_per_frame_losses(self):
        # two frames engineered to give CE 0.4 and 0.8 on a 2-class problem
        def logits_for(ce):
            # softmax([z, 0])[0] = exp(z)/(exp(z)+1) = exp(-ce)
            z = math.log(math.exp(-ce) / (1 - math.exp(-ce)))
            return [z, 0.0]

        frames = np.array([[logits_for(0.4)], [logits_for(0.8)]])
        labels = np.array([0])
        assert ann.temporal_loss(frames, labels) == pytest.approx(0.6)

    def test_identical_frames_independent_of_count(self):
        logits = np.array([[1.0, -0.3, 0.2], [0.1, 0.9, -2.0]])
        labels = np.array([1, 0])
        one = ann.temporal_loss(logits, labels)
        many = ann.temporal_loss(np.stack([logits] * 5), labels)
        assert many == pytest.approx(one)

    def test_permutation_invariant_over_frames(self):
        rng = np.random.default_rng(5)
        frames = rng.normal(size=(4, 3, 5))
        labels = np.array([0, 2, 4])
        base = ann.temporal_loss(frames, labels)
        perm = ann.temporal_loss(frames[[2, 0, 3, 1]], labels)
        assert perm == pytest.approx(base)


class TestOutlierPenalty:
    def test_direct_evaluation(self):
        # samples (3,4) and (1,0): peak 4, weakest norm 1
        a = np.array([[3.0, 4.0], [1.0, 0.0]])
        assert ann.outlier_penalty(a) == pytest.approx(math.sqrt(2) * 4 / 1)

    def test_constant_sample_gives_one(self):
        a = np.array([[2.0, 2.0, 2.0]])  # norm = 2 sqrt(3) = peak * sqrt(n)
        assert ann.outlier_penalty(a) == pytest.approx(1.0)

    def test_scale_invariant(self):
        rng = np.random.default_rng(1)
        a = rng.uniform(0.1, 2.0, size=(5, 7))
        base = ann.outlier_penalty(a)
        assert ann.outlier_penalty(3.7 * a) == pytest.approx(base)

    def test_all_zero_batch_is_zero(self):
        assert ann.outlier_penalty(np.zeros((3, 4))) == 0.0

    def test_zero_norm_sample_with_positive_peak_is_inf(self):
        a = np.array([[1.0, 2.0], [0.0, 0.0]])
        assert ann.outlier_penalty(a) == float("inf")

    def test_finite_q_matches_formula(self):
        a = np.array([[3.0, 4.0], [1.0, 0.0]])
        norms = np.array([5.0, 1.0])
        for q in (-4, -1, 2):
            expected = math.sqrt(2) * 4 / (norms ** q).sum() ** (1 / q)
            assert ann.outlier_penalty(a, q) == pytest.approx(expected)


class TestObjective:
    def setup_method(self):
        self.net = dense_net([6, 4], 5, 3, seed=2)
        rng = np.random.default_rng(7)
        self.frames = rng.uniform(0, 1, size=(8, 5))
        self.labels = rng.integers(0, 3, size=8)

    def test_alpha_zero_equals_temporal_loss(self):
        cfg = ann.TrainConfig(alpha=0.0)
        _, logits = ann.forward(self.net, self.frames)
        expected = ann.temporal_loss(logits[None], self.labels)
        assert ann.objective(self.net, self.frames, self.labels, cfg) == \
            pytest.approx(expected)

    def test_hand_sum_of_parts(self):
        cfg = ann.TrainConfig(alpha=0.003)
        acts, logits = ann.forward(self.net, self.frames)
        expected = ann.temporal_loss(logits[None], self.labels)
        for idx in self.net.relu_indices:
            expected += 0.003 * math.log(ann.outlier_penalty(acts[idx]))
        assert ann.objective(self.net, self.frames, self.labels, cfg) == \
            pytest.approx(expected)

    def test_penalty_scales_linearly_with_alpha(self):
        base = ann.objective(self.net, self.frames, self.labels,
                             ann.TrainConfig(alpha=0.0))
        one = ann.objective(self.net, self.frames, self.labels,
                            ann.TrainConfig(alpha=0.003))
        two = ann.objective(self.net, self.frames, self.labels,
                            ann.TrainConfig(alpha=0.006))
        assert two - base == pytest.approx(2 * (one - base))

    def test_dead_layer_skipped_not_minus_inf(self):
        # force every first-layer activation to zero via huge negative biases
        net = dense_net([4], 3, 2, seed=0)
        net.layers[0].bias[:] = -100.0
        cfg = ann.TrainConfig(alpha=0.01)
        value = ann.objective(net, np.ones((4, 3)), np.zeros(4, dtype=int), cfg)
        assert math.isfinite(value)


def numeric_grads(net, frames, labels, cfg, h=1e-6):
    grads = []
    for layer in net.layers:
        layer_grads = {}
        for name, param in layer.params().items():
            g = np.zeros_like(param)
            flat = param.reshape(-1)
            gflat = g.reshape(-1)
            for i in range(flat.size):
                keep = flat[i]
                flat[i] = keep + h
                up = ann.objective(net, frames, labels, cfg)
                flat[i] = keep - h
                down = ann.objective(net, frames, labels, cfg)
                flat[i] = keep
                gflat[i] = (up - down) / (2 * h)
            layer_grads[name] = g
        grads.append(layer_grads if layer_grads else None)
    return grads


def assert_grads_close(analytic, numeric, rtol=1e-4, atol=1e-8):
    for a, n in zip(analytic, numeric):
        if n is None:
            continue
        for name in n:
            np.testing.assert_allclose(a[name], n[name], rtol=rtol, atol=atol,
                                       err_msg=name)


def mixed_net(seed):
    """Small nets cycling through the layer kinds, < 1000 parameters."""
    rng = np.random.default_rng(seed)
    kind = seed % 4
    if kind == 0:
        return dense_net([8, 5], 6, 3, seed=seed), (6,)
    if kind == 1:
        layers = [ann.Conv2d.create(2, 3, 3, True, rng, stride=1, padding=1),
                  ann.AvgPool2d(2),
                  ann.Flatten(),
                  ann.Dense.create(3 * 3 * 3, 3, False, rng)]
        return ann.Network(layers, (2, 6, 6), 3), (2, 6, 6)
    if kind == 2:
        layers = [ann.Dense.create(6, 8, True, rng),
                  ann.BatchNorm.create(8),
                  ann.Dense.create(8, 3, False, rng)]
        return ann.Network(layers, (6,), 3), (6,)
    layers = [ann.Conv2d.create(2, 2, 3, True, rng, stride=2, padding=1),
              ann.BatchNorm.create(2),
              ann.Flatten(),
              ann.Dense.create(2 * 3 * 3, 3, False, rng)]
    return ann.Network(layers, (2, 6, 6), 3), (2, 6, 6)


class TestGradients:
    @pytest.mark.parametrize("alpha", [0.0, 0.003])
    @pytest.mark.parametrize("seed", range(8))
    def test_matches_central_differences(self, seed, alpha):
        net, in_shape = mixed_net(seed)
        assert net.parameter_count() <= 1000
        rng = np.random.default_rng(100 + seed)
        frames = rng.uniform(0, 1, size=(6, *in_shape))
        labels = rng.integers(0, 3, size=6)
        cfg = ann.TrainConfig(alpha=alpha)
        analytic = ann.backward(net, frames, labels, cfg)
        numeric = numeric_grads(net, frames, labels, cfg)
        assert_grads_close(analytic, numeric)

    def test_alpha_zero_matches_plain_ce_backprop(self):
        net = dense_net([5], 4, 2, seed=3)
        rng = np.random.default_rng(4)
        frames = rng.uniform(0, 1, size=(5, 4))
        labels = rng.integers(0, 2, size=5)
        g0 = ann.backward(net, frames, labels, ann.TrainConfig(alpha=0.0))
        # plain cross-entropy gradients computed by hand for this 2-layer net
        w1, b1 = net.layers[0].weight, net.layers[0].bias
        w2 = net.layers[1].weight
        pre = frames @ w1.T + b1
        a = np.maximum(pre, 0)
        logits = a @ w2.T + net.layers[1].bias
        p = np.exp(logits - logits.max(1, keepdims=True))
        p /= p.sum(1, keepdims=True)
        p[np.arange(5), labels] -= 1
        p /= 5
        dw2 = p.T @ a
        da = p @ w2
        da[pre <= 0] = 0
        dw1 = da.T @ frames
        np.testing.assert_allclose(g0[1]["weight"], dw2, rtol=1e-12)
        np.testing.assert_allclose(g0[0]["weight"], dw1, rtol=1e-12)

    def test_penalty_gradient_routes_to_peak_and_weakest(self):
        # identity "network" so layer activations equal the inputs
        net = ann.Network([ann.Dense(np.eye(3), np.zeros(3), relu=True),
                           ann.Dense(np.zeros((2, 3)), np.zeros(2))], (3,), 2)
        frames = np.array([[1.0, 5.0, 2.0],   # holds the peak (entry 1)
                           [0.5, 0.5, 0.5],   # weakest sample
                           [2.0, 2.0, 2.0]])
        labels = np.zeros(3, dtype=int)
        alpha = 0.01
        cfg = ann.TrainConfig(alpha=alpha, q=float("-inf"))
        g = ann.backward(net, frames, labels, cfg)
        base = ann.backward(net, frames, labels, ann.TrainConfig(alpha=0.0))
        extra_b = g[0]["bias"] - base[0]["bias"]
        # d lnR / d a = e_peak / max  -  a_weak / ||a_weak||^2 on the weak row;
        # summed over the batch by the bias gradient
        peak = alpha * (1 / 5.0)
        weak = alpha * frames[1] / (frames[1] @ frames[1])
        expected = -weak
        expected[1] += peak
        np.testing.assert_allclose(extra_b, expected, rtol=1e-10)


class TestTraining:
    def test_linearly_separable_toy_set(self):
        rng = np.random.default_rng(0)
        n = 40
        x = rng.normal(size=(n, 2))
        labels = (x[:, 0] + x[:, 1] > 0).astype(int)
        x[labels == 1] += 1.5
        x[labels == 0] -= 1.5
        net = dense_net([8], 2, 2, seed=1)
        cfg = ann.TrainConfig(alpha=0.0, epochs=50, batch_size=8, lr=0.1, seed=2)
        trained, history = ann.train(net, x, labels, cfg)
        acc = (ann.predict(trained, x) == labels).mean()
        assert acc == 1.0
        assert history[-1] < history[0]

    def test_fixed_seed_bit_identical_history(self):
        rng = np.random.default_rng(0)
        frames = rng.uniform(0, 1, size=(20, 6))
        labels = rng.integers(0, 3, size=20)
        net = dense_net([5], 6, 3, seed=4)
        cfg = ann.TrainConfig(alpha=0.003, epochs=10, batch_size=4, seed=9)
        _, h1 = ann.train(net, frames, labels, cfg)
        _, h2 = ann.train(net, frames, labels, cfg)
        assert h1 == h2

    def test_divergence_aborts_with_diagnostic(self):
        rng = np.random.default_rng(0)
        frames = rng.uniform(0, 1, size=(8, 4)) * 1e3
        labels = rng.integers(0, 2, size=8)
        net = dense_net([6], 4, 2, seed=5)
        # lr * weight_decay >> 2 makes the update a diverging oscillation
        cfg = ann.TrainConfig(alpha=0.0, epochs=200, batch_size=4, lr=1e6,
                              weight_decay=1.0)
        with np.errstate(all="ignore"), \
                pytest.raises(TrainingDivergedError, match="epoch"):
            ann.train(net, frames, labels, cfg)

    def test_regulariser_reduces_outlier_ratio(self):
        from eventsnn.analysis import outlier_ratios
        rng = np.random.default_rng(12)
        n = 60
        x = np.zeros((n, 8))
        labels = rng.integers(0, 2, size=n)
        x[np.arange(n), labels * 4] = rng.uniform(0.3, 1.0, size=n)
        x += rng.uniform(0, 0.05, size=x.shape)
        net = dense_net([10], 8, 2, seed=3)
        base_cfg = ann.TrainConfig(alpha=0.0, epochs=200, batch_size=16,
                                   lr=0.1, seed=7)
        reg_cfg = ann.TrainConfig(alpha=0.003, epochs=200, batch_size=16,
                                  lr=0.1, seed=7)
        plain, _ = ann.train(net, x, labels, base_cfg)
        reg, _ = ann.train(net, x, labels, reg_cfg)
        ratio_plain = np.mean(list(outlier_ratios(plain, x).values()))
        ratio_reg = np.mean(list(outlier_ratios(reg, x).values()))
        assert ratio_reg < ratio_plain


class TestCollectLambda:
    def test_max_mode(self):
        net = ann.Network([ann.Dense(np.eye(3), np.zeros(3), relu=True),
                           ann.Dense(np.eye(3), np.zeros(3))], (3,), 3)
        frames = np.array([[0.1, 2.0, 0.5]])
        stats = ann.collect_lambda(net, frames)
        assert stats.lambdas[0] == pytest.approx(2.0)
        assert stats.lambdas[1] == pytest.approx(2.0)

    def test_percentile_matches_order_statistic(self):
        rng = np.random.default_rng(8)
        values = rng.uniform(0.01, 1.0, size=1000)
        net = ann.Network([ann.Dense(np.eye(1), np.zeros(1), relu=True),
                           ann.Dense(np.ones((2, 1)), np.zeros(2))], (1,), 2)
        frames = values[:, None]
        stats = ann.collect_lambda(net, frames, mode="percentile",
                                   percentile=99.9)
        # exact-arithmetic order statistic: smallest v covering >= 99.9%
        from fractions import Fraction
        rank = math.ceil(Fraction(999, 1000) * 1000) - 1
        expected = np.sort(values)[rank]
        assert stats.lambdas[0] == pytest.approx(expected)

    def test_shared_across_frames(self):
        net = ann.Network([ann.Dense(np.eye(2), np.zeros(2), relu=True),
                           ann.Dense(np.eye(2), np.zeros(2))], (2,), 2)
        frames = np.array([[[1.0, 0.0], [3.0, 0.0]]])  # one sample, two frames
        stats = ann.collect_lambda(net, frames)
        assert stats.lambdas[0] == pytest.approx(3.0)

    def test_dead_layer_raises_naming_layer(self):
        net = dense_net([4], 3, 2, seed=0)
        net.layers[0].bias[:] = -100.0
        with pytest.raises(ValidationError, match="layer 0"):
            ann.collect_lambda(net, np.ones((3, 3)))


class TestBatchNormFold:
    def test_identity_bn_changes_nothing(self):
        rng = np.random.default_rng(0)
        identity_bn = ann.BatchNorm(np.ones(3), np.zeros(3), np.zeros(3),
                                    np.ones(3), eps=0.0)
        net = ann.Network([ann.Dense.create(4, 3, True, rng),
                           identity_bn,
                           ann.Dense.create(3, 2, False, rng)], (4,), 2)
        folded = ann.fold_batchnorm(net)
        np.testing.assert_allclose(folded.layers[0].weight, net.layers[0].weight)
        np.testing.assert_allclose(folded.layers[0].bias, net.layers[0].bias)
        assert len(folded.layers) == 2

    def test_random_net_fold_is_equivalent(self):
        rng = np.random.default_rng(6)
        bn1 = ann.BatchNorm(rng.uniform(0.5, 2, 3), rng.normal(size=3),
                            rng.normal(size=3), rng.uniform(0.5, 2, 3))
        bn2 = ann.BatchNorm(rng.uniform(0.5, 2, 4), rng.normal(size=4),
                            rng.normal(size=4), rng.uniform(0.5, 2, 4))
        net = ann.Network([
            ann.Conv2d.create(2, 3, 3, True, rng, padding=1),
            bn1,
            ann.Flatten(),
            ann.Dense.create(3 * 5 * 5, 4, True, rng),
            bn2,
            ann.Dense.create(4, 2, False, rng),
        ], (2, 5, 5), 2)
        folded = ann.fold_batchnorm(net)
        x = rng.uniform(0, 1, size=(7, 2, 5, 5))
        _, ref = ann.forward(net, x)
        _, out = ann.forward(folded, x)
        np.testing.assert_allclose(out, ref, rtol=1e-6)
        assert folded.metadata["fold_index_map"] == {"0": 0, "2": 1, "3": 2, "5": 3}

    def test_zero_sigma_rejected(self):
        net = ann.Network([ann.Dense(np.eye(2), np.zeros(2), relu=True),
                           ann.BatchNorm(np.ones(2), np.zeros(2), np.zeros(2),
                                         np.zeros(2), eps=0.0),
                           ann.Dense(np.eye(2), np.zeros(2))], (2,), 2)
        with pytest.raises(ValidationError, match="variance"):
            ann.fold_batchnorm(net)


class TestModelFiles:
    def test_round_trip_preserves_function(self, tmp_path):
        rng = np.random.default_rng(11)
        net = ann.Network([ann.Conv2d.create(2, 3, 3, True, rng, padding=1),
                           ann.BatchNorm.create(3),
                           ann.AvgPool2d(2),
                           ann.Flatten(),
                           ann.Dense.create(3 * 3 * 3, 2, False, rng)],
                          (2, 6, 6), 2, metadata={"note": "t"})
        stats = ann.ActivationStats(lambdas={0: 1.5, 4: 2.5})
        path = tmp_path / "model.json"
        ann.save_model(net, path, stats)
        loaded, loaded_stats = ann.load_model(path)
        x = rng.uniform(0, 1, size=(3, 2, 6, 6))
        _, ref = ann.forward(net, x)
        _, out = ann.forward(loaded, x)
        np.testing.assert_array_equal(out, ref)
        assert loaded_stats.lambdas == stats.lambdas
        assert loaded.metadata["note"] == "t"

    def test_stats_file_round_trip(self, tmp_path):
        stats = ann.ActivationStats(lambdas={0: 1.0, 3: 0.25},
                                    mode="percentile", percentile=99.9)
        ann.save_stats(stats, tmp_path / "s.json")
        loaded = ann.load_stats(tmp_path / "s.json")
        assert loaded == stats
