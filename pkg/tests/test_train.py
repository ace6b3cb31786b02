import numpy as np
import pytest

from sngp.gp_layer import softmax
from sngp.linalg import RngState
from sngp.train import (TrainConfig, TrainReport, TrainingDivergedError,
                        build_sngp_model, load_checkpoint, loss_and_grads,
                        logit_variance_uncertainty, predict, predict_batch,
                        prob_margin_uncertainty, save_checkpoint, train)

from oracles import finite_diff_gradients, max_relative_gradient_error, sigma_max_jacobi


def small_model(seed=1, gp_head=True, **kwargs):
    defaults = dict(input_dim=2, hidden_width=8, depth=3, num_classes=2, seed=seed,
                    num_features=32, dropout_rate=0.0, sn_bound=0.9,
                    use_layer_norm=True, length_scale=2.0, gp_head=gp_head)
    defaults.update(kwargs)
    return build_sngp_model(**defaults)


def toy_batch(seed=2, n=12):
    rng = RngState(seed)
    x = rng.normal_matrix(n, 2)
    y = (rng.uniform(n, 0.0, 1.0) > 0.5).astype(int)
    return x, y


class TestLossAndGrads:
    def test_uniform_logits_give_log_k(self):
        model = small_model()
        model.head.beta[:] = 0.0
        x, y = toy_batch()
        loss, _ = loss_and_grads(model, x, y, train_mode=False)
        assert loss == pytest.approx(np.log(2.0))

    def test_saturated_ce_leaves_l2_term(self):
        model = small_model(gp_head=False)
        x, y = toy_batch()
        # force hugely confident correct logits through the dense head bias
        model.head.weight[:] = 0.0
        model.head.bias[:] = 0.0
        h, _ = model.hidden(x)
        for i, label in enumerate(y):
            pass
        model.head.bias[:] = np.array([50.0, -50.0])
        y_forced = np.zeros(len(y), dtype=int)
        l2_beta, l2_scale = 0.3, 2.0
        loss, _ = loss_and_grads(model, x, y_forced, l2_beta=l2_beta, l2_scale=l2_scale,
                                 train_mode=False)
        l2_term = l2_beta * 0.5 * float(np.sum(model.head.weight**2)) / l2_scale
        assert loss == pytest.approx(l2_term, abs=1e-12)

    def test_full_model_gradient_check(self):
        model = small_model(seed=3)
        model.head.beta[:] = 0.3 * RngState(4).normal_matrix(2, 32)
        x, y = toy_batch(seed=5)

        def loss_fn():
            return loss_and_grads(model, x, y, l2_beta=0.1, l2_scale=10.0,
                                  train_mode=False)[0]

        _, analytic = loss_and_grads(model, x, y, l2_beta=0.1, l2_scale=10.0,
                                     train_mode=False)
        numeric = finite_diff_gradients(loss_fn, model.parameters())
        worst, name = max_relative_gradient_error(analytic, numeric)
        assert worst <= 1e-4, f"gradient mismatch at {name}: {worst}"

    def test_dense_head_gradient_check(self):
        model = small_model(seed=6, gp_head=False)
        x, y = toy_batch(seed=7)

        def loss_fn():
            return loss_and_grads(model, x, y, train_mode=False)[0]

        _, analytic = loss_and_grads(model, x, y, train_mode=False)
        numeric = finite_diff_gradients(loss_fn, model.parameters())
        worst, name = max_relative_gradient_error(analytic, numeric)
        assert worst <= 1e-4, f"gradient mismatch at {name}: {worst}"

    def test_gradient_check_with_head_projection(self):
        model = small_model(seed=8, gp_projection_dim=4)
        model.head.beta[:] = 0.3 * RngState(9).normal_matrix(2, 32)
        x, y = toy_batch(seed=10)

        def loss_fn():
            return loss_and_grads(model, x, y, train_mode=False)[0]

        _, analytic = loss_and_grads(model, x, y, train_mode=False)
        numeric = finite_diff_gradients(loss_fn, model.parameters())
        worst, name = max_relative_gradient_error(analytic, numeric)
        assert worst <= 1e-4, f"gradient mismatch at {name}: {worst}"

    def test_label_range_checked(self):
        model = small_model()
        x, _ = toy_batch()
        with pytest.raises(ValueError):
            loss_and_grads(model, x, np.full(len(x), 5))


class TestTrainLoop:
    def test_separable_points_reach_full_accuracy(self):
        rng = RngState(8)
        x = np.vstack([rng.normal_matrix(20, 2) * 0.2 + np.array([-2.0, 0.0]),
                       rng.normal_matrix(20, 2) * 0.2 + np.array([2.0, 0.0])])
        y = np.array([0] * 20 + [1] * 20)
        model = small_model(seed=9)
        cfg = TrainConfig(epochs=20, batch_size=8, learning_rate=0.1, momentum=0.9, seed=10)
        report = train(model, x, y, cfg)
        assert report.final_train_accuracy == 1.0

    def test_epochs_zero_changes_nothing(self):
        model = small_model(seed=11)
        before = {k: v.copy() for k, v in model.parameters().items()}
        x, y = toy_batch()
        cfg = TrainConfig(epochs=0, seed=12)
        train(model, x, y, cfg)
        for k, v in model.parameters().items():
            assert np.array_equal(v, before[k])
        for p in model.head.precision:
            assert np.array_equal(p, model.head.ridge_s * np.eye(32))

    def test_spectral_bound_after_training(self):
        x, y = toy_batch(seed=13, n=64)
        model = small_model(seed=14)
        cfg = TrainConfig(epochs=10, batch_size=16, learning_rate=0.1, momentum=0.9, seed=15)
        train(model, x, y, cfg)
        for blk in model.network.blocks:
            assert sigma_max_jacobi(blk.layer.weight) <= 0.9 + 1e-6

    def test_bit_identical_reruns(self):
        x, y = toy_batch(seed=16, n=40)

        def run():
            model = small_model(seed=17, dropout_rate=0.1)
            cfg = TrainConfig(epochs=5, batch_size=8, learning_rate=0.05,
                              momentum=0.9, seed=18)
            train(model, x, y, cfg)
            return model

        a, b = run(), run()
        for (ka, va), (kb, vb) in zip(sorted(a.parameters().items()),
                                      sorted(b.parameters().items())):
            assert ka == kb
            assert np.array_equal(va, vb)
        for pa, pb in zip(a.head.precision, b.head.precision):
            assert np.array_equal(pa, pb)

    def test_substep_order_observable(self):
        x, y = toy_batch(seed=19, n=16)
        model = small_model(seed=20)
        events = []

        def hooks(event, epoch, step):
            events.append((step, event))

        cfg = TrainConfig(epochs=2, batch_size=8, learning_rate=0.05, seed=21)
        train(model, x, y, cfg, hooks=hooks)
        # final epoch steps must run sgd -> spectral_norm -> precision_update
        final_epoch_steps = [e for s, e in events if s >= 2]
        assert final_epoch_steps == ["sgd_update", "spectral_norm", "precision_update"] * 2
        early_steps = [e for s, e in events if s < 2]
        assert early_steps == ["sgd_update", "spectral_norm"] * 2

    def test_custom_precision_update_epoch(self):
        x, y = toy_batch(seed=45, n=16)
        model = small_model(seed=46)
        events = []
        cfg = TrainConfig(epochs=3, batch_size=8, learning_rate=0.05, seed=47,
                          precision_update_epoch=0)
        train(model, x, y, cfg, hooks=lambda e, ep, s: events.append((ep, e)))
        precision_epochs = {ep for ep, e in events if e == "precision_update"}
        assert precision_epochs == {0}

    def test_divergence_guard(self):
        x, y = toy_batch(seed=22, n=16)
        model = small_model(seed=23)
        cfg = TrainConfig(epochs=3, batch_size=8, learning_rate=1e9, seed=24)
        with pytest.raises(TrainingDivergedError):
            train(model, x, y, cfg)

    def test_empty_dataset_rejected(self):
        model = small_model()
        with pytest.raises(ValueError):
            train(model, np.zeros((0, 2)), np.zeros(0, dtype=int), TrainConfig(epochs=1))

    def test_loss_trajectory_smoothed_non_increasing(self):
        from sngp.data import gen_two_moons
        ds = gen_two_moons(100, 0.1, seed=25)
        model = small_model(seed=26, hidden_width=16, num_features=128)
        cfg = TrainConfig(epochs=15, batch_size=20, learning_rate=0.05, momentum=0.9, seed=27)
        report = train(model, ds.points, ds.labels, cfg)
        losses = np.array(report.epoch_losses)
        smoothed = np.convolve(losses, np.ones(3) / 3.0, mode="valid")
        assert np.all(np.diff(smoothed) <= 1e-3)


class TestPredict:
    def trained_model(self):
        rng = RngState(28)
        x = np.vstack([rng.normal_matrix(30, 2) * 0.3 + np.array([-1.5, 0.0]),
                       rng.normal_matrix(30, 2) * 0.3 + np.array([1.5, 0.0])])
        y = np.array([0] * 30 + [1] * 30)
        model = small_model(seed=29, use_layer_norm=False)
        cfg = TrainConfig(epochs=15, batch_size=10, learning_rate=0.1, momentum=0.9,
                          seed=30, precision_exact=True)
        train(model, x, y, cfg)
        return model, x

    def test_probs_sum_to_one(self):
        model, x = self.trained_model()
        pred = predict(model, np.array([0.3, 0.3]), mc_samples=10, rng=RngState(31))
        assert abs(pred.probs.sum() - 1.0) <= 1e-9
        assert np.all(pred.variance_logits >= 0.0)

    def test_zero_variance_head_is_plain_softmax(self):
        model = small_model(seed=32, gp_head=False)
        pred = predict(model, np.array([0.1, -0.2]), mc_samples=1)
        expected = softmax(model.eval_logits(np.array([[0.1, -0.2]])))[0]
        assert np.allclose(pred.probs, expected)
        assert np.all(pred.variance_logits == 0.0)

    def test_far_field_variance_reverts_to_prior(self):
        # shallow model, feature count well above sample count so the prior
        # dominates away from the data
        rng = RngState(33)
        x = rng.normal_matrix(100, 2)
        y = (x[:, 0] > 0).astype(int)
        model = build_sngp_model(input_dim=2, hidden_width=0, depth=0, num_classes=2,
                                 seed=34, num_features=2048, identity_hidden=True,
                                 use_layer_norm=False, length_scale=2.0, gp_head=True)
        cfg = TrainConfig(epochs=5, batch_size=25, learning_rate=0.1, momentum=0.9,
                          seed=35, precision_exact=True)
        train(model, x, y, cfg)
        far = np.array([100.0 * x.std(), 0.0])
        pred = predict(model, far, mc_samples=4, rng=RngState(36))
        phi = model.head.rff_features(far)
        prior = float(phi @ phi) / model.head.ridge_s
        assert abs(pred.variance_logits.mean() - prior) / prior <= 0.10

    def test_predict_deterministic_given_seed(self):
        model, _ = self.trained_model()
        a = predict(model, np.array([0.2, 0.1]), mc_samples=10, rng=RngState(34))
        b = predict(model, np.array([0.2, 0.1]), mc_samples=10, rng=RngState(34))
        assert np.array_equal(a.probs, b.probs)

    def test_uncertainty_summaries(self):
        model, _ = self.trained_model()
        pred = predict(model, np.array([0.0, 0.0]), mc_samples=5, rng=RngState(35))
        assert logit_variance_uncertainty(pred) == pytest.approx(pred.variance_logits.mean())
        margin = prob_margin_uncertainty(pred)
        assert 0.0 <= margin <= 1.0

    def test_margin_values(self):
        from sngp.gp_layer import GpPrediction
        make = lambda p: GpPrediction(mean_logits=np.zeros(2), variance_logits=np.zeros(2),
                                      probs=np.array([p, 1.0 - p]), uncertainty_ds=0.5)
        assert prob_margin_uncertainty(make(0.5)) == pytest.approx(1.0)
        assert prob_margin_uncertainty(make(1.0)) == pytest.approx(0.0)
        assert prob_margin_uncertainty(make(0.75)) == pytest.approx(0.5)

    def test_margin_requires_binary(self):
        from sngp.gp_layer import GpPrediction
        pred = GpPrediction(mean_logits=np.zeros(3), variance_logits=np.zeros(3),
                            probs=np.full(3, 1 / 3), uncertainty_ds=0.5)
        with pytest.raises(ValueError):
            prob_margin_uncertainty(pred)

    def test_batch_matches_single(self):
        model, _ = self.trained_model()
        pts = np.array([[0.1, 0.2], [1.0, -0.5]])
        means, variances, _, ds = predict_batch(model, pts, mc_samples=3, rng=RngState(36))
        single = predict(model, pts[1], mc_samples=3, rng=RngState(37))
        assert np.allclose(means[1], single.mean_logits)
        assert np.allclose(variances[1], single.variance_logits)
        assert ds[1] == pytest.approx(single.uncertainty_ds)


class TestCheckpoint:
    def roundtrip(self, model, tmp_path, variant="sngp"):
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path, variant=variant, config_echo={"seed": 1})
        return load_checkpoint(path)

    def test_gp_model_bit_exact(self, tmp_path):
        model = small_model(seed=38)
        x, y = toy_batch(seed=39, n=24)
        train(model, x, y, TrainConfig(epochs=3, batch_size=8, seed=40,
                                       learning_rate=0.05))
        back, header = self.roundtrip(model, tmp_path)
        assert header["variant"] == "sngp"
        assert header["format_version"] == 1
        for (ka, va), (kb, vb) in zip(sorted(model.parameters().items()),
                                      sorted(back.parameters().items())):
            assert ka == kb and np.array_equal(va, vb)
        for pa, pb in zip(model.head.precision, back.head.precision):
            assert np.array_equal(pa, pb)
        assert np.array_equal(model.head.w_fixed, back.head.w_fixed)
        assert np.array_equal(model.head.b_fixed, back.head.b_fixed)
        pts = np.array([[0.4, -0.4]])
        assert np.array_equal(model.eval_logits(pts), back.eval_logits(pts))

    def test_dense_model_roundtrip(self, tmp_path):
        model = small_model(seed=41, gp_head=False, spectral_norm=False)
        back, header = self.roundtrip(model, tmp_path, variant="deterministic")
        assert not back.has_gp_head
        assert not back.spectral_norm_enabled
        pts = np.array([[0.1, 0.9]])
        assert np.array_equal(model.eval_logits(pts), back.eval_logits(pts))

    def test_identity_hidden_roundtrip(self, tmp_path):
        model = build_sngp_model(input_dim=2, hidden_width=0, depth=0, num_classes=2,
                                 seed=42, num_features=64, identity_hidden=True,
                                 use_layer_norm=False, gp_head=True)
        back, _ = self.roundtrip(model, tmp_path, variant="shallow_gp")
        assert back.network is None
        pts = np.array([[0.3, 0.7]])
        assert np.array_equal(model.eval_logits(pts), back.eval_logits(pts))

    def test_head_projection_roundtrip(self, tmp_path):
        model = small_model(seed=44, gp_projection_dim=4)
        back, header = self.roundtrip(model, tmp_path)
        assert header["head"]["projection_dim"] == 4
        assert np.array_equal(model.head.input_projection, back.head.input_projection)
        pts = np.array([[0.6, -0.2]])
        assert np.array_equal(model.eval_logits(pts), back.eval_logits(pts))

    def test_save_twice_byte_identical(self, tmp_path):
        model = small_model(seed=43)
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(model, p1, config_echo={"seed": 43})
        save_checkpoint(model, p2, config_echo={"seed": 43})
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOTACKPT" + b"\x00" * 16)
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(path)


def test_report_text_contains_config_echo():
    report = TrainReport(epoch_losses=[0.5, 0.4], final_train_accuracy=0.9, seed=7,
                         config_echo={"epochs": 2, "batch_size": 8})
    text = report.as_text()
    assert "config.epochs=2" in text
    assert "loss_epoch_1=" in text
    assert "seed=7" in text
