import math

import numpy as np
import pytest

from rfad.data import Dataset, apply_preprocessing, zca_fit
from rfad.distill import (Coreset, DistillConfig, distill_run, distill_step, evaluate_coreset, init_coreset,
                          kernel_for)
from rfad.errors import ConfigError, DataError, IncompatibleKernelError
from rfad.kernels import EmpiricalKernel, ExactFCKernel
from rfad.networks import sample_ensemble
from rfad.optim import OptimizerState
from rfad.utils import one_hot_centered


def blobs(n_per_class=30, classes=3, shape=(1, 3, 3), seed=0, spread=0.6):
    rng = np.random.default_rng(seed)
    d = int(np.prod(shape))
    centres = rng.standard_normal((classes, d)) * 2
    labels = np.repeat(np.arange(classes), n_per_class)
    x = centres[labels] + spread * rng.standard_normal((len(labels), d))
    perm = rng.permutation(len(labels))
    return Dataset(x[perm].reshape((-1,) + shape).astype(np.float32), labels[perm], classes, None, "blobs")


def fc_config(**kw):
    base = dict(architecture="fc", depth=3, channels=64, n_networks=2, batch_size=40, chunk_size=20,
                img_per_class=2, val_size=20, val_networks=4, val_period=5, patience=10, max_iterations=20)
    base.update(kw)
    return DistillConfig(**base)


def batch_of(ds, n=40, seed=0):
    idx = np.random.default_rng(seed).choice(len(ds), n, replace=False)
    return ds.images[idx], one_hot_centered(ds.labels[idx], ds.num_classes)


class TestInit:
    def test_real_init(self):
        ds = blobs()
        cs = init_coreset(ds, fc_config())
        assert not cs.mask.any()
        flat = ds.images.reshape(len(ds), -1).astype(np.float64)
        for img in cs.base_images.reshape(cs.size, -1):
            assert np.any(np.all(flat == img, axis=1))
        assert np.bincount(cs.class_ids).tolist() == [2, 2, 2]

    def test_labels_centered_one_hot(self):
        cs = init_coreset(blobs(), fc_config())
        expect = np.eye(3)[cs.class_ids] - 1.0 / 3
        assert cs.labels.tobytes() == expect.tobytes() or np.array_equal(cs.labels, expect)

    def test_identity_transform_and_unit_tau(self):
        cs = init_coreset(blobs(), fc_config())
        assert np.array_equal(cs.transform, np.eye(9)) and cs.log_tau == 0.0

    def test_rho_one_freezes_everything(self):
        cs = init_coreset(blobs(), fc_config(rho=1.0))
        assert cs.mask.all() and not cs.learn_transform

    @pytest.mark.parametrize("rho", [0.1, 0.5, 0.9, 0.333])
    def test_exact_frozen_count(self, rho):
        cs = init_coreset(blobs(), fc_config(rho=rho))
        assert cs.frozen_count() == math.floor(rho * cs.base_images.size)

    def test_exact_count_ten_thousand_entries(self):
        ds = blobs(n_per_class=2, classes=10, shape=(1, 10, 10))
        cs = init_coreset(ds, fc_config(rho=0.9, img_per_class=10))
        assert cs.base_images.size == 10_000 and cs.frozen_count() == 9_000

    def test_insufficient_examples(self):
        with pytest.raises(DataError):
            init_coreset(blobs(n_per_class=1), fc_config(img_per_class=2))

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            fc_config(rho=1.5)
        with pytest.raises(ConfigError):
            fc_config(patience=7, val_period=5)
        with pytest.raises(ConfigError):
            fc_config(loss="hinge")


class TestStep:
    def test_zero_learning_rates_leave_coreset_unchanged(self):
        ds = blobs()
        cfg = fc_config(lr_coreset=0, lr_transform=0, lr_log_tau=0, lr_labels=0)
        cs = init_coreset(ds, cfg)
        before = cs.copy()
        ens = sample_ensemble(cs.network_spec, 2, 0)
        loss = distill_step(cs, batch_of(ds), ens, OptimizerState(), cfg)
        assert math.isfinite(loss)
        assert cs.base_images.tobytes() == before.base_images.tobytes()
        assert cs.transform.tobytes() == before.transform.tobytes() and cs.log_tau == before.log_tau

    @pytest.mark.parametrize("loss", ["platt", "mse"])
    def test_toy_loss_decreases(self, loss):
        """2 support points, 8 batch points in 2-D, fixed features: loss falls every step."""
        rng = np.random.default_rng(0)
        xb = np.concatenate([rng.normal(-1, 0.3, (4, 2)), rng.normal(1, 0.3, (4, 2))]).reshape(8, 1, 1, 2)
        ds = Dataset(xb.astype(np.float32), np.repeat([0, 1], 4), 2)
        cfg = fc_config(img_per_class=1, loss=loss, channels=256, lr_coreset=1e-3, lr_transform=0.0,
                        lr_log_tau=0.0)
        cs = init_coreset(ds, cfg)
        cs.base_images = np.array([0.3, 0.1, 0.1, -0.2]).reshape(2, 1, 1, 2)  # start from poor points
        ens = sample_ensemble(cs.network_spec, 4, 0)
        opt = OptimizerState()
        batch = (ds.images, one_hot_centered(ds.labels, 2))
        losses = [distill_step(cs, batch, ens, opt, cfg) for _ in range(50)]
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_mask_reapplied_bit_exactly(self):
        ds = blobs()
        cfg = fc_config(rho=0.5)
        cs = init_coreset(ds, cfg)
        frozen = cs.base_images[cs.mask].tobytes()
        opt = OptimizerState()
        for it in range(5):
            distill_step(cs, batch_of(ds, seed=it), sample_ensemble(cs.network_spec, 2, it), opt, cfg)
        assert cs.base_images[cs.mask].tobytes() == frozen
        assert not np.array_equal(cs.base_images[~cs.mask], init_coreset(ds, cfg).base_images[~cs.mask])
        assert np.array_equal(cs.transform, np.eye(9))

    def test_labels_stable_unless_learned(self):
        ds = blobs()
        for learn in (False, True):
            cfg = fc_config(learn_labels=learn)
            cs = init_coreset(ds, cfg)
            y0 = cs.labels.tobytes()
            opt = OptimizerState()
            for it in range(3):
                distill_step(cs, batch_of(ds, seed=it), sample_ensemble(cs.network_spec, 2, it), opt, cfg)
            assert (cs.labels.tobytes() == y0) != learn

    def test_learned_quantities_move(self):
        ds = blobs()
        cfg = fc_config()
        cs = init_coreset(ds, cfg)
        distill_step(cs, batch_of(ds), sample_ensemble(cs.network_spec, 2, 0), OptimizerState(), cfg)
        assert cs.log_tau != 0.0 and not np.array_equal(cs.transform, np.eye(9))

    def test_zca_pixel_space_corruption(self):
        rng = np.random.default_rng(0)
        raw = Dataset(rng.random((60, 3, 2, 2)).astype(np.float32), np.repeat(np.arange(3), 20), 3)
        ds = apply_preprocessing(raw, zca_fit(raw, 0.1))
        cfg = fc_config(rho=0.9)
        cs = init_coreset(ds, cfg)
        assert cs.whiten is not None
        frozen = cs.base_images[cs.mask].tobytes()
        distill_step(cs, batch_of(ds), sample_ensemble(cs.network_spec, 2, 0), OptimizerState(), cfg)
        assert cs.base_images[cs.mask].tobytes() == frozen
        eff = cs.effective_images().reshape(cs.size, -1)
        np.testing.assert_allclose(eff, (cs.base_images.reshape(cs.size, -1) - cs.whiten.mean) @ cs.whiten.W)


class TestRun:
    def test_history_and_checkpoint_selection(self):
        ds = blobs(n_per_class=40)
        cfg = fc_config(max_iterations=20, patience=10, val_period=5)
        cs, h = distill_run(ds, cfg)
        its = [i for i, _ in h.validation]
        assert its == list(range(0, h.stopped_at + 1, 5))
        best_it = min(h.validation, key=lambda t: t[1])[0]
        assert h.best_iteration == best_it
        assert len(h.train_loss) == h.stopped_at

    def test_patience_on_degenerate_problem(self):
        ds = Dataset(np.random.default_rng(0).standard_normal((30, 1, 2, 2)).astype(np.float32), np.zeros(30), 1)
        cfg = fc_config(max_iterations=200, patience=10, val_period=5, loss="mse")
        cs, h = distill_run(ds, cfg)
        assert h.stop_reason == "patience" and h.stopped_at == 10 and h.best_iteration == 0
        assert np.array_equal(cs.base_images, init_coreset(ds, cfg).base_images)

    def test_validation_larger_than_train(self):
        with pytest.raises(ConfigError):
            distill_run(blobs(n_per_class=3), fc_config(val_size=100, img_per_class=1))

    def test_deterministic(self):
        ds = blobs()
        a, _ = distill_run(ds, fc_config(max_iterations=6))
        b, _ = distill_run(ds, fc_config(max_iterations=6))
        assert a.base_images.tobytes() == b.base_images.tobytes()
        assert a.transform.tobytes() == b.transform.tobytes() and a.log_tau == b.log_tau


class TestEvaluate:
    def test_full_dataset_support_interpolates(self):
        ds = blobs(n_per_class=5)
        cs = init_coreset(ds, fc_config(img_per_class=5))
        assert cs.size == len(ds)
        assert evaluate_coreset(cs, ds, ExactFCKernel("nngp", 3), lambda0=1e-10) == 1.0

    def test_exact_kernel_needs_fc(self):
        ds = blobs(shape=(1, 8, 8))
        cs = init_coreset(ds, fc_config(architecture="convnet3", channels=4))
        with pytest.raises(IncompatibleKernelError):
            kernel_for(cs, "exact-fc-ntk")
        with pytest.raises(IncompatibleKernelError):
            evaluate_coreset(cs, ds, ExactFCKernel("nngp", 3))

    def test_empirical_accuracy_approaches_reference(self):
        ds = blobs(n_per_class=60, classes=4, shape=(1, 4, 4), spread=1.6, seed=3)
        test = blobs(n_per_class=60, classes=4, shape=(1, 4, 4), spread=1.6, seed=3)
        cs = init_coreset(ds, fc_config(img_per_class=5, channels=32))
        from rfad.distill import krr_test_predictions

        ref = np.argmax(krr_test_predictions(cs, test.images, EmpiricalKernel(cs.network_spec, 512, 99)), axis=1)
        disagree = []
        for n in (1, 2, 4, 8, 16, 32):
            d = [np.mean(np.argmax(krr_test_predictions(cs, test.images, EmpiricalKernel(cs.network_spec, n, s)), 1) != ref)
                 for s in range(5)]
            disagree.append(np.mean(d))
        assert disagree[-1] < disagree[0]
        assert np.polyfit(np.log2([1, 2, 4, 8, 16, 32]), disagree, 1)[0] < 0
