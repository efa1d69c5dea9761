import math

import numpy as np
import pytest

from conftest import tiny_mlp
from ptsparse.data import CalibrationSet
from ptsparse.nn import Dense, Network
from ptsparse.sparsity import (NMPattern, global_sparsity, topk_mask,
                               uniform_distribution)
from ptsparse.training import (TrainConfig, TrainState, build_masks, cosine_lr,
                               mask_churn, run_training, train_step)


def make_calib(seed=0, n=64, n_in=6, classes=3):
    r = np.random.default_rng(seed)
    return CalibrationSet(inputs=r.standard_normal((n, n_in)),
                          labels=r.integers(0, classes, n), seed=seed)


class TestTrainConfig:
    def test_defaults_valid(self):
        TrainConfig()

    def test_bad_values_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig(delta_t=0)
        with pytest.raises(ValueError):
            TrainConfig(alpha=-1e-3)
        with pytest.raises(ValueError):
            TrainConfig(objective="hinge")
        with pytest.raises(ValueError):
            TrainConfig(iterations=-1)


class TestCosineLR:
    def test_endpoints(self):
        assert cosine_lr(0, 100, 0.2) == pytest.approx(0.2)
        assert cosine_lr(100, 100, 0.2) == pytest.approx(0.0, abs=1e-15)

    def test_midpoint_is_half(self):
        assert cosine_lr(50, 100, 0.2) == pytest.approx(0.1)

    def test_quarter_point(self):
        expected = 0.2 * 0.5 * (1 + math.cos(math.pi * 0.25))
        assert cosine_lr(25, 100, 0.2) == pytest.approx(expected)


class TestUpdateRule:
    def _one_param_state(self, w, mask, cfg):
        layer = Dense(1, 1)
        layer.weight = np.array([[w]])
        layer.bias = np.zeros(1)
        net = Network([layer])
        state = TrainState(student=net, masks={0: np.array([[mask]])},
                           rates={0: 0.0})
        return net, state

    def _apply(self, w, mask, grad, lr, cfg):
        from ptsparse.training import _apply_update
        net, state = self._one_param_state(w, mask, cfg)
        grads = {0: {"weight": np.array([[grad]])}}
        _apply_update(state, grads, lr, cfg)
        return net.layers[0].weight[0, 0]

    def test_pruned_entry_hand_value(self):
        # w=0.1, g=0.2, lr=0.01, alpha=3e-5, pruned:
        # 0.1 - 0.01*0.2 - 3e-5*0.1 = 0.097997 exactly
        cfg = TrainConfig(alpha=3e-5, weight_decay=0.0)
        got = self._apply(0.1, 0.0, 0.2, 0.01, cfg)
        assert got == 0.1 - 0.01 * 0.2 - 3e-5 * 0.1
        assert got == pytest.approx(0.097997, abs=1e-12)

    def test_unpruned_entry_hand_value(self):
        # surviving weight with weight_decay=0: plain SGD step to 0.098
        cfg = TrainConfig(alpha=3e-5, weight_decay=0.0)
        got = self._apply(0.1, 1.0, 0.2, 0.01, cfg)
        assert got == 0.1 - 0.01 * 0.2
        assert got == pytest.approx(0.098, abs=1e-15)

    def test_pruned_decay_not_scaled_by_lr(self):
        cfg = TrainConfig(alpha=3e-5)
        a = self._apply(0.5, 0.0, 0.0, 0.01, cfg)
        b = self._apply(0.5, 0.0, 0.0, 0.0001, cfg)
        assert a == b == 0.5 - 3e-5 * 0.5

    def test_unpruned_weight_decay_scaled_by_lr(self):
        cfg = TrainConfig(alpha=0.0, weight_decay=0.1)
        got = self._apply(0.5, 1.0, 0.0, 0.01, cfg)
        assert got == pytest.approx(0.5 - 0.01 * 0.1 * 0.5)

    def test_alpha_zero_all_ones_mask_is_plain_sgd(self):
        # oracle: hand-rolled dense SGD on a copy, bit for bit
        teacher = tiny_mlp(seed=3)
        calib = make_calib(seed=3)
        net = teacher.copy()
        idx = net.prunable_indices()
        rates = {i: 0.0 for i in idx}
        state = TrainState(student=net, masks=build_masks(net, rates),
                           rates=rates)
        cfg = TrainConfig(iterations=5, batch_size=16, lr=0.05, alpha=0.0,
                          weight_decay=0.0, delta_t=1, objective="kl")
        sched = cfg.schedule()

        ref = teacher.copy()
        from ptsparse.nn.network import predict_distribution
        from ptsparse.objectives import kl_loss
        rng = np.random.default_rng(0)
        for it in range(cfg.iterations):
            sel = rng.permutation(len(calib.inputs))[:cfg.batch_size]
            batch = (calib.inputs[sel], calib.labels[sel])
            train_step(state, teacher, batch, cfg, sched, len(calib.inputs))
            z = teacher.predict(batch[0])
            trace = ref.forward(batch[0], mode="train")
            _, gl = kl_loss(z, predict_distribution(trace.logits))
            grads = ref.backward(trace, gl, ste=True)
            lr = cosine_lr(it, cfg.iterations, cfg.lr)
            for i, pg in grads.items():
                for name, g in pg.items():
                    if name in ("running_mean", "running_var"):
                        continue
                    ref.layers[i].params()[name] -= lr * g
        assert net.param_hash() == ref.param_hash()


class TestMasksAndChurn:
    def test_cardinality_preserved_after_refresh(self):
        net = tiny_mlp(seed=1)
        rates = {i: 0.6 for i in net.prunable_indices()}
        before = build_masks(net, rates)
        for i in rates:
            net.layers[i].weight += np.random.default_rng(0).standard_normal(
                net.layers[i].weight.shape)
        after = build_masks(net, rates)
        for i in rates:
            assert after[i].sum() == before[i].sum()

    def test_churn_zero_for_identical(self):
        net = tiny_mlp()
        masks = build_masks(net, {i: 0.5 for i in net.prunable_indices()})
        assert mask_churn(masks, masks) == 0.0

    def test_churn_counts_flips(self):
        old = {0: np.array([1.0, 0.0, 1.0, 0.0])}
        new = {0: np.array([1.0, 1.0, 0.0, 0.0])}
        assert mask_churn(old, new) == pytest.approx(0.5)

    def test_higher_alpha_damps_churn(self):
        # pruned-weight decay shrinks pruned magnitudes, so fewer entries
        # re-enter the mask at refresh time
        teacher = tiny_mlp(seed=6)
        calib = make_calib(seed=6, n=128)
        dist = uniform_distribution(teacher, 0.5)

        def total_churn(alpha):
            cfg = TrainConfig(iterations=60, batch_size=32, lr=0.05,
                              alpha=alpha, delta_t=1, objective="kl",
                              metrics_every=1, seed=0)
            res = run_training(teacher, dist, calib, cfg)
            return sum(row["churn"] for row in res.history)

        assert total_churn(0.1) < total_churn(0.0)


class TestRunTraining:
    def test_deterministic(self):
        teacher = tiny_mlp(seed=2)
        calib = make_calib(seed=2)
        dist = uniform_distribution(teacher, 0.5)
        cfg = TrainConfig(iterations=20, batch_size=16, seed=5)
        a = run_training(teacher, dist, calib, cfg)
        b = run_training(teacher, dist, calib, cfg)
        assert a.student.param_hash() == b.student.param_hash()
        assert a.final_sparsity == b.final_sparsity

    def test_final_weights_are_hard_masked(self):
        teacher = tiny_mlp(seed=2)
        calib = make_calib(seed=2)
        dist = uniform_distribution(teacher, 0.7)
        res = run_training(teacher, dist, calib,
                           TrainConfig(iterations=15, batch_size=16))
        for i, m in res.masks.items():
            w = res.student.layers[i].weight
            np.testing.assert_array_equal(w[m == 0.0], 0.0)

    def test_realized_sparsity_matches_masks(self):
        teacher = tiny_mlp(seed=2)
        calib = make_calib(seed=2)
        dist = uniform_distribution(teacher, 0.6)
        res = run_training(teacher, dist, calib,
                           TrainConfig(iterations=10, batch_size=16))
        assert res.final_sparsity == pytest.approx(
            global_sparsity(res.student, res.masks))

    def test_zero_iterations_is_oneshot(self):
        teacher = tiny_mlp(seed=2)
        calib = make_calib(seed=2)
        dist = uniform_distribution(teacher, 0.5)
        res = run_training(teacher, dist, calib, TrainConfig(iterations=0))
        for i, m in res.masks.items():
            np.testing.assert_array_equal(
                res.student.layers[i].weight,
                teacher.layers[i].weight * topk_mask(teacher.layers[i].weight, 0.5))

    def test_distribution_nm_exclusive(self):
        teacher = tiny_mlp(seed=2)
        calib = make_calib(seed=2)
        dist = uniform_distribution(teacher, 0.5)
        with pytest.raises(ValueError):
            run_training(teacher, dist, calib, TrainConfig(iterations=1),
                         nm=NMPattern(2, 4))
        with pytest.raises(ValueError):
            run_training(teacher, None, calib, TrainConfig(iterations=1))

    def test_nm_masks_respect_pattern_throughout(self):
        teacher = tiny_mlp(seed=2)
        calib = make_calib(seed=2)
        pat = NMPattern(2, 4)
        res = run_training(teacher, None, calib,
                           TrainConfig(iterations=25, batch_size=16, delta_t=5),
                           nm=pat)
        for i, m in res.masks.items():
            rows = m.reshape(m.shape[0], -1)
            for r in range(rows.shape[0]):
                for start in range(0, rows.shape[1], pat.m):
                    g = rows[r, start:start + pat.m]
                    assert g.sum() == min(pat.n, len(g))

    def test_layerwise_mse_improves_reconstruction(self):
        # single dense layer: the reconstruction objective is exactly the
        # output MSE, so tuning must beat one-shot pruning
        r = np.random.default_rng(8)
        teacher = Network([Dense(6, 4, r)])
        calib = make_calib(seed=8, n=128)
        dist = uniform_distribution(teacher, 0.7)
        cfg = TrainConfig(iterations=120, batch_size=32, lr=0.05,
                          objective="layerwise_mse", seed=0)
        res = run_training(teacher, dist, calib, cfg)
        oneshot = run_training(teacher, dist, calib, TrainConfig(iterations=0))
        z = teacher.predict(calib.inputs)

        def mse(net):
            return float(np.mean((net.predict(calib.inputs) - z) ** 2))

        assert mse(res.student) < mse(oneshot.student)

    def test_history_rows_have_expected_keys(self):
        teacher = tiny_mlp(seed=2)
        calib = make_calib(seed=2)
        dist = uniform_distribution(teacher, 0.5)
        cfg = TrainConfig(iterations=10, batch_size=16, metrics_every=5)
        res = run_training(teacher, dist, calib, cfg)
        assert res.history
        for row in res.history:
            assert set(row) == {"iter", "loss", "lr", "churn", "sparsity",
                                "calib_acc"}

    def test_empty_calibration_rejected(self):
        teacher = tiny_mlp()
        calib = CalibrationSet(inputs=np.zeros((0, 6)),
                               labels=np.zeros(0, dtype=int), seed=0)
        with pytest.raises(ValueError):
            run_training(teacher, uniform_distribution(teacher, 0.5), calib,
                         TrainConfig(iterations=1))
