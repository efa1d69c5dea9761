import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import tiny_mlp
from ptsparse.data import CalibrationSet
from ptsparse.nn import Dense, Network
from ptsparse.search import (SearchConfig, decode, evolve, fitness,
                             noised_batches)


def make_calib(seed=0, n=64, n_in=6, classes=3):
    r = np.random.default_rng(seed)
    return CalibrationSet(inputs=r.standard_normal((n, n_in)),
                          labels=r.integers(0, classes, n), seed=seed)


def fast_cfg(**kw):
    kw.setdefault("p", 0.5)
    kw.setdefault("population", 4)
    kw.setdefault("generations", 2)
    kw.setdefault("tournament", 2)
    kw.setdefault("elites", 1)
    return SearchConfig(**kw)


class TestSearchConfig:
    def test_p_e_defaults_above_p(self):
        assert SearchConfig(p=0.9).p_e == pytest.approx(0.95)

    def test_p_e_capped_at_one(self):
        assert SearchConfig(p=0.99).p_e == 1.0

    def test_invalid_order_rejected(self):
        with pytest.raises(ValueError):
            SearchConfig(p=0.9, p_e=0.8)
        with pytest.raises(ValueError):
            SearchConfig(p=0.9, population=1)


class TestDecode:
    def test_residual_hand_value(self):
        # single layer of 1000 weights: Residual = (0.95 - 0.9) * 1000 = 50
        r = np.random.default_rng(0)
        net = Network([Dense(40, 25, r)])
        cfg = SearchConfig(p=0.9, p_e=0.95)
        dist = decode(np.zeros(1), net, cfg)
        regrown = (cfg.p_e - dist.rates[0]) * 1000
        assert regrown == pytest.approx(50.0)
        assert dist.rates[0] == pytest.approx(0.9)

    def test_uniform_genome_equal_layers_gives_target(self):
        r = np.random.default_rng(0)
        net = Network([Dense(8, 8, r), Dense(8, 8, r)])
        dist = decode(np.array([0.3, 0.3]), net, fast_cfg())
        assert dist.rates == [pytest.approx(0.5), pytest.approx(0.5)]

    def test_dominant_gene_scalar_oracle(self):
        # one gene >> the other: nearly all residual regrows into layer 0
        r = np.random.default_rng(0)
        net = Network([Dense(10, 10, r), Dense(10, 10, r)])
        cfg = SearchConfig(p=0.8, p_e=0.9)
        dist = decode(np.array([50.0, 0.0]), net, cfg)
        residual = (0.9 - 0.8) * 200
        assert dist.rates[0] == pytest.approx(0.9 - residual / 100)
        assert dist.rates[1] == pytest.approx(0.9)

    def test_clamp_and_redistribute(self):
        # layer 0 is tiny: full residual would push its rate below zero,
        # the surplus must land on layer 1 and the keep budget must hold
        r = np.random.default_rng(0)
        net = Network([Dense(2, 2, r), Dense(20, 20, r)])
        cfg = SearchConfig(p=0.8, p_e=0.9)
        dist = decode(np.array([50.0, 0.0]), net, cfg)
        assert dist.rates[0] == pytest.approx(0.0)
        numels = np.array([4.0, 400.0])
        kept = ((1 - np.array(dist.rates)) * numels).sum()
        assert kept == pytest.approx((1 - cfg.p) * numels.sum(), abs=1e-9)

    def test_wrong_genome_length(self):
        with pytest.raises(ValueError):
            decode(np.zeros(5), tiny_mlp(), fast_cfg())

    def test_exclude_layers(self):
        net = tiny_mlp()
        first = net.prunable_indices()[0]
        cfg = fast_cfg(exclude_layers=(first,))
        dist = decode(np.zeros(len(net.prunable_indices()) - 1), net, cfg)
        assert first not in dist.layer_indices

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(-5, 5), min_size=2, max_size=2),
           st.floats(0.3, 0.9))
    def test_budget_identity(self, genes, p):
        r = np.random.default_rng(0)
        net = Network([Dense(7, 11, r), Dense(11, 5, r)])
        cfg = SearchConfig(p=p, p_e=min(p + 0.05, 1.0), population=4)
        dist = decode(np.array(genes), net, cfg)
        numels = np.array([77.0, 55.0])
        rates = np.array(dist.rates)
        assert np.all((rates >= 0.0) & (rates <= cfg.p_e + 1e-12))
        regrown = ((cfg.p_e - rates) * numels).sum()
        residual = (cfg.p_e - cfg.p) * numels.sum()
        assert abs(regrown - residual) <= 1e-9 * max(residual, 1.0)


class TestFitness:
    def test_deterministic(self):
        net, calib = tiny_mlp(seed=2), make_calib()
        cfg = fast_cfg()
        g = np.array([0.1, -0.2])
        a = fitness(g, net, calib, cfg, seed=7)
        b = fitness(g, net, calib, cfg, seed=7)
        assert a.fitness == b.fitness
        assert a.distribution.rates == b.distribution.rates

    def test_teacher_unchanged(self):
        net, calib = tiny_mlp(seed=2), make_calib()
        before = net.param_hash()
        fitness(np.zeros(2), net, calib, fast_cfg(), seed=3)
        assert net.param_hash() == before

    def test_empty_calibration_rejected(self):
        calib = CalibrationSet(inputs=np.zeros((0, 6)),
                               labels=np.zeros(0, dtype=int), seed=0)
        with pytest.raises(ValueError):
            fitness(np.zeros(2), tiny_mlp(), calib, fast_cfg())

    def test_recal_uses_noised_eval_uses_clean(self, monkeypatch):
        # BN recalibration must see perturbed inputs, accuracy the clean ones
        import ptsparse.search as mod
        net, calib = tiny_mlp(seed=2), make_calib()
        seen = {}
        orig = mod.Network.bn_recalibrate

        def spy(self, batches, masks=None):
            batches = list(batches)
            seen["recal"] = np.concatenate(batches)
            return orig(self, batches, masks=masks)

        monkeypatch.setattr(mod.Network, "bn_recalibrate", spy)
        fitness(np.zeros(2), net, calib, fast_cfg(noise_std=0.5), seed=1)
        assert not np.allclose(seen["recal"], calib.inputs)

    def test_noise_std_zero_leaves_batches_clean(self):
        x = np.random.default_rng(0).standard_normal((10, 4))
        out = np.concatenate(list(noised_batches(
            x, 4, np.random.default_rng(1), 0.0)))
        np.testing.assert_array_equal(out, x)


class TestEvolve:
    def test_best_non_decreasing_across_generations(self):
        net, calib = tiny_mlp(seed=5), make_calib(seed=5)
        _, history = evolve(net, calib, fast_cfg(generations=4, seed=3))
        bests = [h.best for h in history]
        assert all(b >= a for a, b in zip(bests, bests[1:]))

    def test_deterministic_given_seed(self):
        net, calib = tiny_mlp(seed=5), make_calib(seed=5)
        a, _ = evolve(net, calib, fast_cfg(seed=9))
        b, _ = evolve(net, calib, fast_cfg(seed=9))
        assert a.fitness == b.fitness
        np.testing.assert_array_equal(a.genome, b.genome)

    def test_history_length(self):
        net, calib = tiny_mlp(seed=5), make_calib(seed=5)
        _, history = evolve(net, calib, fast_cfg(generations=3))
        assert len(history) == 4  # initial population plus each generation

    def test_log_file_written(self, tmp_path):
        net, calib = tiny_mlp(seed=5), make_calib(seed=5)
        path = tmp_path / "search.log"
        evolve(net, calib, fast_cfg(), log_path=path)
        lines = path.read_text().strip().splitlines()
        assert len(lines) == 3 and lines[0].startswith("gen=0")

    def test_finds_planted_fragile_layer(self):
        # layer 0 is a dense random mixing that every output depends on, the
        # middle layer replicates each feature six times and the head
        # averages the replicas. Pruning the middle layer only drops spare
        # copies while pruning layer 0 loses information, so the search
        # should keep layer 0 denser than the redundant layer.
        r = np.random.default_rng(0)
        l0 = Dense(6, 6, r)
        l0.weight = r.standard_normal((6, 6))
        bulk = Dense(6, 36, r)
        rep = np.zeros((36, 6))
        for j in range(36):
            rep[j, j % 6] = 1.0
        bulk.weight = rep + 0.01 * r.standard_normal((36, 6))
        head = Dense(36, 3, r)
        hr = r.standard_normal((3, 6))
        head.weight = np.array([[hr[c, j % 6] / 6.0 for j in range(36)]
                                for c in range(3)])
        net = Network([l0, bulk, head])
        x = r.standard_normal((128, 6))
        labels = np.argmax(net.predict(x), axis=1)
        calib = CalibrationSet(inputs=x, labels=labels, seed=0)
        cfg = SearchConfig(p=0.6, p_e=0.7, population=8, generations=4,
                           tournament=3, elites=2, seed=1)
        best, _ = evolve(net, calib, cfg)
        rates = dict(zip(best.distribution.layer_indices,
                         best.distribution.rates))
        assert rates[0] < rates[1]
