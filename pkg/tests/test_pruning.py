"""Schedule arithmetic, combined loss, prune steps, and the training loop."""

import math

import numpy as np
import pytest
import torch

from conftest import random_dense_net
from usnprune import (ContractError, LayerSpec, LossWeights, Network, PerturbationSpec,
                      PruningSchedule, TrainConfig, UsnPruningRegressor, cnn_small,
                      prune_step, random_prune_baseline, rho_at, select_keep, total_loss,
                      train)
from usnprune.data import SceneParams, generate_dataset
from usnprune.pruning import batch_terms, is_prune_epoch
from usnprune.usn import UsnStats


def floor_schedule_oracle(t, rho, n_steps, t_start, t_end, t_interval):
    """Literal staircase formula, evaluated independently."""
    if t < t_start:
        return 0.0
    if t > t_end:
        return rho
    return min(max((rho / n_steps) * math.floor((t - t_start) / t_interval), 0.0), rho)


class TestSchedule:
    def test_zero_before_start(self):
        sched = PruningSchedule(0.3, 10, t_start=5, t_end=25, t_interval=2)
        for t in range(5):
            assert rho_at(t, sched) == 0.0

    def test_printed_midpoint(self):
        # rho = 0.2 over 200 unit-interval steps: halfway through gives 0.1
        sched = PruningSchedule(0.2, 200, t_start=1, t_end=201, t_interval=1)
        assert rho_at(sched.t_start + 100, sched) == pytest.approx(0.1)

    def test_saturates_after_end(self):
        sched = PruningSchedule(0.25, 4, t_start=2, t_end=10, t_interval=2)
        for t in (11, 50, 10_000):
            assert rho_at(t, sched) == 0.25

    def test_matches_floor_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            rho = float(rng.uniform(0, 1))
            n_steps = int(rng.integers(1, 20))
            t_start = int(rng.integers(0, 50))
            t_end = t_start + int(rng.integers(0, 150))
            t_interval = int(rng.integers(1, 8))
            sched = PruningSchedule(rho, n_steps, t_start, t_end, t_interval)
            for t in range(0, 200):
                assert rho_at(t, sched) == floor_schedule_oracle(
                    t, rho, n_steps, t_start, t_end, t_interval)

    def test_invalid_schedules_rejected(self):
        with pytest.raises(ContractError):
            PruningSchedule(1.5, 10, 0, 10)
        with pytest.raises(ContractError):
            PruningSchedule(0.2, 10, 5, 4)
        with pytest.raises(ContractError):
            PruningSchedule(0.2, 10, 0, 10, t_interval=0)


def _loss_setup(rng, lambda_u=1.0, lambda_s=1.0, lambda_w=1.0):
    layers = [LayerSpec("dense", in_dim=6, out_dim=5), LayerSpec("relu"),
              LayerSpec("dense", in_dim=5, out_dim=4), LayerSpec("relu"),
              LayerSpec("dense", in_dim=4, out_dim=3)]
    net = Network(layers, (1, 1, 6), rng=rng)
    b, m = 3, 4
    x = rng.random((b, 6))
    y = torch.as_tensor(rng.random((b, 3)))
    s = rng.uniform(-0.05, 0.05, size=(b, m))
    xp = torch.as_tensor(np.clip(x[:, None, :] + s[..., None], 0, 1).reshape(b, m, 1, 1, 6))
    weights = LossWeights(lambda_u=lambda_u, lambda_s=lambda_s, lambda_w=lambda_w,
                          prune_layers=(1, 2))
    return net, x, y, xp, weights


class TestTotalLoss:
    def test_zero_weights_reduce_to_task(self):
        rng = np.random.default_rng(1)
        net, x, y, xp, _ = _loss_setup(rng)
        weights = LossWeights(0.0, 0.0, 0.0, prune_layers=(1, 2))
        terms, trace_c, _ = batch_terms(net, x, xp, (1, 2))
        task = ((trace_c.output - y) ** 2).mean()
        total = total_loss(task, terms, weights, rho=0.5)
        assert float(total.detach()) == float(task.detach())
        g_total = torch.autograd.grad(total, net.weights[0], retain_graph=True)[0]
        trace2 = net.forward(x, with_grad=True)
        task2 = ((trace2.output - y) ** 2).mean()
        g_task = torch.autograd.grad(task2, net.weights[0])[0]
        np.testing.assert_allclose(g_total.numpy(), g_task.numpy(), atol=1e-12)

    def test_single_term_additivity(self):
        rng = np.random.default_rng(2)
        net, x, y, xp, _ = _loss_setup(rng)
        terms, trace_c, _ = batch_terms(net, x, xp, (1, 2))
        task = ((trace_c.output - y) ** 2).mean()
        only_smooth = LossWeights(0.0, 2.5, 0.0, prune_layers=(1, 2))
        total = total_loss(task, terms, only_smooth, rho=0.5)
        expected = float(task.detach()) + 2.5 * sum(
            float(terms[i].smooth.detach()) for i in (1, 2))
        assert float(total.detach()) == pytest.approx(expected, abs=1e-12)

    def test_missing_layer_stats_rejected(self):
        rng = np.random.default_rng(3)
        net, x, y, xp, weights = _loss_setup(rng)
        terms, trace_c, _ = batch_terms(net, x, xp, (1,))  # layer 2 missing
        task = ((trace_c.output - y) ** 2).mean()
        with pytest.raises(ContractError):
            total_loss(task, terms, weights, rho=0.5)

    def test_paper_ablation_weights_accepted(self):
        for lw in (0.0, 10.0):
            w = LossWeights(1.0, 1.0, lw, prune_layers=(1,))
            assert w.lambda_w == lw

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        net, x, y, xp, weights = _loss_setup(rng, lambda_u=0.8, lambda_s=1.2, lambda_w=3.0)

        def value():
            terms, trace_c, _ = batch_terms(net, x, xp, (1, 2))
            task = ((trace_c.output - y) ** 2).mean()
            return total_loss(task, terms, weights, rho=0.5)

        total = value()
        grads = torch.autograd.grad(total, net.parameters(), allow_unused=True)
        named = dict(zip([n for n, _ in net.parameter_items()], grads))
        h = 1e-6
        for name in ("W1", "W2", "W3", "b1"):
            p = dict(net.parameter_items())[name]
            idx = tuple(int(rng.integers(0, s)) for s in p.shape)
            with torch.no_grad():
                p[idx] += h
            fp = float(value().detach())
            with torch.no_grad():
                p[idx] -= 2 * h
            fm = float(value().detach())
            with torch.no_grad():
                p[idx] += h
            fd = (fp - fm) / (2 * h)
            an = float(named[name][idx])
            assert an == pytest.approx(fd, rel=1e-4, abs=1e-10)


class TestPruneStep:
    def _net(self, rng, channels=10):
        return random_dense_net(rng, dims=[4, channels, 3])

    def test_rho_zero_keeps_all(self):
        rng = np.random.default_rng(5)
        net = self._net(rng)
        pruned, masks = prune_step(net, {1: rng.random(10)}, 0.0)
        assert masks[1].all()

    def test_two_lowest_scores_masked(self):
        rng = np.random.default_rng(6)
        net = self._net(rng)
        scores = np.array([5.0, 1.0, 7.0, 3.0, 9.0, 2.0, 8.0, 6.0, 4.0, 10.0])
        _, masks = prune_step(net, {1: scores}, 0.2)
        dropped = np.flatnonzero(~masks[1])
        np.testing.assert_array_equal(dropped, [1, 5])  # scores 1.0 and 2.0

    def test_matches_topk_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            n = int(rng.integers(2, 20))
            scores = rng.random(n)
            rho = float(rng.uniform(0, 0.9))
            keep = select_keep(scores, np.ones(n, dtype=bool), rho)
            k = math.ceil((1 - rho) * n)
            oracle = np.zeros(n, dtype=bool)
            oracle[sorted(range(n), key=lambda j: (-scores[j], j))[:k]] = True
            np.testing.assert_array_equal(keep, oracle)

    def test_tie_break_keeps_lower_index(self):
        keep = select_keep(np.array([1.0, 1.0, 1.0, 1.0]), np.ones(4, dtype=bool), 0.5)
        np.testing.assert_array_equal(keep, [True, True, False, False])

    def test_zero_keep_rejected(self):
        rng = np.random.default_rng(8)
        net = self._net(rng)
        with pytest.raises(ContractError):
            prune_step(net, {1: rng.random(10)}, 1.0)

    def test_cumulative_masks_never_resurrect(self):
        rng = np.random.default_rng(9)
        net = self._net(rng)
        net1, masks1 = prune_step(net, {1: rng.random(10)}, 0.2)
        # higher ratio later: previously dead channels stay dead even if
        # their new scores would win a tie
        scores = np.zeros(10)
        net2, masks2 = prune_step(net1, {1: scores}, 0.4)
        dead_before = ~masks1[1]
        assert np.all(~masks2[1][dead_before])
        assert masks2[1].sum() == math.ceil(0.6 * 10)


class TestRandomBaseline:
    def test_rho_zero_identity(self):
        rng = np.random.default_rng(10)
        net = random_dense_net(rng, dims=[4, 8, 3])
        out = random_prune_baseline(net, 0.0, np.random.default_rng(0))
        assert out.masks[1].all()

    def test_matched_counts(self):
        rng = np.random.default_rng(11)
        net = random_dense_net(rng, dims=[4, 10, 3])
        guided, _ = prune_step(net, {1: rng.random(10)}, 0.3)
        rand = random_prune_baseline(net, 0.3, np.random.default_rng(1))
        assert int(rand.masks[1].sum()) == int(guided.masks[1].sum())

    def test_two_seeds_differ(self):
        rng = np.random.default_rng(12)
        net = random_dense_net(rng, dims=[4, 12, 3])
        a = random_prune_baseline(net, 0.5, np.random.default_rng(0))
        b = random_prune_baseline(net, 0.5, np.random.default_rng(1))
        assert not torch.equal(a.masks[1], b.masks[1])  # 1/C(12,6) collision odds


def tiny_dataset(seed=0):
    params = SceneParams(image_size=(16, 16), num_keypoints=2, margin=4, min_separation=3.0)
    return generate_dataset(40, 8, 4, params=params, seed=seed)


def tiny_config(rule="usn", rho=0.4, epochs=9, lambdas=(1.0, 1.0, 5.0), seed=0,
                perturbations=(PerturbationSpec("brightness", 0.05),)):
    layers = cnn_small(input_shape=(1, 16, 16), num_keypoints=2, heatmap_shape=(6, 6),
                       conv_channels=(4, 6), conv_strides=(2, 2))
    schedule = PruningSchedule(rho_final=rho, n_steps=2, t_start=3, t_end=5, t_interval=1)
    weights = LossWeights(*lambdas, prune_layers=())
    return TrainConfig(layers=tuple(layers), input_shape=(1, 16, 16), epochs=epochs,
                       schedule=schedule, weights=weights, perturbations=perturbations,
                       batch_size=16, learning_rate=0.005, m_samples=2, seed=seed,
                       prune_rule=rule)


class TestTrain:
    def test_plain_training_improves_validation(self):
        ds = tiny_dataset()
        config = tiny_config(rule="none", rho=0.0, lambdas=(0.0, 0.0, 0.0),
                             epochs=10, perturbations=())
        result = train(config, ds)
        assert not result.diverged
        assert result.log[-1]["val_task"] < result.log[0]["val_task"]
        assert result.best_val <= result.log[0]["val_task"]

    def test_fixed_seed_bit_identical(self):
        ds = tiny_dataset()
        config = tiny_config(seed=3, epochs=6)
        r1 = train(config, ds)
        r2 = train(config, ds)
        assert r1.log == r2.log
        for w1, w2 in zip(r1.network.weights, r2.network.weights):
            assert torch.equal(w1, w2)

    def test_masks_monotone_and_counts_match_schedule(self):
        ds = tiny_dataset()
        config = tiny_config(rule="usn", rho=0.5, epochs=8)
        result = train(config, ds)
        counts = [tuple(int(c) for c in row["kept_channels"].split(";"))
                  for row in result.log]
        for before, after in zip(counts, counts[1:]):
            assert all(a <= b for a, b in zip(after, before))
        # final counts equal ceil((1 - rho) * n) per prunable layer
        assert counts[-1] == (math.ceil(0.5 * 4), math.ceil(0.5 * 6))

    def test_random_rule_prunes_same_counts(self):
        ds = tiny_dataset()
        usn = train(tiny_config(rule="usn", rho=0.5, epochs=7), ds)
        rand = train(tiny_config(rule="random", rho=0.5, epochs=7), ds)
        assert usn.log[-1]["kept_channels"] == rand.log[-1]["kept_channels"]

    def test_divergence_aborts_with_finite_checkpoint(self):
        import dataclasses
        ds = tiny_dataset()
        config = dataclasses.replace(tiny_config(epochs=12),
                                     learning_rate=1e30, optimizer="sgd")
        result = train(config, ds)
        assert result.diverged
        for w in result.network.weights:
            assert torch.isfinite(w).all()

    def test_reset_semantics_cycle(self):
        # accumulate -> prune -> reset: post-reset importance is exactly zero
        rng = np.random.default_rng(13)
        stats = UsnStats.from_deviations(1, rng.normal(size=(8, 6)))
        assert stats.importance_scores().max() > 0
        reset = UsnStats.zeros(1, 6)
        assert np.all(reset.importance_scores() == 0.0)
        assert reset.count == 0


class TestEstimatorApi:
    def test_get_set_params_roundtrip(self):
        est = UsnPruningRegressor(rho=0.3, epochs=5)
        params = est.get_params()
        assert params["rho"] == 0.3
        est2 = UsnPruningRegressor().set_params(**params)
        assert est2.get_params() == params

    def test_clone_compatible(self):
        from sklearn.base import clone
        est = UsnPruningRegressor(epochs=2, rho=0.1)
        cloned = clone(est)
        assert cloned.get_params() == est.get_params()

    def test_fit_predict_shapes_and_units(self):
        ds = tiny_dataset(seed=1)
        X = np.concatenate([ds.train_images, ds.val_images])
        y = np.concatenate([ds.train_keypoints, ds.val_keypoints])
        est = UsnPruningRegressor(image_size=(16, 16), num_keypoints=2, heatmap_size=(6, 6),
                                  conv_channels=(4, 6), conv_strides=(2, 2), epochs=6,
                                  batch_size=16, rho=0.25, n_steps=2, t_start=2,
                                  t_interval=1, m_samples=2,
                                  perturb_kinds=("brightness",), perturb_epsilons=(0.02,),
                                  seed=0)
        est.fit(X, y)
        pred = est.predict(X[:5])
        assert pred.shape == (5, 4)
        # predictions come back in image units: inside the 16x16 frame
        assert np.all(pred >= -1.0) and np.all(pred <= 16.0)
        assert np.isfinite(est.score(X, y))

    def test_unfitted_predict_raises(self):
        from sklearn.exceptions import NotFittedError
        with pytest.raises(NotFittedError):
            UsnPruningRegressor().predict(np.zeros((2, 32, 32)))
