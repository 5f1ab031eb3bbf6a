"""Grid and probabilistic certificates, falsification, and campaign bookkeeping."""

import math

import numpy as np
import pytest
import torch

from conftest import random_dense_net, random_net
from usnprune import (ContractError, KeypointCriterion, LayerSpec, Network,
                      PerturbationSpec, campaign, certify_grid, certify_probabilistic,
                      falsify, lipschitz_to_output, usn_necessary_bounds)
from usnprune.certify import probabilistic_thresholds, write_campaign_csv


def identity_net(d, depth=1, relu=False):
    layers = []
    for i in range(depth):
        layers.append(LayerSpec("dense", in_dim=d, out_dim=d))
        if relu and i < depth - 1:
            layers.append(LayerSpec("relu"))
    net = Network(layers, (1, 1, d))
    with torch.no_grad():
        for w in net.weights:
            w.copy_(torch.eye(d, dtype=torch.float64))
        for b in net.biases:
            b.zero_()
    return net


class TestGrid:
    def test_zero_radius_holds_with_full_margin(self):
        rng = np.random.default_rng(0)
        net = random_net(rng, with_head=True)
        x0 = rng.random(net.input_shape)
        spec = PerturbationSpec("brightness", 0.0)
        crit = KeypointCriterion(delta=0.75)
        res = certify_grid(net, x0, spec, crit, n_cells=3)
        assert res.holds
        assert res.margin == pytest.approx(0.75)

    def test_identity_net_closed_form(self):
        # f(x) = x, C0 = 1: per-cell bound = |s_center| + half * sqrt(P)
        d, eps, n = 9, 0.02, 8
        net = identity_net(d)
        x0 = np.full(d, 0.5)
        spec = PerturbationSpec("brightness", eps)
        half = eps / n
        closed_form = (eps - half) + half * math.sqrt(d)
        res = certify_grid(net, x0, spec, KeypointCriterion(delta=closed_form + 1e-6), n)
        assert res.holds
        res2 = certify_grid(net, x0, spec, KeypointCriterion(delta=closed_form * 0.2), n)
        assert res2.verdict == "unknown"  # grid never says violated

    def test_margin_monotone_in_cells(self):
        rng = np.random.default_rng(1)
        for _ in range(5):
            net = random_net(rng, with_head=bool(rng.integers(0, 2)))
            x0 = rng.random(net.input_shape)
            spec = PerturbationSpec("contrast", 0.02)
            crit = KeypointCriterion(delta=1.0)
            margins = [certify_grid(net, x0, spec, crit, n).margin for n in (4, 8, 16, 32)]
            assert all(margins[i + 1] >= margins[i] - 1e-12 for i in range(3))

    def test_monotone_in_radius_nested_cells(self):
        # holds at eps implies holds at eps/2 with cells-per-radius fixed
        rng = np.random.default_rng(2)
        hits = 0
        for _ in range(20):
            net = random_net(rng, with_head=bool(rng.integers(0, 2)))
            x0 = rng.random(net.input_shape)
            spec = PerturbationSpec("brightness", 0.01)
            res = certify_grid(net, x0, spec, KeypointCriterion(delta=1.0), 16)
            if res.holds:
                hits += 1
                half_spec = PerturbationSpec("brightness", 0.005)
                res2 = certify_grid(net, x0, half_spec, KeypointCriterion(delta=1.0), 8)
                assert res2.holds
        assert hits > 0  # the sweep must actually exercise the implication

    def test_grid_holds_never_falsified(self):
        # mini version of the acceptance soundness harness
        rng = np.random.default_rng(3)
        holds_seen = 0
        for trial in range(30):
            net = random_net(rng, with_head=bool(rng.integers(0, 2)))
            x0 = rng.random(net.input_shape)
            kind = "brightness" if trial % 2 else "contrast"
            spec = PerturbationSpec(kind, float(rng.choice([0.005, 0.02, 0.05])))
            delta = float(rng.choice([0.2, 1.0, 3.0]))
            res = certify_grid(net, x0, spec, KeypointCriterion(delta=delta), 64)
            if res.holds:
                holds_seen += 1
                fal = falsify(net, x0, spec, KeypointCriterion(delta=delta), 2000,
                              np.random.default_rng(trial))
                assert fal.verdict != "violated"
        assert holds_seen >= 5


class TestProbabilistic:
    def test_zero_radius_holds_any_alpha(self):
        rng = np.random.default_rng(4)
        net = random_dense_net(rng, dims=[6, 5, 4])
        x0 = rng.random(6)
        spec = PerturbationSpec("brightness", 0.0)
        for alpha in (0.5, 0.01, 1e-6):
            res = certify_probabilistic(net, x0, spec, KeypointCriterion(delta=0.5),
                                        alpha=alpha, m=16, rng=np.random.default_rng(0))
            assert res.holds
            assert res.confidence == pytest.approx(1 - alpha)

    def test_constructed_bias_violation_identified(self):
        # identity stack, saturated input: clipping skews the mean deviation
        net = identity_net(4, depth=2)
        x0 = np.full(4, 0.9)
        spec = PerturbationSpec("brightness", 0.3)
        crit = KeypointCriterion(delta=0.001)
        res = certify_probabilistic(net, x0, spec, crit, alpha=0.01, m=512,
                                    rng=np.random.default_rng(5))
        assert res.verdict == "unknown"
        assert res.detail["binding_layer"] == 1
        assert res.detail["measured"] > res.detail["threshold"]
        # the empirical bias genuinely exceeds the layer-1 bias threshold
        bias_thr, _ = probabilistic_thresholds(net, 1, crit, 0.01)
        assert abs(1.0 / 30.0) > bias_thr  # E[min(s, 0.1)] = -1/30 for s ~ U[-0.3, 0.3]

    def test_alpha_shrinks_variance_budget(self):
        # nonzero variance passes at generous alpha, fails as alpha -> 0
        net = identity_net(3, depth=2)
        x0 = np.full(3, 0.5)
        spec = PerturbationSpec("brightness", 0.05)
        crit = KeypointCriterion(delta=10.0)
        rng_seed = 6
        res_loose = certify_probabilistic(net, x0, spec, crit, alpha=0.9, m=256,
                                          rng=np.random.default_rng(rng_seed))
        res_tight = certify_probabilistic(net, x0, spec, crit, alpha=1e-9, m=256,
                                          rng=np.random.default_rng(rng_seed))
        assert res_loose.holds
        assert res_tight.verdict == "unknown"
        assert res_tight.detail["binding_bound"] == "variance"

    def test_chebyshev_exceedance_frequency(self):
        # synthetic Gaussian neuron outputs with variance at the certified cap
        net = identity_net(9, depth=3)
        crit = KeypointCriterion(delta=1.0)
        alpha = 0.05
        i = 1
        bias_thr, var_thr = probabilistic_thresholds(net, i, crit, alpha)
        d_i = net.width(i)
        budget = alpha / (d_i * (net.num_linear - i))
        rng = np.random.default_rng(7)
        draws = rng.normal(0.0, math.sqrt(var_thr), size=200_000)
        freq = float(np.mean(np.abs(draws) >= bias_thr))
        slack = 3.0 * math.sqrt(budget * (1 - budget) / draws.size)
        assert freq <= budget + slack

    def test_sample_count_contract(self):
        net = identity_net(3, depth=2)
        with pytest.raises(ContractError):
            certify_probabilistic(net, np.zeros(3), PerturbationSpec("brightness", 0.1),
                                  KeypointCriterion(), alpha=0.01, m=1)


class TestNecessaryBounds:
    def test_alpha_zero_limit(self):
        net = identity_net(4, depth=2)
        crit = KeypointCriterion(delta=1.0)
        c1 = lipschitz_to_output(net, 1)
        _, smooth_bound = usn_necessary_bounds(net, 1, crit, alpha=0.0)
        assert smooth_bound == pytest.approx(1.0 / (4 * c1 ** 2))

    def test_plugin_values(self):
        # C_i = 1, d_i = 4, delta = 1 -> unbiased bound = 1
        net = identity_net(4, depth=2)
        unbiased_bound, _ = usn_necessary_bounds(net, 1, KeypointCriterion(delta=1.0), 0.01)
        assert unbiased_bound == pytest.approx(1.0, rel=1e-8)

    def test_exceeded_bound_implies_neuron_violation(self):
        # shared samples: layer metric above its bound forces a failing neuron
        rng = np.random.default_rng(8)
        from usnprune import layer_metrics, neuron_contributions, sample
        found_exceed = 0
        for _ in range(40):
            net = random_dense_net(rng, dims=[5, 6, 4])
            x0 = rng.random(5)
            spec = PerturbationSpec("brightness", float(rng.choice([0.05, 0.2])))
            samples = sample(spec, x0, 64, rng)
            crit = KeypointCriterion(delta=float(rng.choice([0.05, 0.5, 2.0])))
            alpha = 0.01
            for i in (1,):
                unb_bound, smo_bound = usn_necessary_bounds(net, i, crit, alpha)
                unb, smo = layer_metrics(net, x0, samples, i)
                pn_unb, pn_smo = neuron_contributions(net, x0, samples, i)
                bias_thr, var_thr = probabilistic_thresholds(net, i, crit, alpha)
                if pn_unb.sum() > unb_bound:
                    found_exceed += 1
                    assert pn_unb.max() > bias_thr
                var = pn_smo - pn_unb ** 2
                if smo > smo_bound:
                    assert (pn_unb.max() > bias_thr) or (var.max() > var_thr)
        assert found_exceed > 0

    def test_layer_range_contract(self):
        net = identity_net(3, depth=2)
        with pytest.raises(ContractError):
            usn_necessary_bounds(net, 0, KeypointCriterion(), 0.01)
        with pytest.raises(ContractError):
            usn_necessary_bounds(net, 2, KeypointCriterion(), 0.01)


class TestFalsify:
    def test_infinite_delta_never_violated(self):
        rng = np.random.default_rng(9)
        net = random_net(rng, with_head=True)
        x0 = rng.random(net.input_shape)
        res = falsify(net, x0, PerturbationSpec("contrast", 0.05),
                      KeypointCriterion(delta=math.inf), 500, rng)
        assert res.verdict == "unknown"

    def test_identity_dense_extremal_witness(self):
        # max deviation of f(x) = x under brightness is at |s| = eps exactly
        net = identity_net(5)
        x0 = np.full(5, 0.5)
        eps = 0.04
        res = falsify(net, x0, PerturbationSpec("brightness", eps),
                      KeypointCriterion(delta=eps * 0.9), 50, np.random.default_rng(10))
        assert res.verdict == "violated"
        assert abs(abs(res.detail["witness_s"]) - eps) < 1e-12

    def test_soft_argmax_shift_closed_form(self):
        # saturated pixel plus a mid-gray pixel: brightness shifts the
        # spatial softmax toward the unsaturated pixel; oracle enumerates
        # the softmax by hand at the endpoint
        k, h, w = 1, 1, 4
        layers = [LayerSpec("dense", in_dim=4, out_dim=4),
                  LayerSpec("soft_argmax", num_keypoints=k, height=h, width=w, temperature=0.05)]
        net = Network(layers, (1, 1, 4))
        with torch.no_grad():
            net.weights[0].copy_(torch.eye(4, dtype=torch.float64))
            net.biases[0].zero_()
        x0 = np.array([1.0, 0.88, 0.0, 0.0])
        eps = 0.1
        temp = 0.05

        def keypoint_col(img):
            p = np.exp(np.asarray(img) / temp)
            p /= p.sum()
            return float((p * np.arange(4)).sum())

        base_col = keypoint_col(x0)
        shifted = np.clip(x0 + eps, 0.0, 1.0)  # pixel 0 saturates, pixel 1 catches up
        shift = abs(keypoint_col(shifted) - base_col)
        assert shift > 0.01
        res = falsify(net, x0, PerturbationSpec("brightness", eps),
                      KeypointCriterion(delta=shift * 0.95), 200, np.random.default_rng(11))
        assert res.verdict == "violated"
        assert abs(res.detail["witness_s"] - eps) < 1e-12

    def test_witness_replay_confirms_violation(self):
        rng = np.random.default_rng(12)
        from usnprune import apply
        confirmed = 0
        for _ in range(25):
            net = random_net(rng)
            x0 = rng.random(net.input_shape)
            spec = PerturbationSpec("contrast", 0.2)
            crit = KeypointCriterion(delta=0.01)
            res = falsify(net, x0, spec, crit, 200, rng)
            if res.verdict == "violated":
                confirmed += 1
                out0 = net.outputs(x0)
                out_w = net.outputs(apply(spec, x0, res.detail["witness_s"]))
                assert float((out_w - out0).abs().amax()) > crit.delta
        assert confirmed > 0


class TestCampaign:
    def _toy_setup(self, rng):
        net_a = random_dense_net(rng, dims=[9, 8, 8], head=None)
        images = rng.random((6, 1, 1, 9))
        specs = [PerturbationSpec("brightness", 0.002), PerturbationSpec("brightness", 0.05)]
        crit = KeypointCriterion(delta=1.5)
        return {"a": net_a}, images, specs, crit

    def test_accuracy_is_holds_fraction(self):
        rng = np.random.default_rng(13)
        nets, images, specs, crit = self._toy_setup(rng)
        report = campaign(nets, images, None, specs, crit, n_cells=16,
                          falsify_samples=64, seed=0)
        for spec in specs:
            rows = [r for r in report.rows if r["spec"] == spec.label]
            holds = sum(1 for r in rows if r["verdict"] == "holds")
            assert report.accuracy("a", spec.label) == pytest.approx(holds / len(rows))

    def test_all_holds_gives_accuracy_one(self):
        rng = np.random.default_rng(14)
        nets, images, _, _ = self._toy_setup(rng)
        specs = [PerturbationSpec("brightness", 0.0)]
        report = campaign(nets, images, None, specs, KeypointCriterion(delta=1.0),
                          n_cells=4, falsify_samples=16, seed=0)
        assert report.accuracy("a", specs[0].label) == 1.0

    def test_verdicts_deterministic_given_seed(self):
        rng = np.random.default_rng(15)
        nets, images, specs, crit = self._toy_setup(rng)
        r1 = campaign(nets, images, None, specs, crit, n_cells=8, falsify_samples=64, seed=7)
        r2 = campaign(nets, images, None, specs, crit, n_cells=8, falsify_samples=64, seed=7)
        v1 = [(r["image_id"], r["spec"], r["verdict"]) for r in r1.rows]
        v2 = [(r["image_id"], r["spec"], r["verdict"]) for r in r2.rows]
        assert v1 == v2

    def test_csv_matches_rows(self, tmp_path):
        import csv as csvmod
        rng = np.random.default_rng(16)
        nets, images, specs, crit = self._toy_setup(rng)
        report = campaign(nets, images, None, specs, crit, n_cells=8,
                          falsify_samples=32, seed=0)
        path = tmp_path / "campaign.csv"
        write_campaign_csv(report, path)
        with open(path) as fh:
            rows = list(csvmod.DictReader(fh))
        assert len(rows) == len(report.rows)
        for file_row, mem_row in zip(rows, report.rows):
            assert file_row["verdict"] == mem_row["verdict"]

    def test_empty_test_set_rejected(self):
        with pytest.raises(ContractError):
            campaign({"a": identity_net(3)}, np.zeros((0, 1, 1, 3)), None,
                     [PerturbationSpec("brightness", 0.01)], KeypointCriterion(), n_cells=4)
