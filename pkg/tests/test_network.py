from pathlib import Path

import numpy as np
import pytest

from resadapt.data_io import load_tensor
from resadapt.errors import ConfigError
from resadapt.checks import gradient_suite, network_check
from resadapt.network import (Network, NetworkConfig, PlacementConfig, adapter_param_count,
                              count_params, fuse_domain, partition_params, unfuse_domain)
from resadapt.rng import CounterRNG
from resadapt.tensor_core import OptimizerState, sgd_step

from conftest import rel

GOLDEN = Path(__file__).parent / "golden" / "toy_logits.mdtb"


def toy(precision="double", blocks=1, widths=(4, 8, 8)):
    net = Network(NetworkConfig(widths, blocks, precision=precision))
    net.add_domain("base", 3, seed=1)
    return net


def randomize(net, rng, domain, scale=0.1):
    for n in net.domain_names(domain):
        if n.endswith("/alpha") or n.endswith("/bias") and "/bn/" in n:
            net.params[n][:] = rng.normal(size=net.params[n].shape) * scale
        elif n.endswith("/scale"):
            net.params[n][:] = 1 + rng.normal(size=net.params[n].shape) * scale


class TestStructure:
    def test_full_scale_layer_count(self):
        net = Network(NetworkConfig.full_scale())
        assert net.weight_layers == 26
        assert net.cfg.macro_widths == (64, 128, 256)

    @pytest.mark.parametrize("within,expected", [("both", 24), ("second", 12)])
    def test_adapted_layer_count(self, within, expected):
        net = Network(NetworkConfig.full_scale())
        assert len(net.adapted_layers(PlacementConfig(within=within))) == expected

    def test_no_adapters_on_stem_or_projection(self):
        net = Network(NetworkConfig.full_scale())
        kinds = {l.kind for l in net.adapted_layers(PlacementConfig())}
        assert kinds == {"conv1", "conv2"}

    def test_bad_configs(self):
        with pytest.raises(ConfigError):
            NetworkConfig((4, 8))
        with pytest.raises(ConfigError):
            NetworkConfig(filter_size=2)
        with pytest.raises(ConfigError):
            PlacementConfig(macros=("huge",))
        with pytest.raises(ConfigError):
            PlacementConfig(dropout=1.0)

    def test_unknown_domain(self, rng):
        with pytest.raises(ConfigError):
            toy().forward(rng.normal(size=(1, 8, 8, 3)), "nope")

    def test_duplicate_domain(self):
        net = toy()
        with pytest.raises(ConfigError):
            net.add_domain("base", 3)


class TestForward:
    def test_output_shape(self, rng):
        assert toy().forward(rng.normal(size=(2, 8, 8, 3)), "base").shape == (2, 3)

    def test_eval_deterministic(self, rng):
        net = toy()
        x = rng.normal(size=(2, 8, 8, 3))
        np.testing.assert_array_equal(net.forward(x, "base"), net.forward(x, "base"))

    def test_golden_logits(self):
        net = Network(NetworkConfig((4, 8, 16), 4, precision="double"))
        net.add_domain("base", 5, seed=7)
        x = CounterRNG(99).normal(2 * 8 * 8 * 3).reshape(2, 8, 8, 3)
        assert rel(net.forward(x, "base"), load_tensor(GOLDEN)) <= 1e-10

    @pytest.mark.parametrize("topology", ["parallel", "series"])
    @pytest.mark.parametrize("within", ["both", "second"])
    def test_zero_adapters_match_base_at_every_block(self, rng, topology, within):
        net = toy(blocks=2)
        randomize(net, rng, "base")
        for n in net.domain_names("base"):
            if n.endswith("running_mean"):
                net.params[n][:] = rng.normal(size=net.params[n].shape) * 0.1
            elif n.endswith("running_var"):
                net.params[n][:] = rng.uniform(0.5, 2.0, size=net.params[n].shape)
        net.add_domain("new", 3, PlacementConfig(topology=topology, within=within, dropout=0.3),
                       copy_bn_from="base", seed=4)
        net.params["domain/new/head/weight"] = net.params["domain/base/head/weight"].copy()
        x = rng.normal(size=(3, 8, 8, 3))
        la, fa = net.forward(x, "base", return_features=True)
        lb, fb = net.forward(x, "new", return_features=True)
        assert len(fa) == len(net.blocks) + 1
        for a, b in zip(fa, fb):
            assert rel(b, a) <= 1e-12
        assert rel(lb, la) <= 1e-12

    def test_dropout_only_in_train_mode(self, rng):
        net = toy()
        net.add_domain("d", 3, PlacementConfig(dropout=0.5), copy_bn_from="base")
        randomize(net, rng, "d", 0.5)
        x = rng.normal(size=(4, 8, 8, 3))
        np.testing.assert_array_equal(net.forward(x, "d"), net.forward(x, "d"))
        t1 = net.clone().forward(x, "d", train=True, drop_seed=1)
        t2 = net.clone().forward(x, "d", train=True, drop_seed=2)
        assert not np.array_equal(t1, t2)

    def test_compressed_alpha_used_in_forward(self, rng):
        net = toy()
        net.add_domain("d", 3, PlacementConfig(), copy_bn_from="base")
        randomize(net, rng, "d")
        x = rng.normal(size=(2, 8, 8, 3))
        before = net.forward(x, "d")
        for l in net.adapted_layers(PlacementConfig()):
            a = net.params.pop(f"domain/d/layer/{l.index}/alpha")
            net.params[f"shared/layer/{l.index}/beta"] = np.eye(a.shape[0])
            net.params[f"domain/d/layer/{l.index}/gamma"] = a.T.copy()
        assert rel(net.forward(x, "d"), before) <= 1e-13


class TestPartition:
    def test_head_only_count(self):
        net = toy()
        train, _ = partition_params(net, "base", "head_only")
        assert sum(net.params[n].size for n in train) == 8 * 3 + 3

    def test_finetune_all_is_everything(self):
        net = toy()
        train, frozen = partition_params(net, "base", "finetune_all")
        budget = count_params(net)
        assert frozen == []
        assert sum(net.params[n].size for n in train) == budget.universal + budget.domains["base"]["total"]

    def test_finetune_all_new_domain_is_full_copy(self):
        net = toy()
        net.add_domain("d", 4, None, copy_bn_from="base", copy_filters=True)
        train, frozen = partition_params(net, "d", "finetune_all")
        budget = count_params(net)
        assert sum(net.params[n].size for n in train) == budget.universal + 8 * 4 + 4 + budget.domains["d"]["bn"]
        assert all(not n.startswith("universal/") for n in train)

    def test_adapters_only_excludes_filters_and_buffers(self):
        net = toy()
        net.add_domain("d", 4, PlacementConfig(topology="series"), copy_bn_from="base")
        train, frozen = partition_params(net, "d", "adapters_only")
        assert all(n.startswith("domain/d/") for n in train)
        assert not any("running" in n for n in train + frozen)
        assert any(n.endswith("/alpha") for n in train)
        assert any(n.endswith("/layer/3/bn/scale") or "/layer/" in n and "/bn/" in n for n in train)
        assert set(net.universal_names()) <= set(frozen)

    def test_unknown_regime(self):
        with pytest.raises(ConfigError):
            partition_params(toy(), "base", "everything")


class TestBudget:
    def test_adapter_fraction_per_layer(self):
        net = Network(NetworkConfig.full_scale())
        rep = count_params(net, PlacementConfig())
        for l in net.adapted_layers(PlacementConfig()):
            assert rep.adapted_layers[l.index] * 9 == l.size

    def test_toy_hand_enumeration(self):
        net = Network(NetworkConfig((4, 8, 16), 4))
        # early: 8 convs of 4x4; mid: 4x8 then 7 of 8x8; late: 8x16 then 7 of 16x16
        expected = 8 * 16 + (32 + 7 * 64) + (128 + 7 * 256)
        assert expected == 2528
        assert adapter_param_count(net, PlacementConfig()) == expected
        net.add_domain("d", 2, PlacementConfig())
        assert count_params(net).domains["d"]["adapters"] == expected

    @pytest.mark.parametrize("cfg", [NetworkConfig.full_scale(), NetworkConfig()])
    def test_second_only_halves_layers(self, cfg):
        net = Network(cfg)
        both = net.adapted_layers(PlacementConfig(within="both"))
        assert 2 * len(net.adapted_layers(PlacementConfig(within="second"))) == len(both)

    @pytest.mark.parametrize("cfg", [NetworkConfig.full_scale(), NetworkConfig()])
    def test_second_only_halves_series_params(self, cfg):
        net = Network(cfg)
        both = adapter_param_count(net, PlacementConfig(within="both", topology="series"))
        second = adapter_param_count(net, PlacementConfig(within="second", topology="series"))
        assert 2 * second == both

    def test_second_only_halves_parallel_params_at_constant_width(self):
        net = Network(NetworkConfig((8, 8, 8), 3))
        both = adapter_param_count(net, PlacementConfig(within="both"))
        second = adapter_param_count(net, PlacementConfig(within="second"))
        assert 2 * second == both

    def test_parallel_halving_defect_is_the_boundary_layers(self):
        # a widening conv1 carries a C_in x C_out adapter, smaller than its square twin
        net = Network(NetworkConfig.full_scale())
        both = adapter_param_count(net, PlacementConfig(within="both"))
        second = adapter_param_count(net, PlacementConfig(within="second"))
        assert both - 2 * second == (64 * 128 - 128 * 128) + (128 * 256 - 256 * 256)

    def test_monotone_in_macros(self):
        net = Network(NetworkConfig.full_scale())
        counts = [adapter_param_count(net, PlacementConfig(macros=m))
                  for m in [("early",), ("early", "mid"), ("early", "mid", "late")]]
        assert counts[0] < counts[1] < counts[2]

    def test_budget_factor(self):
        net = toy()
        net.add_domain("d", 3, PlacementConfig(), copy_bn_from="base")
        rep = count_params(net)
        extra = rep.domains["base"]["total"] + rep.domains["d"]["total"]
        assert rep.budget_factor == pytest.approx(1 + extra / rep.universal)
        assert any("budget_factor" in line for line in rep.lines())


class TestIntegrity:
    def test_adapters_only_steps_keep_universal_digest(self, rng):
        net = toy("single")
        net.add_domain("d", 3, PlacementConfig(dropout=0.3), copy_bn_from="base")
        train, _ = partition_params(net, "d", "adapters_only")
        before = net.digest()
        opt = OptimizerState(0.05, 0.9, {n: 1e-3 for n in train})
        x = rng.normal(size=(4, 8, 8, 3)).astype(np.float32)
        y = np.array([0, 1, 2, 0])
        for step in range(100):
            _, _, grads = net.loss_and_grads(x, y, "d", train, drop_seed=step)
            sgd_step(net.params, grads, opt)
        assert net.digest() == before
        assert np.abs(net.params["domain/d/layer/2/alpha"]).max() > 0

    def test_per_domain_isolation(self, rng):
        net = toy()
        net.add_domain("a", 3, PlacementConfig(), copy_bn_from="base")
        net.add_domain("b", 3, PlacementConfig(topology="series"), copy_bn_from="base")
        x = rng.normal(size=(4, 8, 8, 3))
        before = net.forward(x, "b")
        digest_b = net.digest("domain/b/")
        train, _ = partition_params(net, "a", "adapters_only")
        opt = OptimizerState(0.1, 0.9, {})
        for _ in range(5):
            _, _, grads = net.loss_and_grads(x, np.array([0, 1, 2, 0]), "a", train)
            sgd_step(net.params, grads, opt)
        np.testing.assert_array_equal(net.forward(x, "b"), before)
        assert net.digest("domain/b/") == digest_b

    def test_digest_sensitive_to_one_bit(self):
        net = toy()
        d = net.digest()
        w = net.params["universal/layer/0/filter"]
        w.view(np.uint64).reshape(-1)[0] ^= 1
        assert net.digest() != d


@pytest.mark.parametrize("topology", ["parallel", "series"])
def test_network_gradcheck_adapters(rng, topology):
    net = toy(widths=(2, 4, 4))
    net.add_domain("d", 3, PlacementConfig(topology=topology), copy_bn_from="base")
    randomize(net, rng, "d", 0.3)
    x = rng.normal(size=(3, 8, 8, 3))
    rep = network_check(net, "d", "adapters_only", x, np.array([0, 1, 2]))
    assert rep.max_rel_error <= 1e-6, str(rep)


def test_network_gradcheck_finetune(rng):
    net = toy(widths=(2, 4, 4))
    x = rng.normal(size=(3, 8, 8, 3))
    rep = network_check(net, "base", "finetune_all", x, np.array([0, 1, 2]))
    assert rep.max_rel_error <= 1e-6, str(rep)


def test_gradient_suite_size_and_status():
    reports = gradient_suite(seed=1, network=False)
    assert len(reports) >= 48
    assert all(r.passed for r in reports), [str(r) for r in reports if not r.passed]


class TestFuseDomain:
    def _net(self, rng, topology="parallel", series_bn=False):
        net = toy()
        net.add_domain("d", 3, PlacementConfig(topology=topology, series_bn=series_bn), copy_bn_from="base")
        randomize(net, rng, "d", 0.3)
        return net

    @pytest.mark.parametrize("topology", ["parallel", "series"])
    def test_fused_forward_matches(self, rng, topology):
        net = self._net(rng, topology)
        x = rng.normal(size=(2, 8, 8, 3))
        before = net.forward(x, "d")
        assert fuse_domain(net, "d")
        assert rel(net.forward(x, "d"), before) <= 1e-12
        with pytest.raises(ConfigError):
            net.loss_and_grads(x, np.array([0, 1]), "d", [])

    def test_round_trip_restores_params(self, rng):
        net = self._net(rng)
        digest = net.digest("")
        fuse_domain(net, "d")
        assert net.digest("") != digest
        unfuse_domain(net, "d")
        assert net.digest("") == digest

    def test_series_bn_refused(self, rng):
        with pytest.raises(ConfigError):
            fuse_domain(self._net(rng, "series", True), "d")

    def test_tampered_fused_bank_detected(self, rng):
        from resadapt.errors import NumericError
        net = self._net(rng)
        i = fuse_domain(net, "d")[0]
        net.params[f"domain/d/layer/{i}/fused"][0, 0, 0, 0] += 1e-3
        with pytest.raises(NumericError):
            unfuse_domain(net, "d")
