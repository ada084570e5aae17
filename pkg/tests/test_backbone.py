import json

import numpy as np
import pytest

from taylorformer import backbone
from taylorformer import checkpoint
from taylorformer import suites
from taylorformer import tensor
from taylorformer import train
from taylorformer.backbone import Network
from taylorformer.backbone import NetworkConfig
from taylorformer.backbone import SkffBlock
from taylorformer.errors import ConfigurationError
from taylorformer.errors import DimensionError
from taylorformer.errors import ShapeError
from taylorformer.tensor import Tensor


@pytest.fixture
def micro(rng):
    return Network(NetworkConfig.preset("micro"), rng)


class TestNetworkConfig:
    def test_defaults(self):
        config = NetworkConfig()
        assert config.stage_channels == (8, 16, 16, 32)
        assert config.heads == (1, 2, 2, 4)
        assert config.refinement_blocks == 0
        assert config.branch_depths == ((1, 2),) * 4
        assert config.divisor == 8
        assert config == NetworkConfig.preset("tiny")

    def test_json_round_trip(self, tmp_path):
        config = NetworkConfig.preset("micro", use_msar=False,
                                      branch_depths=[[1], [1, 2], [1, 2],
                                                     [2]])
        path = str(tmp_path / "config.json")
        config.save(path)
        loaded = NetworkConfig.load(path)
        assert loaded == config
        assert loaded.branch_depths == ((1,), (1, 2), (1, 2), (2,))
        assert not loaded.use_msar
        with open(path) as config_file:
            assert json.load(config_file)["base_channels"] == 4

    def test_unknown_setting(self):
        with pytest.raises(ConfigurationError):
            NetworkConfig(base_chanels=8)

    def test_unknown_preset(self):
        with pytest.raises(ConfigurationError):
            NetworkConfig.preset("huge")

    @pytest.mark.parametrize("settings", [
        {"base_channels": 4},
        {"heads": (3, 2, 2, 4)},
        {"stage_blocks": (1, 1, 1)},
        {"stage_channels": (8, 18, 16, 32)},
        {"norm_radius": 0.6},
        {"msar_kernels": (3, 4)},
        {"branch_depths": (1, 0)},
        {"base_channels": "many"},
    ])
    def test_invalid(self, settings):
        with pytest.raises(ConfigurationError):
            NetworkConfig(**settings)

    def test_unreadable_file(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text(u"{ not json")
        with pytest.raises(ConfigurationError):
            NetworkConfig.load(str(path))
        with pytest.raises(ConfigurationError):
            NetworkConfig.load(str(tmp_path / "missing.json"))
        with pytest.raises(ConfigurationError):
            NetworkConfig.from_dict([1, 2])


class TestSkff:
    def test_weights_sum_to_one(self, rng):
        block = SkffBlock(8, 3, reduction=2, rng=rng)
        features = [Tensor(rng.standard_normal((8, 4, 5))) for _ in range(3)]
        weights = backbone.selection_weights(features, block).data
        assert weights.shape == (3, 8, 1, 1)
        np.testing.assert_allclose(weights.sum(axis=0), 1.0)
        assert np.all(weights > 0)

    def test_one_branch_is_identity(self, rng):
        block = SkffBlock(4, 1, rng=rng)
        feature = Tensor(rng.standard_normal((2, 4, 3, 3)))
        fused = backbone.skff_fuse([feature], block)
        np.testing.assert_array_equal(fused.data, feature.data)

    def test_identical_branches_return_the_branch(self, rng):
        block = SkffBlock(8, 2, reduction=2, rng=rng)
        feature = Tensor(rng.standard_normal((8, 5, 5)))
        fused = backbone.skff_fuse([feature, feature], block)
        np.testing.assert_allclose(fused.data, feature.data, rtol=1e-12,
                                   atol=1e-15)

    def test_fused_lies_between_branches(self, rng):
        block = SkffBlock(4, 2, rng=rng)
        low = Tensor(np.zeros((4, 3, 3)))
        high = Tensor(np.ones((4, 3, 3)))
        fused = backbone.skff_fuse([low, high], block).data
        assert np.all((fused > 0) & (fused < 1))

    def test_branch_shapes_have_to_agree(self, rng):
        block = SkffBlock(4, 2, rng=rng)
        with pytest.raises(DimensionError):
            backbone.skff_fuse([Tensor(np.ones((4, 3, 3))),
                                Tensor(np.ones((4, 3, 2)))], block)

    def test_branch_count_has_to_match(self, rng):
        block = SkffBlock(4, 2, rng=rng)
        with pytest.raises(ConfigurationError):
            backbone.skff_fuse([Tensor(np.ones((4, 3, 3)))], block)
        with pytest.raises(ConfigurationError):
            backbone.skff_fuse([], block)


class TestNetwork:
    def test_output_keeps_the_image_shape(self, micro, rng):
        image = Tensor(rng.uniform(0, 1, (3, 16, 8)))
        assert micro(image).shape == (3, 16, 8)
        batch = Tensor(rng.uniform(0, 1, (2, 3, 8, 8)))
        assert micro(batch).shape == (2, 3, 8, 8)

    def test_zero_residual_returns_the_input(self, micro, rng):
        micro.output.weight.data = np.zeros_like(micro.output.weight.data)
        image = rng.uniform(0, 1, (3, 8, 8))
        np.testing.assert_array_equal(micro(Tensor(image)).data, image)

    def test_single_stage(self, rng):
        config = NetworkConfig(base_channels=4, stage_channels=(4,),
                               stage_blocks=(1,), heads=(2,),
                               branch_depths=(1,), refinement_blocks=0)
        network = Network(config, rng)
        assert config.divisor == 1
        assert network.decoder_channels(0) == 4
        assert network(Tensor(rng.uniform(0, 1, (3, 5, 7)))).shape == \
            (3, 5, 7)

    def test_sides_have_to_be_multiples(self, micro):
        with pytest.raises(ShapeError):
            micro(Tensor(np.zeros((3, 12, 16))))

    def test_image_has_three_channels(self, micro):
        with pytest.raises(DimensionError):
            micro(Tensor(np.zeros((1, 8, 8))))
        with pytest.raises(DimensionError):
            micro(Tensor(np.zeros((8, 8))))

    def test_blocks(self, micro):
        paths = [path for path, _, _ in micro.blocks()]
        assert paths == ["encoder0", "encoder1", "encoder2", "encoder3",
                         "decoder0", "decoder1", "decoder2", "refinement0"]

    def test_ungated_network_runs(self, rng):
        network = Network(NetworkConfig.preset("micro", use_msar=False), rng)
        gates = [block.gate for _, multi, _ in network.blocks()
                 for chain in multi.branches for block in chain]
        assert gates and set(gates) == {"identity"}
        assert network(Tensor(rng.uniform(0, 1, (3, 8, 8)))).shape == \
            (3, 8, 8)


class TestGradientFlow:
    def test_every_parameter_learns(self, micro, rng):
        # the offset predictors start at zero, so one step wakes them up
        optimizer = train.Adam(micro.parameters())
        hazy = Tensor(rng.uniform(0, 1, (4, 3, 16, 16)))
        clean = Tensor(rng.uniform(0, 1, (4, 3, 16, 16)))
        for step in range(2):
            micro.zero_grad()
            with tensor.Tape() as tape:
                tape.backward(train.l1_loss(micro(hazy), clean))
            if step == 0:
                optimizer.step(1e-2)
        dead = [name for name, parameter in micro.named_parameters()
                if parameter.grad is None or not np.any(parameter.grad)]
        assert dead == []


class TestCosts:
    @pytest.mark.parametrize("name", ["micro", "tiny"])
    def test_parameters_match_the_network(self, rng, name):
        config = NetworkConfig.preset(name)
        network = Network(config, rng)
        costs = backbone.count_costs(config, 64, 64)
        assert costs.analytic_params == network.num_parameters()

    def test_tiny_is_desk_sized(self, rng):
        network = Network(NetworkConfig.preset("tiny"), rng)
        assert 5e4 < network.num_parameters() < 2e5
        assert network.refinement == []

    def test_instrumented_counts_match(self, micro, rng):
        costs = backbone.measure_costs(micro, 16, 16, rng)
        assert costs.mismatches() == []
        exact = [entry for entry in costs if entry.exact]
        assert len(exact) > 10
        assert all(entry.instrumented_macs > 0 for entry in exact)
        tmsa = costs.entry("encoder0/branch0/block0/tmsa")
        assert tmsa.reference_macs == tmsa.analytic_macs

    def test_counts_scale_with_the_image(self):
        config = NetworkConfig.preset("micro")
        small = backbone.count_costs(config, 16, 16)
        large = backbone.count_costs(config, 32, 32)
        name = "decoder0/branch1/block0/tmsa"
        assert large.entry(name).analytic_macs == \
            4 * small.entry(name).analytic_macs
        assert large.analytic_macs > 3 * small.analytic_macs
        assert large.analytic_params == small.analytic_params

    def test_sides_have_to_be_multiples(self):
        with pytest.raises(ShapeError):
            backbone.count_costs(NetworkConfig.preset("micro"), 12, 16)


class TestCheckpoint:
    def test_round_trip(self, rng, tmp_path):
        path = str(tmp_path / "weights.bin")
        with tensor.precision("f32"):
            config = NetworkConfig.preset("micro")
            saved = Network(config, rng)
            checkpoint.save_weights(path, saved)
            loaded = checkpoint.load_weights(path, Network(config, rng))
        for (name, first), (other, second) in zip(saved.named_parameters(),
                                                  loaded.named_parameters()):
            assert name == other
            assert second.dtype == np.float32
            np.testing.assert_array_equal(first.data, second.data)

    def test_loaded_network_gives_the_same_output(self, tmp_path):
        path = str(tmp_path / "weights.bin")
        config = NetworkConfig.preset("micro")
        with tensor.precision("f32"):
            image = Tensor(np.random.default_rng(3).uniform(0, 1, (3, 8, 8)))
            saved = Network(config, np.random.default_rng(0))
            for _, parameter in saved.named_parameters():
                parameter.data = parameter.data + np.float32(0.01)
            checkpoint.save_weights(path, saved)
            loaded = checkpoint.load_weights(
                path, Network(config, np.random.default_rng(1)))
            np.testing.assert_array_equal(loaded(image).data,
                                          saved(image).data)

    def test_wide_weights_are_rounded_with_a_warning(self, rng, tmp_path,
                                                     capsys):
        path = str(tmp_path / "weights.bin")
        network = Network(NetworkConfig.preset("micro"), rng)
        checkpoint.save_weights(path, network)
        assert "rounded to 32 bits" in capsys.readouterr().err
        checkpoint.save_weights(path, network, display=False)
        assert capsys.readouterr().err == ""

    def test_wrong_network(self, rng, tmp_path):
        path = str(tmp_path / "weights.bin")
        checkpoint.save_weights(path, Network(NetworkConfig.preset("micro"),
                                              rng))
        other = Network(NetworkConfig.preset("micro", refinement_blocks=0),
                        rng)
        with pytest.raises(ConfigurationError):
            checkpoint.load_weights(path, other)

    def test_truncated_file(self, rng, tmp_path):
        path = tmp_path / "weights.bin"
        network = Network(NetworkConfig.preset("micro"), rng)
        checkpoint.save_weights(str(path), network)
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(ConfigurationError):
            checkpoint.load_weights(str(path), network)

    def test_not_a_weight_file(self, rng, tmp_path):
        path = tmp_path / "weights.bin"
        path.write_bytes(b"P6\n1 1\n255\n\x00\x00\x00")
        with pytest.raises(ConfigurationError):
            checkpoint.read_weights(str(path))


class TestGradients:
    def test_suite(self, rng):
        results = suites.gradient_suite(rng, samples=5, only=["backbone"])
        for result in results:
            assert result.passed, result.to_str()
