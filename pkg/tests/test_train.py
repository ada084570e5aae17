import os

import numpy as np
import pytest

from taylorformer import haze
from taylorformer import log
from taylorformer import tensor
from taylorformer import train
from taylorformer.backbone import Network
from taylorformer.backbone import NetworkConfig
from taylorformer.errors import ConfigurationError
from taylorformer.layers import Parameter
from taylorformer.log import TrainLog
from taylorformer.tensor import Tensor
from taylorformer.train import TrainSpec


@pytest.fixture(scope="module")
def pairs():
    return haze.synthesize_pairs(6, size=16, seed=0)


def _micro(seed=0):
    return Network(NetworkConfig.preset("micro"),
                   np.random.default_rng(seed))


class TestSchedule:
    def test_cosine_endpoints(self):
        assert train.cosine_lr(0, 100) == pytest.approx(2e-4)
        assert train.cosine_lr(99, 100) == pytest.approx(1e-6)
        assert train.cosine_lr(500, 100) == pytest.approx(1e-6)
        assert train.cosine_lr(0, 1, 0.5, 0.1) == 0.5

    def test_cosine_midpoint(self):
        assert train.cosine_lr(50, 101, 1.0, 0.0) == pytest.approx(0.5)

    def test_cosine_decreases(self):
        rates = [train.cosine_lr(step, 20) for step in range(20)]
        assert all(b < a for a, b in zip(rates, rates[1:]))

    @pytest.mark.parametrize("settings", [
        {"iterations": 0},
        {"batch_size": 0},
        {"lr_max": 0.0},
        {"lr_max": 1e-4, "lr_min": 1e-3},
    ])
    def test_invalid_spec(self, settings):
        with pytest.raises(ConfigurationError):
            TrainSpec(**settings)


class TestAdam:
    def test_first_step_has_the_size_of_the_rate(self):
        weight = Parameter(np.array([1.0, -2.0, 0.5]))
        weight.grad = np.array([0.5, -3.0, 0.0])
        train.Adam([weight]).step(0.1)
        np.testing.assert_allclose(weight.data, [0.9, -1.9, 0.5], atol=1e-6)

    def test_skips_parameters_without_gradient(self):
        weight = Parameter(np.ones(2))
        train.Adam([weight]).step(0.1)
        np.testing.assert_array_equal(weight.data, np.ones(2))

    def test_minimizes_a_quadratic(self):
        weight = Parameter(np.array([3.0, -1.0]))
        optimizer = train.Adam([weight])
        for _ in range(1000):
            weight.grad = 2 * (weight.data - np.array([1.0, 2.0]))
            optimizer.step(0.02)
        np.testing.assert_allclose(weight.data, [1.0, 2.0], atol=0.05)


class TestBatches:
    def test_crop_takes_the_same_window(self, rng):
        clean = rng.uniform(0, 1, (3, 10, 12))
        hazy = clean * 0.5
        for _ in range(10):
            crop, hazy_crop = train.random_crop_flip(clean, hazy, 4, rng)
            assert crop.shape == (3, 4, 4)
            np.testing.assert_allclose(hazy_crop, crop * 0.5)

    def test_crop_without_flip_is_a_window(self, rng):
        clean = np.arange(3 * 4 * 4, dtype=np.float64).reshape(3, 4, 4)
        crop, _ = train.random_crop_flip(clean, clean, 4, rng, flip=False)
        np.testing.assert_array_equal(crop, clean)

    def test_crop_too_large(self, rng):
        image = np.zeros((3, 4, 6))
        with pytest.raises(ConfigurationError):
            train.random_crop_flip(image, image, 5, rng)
        with pytest.raises(ConfigurationError):
            train.random_crop_flip(image, np.zeros((3, 4, 4)), 2, rng)

    def test_l1_loss(self):
        loss = train.l1_loss(Tensor([[0.0, 1.0]]), Tensor([[0.5, 0.0]]))
        assert loss.item() == pytest.approx(0.75)


class TestInference:
    def test_dehaze_keeps_the_size(self, rng):
        network = _micro()
        image = rng.uniform(0, 1, (3, 10, 13))
        restored = train.dehaze(network, image)
        assert restored.shape == (3, 10, 13)
        assert restored.min() >= 0 and restored.max() <= 1

    def test_zero_residual(self, rng):
        network = _micro()
        network.output.weight.data = np.zeros_like(network.output.weight.data)
        image = rng.uniform(0, 1, (3, 8, 8))
        np.testing.assert_array_equal(train.dehaze(network, image), image)

    def test_evaluate(self, pairs):
        network = _micro()
        network.output.weight.data = np.zeros_like(network.output.weight.data)
        dehazed, hazy, ssim = train.evaluate(network, pairs[:2])
        assert dehazed == pytest.approx(hazy)
        assert 0 < ssim <= 1
        with pytest.raises(ConfigurationError):
            train.evaluate(network, [])


class TestTraining:
    def test_loss_goes_down(self, pairs):
        spec = TrainSpec(iterations=30, batch_size=2, crop_size=8,
                         lr_max=2e-3, lr_min=1e-4)
        result = train.train(_micro(), pairs, spec, np.random.default_rng(0))
        losses = result.losses
        assert len(losses) == 30
        assert np.mean(losses[-10:]) < np.mean(losses[:10])

    def test_same_seed_same_losses(self, pairs):
        spec = TrainSpec(iterations=3, batch_size=2, crop_size=8)
        first = train.train(_micro(), pairs, spec, np.random.default_rng(4))
        second = train.train(_micro(), pairs, spec, np.random.default_rng(4))
        assert first.losses == second.losses

    def test_evaluations_and_checkpoints(self, pairs, tmp_path):
        spec = TrainSpec(iterations=4, batch_size=1, crop_size=8,
                         eval_every=2, checkpoint_every=3)
        result = train.train(_micro(), pairs, spec, np.random.default_rng(0),
                             eval_pairs=pairs[:1], dir_out=str(tmp_path))
        assert [row[0] for row in result.evals] == [2, 4, 4]
        assert result.checkpoints == [str(tmp_path / "weights_000003.bin")]
        assert os.path.isfile(result.checkpoints[0])
        assert result.gain() == result.evals[-1][1] - result.evals[-1][2]

    def test_single_precision(self, pairs):
        spec = TrainSpec(iterations=2, batch_size=1, crop_size=8)
        with tensor.precision("f32"):
            network = _micro()
            result = train.train(network, pairs, spec,
                                 np.random.default_rng(0))
        assert result.precision == "f32"
        assert all(parameter.dtype == np.float32
                   for parameter in network.parameters())

    def test_crop_has_to_fit_the_network(self, pairs):
        spec = TrainSpec(iterations=1, batch_size=1, crop_size=12)
        with pytest.raises(ConfigurationError):
            train.train(_micro(), pairs, spec, np.random.default_rng(0))
        with pytest.raises(ConfigurationError):
            train.train(_micro(), [], TrainSpec(crop_size=8),
                        np.random.default_rng(0))

    def test_ablation_compares_both_networks(self, pairs):
        spec = TrainSpec(iterations=2, batch_size=1, crop_size=8)
        result = train.ablation(pairs, pairs[:1], spec,
                                NetworkConfig.preset("micro"), seeds=(0, 1))
        assert [row[0] for row in result.rows] == [0, 1]
        assert 0 <= result.wins <= 2
        assert "2 seeds" in result.to_str()

    @pytest.mark.slow
    def test_tiny_network_learns_to_dehaze(self):
        tensor.set_precision("f32")
        pairs = haze.synthesize_pairs(200, size=64, seed=0)
        held_out = haze.synthesize_pairs(20, size=64, seed=1)
        network = Network(NetworkConfig.preset("tiny"),
                          np.random.default_rng(0))
        result = train.train(network, pairs, TrainSpec(),
                             np.random.default_rng(0), eval_pairs=held_out)
        assert result.gain() >= 2.0
        dehazed, hazy, _ = train.evaluate(network, pairs)
        assert dehazed - hazy >= 3.0

    @pytest.mark.slow
    def test_gate_helps_on_most_seeds(self):
        tensor.set_precision("f32")
        pairs = haze.synthesize_pairs(200, size=64, seed=0)
        held_out = haze.synthesize_pairs(20, size=64, seed=1)
        result = train.ablation(pairs, held_out, TrainSpec(),
                                NetworkConfig.preset("tiny"))
        assert result.gate_helps, result.to_str()


class TestTrainLog:
    def _log(self):
        result = TrainLog(TrainSpec(iterations=2), "f64", "0.1.0", 3)
        result.record_step(1, 2e-4, 0.25, 0.5)
        result.record_step(2, 1e-6, 0.125, 1.0)
        result.record_eval(2, 24.0, 21.5, 0.8)
        return result

    def test_gain(self):
        assert TrainLog().gain() is None
        assert self._log().gain() == pytest.approx(2.5)

    def test_csv_is_appended(self, tmp_path):
        result = self._log()
        result.to_csv(str(tmp_path))
        result.to_csv(str(tmp_path))
        with open(str(tmp_path / log.TRAIN_LOG_PATH)) as csv_file:
            lines = csv_file.read().splitlines()
        assert lines[0] == log.TRAIN_LOG_HEADER.strip()
        assert len(lines) == 7
        assert lines[1].startswith("step,1,2.000000e-04,0.250000,")
        assert lines[3] == "eval,2,,,,24.0000,21.5000,0.8000"

    def test_report(self, tmp_path):
        summary = self._log().report(str(tmp_path))
        assert "0.25000 -> 0.12500" in summary
        assert "gain +2.500 dB" in summary
        assert "seed:" in summary
        with open(str(tmp_path / log.LOG_PATH)) as log_file:
            assert summary in log_file.read()
