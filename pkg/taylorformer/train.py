"""
Toy-scale training: L1 loss, Adam, a cosine-annealed learning rate and
random crop/flip augmentation, plus evaluation and the MSAR ablation.
"""

from __future__ import absolute_import
from __future__ import division
from __future__ import print_function
import math
import os
import sys
import time

import numpy as np

from . import checkpoint
from . import metrics
from . import report
from . import tensor
from .backbone import Network
from .backbone import NetworkConfig
from .errors import ConfigurationError
from .log import TrainLog


class TrainSpec(object):
    """
    Settings of one training run.

    Parameters
    ----------
    iterations : int
        Optimizer steps.

    batch_size : int
        Crops per step.

    crop_size : int
        Side length of the random crops.

    lr_max, lr_min : float
        The learning rate anneals from lr_max to lr_min along a cosine.

    flip : bool
        Flip crops horizontally with probability one half.
    """
    def __init__(self, iterations=2000, batch_size=8, crop_size=64,
                 lr_max=2e-4, lr_min=1e-6, flip=True, seed=0,
                 log_every=50, eval_every=0, checkpoint_every=0):
        if iterations < 1 or batch_size < 1 or crop_size < 1:
            raise ConfigurationError("iterations, batch size and crop size "
                                     "have to be positive")
        if lr_max <= 0 or lr_min < 0 or lr_min > lr_max:
            raise ConfigurationError("the learning rate has to anneal from a "
                                     "positive lr_max down to lr_min")
        self.iterations = iterations
        self.batch_size = batch_size
        self.crop_size = crop_size
        self.lr_max = lr_max
        self.lr_min = lr_min
        self.flip = flip
        self.seed = seed
        self.log_every = log_every
        self.eval_every = eval_every
        self.checkpoint_every = checkpoint_every

    def to_dict(self):
        return dict(vars(self))


class Adam(object):
    "Adam with bias-corrected moment estimates."
    def __init__(self, parameters, beta1=0.9, beta2=0.999, eps=1e-8):
        self.parameters = list(parameters)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.steps = 0
        self._first = [np.zeros_like(parameter.data)
                       for parameter in self.parameters]
        self._second = [np.zeros_like(parameter.data)
                        for parameter in self.parameters]

    def step(self, lr):
        "Update every parameter that holds a gradient."
        self.steps += 1
        first_fix = 1 - self.beta1 ** self.steps
        second_fix = 1 - self.beta2 ** self.steps
        for index, parameter in enumerate(self.parameters):
            grad = parameter.grad
            if grad is None:
                continue
            first = self.beta1 * self._first[index] + (1 - self.beta1) * grad
            second = self.beta2 * self._second[index] + \
                (1 - self.beta2) * grad * grad
            self._first[index] = first
            self._second[index] = second
            update = lr * (first / first_fix) / (np.sqrt(second / second_fix) +
                                                 self.eps)
            parameter.data = (parameter.data - update).astype(
                parameter.dtype, copy=False)


def cosine_lr(step, total, lr_max=2e-4, lr_min=1e-6):
    "Cosine annealing from lr_max at step 0 to lr_min at the last step."
    if total <= 1:
        return lr_max
    progress = min(max(step, 0), total - 1) / (total - 1)
    return lr_min + 0.5 * (lr_max - lr_min) * (1 + math.cos(math.pi *
                                                            progress))


def random_crop_flip(clean, hazy, size, rng, flip=True):
    "Cut the same random size x size window from both images."
    height, width = clean.shape[-2:]
    if hazy.shape != clean.shape:
        raise ConfigurationError("clean {} and hazy {} images differ".format(
            clean.shape, hazy.shape))
    if size > height or size > width:
        raise ConfigurationError("cannot crop {0}x{0} from a {1}x{2} image"
                                 .format(size, height, width))
    row = rng.integers(0, height - size + 1)
    col = rng.integers(0, width - size + 1)
    clean = clean[..., row:row + size, col:col + size]
    hazy = hazy[..., row:row + size, col:col + size]
    if flip and rng.uniform() < 0.5:
        clean = clean[..., ::-1]
        hazy = hazy[..., ::-1]
    return np.ascontiguousarray(clean), np.ascontiguousarray(hazy)


def l1_loss(prediction, target):
    "Mean absolute error."
    return tensor.mean(tensor.absolute(prediction - target))


def _batch(pairs, spec, rng):
    picks = rng.integers(0, len(pairs), spec.batch_size)
    crops = [random_crop_flip(pairs[pick][0], pairs[pick][1],
                              spec.crop_size, rng, spec.flip)
             for pick in picks]
    clean = np.stack([crop[0] for crop in crops])
    hazy = np.stack([crop[1] for crop in crops])
    return clean, hazy


def dehaze(network, image):
    """Restore one (3, h, w) image. Sides that are not multiples of the
    network's divisor are padded by edge replication and cropped back; the
    result is clipped to [0, 1]."""
    image = np.asarray(image)
    height, width = image.shape[-2:]
    divisor = network.config.divisor
    pad_h = -height % divisor
    pad_w = -width % divisor
    padded = np.pad(image, ((0, 0), (0, pad_h), (0, pad_w)), mode="edge")
    restored = network(tensor.Tensor(padded)).data
    return np.clip(restored[:, :height, :width], 0, 1)


def evaluate(network, pairs):
    """Mean PSNR of the restored and of the hazy images against the clean
    ones, and mean SSIM of the restored images.

    Returns
    -------
    scores : tuple
        (dehazed PSNR, hazy PSNR, dehazed SSIM)
    """
    if not pairs:
        raise ConfigurationError("nothing to evaluate")
    dehazed_psnr = []
    hazy_psnr = []
    dehazed_ssim = []
    for clean, hazy in pairs:
        restored = dehaze(network, hazy)
        dehazed_psnr.append(metrics.psnr(restored, clean))
        hazy_psnr.append(metrics.psnr(hazy, clean))
        dehazed_ssim.append(metrics.ssim(restored, clean))
    return (float(np.mean(dehazed_psnr)), float(np.mean(hazy_psnr)),
            float(np.mean(dehazed_ssim)))


def train(network, pairs, spec, rng, log=None, eval_pairs=None, dir_out=None,
          display=False):
    """Fit network to (clean, hazy) pairs with L1 loss.

    Parameters
    ----------
    network : Network
        Trained in place.

    pairs : list
        (clean, hazy) arrays of shape (3, h, w).

    spec : TrainSpec
        Schedule, batch and crop settings.

    rng : numpy.random.Generator
        Source of the batches and crops.

    eval_pairs : list
        Held-out pairs, evaluated every spec.eval_every steps and at the end.

    dir_out : str
        Checkpoints are written here every spec.checkpoint_every steps.

    Returns
    -------
    log : TrainLog
        The loss curve and evaluations of this run.
    """
    if not pairs:
        raise ConfigurationError("no training pairs")
    if spec.crop_size % network.config.divisor:
        raise ConfigurationError("crop size {} is not a multiple of {}".format(
            spec.crop_size, network.config.divisor))
    if log is None:
        log = TrainLog(spec, tensor.get_precision())
    optimizer = Adam(network.parameters())
    start = time.time()
    for step in range(1, spec.iterations + 1):
        lr = cosine_lr(step - 1, spec.iterations, spec.lr_max, spec.lr_min)
        clean, hazy = _batch(pairs, spec, rng)
        with tensor.Tape() as tape:
            loss = l1_loss(network(tensor.Tensor(hazy)), tensor.Tensor(clean))
            tape.backward(loss)
        optimizer.step(lr)
        network.zero_grad()
        log.record_step(step, lr, loss.item(), time.time() - start)
        if display and (step % max(spec.log_every, 1) == 0 or
                        step == spec.iterations):
            report.progress_bar("step {}/{}: loss {:.5f}, lr {:.2e}".format(
                step, spec.iterations, loss.item(), lr))
        if eval_pairs and spec.eval_every and step % spec.eval_every == 0:
            log.record_eval(step, *evaluate(network, eval_pairs))
        if dir_out and spec.checkpoint_every and \
           step % spec.checkpoint_every == 0:
            path = os.path.join(dir_out, "weights_{:06d}.bin".format(step))
            checkpoint.save_weights(path, network, display=display)
            log.checkpoints.append(path)
    if display:
        print("", file=sys.stderr)
    if eval_pairs:
        log.record_eval(spec.iterations, *evaluate(network, eval_pairs))
    return log


class AblationResult(object):
    "Held-out PSNR with and without the MSAR gate, per seed."
    def __init__(self):
        self.rows = []

    def add(self, seed, gated, ungated):
        self.rows.append((seed, gated, ungated))

    @property
    def wins(self):
        "Seeds on which the gated network is at least as good."
        return sum(1 for _, gated, ungated in self.rows if gated >= ungated)

    @property
    def gate_helps(self):
        "True if the gated network wins on a majority of seeds."
        return self.wins * 2 > len(self.rows)

    def to_str(self):
        lines = ["{:>6}  {:>12}  {:>12}".format("seed", "with MSAR",
                                               "without")]
        for seed, gated, ungated in self.rows:
            lines.append("{:>6}  {:>12.3f}  {:>12.3f}".format(seed, gated,
                                                             ungated))
        lines.append("gate at least as good on {}/{} seeds".format(
            self.wins, len(self.rows)))
        return "\n".join(lines)


def ablation(pairs, eval_pairs, spec, config, seeds=(0, 1, 2),
             display=False):
    """Train the same network with and without the MSAR gate for each seed
    and compare held-out PSNR."""
    result = AblationResult()
    settings = config.to_dict()
    for seed in seeds:
        scores = []
        for gated in (True, False):
            settings["use_msar"] = gated
            network = Network(NetworkConfig.from_dict(settings),
                              np.random.default_rng(seed))
            if display:
                report.progress_bar("seed {}: training {} the gate".format(
                    seed, "with" if gated else "without"), replace=False)
            log = train(network, pairs, spec, np.random.default_rng(seed),
                        eval_pairs=eval_pairs, display=display)
            scores.append(log.evals[-1][1])
        result.add(seed, *scores)
    return result
