"""
Store information about a training run.
"""

from __future__ import absolute_import
from __future__ import print_function
from datetime import datetime
import os.path

TIMESTAMP = datetime.now().strftime("%Y-%m-%d")
TRAIN_LOG_PATH = "train_log.csv"
LOG_PATH = "taylorformer.log"
TRAIN_LOG_HEADER = "kind,step,lr,loss,seconds,dehazedPsnr,hazyPsnr,\
dehazedSsim\n"


class TrainLog(object):
    """
    A record of a single training run.
    """
    def __init__(self, spec=None, precision="f64", version=None, seed=None):
        self._spec = spec
        self._precision = precision
        self._version = version
        self._seed = seed
        self._steps = []
        self._evals = []
        self._checkpoints = []

    @property
    def spec(self):
        "The TrainSpec of this run."
        return self._spec

    @property
    def precision(self):
        "'f32' or 'f64'."
        return self._precision

    @property
    def version(self):
        "The version number used for this run."
        return self._version

    @version.setter
    def version(self, value):
        self._version = value

    @property
    def seed(self):
        "The seed the network and the batches were drawn with."
        return self._seed

    @seed.setter
    def seed(self, value):
        self._seed = value

    @property
    def steps(self):
        "Rows of (step, lr, loss, seconds since the start)."
        return self._steps

    @property
    def evals(self):
        "Rows of (step, dehazed PSNR, hazy PSNR, dehazed SSIM)."
        return self._evals

    @property
    def checkpoints(self):
        "Paths of the weight files written during this run."
        return self._checkpoints

    @property
    def losses(self):
        return [row[2] for row in self._steps]

    def record_step(self, step, lr, loss, seconds):
        self._steps.append((step, lr, float(loss), seconds))

    def record_eval(self, step, dehazed_psnr, hazy_psnr, dehazed_ssim):
        self._evals.append((step, dehazed_psnr, hazy_psnr, dehazed_ssim))

    def gain(self):
        "PSNR gained over the hazy input at the last evaluation, in dB."
        if not self._evals:
            return None
        _, dehazed, hazy, _ = self._evals[-1]
        return dehazed - hazy

    def to_csv(self, dir_out):
        """Append the steps and evaluations of this run to the training log
        CSV in dir_out."""
        path = os.path.join(dir_out, TRAIN_LOG_PATH)
        new = not os.path.isfile(path)
        with open(path, "a") as csv_file:
            if new:
                csv_file.write(TRAIN_LOG_HEADER)
            for step, lr, loss, seconds in self._steps:
                csv_file.write("step,{},{:.6e},{:.6f},{:.3f},,,\n".format(
                    step, lr, loss, seconds))
            for step, dehazed, hazy, ssim in self._evals:
                csv_file.write("eval,{},,,,{:.4f},{:.4f},{:.4f}\n".format(
                    step, dehazed, hazy, ssim))

    def to_str(self):
        "Returns a summary of this run."
        lines = ["training run, {}".format(TIMESTAMP),
                 "  precision:\t\t{}".format(self._precision)]
        if self._seed is not None:
            lines.append("  seed:\t\t\t{}".format(self._seed))
        if self._spec is not None:
            for key, value in sorted(self._spec.to_dict().items()):
                lines.append("  {}:\t\t{}".format(key, value))
        if self._steps:
            first = self.losses[0]
            last = self.losses[-1]
            lines.append("  steps:\t\t{}".format(len(self._steps)))
            lines.append("  loss:\t\t\t{:.5f} -> {:.5f}".format(first, last))
        for step, dehazed, hazy, ssim in self._evals:
            lines.append("  step {}: PSNR {:.3f} dB (hazy {:.3f} dB, gain "
                         "{:+.3f} dB), SSIM {:.4f}".format(
                             step, dehazed, hazy, dehazed - hazy, ssim))
        for path in self._checkpoints:
            lines.append("  wrote: {}".format(path))
        return "\n".join(lines)

    def report(self, dir_out):
        "Write the CSV rows and a text summary of this run to dir_out."
        self.to_csv(dir_out)
        summary = self.to_str()
        with open(os.path.join(dir_out, LOG_PATH), "a") as log_file:
            log_file.write(summary + "\n")
        return summary
