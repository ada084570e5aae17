"Module for storing and retrieving the options of a single run."

from __future__ import absolute_import
from . import report

ON = u"[{}]".format(report.colorize("x", "green"))
OFF = u"[ ]"
BULLET = "~"
MISSING = "_"


class Settings(object):
    """
    A list of settings used in a single run.
    """
    def __init__(self, arguments=None):
        self._command = None
        self._config = "tiny"
        self._seed = 0
        self._out = None
        self._precision = "f64"
        self._threads = None
        self._overwrite = False
        self._plot = True
        self._iterations = None
        self._batch_size = None
        self._crop_size = None
        self._lr_max = None
        self._lr_min = None
        if arguments:
            self._command = arguments.command
            self._config = arguments.config
            self._seed = arguments.seed
            self._out = arguments.out
            self._precision = arguments.precision
            self._threads = arguments.threads
            self._overwrite = arguments.overwrite
            self._plot = not arguments.no_plot
            self._iterations = getattr(arguments, "iterations", None)
            self._batch_size = getattr(arguments, "batch_size", None)
            self._crop_size = getattr(arguments, "crop_size", None)
            self._lr_max = getattr(arguments, "lr_max", None)
            self._lr_min = getattr(arguments, "lr_min", None)

    @property
    def command(self):
        "The subcommand being run."
        return self._command

    @command.setter
    def command(self, value):
        self._command = value

    @property
    def config(self):
        "Name of a preset or path to a JSON network configuration."
        return self._config

    @config.setter
    def config(self, value):
        self._config = value

    @property
    def seed(self):
        "Seed for every random draw of the run."
        return self._seed

    @seed.setter
    def seed(self, value):
        self._seed = value

    @property
    def out(self):
        "Directory that receives the output files."
        return self._out

    @out.setter
    def out(self, value):
        self._out = value

    @property
    def precision(self):
        "'f32' or 'f64'."
        return self._precision

    @precision.setter
    def precision(self, value):
        self._precision = value

    @property
    def threads(self):
        return self._threads

    @threads.setter
    def threads(self, value):
        self._threads = value

    @property
    def overwrite(self):
        "Replace output files from a previous run without asking."
        return self._overwrite

    @overwrite.setter
    def overwrite(self, value):
        self._overwrite = value

    @property
    def plot(self):
        "Draw plots, if Matplotlib is installed."
        return self._plot

    @plot.setter
    def plot(self, value):
        self._plot = value

    @property
    def iterations(self):
        return self._iterations

    @property
    def batch_size(self):
        return self._batch_size

    @property
    def crop_size(self):
        return self._crop_size

    @property
    def lr_max(self):
        return self._lr_max

    @property
    def lr_min(self):
        return self._lr_min

    def train_overrides(self):
        "Training settings given on the command line, as keyword arguments."
        overrides = {}
        for key in ("iterations", "batch_size", "crop_size", "lr_max",
                    "lr_min"):
            value = getattr(self, key)
            if value is not None:
                overrides[key] = value
        return overrides

    def to_str(self):
        "Return these settings as a formatted string."
        training = self.train_overrides()
        training_str = ", ".join("{} = {}".format(key, value) for key, value
                                 in sorted(training.items())) or MISSING
        return u"""Parameters \
({} = required, {} = used, {} = unused):
   {}  Command: {}
   {}  Network configuration: {}
   {}  Seed: {}
   {}  Floating point precision: {}
  {} Use {} processes
  {} Write output files to: {}
  {} Overwrite previous output without asking
  {} Draw plots
  {} Training settings: {}""".format(
      BULLET, ON, OFF,
      BULLET, self.command,
      BULLET, self.config,
      BULLET, self.seed,
      BULLET, self.precision,
      ON if self.threads else OFF, self.threads if self.threads else MISSING,
      ON if self.out else OFF, self.out if self.out else MISSING,
      ON if self.overwrite else OFF,
      ON if self.plot else OFF,
      ON if training else OFF, training_str)

    def print_settings(self):
        "Print these settings in a formatted report."
        print(self.to_str())
