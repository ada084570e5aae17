"""
Analytic multiply and parameter counts, the report that holds them next to
instrumented counts, and the wall-clock scaling experiment.
"""

from __future__ import absolute_import
from __future__ import division
import time
from collections import OrderedDict

import numpy as np

from . import attention
from . import report
from . import tensor
from .errors import ConfigurationError

PATHS = ("linear", "quadratic_taylor", "softmax")
COSTS_HEADER = "name,analyticMacs,analyticParams,referenceMacs,\
instrumentedMacs,wallTimeNs,exact\n"
BENCH_HEADER = "path,N,D,trial,nanos,multiplies\n"
SUMMARY_HEADER = "path,N,median_nanos,multiplies,slope\n"
# accepted log-log slopes of wall time against N
SLOPE_RANGES = {"linear": (0.8, 1.3), "quadratic_taylor": (1.7, 2.3),
                "softmax": (1.7, 2.3)}


def _blank(value):
    return "" if value is None else value


class CostEntry(object):
    """
    Cost of one part of a network.

    Parameters
    ----------
    name : str
        Label path of the part, such as 'encoder0/branch1/block0/tmsa'.

    analytic_macs : int
        Multiplies predicted by the closed forms.

    analytic_params : int
        Number of weights in the part.

    reference_macs : int or None
        The closed form quoted for this kind of part, when it applies to the
        configuration.

    exact : bool
        True if the instrumented count has to equal analytic_macs.
    """
    def __init__(self, name, analytic_macs, analytic_params,
                 reference_macs=None, instrumented_macs=None, wall_time=None,
                 exact=False):
        self.name = name
        self.analytic_macs = int(analytic_macs)
        self.analytic_params = int(analytic_params)
        self.reference_macs = reference_macs
        self.instrumented_macs = instrumented_macs
        self.wall_time = wall_time
        self.exact = exact

    @property
    def matches(self):
        """True unless this entry is exact, measured and off by any number of
        multiplies."""
        if not self.exact or self.instrumented_macs is None:
            return True
        return self.instrumented_macs == self.analytic_macs


class CostReport(object):
    "Per-part analytic and measured costs of one network on one image size."
    def __init__(self, height, width, entries=None):
        self.height = height
        self.width = width
        self._entries = OrderedDict()
        for entry in entries or []:
            self.add(entry)

    def __len__(self):
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries.values())

    def add(self, entry):
        if entry.name in self._entries:
            raise ConfigurationError("duplicate cost entry '{}'"
                                     .format(entry.name))
        self._entries[entry.name] = entry

    def entry(self, name):
        "The entry of the part with this name."
        try:
            return self._entries[name]
        except KeyError:
            raise ConfigurationError("no cost entry named '{}'".format(name))

    @property
    def entries(self):
        return list(self._entries.values())

    @property
    def analytic_macs(self):
        return sum(entry.analytic_macs for entry in self)

    @property
    def analytic_params(self):
        return sum(entry.analytic_params for entry in self)

    @property
    def instrumented_macs(self):
        "Sum of the measured counts, or None before measurement."
        counts = [entry.instrumented_macs for entry in self]
        if any(count is None for count in counts):
            return None
        return sum(counts)

    def mismatches(self):
        "Exact entries whose measured count differs from the analytic one."
        return [entry for entry in self if not entry.matches]

    def to_str(self):
        "Returns the report as a table."
        width = max([len(entry.name) for entry in self] + [len("total")])
        row = "{:<" + str(width) + "}  {:>14}  {:>10}  {:>14}  {:>12}\n"
        table = row.format("part", "MACs", "params", "measured", "time (ms)")
        table += "-" * (width + 60) + "\n"
        for entry in self:
            measured = "" if entry.instrumented_macs is None else \
                "{:,}".format(entry.instrumented_macs)
            if entry.exact and entry.instrumented_macs is not None:
                measured += " =" if entry.matches else " !"
            millis = "" if entry.wall_time is None else \
                "{:.2f}".format(entry.wall_time / 1e6)
            table += row.format(entry.name, "{:,}".format(entry.analytic_macs),
                                "{:,}".format(entry.analytic_params),
                                measured, millis)
        total = self.instrumented_macs
        table += "-" * (width + 60) + "\n"
        table += row.format("total", "{:,}".format(self.analytic_macs),
                            "{:,}".format(self.analytic_params),
                            "" if total is None else "{:,}".format(total), "")
        return table

    def to_csv(self, path):
        "Write one row per entry to the CSV file at path."
        with open(path, "w") as csv_file:
            csv_file.write(COSTS_HEADER)
            for entry in self:
                csv_file.write("{},{},{},{},{},{},{}\n".format(
                    entry.name, entry.analytic_macs, entry.analytic_params,
                    _blank(entry.reference_macs),
                    _blank(entry.instrumented_macs), _blank(entry.wall_time),
                    int(entry.exact)))


def tmsa_macs_square(height, width, dim):
    "18 hw D + 7 hw D^2; the T-MSA cost at one head with 3x3 gates."
    tokens = height * width
    return 18 * tokens * dim + 7 * tokens * dim * dim


def tmsa_macs(tokens, dim, heads=1, kernels=(3, 5, 7), gated=True):
    """Multiplies charged to one T-MSA module on N tokens.

    These are the pointwise Q/K/V projection (3 N D^2), three D/h x D/h
    products per head in the linear attention, the gating convolutions
    (2 D/h k_h^2 N per head) and the output projection (N D^2). Layer norm,
    the depthwise Q/K/V convolution, the normalization, the division and the
    gate multiply are not charged. Without the gate (gated=False) its
    convolutions are skipped.

    Parameters
    ----------
    tokens : int
        N = h w.

    dim : int
        D, channels per token.

    heads : int
        h; has to divide dim.

    kernels : tuple
        Gating kernel sizes, cycled across heads.

    gated : bool
        Charge the gating convolutions.

    Returns
    -------
    macs : int
    """
    if dim % heads:
        raise ConfigurationError("{} heads do not divide {} channels".format(
            heads, dim))
    msar = attention.MsarConfig(kernels)
    head_dim = dim // heads
    projections = 4 * tokens * dim * dim
    products = 3 * heads * head_dim * head_dim * tokens
    gates = 0
    if gated:
        gates = sum(2 * head_dim * msar.kernel(head) ** 2 * tokens
                    for head in range(heads))
    return projections + products + gates


def tmsa_params(dim, heads=1, kernels=(3, 5, 7), qkv_kernel=3):
    """Weights of one T-MSA module, layer norm and gate biases included:

        D + 3 D^2 + 3 D k_qkv^2 + sum_h (2 D/h k_h^2 + 1) + D^2

    Parameters
    ----------
    dim, heads, kernels : see tmsa_macs

    qkv_kernel : int
        Side of the depthwise Q/K/V convolution.

    Returns
    -------
    params : int
    """
    msar = attention.MsarConfig(kernels)
    head_dim = dim // heads
    gates = sum(2 * head_dim * msar.kernel(head) ** 2 + 1
                for head in range(heads))
    return dim + 3 * dim * dim + 3 * dim * qkv_kernel ** 2 + gates + dim * dim


def msa_macs(height, width, dim):
    "4 hw D^2 + 2 (hw)^2 D; softmax attention with the same projections."
    tokens = height * width
    return 4 * tokens * dim * dim + 2 * tokens * tokens * dim


def crossover(dim):
    """Smallest token count at which softmax attention needs more multiplies
    than T-MSA. Both costs share the factor hw D, which leaves
    2 hw > 18 + 3 D.

    Parameters
    ----------
    dim : int
        D, channels per token.

    Returns
    -------
    tokens : int
        The smallest hw with msa_macs > tmsa_macs_square.
    """
    if dim < 1:
        raise ConfigurationError("dimension has to be positive, got {}"
                                 .format(dim))
    return (18 + 3 * dim) // 2 + 1


def _attention(path):
    if path == "linear":
        return attention.taylor_attention_linear
    if path == "quadratic_taylor":
        return attention.taylor_attention_quadratic
    if path == "softmax":
        return attention.softmax_attention
    raise ConfigurationError("unknown attention path '{}', expected one of: "
                             "{}".format(path, ", ".join(PATHS)))


def log_slope(ns, times):
    """Least squares slope of log(time) against log(N) over the upper half of
    the sweep.

    Parameters
    ----------
    ns : list
        Ascending token counts.

    times : list
        One time per token count, in any unit.

    Returns
    -------
    slope : float
        About 1 for linear and 2 for quadratic growth; nan with fewer than
        two points.
    """
    if len(ns) < 2:
        return float("nan")
    start = min(len(ns) // 2, len(ns) - 2)
    slope, _ = np.polyfit(np.log(ns[start:]), np.log(times[start:]), 1)
    return float(slope)


class ScalingResult(object):
    "Timings of one attention path over a sweep of token counts."
    def __init__(self, path, dim):
        self.path = path
        self.dim = dim
        self.rows = []
        self.multiplies = OrderedDict()

    @property
    def ns(self):
        return list(self.multiplies)

    def median_nanos(self, tokens):
        return float(np.median([row[4] for row in self.rows
                                if row[1] == tokens]))

    @property
    def slope(self):
        return log_slope(self.ns, [self.median_nanos(tokens)
                                   for tokens in self.ns])

    @property
    def slope_in_range(self):
        "True if the slope lies in SLOPE_RANGES for this path."
        low, high = SLOPE_RANGES[self.path]
        return low <= self.slope <= high

    def summary(self):
        "Rows of (path, N, median_nanos, multiplies, slope)."
        slope = self.slope
        return [(self.path, tokens, self.median_nanos(tokens), count, slope)
                for tokens, count in self.multiplies.items()]

    def to_csv(self, path, header=True):
        with open(path, "a") as csv_file:
            if header:
                csv_file.write(BENCH_HEADER)
            for row in self.rows:
                csv_file.write("{},{},{},{},{},{}\n".format(*row))

    def summary_to_csv(self, path, header=True):
        with open(path, "a") as csv_file:
            if header:
                csv_file.write(SUMMARY_HEADER)
            for row in self.summary():
                csv_file.write("{},{},{:.1f},{},{:.4f}\n".format(*row))


def scaling_experiment(path, ns, dim=16, trials=5, warmup=2, rng=None,
                       display=False):
    """Time one attention path over a sweep of token counts.

    Parameters
    ----------
    path : str
        'linear', 'quadratic_taylor' or 'softmax'.

    ns : list
        Ascending token counts.

    dim : int
        Channels per token.

    trials : int
        Timed repetitions per token count; the median is reported.

    warmup : int
        Untimed repetitions before the timed ones.

    Returns
    -------
    result : ScalingResult
        Raw timings, the multiply count per token count and the log-log
        slope.
    """
    fn = _attention(path)
    ns = [int(tokens) for tokens in ns]
    if trials < 3:
        raise ConfigurationError("at least 3 trials are needed, got {}"
                                 .format(trials))
    if not ns or min(ns) < 1 or any(b <= a for a, b in zip(ns, ns[1:])):
        raise ConfigurationError("token counts have to be positive and "
                                 "ascending, got {}".format(ns))
    rng = rng if rng is not None else np.random.default_rng()
    result = ScalingResult(path, dim)
    for tokens in ns:
        if display:
            report.progress_bar("{}: N = {}".format(path, tokens))
        q, k = [attention.normalize_qk(tensor.Tensor(
            rng.uniform(-1, 1, (dim, tokens)))) for _ in range(2)]
        v = tensor.Tensor(rng.uniform(-1, 1, (dim, tokens)))
        with tensor.MultiplyCounter() as counter:
            fn(q, k, v)
        result.multiplies[tokens] = counter.total
        for _ in range(warmup):
            fn(q, k, v)
        for trial in range(trials):
            start = time.perf_counter_ns()
            fn(q, k, v)
            nanos = time.perf_counter_ns() - start
            result.rows.append((path, tokens, dim, trial, nanos,
                                counter.total))
    if display:
        report.progress_bar("{}: done".format(path), replace=False)
    return result
