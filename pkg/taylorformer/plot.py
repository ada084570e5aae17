"Module for generating plots."

from __future__ import absolute_import
import os

try:
    import matplotlib as mpl
    if "DISPLAY" not in os.environ:
        mpl.use("agg")
    import matplotlib.pyplot as plt
    plt.rcParams.update({'figure.max_open_warning': 0})
    MATPLOTLIB = True
except ImportError:
    MATPLOTLIB = False

SCALING_PLOT_FILE = "scaling.png"
SCALING_PLOT_SVG = "scaling.svg"
LOSS_PLOT_FILE = "loss.png"
LOSS_PLOT_SVG = "loss.svg"
PPI = 300
MARKERS = {"linear": "o", "quadratic_taylor": "s", "softmax": "^"}


def _save(dir_out, png_filename, svg_filename):
    png_path = os.path.join(dir_out, png_filename)
    plt.savefig(png_path, dpi=PPI)
    plt.savefig(os.path.join(dir_out, svg_filename), format="svg")
    plt.close()
    return png_path


def scaling_plot(results, dir_out):
    """
    Takes a list of ScalingResult objects and draws the median wall time of
    every attention path against the token count, on log-log axes. Returns
    the path to the PNG file, or None without Matplotlib.
    """
    if not MATPLOTLIB or not results:
        return None
    plt.figure()
    for result in results:
        ns = result.ns
        plt.loglog(ns, [result.median_nanos(tokens) for tokens in ns],
                   marker=MARKERS.get(result.path, "."),
                   label="{} (slope {:.2f})".format(result.path,
                                                    result.slope))
    plt.xlabel("tokens N")
    plt.ylabel("median wall time (ns)")
    plt.title("Attention scaling, D = {}".format(results[0].dim))
    plt.legend(loc="upper left", fontsize=8)
    plt.grid(True, which="both", alpha=0.3)
    return _save(dir_out, SCALING_PLOT_FILE, SCALING_PLOT_SVG)


def loss_plot(log, dir_out):
    "Draw the training loss of a TrainLog against the step."
    if not MATPLOTLIB or not log.steps:
        return None
    plt.figure()
    plt.plot([row[0] for row in log.steps], log.losses, color="black",
             linewidth=0.8)
    plt.xlabel("step")
    plt.ylabel("L1 loss")
    plt.title("Training loss")
    return _save(dir_out, LOSS_PLOT_FILE, LOSS_PLOT_SVG)
