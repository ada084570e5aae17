#!/usr/bin/env python

"""
A desk-scale implementation of the multi-branch Taylor Transformer for image
dehazing: linear-time Taylor-expanded attention, multi-scale deformable patch
embedding, a cost model and a toy training harness.
"""

from __future__ import print_function
from __future__ import absolute_import
import argparse
import datetime
import os
import shutil
import sys
import time
from multiprocessing import cpu_count

from . import report
from . import settings
from .errors import TaylorFormerError

OUTPUT_DIR = "taylorformer_output"
LOG_PATH = "taylorformer.log"
BENCH_PATH = "bench.csv"
BENCH_SUMMARY_PATH = "bench_summary.csv"
COSTS_PATH = "costs.csv"
CONFIG_PATH = "config.json"
WEIGHTS_PATH = "weights.bin"
THREAD_VARIABLES = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS")
MAX_THREADS = 10
TIMESTAMP = datetime.datetime.now().strftime("%A, %d. %B %Y %I:%M%p")
PRESET_NAMES = ("tiny", "micro")
NO_DATA = """You did not specify any training data. Use the flag '--data',
followed by the path to a directory, to point to a directory with
<name>_clean.ppm and <name>_hazy.ppm image pairs. The 'synth-data' command
renders such a directory."""
with open(os.path.join(os.path.dirname(__file__), "VERSION")) as version_file:
    version = version_file.read().strip()
ABOUT = report.underline("TaylorFormer version {}".format(version))
ABOUT_LOG = "TaylorFormer version {}\n{}\n{}".format(
    version, TIMESTAMP, "-" * len(TIMESTAMP))
# commands that collect their results in the output directory
WRITES_OUTPUT = {"bench", "gradcheck", "equivalence", "costs", "train",
                 "ablation"}
# commands that train or load weights run in f32, the precision of weight files
SINGLE_PRECISION = {"train", "dehaze", "ablation"}


def _positive(name, flag, value):
    if value is not None and value < 1:
        report.error("{} ('{}') has to be a positive integer (1, 2, 3, ...)"
                     .format(name, flag))
        return True
    return False


def _missing(path, what):
    if path and not os.path.exists(path):
        report.error("{} {} does not exist".format(what, path))
        return True
    return False


def _validate_arguments(args):
    "Performs a series of checks to validate the input before execution."
    errors = False

    errors |= _positive("threads", "--threads", args.threads)

    if args.seed < 0:
        report.error("the seed ('--seed') has to be a non-negative integer")
        errors = True

    if args.config not in PRESET_NAMES and not os.path.isfile(args.config):
        report.error("the network configuration ('--config') has to be one "
                     "of {} or the path to a JSON file, got '{}'".format(
                         ", ".join(PRESET_NAMES), args.config))
        errors = True

    if args.out and os.path.isfile(args.out):
        report.error("output path {} is a file".format(args.out))
        errors = True

    if args.command == "bench":
        if args.trials < 3:
            report.error("the number of trials ('--trials') has to be at "
                         "least 3")
            errors = True
        if any(tokens < 1 for tokens in args.ns) or \
           sorted(set(args.ns)) != list(args.ns):
            report.error("token counts ('--ns') have to be positive and "
                         "ascending")
            errors = True
        errors |= _positive("dimension", "--dim", args.dim)

    if args.command == "gradcheck":
        errors |= _positive("samples", "--samples", args.samples)

    if args.command == "costs":
        if min(args.size) < 1:
            report.error("image size ('--size') has to be positive")
            errors = True

    if args.command == "synth-data":
        errors |= _positive("number of pairs", "--count", args.count)
        errors |= _positive("image size", "--size", args.size)
        if args.transmission is not None and \
           not 0 < args.transmission <= 1:
            report.error("transmission ('--transmission') has to lie in "
                         "(0, 1]")
            errors = True

    if args.command in ("train", "ablation"):
        if not args.data:
            report.error(NO_DATA)
            errors = True
        errors |= _missing(args.data, "input directory")
        errors |= _missing(args.eval_data, "evaluation directory")
        for name, flag, value in (("iterations", "--iterations",
                                   args.iterations),
                                  ("batch size", "--batch-size",
                                   args.batch_size),
                                  ("crop size", "--crop-size",
                                   args.crop_size)):
            errors |= _positive(name, flag, value)

    if args.command == "ablation" and not args.eval_data:
        report.error("the ablation compares held-out PSNR, use '--eval-data' "
                     "to point to a directory of held-out pairs")
        errors = True

    if args.command == "dehaze":
        errors |= _missing(args.weights, "weight file")
        errors |= _missing(args.input, "image")

    if args.command == "metrics":
        errors |= _missing(args.first, "image")
        errors |= _missing(args.second, "image")

    if errors:
        sys.exit(1)


def _pin_threads(threads):
    """Limit the thread pools of the linear algebra libraries. Has to run
    before numpy is imported."""
    if threads:
        for variable in THREAD_VARIABLES:
            os.environ[variable] = str(threads)


def _thread_count(threads):
    "Processes to use, capped at the number of available CPUs."
    available = cpu_count()
    if threads:
        return threads if threads <= available else available
    return available if available <= MAX_THREADS else MAX_THREADS


def _network_config(args):
    from .backbone import NetworkConfig
    if args.config in PRESET_NAMES:
        return NetworkConfig.preset(args.config)
    return NetworkConfig.load(args.config)


def _output_directory(args):
    "Create a fresh output directory and return its path."
    dir_out = os.path.join(args.out or ".", OUTPUT_DIR)
    if not args.overwrite and os.path.isdir(dir_out):
        if not report.yes_or_no(report.warning("found files from a previous \
run, overwrite these files?", display=False)):
            sys.exit()
    if os.path.isdir(dir_out):
        # this removes the old 'taylorformer_output' directory
        shutil.rmtree(dir_out)
    os.makedirs(dir_out)
    with open(os.path.join(dir_out, LOG_PATH), "w") as log_file:
        log_file.write(ABOUT_LOG + "\n")
    return dir_out


def _log(dir_out, text):
    "Append text, without terminal escapes, to the log of this run."
    if dir_out:
        with open(os.path.join(dir_out, LOG_PATH), "a") as log_file:
            log_file.write(report.plain(text) + "\n")


def _train_spec(args, parameters):
    from .train import TrainSpec
    return TrainSpec(seed=args.seed, eval_every=args.eval_every,
                     checkpoint_every=args.checkpoint_every,
                     **parameters.train_overrides())


def _load_pairs(directory, display=True):
    from . import imageio
    pairs = imageio.pairs_from_directory(directory)
    if not pairs:
        raise TaylorFormerError("no image pairs were found in {}".format(
            directory))
    if display:
        report.progress_bar("reading {} image pairs from {}".format(
            len(pairs), directory), replace=False)
    return imageio.read_pairs(pairs)


def bench(args, parameters, dir_out):
    "Time the attention paths over a sweep of token counts."
    import numpy as np
    from . import costmodel
    from . import plot
    rng = np.random.default_rng(args.seed)
    results = []
    for index, path in enumerate(args.paths):
        result = costmodel.scaling_experiment(path, args.ns, args.dim,
                                              args.trials, args.warmup, rng,
                                              display=True)
        result.to_csv(os.path.join(dir_out, BENCH_PATH), header=index == 0)
        result.summary_to_csv(os.path.join(dir_out, BENCH_SUMMARY_PATH),
                              header=index == 0)
        results.append(result)
    lines = ["{:<18} {:>8}  {:>12}".format("path", "slope", "expected")]
    passed = True
    for result in results:
        low, high = costmodel.SLOPE_RANGES[result.path]
        lines.append("{:<18} {:>8.3f}  {:>5.1f} - {:<4.1f} {}".format(
            result.path, result.slope, low, high,
            report.verdict(result.slope_in_range)))
        passed = passed and result.slope_in_range
    table = "\n".join(lines)
    print(table)
    _log(dir_out, table)
    if parameters.plot:
        path = plot.scaling_plot(results, dir_out)
        if path:
            report.progress_bar("wrote plot to:\n  {}".format(path),
                                replace=False)
        else:
            report.tip("install Matplotlib (https://matplotlib.org/) to plot "
                       "the scaling curves")
    return 0 if passed else 1


def gradcheck(args, parameters, dir_out):
    "Run the finite-difference gradient checks."
    import numpy as np
    from . import suites
    results = suites.gradient_suite(np.random.default_rng(args.seed),
                                    args.samples, args.suite, display=True)
    print("", file=sys.stderr)
    table = "\n".join(result.to_str() for result in results)
    failed = [result for result in results if not result.passed]
    summary = "{} of {} gradient checks passed".format(
        len(results) - len(failed), len(results))
    print(table)
    print(summary)
    _log(dir_out, table + "\n" + summary)
    return 1 if failed else 0


def equivalence(args, parameters, dir_out):
    "Compare the linear attention path with its oracles."
    import numpy as np
    from . import attention
    from . import suites
    result = suites.equivalence_suite(args.ns, args.dims, args.trials,
                                      np.random.default_rng(args.seed),
                                      display=True)
    print("", file=sys.stderr)
    lines = [result.to_str(), "",
             "{:>8} {:>10} {:>10} {:>12} {:>10} {:>10}".format(
                 "x", "e^x", "1+x", "1+x+x^2/2", "ratio 1", "ratio 2")]
    for row in attention.approximation_table():
        lines.append("{:>8.4f} {:>10.6f} {:>10.6f} {:>12.6f} {:>10.6f} "
                     "{:>10.6f}".format(*row))
    text = "\n".join(lines)
    print(text)
    _log(dir_out, text)
    return 0 if result.passed else 1


def costs(args, parameters, dir_out):
    "Print the per-part cost report of a network."
    import numpy as np
    from . import backbone
    config = _network_config(args)
    height, width = args.size
    if args.measure:
        network = backbone.Network(config, np.random.default_rng(args.seed))
        report.progress_bar("running an instrumented forward pass")
        result = backbone.measure_costs(network, height, width,
                                        np.random.default_rng(args.seed))
        print("", file=sys.stderr)
    else:
        result = backbone.count_costs(config, height, width)
    result.to_csv(os.path.join(dir_out, COSTS_PATH))
    table = result.to_str()
    print(table)
    _log(dir_out, table)
    mismatches = result.mismatches()
    for entry in mismatches:
        report.error("{}: measured {:,} multiplies, expected {:,}".format(
            entry.name, entry.instrumented_macs, entry.analytic_macs))
    return 1 if mismatches else 0


def synth_data(args, parameters, dir_out):
    "Render clean/hazy image pairs."
    from . import haze
    pairs = haze.synthesize_dataset(args.directory, args.count, args.size,
                                    args.seed, _thread_count(args.threads),
                                    args.transmission, display=True)
    report.progress_bar("wrote {} image pairs to:\n  {}".format(
        len(pairs), args.directory), replace=False)
    return 0


def train(args, parameters, dir_out):
    "Train a network on a directory of image pairs."
    import numpy as np
    from . import checkpoint
    from . import plot
    from . import tensor
    from . import train as training
    from .backbone import Network
    from .log import TrainLog
    config = _network_config(args)
    spec = _train_spec(args, parameters)
    pairs = _load_pairs(args.data)
    eval_pairs = _load_pairs(args.eval_data) if args.eval_data else None
    network = Network(config, np.random.default_rng(args.seed))
    if args.weights:
        checkpoint.load_weights(args.weights, network)
    config.save(os.path.join(dir_out, CONFIG_PATH))
    log = TrainLog(spec, tensor.get_precision(), version, args.seed)
    training.train(network, pairs, spec, np.random.default_rng(args.seed),
                   log, eval_pairs, dir_out, display=True)
    weights_path = os.path.join(dir_out, WEIGHTS_PATH)
    checkpoint.save_weights(weights_path, network)
    log.checkpoints.append(weights_path)
    train_psnr, hazy_psnr, train_ssim = training.evaluate(network, pairs)
    summary = log.report(dir_out)
    scores = "training set: PSNR {:.3f} dB (hazy {:.3f} dB, gain {:+.3f} " \
        "dB), SSIM {:.4f}".format(train_psnr, hazy_psnr,
                                  train_psnr - hazy_psnr, train_ssim)
    _log(dir_out, scores)
    print(summary)
    print(scores)
    if parameters.plot:
        plot.loss_plot(log, dir_out)
    report.progress_bar("wrote output to:\n  {}".format(
        report.print_path(dir_out, display=False)), replace=False)
    return 0


def dehaze(args, parameters, dir_out):
    "Restore an image with trained weights."
    import numpy as np
    from . import checkpoint
    from . import imageio
    from . import train as training
    from .backbone import Network
    network = Network(_network_config(args),
                      np.random.default_rng(args.seed))
    checkpoint.load_weights(args.weights, network)
    restored = training.dehaze(network, imageio.read_image(args.input))
    imageio.write_image(args.output, restored)
    report.progress_bar("wrote dehazed image to:\n  {}".format(args.output),
                        replace=False)
    return 0


def metrics(args, parameters, dir_out):
    "Print PSNR and SSIM between two images."
    from . import imageio
    from . import metrics as quality
    first = imageio.read_image(args.first)
    second = imageio.read_image(args.second)
    print("PSNR: {:.4f} dB".format(quality.psnr(first, second)))
    print("SSIM: {:.6f}".format(quality.ssim(first, second)))
    return 0


def ablation(args, parameters, dir_out):
    "Train with and without the MSAR gate over several seeds."
    from . import train as training
    config = _network_config(args)
    spec = _train_spec(args, parameters)
    pairs = _load_pairs(args.data)
    eval_pairs = _load_pairs(args.eval_data)
    result = training.ablation(pairs, eval_pairs, spec, config, args.seeds,
                               display=True)
    text = result.to_str()
    print(text)
    _log(dir_out, text)
    return 0


COMMANDS = {"bench": bench, "gradcheck": gradcheck,
            "equivalence": equivalence, "costs": costs,
            "synth-data": synth_data, "train": train, "dehaze": dehaze,
            "metrics": metrics, "ablation": ablation}


def _common_parser():
    "Flags shared by every command."
    common = argparse.ArgumentParser(add_help=False)
    group = common.add_argument_group("common options")
    group.add_argument("--config",
                       metavar="<file>",
                       default="tiny",
                       help="network preset ('tiny' or 'micro') or the path \
                             to a JSON network configuration")
    group.add_argument("--seed",
                       metavar="<number>",
                       default=0,
                       type=int,
                       help="seed every random draw with <number>")
    group.add_argument("--out",
                       metavar="<directory>",
                       default=None,
                       help="save output files to <directory>/" + OUTPUT_DIR +
                       ", instead of the current directory")
    group.add_argument("--precision",
                       choices=("f32", "f64"),
                       default=None,
                       help="floating point precision of the tensors; f32 \
                             for train, dehaze and ablation and f64 otherwise")
    group.add_argument("--threads",
                       metavar="<number>",
                       default=None,
                       type=int,
                       help="use <number> threads instead of up to 10 threads")
    group.add_argument("--overwrite",
                       default=False,
                       action="store_true",
                       help="overwrite pre-existing output files without\
                             asking")
    group.add_argument("--no-plot",
                       default=False,
                       action="store_true",
                       help="do not draw any plots")
    return common


def _training_parser():
    "Flags of the commands that train networks."
    training = argparse.ArgumentParser(add_help=False)
    group = training.add_argument_group("training")
    group.add_argument("--data",
                       metavar="<directory>",
                       default=None,
                       help="a <directory> containing clean/hazy image pairs")
    group.add_argument("--eval-data",
                       metavar="<directory>",
                       default=None,
                       help="a <directory> of held-out image pairs")
    group.add_argument("--iterations",
                       metavar="<number>",
                       type=int,
                       default=None,
                       help="optimizer steps (default: 2000)")
    group.add_argument("--batch-size",
                       metavar="<number>",
                       type=int,
                       default=None,
                       help="crops per step (default: 8)")
    group.add_argument("--crop-size",
                       metavar="<number>",
                       type=int,
                       default=None,
                       help="side length of the random crops (default: 64)")
    group.add_argument("--lr-max",
                       metavar="<rate>",
                       type=float,
                       default=None,
                       help="initial learning rate (default: 2e-4)")
    group.add_argument("--lr-min",
                       metavar="<rate>",
                       type=float,
                       default=None,
                       help="final learning rate (default: 1e-6)")
    group.add_argument("--eval-every",
                       metavar="<number>",
                       type=int,
                       default=0,
                       help="evaluate on the held-out pairs every <number> \
                             steps")
    group.add_argument("--checkpoint-every",
                       metavar="<number>",
                       type=int,
                       default=0,
                       help="write the weights every <number> steps")
    return training


def parse_args(argv=None):
    "Parse the arguments provided by the user."
    argv = sys.argv[1:] if argv is None else argv
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("-v", "-V", "--version",
                        action="version",
                        version=str(version),
                        help="display the version number and exit")
    commands = parser.add_subparsers(dest="command", metavar="<command>")
    common = _common_parser()
    training = _training_parser()

    command = commands.add_parser(
        "bench", parents=[common],
        help="time the attention paths over a sweep of token counts")
    command.add_argument("--paths",
                         nargs="+",
                         metavar="<path>",
                         choices=("linear", "quadratic_taylor", "softmax"),
                         default=["linear", "quadratic_taylor", "softmax"],
                         help="attention paths to time")
    command.add_argument("--ns",
                         nargs="+",
                         metavar="<number>",
                         type=int,
                         default=[4096, 8192, 16384, 32768, 65536],
                         help="ascending token counts")
    command.add_argument("--dim",
                         metavar="<number>",
                         type=int,
                         default=16,
                         help="channels per token")
    command.add_argument("--trials",
                         metavar="<number>",
                         type=int,
                         default=5,
                         help="timed repetitions per token count")
    command.add_argument("--warmup",
                         metavar="<number>",
                         type=int,
                         default=2,
                         help="untimed repetitions per token count")

    command = commands.add_parser(
        "gradcheck", parents=[common],
        help="check every gradient against finite differences")
    command.add_argument("--samples",
                         metavar="<number>",
                         type=int,
                         default=20,
                         help="coordinates checked per input")
    command.add_argument("--suite",
                         nargs="+",
                         metavar="<suite>",
                         choices=("tensor", "shapes", "convolutions",
                                  "attention", "embedding", "backbone"),
                         default=None,
                         help="only run these suites")

    command = commands.add_parser(
        "equivalence", parents=[common],
        help="compare linear attention with the quadratic and softmax paths")
    command.add_argument("--ns",
                         nargs="+",
                         metavar="<number>",
                         type=int,
                         default=[1, 2, 7, 64, 256, 1024],
                         help="token counts")
    command.add_argument("--dims",
                         nargs="+",
                         metavar="<number>",
                         type=int,
                         default=[4, 16, 64],
                         help="channels per token")
    command.add_argument("--trials",
                         metavar="<number>",
                         type=int,
                         default=100,
                         help="random trials of the softmax approximation")

    command = commands.add_parser(
        "costs", parents=[common],
        help="print the multiplies and parameters of every part of a network")
    command.add_argument("--size",
                         nargs=2,
                         metavar="<number>",
                         type=int,
                         default=[64, 64],
                         help="image height and width")
    command.add_argument("--measure",
                         default=False,
                         action="store_true",
                         help="also count the multiplies of a forward pass")

    command = commands.add_parser(
        "synth-data", parents=[common],
        help="render clean/hazy image pairs from procedural scenes")
    command.add_argument("directory",
                         metavar="<directory>",
                         help="write the image pairs to <directory>")
    command.add_argument("--count",
                         metavar="<number>",
                         type=int,
                         default=200,
                         help="number of image pairs")
    command.add_argument("--size",
                         metavar="<number>",
                         type=int,
                         default=64,
                         help="side length of the images")
    command.add_argument("--transmission",
                         metavar="<t>",
                         type=float,
                         default=None,
                         help="use the fixed transmission <t> instead of one \
                               derived from the scene depth")

    command = commands.add_parser(
        "train", parents=[common, training],
        help="train a network on clean/hazy image pairs")
    command.add_argument("--weights",
                         metavar="<file>",
                         default=None,
                         help="start from the weights in <file>")

    command = commands.add_parser(
        "ablation", parents=[common, training],
        help="train with and without the attention gate over several seeds")
    command.add_argument("--seeds",
                         nargs="+",
                         metavar="<number>",
                         type=int,
                         default=[0, 1, 2],
                         help="seeds to train with")

    command = commands.add_parser(
        "dehaze", parents=[common],
        help="restore an image with trained weights")
    command.add_argument("--weights",
                         metavar="<file>",
                         required=True,
                         help="weight file written by 'train'")
    command.add_argument("input",
                         metavar="<input>",
                         help="hazy image (.ppm or .png)")
    command.add_argument("output",
                         metavar="<output>",
                         help="write the restored image to <output>")

    command = commands.add_parser(
        "metrics", parents=[common],
        help="PSNR and SSIM between two images")
    command.add_argument("first",
                         metavar="<image>",
                         help="first image")
    command.add_argument("second",
                         metavar="<image>",
                         help="second image")

    args = parser.parse_args(args=argv if argv else ["--help"])
    if args.command is None:
        parser.print_help()
        sys.exit(1)
    if args.precision is None:
        args.precision = "f32" if args.command in SINGLE_PRECISION else "f64"
    return args


def main(argv=None):
    "Parse args and run the requested command."
    start_time = time.time()
    args = parse_args(argv)
    _pin_threads(args.threads)
    print(ABOUT, file=sys.stderr)
    _validate_arguments(args)
    parameters = settings.Settings(args)

    from . import tensor
    tensor.set_precision(args.precision)
    dir_out = None
    try:
        if args.command in WRITES_OUTPUT:
            dir_out = _output_directory(args)
        status = COMMANDS[args.command](args, parameters, dir_out)
    except TaylorFormerError as error:
        report.error(str(error))
        sys.exit(1)
    except KeyboardInterrupt:
        report.error("interrupted")
        sys.exit(130)

    print("", file=sys.stderr)
    parameters.print_settings()
    run_time = "\ncompleted in {} seconds".format(
        round(time.time() - start_time, 2))
    print(run_time, file=sys.stderr)
    if dir_out:
        _log(dir_out, "\n" + parameters.to_str() +
             "\n\nReuse these parameters:\n" + " ".join(sys.argv) + "\n" +
             run_time)
    return status


def entry():
    "Entry point for command-line script"
    sys.exit(main())


if __name__ == "__main__":
    sys.path.insert(0, os.path.abspath('..'))
    entry()
