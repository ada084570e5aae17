"""
Check suites shared by the command line and the test-suite: central
finite-difference gradient checks over every operation and module, and the
oracle comparisons between the linear, quadratic and softmax attention
paths.
"""

from __future__ import absolute_import
from __future__ import division

import numpy as np

from . import attention
from . import backbone
from . import embedding
from . import report
from . import tensor
from .errors import ConfigurationError
from .layers import Parameter

GRAD_TOLERANCE = 1e-4
REL_FLOOR = 1e-6
STEP = 1e-5
ORACLE_TOLERANCE = 1e-10
DEVIATION_LIMIT = 0.035
ORACLE_TOKENS = (1, 2, 7, 64, 256, 1024)
ORACLE_DIMS = (4, 16, 64)


def relative_error(analytic, numeric, floor=REL_FLOOR):
    "|a - n| / max(|a|, |n|, floor)"
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


class GradcheckResult(object):
    """
    Analytic and numeric partial derivatives of one checked function at a
    sample of coordinates.
    """
    def __init__(self, name, tolerance=GRAD_TOLERANCE):
        self.name = name
        self.tolerance = tolerance
        self.checks = []

    def add(self, input_name, index, analytic, numeric):
        self.checks.append((input_name, index, float(analytic),
                            float(numeric)))

    @property
    def errors(self):
        return [relative_error(analytic, numeric)
                for _, _, analytic, numeric in self.checks]

    @property
    def max_error(self):
        errors = self.errors
        return max(errors) if errors else 0.0

    @property
    def passed(self):
        return bool(self.checks) and self.max_error < self.tolerance

    def worst(self):
        "The check with the largest relative error, or None."
        if not self.checks:
            return None
        return self.checks[int(np.argmax(self.errors))]

    def to_str(self):
        line = "{:<40} {:>6} checks  max rel. error {:.2e}  {}".format(
            self.name, len(self.checks), self.max_error,
            report.verdict(self.passed))
        if not self.passed and self.checks:
            input_name, index, analytic, numeric = self.worst()
            line += "\n    worst: {}{} analytic {:.6e} numeric {:.6e}".format(
                input_name, list(index), analytic, numeric)
        return line


def gradcheck(name, fn, inputs, samples=20, step=STEP, rng=None,
              tolerance=GRAD_TOLERANCE):
    """Compare the taped gradient of fn with central differences.

    The checked scalar is sum(fn() * R) for a fixed random R, so every
    output element takes part.

    Parameters
    ----------
    name : str
        Reported name of the check.

    fn : callable
        Takes no arguments and computes a Tensor from the inputs.

    inputs : list
        (name, Tensor) pairs; every tensor has to require a gradient and
        hold 64-bit values.

    samples : int
        Coordinates checked per input, drawn without replacement.

    Returns
    -------
    result : GradcheckResult
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    for input_name, value in inputs:
        if not value.requires_grad:
            raise ConfigurationError("'{}' does not require a gradient"
                                     .format(input_name))
        if value.dtype != np.float64:
            raise ConfigurationError("gradient checks need 64-bit values, "
                                     "'{}' holds {}".format(input_name,
                                                            value.dtype))
        value.grad = None
    with tensor.Tape() as tape:
        out = fn()
        weights = rng.standard_normal(out.shape)
        tape.backward(tensor.sum(out * weights))
    analytic = [np.zeros(value.shape) if value.grad is None else
                np.array(value.grad) for _, value in inputs]

    def loss():
        return float(np.sum(fn().data * weights))

    result = GradcheckResult(name, tolerance)
    for (input_name, value), grad in zip(inputs, analytic):
        picks = rng.choice(value.size, min(samples, value.size),
                           replace=False)
        for flat in picks:
            index = np.unravel_index(flat, value.shape)
            original = value.data[index]
            value.data[index] = original + step
            plus = loss()
            value.data[index] = original - step
            minus = loss()
            value.data[index] = original
            result.add(input_name, index, grad[index],
                       (plus - minus) / (2 * step))
        value.grad = None
    return result


def _leaf(rng, shape, low=-1.0, high=1.0, name="x"):
    return tensor.Tensor(rng.uniform(low, high, shape), requires_grad=True,
                         name=name)


def _away_from_zero(rng, shape, name="x"):
    "Values with |x| in [0.1, 1], away from kinks at zero."
    magnitude = rng.uniform(0.1, 1.0, shape)
    sign = np.where(rng.uniform(size=shape) < 0.5, -1.0, 1.0)
    return tensor.Tensor(magnitude * sign, requires_grad=True, name=name)


def perturb_offsets(module, rng, scale=0.3):
    """Give every DSDCN offset predictor below module random weights, so the
    sampling positions leave the integer lattice."""
    layers = []
    if isinstance(module, embedding.DsdcnLayer):
        layers = [module]
    elif isinstance(module, embedding.PatchEmbed):
        layers = [layer for stack in module.branches for layer in stack]
    elif isinstance(module, backbone.MultiBranchBlock):
        layers = [layer for stack in module.embed.branches for layer in stack]
    elif isinstance(module, backbone.Network):
        layers = [layer for _, block, _ in module.blocks()
                  for stack in block.embed.branches for layer in stack]
    for layer in layers:
        weight = layer.offset_pwconv.weight
        weight.data = rng.uniform(-scale, scale, weight.shape)
    return module


def _with_parameters(module, inputs, rng=None, limit=None):
    """inputs followed by the named parameters of module; with a limit, a
    random subset of that many parameters."""
    parameters = list(module.named_parameters())
    if limit is not None and len(parameters) > limit:
        picks = sorted(rng.choice(len(parameters), limit, replace=False))
        parameters = [parameters[pick] for pick in picks]
    return list(inputs) + parameters


def _elementwise_cases(rng):
    cases = []
    for op in sorted(tensor.ELEMENTWISE):
        if op in ("log", "sqrt"):
            a = _leaf(rng, (3, 4), 0.5, 2.0, "a")
            cases.append((op, lambda op=op, a=a: tensor.elementwise(op, a),
                          [("a", a)]))
        elif op in ("add", "sub", "mul"):
            a = _leaf(rng, (3, 4), name="a")
            b = _leaf(rng, (1, 4), name="b")
            cases.append((op, lambda op=op, a=a, b=b:
                          tensor.elementwise(op, a, b), [("a", a), ("b", b)]))
        elif op == "div":
            a = _leaf(rng, (3, 4), name="a")
            b = _leaf(rng, (3, 4), 0.5, 2.0, "b")
            cases.append((op, lambda a=a, b=b: tensor.div(a, b),
                          [("a", a), ("b", b)]))
        elif op == "prelu":
            a = _away_from_zero(rng, (2, 3, 4), "a")
            alpha = Parameter(np.full(1, 0.25))
            cases.append((op, lambda a=a, alpha=alpha: tensor.prelu(a, alpha),
                          [("a", a), ("alpha", alpha)]))
        elif op == "hardswish":
            a = tensor.Tensor(rng.uniform(-2.9, 2.9, (3, 4)),
                              requires_grad=True)
            cases.append((op, lambda a=a: tensor.hardswish(a), [("a", a)]))
        elif op in ("relu", "leaky_relu"):
            a = _away_from_zero(rng, (3, 4), "a")
            cases.append((op, lambda op=op, a=a: tensor.elementwise(op, a),
                          [("a", a)]))
        else:
            a = _leaf(rng, (3, 4), name="a")
            cases.append((op, lambda op=op, a=a: tensor.elementwise(op, a),
                          [("a", a)]))
    a = _away_from_zero(rng, (3, 4), "a")
    cases.append(("absolute", lambda: tensor.absolute(a), [("a", a)]))
    b = _leaf(rng, (3, 4), 0.5, 2.0, "b")
    cases.append(("power", lambda: tensor.power(b, 3), [("b", b)]))
    c = tensor.Tensor(np.concatenate([rng.uniform(-0.9, 0.9, 6),
                                      rng.uniform(1.1, 2.0, 3),
                                      rng.uniform(-2.0, -1.1, 3)]).reshape(
                                          3, 4), requires_grad=True)
    cases.append(("clamp", lambda: tensor.clamp(c, -1.0, 1.0), [("c", c)]))
    return cases


def _shape_cases(rng):
    x = _leaf(rng, (2, 3, 4))
    y = _leaf(rng, (2, 4, 5), name="y")
    z = _leaf(rng, (2, 3, 4), name="z")
    return [
        ("sum", lambda: tensor.sum(x, axis=(0, 2), keepdims=True),
         [("x", x)]),
        ("mean", lambda: tensor.mean(x, axis=-1), [("x", x)]),
        ("reshape", lambda: tensor.reshape(x, (6, 4)), [("x", x)]),
        ("transpose", lambda: tensor.transpose(x, (2, 0, 1)), [("x", x)]),
        ("broadcast_to", lambda: tensor.broadcast_to(x[:, :1], (2, 3, 4)),
         [("x", x)]),
        ("getitem", lambda: x[:, 1:, ::2], [("x", x)]),
        ("getitem (fancy)", lambda: tensor.getitem(x, (slice(None),
                                                       [0, 2, 2])),
         [("x", x)]),
        ("concat", lambda: tensor.concat([x, z], axis=1),
         [("x", x), ("z", z)]),
        ("stack", lambda: tensor.stack([x, z], axis=-1),
         [("x", x), ("z", z)]),
        ("rearrange", lambda: tensor.rearrange(x, "b c w -> (w b) c"),
         [("x", x)]),
        ("softmax", lambda: tensor.softmax(x, axis=1), [("x", x)]),
        ("matmul", lambda: tensor.matmul(x, y), [("x", x), ("y", y)]),
    ]


def _convolution_cases(rng):
    x = _leaf(rng, (2, 4, 6, 5))
    dense = _leaf(rng, (6, 4, 3, 3), name="weight")
    bias = _leaf(rng, (6,), name="bias")
    grouped = _leaf(rng, (4, 2, 3, 3), name="weight")
    depthwise = _leaf(rng, (4, 1, 3, 3), name="weight")
    pointwise = _leaf(rng, (3, 4, 1, 1), name="weight")
    offsets = tensor.Tensor(rng.uniform(-1.4, 1.4, (2, 18, 6, 5)) + 0.05,
                            requires_grad=True)
    windows = _leaf(rng, (2, 4, 9, 6, 5), name="cols")
    return [
        ("conv2d", lambda: tensor.conv2d(x, dense, bias, padding=1),
         [("x", x), ("weight", dense), ("bias", bias)]),
        ("conv2d (strided)", lambda: tensor.conv2d(x, dense, stride=2),
         [("x", x), ("weight", dense)]),
        ("conv2d (grouped)", lambda: tensor.conv2d(x, grouped, padding=1,
                                                   groups=2),
         [("x", x), ("weight", grouped)]),
        ("conv2d (depthwise)", lambda: tensor.conv2d(x, depthwise, padding=1,
                                                     groups=4),
         [("x", x), ("weight", depthwise)]),
        ("conv2d (pointwise)", lambda: tensor.conv2d(x, pointwise),
         [("x", x), ("weight", pointwise)]),
        ("deform_sample", lambda: tensor.deform_sample(x, offsets, 3),
         [("x", x), ("offsets", offsets)]),
        ("depthwise_apply", lambda: tensor.depthwise_apply(windows,
                                                           depthwise),
         [("cols", windows), ("weight", depthwise)]),
    ]


def _attention_cases(rng):
    tokens = 12
    raw_q = _leaf(rng, (2, 4, tokens), name="q")
    raw_k = _leaf(rng, (2, 4, tokens), name="k")
    v = _leaf(rng, (2, 3, tokens), name="v")
    square_v = _leaf(rng, (2, 4, tokens), name="v")

    def normalized():
        return (attention.normalize_qk(raw_q), attention.normalize_qk(raw_k))

    qkv = [("q", raw_q), ("k", raw_k), ("v", v)]
    cases = [
        ("normalize_qk", lambda: attention.normalize_qk(raw_q, 0.7),
         [("q", raw_q)]),
        ("taylor_attention_linear",
         lambda: attention.taylor_attention_linear(*(normalized() + (v,))),
         qkv),
        ("taylor_attention_quadratic (order 1)",
         lambda: attention.taylor_attention_quadratic(
             *(normalized() + (v,))), qkv),
        ("taylor_attention_quadratic (order 2)",
         lambda: attention.taylor_attention_quadratic(
             *(normalized() + (v,)), order=2), qkv),
        ("softmax_attention",
         lambda: attention.softmax_attention(*(normalized() + (v,))), qkv),
    ]

    config = attention.AttentionConfig(4, heads=2)
    weights = attention.AttentionWeights(config, attention.MsarConfig((3, 5)),
                                         rng)
    q = _leaf(rng, (2, 2, tokens), name="q")
    k = _leaf(rng, (2, 2, tokens), name="k")
    cases.append(("msar_gate", lambda: attention.msar_gate(
        attention.normalize_qk(q), attention.normalize_qk(k), weights, 3, 4),
        [("q", q), ("k", k)] + [(name, value) for name, value in
                                weights.named_parameters()
                                if name.startswith("gate.")]))
    x = _leaf(rng, (4, 3, 4))
    cases.append(("tmsa_block", lambda: attention.tmsa_block(x, weights),
                  _with_parameters(weights, [("x", x)])))
    cases.append(("tmsa_block (identity gate)",
                  lambda: attention.tmsa_block(x, weights, gate="identity"),
                  [("x", x)]))
    ffn = attention.FeedForwardWeights(4, 2, rng)
    cases.append(("feedforward", lambda: attention.feedforward(x, ffn),
                  _with_parameters(ffn, [("x", x)])))
    block = attention.TransformerBlock(4, 1, rng)
    batch = _leaf(rng, (2, 4, 3, 4))
    cases.append(("TransformerBlock", lambda: block(batch),
                  _with_parameters(block, [("x", batch)])))
    cases.append(("taylor_attention_linear (square)",
                  lambda: attention.taylor_attention_linear(
                      *(normalized() + (square_v,))),
                  [("q", raw_q), ("k", raw_k), ("v", square_v)]))
    return cases


def _embedding_cases(rng):
    layer = perturb_offsets(embedding.DsdcnLayer(3, 5, rng=rng), rng)
    x = _leaf(rng, (3, 6, 7))
    embed = perturb_offsets(embedding.PatchEmbed(
        3, embedding.PatchEmbedConfig((1, 2)), rng), rng)
    wide = _leaf(rng, (2, 8, 4, 6))
    return [
        ("dsdcn_forward", lambda: embedding.dsdcn_forward(x, layer),
         _with_parameters(layer, [("x", x)])),
        ("separable_forward", lambda: embedding.separable_forward(x, layer),
         [("x", x), ("weight", layer.weight)]),
        ("multi_scale_embed", lambda: tensor.concat(
            embedding.multi_scale_embed(x, embed), axis=0),
         _with_parameters(embed, [("x", x)])),
        ("pixel_unshuffle", lambda: embedding.pixel_unshuffle(wide),
         [("x", wide)]),
        ("pixel_shuffle", lambda: embedding.pixel_shuffle(wide),
         [("x", wide)]),
    ]


def _backbone_cases(rng):
    skff = backbone.SkffBlock(4, 3, reduction=2, rng=rng)
    features = [_leaf(rng, (4, 3, 3), name="branch{}".format(index))
                for index in range(3)]
    config = backbone.NetworkConfig.preset("micro")
    block = perturb_offsets(backbone.MultiBranchBlock(
        4, 1, 1, config.embed_config(0), config, rng), rng)
    x = _leaf(rng, (4, 4, 4))
    network = perturb_offsets(backbone.Network(config, rng), rng)
    image = _leaf(rng, (3, 8, 8), 0.0, 1.0, "image")
    return [
        ("skff_fuse", lambda: backbone.skff_fuse(features, skff),
         _with_parameters(skff, [("branch{}".format(index), feature)
                                 for index, feature in enumerate(features)])),
        ("MultiBranchBlock", lambda: block(x),
         _with_parameters(block, [("x", x)], rng, limit=12)),
        ("Network", lambda: network(image),
         _with_parameters(network, [("image", image)], rng, limit=16)),
    ]


SUITES = (("tensor", _elementwise_cases), ("shapes", _shape_cases),
          ("convolutions", _convolution_cases),
          ("attention", _attention_cases), ("embedding", _embedding_cases),
          ("backbone", _backbone_cases))


def gradient_suite(rng=None, samples=20, only=None, display=False):
    """Run a gradient check over every operation and module in 64-bit
    precision.

    Parameters
    ----------
    rng : numpy.random.Generator
        Source of the inputs, weights and checked coordinates.

    samples : int
        Coordinates checked per input tensor.

    only : list or None
        Names of the suites to run, out of the names in SUITES.

    Returns
    -------
    results : list
        One GradcheckResult per checked function.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    names = [name for name, _ in SUITES]
    if only is not None:
        unknown = set(only) - set(names)
        if unknown:
            raise ConfigurationError(
                "unknown gradient suites: {}; expected some of: {}".format(
                    ", ".join(sorted(unknown)), ", ".join(names)))
    results = []
    with tensor.precision("f64"):
        for suite, build in SUITES:
            if only is not None and suite not in only:
                continue
            for name, fn, inputs in build(rng):
                if display:
                    report.progress_bar("checking gradients: {}".format(name))
                results.append(gradcheck("{}: {}".format(suite, name), fn,
                                         inputs, samples, rng=rng))
    return results


def max_relative_error(actual, expected):
    "max |actual - expected| / max |expected|"
    actual = np.asarray(actual)
    expected = np.asarray(expected)
    scale = np.max(np.abs(expected)) if expected.size else 0.0
    if scale == 0:
        return float(np.max(np.abs(actual))) if actual.size else 0.0
    return float(np.max(np.abs(actual - expected)) / scale)


def _random_qkv(rng, tokens, dim, radius=attention.DEFAULT_RADIUS):
    q = attention.normalize_qk(tensor.Tensor(rng.standard_normal(
        (dim, tokens))), radius)
    k = attention.normalize_qk(tensor.Tensor(rng.standard_normal(
        (dim, tokens))), radius)
    v = tensor.Tensor(rng.uniform(-1, 1, (dim, tokens)))
    return q, k, v


class EquivalenceResult(object):
    """
    Largest differences between the linear attention path and its oracles,
    and the quality of the Taylor approximation of the softmax weights.
    """
    def __init__(self, radius=attention.DEFAULT_RADIUS):
        self.radius = radius
        self.oracle_rows = []
        self.trials = []

    def add_oracle(self, tokens, dim, quadratic_error, softmax_error):
        self.oracle_rows.append((tokens, dim, quadratic_error, softmax_error))

    def add_trial(self, max_logit, min_weight, first_deviation,
                  second_deviation):
        self.trials.append((max_logit, min_weight, first_deviation,
                            second_deviation))

    @property
    def max_oracle_error(self):
        return max([row[2] for row in self.oracle_rows] + [0.0])

    @property
    def max_logit(self):
        return max([trial[0] for trial in self.trials] + [0.0])

    @property
    def min_weight(self):
        return min([trial[1] for trial in self.trials] + [1.0])

    @property
    def max_deviation(self):
        return max([trial[2] for trial in self.trials] + [0.0])

    @property
    def second_order_wins(self):
        "Trials on which order 2 deviates strictly less than order 1."
        return sum(1 for trial in self.trials if trial[3] < trial[2])

    @property
    def oracles_agree(self):
        return self.max_oracle_error < ORACLE_TOLERANCE

    @property
    def approximation_holds(self):
        bound = self.radius * self.radius
        return self.max_logit <= bound + 1e-12 and \
            self.min_weight >= 1 - bound - 1e-12 and \
            self.max_deviation <= DEVIATION_LIMIT and \
            self.second_order_wins == len(self.trials)

    @property
    def passed(self):
        return self.oracles_agree and self.approximation_holds

    def to_str(self):
        lines = ["{:>6} {:>4}  {:>22}  {:>22}".format(
            "N", "D", "linear vs quadratic", "linear vs softmax")]
        for tokens, dim, quadratic, softmax in self.oracle_rows:
            lines.append("{:>6} {:>4}  {:>22.3e}  {:>22.3e}".format(
                tokens, dim, quadratic, softmax))
        lines.append("oracle agreement (< {:.0e}): {}".format(
            ORACLE_TOLERANCE, report.verdict(self.oracles_agree)))
        if self.trials:
            lines.append("")
            lines.append("{} random trials at radius {}:".format(
                len(self.trials), self.radius))
            lines.append("  largest |logit|:\t\t{:.4f} (bound {:.4f})".format(
                self.max_logit, self.radius * self.radius))
            lines.append("  smallest 1 + logit:\t\t{:.4f}".format(
                self.min_weight))
            lines.append("  largest relative deviation:\t{:.3%} (limit "
                         "{:.1%})".format(self.max_deviation,
                                          DEVIATION_LIMIT))
            lines.append("  order 2 closer on:\t\t{}/{} trials".format(
                self.second_order_wins, len(self.trials)))
            lines.append("approximation: {}".format(
                report.verdict(self.approximation_holds)))
        return "\n".join(lines)


def approximation_trials(result, trials=100, tokens=64, dim=16, rng=None):
    """Add trials of random normalized queries and keys to result, comparing
    the Taylor weights of order 1 and 2 with e^x before row normalization."""
    rng = rng if rng is not None else np.random.default_rng(0)
    for _ in range(trials):
        q, k, _ = _random_qkv(rng, tokens, dim, result.radius)
        logits = np.matmul(q.data.T, k.data)
        _, first = attention.weight_deviation(q, k, 1, normalize=False)
        _, second = attention.weight_deviation(q, k, 2, normalize=False)
        result.add_trial(float(np.max(np.abs(logits))),
                         float(np.min(1 + logits)), first, second)
    return result


def equivalence_suite(ns=ORACLE_TOKENS, dims=ORACLE_DIMS, trials=100,
                      rng=None, display=False):
    """Compare the linear path with the quadratic order-1 oracle and with
    softmax attention over a grid of token counts and dimensions, then run
    the approximation trials. Runs in 64-bit precision.

    Returns
    -------
    result : EquivalenceResult
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    result = EquivalenceResult()
    with tensor.precision("f64"):
        for tokens in ns:
            for dim in dims:
                if display:
                    report.progress_bar("comparing attention paths: N = {}, "
                                        "D = {}".format(tokens, dim))
                q, k, v = _random_qkv(rng, tokens, dim)
                linear = attention.taylor_attention_linear(q, k, v).data
                quadratic = attention.taylor_attention_quadratic(q, k, v).data
                softmax = attention.softmax_attention(q, k, v).data
                result.add_oracle(tokens, dim,
                                  max_relative_error(linear, quadratic),
                                  float(np.max(np.abs(linear - softmax))))
        approximation_trials(result, trials, rng=rng)
    return result
