"""
Taylor-expanded multi-head self-attention.

The linear path evaluates first-order Taylor attention with two global sums
so that its cost is linear in the number of tokens. The quadratic paths build
the full token-by-token weight matrix and serve as oracles for the linear
path: first and second order Taylor weights and plain softmax weights. Q and
K are rescaled to a fixed norm before any of them is applied, so no extra
1/sqrt(D) factor is used.

Token maps are laid out as (..., heads, D / heads, N).
"""

from __future__ import absolute_import
from __future__ import division

import numpy as np

from . import tensor
from .errors import ConfigurationError
from .errors import DimensionError
from .errors import NumericalContractError
from .errors import ShapeError
from .layers import Conv2d
from .layers import LayerNorm
from .layers import Module
from .tensor import label

DEFAULT_RADIUS = 0.5
# number of weight matrix elements evaluated at once by the quadratic paths
QUADRATIC_BLOCK = 1 << 22
GATES = ("msar", "identity")


class AttentionConfig(object):
    """
    Shape of one T-MSA module.

    Parameters
    ----------
    dim : int
        Channels per token, D.

    heads : int
        Number of heads; has to divide dim.

    norm_radius : float
        Euclidean norm of every normalized Q and K token vector.

    qkv_conv_kernel : int
        Kernel size of the depthwise convolution that follows the pointwise
        Q/K/V projection.
    """
    def __init__(self, dim, heads=1, norm_radius=DEFAULT_RADIUS,
                 qkv_conv_kernel=3):
        if dim < 1 or heads < 1 or dim % heads:
            raise ConfigurationError("{} heads do not divide {} channels"
                                     .format(heads, dim))
        if norm_radius <= 0:
            raise ConfigurationError("the normalization radius has to be "
                                     "positive, got {}".format(norm_radius))
        if qkv_conv_kernel < 1 or qkv_conv_kernel % 2 == 0:
            raise ConfigurationError("the Q/K/V kernel size has to be odd, "
                                     "got {}".format(qkv_conv_kernel))
        self.dim = dim
        self.heads = heads
        self.norm_radius = norm_radius
        self.qkv_conv_kernel = qkv_conv_kernel

    @property
    def head_dim(self):
        return self.dim // self.heads

    def __eq__(self, other):
        return isinstance(other, AttentionConfig) and \
            vars(self) == vars(other)

    def __ne__(self, other):
        return not self == other


class MsarConfig(object):
    "Gating kernel sizes, cycled across heads."
    def __init__(self, kernels=(3, 5, 7)):
        kernels = tuple(kernels)
        if not kernels or any(size < 1 or size % 2 == 0 for size in kernels):
            raise ConfigurationError("gating kernels have to be odd, got {}"
                                     .format(kernels))
        self.kernels = kernels

    def kernel(self, head):
        "Kernel size used by the gate of this head."
        return self.kernels[head % len(self.kernels)]


class AttentionWeights(Module):
    """
    Weights of one T-MSA module: pointwise and depthwise Q/K/V generators,
    the output projection W^p and one gating convolution per head.
    """
    def __init__(self, config, msar=None, rng=None):
        msar = msar or MsarConfig()
        dim = config.dim
        self.config = config
        self.msar = msar
        self.norm = LayerNorm(dim)
        self.qkv = Conv2d(dim, 3 * dim, 1, rng)
        self.qkv_dwconv = Conv2d(3 * dim, 3 * dim, config.qkv_conv_kernel, rng,
                                 groups=3 * dim)
        self.gate = [Conv2d(2 * config.head_dim, 1, msar.kernel(head), rng,
                            bias=True)
                     for head in range(config.heads)]
        self.project = Conv2d(dim, dim, 1, rng)


class FeedForwardWeights(Module):
    """
    Gated depthwise feed-forward: pointwise expansion to two hidden maps,
    3x3 depthwise convolution, gelu(x1) * x2 and a pointwise projection.
    """
    def __init__(self, dim, expansion=2, rng=None):
        hidden = expansion * dim
        self.dim = dim
        self.hidden = hidden
        self.norm = LayerNorm(dim)
        self.project_in = Conv2d(dim, 2 * hidden, 1, rng)
        self.dwconv = Conv2d(2 * hidden, 2 * hidden, 3, rng, groups=2 * hidden)
        self.project_out = Conv2d(hidden, dim, 1, rng)


def _check_tokens(q, k, v):
    if q.shape != k.shape or q.ndim < 2 or v.ndim != q.ndim or \
       v.shape[:-2] != q.shape[:-2] or v.shape[-1] != q.shape[-1]:
        raise DimensionError("Q {}, K {} and V {} do not agree".format(
            q.shape, k.shape, v.shape))


def normalize_qk(q, radius=DEFAULT_RADIUS):
    """Rescale every token vector of q to the Euclidean norm radius. Token
    vectors run along axis -2; zero vectors stay zero.

    Parameters
    ----------
    q : Tensor
        Queries or keys of shape (..., D / heads, N).

    radius : float
        Target norm.

    Returns
    -------
    q_tilde : Tensor
        Tensor of the same shape with every column of norm radius.
    """
    if radius <= 0:
        raise ConfigurationError("the normalization radius has to be "
                                 "positive, got {}".format(radius))
    q = tensor._lift(q)
    norms = np.sqrt(np.sum(q.data * q.data, axis=-2, keepdims=True))
    nonzero = norms > 0
    safe = np.where(nonzero, norms, 1)
    unit = np.where(nonzero, q.data / safe, 0)

    def backward_fn(g):
        along = np.sum(unit * g, axis=-2, keepdims=True)
        return (np.where(nonzero, (g - unit * along) * (radius / safe), 0),)
    return tensor.record((unit * radius).astype(q.dtype, copy=False), (q,),
                         backward_fn)


def taylor_attention_linear(q, k, v):
    """First-order Taylor attention evaluated with the associative law:

        V'_i = (sum_j V_j + q_i^T sum_j k_j V_j^T) / (N + q_i^T sum_j k_j)

    Both sums are formed once, so the number of multiplies is affine in N.
    The denominator is formed as a product with a broadcast copy of
    sum_j k_j, which gives every value channel its own normalizer.

    Parameters
    ----------
    q, k : Tensor
        Normalized queries and keys of shape (..., d, N).

    v : Tensor
        Values of shape (..., d_v, N).

    Returns
    -------
    out : Tensor
        Attention output of shape (..., d_v, N).
    """
    _check_tokens(q, k, v)
    tokens = q.shape[-1]
    value_dim = v.shape[-2]
    kv = tensor.matmul(k, tensor.swapaxes(v))
    numerator = tensor.sum(v, axis=-1, keepdims=True) + \
        tensor.matmul(tensor.swapaxes(kv), q)
    key_sum = tensor.sum(k, axis=-1, keepdims=True)
    spread = tensor.broadcast_to(key_sum, key_sum.shape[:-1] + (value_dim,))
    denominator = tensor.matmul(tensor.swapaxes(spread), q) + tokens
    if denominator.size and np.min(denominator.data) <= 0:
        raise NumericalContractError(
            "attention denominator is not positive ({}); are Q and K "
            "normalized?".format(np.min(denominator.data)))
    with label("plumbing"):
        return numerator / denominator


def taylor_weights(q, k, order=1, normalize=True):
    """The explicit weight matrix f(q_i^T k_j), with f(x) = 1 + x for order 1
    and 1 + x + x^2 / 2 for order 2.

    Parameters
    ----------
    q : Tensor
        Queries of shape (..., D, N_q).

    k : Tensor
        Keys of shape (..., D, N).

    order : int
        1 or 2.

    normalize : bool
        Divide every row by its sum.

    Returns
    -------
    weights : Tensor
        Matrix of shape (..., N_q, N).
    """
    if order not in (1, 2):
        raise ConfigurationError("expansion order has to be 1 or 2, got {}"
                                 .format(order))
    logits = tensor.matmul(tensor.swapaxes(q), k)
    weights = logits + 1
    if order == 2:
        weights = weights + logits * logits * 0.5
    if normalize:
        weights = weights / tensor.sum(weights, axis=-1, keepdims=True)
    return weights


def softmax_weights(q, k):
    "Row-wise softmax of q_i^T k_j."
    return tensor.softmax(tensor.matmul(tensor.swapaxes(q), k), axis=-1)


def _blocked(weights_fn, q, k, v):
    """Apply a weight matrix built by weights_fn to v. Without a tape the
    queries are processed in blocks to bound memory."""
    tokens = q.shape[-1]
    rows = max(1, QUADRATIC_BLOCK // max(1, k.shape[-1]))
    if tensor.recording(q, k, v) or tokens <= rows:
        return tensor.matmul(v, tensor.swapaxes(weights_fn(q, k)))
    blocks = []
    for start in range(0, tokens, rows):
        part = q[..., start:start + rows]
        blocks.append(tensor.matmul(v, tensor.swapaxes(weights_fn(part, k))))
    return tensor.concat(blocks, axis=-1)


def taylor_attention_quadratic(q, k, v, order=1):
    """Taylor attention with the full N x N weight matrix; a quadratic
    oracle for taylor_attention_linear (order 1) and a closer approximation
    of softmax attention (order 2).

    Parameters
    ----------
    q, k, v : Tensor
        Queries and keys of shape (..., d, N), values of shape (..., d_v, N).

    order : int
        Order of the expansion, 1 or 2.

    Returns
    -------
    out : Tensor
        Attention output of shape (..., d_v, N).
    """
    _check_tokens(q, k, v)
    if order not in (1, 2):
        raise ConfigurationError("expansion order has to be 1 or 2, got {}"
                                 .format(order))
    return _blocked(lambda part, keys: taylor_weights(part, keys, order),
                    q, k, v)


def softmax_attention(q, k, v):
    "Softmax attention with weights exp(q_i^T k_j) normalized per row."
    _check_tokens(q, k, v)
    return _blocked(softmax_weights, q, k, v)


def msar_gate(q, k, weights, height, width):
    """Multi-scale attention refinement gate.

    For every head the normalized queries and keys are concatenated along the
    channel axis, folded back into a height x width map and passed through
    that head's convolution and a sigmoid.

    Parameters
    ----------
    q, k : Tensor
        Normalized queries and keys of shape (..., heads, D / heads, N).

    weights : AttentionWeights
        Holds one gating convolution per head.

    Returns
    -------
    gate : Tensor
        Gate of shape (..., heads, 1, height, width) with values in (0, 1).
    """
    heads, head_dim, tokens = q.shape[-3:]
    if height * width != tokens:
        raise ShapeError("a {}x{} map does not hold {} tokens".format(
            height, width, tokens))
    if k.shape != q.shape:
        raise DimensionError("Q {} and K {} do not agree".format(q.shape,
                                                                 k.shape))
    if len(weights.gate) != heads:
        raise ConfigurationError("{} gating convolutions for {} heads".format(
            len(weights.gate), heads))
    gates = []
    for head, conv in enumerate(weights.gate):
        pair = tensor.concat([q[..., head, :, :], k[..., head, :, :]],
                             axis=-2)
        pair = tensor.reshape(pair, pair.shape[:-1] + (height, width))
        gates.append(tensor.sigmoid(conv(pair)))
    return tensor.stack(gates, axis=-4)


def tmsa_block(x, weights, config=None, gate="msar"):
    """Refined T-MSA with a residual connection:

        X^ = X + Concat_h(H_h * G_h) W^p

    where H_h is the linear Taylor attention of head h and G_h its MSAR gate.

    Parameters
    ----------
    x : Tensor
        Feature map of shape (..., D, H, W).

    weights : AttentionWeights
        Weights built for config.

    config : AttentionConfig
        Defaults to the config the weights were built with.

    gate : str
        'msar' applies the gate; 'identity' holds the gate at one.

    Returns
    -------
    x_hat : Tensor
        Refined features of the shape of x.
    """
    config = config or weights.config
    if config != weights.config:
        raise ConfigurationError("weights were built for a different "
                                 "attention config")
    if x.ndim < 3 or x.shape[-3] != config.dim:
        raise ConfigurationError("expected {} channels, got input {}".format(
            config.dim, x.shape))
    if gate not in GATES:
        raise ConfigurationError("unknown gate '{}', expected one of: {}"
                                 .format(gate, ", ".join(GATES)))
    dim = config.dim
    height, width = x.shape[-2:]
    with label("tmsa"):
        with label("plumbing"):
            normed = weights.norm(x)
        qkv = weights.qkv(normed)
        with label("plumbing"):
            qkv = weights.qkv_dwconv(qkv)
            q, k, v = [tensor.rearrange(qkv[..., index * dim:(index + 1) * dim,
                                            :, :],
                                        "... (head c) h w -> ... head c (h w)",
                                        head=config.heads)
                       for index in range(3)]
            q = normalize_qk(q, config.norm_radius)
            k = normalize_qk(k, config.norm_radius)
        out = taylor_attention_linear(q, k, v)
        if gate == "msar":
            gates = msar_gate(q, k, weights, height, width)
            with label("plumbing"):
                out = out * tensor.rearrange(
                    gates, "... head one h w -> ... head one (h w)")
        out = tensor.rearrange(out, "... head c (h w) -> ... (head c) h w",
                               h=height)
        out = weights.project(out)
    return x + out


def feedforward(x, weights):
    "Pre-norm gated depthwise feed-forward with a residual connection."
    if x.ndim < 3 or x.shape[-3] != weights.dim:
        raise ConfigurationError("expected {} channels, got input {}".format(
            weights.dim, x.shape))
    hidden = weights.hidden
    y = weights.dwconv(weights.project_in(weights.norm(x)))
    y = tensor.gelu(y[..., :hidden, :, :]) * y[..., hidden:, :, :]
    return x + weights.project_out(y)


class TransformerBlock(Module):
    "A T-MSA module followed by a feed-forward module."
    def __init__(self, dim, heads, rng, norm_radius=DEFAULT_RADIUS,
                 msar=None, expansion=2, gate="msar", qkv_conv_kernel=3):
        self.gate = gate
        self.attention = AttentionWeights(
            AttentionConfig(dim, heads, norm_radius, qkv_conv_kernel), msar,
            rng)
        self.ffn = FeedForwardWeights(dim, expansion, rng)

    def forward(self, x):
        x = tmsa_block(x, self.attention, gate=self.gate)
        with label("ffn"):
            return feedforward(x, self.ffn)


def approximation_table(radius=DEFAULT_RADIUS, samples=11):
    """Compare e^x with its first and second order Taylor polynomials over
    the logit range [-radius^2, radius^2] reachable after normalization.

    Returns
    -------
    rows : list
        Tuples of (x, e^x, 1 + x, 1 + x + x^2 / 2, (1 + x) / e^x,
        (1 + x + x^2 / 2) / e^x).
    """
    logits = np.linspace(-radius * radius, radius * radius, samples)
    rows = []
    for logit in logits:
        exact = np.exp(logit)
        first = 1 + logit
        second = 1 + logit + logit * logit / 2
        rows.append((float(logit), float(exact), float(first), float(second),
                     float(first / exact), float(second / exact)))
    return rows


def weight_deviation(q, k, order=1, normalize=True):
    """Largest absolute and relative deviation of Taylor weights from
    softmax weights.

    Parameters
    ----------
    q, k : Tensor
        Normalized queries and keys of shape (..., D, N).

    order : int
        1 for 1 + x, 2 for 1 + x + x^2 / 2.

    normalize : bool
        Compare the row-normalized weights with softmax. If False, compare
        f(x) with e^x directly; for |x| <= 1/4 the ratio (1 + x) / e^x then
        lies in [0.75 e^0.25, 1].

    Returns
    -------
    deviation : tuple
        (max |w_taylor - w_softmax|, max |w_taylor - w_softmax| / w_softmax)
    """
    taylor = taylor_weights(q, k, order, normalize).data
    if normalize:
        exact = softmax_weights(q, k).data
    else:
        exact = np.exp(tensor.matmul(tensor.swapaxes(q), k).data)
    difference = np.abs(taylor - exact)
    return float(np.max(difference)), float(np.max(difference / exact))
