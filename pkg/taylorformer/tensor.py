"""
Dense tensors with an eager reverse-mode tape and a multiply counter.

Every array operation used by the network goes through this module, so that
gradients and multiply counts are handled in a single place. Arrays are
channels-first; the convolution kernels accept an optional leading batch axis.

Operations only record themselves while a Tape is active:

    with Tape() as tape:
        loss = sum(mul(x, x))
        tape.backward(loss)

Multiplies are counted while a MultiplyCounter is active. Only matrix
products, convolutions, explicit elementwise products and quotients and the
application of bilinear interpolation weights are counted; additions,
activations and reductions are not.
"""

from __future__ import absolute_import
from __future__ import division
import math
import threading
import time
from collections import defaultdict
from contextlib import contextmanager

import einops
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import sparse
from scipy import special

from .errors import ConfigurationError
from .errors import ContractError
from .errors import DimensionError
from .errors import ShapeError

PRECISIONS = {"f32": np.float32, "f64": np.float64}
_dtype = np.float64


class _State(threading.local):
    "Per-thread stacks of active tapes, counters and labels."
    def __init__(self):
        super(_State, self).__init__()
        self.tapes = []
        self.counters = []
        self.labels = []


_STATE = _State()


def set_precision(name):
    """Set the floating point precision used for new tensors.

    Parameters
    ----------
    name : str
        Either 'f32' or 'f64'.
    """
    global _dtype
    if name not in PRECISIONS:
        raise ConfigurationError(
            "unknown precision '{}', expected one of: {}".format(
                name, ", ".join(sorted(PRECISIONS))))
    _dtype = PRECISIONS[name]


def get_dtype():
    "Returns the numpy dtype used for new tensors."
    return _dtype


def get_precision():
    "Returns the name of the current precision."
    return "f32" if _dtype == np.float32 else "f64"


@contextmanager
def precision(name):
    "Temporarily switch to another precision."
    previous = get_precision()
    set_precision(name)
    try:
        yield
    finally:
        set_precision(previous)


class Tensor(object):
    """
    A dense n-dimensional array that can take part in a Tape. Tensors are
    treated as immutable values once created.
    """
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        self.data = np.asarray(data, dtype=dtype if dtype is not None
                               else _dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._recorded = False

    def __repr__(self):
        return "Tensor(shape={}, dtype={}{})".format(
            self.shape, self.data.dtype,
            ", requires_grad=True" if self.requires_grad else "")

    @property
    def shape(self):
        "The extents of this tensor."
        return self.data.shape

    @property
    def ndim(self):
        "Number of axes."
        return self.data.ndim

    @property
    def size(self):
        "Number of scalars held by this tensor."
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        "Returns the value buffer as a numpy array."
        return self.data

    def item(self):
        "Returns the value of a tensor with a single element."
        return self.data.item()

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


class Tape(object):
    """
    An ordered record of the operations performed while this tape is active.
    Operations are appended in execution order, so walking the record
    backwards visits them in reverse topological order.
    """
    def __init__(self):
        self._entries = []
        self._outputs = set()

    def __enter__(self):
        _STATE.tapes.append(self)
        return self

    def __exit__(self, *exc_info):
        _STATE.tapes.remove(self)
        return False

    def __len__(self):
        return len(self._entries)

    def record(self, out, parents, backward_fn):
        "Append an operation that produced out from parents."
        out._recorded = True
        self._entries.append((out, parents, backward_fn))
        self._outputs.add(id(out))

    def backward(self, loss):
        """Propagate dLoss/dx to every leaf tensor that requires a gradient.
        Gradients accumulate into the .grad attribute of leaves. The tape is
        consumed afterwards.

        Parameters
        ----------
        loss : Tensor
            A scalar produced by an operation on this tape.
        """
        if not isinstance(loss, Tensor) or loss.data.size != 1:
            raise ContractError("loss has to be a scalar tensor, got shape {}"
                                .format(getattr(loss, "shape", None)))
        if id(loss) not in self._outputs:
            raise ContractError("loss was not produced on this tape")

        grads = {id(loss): np.ones_like(loss.data)}
        for out, parents, backward_fn in reversed(self._entries):
            grad = grads.pop(id(out), None)
            if grad is None:
                continue
            for parent, parent_grad in zip(parents, backward_fn(grad)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                parent_grad = _unbroadcast(
                    np.asarray(parent_grad), parent.shape).astype(
                        parent.data.dtype, copy=False)
                if parent._recorded:
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + parent_grad
                    else:
                        grads[key] = parent_grad
                elif parent.grad is None:
                    parent.grad = np.array(parent_grad, copy=True)
                else:
                    parent.grad = parent.grad + parent_grad
        self._entries = []
        self._outputs = set()


def active_tape():
    "Returns the innermost active tape or None."
    return _STATE.tapes[-1] if _STATE.tapes else None


def recording(*tensors):
    "True if an operation on these tensors would be recorded."
    return active_tape() is not None and \
        any(tensor.requires_grad for tensor in tensors)


def backward(loss):
    "Run the backward pass of the active tape from a scalar loss."
    tape = active_tape()
    if tape is None:
        raise ContractError("backward() called without an active tape")
    tape.backward(loss)


def record(data, parents, backward_fn):
    """Wrap an array in a Tensor and record it on the active tape if any of
    the parents requires a gradient. backward_fn takes the gradient of the
    output and returns one gradient (or None) per parent.
    """
    data = np.asarray(data)
    out = Tensor(data, dtype=data.dtype)
    tape = active_tape()
    if tape is not None and any(parent.requires_grad for parent in parents):
        out.requires_grad = True
        tape.record(out, parents, backward_fn)
    return out


def _unbroadcast(grad, shape):
    "Sum a gradient over the axes that were broadcast to reach its shape."
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(index for index, extent in enumerate(shape)
                 if extent == 1 and grad.shape[index] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class MultiplyCounter(object):
    """
    Counts scalar multiplies performed by the kernels while active. Counts are
    keyed by the label path that was active when they happened, see label().
    """
    def __init__(self):
        self.counts = defaultdict(int)
        self.times = defaultdict(int)

    def __enter__(self):
        _STATE.counters.append(self)
        return self

    def __exit__(self, *exc_info):
        _STATE.counters.remove(self)
        return False

    def add(self, count, path=None):
        "Add count multiplies to the current label path."
        self.counts[current_label() if path is None else path] += int(count)

    @property
    def total(self):
        "Multiplies counted under any label."
        return int(np.sum(list(self.counts.values()), dtype=np.int64))

    def exact(self, path):
        "Multiplies counted directly under this label path."
        return self.counts.get(path, 0)

    def within(self, prefix):
        "Multiplies counted under this label path or any of its children."
        return int(np.sum([count for path, count in self.counts.items()
                           if path == prefix or
                           path.startswith(prefix + "/")], dtype=np.int64))

    def matching(self, name):
        "Multiplies counted directly under any path whose last label is name."
        return int(np.sum([count for path, count in self.counts.items()
                           if path.split("/")[-1] == name], dtype=np.int64))


def current_label():
    "The label path of the running operation, such as 'encoder0/skff'."
    return "/".join(_STATE.labels)


@contextmanager
def label(name):
    """Attribute the multiplies and wall time of the enclosed operations to
    name, nested below the enclosing labels.
    """
    _STATE.labels.append(str(name))
    start = time.perf_counter_ns() if _STATE.counters else None
    try:
        yield
    finally:
        path = current_label()
        _STATE.labels.pop()
        if start is not None:
            elapsed = time.perf_counter_ns() - start
            for counter in _STATE.counters:
                counter.times[path] += elapsed


def _count(multiplies):
    for counter in _STATE.counters:
        counter.add(multiplies)


def _lift(value, like=None):
    if isinstance(value, Tensor):
        return value
    dtype = like.data.dtype if like is not None else _dtype
    return Tensor(np.asarray(value, dtype=dtype), dtype=dtype)


def _pair(a, b):
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    try:
        shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError("shapes {} and {} cannot be broadcast together"
                             .format(a.shape, b.shape))
    return a, b, shape


# elementwise operations

def add(a, b):
    a, b, _ = _pair(a, b)
    return record(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b, _ = _pair(a, b)
    return record(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    a, b, shape = _pair(a, b)
    _count(np.prod(shape, dtype=np.int64))
    return record(a.data * b.data, (a, b),
                  lambda g: (g * b.data, g * a.data))


def div(a, b):
    a, b, shape = _pair(a, b)
    _count(np.prod(shape, dtype=np.int64))

    def backward_fn(g):
        quotient = g / b.data
        return quotient, -quotient * a.data / b.data
    return record(a.data / b.data, (a, b), backward_fn)


def neg(a):
    a = _lift(a)
    return record(-a.data, (a,), lambda g: (-g,))


def power(a, exponent):
    "Raise a to a constant scalar exponent."
    a = _lift(a)
    return record(a.data ** exponent, (a,),
                  lambda g: (g * exponent * a.data ** (exponent - 1),))


def exp(a):
    a = _lift(a)
    data = np.exp(a.data)
    return record(data, (a,), lambda g: (g * data,))


def log(a):
    a = _lift(a)
    return record(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    a = _lift(a)
    data = np.sqrt(a.data)
    return record(data, (a,), lambda g: (g * 0.5 / data,))


def absolute(a):
    a = _lift(a)
    return record(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def sigmoid(a):
    a = _lift(a)
    data = special.expit(a.data)
    return record(data, (a,), lambda g: (g * data * (1 - data),))


def hardswish(a):
    "x * relu6(x + 3) / 6"
    a = _lift(a)
    data = a.data * np.clip(a.data + 3, 0, 6) / 6

    def backward_fn(g):
        slope = np.where(a.data < -3, 0,
                         np.where(a.data > 3, 1, (2 * a.data + 3) / 6))
        return (g * slope,)
    return record(data.astype(a.data.dtype, copy=False), (a,), backward_fn)


def relu(a):
    a = _lift(a)
    return record(np.maximum(a.data, 0), (a,), lambda g: (g * (a.data > 0),))


def leaky_relu(a, slope=0.01):
    a = _lift(a)
    scale = np.where(a.data > 0, 1, slope).astype(a.data.dtype)
    return record(a.data * scale, (a,), lambda g: (g * scale,))


def prelu(a, alpha):
    "Leaky ReLU with a learned negative slope."
    a = _lift(a)
    alpha = _lift(alpha, a)
    positive = a.data > 0
    data = np.where(positive, a.data, alpha.data * a.data)

    def backward_fn(g):
        return (g * np.where(positive, 1, alpha.data),
                g * np.where(positive, 0, a.data))
    return record(data, (a, alpha), backward_fn)


def gelu(a):
    "Gaussian error linear unit, exact form."
    a = _lift(a)
    cdf = 0.5 * (1 + special.erf(a.data / math.sqrt(2)))

    def backward_fn(g):
        pdf = np.exp(-0.5 * a.data * a.data) / math.sqrt(2 * math.pi)
        return (g * (cdf + a.data * pdf),)
    return record(a.data * cdf, (a,), backward_fn)


def clamp(a, low, high):
    """Clip a to [low, high]. The gradient passes unchanged inside the
    interval and is zero outside of it."""
    a = _lift(a)
    inside = (a.data >= low) & (a.data <= high)
    return record(np.clip(a.data, low, high), (a,), lambda g: (g * inside,))


ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "sigmoid": sigmoid,
    "hardswish": hardswish,
    "relu": relu,
    "leaky_relu": leaky_relu,
    "prelu": prelu,
    "gelu": gelu,
}


def elementwise(op, *inputs):
    """Apply the pointwise operation named op to the inputs.

    Parameters
    ----------
    op : str
        One of the keys in ELEMENTWISE.

    inputs : Tensor
        One operand for unary operations, two for binary operations and
        prelu.
    """
    if op not in ELEMENTWISE:
        raise ConfigurationError("unknown elementwise operation '{}'"
                                 .format(op))
    return ELEMENTWISE[op](*inputs)


# reductions and shape manipulation

def _normalize_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(index % ndim for index in axis))


def sum(a, axis=None, keepdims=False):
    a = _lift(a)
    axes = _normalize_axis(axis, a.ndim)
    data = np.sum(a.data, axis=axes, keepdims=keepdims)

    def backward_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)
    return record(data, (a,), backward_fn)


def mean(a, axis=None, keepdims=False):
    a = _lift(a)
    axes = _normalize_axis(axis, a.ndim)
    count = int(np.prod([a.shape[index] for index in axes]))
    data = np.mean(a.data, axis=axes, keepdims=keepdims)

    def backward_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape),)
    return record(data, (a,), backward_fn)


def reshape(a, shape):
    a = _lift(a)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("cannot reshape {} into {}".format(a.shape, shape))
    return record(data, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    a = _lift(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return record(a.data.transpose(axes), (a,),
                  lambda g: (g.transpose(inverse),))


def swapaxes(a, first=-1, second=-2):
    a = _lift(a)
    return record(np.swapaxes(a.data, first, second), (a,),
                  lambda g: (np.swapaxes(g, first, second),))


def broadcast_to(a, shape):
    a = _lift(a)
    try:
        data = np.broadcast_to(a.data, shape)
    except ValueError:
        raise DimensionError("cannot broadcast {} to {}".format(a.shape,
                                                                shape))
    return record(data, (a,), lambda g: (g,))


def _is_basic(index):
    if not isinstance(index, tuple):
        index = (index,)
    return all(isinstance(item, (int, slice, type(Ellipsis), type(None)))
               for item in index)


def getitem(a, index):
    a = _lift(a)
    basic = _is_basic(index)

    def backward_fn(g):
        grad = np.zeros_like(a.data)
        if basic:
            grad[index] += g
        else:
            np.add.at(grad, index, g)
        return (grad,)
    return record(a.data[index], (a,), backward_fn)


def concat(tensors, axis=0):
    tensors = [_lift(tensor) for tensor in tensors]
    try:
        data = np.concatenate([tensor.data for tensor in tensors], axis=axis)
    except ValueError:
        raise DimensionError("cannot concatenate shapes {}".format(
            ", ".join(str(tensor.shape) for tensor in tensors)))
    splits = np.cumsum([tensor.shape[axis] for tensor in tensors])[:-1]
    return record(data, tuple(tensors),
                  lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors, axis=0):
    "Join tensors of equal shape along a new axis."
    tensors = [_lift(tensor) for tensor in tensors]
    ndim = tensors[0].ndim + 1
    axis = axis % ndim
    expanded = [reshape(tensor, tensor.shape[:axis] + (1,) +
                        tensor.shape[axis:]) for tensor in tensors]
    return concat(expanded, axis=axis)


def rearrange(a, pattern, **axes_lengths):
    """Reorder the axes of a with an einops pattern. The gradient is routed
    back through the inverse permutation of the flat element indices.
    """
    a = _lift(a)
    try:
        data = einops.rearrange(a.data, pattern, **axes_lengths)
    except einops.EinopsError as error:
        raise ShapeError("cannot rearrange {} with '{}': {}".format(
            a.shape, pattern, error))

    def backward_fn(g):
        index = einops.rearrange(np.arange(a.size).reshape(a.shape),
                                 pattern, **axes_lengths)
        grad = np.empty(a.size, dtype=g.dtype)
        grad[index.ravel()] = g.ravel()
        return (grad.reshape(a.shape),)
    return record(data, (a,), backward_fn)


def softmax(a, axis=-1):
    a = _lift(a)
    shifted = np.exp(a.data - np.max(a.data, axis=axis, keepdims=True))
    data = shifted / np.sum(shifted, axis=axis, keepdims=True)

    def backward_fn(g):
        return (data * (g - np.sum(g * data, axis=axis, keepdims=True)),)
    return record(data, (a,), backward_fn)


# matrix products

def matmul(a, b):
    """Matrix product of the last two axes, broadcasting any leading axes.

    Parameters
    ----------
    a : Tensor
        An array of shape (..., m, k).

    b : Tensor
        An array of shape (..., k, n).

    Returns
    -------
    product : Tensor
        An array of shape (..., m, n).
    """
    a = _lift(a)
    b = _lift(b, a)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError("cannot multiply {} by {}: inner dimensions "
                             "differ".format(a.shape, b.shape))
    try:
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError("cannot multiply {} by {}: batch dimensions "
                             "differ".format(a.shape, b.shape))
    _count(np.prod(batch, dtype=np.int64) * a.shape[-2] * a.shape[-1] *
           b.shape[-1])

    def backward_fn(g):
        return (np.matmul(g, np.swapaxes(b.data, -1, -2)),
                np.matmul(np.swapaxes(a.data, -1, -2), g))
    return record(np.matmul(a.data, b.data), (a, b), backward_fn)


# convolutions

def _batched(op):
    "Let a kernel written for (B, C, H, W) also accept (C, H, W)."
    def wrapper(x, *args, **kwargs):
        x = _lift(x)
        if x.ndim == 3:
            out = op(reshape(x, (1,) + x.shape), *args, **kwargs)
            return reshape(out, out.shape[1:])
        if x.ndim != 4:
            raise DimensionError("expected a (C, H, W) or (B, C, H, W) "
                                 "input, got {}".format(x.shape))
        return op(x, *args, **kwargs)
    wrapper.__name__ = op.__name__
    wrapper.__doc__ = op.__doc__
    return wrapper


def _im2col(x, kernel_h, kernel_w, stride, padding):
    """Returns the sliding windows of x as an array of shape
    (B, C, kernel_h * kernel_w, H', W'), taps in row-major order."""
    if kernel_h == kernel_w == stride == 1 and padding == 0:
        return x[:, :, None]
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding),
                       (padding, padding)))
    windows = sliding_window_view(x, (kernel_h, kernel_w), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]
    batch, channels, out_h, out_w = windows.shape[:4]
    return np.ascontiguousarray(windows.transpose(0, 1, 4, 5, 2, 3)).reshape(
        batch, channels, kernel_h * kernel_w, out_h, out_w)


def _col2im(cols, shape, kernel_h, kernel_w, stride, padding):
    "Scatter-add window gradients back onto an input of the given shape."
    batch, channels, height, width = shape
    if kernel_h == kernel_w == stride == 1 and padding == 0:
        return cols[:, :, 0]
    grad = np.zeros((batch, channels, height + 2 * padding,
                     width + 2 * padding), dtype=cols.dtype)
    out_h, out_w = cols.shape[-2:]
    for row in range(kernel_h):
        for col in range(kernel_w):
            grad[:, :, row:row + stride * out_h:stride,
                 col:col + stride * out_w:stride] += cols[:, :,
                                                          row * kernel_w + col]
    return grad[:, :, padding:padding + height, padding:padding + width]


def _tap_sum(cols, weight):
    """Weighted sum over the tap axis of (B, C, T, H, W) windows with a
    (C, T) weight. Taps are accumulated in order."""
    out = cols[:, :, 0] * weight[None, :, 0, None, None]
    for tap in range(1, cols.shape[2]):
        out = out + cols[:, :, tap] * weight[None, :, tap, None, None]
    return out


def _tap_sum_grads(g, cols, weight):
    grad_weight = np.einsum("bcthw,bchw->ct", cols, g)
    grad_cols = g[:, :, None] * weight[None, :, :, None, None]
    return grad_cols, grad_weight


def _depthwise_taps(padded, kernel_h, kernel_w, stride, out_h, out_w):
    "Strided views of padded, one per tap, each of shape (B, C, H', W')."
    return [padded[:, :, row:row + stride * out_h:stride,
                   col:col + stride * out_w:stride]
            for row in range(kernel_h) for col in range(kernel_w)]


def _depthwise_conv(x, weight, kernel_h, kernel_w, stride, padding):
    """Depthwise convolution on views of the padded input; returns the output
    and the taps for the backward pass."""
    padded = np.pad(x, ((0, 0), (0, 0), (padding, padding),
                        (padding, padding))) if padding else x
    out_h = (padded.shape[2] - kernel_h) // stride + 1
    out_w = (padded.shape[3] - kernel_w) // stride + 1
    taps = _depthwise_taps(padded, kernel_h, kernel_w, stride, out_h, out_w)
    out = taps[0] * weight[None, :, 0, None, None]
    for tap in range(1, len(taps)):
        out = out + taps[tap] * weight[None, :, tap, None, None]
    return out, taps


def _depthwise_conv_grads(g, taps, weight, shape, kernel_h, kernel_w, stride,
                          padding):
    batch, channels, height, width = shape
    out_h, out_w = g.shape[-2:]
    grad_weight = np.stack([np.einsum("bchw,bchw->c", tap, g)
                            for tap in taps], axis=1)
    grad = np.zeros((batch, channels, height + 2 * padding,
                     width + 2 * padding), dtype=g.dtype)
    views = _depthwise_taps(grad, kernel_h, kernel_w, stride, out_h, out_w)
    for tap, view in enumerate(views):
        view += g * weight[None, :, tap, None, None]
    return (grad[:, :, padding:padding + height, padding:padding + width],
            grad_weight)


def _grouped_matmul(cols, weight, groups):
    batch, channels, taps, out_h, out_w = cols.shape
    out_channels = weight.shape[0]
    cols = cols.reshape(batch, groups, channels // groups * taps,
                        out_h * out_w)
    weight = weight.reshape(groups, out_channels // groups, -1)
    return np.matmul(weight, cols).reshape(batch, out_channels, out_h, out_w)


@_batched
def conv2d(x, weight, bias=None, stride=1, padding=0, groups=1):
    """Cross-correlate x with weight.

    Parameters
    ----------
    x : Tensor
        Input of shape (B, C_in, H, W) or (C_in, H, W).

    weight : Tensor
        Kernel of shape (C_out, C_in / groups, kh, kw).

    bias : Tensor or None
        Optional bias of shape (C_out,).

    groups : int
        Number of channel groups; groups == C_in == C_out is a depthwise
        convolution.

    Returns
    -------
    out : Tensor
        Output of shape (B, C_out, H', W').
    """
    weight = _lift(weight, x)
    batch, channels, height, width = x.shape
    out_channels, group_channels, kernel_h, kernel_w = weight.shape
    if groups < 1 or channels % groups or out_channels % groups:
        raise ConfigurationError(
            "groups={} has to divide both {} input and {} output channels"
            .format(groups, channels, out_channels))
    if group_channels != channels // groups:
        raise DimensionError("weight {} expects {} channels per group, the "
                             "input {} has {}".format(
                                 weight.shape, group_channels, x.shape,
                                 channels // groups))
    if kernel_h > height + 2 * padding or kernel_w > width + 2 * padding:
        raise ShapeError("a {}x{} kernel does not fit a padded {}x{} input"
                         .format(kernel_h, kernel_w, height + 2 * padding,
                                 width + 2 * padding))
    depthwise = groups == channels == out_channels
    flat_weight = weight.data.reshape(out_channels, -1)
    if depthwise:
        data, taps = _depthwise_conv(x.data, flat_weight, kernel_h, kernel_w,
                                     stride, padding)
    else:
        cols = _im2col(x.data, kernel_h, kernel_w, stride, padding)
        data = _grouped_matmul(cols, weight.data, groups)
    out_h, out_w = data.shape[-2:]
    _count(batch * out_channels * group_channels * kernel_h * kernel_w *
           out_h * out_w)
    parents = (x, weight)
    if bias is not None:
        bias = _lift(bias, x)
        data = data + bias.data.reshape(1, -1, 1, 1)
        parents = parents + (bias,)

    def backward_fn(g):
        if depthwise:
            grad_x, grad_weight = _depthwise_conv_grads(
                g, taps, flat_weight, x.shape, kernel_h, kernel_w, stride,
                padding)
            grads = (grad_x, grad_weight.reshape(weight.shape))
        else:
            grad_out = g.reshape(batch, groups, out_channels // groups,
                                 out_h * out_w)
            grouped = cols.reshape(batch, groups, -1, out_h * out_w)
            kernel = weight.data.reshape(groups, out_channels // groups, -1)
            grad_weight = np.matmul(
                grad_out, np.swapaxes(grouped, -1, -2)).sum(axis=0)
            grad_cols = np.matmul(np.swapaxes(kernel, -1, -2), grad_out)
            grad_cols = grad_cols.reshape(cols.shape)
            grads = (_col2im(grad_cols, x.shape, kernel_h, kernel_w, stride,
                             padding),
                     grad_weight.reshape(weight.shape))
        if bias is not None:
            grads = grads + (g.sum(axis=(0, 2, 3)),)
        return grads
    return record(data, parents, backward_fn)


def depthwise_apply(cols, weight):
    """Depthwise weighting of already gathered windows.

    Parameters
    ----------
    cols : Tensor
        Windows of shape (B, C, T, H, W) or (C, T, H, W) as returned by
        deform_sample.

    weight : Tensor
        Depthwise kernel of shape (C, 1, K, K) with K * K == T.
    """
    cols = _lift(cols)
    if cols.ndim == 4:
        out = depthwise_apply(reshape(cols, (1,) + cols.shape), weight)
        return reshape(out, out.shape[1:])
    weight = _lift(weight, cols)
    batch, channels, taps, height, width = cols.shape
    if weight.shape[0] != channels or weight.size != channels * taps:
        raise DimensionError("depthwise weight {} does not match windows {}"
                             .format(weight.shape, cols.shape))
    flat = weight.data.reshape(channels, taps)
    _count(batch * channels * taps * height * width)

    def backward_fn(g):
        grad_cols, grad_weight = _tap_sum_grads(g, cols.data, flat)
        return grad_cols, grad_weight.reshape(weight.shape)
    return record(_tap_sum(cols.data, flat), (cols, weight), backward_fn)


# corner steps (dy, dx) in the order 00, 01, 10, 11
CORNERS = np.array([(0, 0), (0, 1), (1, 0), (1, 1)])


def _bilinear_corners(offsets, kernel, padding, height, width):
    """Sampling corners for every tap and output location.

    Returns
    -------
    index : numpy.ndarray
        Flat pixel index of shape (B, 4, T, H', W'); 0 where invalid.

    valid : numpy.ndarray
        True where the corner lies inside the image.

    frac_y, frac_x : numpy.ndarray
        Fractional parts of the sampling positions, of shape (B, T, H', W').
    """
    batch, _, out_h, out_w = offsets.shape
    taps = kernel * kernel
    tap_y, tap_x = np.divmod(np.arange(taps), kernel)
    offsets = offsets.reshape(batch, taps, 2, out_h, out_w)
    pos_y = (np.arange(out_h)[None, None, :, None] - padding +
             tap_y[None, :, None, None] + offsets[:, :, 0])
    pos_x = (np.arange(out_w)[None, None, None, :] - padding +
             tap_x[None, :, None, None] + offsets[:, :, 1])
    floor_y = np.floor(pos_y)
    floor_x = np.floor(pos_x)
    rows = floor_y.astype(np.int64)[:, None] + \
        CORNERS[:, 0].reshape(1, 4, 1, 1, 1)
    cols = floor_x.astype(np.int64)[:, None] + \
        CORNERS[:, 1].reshape(1, 4, 1, 1, 1)
    valid = (rows >= 0) & (rows < height) & (cols >= 0) & (cols < width)
    index = np.where(valid, rows * width + cols, 0)
    return index, valid, pos_y - floor_y, pos_x - floor_x


def _corner_weights(frac_y, frac_x, valid):
    """Interpolation weights of the four corners and their derivatives along
    y and x, each of shape (B, 4, T, H', W') and zero outside the image."""
    fy = frac_y[:, None]
    fx = frac_x[:, None]
    along_y = np.concatenate([1 - fy, 1 - fy, fy, fy], axis=1)
    along_x = np.concatenate([1 - fx, fx, 1 - fx, fx], axis=1)
    sign_y = np.array([-1, -1, 1, 1]).reshape(1, 4, 1, 1, 1)
    sign_x = np.array([-1, 1, -1, 1]).reshape(1, 4, 1, 1, 1)
    mask = valid.astype(along_y.dtype)
    return (along_y * along_x * mask, sign_y * along_x * mask,
            sign_x * along_y * mask)


def _sampling_matrix(index, weight, pixels, dtype):
    """Sparse (T * H' * W', pixels) matrix whose rows hold the four corner
    weights of one sample."""
    corners = index.shape[0]
    samples = index[0].size
    rows = np.broadcast_to(np.arange(samples), (corners, samples))
    return sparse.csr_matrix(
        (weight.reshape(corners, -1).astype(dtype, copy=False).ravel(),
         (rows.ravel(), index.reshape(corners, -1).ravel())),
        shape=(samples, pixels))


@_batched
def deform_sample(x, offsets, kernel, padding=None):
    """Gather deformable convolution windows by bilinear interpolation.

    Output location (p, q) and tap (i, j) read x at
    (p - padding + i + dy, q - padding + j + dx), where dy and dx are the
    channels 2t and 2t + 1 of offsets for tap t = i * kernel + j. Samples
    outside the image read zero. Offsets are shared by all channels, so each
    sample of the batch is one sparse matrix applied to every channel.

    Parameters
    ----------
    x : Tensor
        Input of shape (B, C, H, W).

    offsets : Tensor
        Offsets of shape (B, 2 * kernel**2, H', W').

    kernel : int
        Side length of the sampling grid.

    padding : int
        Zero padding around x; kernel // 2 keeps the size.

    Returns
    -------
    cols : Tensor
        Windows of shape (B, C, kernel**2, H', W').
    """
    offsets = _lift(offsets, x)
    if offsets.ndim == 3:
        offsets = reshape(offsets, (1,) + offsets.shape)
    padding = kernel // 2 if padding is None else padding
    batch, channels, height, width = x.shape
    taps = kernel * kernel
    out_h = height + 2 * padding - kernel + 1
    out_w = width + 2 * padding - kernel + 1
    if offsets.shape != (batch, 2 * taps, out_h, out_w):
        raise DimensionError("offsets {} do not match input {} with a {}x{} "
                             "kernel".format(offsets.shape, x.shape, kernel,
                                             kernel))
    index, valid, frac_y, frac_x = _bilinear_corners(
        offsets.data, kernel, padding, height, width)
    weight, slope_y, slope_x = _corner_weights(frac_y, frac_x, valid)
    dtype = x.data.dtype
    pixels = height * width
    # (B, H*W, C)
    flat = np.swapaxes(x.data.reshape(batch, channels, pixels), 1, 2)
    samplers = [_sampling_matrix(index[sample], weight[sample], pixels,
                                 dtype) for sample in range(batch)]
    data = np.stack([(sampler @ flat[sample]).T
                     for sample, sampler in enumerate(samplers)])
    data = data.reshape(batch, channels, taps, out_h, out_w)
    _count(4 * batch * channels * taps * out_h * out_w)

    def backward_fn(g):
        grads = np.swapaxes(g.reshape(batch, channels, -1), 1, 2)
        grad_x = np.stack([(sampler.T @ grads[sample]).T
                           for sample, sampler in enumerate(samplers)])
        grad_offsets = np.zeros((batch, taps, 2, out_h * out_w),
                                dtype=g.dtype)
        for sample in range(batch):
            for axis, slope in enumerate((slope_y, slope_x)):
                sampler = _sampling_matrix(index[sample], slope[sample],
                                           pixels, dtype)
                along = np.sum((sampler @ flat[sample]) * grads[sample],
                               axis=1)
                grad_offsets[sample, :, axis] = along.reshape(taps, -1)
        return (grad_x.reshape(x.shape),
                grad_offsets.reshape(offsets.shape))
    return record(data, (x, offsets), backward_fn)
