# ELUE/elue/ndiff.py

"""
Small reverse-mode differentiation core built on numpy.

Tensors record the operations that produced them on the innermost active
Tape. Only ParameterSets watched by that tape are differentiable; everything
else is a constant. Backward runs over the tape in reverse creation order,
which is both a valid topological order and a fixed accumulation order.
All arithmetic is float64.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

import config
from errors import GradientError, ShapeError

logger = logging.getLogger(__name__)

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)

_TAPES = []


def _active_tape():
    return _TAPES[-1] if _TAPES else None


class Tensor:
    """
    A float64 array plus the links needed to differentiate through it.
    :param value: array-like, converted to float64
    """

    __slots__ = ("value", "requires_grad", "tape", "_parents", "_backward")
    __array_ufunc__ = None  # ndarray <op> Tensor dispatches to Tensor

    def __init__(self, value):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = False
        self.tape = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def item(self):
        if self.value.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.value.reshape(-1)[0])

    def numpy(self):
        return self.value.copy()

    def detach(self):
        return Tensor(self.value)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __matmul__(self, other): return matmul(self, other)
    def __neg__(self): return neg(self)
    def __pow__(self, exponent): return power(self, exponent)
    def __getitem__(self, index): return take(self, index)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(value, parents, backward):
    """Wrap an op output; record it when a tape is active and any parent is differentiable"""
    out = Tensor(value)
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.tape = tape
        out._parents = tuple(p if p.requires_grad else None for p in parents)
        out._backward = backward
        tape.nodes.append(out)
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --- Elementwise and structural operations ---

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.value + b.value, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.value - b.value, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.value * b.value, (a, b),
                   lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.value / b.value
    return _result(out, (a, b),
                   lambda g: (_unbroadcast(g / b.value, a.shape),
                              _unbroadcast(-g * out / b.value, b.shape)))


def neg(a):
    a = as_tensor(a)
    return _result(-a.value, (a,), lambda g: (-g,))


def power(a, exponent):
    a = as_tensor(a)
    exponent = float(exponent)
    return _result(a.value ** exponent, (a,),
                   lambda g: (g * exponent * a.value ** (exponent - 1.0),))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _result(a.value @ b.value, (a, b), lambda g: (g @ b.value.T, a.value.T @ g))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.value)
    return _result(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    return _result(np.log(a.value), (a,), lambda g: (g / a.value,))


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.value)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a):
    a = as_tensor(a)
    mask = a.value > 0.0
    return _result(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def softplus(a):
    a = as_tensor(a)
    return _result(np.logaddexp(0.0, a.value), (a,), lambda g: (g * expit(a.value),))


def clip(a, low, high):
    a = as_tensor(a)
    inside = (a.value >= low) & (a.value <= high)
    return _result(np.clip(a.value, low, high), (a,), lambda g: (g * inside,))


def reduce_sum(a, axis=None, keepdims=False):
    a = as_tensor(a)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.sum(a.value, axis=axis, keepdims=keepdims), (a,), backward)


def reduce_mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.value.size if axis is None else a.shape[axis]
    return reduce_sum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.value for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from exc

    def backward(g):
        return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))

    return _result(out, tuple(tensors), backward)


def take(a, index):
    a = as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.value)
        np.add.at(full, index, g)
        return (full,)

    return _result(a.value[index], (a,), backward)


def reshape(a, shape):
    a = as_tensor(a)
    return _result(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def broadcast_to(a, shape):
    a = as_tensor(a)
    return _result(np.broadcast_to(a.value, shape).copy(), (a,),
                   lambda g: (_unbroadcast(g, a.shape),))


# --- Parameters and optimizer state ---

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


class ParameterSet:
    """
    Named, shaped parameters plus per-entry Adam moments.
    :param name: section name used in gradients and checkpoints (e.g. "pi", "q")
    :param entries: mapping entry name -> array
    """

    def __init__(self, name, entries):
        self.name = name
        self.tensors = {}
        self.state = {}
        for key, value in entries.items():
            value = np.array(value, dtype=np.float64)
            if not np.all(np.isfinite(value)):
                raise ShapeError(f"{name}.{key}: non-finite initial values")
            self.tensors[key] = Tensor(value)
            self.state[key] = AdamState(np.zeros_like(value), np.zeros_like(value))

    def __getitem__(self, key):
        return self.tensors[key]

    def __contains__(self, key):
        return key in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    @property
    def names(self):
        return list(self.tensors)

    def values(self):
        return {k: t.value.copy() for k, t in self.tensors.items()}

    def assign(self, values):
        for key, value in values.items():
            if key not in self.tensors:
                raise ShapeError(f"{self.name}: unknown entry {key}")
            value = np.asarray(value, dtype=np.float64)
            if value.shape != self.tensors[key].shape:
                raise ShapeError(f"{self.name}.{key}: expected {self.tensors[key].shape}, got {value.shape}")
            self.tensors[key].value = value.copy()

    def copy(self, name=None, with_state=True):
        clone = ParameterSet(name or self.name, self.values())
        if with_state:
            for key, st in self.state.items():
                clone.state[key] = AdamState(st.m.copy(), st.v.copy(), st.step)
        return clone

    def reset_optimizer(self):
        for key, t in self.tensors.items():
            self.state[key] = AdamState(np.zeros_like(t.value), np.zeros_like(t.value))

    def equals(self, other):
        """Bit-exact comparison of parameter values"""
        return (self.names == other.names and
                all(np.array_equal(self[k].value, other[k].value) for k in self.names))


def merge_entries(*groups):
    merged = {}
    for group in groups:
        merged.update(group)
    return merged


# --- Tape ---

class Tape:
    """
    Records differentiable operations while active.

        with Tape() as tape:
            tape.watch(params)
            loss = some_loss(...)
        grads = tape.gradient(loss)
    """

    def __init__(self):
        self.nodes = []
        self.watched = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        for params in self.watched:
            for t in params.tensors.values():
                t.requires_grad = False
        return False

    def watch(self, *param_sets):
        for params in param_sets:
            if params is None:
                continue
            for t in params.tensors.values():
                t.requires_grad = True
            self.watched.append(params)

    def gradient(self, loss):
        """
        d loss / d p for every entry of every watched ParameterSet.
        :return: {set name: {entry: ndarray}}, zeros for entries not on the tape
        """
        loss = as_tensor(loss)
        if loss.value.size != 1:
            raise GradientError(f"gradient needs a scalar loss, got shape {loss.shape}")
        grads = {id(loss): np.ones_like(loss.value)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if parent is None:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
        result = {}
        for params in self.watched:
            result[params.name] = {
                k: np.array(grads.get(id(t), np.zeros_like(t.value)), dtype=np.float64).reshape(t.shape)
                for k, t in params.tensors.items()
            }
        return result


def grad(loss, tape=None):
    """Gradients of a scalar loss w.r.t. every ParameterSet watched on its tape"""
    tape = tape or as_tensor(loss).tape
    if tape is None:
        raise GradientError("loss was not recorded on a tape; pass the tape explicitly")
    return tape.gradient(loss)


def adam_step(params, grads, lr=config.ADAM_LR, beta1=config.ADAM_BETA1,
              beta2=config.ADAM_BETA2, eps=config.ADAM_EPS):
    """
    Bias-corrected Adam update, in place.
    :param params: ParameterSet
    :param grads: mapping entry -> gradient array, keyed like params
    :return: params
    """
    missing = [k for k in params.names if k not in grads]
    if missing:
        raise GradientError(f"{params.name}: missing gradients for {missing}")
    for key in params.names:
        g = np.asarray(grads[key], dtype=np.float64)
        st = params.state[key]
        st.step += 1
        st.m = beta1 * st.m + (1.0 - beta1) * g
        st.v = beta2 * st.v + (1.0 - beta2) * g * g
        m_hat = st.m / (1.0 - beta1 ** st.step)
        v_hat = st.v / (1.0 - beta2 ** st.step)
        t = params[key]
        t.value = t.value - lr * m_hat / (np.sqrt(v_hat) + eps)
    return params


# --- Dense networks ---

@dataclass(frozen=True)
class MlpSpec:
    layer_widths: tuple
    activation: str = "relu"
    output_activation: str = "none"

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        if len(self.layer_widths) < 2 or min(self.layer_widths) < 1:
            raise ShapeError(f"MlpSpec needs >= 2 positive widths, got {self.layer_widths}")
        if self.activation not in ("relu", "tanh"):
            raise ShapeError(f"unknown activation {self.activation}")
        if self.output_activation not in ("none", "tanh"):
            raise ShapeError(f"unknown output activation {self.output_activation}")

    @property
    def n_layers(self):
        return len(self.layer_widths) - 1

    @property
    def in_dim(self):
        return self.layer_widths[0]

    @property
    def out_dim(self):
        return self.layer_widths[-1]


def init_mlp(spec, rng, prefix=""):
    """uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases"""
    entries = {}
    for i in range(spec.n_layers):
        fan_in, fan_out = spec.layer_widths[i], spec.layer_widths[i + 1]
        bound = 1.0 / math.sqrt(fan_in)
        entries[f"{prefix}W{i}"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        entries[f"{prefix}b{i}"] = np.zeros((1, fan_out))
    return entries


_ACTIVATIONS = {"relu": relu, "tanh": tanh}


def mlp_forward(spec, params, x, prefix=""):
    """
    Forward pass of a dense network.
    :param params: ParameterSet (or mapping) holding {prefix}W{i}, {prefix}b{i}
    :param x: (N, in_dim) input
    :return: (N, out_dim) Tensor
    """
    h = as_tensor(x)
    if h.ndim == 1:
        h = reshape(h, (1, -1))
    for i in range(spec.n_layers):
        W, b = params[f"{prefix}W{i}"], params[f"{prefix}b{i}"]
        if h.shape[-1] != W.shape[0]:
            raise ShapeError(f"layer {prefix}{i}: input width {h.shape[-1]} != expected {W.shape[0]}")
        h = h @ W + b
        if i < spec.n_layers - 1:
            h = _ACTIVATIONS[spec.activation](h)
        elif spec.output_activation == "tanh":
            h = tanh(h)
    return h


# --- Diagonal Gaussians ---

@dataclass
class DiagGaussian:
    mean: Tensor
    log_std: Tensor

    def __post_init__(self):
        self.mean = as_tensor(self.mean)
        self.log_std = as_tensor(self.log_std)
        if self.mean.shape != self.log_std.shape:
            raise ShapeError(f"DiagGaussian: mean {self.mean.shape} vs log_std {self.log_std.shape}")

    @property
    def std(self):
        return exp(self.log_std)


def gaussian_head(out, dim, log_std_min=config.LOG_STD_MIN, log_std_max=config.LOG_STD_MAX):
    """Split a (N, 2*dim) network output into a clamped DiagGaussian"""
    if out.shape[-1] != 2 * dim:
        raise ShapeError(f"gaussian head: expected width {2 * dim}, got {out.shape[-1]}")
    return DiagGaussian(out[:, :dim], clip(out[:, dim:], log_std_min, log_std_max))


def _reduce(x, axis):
    return reduce_sum(x) if axis is None else reduce_sum(x, axis=axis)


def gaussian_log_prob(d, x, axis=None):
    """
    Sum of -0.5 ln(2pi) - log_std - 0.5 ((x - mu)/sigma)^2.
    :param axis: None sums everything (scalar); -1 gives one value per row
    """
    x = as_tensor(x)
    if x.shape != d.mean.shape:
        raise ShapeError(f"gaussian_log_prob: x {x.shape} vs mean {d.mean.shape}")
    z = (x - d.mean) * exp(-d.log_std)
    return _reduce(-HALF_LOG_2PI - d.log_std - 0.5 * z * z, axis)


def sample_reparam(d, noise):
    noise = as_tensor(noise)
    if noise.shape != d.mean.shape:
        raise ShapeError(f"sample_reparam: noise {noise.shape} vs mean {d.mean.shape}")
    return d.mean + exp(d.log_std) * noise


def kl_diag_gaussians(p, q, axis=None):
    """Closed-form KL(p || q) for diagonal Gaussians"""
    if p.mean.shape != q.mean.shape:
        raise ShapeError(f"kl: {p.mean.shape} vs {q.mean.shape}")
    var_p = exp(2.0 * p.log_std)
    inv_var_q = exp(-2.0 * q.log_std)
    diff = p.mean - q.mean
    terms = (q.log_std - p.log_std) + (var_p + diff * diff) * inv_var_q * 0.5 - 0.5
    return _reduce(terms, axis)


def tanh_squash(u, log_prob_u, axis=None):
    """
    a = tanh(u) with the change-of-variables correction
    log(1 - tanh(u)^2) = 2 (ln 2 - u - softplus(-2u)).
    """
    u = as_tensor(u)
    correction = _reduce(2.0 * (math.log(2.0) - u - softplus(-2.0 * u)), axis)
    return tanh(u), log_prob_u - correction


def standard_normal(shape):
    return DiagGaussian(np.zeros(shape), np.zeros(shape))


# --- Serialization helpers for the checkpoint container ---

@dataclass
class SegmentDescriptor:
    name: str
    shape: tuple
    offset: int
    count: int = field(init=False)

    def __post_init__(self):
        self.count = int(np.prod(self.shape)) if len(self.shape) else 1


def flatten_segments(named_arrays, start_offset=0):
    """
    Pack arrays into one little-endian float64 blob.
    :return: (descriptors, bytes); offsets are byte offsets into the blob
    """
    descriptors, chunks, offset = [], [], start_offset
    for name, arr in named_arrays:
        shape = tuple(np.shape(arr))  # ascontiguousarray promotes 0-d arrays to (1,)
        arr = np.ascontiguousarray(arr, dtype="<f8")
        descriptors.append(SegmentDescriptor(name, shape, offset))
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    return descriptors, b"".join(chunks)


def read_segment(blob, descriptor):
    arr = np.frombuffer(blob, dtype="<f8", count=descriptor.count, offset=descriptor.offset)
    return arr.astype(np.float64).reshape(descriptor.shape)
