"""Reverse-mode automatic differentiation over real numpy tensors.

Sized for the network used here rather than full generality: dense affine
maps, concatenation, ReLU, max/mean reductions, batch normalization,
dropout, and the elementwise pieces of the quadratic loss and the power
projection. Operations executed inside a Tape context record a backward
closure; backward() replays the tape once in reverse creation order, so
identical tapes yield bit-identical gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeMismatch(Exception):
    """Operands have incompatible shapes for the requested primitive."""


class NonScalarLoss(Exception):
    """backward() requires a scalar-shaped loss tensor."""


class DegenerateBatch(Exception):
    """Training-mode batchnorm needs at least two rows."""


_ACTIVE_TAPE = None


class Tape:
    """Ordered record of operations for one forward pass.

    Entering the context makes it the recording target; only one tape may
    be active per thread of execution.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a tape is already recording")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False


class Tensor:
    """ndarray wrapper carrying gradient state and a backward rule."""

    __slots__ = ("data", "requires_grad", "grad", "_rule", "_tape")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data)
        if arr.dtype != np.float32:   # single precision passes through
            arr = np.asarray(arr, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._rule = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def parameter(values) -> Tensor:
    return Tensor(np.array(values, dtype=np.float64), requires_grad=True)


def constant(values) -> Tensor:
    return Tensor(values, requires_grad=False)


def _make(data, rule, *parents) -> Tensor:
    """Wrap an op result; record the backward rule if a tape is active."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._rule = None
    out._tape = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if _ACTIVE_TAPE is not None and out.requires_grad:
        out._rule = rule
        out._tape = _ACTIVE_TAPE
        _ACTIVE_TAPE.nodes.append(out)
    return out


def _accum(t: Tensor, g: np.ndarray):
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to `shape`, inverting numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(loss: Tensor):
    """Populate .grad on every requires_grad leaf reachable from loss.

    Visits the recording tape once in reverse creation order. Leaf
    gradients accumulate; call zero_grads() between steps.
    """
    if loss.data.size != 1:
        raise NonScalarLoss(f"loss has shape {loss.data.shape}")
    tape = loss._tape
    if tape is None:
        raise NonScalarLoss("loss was not recorded on a tape")
    for node in tape.nodes:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        g = node.grad
        if g is None or node._rule is None:
            continue
        node._rule(g)
        node.grad = None  # free intermediates as the sweep retires them
    # nodes, rule closures, and the tape reference each other in cycles;
    # unlink them so the big intermediate arrays free by refcount instead
    # of waiting on the cycle collector
    for node in tape.nodes:
        node._rule = None
        node._tape = None
        node.grad = None
    tape.nodes.clear()


def zero_grads(params):
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def rule(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(data, rule, a, b)


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def rule(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(data, rule, a, b)


def scale(a: Tensor, c: float) -> Tensor:
    data = a.data * c

    def rule(g):
        _accum(a, g * c)

    return _make(data, rule, a)


def matmul(a: Tensor, w: Tensor) -> Tensor:
    """a (..., m) @ w (m, k). Weights are always the 2-D right operand."""
    if w.data.ndim != 2 or a.data.shape[-1] != w.data.shape[0]:
        raise ShapeMismatch(f"matmul {a.data.shape} @ {w.data.shape}")
    data = a.data @ w.data

    def rule(g):
        if a.requires_grad:
            _accum(a, g @ w.data.T)
        if w.requires_grad:
            batch = tuple(range(a.data.ndim - 1))
            _accum(w, np.tensordot(a.data, g, axes=(batch, batch)))

    return _make(data, rule, a, w)


def affine(a: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """a @ w + b in one op: the bias lands in the product's buffer."""
    if w.data.ndim != 2 or a.data.shape[-1] != w.data.shape[0] \
            or b.data.shape != (w.data.shape[1],):
        raise ShapeMismatch(f"affine {a.data.shape} @ {w.data.shape} + {b.data.shape}")
    data = a.data @ w.data
    data += b.data

    def rule(g):
        if a.requires_grad:
            _accum(a, g @ w.data.T)
        if w.requires_grad:
            batch = tuple(range(a.data.ndim - 1))
            _accum(w, np.tensordot(a.data, g, axes=(batch, batch)))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.data.shape))

    return _make(data, rule, a, w, b)


def batched_matvec(mats: np.ndarray, x: Tensor) -> Tensor:
    """Per-sample matrix-vector product: (B,m,m) constants times (B,m)."""
    if x.data.shape != mats.shape[:2] or mats.shape[1] != mats.shape[2]:
        raise ShapeMismatch(f"batched_matvec {mats.shape} with {x.data.shape}")
    data = np.einsum("bij,bj->bi", mats, x.data)

    def rule(g):
        _accum(x, np.einsum("bij,bi->bj", mats, g))

    return _make(data, rule, x)


def concat(tensors, axis: int) -> Tensor:
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]

    def rule(g):
        for t, piece in zip(tensors, np.split(g, sizes, axis=axis)):
            _accum(t, piece)

    return _make(data, rule, *tensors)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    data = np.where(mask, a.data, 0.0)

    def rule(g):
        _accum(a, g * mask)

    return _make(data, rule, a)


def reduce_max(a: Tensor, axis: int) -> Tensor:
    data = a.data.max(axis=axis)
    idx = a.data.argmax(axis=axis)  # first index on ties

    def rule(g):
        gz = np.zeros_like(a.data)
        np.put_along_axis(gz, np.expand_dims(idx, axis),
                          np.expand_dims(g, axis), axis)
        _accum(a, gz)

    return _make(data, rule, a)


def reduce_mean(a: Tensor, axis: int) -> Tensor:
    n = a.data.shape[axis]
    data = a.data.mean(axis=axis)

    def rule(g):
        _accum(a, np.broadcast_to(np.expand_dims(g / n, axis), a.data.shape))

    return _make(data, rule, a)


def tsum(a: Tensor, axis=None) -> Tensor:
    data = a.data.sum(axis=axis)

    def rule(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape))
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            gx = g
            for ax in sorted(axes):
                gx = np.expand_dims(gx, ax)
            _accum(a, np.broadcast_to(gx, a.data.shape))

    return _make(data, rule, a)


def square(a: Tensor) -> Tensor:
    data = a.data * a.data

    def rule(g):
        _accum(a, g * (2.0 * a.data))

    return _make(data, rule, a)


def tsqrt(a: Tensor) -> Tensor:
    data = np.sqrt(a.data)

    def rule(g):
        _accum(a, g * (0.5 / data))

    return _make(data, rule, a)


def clamp_min(a: Tensor, floor: float) -> Tensor:
    mask = a.data > floor
    data = np.where(mask, a.data, floor)

    def rule(g):
        _accum(a, g * mask)

    return _make(data, rule, a)


def reciprocal(a: Tensor) -> Tensor:
    data = 1.0 / a.data

    def rule(g):
        _accum(a, -g * data * data)

    return _make(data, rule, a)


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)

    def rule(g):
        _accum(a, g.reshape(a.data.shape))

    return _make(data, rule, a)


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    data = np.swapaxes(a.data, ax1, ax2)

    def rule(g):
        _accum(a, np.swapaxes(g, ax1, ax2))

    return _make(data, rule, a)


def select_rows(a: Tensor, idx: np.ndarray, unique: bool = False) -> Tensor:
    """Gather rows along axis 0. Pass unique=True when idx has no repeats
    so the backward scatter can use plain assignment instead of add.at."""
    data = a.data[idx]

    def rule(g):
        gz = np.zeros_like(a.data)
        if unique:
            gz[idx] = g
        else:
            np.add.at(gz, idx, g)
        _accum(a, gz)

    return _make(data, rule, a)


def dropout_rng(seed: int, epoch: int, batch: int, layer: int) -> np.random.Generator:
    """Counter-based dropout stream: the (seed, epoch, batch, layer) tuple is
    packed into a Philox key, so masks are reproducible and order-independent."""
    if not (0 <= epoch < 2**31 and 0 <= batch < 2**20 and 0 <= layer < 2**12):
        raise ValueError("dropout key component out of range")
    packed = (epoch << 32) | (batch << 12) | layer
    return np.random.Generator(np.random.Philox(key=np.array([seed, packed], dtype=np.uint64)))


def dropout(a: Tensor, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: survivors scaled by 1/(1-rate). Identity in eval.

    Keep decisions come from raw 32-bit generator words (one per element)
    compared against floor(rate * 2^32), so masks cost half the random bits
    of a float draw at an immaterial rate quantization.
    """
    if not training or rate == 0.0:
        return a
    threshold = int(rate * 2 ** 32)
    words = rng.integers(0, 2 ** 32, size=a.data.shape, dtype=np.uint32)
    mask = (words >= threshold).astype(a.data.dtype)
    mask *= 1.0 / (1.0 - rate)
    data = a.data * mask

    def rule(g):
        _accum(a, g * mask)

    return _make(data, rule, a)


class BatchNormState:
    """Running statistics for one batchnorm layer (mutated during training)."""

    def __init__(self, channels: int):
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def copy(self):
        s = BatchNormState(len(self.running_mean))
        s.running_mean = self.running_mean.copy()
        s.running_var = self.running_var.copy()
        return s


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
              training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Normalize (N, C) rows per channel; learnable scale/shift.

    Training mode normalizes by biased batch statistics and folds them into
    the running estimates (unbiased variance, torch convention). Eval mode
    uses the running estimates.
    """
    if x.data.ndim != 2 or x.data.shape[1] != gamma.data.shape[0]:
        raise ShapeMismatch(f"batchnorm on {x.data.shape} with {gamma.data.shape} channels")
    if training:
        n = x.data.shape[0]
        if n < 2:
            raise DegenerateBatch(f"batch of {n} rows")
        mu = x.data.mean(axis=0)
        xhat = x.data - mu
        var = np.einsum("nc,nc->c", xhat, xhat) / n   # biased, mean((x-mu)^2)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat *= inv_std
        state.running_mean += momentum * (mu - state.running_mean)
        state.running_var += momentum * (var * n / (n - 1) - state.running_var)

        def rule(g):
            if gamma.requires_grad:
                _accum(gamma, np.einsum("nc,nc->c", g, xhat))
            if beta.requires_grad:
                _accum(beta, g.sum(axis=0))
            if x.requires_grad:
                dxhat = g * gamma.data
                term = xhat * (np.einsum("nc,nc->c", dxhat, xhat) / n)
                term += dxhat.sum(axis=0) / n
                dxhat -= term
                dxhat *= inv_std
                _accum(x, dxhat)

        return _make(gamma.data * xhat + beta.data, rule, x, gamma, beta)

    inv_std = 1.0 / np.sqrt(state.running_var + eps)
    xhat = (x.data - state.running_mean) * inv_std

    def rule(g):
        if gamma.requires_grad:
            _accum(gamma, np.einsum("nc,nc->c", g, xhat))
        if beta.requires_grad:
            _accum(beta, g.sum(axis=0))
        if x.requires_grad:
            _accum(x, g * (gamma.data * inv_std))

    return _make(gamma.data * xhat + beta.data, rule, x, gamma, beta)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    """Adaptive-moment estimates, one slot pair per parameter."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def optimizer_step(params, state: OptimizerState):
    """One adaptive-moment update with bias correction, in place."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeMismatch(f"grad {g.shape} for parameter {p.data.shape}")
        m += (1.0 - b1) * (g - m)
        v += (1.0 - b2) * (g * g - v)
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
