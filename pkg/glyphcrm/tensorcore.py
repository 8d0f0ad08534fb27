#!/usr/bin/env python
# encoding: utf-8
"""
copyright (c) 2024 GlyphCRM contributors.
All rights reserved

Dense tensors with tape-based reverse-mode differentiation and Adam.

Values are numpy arrays (float32 unless a different precision is active).
Operations executed while a Tape is active and involving a tensor that
requires gradients are recorded; Tape.backward replays them in exact reverse
order and sums gradients across fan-out.

    with Tape() as tape:
        loss = cross_entropy(linear(x, w, b), targets)
    tape.backward(loss)
    w.grad
"""
from __future__ import annotations

# Imports from Standard Library
import math
from collections import namedtuple
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, Optional, Sequence, Union

# Imports from Third Party Modules
import numpy as np

# Local Imports
from glyphcrm.constants import IGNORE_ID
from glyphcrm.exceptions import ContractError, DimensionError, NonFiniteError

# Setup
_STATE = {'dtype': np.float32, 'tapes': []}

# Constants
MASK_SCORE = -1e9

# Data Structure Definitions
Record = namedtuple('Record', 'name inputs output backward')

# Private Functions


def _shape_error(name, *shapes):
    return DimensionError(
        '{}: incompatible shapes {}'.format(
            name, ' and '.join(str(tuple(s)) for s in shapes)
        )
    )


def _active_tape():
    return _STATE['tapes'][-1] if _STATE['tapes'] else None


def _emit(name, inputs, data, backward):
    """Wrap an op result and record it when gradients are needed."""
    out = Tensor(data, dtype=data.dtype)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.records.append(Record(name, tuple(inputs), out, backward))
    return out


def _as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(value)


# Public Classes and Functions

def get_default_dtype():
    return _STATE['dtype']


@contextmanager
def precision(dtype):
    """Temporarily create tensors with dtype (e.g. float64 for oracles)."""
    previous = _STATE['dtype']
    _STATE['dtype'] = np.dtype(dtype).type
    try:
        yield
    finally:
        _STATE['dtype'] = previous


class Tensor(object):
    """A dense array with an optional gradient slot."""
    __slots__ = ('data', 'requires_grad', 'grad', '__weakref__')

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = np.ascontiguousarray(
            np.asarray(data, dtype=dtype or get_default_dtype())
        )
        self.requires_grad = requires_grad
        self.grad = None

    def __repr__(self):
        return 'Tensor(shape={}, dtype={}{})'.format(
            self.shape, self.data.dtype,
            ', requires_grad=True' if self.requires_grad else ''
        )

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


class Tape(object):
    """Ordered record of executed operations."""

    def __init__(self):
        self.records = []

    def __enter__(self):
        _STATE['tapes'].append(self)
        return self

    def __exit__(self, *exc):
        _STATE['tapes'].remove(self)
        return False

    def __len__(self):
        return len(self.records)

    def backward(self, loss, grad=None):
        """Propagate d(loss) back through every recorded operation.

        Leaf tensors (requires_grad, not produced by a recorded op) receive
        their gradient in .grad, replacing any previous value.

        :param loss: tensor to differentiate, normally a scalar
        :param grad: seed gradient, defaults to ones
        :return: dict mapping leaf tensors to their gradient arrays
        """
        seed = np.ones_like(loss.data) if grad is None else np.asarray(
            grad, dtype=loss.data.dtype
        )
        grads = {id(loss): seed}
        produced = set()
        leaves = {}
        for record in reversed(self.records):
            produced.add(id(record.output))
            g_out = grads.pop(id(record.output), None)
            if g_out is None:
                continue
            input_grads = record.backward(g_out)
            for tensor, g_in in zip(record.inputs, input_grads):
                if g_in is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + g_in
                else:
                    grads[key] = g_in
                leaves[key] = tensor
        result = {}
        for key, tensor in leaves.items():
            if key in produced or key not in grads:
                continue
            tensor.grad = grads[key].astype(tensor.data.dtype, copy=False)
            result[tensor] = tensor.grad
        if loss.requires_grad and id(loss) not in produced:
            loss.grad = seed
            result[loss] = seed
        return result


# Elementwise and shape operations

def add(a, b):
    # type: (Tensor, Tensor) -> Tensor
    """Elementwise sum of two tensors of identical shape."""
    if a.shape != b.shape:
        raise _shape_error('add', a.shape, b.shape)
    return _emit('add', (a, b), a.data + b.data, lambda g: (g, g))


def mul(a, b):
    # type: (Tensor, Union[Tensor, float]) -> Tensor
    """Elementwise product with a same-shape tensor or a python scalar."""
    if not isinstance(b, Tensor):
        scale = float(b)
        return _emit(
            'scale', (a,), a.data * a.data.dtype.type(scale),
            lambda g: (g * g.dtype.type(scale),)
        )
    if a.shape != b.shape:
        raise _shape_error('mul', a.shape, b.shape)
    x, y = a.data, b.data
    return _emit('mul', (a, b), x * y, lambda g: (g * y, g * x))


def reduce_sum(x):
    # type: (Tensor) -> Tensor
    """Sum of all elements as a scalar tensor (64-bit accumulation)."""
    dtype = x.data.dtype
    total = np.asarray(x.data.sum(dtype=np.float64), dtype=dtype)
    shape = x.shape
    return _emit(
        'sum', (x,), total,
        lambda g: (np.broadcast_to(g, shape).astype(dtype),)
    )


def reshape(x, shape):
    # type: (Tensor, Sequence[int]) -> Tensor
    original = x.shape
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise _shape_error('reshape', original, shape)
    return _emit('reshape', (x,), data, lambda g: (g.reshape(original),))


def transpose(x, axes):
    # type: (Tensor, Sequence[int]) -> Tensor
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _emit(
        'transpose', (x,), np.ascontiguousarray(x.data.transpose(axes)),
        lambda g: (np.ascontiguousarray(g.transpose(inverse)),)
    )


def take(table, ids):
    # type: (Tensor, np.ndarray) -> Tensor
    """Gather rows of table: out[...] = table[ids[...]].

    Used for position/segment embeddings and to scatter de-duplicated glyph
    states back to token positions.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DimensionError(
            'take: ids outside [0, {})'.format(table.shape[0])
        )
    shape = table.shape

    def backward(g):
        grad = np.zeros(shape, dtype=g.dtype)
        np.add.at(grad, ids.reshape(-1), g.reshape((-1,) + shape[1:]))
        return (grad,)

    return _emit('take', (table,), table.data[ids], backward)


def matmul(a, b):
    # type: (Tensor, Tensor) -> Tensor
    """Batched matrix product over the last two axes; leading axes must
    match exactly."""
    if (a.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2]
            or a.shape[-1] != b.shape[-2]):
        raise _shape_error('matmul', a.shape, b.shape)
    x, y = a.data, b.data
    return _emit(
        'matmul', (a, b), np.matmul(x, y),
        lambda g: (np.matmul(g, np.swapaxes(y, -1, -2)),
                   np.matmul(np.swapaxes(x, -1, -2), g))
    )


# Layers

def relu(x):
    # type: (Tensor) -> Tensor
    """max(0, x); the subgradient at 0 is 0."""
    mask = x.data > 0
    return _emit('relu', (x,), np.where(mask, x.data, 0).astype(x.data.dtype),
                 lambda g: (g * mask,))


def linear(x, weight, bias):
    # type: (Tensor, Tensor, Tensor) -> Tensor
    """Affine map over the last axis: x @ weight + bias.

    :param x: ... x D_in
    :param weight: D_in x D_out
    :param bias: D_out
    """
    if (weight.ndim != 2 or x.shape[-1] != weight.shape[0]
            or bias.shape != (weight.shape[1],)):
        raise _shape_error('linear', x.shape, weight.shape, bias.shape)
    d_in, d_out = weight.shape
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, d_in)
    w = weight.data
    out = (x2 @ w + bias.data).reshape(lead + (d_out,))

    def backward(g):
        g2 = g.reshape(-1, d_out)
        return (
            (g2 @ w.T).reshape(lead + (d_in,)),
            x2.T @ g2,
            g2.sum(axis=0, dtype=np.float64).astype(g.dtype),
        )

    return _emit('linear', (x, weight, bias), out, backward)


def conv2d(x, kernel, bias, stride=1, padding=0):
    # type: (Tensor, Tensor, Tensor, int, int) -> Tensor
    """Direct 2-D cross-correlation plus bias.

    :param x: N x C_in x H x W
    :param kernel: C_out x C_in x k x k
    :param bias: C_out
    :param stride: step between windows
    :param padding: zero padding on every side
    :return: N x C_out x H' x W' with H' = (H + 2p - k) // s + 1
    """
    if (x.ndim != 4 or kernel.ndim != 4 or x.shape[1] != kernel.shape[1]
            or kernel.shape[2] != kernel.shape[3]
            or bias.shape != (kernel.shape[0],)):
        raise _shape_error('conv2d', x.shape, kernel.shape, bias.shape)
    n, c_in, height, width = x.shape
    c_out, _, k, _ = kernel.shape
    if height + 2 * padding < k or width + 2 * padding < k:
        raise _shape_error('conv2d', x.shape, kernel.shape)
    out_h = (height + 2 * padding - k) // stride + 1
    out_w = (width + 2 * padding - k) // stride + 1
    xp = np.pad(
        x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))
    )
    w = kernel.data
    span_h = stride * (out_h - 1) + 1
    span_w = stride * (out_w - 1) + 1

    # accumulate one kernel offset at a time: N x H' x W' x C_out
    out = np.zeros((n, out_h, out_w, c_out), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            window = xp[:, :, i:i + span_h:stride, j:j + span_w:stride]
            out += np.tensordot(window, w[:, :, i, j], axes=([1], [1]))
    out = out.transpose(0, 3, 1, 2) + bias.data.reshape(1, c_out, 1, 1)

    def backward(g):
        grad_xp = np.zeros_like(xp)
        grad_w = np.zeros_like(w)
        for i in range(k):
            for j in range(k):
                window = xp[:, :, i:i + span_h:stride, j:j + span_w:stride]
                grad_w[:, :, i, j] = np.tensordot(
                    g, window, axes=([0, 2, 3], [0, 2, 3])
                )
                grad_xp[:, :, i:i + span_h:stride, j:j + span_w:stride] += \
                    np.tensordot(g, w[:, :, i, j], axes=([1], [0])) \
                    .transpose(0, 3, 1, 2)
        grad_x = grad_xp[:, :, padding:padding + height,
                         padding:padding + width]
        grad_b = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(g.dtype)
        return np.ascontiguousarray(grad_x), grad_w, grad_b

    return _emit('conv2d', (x, kernel, bias), np.ascontiguousarray(out),
                 backward)


def maxpool2d(x):
    # type: (Tensor) -> Tensor
    """2x2 max pooling with stride 2.

    Ties resolve to the first position in row-major order, which also
    receives the whole gradient.
    """
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise DimensionError(
            'maxpool2d: extents of {} must be even'.format(tuple(x.shape))
        )
    n, c, height, width = x.shape
    windows = x.data.reshape(n, c, height // 2, 2, width // 2, 2) \
        .transpose(0, 1, 2, 4, 3, 5).reshape(n, c, height // 2, width // 2, 4)
    winner = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, winner[..., None], axis=-1)[..., 0]

    def backward(g):
        routed = np.zeros(windows.shape, dtype=g.dtype)
        np.put_along_axis(routed, winner[..., None], g[..., None], axis=-1)
        grad = routed.reshape(n, c, height // 2, width // 2, 2, 2) \
            .transpose(0, 1, 2, 4, 3, 5).reshape(n, c, height, width)
        return (np.ascontiguousarray(grad),)

    return _emit('maxpool2d', (x,), np.ascontiguousarray(out), backward)


def layer_norm(x, gain, shift, eps=1e-5):
    # type: (Tensor, Tensor, Tensor, float) -> Tensor
    """Standardize over the last axis, then scale and shift.

    Statistics are accumulated in 64-bit; eps sits inside the square root.
    """
    width = x.shape[-1]
    if gain.shape != (width,) or shift.shape != (width,):
        raise _shape_error('layer_norm', x.shape, gain.shape, shift.shape)
    dtype = x.data.dtype
    xd = x.data.astype(np.float64)
    centered = xd - xd.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True)
                            + eps)
    normed = centered * inv_std
    out = (normed * gain.data + shift.data).astype(dtype)

    def backward(g):
        gd = g.astype(np.float64)
        g_normed = gd * gain.data
        grad_x = inv_std * (
            g_normed
            - g_normed.mean(axis=-1, keepdims=True)
            - normed * (g_normed * normed).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return (
            grad_x.astype(dtype),
            (gd * normed).sum(axis=lead).astype(gain.data.dtype),
            gd.sum(axis=lead).astype(shift.data.dtype),
        )

    return _emit('layer_norm', (x, gain, shift), out, backward)


def softmax(x, mask=None):
    # type: (Tensor, Optional[np.ndarray]) -> Tensor
    """Softmax over the last axis.

    :param x: scores
    :param mask: optional boolean array broadcastable to x; False entries
        receive an additive -1e9 before normalization
    """
    dtype = x.data.dtype
    scores = x.data.astype(np.float64)
    if mask is not None:
        scores = scores + np.where(np.asarray(mask, dtype=bool), 0.0,
                                   MASK_SCORE)
    scores = scores - scores.max(axis=-1, keepdims=True)
    exp = np.exp(scores)
    probs = exp / exp.sum(axis=-1, keepdims=True)
    out = probs.astype(dtype)

    def backward(g):
        gd = g.astype(np.float64)
        dot = (gd * probs).sum(axis=-1, keepdims=True)
        return ((probs * (gd - dot)).astype(dtype),)

    return _emit('softmax', (x,), out, backward)


def cross_entropy(logits, targets, ignore_id=IGNORE_ID):
    # type: (Tensor, np.ndarray, int) -> Tensor
    """Mean negative log-likelihood over rows whose target is not ignored.

    :param logits: N x V
    :param targets: N integer ids in [0, V) or ignore_id
    :return: scalar tensor; 0 with zero gradient when every row is ignored
    """
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise _shape_error('cross_entropy', logits.shape, targets.shape)
    dtype = logits.data.dtype
    keep = targets != ignore_id
    count = int(keep.sum())
    if count and (targets[keep].min() < 0
                  or targets[keep].max() >= logits.shape[1]):
        raise DimensionError(
            'cross_entropy: targets outside [0, {})'.format(logits.shape[1])
        )
    scores = logits.data.astype(np.float64)
    scores = scores - scores.max(axis=-1, keepdims=True)
    log_norm = np.log(np.exp(scores).sum(axis=-1, keepdims=True))
    log_probs = scores - log_norm
    rows = np.nonzero(keep)[0]
    if count:
        loss = -log_probs[rows, targets[rows]].sum() / count
    else:
        loss = 0.0

    def backward(g):
        grad = np.zeros(logits.shape, dtype=np.float64)
        if count:
            grad[rows] = np.exp(log_probs[rows])
            grad[rows, targets[rows]] -= 1.0
            grad *= float(g) / count
        return (grad.astype(dtype),)

    return _emit('cross_entropy', (logits,), np.asarray(loss, dtype=dtype),
                 backward)


# Optimization

@dataclass
class AdamState:
    """First/second moments per parameter name and the step counter."""
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params, grads, state, lr_t, beta1=0.9, beta2=0.999, eps=1e-8,
              weight_decay=0.01):
    # type: (Mapping[str, Tensor], Mapping[str, np.ndarray], AdamState, float, float, float, float, float) -> AdamState  # noqa
    """Apply one bias-corrected Adam update with decoupled weight decay.

    Each parameter is first shrunk by lr_t * weight_decay * param, then moved
    by the Adam step. Gradients are validated before anything is modified,
    so a non-finite gradient leaves parameters and state untouched.

    :param params: name -> parameter tensor, updated in place
    :param grads: name -> gradient array; missing names count as zero
    :param state: moments and step counter, updated in place
    :param lr_t: learning rate for this step
    :return: state
    """
    for name, grad in grads.items():
        if grad is not None and not np.all(np.isfinite(grad)):
            raise NonFiniteError('non-finite gradient', name)
    state.t += 1
    t = state.t
    correction1 = 1.0 - beta1 ** t
    correction2 = 1.0 - beta2 ** t
    for name, param in params.items():
        grad = grads.get(name)
        data = param.data.astype(np.float64)
        g = (np.zeros_like(data) if grad is None
             else np.asarray(grad, dtype=np.float64))
        if g.shape != data.shape:
            raise _shape_error('adam_step ' + name, data.shape, g.shape)
        m = state.m.get(name)
        v = state.v.get(name)
        m = np.zeros_like(data) if m is None else m.astype(np.float64)
        v = np.zeros_like(data) if v is None else v.astype(np.float64)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        data = data - lr_t * weight_decay * data
        data = data - lr_t * (m / correction1) / (
            np.sqrt(v / correction2) + eps
        )
        param.data = data.astype(param.data.dtype)
        state.m[name] = m.astype(param.data.dtype)
        state.v[name] = v.astype(param.data.dtype)
    return state


# Gradient checking

@dataclass
class GradCheckReport:
    """Outcome of comparing tape gradients with finite differences."""
    passed: bool
    max_rel_error: float
    tolerance: float
    checked: int
    excluded: int
    errors: Dict[str, np.ndarray] = field(default_factory=dict, repr=False)


def grad_check(f, point, tolerance=1e-3, step=1e-3, exclude=None,
               coords=None, seed=0, floor=1e-3):
    # type: (Callable, Union[np.ndarray, Mapping[str, np.ndarray]], float, float, Optional[Mapping], Optional[int], int, float) -> GradCheckReport  # noqa
    """Compare the tape gradient of a scalar function with central
    differences evaluated in 64-bit arithmetic.

    The relative error of a coordinate is |a - n| / max(|a|, |n|, floor),
    so gradients far below floor are compared absolutely.

    :param f: callable taking a Tensor (or dict of Tensors, matching point)
        and returning a scalar Tensor
    :param point: array or dict name -> array at which to differentiate
    :param tolerance: pass iff the largest relative error is below this
    :param step: finite-difference step
    :param exclude: boolean mask (or dict of masks) of coordinates to skip.
        Kinks are not detected here: the caller masks coordinates where a
        relu input is exactly 0 (or within step of it), otherwise the
        one-sided subgradient 0 is compared against a central difference
        of 0.5 and the check fails
    :param coords: if given, check only this many randomly chosen
        coordinates per input
    :param seed: seed for the coordinate sample
    :param floor: denominator floor for the relative error
    :return: GradCheckReport
    """
    single = not isinstance(point, Mapping)
    points = {'x': point} if single else dict(point)
    masks = {'x': exclude} if single else dict(exclude or {})
    rng = np.random.default_rng(seed)

    def call(values, record):
        tensors = {
            name: Tensor(value, requires_grad=record, dtype=np.float64)
            for name, value in values.items()
        }
        out = f(tensors['x'] if single else tensors)
        if out.size != 1:
            raise ContractError('grad_check needs a scalar function')
        return out, tensors

    with precision(np.float64):
        base = {name: np.array(value, dtype=np.float64)
                for name, value in points.items()}
        with Tape() as tape:
            out, tensors = call(base, True)
        tape.backward(out)
        analytic = {
            name: (np.zeros_like(base[name]) if tensor.grad is None
                   else np.asarray(tensor.grad, dtype=np.float64))
            for name, tensor in tensors.items()
        }

        worst = 0.0
        checked = excluded = 0
        errors = {}
        for name, value in base.items():
            rel = np.full(value.shape, np.nan)
            flat = np.arange(value.size)
            if coords is not None and coords < value.size:
                flat = np.sort(rng.choice(value.size, coords, replace=False))
            mask = masks.get(name)
            mask = (None if mask is None
                    else np.asarray(mask, dtype=bool).reshape(-1))
            for index in flat:
                if mask is not None and mask[index]:
                    excluded += 1
                    continue
                coord = np.unravel_index(index, value.shape)
                original = value[coord]
                value[coord] = original + step
                upper = float(call(base, False)[0].data)
                value[coord] = original - step
                lower = float(call(base, False)[0].data)
                value[coord] = original
                numeric = (upper - lower) / (2.0 * step)
                tape_grad = analytic[name][coord]
                err = abs(tape_grad - numeric) / max(
                    abs(tape_grad), abs(numeric), floor
                )
                rel[coord] = err
                worst = max(worst, err)
                checked += 1
            errors[name] = rel
    if not math.isfinite(worst):  # pragma: no cover
        worst = float('inf')
    return GradCheckReport(
        passed=worst < tolerance, max_rel_error=worst, tolerance=tolerance,
        checked=checked, excluded=excluded, errors=errors
    )
