#!/usr/bin/env python
# encoding: utf-8
"""
copyright (c) 2024 GlyphCRM contributors.
All rights reserved

Unit tests for glyphcrm.tensorcore.
"""

# Imports from Standard Library
import math
from unittest import TestCase

# Imports from Third Party Modules
import numpy as np
from numpy.testing import assert_allclose, assert_array_equal

# Local Imports
from glyphcrm.constants import IGNORE_ID
from glyphcrm.exceptions import DimensionError, NonFiniteError
from glyphcrm.tensorcore import (
    AdamState,
    Tape,
    Tensor,
    _emit,
    adam_step,
    add,
    conv2d,
    cross_entropy,
    grad_check,
    layer_norm,
    linear,
    matmul,
    maxpool2d,
    mul,
    precision,
    reduce_sum,
    relu,
    reshape,
    softmax,
    take,
    transpose,
)

# Constants
SEEDS = range(5)


# Helper Functions & Classes

def weighted(out, seed=99):
    """Scalar sum(out * R) for a fixed random R."""
    rng = np.random.default_rng(seed)
    return reduce_sum(mul(out, Tensor(rng.normal(size=out.shape),
                                      dtype=out.data.dtype)))


def naive_conv(x, w, b, stride, padding):
    n, c_in, height, width = x.shape
    c_out, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out_h = (height + 2 * padding - k) // stride + 1
    out_w = (width + 2 * padding - k) // stride + 1
    out = np.zeros((n, c_out, out_h, out_w))
    for i in range(n):
        for o in range(c_out):
            for r in range(out_h):
                for c in range(out_w):
                    patch = xp[i, :, r * stride:r * stride + k,
                               c * stride:c * stride + k]
                    out[i, o, r, c] = (patch * w[o]).sum() + b[o]
    return out


# Tests
class TestTape(TestCase):
    """Tape recording and replay."""

    def test_fan_out_sums(self):
        """Test gradients of a reused tensor accumulate."""
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        with Tape() as tape:
            y = reduce_sum(add(mul(x, x), x))
        tape.backward(y)
        assert_allclose(x.grad, [3.0, 5.0])

    def test_records_only_when_needed(self):
        """Test constant-only operations are not recorded."""
        x = Tensor(np.ones(3))
        w = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            add(x, x)
            self.assertEqual(len(tape), 0)
            add(x, w)
        self.assertEqual(len(tape), 1)
        self.assertFalse(add(x, w).requires_grad)

    def test_unused_leaf_has_no_gradient(self):
        x = Tensor(np.ones(2), requires_grad=True)
        unused = Tensor(np.ones(2), requires_grad=True)
        with Tape() as tape:
            y = reduce_sum(x)
        grads = tape.backward(y)
        self.assertIn(x, grads)
        self.assertNotIn(unused, grads)
        self.assertIsNone(unused.grad)

    def test_default_dtype(self):
        self.assertEqual(Tensor([1.0]).data.dtype, np.float32)
        with precision(np.float64):
            self.assertEqual(Tensor([1.0]).data.dtype, np.float64)
        self.assertEqual(Tensor([1.0]).data.dtype, np.float32)

    def test_shape_errors(self):
        with self.assertRaises(DimensionError):
            add(Tensor(np.ones(2)), Tensor(np.ones(3)))
        with self.assertRaises(DimensionError):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
        with self.assertRaises(DimensionError):
            take(Tensor(np.ones((2, 3))), np.array([2]))


class TestPrimitiveGradients(TestCase):
    """Gradient checks of every primitive, five seeds each."""

    def check(self, f, point, tolerance, **kwargs):
        report = grad_check(f, point, tolerance=tolerance, **kwargs)
        self.assertTrue(
            report.passed,
            'max relative error {:.3g} >= {}'.format(report.max_rel_error,
                                                     tolerance)
        )
        self.assertGreater(report.checked, 0)

    def test_linear(self):
        for seed in SEEDS:
            rng = np.random.default_rng(seed)
            point = {'x': rng.normal(size=(2, 3, 4)),
                     'w': rng.normal(size=(4, 5)),
                     'b': rng.normal(size=5)}
            self.check(
                lambda t: weighted(linear(t['x'], t['w'], t['b'])), point,
                1e-6, step=1e-5
            )

    def test_softmax(self):
        for seed in SEEDS:
            rng = np.random.default_rng(seed)
            mask = rng.random((3, 6)) < 0.8
            mask[:, 0] = True
            self.check(lambda t: weighted(softmax(t, mask=mask)),
                       rng.normal(size=(3, 6)), 1e-6, step=1e-5)

    def test_layer_norm(self):
        for seed in SEEDS:
            rng = np.random.default_rng(seed)
            point = {'x': rng.normal(size=(3, 8)),
                     'g': rng.normal(size=8), 's': rng.normal(size=8)}
            self.check(
                lambda t: weighted(layer_norm(t['x'], t['g'], t['s'])),
                point, 1e-6, step=1e-5
            )

    def test_matmul_and_shapes(self):
        for seed in SEEDS:
            rng = np.random.default_rng(seed)
            point = {'a': rng.normal(size=(2, 3, 4)),
                     'b': rng.normal(size=(2, 4, 2))}

            def f(t):
                out = transpose(matmul(t['a'], t['b']), (0, 2, 1))
                return weighted(reshape(out, (4, 3)))
            self.check(f, point, 1e-3)

    def test_add_mul_take(self):
        for seed in SEEDS:
            rng = np.random.default_rng(seed)
            ids = np.array([[0, 2], [2, 1]])
            point = {'table': rng.normal(size=(3, 4)),
                     'other': rng.normal(size=(2, 2, 4))}

            def f(t):
                rows = take(t['table'], ids)
                return weighted(mul(add(rows, t['other']), rows) * 0.5)
            self.check(f, point, 1e-3)

    def test_relu(self):
        for seed in SEEDS:
            x = np.random.default_rng(seed).normal(size=(4, 5))
            self.check(lambda t: weighted(relu(t)), x, 1e-3,
                       exclude=np.abs(x) < 1e-2)

    def test_conv2d(self):
        for seed in SEEDS:
            rng = np.random.default_rng(seed)
            point = {'x': rng.normal(size=(2, 2, 6, 6)),
                     'k': rng.normal(size=(3, 2, 3, 3)),
                     'b': rng.normal(size=3)}
            for stride in (1, 2):
                self.check(
                    lambda t: weighted(conv2d(t['x'], t['k'], t['b'],
                                              stride=stride, padding=1)),
                    point, 1e-3
                )

    def test_maxpool2d(self):
        for seed in SEEDS:
            rng = np.random.default_rng(seed)
            # values 0.1 apart so no finite-difference step crosses a tie
            x = rng.permutation(32).reshape(1, 2, 4, 4) * 0.1
            self.check(lambda t: weighted(maxpool2d(t)), x, 1e-3)

    def test_cross_entropy(self):
        for seed in SEEDS:
            rng = np.random.default_rng(seed)
            targets = np.array([1, IGNORE_ID, 0, 4])
            self.check(lambda t: cross_entropy(t, targets),
                       rng.normal(size=(4, 5)), 1e-3)

    def test_detects_wrong_gradient(self):
        """Test grad_check fails an op whose backward is wrong."""
        def doubled(t):
            return _emit('bad', (t,), t.data * 2.0, lambda g: (g * 3.0,))
        report = grad_check(lambda t: reduce_sum(doubled(t)), np.ones(3))
        self.assertFalse(report.passed)
        assert_allclose(report.max_rel_error, 1.0 / 3.0, rtol=1e-6)

    def test_coords_and_exclude(self):
        x = np.arange(10.0)
        exclude = np.zeros(10, dtype=bool)
        exclude[:3] = True
        report = grad_check(lambda t: weighted(t), x, exclude=exclude)
        self.assertEqual(report.checked, 7)
        self.assertEqual(report.excluded, 3)
        report = grad_check(lambda t: weighted(t), x, coords=4)
        self.assertEqual(report.checked, 4)

    def test_relu_kink_needs_exclude(self):
        x = np.array([-1.0, 0.0, 2.0])
        report = grad_check(lambda t: reduce_sum(relu(t)), x, step=1e-6)
        self.assertFalse(report.passed)
        assert_allclose(report.errors['x'][1], 1.0)
        report = grad_check(lambda t: reduce_sum(relu(t)), x, step=1e-6,
                            exclude=x == 0.0)
        self.assertTrue(report.passed)
        self.assertEqual(report.excluded, 1)
        self.assertEqual(report.checked, 2)


class TestLayers(TestCase):
    """Forward values of the layers."""

    def test_conv2d_matches_loop(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(2, 3, 7, 7))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        with precision(np.float64):
            for stride, padding in ((1, 0), (1, 1), (2, 1)):
                out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride, padding)
                assert_allclose(out.data, naive_conv(x, w, b, stride,
                                                     padding), atol=1e-10)

    def test_maxpool_tie_goes_to_first(self):
        x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        with Tape() as tape:
            y = reduce_sum(maxpool2d(x))
        tape.backward(y)
        assert_array_equal(x.grad[0, 0], [[1.0, 0.0], [0.0, 0.0]])
        with self.assertRaises(DimensionError):
            maxpool2d(Tensor(np.ones((1, 1, 3, 4))))

    def test_softmax_rows_and_mask(self):
        rng = np.random.default_rng(1)
        mask = rng.random((5, 7)) < 0.6
        mask[:, 2] = True
        with precision(np.float64):
            probs = softmax(Tensor(rng.normal(size=(5, 7)) * 5), mask).data
        assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-6)
        self.assertTrue(np.all(probs[~mask] < 1e-6))

    def test_layer_norm_statistics(self):
        rng = np.random.default_rng(2)
        with precision(np.float64):
            out = layer_norm(
                Tensor(rng.normal(3.0, 2.0, size=(10, 64))),
                Tensor(np.ones(64)), Tensor(np.zeros(64))
            ).data
        self.assertTrue(np.all(np.abs(out.mean(axis=-1)) < 1e-6))
        assert_allclose(out.var(axis=-1), 1.0, atol=1e-4)

    def test_cross_entropy_values(self):
        logits = Tensor(np.zeros((3, 7)))
        self.assertAlmostEqual(
            cross_entropy(logits, np.array([0, 3, 6])).item(), math.log(7),
            places=5
        )
        peaked = Tensor(np.eye(4) * 50.0)
        self.assertLess(cross_entropy(peaked, np.arange(4)).item(), 1e-6)

    def test_cross_entropy_all_ignored(self):
        logits = Tensor(np.ones((2, 3)), requires_grad=True)
        with Tape() as tape:
            loss = cross_entropy(logits, np.array([IGNORE_ID, IGNORE_ID]))
        tape.backward(loss)
        self.assertEqual(loss.item(), 0.0)
        assert_array_equal(logits.grad, np.zeros((2, 3)))


class TestAdam(TestCase):
    """Adam with decoupled weight decay."""

    def test_first_step(self):
        param = Tensor(np.array([1.0]))
        state = adam_step({'p': param}, {'p': np.array([0.5])}, AdamState(),
                          0.1, weight_decay=0.0)
        self.assertEqual(state.t, 1)
        assert_allclose(param.data, [0.9], rtol=1e-6)
        assert_allclose(state.m['p'], [0.05], rtol=1e-6)
        assert_allclose(state.v['p'], [0.00025], rtol=1e-5)

    def test_weight_decay_is_decoupled(self):
        param = Tensor(np.array([1.0]))
        adam_step({'p': param}, {'p': np.array([0.5])}, AdamState(), 0.1,
                  weight_decay=0.01)
        assert_allclose(param.data, [0.999 - 0.1], rtol=1e-6)

    def test_missing_gradient_counts_as_zero(self):
        param = Tensor(np.array([2.0]))
        adam_step({'p': param}, {}, AdamState(), 0.1, weight_decay=0.0)
        assert_allclose(param.data, [2.0])

    def test_non_finite_gradient_leaves_state(self):
        a = Tensor(np.array([1.0]))
        b = Tensor(np.array([1.0]))
        state = AdamState()
        with self.assertRaises(NonFiniteError) as ctx:
            adam_step({'a': a, 'b': b},
                      {'a': np.array([0.1]), 'b': np.array([np.nan])},
                      state, 0.1)
        self.assertIn('b', str(ctx.exception))
        self.assertEqual(state.t, 0)
        assert_array_equal(a.data, [1.0])
        self.assertEqual(state.m, {})

    def test_minimizes_quadratic(self):
        param = Tensor(np.array([3.0, -2.0]), requires_grad=True)
        state = AdamState()
        for _ in range(300):
            with Tape() as tape:
                loss = reduce_sum(mul(param, param))
            grads = tape.backward(loss)
            adam_step({'p': param}, {'p': grads[param]}, state, 0.05,
                      weight_decay=0.0)
        self.assertTrue(np.all(np.abs(param.data) < 0.1))
