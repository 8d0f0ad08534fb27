#!/usr/bin/env python
# encoding: utf-8
"""
copyright (c) 2024 GlyphCRM contributors.
All rights reserved

Two residual convolutional blocks turning CharInputs into glyph vectors.

Each block applies an entry 3x3 convolution, adds a 2x2-pooled shortcut to a
three-layer convolution stack (middle layer stride 2), and pools again:

    z_c = relu(entry(x))
    z_r = relu(maxpool(z_c) + F(z_c))
    out = maxpool(z_r)

so the 48x48 raster shrinks to 12x12 after block 1 and 3x3 after block 2.
Each block's output is flattened and projected to the model width (the
injection states g1, g2); block 2's output has a third projection giving the
glyph vector r.
"""
from __future__ import annotations

# Imports from Standard Library
from collections import OrderedDict
from dataclasses import dataclass
from typing import List, Mapping

# Imports from Third Party Modules
import numpy as np

# Local Imports
from glyphcrm.constants import IMAGE_SIZE
from glyphcrm.exceptions import DimensionError
from glyphcrm.tensorcore import (
    Tensor,
    add,
    conv2d,
    linear,
    maxpool2d,
    relu,
    reshape,
)

# Constants
PREFIX = 'hanglyph'
ENTRY_KERNEL = 3

# Data Structure Definitions


@dataclass
class ResBlockParams:
    """Parameter view of one residual block."""
    block: int
    entry_weight: Tensor
    entry_bias: Tensor
    core_weights: List[Tensor]
    core_biases: List[Tensor]

    @property
    def core_kernel(self):
        return self.core_weights[0].shape[-1]


@dataclass
class GlyphStates:
    """Per-token glyph vector r and injection states g1, g2."""
    r: Tensor
    g1: Tensor
    g2: Tensor


# Private Functions

def _he_normal(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def _block_shapes(config):
    return (
        (1, 3, config.c1, config.k1),
        (2, config.c1, config.c2, config.k2),
    )


# Public Classes and Functions

def flat_sizes(config):
    """Flattened feature sizes after block 1 and block 2."""
    side1 = IMAGE_SIZE // 4
    side2 = side1 // 4
    return config.c1 * side1 * side1, config.c2 * side2 * side2


def init_parameters(config, rng):
    """Create HanGlyph parameters in canonical order.

    Convolutions use He-normal weights and zero biases; projections follow the
    encoder's N(0, init_std) convention.

    :param config: ModelConfig
    :param rng: numpy Generator
    :return: OrderedDict name -> Tensor
    """
    params = OrderedDict()
    for block, c_in, channels, kernel in _block_shapes(config):
        name = '{}.block{}'.format(PREFIX, block)
        params[name + '.entry.weight'] = Tensor(_he_normal(
            rng, (channels, c_in, ENTRY_KERNEL, ENTRY_KERNEL),
            c_in * ENTRY_KERNEL * ENTRY_KERNEL
        ))
        params[name + '.entry.bias'] = Tensor(np.zeros(channels))
        for layer in range(3):
            params['{}.core{}.weight'.format(name, layer)] = Tensor(
                _he_normal(rng, (channels, channels, kernel, kernel),
                           channels * kernel * kernel)
            )
            params['{}.core{}.bias'.format(name, layer)] = Tensor(
                np.zeros(channels)
            )
    flat1, flat2 = flat_sizes(config)
    for proj, flat in (('proj_g1', flat1), ('proj_g2', flat2),
                       ('proj_r', flat2)):
        params['{}.{}.weight'.format(PREFIX, proj)] = Tensor(rng.normal(
            0.0, config.init_std, size=(flat, config.hidden)
        ))
        params['{}.{}.bias'.format(PREFIX, proj)] = Tensor(
            np.zeros(config.hidden)
        )
    return params


def resblock_params(params, block):
    # type: (Mapping[str, Tensor], int) -> ResBlockParams
    name = '{}.block{}'.format(PREFIX, block)
    return ResBlockParams(
        block=block,
        entry_weight=params[name + '.entry.weight'],
        entry_bias=params[name + '.entry.bias'],
        core_weights=[params['{}.core{}.weight'.format(name, i)]
                      for i in range(3)],
        core_biases=[params['{}.core{}.bias'.format(name, i)]
                     for i in range(3)],
    )


def resblock_forward(x, p):
    # type: (Tensor, ResBlockParams) -> Tensor
    """Apply one residual block: N x C_in x H x W -> N x C x H/4 x W/4.

    The core stack keeps spatial size except its middle layer, which has
    stride 2 so that F(z_c) matches the pooled shortcut.
    """
    if x.ndim != 4 or x.shape[2] % 4 or x.shape[3] % 4:
        raise DimensionError(
            'resblock {}: extents of {} must be divisible by 4'.format(
                p.block, tuple(x.shape)
            )
        )
    z_c = relu(conv2d(x, p.entry_weight, p.entry_bias, stride=1,
                      padding=ENTRY_KERNEL // 2))
    pad = p.core_kernel // 2
    core = z_c
    for layer, (weight, bias) in enumerate(zip(p.core_weights,
                                               p.core_biases)):
        core = conv2d(core, weight, bias, stride=2 if layer == 1 else 1,
                      padding=pad)
        if layer < 2:
            core = relu(core)
    z_r = relu(add(maxpool2d(z_c), core))
    return maxpool2d(z_r)


def inject_state(feat, weight, bias):
    # type: (Tensor, Tensor, Tensor) -> Tensor
    """Flatten N x C x h x w features row-major and project to N x D."""
    n = feat.shape[0]
    flat = int(np.prod(feat.shape[1:]))
    if flat != weight.shape[0]:
        raise DimensionError(
            'inject_state: {} flattened features for a {} projection'.format(
                flat, tuple(weight.shape)
            )
        )
    return linear(reshape(feat, (n, flat)), weight, bias)


def glyph_vector(feat2, weight, bias):
    # type: (Tensor, Tensor, Tensor) -> Tensor
    """Project block-2 features to the glyph vector r."""
    return inject_state(feat2, weight, bias)


def hanglyph_forward(seq, params):
    # type: (Tensor, Mapping[str, Tensor]) -> GlyphStates
    """Encode L CharInputs (L x 3 x 48 x 48) into GlyphStates (L x D each).

    Tokens are processed independently; order is preserved.
    """
    if seq.ndim != 4 or seq.shape[0] < 1:
        raise DimensionError(
            'hanglyph_forward expects L x 3 x H x W, got {}'.format(
                tuple(seq.shape)
            )
        )
    feat1 = resblock_forward(seq, resblock_params(params, 1))
    g1 = inject_state(feat1, params[PREFIX + '.proj_g1.weight'],
                      params[PREFIX + '.proj_g1.bias'])
    feat2 = resblock_forward(feat1, resblock_params(params, 2))
    g2 = inject_state(feat2, params[PREFIX + '.proj_g2.weight'],
                      params[PREFIX + '.proj_g2.bias'])
    r = glyph_vector(feat2, params[PREFIX + '.proj_r.weight'],
                     params[PREFIX + '.proj_r.bias'])
    return GlyphStates(r=r, g1=g1, g2=g2)
