#!/usr/bin/env python
# encoding: utf-8
"""
copyright (c) 2024 GlyphCRM contributors.
All rights reserved

Bidirectional post-norm Transformer encoder fed by glyph vectors.

The input to block 1 is r + PoE[position] + SegE[segment]. Blocks 1 and 2
add the HanGlyph injection states g1 and g2 into their second Add&Norm:

    h_M = LayerNorm(h + MultiHeadAttention(h))
    h'  = LayerNorm(h_M + FFN(h_M) + g)

All tensors are batched: B x L x D.
"""
from __future__ import annotations

# Imports from Standard Library
import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Mapping, Optional, Tuple

# Imports from Third Party Modules
import numpy as np

# Local Imports
from glyphcrm.exceptions import ContractError, DimensionError
from glyphcrm.hanglyph import hanglyph_forward
from glyphcrm.tensorcore import (
    Tensor,
    add,
    layer_norm,
    linear,
    matmul,
    mul,
    relu,
    reshape,
    softmax,
    take,
    transpose,
)
from glyphcrm.validations import validate_segments, validate_sequence_length

# Constants
PREFIX = 'encoder'
INJECTED_BLOCKS = (1, 2)

# Data Structure Definitions


@dataclass
class BlockParams:
    """Parameter view of one Transformer block."""
    q_weight: Tensor
    q_bias: Tensor
    k_weight: Tensor
    k_bias: Tensor
    v_weight: Tensor
    v_bias: Tensor
    o_weight: Tensor
    o_bias: Tensor
    ffn_in_weight: Tensor
    ffn_in_bias: Tensor
    ffn_out_weight: Tensor
    ffn_out_bias: Tensor
    ln1_gain: Tensor
    ln1_shift: Tensor
    ln2_gain: Tensor
    ln2_shift: Tensor
    heads: int
    eps: float = 1e-5


BLOCK_TENSORS = (
    ('attn.q', 'q'), ('attn.k', 'k'), ('attn.v', 'v'), ('attn.o', 'o'),
    ('ffn.in', 'ffn_in'), ('ffn.out', 'ffn_out'),
)

# Private Functions


def _block_prefix(index):
    return '{}.block{}'.format(PREFIX, index)


def _split_heads(x, heads):
    b, length, width = x.shape
    x = reshape(x, (b, length, heads, width // heads))
    return transpose(x, (0, 2, 1, 3))


def _merge_heads(x):
    b, heads, length, head_dim = x.shape
    x = transpose(x, (0, 2, 1, 3))
    return reshape(x, (b, length, heads * head_dim))


# Public Classes and Functions

def init_parameters(config, rng):
    """Create position/segment tables and block weights in canonical order.

    Matrices and tables draw from N(0, init_std); biases and shifts are 0,
    gains 1.
    """
    hidden, ffn = config.hidden, config.ffn
    std = config.init_std
    params = OrderedDict()
    params[PREFIX + '.position'] = Tensor(
        rng.normal(0.0, std, size=(config.max_len, hidden))
    )
    params[PREFIX + '.segment'] = Tensor(
        rng.normal(0.0, std, size=(2, hidden))
    )
    shapes = {
        'attn.q': (hidden, hidden), 'attn.k': (hidden, hidden),
        'attn.v': (hidden, hidden), 'attn.o': (hidden, hidden),
        'ffn.in': (hidden, ffn), 'ffn.out': (ffn, hidden),
    }
    for index in range(1, config.blocks + 1):
        prefix = _block_prefix(index)
        for name, _ in BLOCK_TENSORS:
            d_in, d_out = shapes[name]
            params['{}.{}.weight'.format(prefix, name)] = Tensor(
                rng.normal(0.0, std, size=(d_in, d_out))
            )
            params['{}.{}.bias'.format(prefix, name)] = Tensor(
                np.zeros(d_out)
            )
        for norm in ('ln1', 'ln2'):
            params['{}.{}.gain'.format(prefix, norm)] = Tensor(
                np.ones(hidden)
            )
            params['{}.{}.shift'.format(prefix, norm)] = Tensor(
                np.zeros(hidden)
            )
    return params


def block_params(params, index, config):
    # type: (Mapping[str, Tensor], int, object) -> BlockParams
    prefix = _block_prefix(index)
    values = {}
    for name, field_name in BLOCK_TENSORS:
        values[field_name + '_weight'] = params[prefix + '.' + name +
                                                '.weight']
        values[field_name + '_bias'] = params[prefix + '.' + name + '.bias']
    for norm in ('ln1', 'ln2'):
        values[norm + '_gain'] = params['{}.{}.gain'.format(prefix, norm)]
        values[norm + '_shift'] = params['{}.{}.shift'.format(prefix, norm)]
    return BlockParams(heads=config.heads, eps=config.ln_eps, **values)


def compose_input(r, segments, params, max_len):
    # type: (Tensor, np.ndarray, Mapping[str, Tensor], int) -> Tensor
    """Sum glyph vectors with position and segment embeddings.

    :param r: B x L x D glyph vectors
    :param segments: B x L segment ids in {0, 1}
    :param params: parameter store holding the embedding tables
    :param max_len: maximum sequence length
    :return: B x L x D input to block 1
    """
    b, length, _ = r.shape
    validate_sequence_length(length, max_len)
    segments = np.asarray(segments, dtype=np.int64)
    if segments.shape != (b, length):
        raise DimensionError('compose_input: segments {} for inputs {}'.format(
            segments.shape, tuple(r.shape)
        ))
    validate_segments(segments.reshape(-1))
    positions = np.broadcast_to(np.arange(length), (b, length))
    h0 = add(r, take(params[PREFIX + '.position'], positions))
    return add(h0, take(params[PREFIX + '.segment'], segments))


def multi_head_attention(h, p, mask, return_weights=False):
    # type: (Tensor, BlockParams, np.ndarray, bool) -> Tensor
    """Scaled dot-product attention over all heads.

    Keys whose mask flag is False get an additive -1e9 before the softmax.

    :param h: B x L x D
    :param p: block parameters
    :param mask: B x L boolean validity flags
    :param return_weights: also return the B x heads x L x L probabilities
    """
    b, length, width = h.shape
    head_dim = width // p.heads
    q = _split_heads(linear(h, p.q_weight, p.q_bias), p.heads)
    k = _split_heads(linear(h, p.k_weight, p.k_bias), p.heads)
    v = _split_heads(linear(h, p.v_weight, p.v_bias), p.heads)
    scores = mul(matmul(q, transpose(k, (0, 1, 3, 2))),
                 1.0 / math.sqrt(head_dim))
    key_mask = np.asarray(mask, dtype=bool).reshape(b, 1, 1, length)
    weights = softmax(scores, mask=key_mask)
    context = _merge_heads(matmul(weights, v))
    out = linear(context, p.o_weight, p.o_bias)
    if return_weights:
        return out, weights
    return out


def feed_forward(h, p):
    # type: (Tensor, BlockParams) -> Tensor
    return linear(relu(linear(h, p.ffn_in_weight, p.ffn_in_bias)),
                  p.ffn_out_weight, p.ffn_out_bias)


def transformer_block(h, p, index, glyph_inject, mask):
    # type: (Tensor, BlockParams, int, Optional[Tensor], np.ndarray) -> Tensor
    """Apply block `index` (1-based).

    Only blocks 1 and 2 accept a glyph injection; passing one to a deeper
    block is a ContractError.
    """
    if glyph_inject is not None and index not in INJECTED_BLOCKS:
        raise ContractError(
            'block {} does not take glyph injection'.format(index)
        )
    h_m = layer_norm(add(h, multi_head_attention(h, p, mask)),
                     p.ln1_gain, p.ln1_shift, p.eps)
    fused = add(h_m, feed_forward(h_m, p))
    if glyph_inject is not None:
        fused = add(fused, glyph_inject)
    return layer_norm(fused, p.ln2_gain, p.ln2_shift, p.eps)


def encode_states(states, glyph_index, segments, mask, params, config):
    # type: (object, np.ndarray, np.ndarray, np.ndarray, Mapping[str, Tensor], object) -> Tuple[Tensor, Tensor]  # noqa
    """Run the encoder on GlyphStates computed for distinct glyphs.

    :param states: GlyphStates with one row per distinct glyph (U x D)
    :param glyph_index: B x L indices into the distinct glyphs
    :param segments: B x L segment ids
    :param mask: B x L validity flags
    :return: (final hidden states B x L x D, glyph vectors r B x L x D)
    """
    r = take(states.r, glyph_index)
    g1 = take(states.g1, glyph_index)
    g2 = take(states.g2, glyph_index)
    h = compose_input(r, segments, params, config.max_len)
    injections = {1: g1, 2: g2}
    for index in range(1, config.blocks + 1):
        h = transformer_block(h, block_params(params, index, config), index,
                              injections.get(index), mask)
    return h, r


def encode(char_inputs, segments, mask, params, config):
    # type: (np.ndarray, np.ndarray, np.ndarray, Mapping[str, Tensor], object) -> Tuple[Tensor, Tensor]  # noqa
    """Encode B x L x 3 x 48 x 48 CharInputs into final hidden states.

    HanGlyph runs once per distinct CharInput in the batch; its states are
    gathered back to every position holding that input.

    :param char_inputs: B x L x 3 x H x W array
    :param segments: B x L segment ids
    :param mask: B x L validity flags, False at [PAD]
    :param params: parameter store
    :param config: ModelConfig
    :return: (hidden states B x L x D, glyph vectors B x L x D)
    """
    char_inputs = np.asarray(char_inputs)
    if char_inputs.ndim != 5:
        raise DimensionError(
            'encode expects B x L x 3 x H x W inputs, got {}'.format(
                char_inputs.shape
            )
        )
    b, length = char_inputs.shape[:2]
    validate_sequence_length(length, config.max_len)
    flat = char_inputs.reshape(b * length, -1)
    distinct, inverse = np.unique(flat, axis=0, return_inverse=True)
    glyphs = Tensor(distinct.reshape((-1,) + char_inputs.shape[2:]))
    states = hanglyph_forward(glyphs, params)
    return encode_states(states, inverse.reshape(b, length), segments, mask,
                         params, config)
