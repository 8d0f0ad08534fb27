#!/usr/bin/env python
# encoding: utf-8
"""
copyright (c) 2024 GlyphCRM contributors.
All rights reserved

The GlyphCRM model: HanGlyph, the glyph-injected encoder and output heads
over one ordered parameter store.
"""
from __future__ import annotations

# Imports from Standard Library
import logging
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

# Imports from Third Party Modules
import numpy as np

# Local Imports
from glyphcrm import encoder, hanglyph
from glyphcrm.config import ModelConfig, count_parameters
from glyphcrm.constants import PAD
from glyphcrm.exceptions import CheckpointError, ContractError
from glyphcrm.glyphsource import GlyphBank
from glyphcrm.tensorcore import Tensor

# Setup
logger = logging.getLogger(__name__)

# Constants
HEADS_PREFIX = 'heads'
BACKBONE_PREFIXES = (hanglyph.PREFIX + '.', encoder.PREFIX + '.')

# rng streams used for initialisation, keyed so heads never shift the
# backbone draws
INIT_STREAMS = {'hanglyph': 1, 'encoder': 2, 'mlm': 3, 'nsp': 4, 'task': 5}

# Data Structure Definitions


@dataclass
class Batch:
    """Padded token keys with their segment ids and attention flags."""
    keys: List[List[str]]
    segments: np.ndarray
    mask: np.ndarray

    @property
    def shape(self):
        return self.segments.shape


# Public Classes and Functions

def attention_mask(keys):
    # type: (Sequence[Sequence[str]]) -> np.ndarray
    """Validity flags: False at [PAD] positions, True elsewhere."""
    return np.array([[key != PAD for key in row] for row in keys], dtype=bool)


def pad_batch(sequences, segments):
    # type: (Sequence[Sequence[str]], Sequence[Sequence[int]]) -> Batch
    """Right-pad key sequences to the longest one with [PAD] in segment 0."""
    if not sequences:
        raise ContractError('cannot build an empty batch')
    length = max(len(seq) for seq in sequences)
    keys = [list(seq) + [PAD] * (length - len(seq)) for seq in sequences]
    segs = np.zeros((len(sequences), length), dtype=np.int64)
    for row, seg in enumerate(segments):
        segs[row, :len(seg)] = seg
    return Batch(keys=keys, segments=segs, mask=attention_mask(keys))


class GlyphCRM(object):
    """Glyph-based text encoder with optional MLM, NSP and task heads.

    :param config: ModelConfig
    :param seed: initialisation seed
    :param mlm_vocab: size of the MLM output vocabulary (no MLM head if None)
    :param nsp: add the 2-way next-sentence head
    :param task_labels: number of task labels (no task head if None)
    """

    def __init__(self, config, seed=0, mlm_vocab=None, nsp=False,
                 task_labels=None):
        # type: (ModelConfig, int, Optional[int], bool, Optional[int]) -> None
        self.config = config
        self.seed = seed
        self.params = OrderedDict()  # type: Dict[str, Tensor]
        self.params.update(hanglyph.init_parameters(
            config, self._rng('hanglyph')
        ))
        self.params.update(encoder.init_parameters(
            config, self._rng('encoder')
        ))
        if mlm_vocab:
            self._add_head('mlm', mlm_vocab)
        if nsp:
            self._add_head('nsp', 2)
        if task_labels:
            if task_labels < 2:
                raise ContractError('a task head needs at least 2 labels')
            self._add_head('task', task_labels)
        for tensor in self.params.values():
            tensor.requires_grad = True

    def _rng(self, stream):
        return np.random.default_rng([self.seed, INIT_STREAMS[stream]])

    def _add_head(self, name, width):
        rng = self._rng(name)
        prefix = '{}.{}'.format(HEADS_PREFIX, name)
        self.params[prefix + '.weight'] = Tensor(rng.normal(
            0.0, self.config.init_std, size=(self.config.hidden, width)
        ))
        self.params[prefix + '.bias'] = Tensor(np.zeros(width))

    def head(self, name):
        """Return the (weight, bias) pair of a head."""
        prefix = '{}.{}'.format(HEADS_PREFIX, name)
        try:
            return self.params[prefix + '.weight'], self.params[prefix +
                                                                '.bias']
        except KeyError:
            raise ContractError('model has no {} head'.format(name))

    def has_head(self, name):
        return '{}.{}.weight'.format(HEADS_PREFIX, name) in self.params

    def parameter_count(self):
        # type: () -> int
        return int(sum(t.size for t in self.params.values()))

    def parameter_report(self):
        """Analytic counts next to the size of the live parameter store."""
        vocab = (self.params[HEADS_PREFIX + '.mlm.weight'].shape[1]
                 if self.has_head('mlm') else None)
        report = count_parameters(self.config, vocab)
        report['stored'] = self.parameter_count()
        return report

    def encode(self, batch, bank):
        # type: (Batch, GlyphBank) -> tuple
        """Encode a padded batch of glyph keys.

        Each distinct key is rendered and run through HanGlyph once; keys the
        font lacks resolve to [UNK].

        :param batch: Batch of keys, segments and mask
        :param bank: GlyphBank for the active font
        :return: (final hidden states B x L x D, glyph vectors B x L x D)
        """
        resolved = [[bank.resolve(key) for key in row] for row in batch.keys]
        distinct = sorted({key for row in resolved for key in row})
        index = {key: i for i, key in enumerate(distinct)}
        glyph_index = np.array(
            [[index[key] for key in row] for row in resolved], dtype=np.int64
        )
        glyphs = Tensor(np.stack([bank.char_input(key) for key in distinct]))
        states = hanglyph.hanglyph_forward(glyphs, self.params)
        return encoder.encode_states(states, glyph_index, batch.segments,
                                     batch.mask, self.params, self.config)

    def state_arrays(self):
        """Copy of every parameter array keyed by name."""
        return OrderedDict(
            (name, tensor.data.copy()) for name, tensor in self.params.items()
        )

    def load_arrays(self, arrays, require_backbone=True):
        """Overwrite parameters from name -> array.

        Backbone parameters must all be present when require_backbone is set;
        heads absent from arrays keep their initial values. Any shape
        difference is a CheckpointError naming both shapes.
        """
        for name, tensor in self.params.items():
            if name not in arrays:
                if require_backbone and name.startswith(BACKBONE_PREFIXES):
                    raise CheckpointError(
                        'parameter {} is missing'.format(name)
                    )
                logger.info('%s not in checkpoint, keeping initial value',
                            name)
                continue
            value = np.asarray(arrays[name])
            if value.shape != tensor.shape:
                raise CheckpointError(
                    '{}: checkpoint shape {} does not match model shape '
                    '{}'.format(name, tuple(value.shape), tuple(tensor.shape))
                )
            tensor.data = np.ascontiguousarray(
                value.astype(tensor.data.dtype)
            )
