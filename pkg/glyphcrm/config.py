#!/usr/bin/env python
# encoding: utf-8
"""
copyright (c) 2024 GlyphCRM contributors.
All rights reserved

Run configuration: model shape, optimisation schedule, masking rates and
paths, with canonical JSON serialisation and analytic parameter counts.
"""
from __future__ import annotations

# Imports from Standard Library
import json
from dataclasses import MISSING, asdict, dataclass, field, fields
from typing import Any, Mapping, Optional

# Local Imports
from glyphcrm import constants
from glyphcrm.exceptions import ConfigurationError
from glyphcrm.validations import validate_config

# Private Functions


def _build(cls, section: str, defaults: Mapping, overrides: Mapping):
    names = [f.name for f in fields(cls)]
    optional = [f.name for f in fields(cls) if f.default is not MISSING]
    for key in overrides:
        if key not in names:
            msg = "unknown key '{}' in section '{}'".format(key, section)
            raise ConfigurationError(msg, '{}.{}'.format(section, key))
    values = {}
    for name in names:
        if name in overrides:
            values[name] = overrides[name]
        elif name in defaults:
            values[name] = defaults[name]
        elif name in optional:
            continue
        else:
            msg = "no value for '{}' in section '{}'".format(name, section)
            raise ConfigurationError(msg, '{}.{}'.format(section, name))
    return cls(**values)


def canonical_json(obj: Any) -> str:
    """Serialise obj with sorted keys and compact separators."""
    return json.dumps(obj, sort_keys=True, separators=(',', ':'),
                      ensure_ascii=True)


# Public Classes and Functions

@dataclass
class ModelConfig:
    """Shape of the glyph encoder and the Transformer stack."""
    blocks: int
    hidden: int
    heads: int
    ffn: int
    max_len: int
    c1: int
    c2: int
    k1: int
    k2: int
    ln_eps: float
    init_std: float
    vocab_size: Optional[int] = None

    @classmethod
    def from_defaults(cls, **overrides) -> 'ModelConfig':
        return _build(cls, 'model', constants.MODEL_DEFAULTS, overrides)

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads


@dataclass
class TrainingConfig:
    """Optimiser, schedule, masking and bookkeeping settings."""
    batch_size: int
    lr: float
    warmup_steps: int
    total_steps: int
    weight_decay: float
    beta1: float
    beta2: float
    adam_eps: float
    seed: int
    min_freq: int
    checkpoint_every: int
    log_every: int
    mlm_probability: float
    mask_ratio: float
    random_ratio: float
    nsp_probability: float

    @classmethod
    def from_defaults(cls, **overrides) -> 'TrainingConfig':
        defaults = dict(constants.TRAINING_DEFAULTS)
        defaults.update(constants.MASKING_DEFAULTS)
        return _build(cls, 'training', defaults, overrides)


@dataclass
class RunConfig:
    """Everything a run needs: model, training and file locations."""
    model: ModelConfig = field(default_factory=ModelConfig.from_defaults)
    training: TrainingConfig = field(
        default_factory=TrainingConfig.from_defaults
    )
    paths: dict = field(default_factory=dict)

    @classmethod
    def from_mapping(cls, mapping: Mapping) -> 'RunConfig':
        """Build a config from defaults overridden section by section.

        :param mapping: dict with optional 'model', 'training' and 'paths'
            sections; any other top level key is rejected.
        :return: validated RunConfig
        """
        for key in mapping:
            if key not in ('model', 'training', 'paths'):
                raise ConfigurationError(
                    "unknown section '{}'".format(key), key
                )
        run = cls(
            model=ModelConfig.from_defaults(**mapping.get('model', {})),
            training=TrainingConfig.from_defaults(
                **mapping.get('training', {})
            ),
            paths=dict(mapping.get('paths', {})),
        )
        validate_config(run)
        return run

    @classmethod
    def from_json(cls, text: str) -> 'RunConfig':
        try:
            mapping = json.loads(text)
        except ValueError as err:
            raise ConfigurationError('config is not valid JSON: {}'.format(
                err
            ))
        if not isinstance(mapping, dict):
            raise ConfigurationError('config must be a JSON object')
        return cls.from_mapping(mapping)

    def to_dict(self) -> dict:
        return {
            'model': asdict(self.model),
            'training': asdict(self.training),
            'paths': dict(self.paths),
        }

    def to_json(self) -> str:
        return canonical_json(self.to_dict())


def count_block_parameters(hidden: int, ffn: int) -> int:
    """Analytic parameter count of one Transformer block.

    Four D x D projections with biases (Q, K, V, output), the two FFN layers
    and two layer-norm gain/shift pairs.
    """
    return (
        4 * (hidden * hidden + hidden)
        + (hidden * ffn + ffn)
        + (ffn * hidden + hidden)
        + 4 * hidden
    )


def count_hanglyph_parameters(config: ModelConfig) -> int:
    c1, c2, k1, k2 = config.c1, config.c2, config.k1, config.k2
    block1 = (3 * c1 * 9 + c1) + 3 * (c1 * c1 * k1 * k1 + c1)
    block2 = (c1 * c2 * 9 + c2) + 3 * (c2 * c2 * k2 * k2 + c2)
    flat1 = c1 * (constants.IMAGE_SIZE // 4) ** 2
    flat2 = c2 * (constants.IMAGE_SIZE // 16) ** 2
    projections = (
        (flat1 * config.hidden + config.hidden)
        + 2 * (flat2 * config.hidden + config.hidden)
    )
    return block1 + block2 + projections


def count_parameters(config: ModelConfig,
                     vocab_size: Optional[int] = None) -> dict:
    """Analytic parameter counts per component.

    'backbone' covers everything used to encode text (HanGlyph, embeddings
    and Transformer blocks); pretraining heads are reported separately since
    they are discarded for fine-tuning.

    :param config: model shape
    :param vocab_size: size of the MLM output vocabulary, if any
    :return: dict of component counts, including 'backbone' and 'total'
    """
    counts = {
        'hanglyph': count_hanglyph_parameters(config),
        'embeddings': (config.max_len + 2) * config.hidden,
        'per_block': count_block_parameters(config.hidden, config.ffn),
    }
    counts['blocks'] = counts['per_block'] * config.blocks
    counts['backbone'] = (
        counts['hanglyph'] + counts['embeddings'] + counts['blocks']
    )
    counts['nsp_head'] = 2 * config.hidden + 2
    counts['mlm_head'] = (
        (config.hidden + 1) * vocab_size if vocab_size else 0
    )
    counts['total'] = (
        counts['backbone'] + counts['nsp_head'] + counts['mlm_head']
    )
    counts['reference'] = constants.REFERENCE_PARAMETER_COUNT
    counts['backbone_vs_reference'] = (
        counts['backbone'] / float(constants.REFERENCE_PARAMETER_COUNT)
    )
    return counts
