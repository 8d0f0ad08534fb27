#!/usr/bin/env python
# encoding: utf-8
"""
copyright (c) 2024 GlyphCRM contributors.
All rights reserved

Built-in defaults for rendering, model shape, pretraining and masking.

Site-level overrides are read from a ``glyphcrm.yaml`` file in the directory
named by the ``GLYPHCRM_CONFIG_DIR`` environment variable.
"""
# Imports from Third Party Modules
from yamlconf import Config, ConfigError

PAD = '[PAD]'
UNK = '[UNK]'
CLS = '[CLS]'
SEP = '[SEP]'
MASK = '[MASK]'

# reserved vocabulary ids are the tuple positions
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, MASK)

IMAGE_SIZE = 48
POSITION_RANGE = 0.2

# id used in label arrays for positions that carry no target
IGNORE_ID = -100

IS_NEXT = 0
NOT_NEXT = 1

MODEL_DEFAULTS = {
    'blocks': 12,
    'hidden': 768,
    'heads': 12,
    'ffn': 3072,
    'max_len': 512,
    'c1': 64,
    'c2': 128,
    'k1': 9,
    'k2': 3,
    'ln_eps': 1e-5,
    'init_std': 0.02,
}

TRAINING_DEFAULTS = {
    'batch_size': 256,
    'lr': 1e-4,
    'warmup_steps': 10000,
    'total_steps': 1000000,
    'weight_decay': 0.01,
    'beta1': 0.9,
    'beta2': 0.999,
    'adam_eps': 1e-8,
    'seed': 0,
    'min_freq': 2,
    'checkpoint_every': 1000,
    'log_every': 1,
}

MASKING_DEFAULTS = {
    'mlm_probability': 0.15,
    'mask_ratio': 0.8,
    'random_ratio': 0.1,
    'nsp_probability': 0.5,
}

REFERENCE_PARAMETER_COUNT = 95000000


class GlyphCRMConfig(Config):
    """Config class for site overrides of the built-in defaults"""
    # pylint: disable=too-few-public-methods
    default_file = 'glyphcrm.yaml'

    def __init__(self, config_file=None, config_dir=None, section=None):
        super(GlyphCRMConfig, self).__init__(
            config_file=config_file, config_dir=config_dir, section=section,
            env_prefix='GLYPHCRM_CONFIG'
        )


def set_defaults(config=None):
    """Merge site overrides from glyphcrm.yaml into the default dicts."""
    if config is None:
        config = GlyphCRMConfig()
    if config:
        default_sections = (
            'MODEL_DEFAULTS',
            'TRAINING_DEFAULTS',
            'MASKING_DEFAULTS',
        )
        insertion_method = config.get('insertion_method', default='update')
        update = ('update', 'insert')
        replace = ('replace', 'overwrite')
        if insertion_method not in update + replace:
            msg = "'{}' is not a valid option for 'insertion_method'".format(
                insertion_method
            )
            raise ConfigError(msg)
        for key in default_sections:
            new_vals = config.get(key, default={})
            if new_vals and insertion_method in update:
                globals()[key].update(**new_vals)
            elif new_vals and insertion_method in replace:
                globals()[key] = dict(new_vals)


set_defaults()
