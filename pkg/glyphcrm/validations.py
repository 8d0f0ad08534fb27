#!/usr/bin/env python
# encoding: utf-8
"""
copyright (c) 2024 GlyphCRM contributors.
All rights reserved

Checks applied to configurations, token sequences and task labels before
they reach the model.
"""
# Imports from Standard Library
import re
from typing import Sequence

# Local Imports
from glyphcrm.exceptions import (
    ConfigurationError,
    ContractError,
    DataError,
    SequenceLengthError,
)

# Constants
BIO_PATTERN = re.compile(r'^([BI])-(.+)$')

# Private Functions


def _require_positive(section, obj, names):
    for name in names:
        value = getattr(obj, name)
        if not isinstance(value, int) or isinstance(value, bool) or value < 1:
            msg = "'{}.{}' must be a positive integer, got {!r}".format(
                section, name, value
            )
            raise ConfigurationError(msg, '{}.{}'.format(section, name))


def _require_unit_interval(section, obj, names):
    for name in names:
        value = getattr(obj, name)
        if not 0.0 <= float(value) <= 1.0:
            msg = "'{}.{}' must lie in [0, 1], got {!r}".format(
                section, name, value
            )
            raise ConfigurationError(msg, '{}.{}'.format(section, name))


# Public Functions

def validate_config(run_config):
    """Validate a RunConfig's model and training sections.

    :param run_config: RunConfig to check
    :return: run_config if no errors are raised.
    """
    model = run_config.model
    training = run_config.training
    _require_positive(
        'model', model,
        ('blocks', 'hidden', 'heads', 'ffn', 'max_len', 'c1', 'c2', 'k1',
         'k2')
    )
    if model.hidden % model.heads:
        msg = 'hidden size {} is not divisible by {} heads'.format(
            model.hidden, model.heads
        )
        raise ConfigurationError(msg, 'model.heads')
    if model.max_len < 3:
        raise ConfigurationError(
            'max_len must leave room for [CLS] and two [SEP] tokens',
            'model.max_len'
        )
    if model.k1 % 2 == 0 or model.k2 % 2 == 0:
        raise ConfigurationError(
            'core kernel sizes must be odd to preserve spatial size',
            'model.k1'
        )
    _require_positive(
        'training', training,
        ('batch_size', 'total_steps', 'min_freq', 'checkpoint_every',
         'log_every')
    )
    if training.warmup_steps < 0:
        raise ConfigurationError(
            'warmup_steps must not be negative', 'training.warmup_steps'
        )
    _require_unit_interval(
        'training', training,
        ('mlm_probability', 'mask_ratio', 'random_ratio', 'nsp_probability',
         'beta1', 'beta2')
    )
    if training.mask_ratio + training.random_ratio > 1.0:
        raise ConfigurationError(
            'mask_ratio + random_ratio must not exceed 1',
            'training.random_ratio'
        )
    return run_config


def validate_sequence_length(length, max_len):
    # type: (int, int) -> int
    """Validate a token sequence fits the position embedding table.

    :param length: number of tokens including frame tokens
    :param max_len: model maximum input length
    :return: length if no error is raised
    """
    if length > max_len:
        msg = 'sequence of {} tokens exceeds max_len {}'.format(
            length, max_len
        )
        raise SequenceLengthError(msg)
    return length


def validate_segments(segments):
    """Validate segment ids are 0 or 1."""
    bad = [s for s in set(int(s) for s in segments) if s not in (0, 1)]
    if bad:
        raise ContractError(
            "segment ids must be 0 or 1, got {}".format(sorted(bad))
        )
    return segments


def validate_task_labels(labels, line=None):
    # type: (Sequence[str], int) -> Sequence[str]
    """Validate a task declares a non-empty, duplicate-free label set."""
    if not labels:
        raise DataError('task label set is empty', line)
    if len(set(labels)) != len(labels):
        raise DataError('task label set has duplicates', line)
    return labels


def validate_bio_labels(labels):
    # type: (Sequence[str]) -> Sequence[str]
    """Validate labels form a BIO scheme usable for span scoring.

    Every label must be 'O', 'B-X' or 'I-X', and each entity type X must
    declare both its B- and I- forms.

    :param labels: declared tagging label set
    :return: labels if no error is raised
    """
    types = {'B': set(), 'I': set()}
    for label in labels:
        if label == 'O':
            continue
        match = BIO_PATTERN.match(label)
        if not match:
            raise DataError("'{}' is not a BIO label".format(label))
        types[match.group(1)].add(match.group(2))
    if types['B'] != types['I']:
        missing = sorted(types['B'] ^ types['I'])
        raise DataError(
            'entity types lack a B-/I- pair: {}'.format(', '.join(missing))
        )
    return labels
