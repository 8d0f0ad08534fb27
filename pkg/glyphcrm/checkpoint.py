#!/usr/bin/env python
# encoding: utf-8
"""
copyright (c) 2024 GlyphCRM contributors.
All rights reserved

Binary checkpoints.

Layout (little-endian)::

    b'GCRM' | u32 version | u64 blob length | blob (canonical JSON)
    then per tensor: u32 name length | name | u32 rank | u64 extents... |
                     float32 values
    then u32 CRC-32 of every preceding byte

The blob holds the run configuration and the training state (step, Adam step
counter, seed and example cursor) plus the vocabulary and task description
when present. Tensor records follow the model's parameter order, then the
Adam moments as 'adam.m/<name>' and 'adam.v/<name>'.
"""
from __future__ import annotations

# Imports from Standard Library
import json
import logging
import os
import struct
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, Optional

# Imports from Third Party Modules
import numpy as np

# Local Imports
from glyphcrm.config import canonical_json
from glyphcrm.exceptions import CheckpointError
from glyphcrm.tensorcore import AdamState

# Setup
logger = logging.getLogger(__name__)

# Constants
MAGIC = b'GCRM'
VERSION = 1
ADAM_M = 'adam.m/'
ADAM_V = 'adam.v/'
_HEADER = struct.Struct('<4sIQ')
_U32 = struct.Struct('<I')
_U64 = struct.Struct('<Q')
_FLOAT = np.dtype('<f4')

# Data Structure Definitions


@dataclass
class Checkpoint:
    """Decoded checkpoint contents."""
    config: dict
    state: dict
    tensors: Dict[str, np.ndarray] = field(default_factory=OrderedDict,
                                           repr=False)
    vocab: Optional[list] = None
    task: Optional[dict] = None

    @property
    def step(self):
        return int(self.state.get('step', 0))

    def parameters(self):
        """Model parameters without the optimizer moments."""
        return OrderedDict(
            (name, value) for name, value in self.tensors.items()
            if not name.startswith((ADAM_M, ADAM_V))
        )

    def adam_state(self):
        # type: () -> AdamState
        state = AdamState(t=int(self.state.get('adam_t', 0)))
        for name, value in self.tensors.items():
            if name.startswith(ADAM_M):
                state.m[name[len(ADAM_M):]] = value
            elif name.startswith(ADAM_V):
                state.v[name[len(ADAM_V):]] = value
        return state


# Private Functions

def _tensor_record(name, array):
    encoded = name.encode('utf-8')
    array = np.ascontiguousarray(array, dtype=_FLOAT)
    parts = [_U32.pack(len(encoded)), encoded, _U32.pack(array.ndim)]
    parts.extend(_U64.pack(extent) for extent in array.shape)
    parts.append(array.tobytes())
    return b''.join(parts)


class _Reader(object):

    def __init__(self, payload):
        self.payload = payload
        self.offset = 0

    def take(self, count):
        end = self.offset + count
        if end > len(self.payload):
            raise CheckpointError('checkpoint is truncated')
        chunk = self.payload[self.offset:end]
        self.offset = end
        return chunk

    def u32(self):
        return _U32.unpack(self.take(4))[0]

    def u64(self):
        return _U64.unpack(self.take(8))[0]

    @property
    def exhausted(self):
        return self.offset >= len(self.payload)


# Public Classes and Functions

def encode_checkpoint(params, config, state, adam=None, vocab=None,
                      task=None):
    # type: (Dict[str, np.ndarray], dict, dict, Optional[AdamState], Optional[list], Optional[dict]) -> bytes  # noqa
    """Serialise a checkpoint to bytes.

    :param params: name -> array in canonical order
    :param config: RunConfig.to_dict()
    :param state: training state (step, seed, cursor)
    :param adam: optimizer state whose moments are stored after the params
    :param vocab: non-reserved vocabulary tokens
    :param task: fine-tuning task description
    """
    state = dict(state)
    if adam is not None:
        state['adam_t'] = int(adam.t)
    blob = {'config': config, 'state': state}
    if vocab is not None:
        blob['vocab'] = list(vocab)
    if task is not None:
        blob['task'] = task
    blob_bytes = canonical_json(blob).encode('utf-8')
    parts = [_HEADER.pack(MAGIC, VERSION, len(blob_bytes)), blob_bytes]
    for name, array in params.items():
        parts.append(_tensor_record(name, array))
    if adam is not None:
        for prefix, moments in ((ADAM_M, adam.m), (ADAM_V, adam.v)):
            for name in params:
                if name in moments:
                    parts.append(_tensor_record(prefix + name, moments[name]))
    payload = b''.join(parts)
    return payload + _U32.pack(zlib.crc32(payload) & 0xffffffff)


def decode_checkpoint(data):
    # type: (bytes) -> Checkpoint
    """Parse checkpoint bytes, checking magic, version and checksum."""
    if len(data) < _HEADER.size + _U32.size:
        raise CheckpointError('checkpoint is truncated')
    magic, version, blob_length = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError('bad magic {!r}'.format(magic))
    if version != VERSION:
        raise CheckpointError(
            'unsupported checkpoint version {} (expected {})'.format(
                version, VERSION
            )
        )
    payload, trailer = data[:-_U32.size], data[-_U32.size:]
    if zlib.crc32(payload) & 0xffffffff != _U32.unpack(trailer)[0]:
        raise CheckpointError('checksum mismatch, checkpoint is corrupt')
    reader = _Reader(payload)
    reader.take(_HEADER.size)
    try:
        blob = json.loads(reader.take(blob_length).decode('utf-8'))
    except ValueError as err:
        raise CheckpointError('unreadable config blob: {}'.format(err))
    tensors = OrderedDict()
    while not reader.exhausted:
        name = reader.take(reader.u32()).decode('utf-8')
        shape = tuple(reader.u64() for _ in range(reader.u32()))
        count = int(np.prod(shape, dtype=np.int64))
        raw = reader.take(count * _FLOAT.itemsize)
        tensors[name] = np.frombuffer(raw, dtype=_FLOAT).astype(
            np.float32
        ).reshape(shape)
    return Checkpoint(
        config=blob.get('config', {}), state=blob.get('state', {}),
        tensors=tensors, vocab=blob.get('vocab'), task=blob.get('task'),
    )


def save_checkpoint(path, params, config, state, adam=None, vocab=None,
                    task=None):
    """Write a checkpoint atomically (temporary file then rename).

    :return: path
    """
    data = encode_checkpoint(params, config, state, adam, vocab, task)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    tmp_path = path + '.tmp'
    with open(tmp_path, 'wb') as handle:
        handle.write(data)
    os.replace(tmp_path, path)
    logger.info('wrote checkpoint %s (%d bytes)', path, len(data))
    return path


def load_checkpoint(path):
    # type: (str) -> Checkpoint
    try:
        with open(path, 'rb') as handle:
            data = handle.read()
    except OSError as err:
        raise CheckpointError('cannot read {}: {}'.format(path, err))
    return decode_checkpoint(data)
