#!/usr/bin/env python
# encoding: utf-8
"""
copyright (c) 2024 GlyphCRM contributors.
All rights reserved

Shared helpers for the glyphcrm tests.
"""

# Imports from Standard Library
import os

# Imports from Third Party Modules
import numpy as np

# Local Imports
from glyphcrm.config import ModelConfig, RunConfig
from glyphcrm.glyphsource import FontAtlas, load_font

# Constants
FIXTURES = os.path.join(os.path.dirname(__file__), 'fixtures')
FONT_PATH = os.path.join(FIXTURES, 'cjk16.bdf')
SLOW_TESTS = os.environ.get('GLYPHCRM_SLOW_TESTS') == '1'

TINY_MODEL = dict(blocks=2, hidden=16, heads=2, ffn=32, max_len=32, c1=2,
                  c2=4, k1=3, k2=3)
TOY_MODEL = dict(blocks=2, hidden=64, heads=4, ffn=256, max_len=64, c1=8,
                 c2=16)

# characters of the toy corpus: U+4E00 onwards
TOY_ALPHABET = [chr(0x4E00 + i) for i in range(24)]


# Helper Functions & Classes

def fixture_path(name):
    return os.path.join(FIXTURES, name)


def fixture_font():
    return load_font(FONT_PATH)


def tiny_model_config(**overrides):
    values = dict(TINY_MODEL)
    values.update(overrides)
    return ModelConfig.from_defaults(**values)


def run_config(model=None, **training):
    """RunConfig with the tiny model and quick training settings."""
    settings = dict(batch_size=4, lr=1e-3, warmup_steps=2, total_steps=1000,
                    min_freq=1, checkpoint_every=1000, seed=0)
    settings.update(training)
    return RunConfig.from_mapping({
        'model': model or dict(TINY_MODEL),
        'training': settings,
    })


def synthetic_atlas(chars, seed=0, size=16, density=0.3):
    """Atlas of random bitmaps, each seeded by its codepoint."""
    glyphs = {}
    for char in chars:
        rng = np.random.default_rng([seed, ord(char)])
        glyphs[ord(char)] = (rng.random((size, size)) < density).astype(
            np.uint8
        )
    return FontAtlas(glyphs=glyphs, native_size=(size, size), name='synth')


def toy_corpus_lines(documents=8, sentences=4, seed=0):
    """Corpus of documents x sentences lines, blank line between
    documents."""
    rng = np.random.default_rng(seed)
    lines = []
    for _ in range(documents):
        for _ in range(sentences):
            length = int(rng.integers(5, 9))
            lines.append(''.join(
                TOY_ALPHABET[i]
                for i in rng.integers(len(TOY_ALPHABET), size=length)
            ))
        lines.append('')
    return lines


def read_bytes(path):
    with open(path, 'rb') as handle:
        return handle.read()
