#!/usr/bin/env python
# encoding: utf-8
"""
copyright (c) 2024 GlyphCRM contributors.
All rights reserved

Text clean-up applied to corpus lines and task files before they are split
into characters.
"""

# Imports from Standard Library
import unicodedata
from typing import List

# Constants
# control, format, surrogate and private-use characters never reach the
# renderer; unassigned code points stay and resolve to [UNK] in GlyphBank
STRIP_CHAR_CATS = ('Cc', 'Cf', 'Cs', 'Co')

# Public Classes and Functions


def clean_text(text):
    # type: (str) -> str
    """Normalize text and remove characters that have no visible glyph.

    Full-width ASCII and compatibility forms are folded by NFKC, control and
    format characters are dropped and whitespace runs collapse to a single
    space.

    :param text: raw text line
    :type text: str
    :return: cleaned string
    :rtype: str
    """
    if not isinstance(text, str):  # pragma: no cover
        text = str(text)
    text = unicodedata.normalize('NFKC', text)
    if not text.isprintable():
        text = ''.join(
            char for char in text
            if char.isspace()
            or not unicodedata.category(char).startswith(STRIP_CHAR_CATS)
        )
    return ' '.join(text.split())


def split_characters(text):
    # type: (str) -> List[str]
    """Split cleaned text into the characters that become tokens.

    :param text: cleaned text
    :type text: str
    :return: list of single characters, whitespace removed
    :rtype: list
    """
    return [char for char in text if not char.isspace()]
