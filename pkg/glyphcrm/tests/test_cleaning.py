#!/usr/bin/env python
# encoding: utf-8
"""
copyright (c) 2024 GlyphCRM contributors.
All rights reserved
"""

# Imports from Standard Library
from unittest import TestCase

# Local Imports
from glyphcrm.cleaning import clean_text, split_characters


class CleaningTests(TestCase):

    def test_clean_text(self):
        expected = 'AB 你好 吗'

        line = '\uff21\uff22\u3000你好\t\t吗'
        result = clean_text(line)
        self.assertEqual(result, expected)

        line = '  AB 你\u200b好 吗\n'
        result = clean_text(line)
        self.assertEqual(result, expected)

        line = 'AB\x07 你好\ufeff 吗'
        result = clean_text(line)
        self.assertEqual(result, expected)

        line = '你好，世界！'
        result = clean_text(line)
        self.assertEqual(result, '你好,世界!')

        self.assertEqual(clean_text(''), '')

    def test_clean_text_unassigned(self):
        line = '你͸好'
        result = clean_text(line)
        self.assertEqual(result, '你͸好')

    def test_split_characters(self):
        result = split_characters('AB 你好 吗')
        self.assertEqual(result, ['A', 'B', '你', '好', '吗'])

        self.assertEqual(split_characters(' '), [])
