#!/usr/bin/env python
# encoding: utf-8
"""
copyright (c) 2024 GlyphCRM contributors.
All rights reserved

Package metadata, dependencies and the glyphcrm console script are declared
in setup.cfg.
"""

from setuptools import setup


setup()
