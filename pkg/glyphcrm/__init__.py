#!/usr/bin/env python
# encoding: utf-8
"""
copyright (c) 2024 GlyphCRM contributors.
All rights reserved

GLYPHCRM_THREADS caps BLAS/OpenMP threads; it must be applied before numpy
is first imported.
"""

# Imports from Standard Library
import os

# Setup
_THREADS = os.environ.get('GLYPHCRM_THREADS')
if _THREADS:
    for _name in ('OMP_NUM_THREADS', 'OPENBLAS_NUM_THREADS', 'MKL_NUM_THREADS',
                  'VECLIB_MAXIMUM_THREADS', 'NUMEXPR_NUM_THREADS'):
        os.environ.setdefault(_name, _THREADS)

__version__ = '0.1.0'
