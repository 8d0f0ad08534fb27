#!/usr/bin/env python
# encoding: utf-8
"""
copyright (c) 2024 GlyphCRM contributors.
All rights reserved

Turns characters into the three-channel 48x48 input of the glyph encoder.

BDF bitmap fonts are parsed into a FontAtlas of native-resolution cells.
A character's cell is scaled by integer pixel replication and centered in the
48x48 raster, then stacked with two shared coordinate planes (abscissa and
ordinate, both spanning [-0.2, 0.2]). The reserved tokens get fixed synthetic
patterns instead of font glyphs.
"""
from __future__ import annotations

# Imports from Standard Library
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, Iterable, List, Mapping, Optional, Tuple

# Imports from Third Party Modules
import numpy as np

# Local Imports
from glyphcrm.constants import (
    CLS,
    IMAGE_SIZE,
    MASK,
    PAD,
    POSITION_RANGE,
    SEP,
    SPECIAL_TOKENS,
    UNK,
)
from glyphcrm.exceptions import (
    DimensionError,
    FontParseError,
    GlyphMissError,
)

# Setup
logger = logging.getLogger(__name__)

# Constants
CLS_RING_WIDTH = 12
SEP_BAR_WIDTH = 12
MASK_CELL = 8
UNK_THICKNESS = 8

# Data Structure Definitions


@dataclass(frozen=True, eq=False)
class GlyphRecord:
    """One STARTCHAR..ENDCHAR record as written in the font file."""
    name: str
    codepoint: int
    bbx: Tuple[int, int, int, int]
    bits: np.ndarray = field(repr=False)


@dataclass(frozen=True, eq=False)
class FontAtlas:
    """Native-resolution glyph cells keyed by codepoint."""
    glyphs: Mapping[int, np.ndarray]
    native_size: Tuple[int, int]
    name: str = ''
    records: Mapping[int, GlyphRecord] = field(default_factory=dict,
                                               repr=False)
    offset: Tuple[int, int] = (0, 0)

    def __contains__(self, char):
        return len(char) == 1 and ord(char) in self.glyphs

    def __len__(self):
        return len(self.glyphs)

    def lookup(self, char):
        # type: (str) -> np.ndarray
        """Return the native cell bitmap for char or raise GlyphMissError."""
        try:
            return self.glyphs[ord(char)]
        except (KeyError, TypeError):
            raise GlyphMissError(char)


# Private Functions

def _decode_row(hex_row, width, lineno):
    nbytes = (width + 7) // 8
    if len(hex_row) != 2 * nbytes:
        raise FontParseError(
            'bitmap row {!r} has {} hex digits, expected {}'.format(
                hex_row, len(hex_row), 2 * nbytes
            ), lineno
        )
    try:
        raw = bytes.fromhex(hex_row)
    except ValueError:
        raise FontParseError(
            'bitmap row {!r} is not hexadecimal'.format(hex_row), lineno
        )
    bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8))
    return bits[:width]


def _int_fields(args, count, keyword, lineno):
    parts = args.split()
    if len(parts) < count:
        raise FontParseError(
            '{} needs {} values, got {!r}'.format(keyword, count, args),
            lineno
        )
    try:
        return [int(p) for p in parts[:count]]
    except ValueError:
        raise FontParseError(
            '{} values must be integers, got {!r}'.format(keyword, args),
            lineno
        )


def _place(record, font_bbx, lineno):
    width, height, xoff, yoff = record.bbx
    cell_w, cell_h, cell_x, cell_y = font_bbx
    top = (cell_h + cell_y) - (yoff + height)
    left = xoff - cell_x
    if top < 0 or left < 0 or top + height > cell_h or left + width > cell_w:
        raise FontParseError(
            'glyph {} lies outside the font bounding box'.format(
                record.name
            ), lineno
        )
    cell = np.zeros((cell_h, cell_w), dtype=np.uint8)
    cell[top:top + height, left:left + width] = record.bits
    return cell


# Public Classes and Functions

def parse_bdf(font_bytes, name=None):
    # type: (bytes, Optional[str]) -> FontAtlas
    """Parse a BDF 2.1 bitmap font into a FontAtlas.

    Every record with a non-negative ENCODING is kept. BITMAP rows are
    decoded most-significant-bit first and each glyph is placed inside the
    FONTBOUNDINGBOX cell using its BBX offsets.

    :param font_bytes: contents of a .bdf file
    :type font_bytes: bytes
    :param name: optional atlas name; defaults to the FONT property
    :return: atlas of native-size binary cells
    :rtype: FontAtlas
    """
    try:
        text = font_bytes.decode('ascii')
    except UnicodeDecodeError:
        text = font_bytes.decode('latin-1')
    lines = text.splitlines()
    if not lines:
        raise FontParseError('empty font file', 0)
    if not lines[0].startswith('STARTFONT'):
        raise FontParseError('missing STARTFONT header', 1)

    font_name = name
    font_bbx = None
    glyphs = {}
    records = {}
    current = None
    bitmap_rows = None
    for index, raw_line in enumerate(lines):
        lineno = index + 1
        line = raw_line.strip()
        if bitmap_rows is not None:
            if line == 'ENDCHAR':
                if len(bitmap_rows) != current['bbx'][1]:
                    raise FontParseError(
                        'glyph {} has {} bitmap rows, expected {}'.format(
                            current['name'], len(bitmap_rows),
                            current['bbx'][1]
                        ), lineno
                    )
                bits = (
                    np.stack(bitmap_rows) if bitmap_rows
                    else np.zeros((0, current['bbx'][0]), dtype=np.uint8)
                )
                if current['codepoint'] >= 0:
                    record = GlyphRecord(
                        current['name'], current['codepoint'],
                        tuple(current['bbx']), bits
                    )
                    glyphs[record.codepoint] = _place(
                        record, font_bbx, lineno
                    )
                    records[record.codepoint] = record
                current = None
                bitmap_rows = None
            else:
                bitmap_rows.append(
                    _decode_row(line, current['bbx'][0], lineno)
                )
            continue

        keyword, _, args = line.partition(' ')
        if keyword == 'FONT' and font_name is None:
            font_name = args.strip()
        elif keyword == 'SIZE':
            parts = args.split()
            if len(parts) >= 4 and parts[3] != '1':
                raise FontParseError(
                    'unsupported bit depth {}'.format(parts[3]), lineno
                )
        elif keyword == 'FONTBOUNDINGBOX':
            font_bbx = _int_fields(args, 4, keyword, lineno)
            if font_bbx[0] < 1 or font_bbx[1] < 1:
                raise FontParseError('empty FONTBOUNDINGBOX', lineno)
        elif keyword == 'STARTCHAR':
            if current is not None:
                raise FontParseError(
                    'STARTCHAR before ENDCHAR of {}'.format(current['name']),
                    lineno
                )
            if font_bbx is None:
                raise FontParseError(
                    'STARTCHAR before FONTBOUNDINGBOX', lineno
                )
            current = {'name': args.strip(), 'codepoint': None, 'bbx': None}
        elif keyword == 'ENCODING' and current is not None:
            current['codepoint'] = _int_fields(args, 1, keyword, lineno)[0]
        elif keyword == 'BBX' and current is not None:
            current['bbx'] = _int_fields(args, 4, keyword, lineno)
        elif keyword == 'BITMAP' and current is not None:
            if current['codepoint'] is None or current['bbx'] is None:
                raise FontParseError(
                    'glyph {} lacks ENCODING or BBX'.format(current['name']),
                    lineno
                )
            bitmap_rows = []
        elif keyword == 'ENDCHAR':
            raise FontParseError('ENDCHAR without BITMAP', lineno)

    if current is not None:
        raise FontParseError(
            'truncated glyph record {}'.format(current['name']), len(lines)
        )
    if font_bbx is None:
        raise FontParseError('missing FONTBOUNDINGBOX', len(lines))
    logger.debug('parsed %d glyphs from %s', len(glyphs), font_name)
    return FontAtlas(
        glyphs=glyphs, native_size=(font_bbx[0], font_bbx[1]),
        name=font_name or '', records=records,
        offset=(font_bbx[2], font_bbx[3])
    )


def load_font(path):
    # type: (str) -> FontAtlas
    with open(path, 'rb') as handle:
        return parse_bdf(handle.read())


def encode_bitmap_rows(bits):
    # type: (np.ndarray) -> List[str]
    """Encode a bitmap as BDF hex rows, MSB first, padded to whole bytes."""
    bits = np.asarray(bits, dtype=np.uint8)
    if bits.size == 0:
        return []
    packed = np.packbits(bits, axis=1)
    return [row.tobytes().hex().upper() for row in packed]


def write_bdf(atlas):
    # type: (FontAtlas) -> bytes
    """Serialise an atlas back to BDF text in canonical form.

    Records keep their original order, names, BBX and bitmap rows; header
    metrics not held by the atlas are written with fixed values (SIZE from
    the cell height at 75 dpi, SWIDTH 1000, DWIDTH the cell width).

    Bitmap rows are always written as uppercase hex; a font with lowercase
    rows comes back with the same bitmaps but not the same bytes.
    """
    cell_w, cell_h = atlas.native_size
    lines = [
        'STARTFONT 2.1',
        'FONT {}'.format(atlas.name),
        'SIZE {} 75 75'.format(cell_h),
        'FONTBOUNDINGBOX {} {} {} {}'.format(cell_w, cell_h, *atlas.offset),
        'CHARS {}'.format(len(atlas.records)),
    ]
    for record in atlas.records.values():
        lines.extend([
            'STARTCHAR {}'.format(record.name),
            'ENCODING {}'.format(record.codepoint),
            'SWIDTH 1000 0',
            'DWIDTH {} 0'.format(cell_w),
            'BBX {} {} {} {}'.format(*record.bbx),
            'BITMAP',
        ])
        lines.extend(encode_bitmap_rows(record.bits))
        lines.append('ENDCHAR')
    lines.append('ENDFONT')
    return ('\n'.join(lines) + '\n').encode('ascii')


def rasterize(char, atlas):
    # type: (str, FontAtlas) -> np.ndarray
    """Render char as a binary 48x48 bitmap.

    The native cell is enlarged by the largest integer factor that fits and
    centered; uncovered border pixels stay 0.

    :param char: single character present in atlas
    :param atlas: parsed font
    :return: uint8 array of shape (48, 48) holding 0/1
    """
    native = atlas.lookup(char)
    height, width = native.shape
    scale = min(IMAGE_SIZE // height, IMAGE_SIZE // width)
    if scale < 1:
        raise DimensionError(
            'native glyph {}x{} exceeds the {}px raster'.format(
                width, height, IMAGE_SIZE
            )
        )
    scaled = np.kron(native, np.ones((scale, scale), dtype=np.uint8))
    top = (IMAGE_SIZE - scaled.shape[0]) // 2
    left = (IMAGE_SIZE - scaled.shape[1]) // 2
    bitmap = np.zeros((IMAGE_SIZE, IMAGE_SIZE), dtype=np.uint8)
    bitmap[top:top + scaled.shape[0], left:left + scaled.shape[1]] = scaled
    return bitmap


@lru_cache(maxsize=1)
def _position_maps():
    index = np.arange(IMAGE_SIZE, dtype=np.float64)
    # (2j - 47) is odd and symmetric in sign, so c_j == -c_{47-j} exactly
    coords = (
        (2.0 * index - (IMAGE_SIZE - 1)) * POSITION_RANGE / (IMAGE_SIZE - 1)
    ).astype(np.float32)
    abscissa = np.tile(coords, (IMAGE_SIZE, 1))
    ordinate = np.ascontiguousarray(abscissa.T)
    abscissa.setflags(write=False)
    ordinate.setflags(write=False)
    return abscissa, ordinate


def position_maps():
    # type: () -> Tuple[np.ndarray, np.ndarray]
    """Return the shared (abscissa, ordinate) coordinate planes.

    abscissa[i][j] = c_j and ordinate[i][j] = c_i with
    c_j = -0.2 + 0.4 * j / 47.
    """
    return _position_maps()


@lru_cache(maxsize=None)
def _special_pattern(token):
    i, j = np.indices((IMAGE_SIZE, IMAGE_SIZE))
    last = IMAGE_SIZE - 1
    if token == PAD:
        mask = np.zeros((IMAGE_SIZE, IMAGE_SIZE), dtype=bool)
    elif token == CLS:
        edge = np.minimum(np.minimum(i, j), np.minimum(last - i, last - j))
        mask = edge < CLS_RING_WIDTH
    elif token == SEP:
        left = (IMAGE_SIZE - SEP_BAR_WIDTH) // 2
        mask = (j >= left) & (j < left + SEP_BAR_WIDTH)
    elif token == MASK:
        mask = ((i // MASK_CELL) + (j // MASK_CELL)) % 2 == 0
    else:
        half = UNK_THICKNESS // 2
        diag = i - j
        anti = i + j - last
        mask = ((diag >= -half) & (diag < half)) | (
            (anti >= -half) & (anti < half)
        )
    bitmap = mask.astype(np.uint8)
    bitmap.setflags(write=False)
    return bitmap


def special_glyph(token):
    # type: (str) -> np.ndarray
    """Return the fixed 48x48 pattern of a reserved token.

    [CLS] is a 12px border ring, [SEP] a 12px vertical center bar, [MASK] an
    8x8-cell checkerboard, [UNK] a diagonal cross 8px thick and [PAD] blank.
    """
    if token not in SPECIAL_TOKENS:
        raise GlyphMissError(token)
    return _special_pattern(token)


def is_special(key):
    # type: (str) -> bool
    return key in SPECIAL_TOKENS


def encode_char(key, atlas):
    # type: (str, FontAtlas) -> np.ndarray
    """Stack a glyph with the shared position maps.

    :param key: a single character or one of the reserved token names
    :param atlas: parsed font
    :return: float32 array of shape (3, 48, 48)
    """
    glyph = special_glyph(key) if is_special(key) else rasterize(key, atlas)
    abscissa, ordinate = position_maps()
    return np.stack([glyph.astype(np.float32), abscissa, ordinate])


class GlyphBank(object):
    """Caches CharInputs per glyph key for one font.

    Characters missing from the font are rendered as [UNK]; the first miss of
    each character is logged as a warning.
    """

    def __init__(self, atlas):
        # type: (FontAtlas) -> None
        self.atlas = atlas
        self._cache = {}  # type: Dict[str, np.ndarray]
        self.missing = set()

    def resolve(self, key):
        # type: (str) -> str
        """Return the key actually rendered for key."""
        if is_special(key) or key in self.atlas:
            return key
        if key not in self.missing:
            self.missing.add(key)
            logger.warning(
                'no glyph for %r (U+%04X); rendering %s', key, ord(key[0]),
                UNK
            )
        return UNK

    def char_input(self, key):
        # type: (str) -> np.ndarray
        key = self.resolve(key)
        try:
            return self._cache[key]
        except KeyError:
            value = encode_char(key, self.atlas)
            value.setflags(write=False)
            self._cache[key] = value
            return value

    def batch(self, sequences):
        # type: (Iterable[Iterable[str]]) -> np.ndarray
        """Stack CharInputs for equal-length key sequences into B x L x 3 x
        48 x 48."""
        return np.stack([
            np.stack([self.char_input(key) for key in keys])
            for keys in sequences
        ])


def write_pgm(bitmap, path):
    # type: (np.ndarray, str) -> None
    """Write a binary bitmap as an ASCII PGM (P2) image with maxval 1."""
    bitmap = np.asarray(bitmap, dtype=np.uint8)
    height, width = bitmap.shape
    with open(path, 'w', encoding='ascii') as handle:
        handle.write('P2\n{} {}\n1\n'.format(width, height))
        for row in bitmap:
            handle.write(' '.join(str(int(v)) for v in row))
            handle.write('\n')


def read_pgm(path):
    # type: (str) -> np.ndarray
    with open(path, 'r', encoding='ascii') as handle:
        tokens = handle.read().split()
    if not tokens or tokens[0] != 'P2':
        raise DimensionError('{} is not an ASCII PGM'.format(path))
    width, height = int(tokens[1]), int(tokens[2])
    values = np.array(tokens[4:4 + width * height], dtype=np.uint8)
    return values.reshape(height, width)
