#!/usr/bin/env python
# encoding: utf-8
"""
copyright (c) 2024 GlyphCRM contributors.
All rights reserved

Custom errors raised while rendering, encoding, training and evaluating.
"""


# Public Classes and Functions

class GlyphCRMError(Exception):
    """Indicates an error anywhere in the glyph model pipeline"""
    TITLE = None
    MESSAGE = None

    def __init__(self, error=None, title=None, *args):
        self.error = error or self.MESSAGE
        self.title = title or self.TITLE
        args = (error, title) + args
        super(GlyphCRMError, self).__init__(*args)

    def __str__(self):
        msg = "{}: {}".format(self.title, self.error)
        if len(self.args) > 2:
            msg = "{}, {}".format(
                msg, ', '.join(str(a) for a in self.args[2:])
            )
        return msg


class FontParseError(GlyphCRMError):
    """Indicates a BDF font that cannot be parsed."""
    MESSAGE = "Unable to parse the bitmap font"
    TITLE = "FONT PARSE"

    def __init__(self, error=None, line=None, *args):
        self.line = line
        if line is not None:
            error = "line {}: {}".format(line, error or self.MESSAGE)
        super(FontParseError, self).__init__(error, None, *args)


class GlyphMissError(GlyphCRMError):
    """Indicates a character that has no glyph in the active font."""
    MESSAGE = "Character is not present in the font"
    TITLE = "GLYPH MISS"

    def __init__(self, char=None, *args):
        self.char = char
        error = None
        if char is not None:
            error = "U+{:04X} ({!r}) is not present in the font".format(
                ord(char), char
            ) if len(char) == 1 else "{!r} has no glyph".format(char)
        super(GlyphMissError, self).__init__(error, None, *args)


class DimensionError(GlyphCRMError):
    """Indicates tensors whose shapes cannot be combined."""
    MESSAGE = "Incompatible tensor shapes"
    TITLE = "DIMENSION"


class ContractError(GlyphCRMError):
    """Indicates a call that violates an operation's contract."""
    MESSAGE = "Operation called outside its contract"
    TITLE = "CONTRACT"


class SequenceLengthError(GlyphCRMError):
    """Indicates a token sequence longer than the model supports."""
    MESSAGE = "Sequence exceeds the maximum input length"
    TITLE = "SEQUENCE LENGTH"


class NonFiniteError(GlyphCRMError):
    """Indicates a NaN or infinite loss or gradient."""
    MESSAGE = "Non-finite value encountered"
    TITLE = "NON-FINITE"

    def __init__(self, error=None, name=None, *args):
        self.name = name
        if name is not None:
            error = "{} ({})".format(error or self.MESSAGE, name)
        super(NonFiniteError, self).__init__(error, None, *args)


class CheckpointError(GlyphCRMError):
    """Indicates a checkpoint that cannot be written, read or restored."""
    MESSAGE = "Checkpoint is unreadable"
    TITLE = "CHECKPOINT"


class DataError(GlyphCRMError):
    """Indicates malformed corpus or task data."""
    MESSAGE = "Malformed data"
    TITLE = "DATA"

    def __init__(self, error=None, line=None, *args):
        self.line = line
        if line is not None:
            error = "line {}: {}".format(line, error or self.MESSAGE)
        super(DataError, self).__init__(error, None, *args)


class ConfigurationError(GlyphCRMError):
    """Indicates an invalid configuration key or value."""
    MESSAGE = "Invalid configuration"
    TITLE = "CONFIGURATION"

    def __init__(self, error=None, key=None, *args):
        self.key = key
        super(ConfigurationError, self).__init__(error, None, *args)


class UsageError(GlyphCRMError):
    """Indicates a command invoked with missing or unusable inputs."""
    MESSAGE = "Invalid command usage"
    TITLE = "USAGE"
