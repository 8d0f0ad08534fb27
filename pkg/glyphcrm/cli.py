#!/usr/bin/env python
# encoding: utf-8
"""
copyright (c) 2024 GlyphCRM contributors.
All rights reserved

Command line entry point.

    glyphcrm render   --font F --text T --out DIR
    glyphcrm pretrain --corpus C --font F --out DIR [--config J] [--steps N]
    glyphcrm finetune --font F --kind K --labels A,B --train T --dev D ...
    glyphcrm eval     --predictions FILE | --checkpoint P --font F --test T
    glyphcrm embed    --font F --text T [--checkpoint P]
    glyphcrm config   [--dump] [--count] [--config J]

Exit status is 0 on success, 2 on misuse (bad flags, unknown config keys,
malformed or missing inputs) and 1 on any other failure.
"""
from __future__ import annotations

# Imports from Standard Library
import argparse
import json
import logging
import os
import sys
from typing import List, Optional

# Imports from Third Party Modules
import numpy as np

# Local Imports
from glyphcrm.checkpoint import load_checkpoint
from glyphcrm.cleaning import clean_text, split_characters
from glyphcrm.config import RunConfig, count_parameters
from glyphcrm.constants import CLS, SEP
from glyphcrm.exceptions import (
    ConfigurationError,
    DataError,
    GlyphCRMError,
    UsageError,
)
from glyphcrm.finetune import (
    TASK_KINDS,
    TaskSpec,
    evaluate,
    finetune_run,
    load_finetuned,
    read_predictions_file,
    read_task_file,
    span_f1,
)
from glyphcrm.glyphsource import (
    GlyphBank,
    encode_char,
    load_font,
    write_pgm,
)
from glyphcrm.model import GlyphCRM, pad_batch
from glyphcrm.pretrain import iter_corpus_lines, pretrain_run

# Setup
logger = logging.getLogger(__name__)

# Constants
EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
USAGE_ERRORS = (ConfigurationError, DataError, UsageError)
LOG_FORMAT = '%(levelname)s %(name)s: %(message)s'

# Private Functions


def _existing(path, what):
    if not path or not os.path.exists(path):
        raise UsageError('{} {!r} does not exist'.format(what, path))
    return path


def _read_run_config(path, **training):
    mapping = {}
    if path:
        with open(_existing(path, 'config file'), 'r',
                  encoding='utf-8') as handle:
            text = handle.read()
        try:
            mapping = json.loads(text)
        except ValueError as err:
            raise ConfigurationError(
                '{} is not valid JSON: {}'.format(path, err)
            )
        if not isinstance(mapping, dict):
            raise ConfigurationError('{} must hold a JSON object'.format(path))
    overrides = {k: v for k, v in training.items() if v is not None}
    if overrides:
        mapping = dict(mapping)
        section = dict(mapping.get('training', {}))
        section.update(overrides)
        mapping['training'] = section
    return RunConfig.from_mapping(mapping)


def _characters(text):
    chars = split_characters(clean_text(text or ''))
    if not chars:
        raise UsageError('--text holds no characters')
    return chars


def _print_report(report, stream):
    stream.write(report.to_json() + '\n')
    stream.write(report.to_table() + '\n')


# Commands

def cmd_render(args, stream):
    atlas = load_font(_existing(args.font, 'font'))
    chars = _characters(args.text)
    bank = GlyphBank(atlas)
    os.makedirs(args.out, exist_ok=True)
    bitmaps = []
    for index, char in enumerate(chars):
        bitmap = encode_char(bank.resolve(char), atlas)[0].astype(np.uint8)
        path = os.path.join(args.out, '{:03d}_{:04X}.pgm'.format(
            index, ord(char)
        ))
        write_pgm(bitmap, path)
        bitmaps.append(bitmap)
        stream.write(path + '\n')
    strip = os.path.join(args.out, 'strip.pgm')
    write_pgm(np.concatenate(bitmaps, axis=1), strip)
    stream.write(strip + '\n')
    return EXIT_OK


def cmd_pretrain(args, stream):
    corpus = _existing(args.corpus, 'corpus')
    atlas = load_font(_existing(args.font, 'font'))
    run_config = _read_run_config(args.config, seed=args.seed)
    run_config.paths.update(font=args.font, corpus=corpus, out=args.out)
    result = pretrain_run(
        iter_corpus_lines(corpus), atlas, run_config, args.out,
        steps=args.steps,
        resume=_existing(args.resume, 'checkpoint') if args.resume else None,
        progress=args.progress,
    )
    stream.write('{}\n'.format(result.checkpoint))
    return EXIT_OK


def cmd_finetune(args, stream):
    atlas = load_font(_existing(args.font, 'font'))
    task = TaskSpec(
        kind=args.kind, labels=[x for x in args.labels.split(',') if x],
        lr=args.lr, epochs=args.epochs, max_len=args.max_len,
        batch_size=args.batch_size, seed=args.seed,
    )
    model_config = None
    if args.config:
        model_config = _read_run_config(args.config).model
    checkpoint = (_existing(args.checkpoint, 'checkpoint')
                  if args.checkpoint else None)
    result = finetune_run(
        task,
        read_task_file(_existing(args.train, 'training file'), task),
        read_task_file(_existing(args.dev, 'dev file'), task),
        atlas, args.out, checkpoint=checkpoint, model_config=model_config,
        test_examples=(read_task_file(_existing(args.test, 'test file'), task)
                       if args.test else None),
        progress=args.progress,
    )
    _print_report(result.report, stream)
    stream.write('{}\n'.format(result.checkpoint))
    return EXIT_OK


def cmd_eval(args, stream):
    if args.predictions:
        gold, pred = read_predictions_file(
            _existing(args.predictions, 'predictions file')
        )
        _print_report(span_f1(pred, gold), stream)
        return EXIT_OK
    if not (args.checkpoint and args.font and args.test):
        raise UsageError(
            'eval needs --predictions, or --checkpoint, --font and --test'
        )
    model, task = load_finetuned(_existing(args.checkpoint, 'checkpoint'))
    atlas = load_font(_existing(args.font, 'font'))
    examples = read_task_file(_existing(args.test, 'test file'), task)
    _print_report(evaluate(model, task, examples, GlyphBank(atlas)), stream)
    return EXIT_OK


def cmd_embed(args, stream):
    atlas = load_font(_existing(args.font, 'font'))
    first = _characters(args.text)
    second = _characters(args.text_b) if args.text_b else []
    if args.checkpoint:
        checkpoint = load_checkpoint(_existing(args.checkpoint, 'checkpoint'))
        config = RunConfig.from_mapping(checkpoint.config).model
        model = GlyphCRM(config)
        model.load_arrays(checkpoint.parameters())
    else:
        run_config = _read_run_config(args.config, seed=args.seed)
        model = GlyphCRM(run_config.model, run_config.training.seed)
    keys = [CLS] + first + [SEP]
    segments = [0] * len(keys)
    if second:
        keys += second + [SEP]
        segments += [1] * (len(second) + 1)
    hidden, glyph = model.encode(pad_batch([keys], [segments]),
                                 GlyphBank(atlas))
    out = open(args.out, 'w', encoding='utf-8') if args.out else stream
    try:
        for position, key in enumerate(keys):
            if key in (CLS, SEP):
                continue
            out.write(json.dumps({
                'position': position,
                'char': key,
                'r': glyph.data[0, position].tolist(),
                'hidden': hidden.data[0, position].tolist(),
            }, ensure_ascii=False) + '\n')
    finally:
        if out is not stream:
            out.close()
    return EXIT_OK


def cmd_config(args, stream):
    run_config = _read_run_config(args.config)
    if args.dump or not args.count:
        stream.write(run_config.to_json() + '\n')
    if args.count:
        counts = count_parameters(run_config.model, args.vocab_size)
        width = max(len(name) for name in counts)
        for name, value in counts.items():
            text = ('{:.3f}'.format(value) if isinstance(value, float)
                    else '{:,}'.format(value))
            stream.write('{}  {}\n'.format(name.ljust(width), text))
    return EXIT_OK


# Public Classes and Functions

def build_parser():
    # type: () -> argparse.ArgumentParser
    parser = argparse.ArgumentParser(
        prog='glyphcrm',
        description='Glyph-based Chinese text representation model'
    )
    parser.add_argument('-v', '--verbose', action='store_true',
                        help='log debug messages')
    parser.add_argument('-q', '--quiet', action='store_true',
                        help='log warnings and errors only')
    commands = parser.add_subparsers(dest='command', metavar='command')
    commands.required = True

    render = commands.add_parser('render', help='write glyph bitmaps')
    render.add_argument('--font', required=True, help='BDF font file')
    render.add_argument('--text', required=True, help='characters to render')
    render.add_argument('--out', required=True, help='output directory')
    render.set_defaults(func=cmd_render)

    pretrain = commands.add_parser('pretrain', help='MLM + NSP pretraining')
    pretrain.add_argument('--corpus', required=True,
                          help='one sentence per line, blank line between '
                               'documents')
    pretrain.add_argument('--font', required=True, help='BDF font file')
    pretrain.add_argument('--config', help='JSON run configuration')
    pretrain.add_argument('--out', required=True, help='output directory')
    pretrain.add_argument('--steps', type=int,
                          help='optimizer steps (default: total_steps)')
    pretrain.add_argument('--seed', type=int, help='override training.seed')
    pretrain.add_argument('--resume', help='checkpoint to continue from')
    pretrain.add_argument('--progress', action='store_true',
                          help='show a progress bar')
    pretrain.set_defaults(func=cmd_pretrain)

    finetune = commands.add_parser('finetune', help='fine-tune a task head')
    finetune.add_argument('--checkpoint',
                          help='pretrained checkpoint (default: random init)')
    finetune.add_argument('--font', required=True, help='BDF font file')
    finetune.add_argument('--kind', required=True, choices=TASK_KINDS)
    finetune.add_argument('--labels', required=True,
                          help='comma separated label set')
    finetune.add_argument('--train', required=True)
    finetune.add_argument('--dev', required=True)
    finetune.add_argument('--test')
    finetune.add_argument('--out', required=True, help='output directory')
    finetune.add_argument('--config',
                          help='JSON run configuration (model section used '
                               'without a checkpoint)')
    finetune.add_argument('--lr', type=float, default=2e-5)
    finetune.add_argument('--epochs', type=int, default=3)
    finetune.add_argument('--max-len', type=int, default=128,
                          help='framed length, capped at the model max_len')
    finetune.add_argument('--batch-size', type=int, default=16)
    finetune.add_argument('--seed', type=int, default=0)
    finetune.add_argument('--progress', action='store_true')
    finetune.set_defaults(func=cmd_finetune)

    evaluation = commands.add_parser('eval', help='score a task')
    evaluation.add_argument('--predictions',
                            help="'char gold pred' file scored without a "
                                 "model")
    evaluation.add_argument('--checkpoint', help='fine-tuned checkpoint')
    evaluation.add_argument('--font', help='BDF font file')
    evaluation.add_argument('--test', help='labelled task file')
    evaluation.set_defaults(func=cmd_eval)

    embed = commands.add_parser('embed',
                                help='glyph vectors and hidden states')
    embed.add_argument('--font', required=True, help='BDF font file')
    embed.add_argument('--text', required=True)
    embed.add_argument('--text-b', help='second segment')
    embed.add_argument('--checkpoint', help='pretrained or fine-tuned model')
    embed.add_argument('--config',
                       help='JSON run configuration used without a '
                            'checkpoint')
    embed.add_argument('--seed', type=int)
    embed.add_argument('--out', help='JSON lines file (default: stdout)')
    embed.set_defaults(func=cmd_embed)

    config = commands.add_parser('config', help='show configuration')
    config.add_argument('--config', help='JSON run configuration')
    config.add_argument('--dump', action='store_true',
                        help='print the canonical JSON configuration')
    config.add_argument('--count', action='store_true',
                        help='print the analytic parameter counts')
    config.add_argument('--vocab-size', type=int,
                        help='include an MLM head of this size in --count')
    config.set_defaults(func=cmd_config)
    return parser


def main(argv=None, stream=None):
    # type: (Optional[List[str]], Optional[object]) -> int
    """Run a command and return its exit status."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    level = logging.INFO
    if args.verbose:
        level = logging.DEBUG
    elif args.quiet:
        level = logging.WARNING
    logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr)
    stream = stream or sys.stdout
    try:
        return args.func(args, stream)
    except USAGE_ERRORS as err:
        sys.stderr.write('glyphcrm {}: {}\n'.format(args.command, err))
        return EXIT_USAGE
    except GlyphCRMError as err:
        sys.stderr.write('glyphcrm {}: {}\n'.format(args.command, err))
        return EXIT_FAILURE
    except OSError as err:
        sys.stderr.write('glyphcrm {}: {}\n'.format(args.command, err))
        return EXIT_FAILURE


if __name__ == '__main__':  # pragma: no cover
    sys.exit(main())
