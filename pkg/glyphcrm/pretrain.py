#!/usr/bin/env python
# encoding: utf-8
"""
copyright (c) 2024 GlyphCRM contributors.
All rights reserved

Masked language model and next sentence pretraining.

Corpus files are UTF-8 text with one sentence per line and a blank line
between documents. Every example is drawn from its own rng seeded by
(seed, example index), so the example stream is fixed by the seed alone and
a run resumed from a checkpoint continues exactly where it stopped.
"""
from __future__ import annotations

# Imports from Standard Library
import json
import logging
import math
import os
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Iterator, List, Optional, Sequence, Tuple

# Imports from Third Party Modules
import numpy as np
from tqdm import tqdm

# Local Imports
from glyphcrm.checkpoint import load_checkpoint, save_checkpoint
from glyphcrm.cleaning import clean_text, split_characters
from glyphcrm.config import ModelConfig, RunConfig, TrainingConfig
from glyphcrm.constants import (
    CLS,
    IGNORE_ID,
    IS_NEXT,
    MASK,
    NOT_NEXT,
    SEP,
    SPECIAL_TOKENS,
    UNK,
)
from glyphcrm.exceptions import CheckpointError, DataError, NonFiniteError
from glyphcrm.glyphsource import GlyphBank
from glyphcrm.model import GlyphCRM, pad_batch
from glyphcrm.tensorcore import (
    AdamState,
    Tape,
    Tensor,
    add,
    adam_step,
    cross_entropy,
    linear,
    reshape,
    take,
)

# Setup
logger = logging.getLogger(__name__)

# Constants
RESERVED = len(SPECIAL_TOKENS)
MASK_ID = SPECIAL_TOKENS.index(MASK)
UNK_ID = SPECIAL_TOKENS.index(UNK)
METRICS_FILE = 'metrics.jsonl'
VOCAB_FILE = 'vocab.txt'
CHECKPOINT_NAME = 'checkpoint-{:08d}.gcrm'
LAST_GOOD_NAME = 'last-good.gcrm'

# rng streams
PAIR_STREAM = 1
EXAMPLE_STREAM = 2

# Data Structure Definitions


class Vocabulary(object):
    """Dense id <-> character table with the reserved tokens at 0..4.

    :param tokens: non-reserved characters in id order
    :param frequencies: corpus frequency per character
    """

    def __init__(self, tokens=(), frequencies=None):
        # type: (Sequence[str], Optional[dict]) -> None
        self.tokens = list(SPECIAL_TOKENS) + list(tokens)
        self.ids = {token: i for i, token in enumerate(self.tokens)}
        if len(self.ids) != len(self.tokens):
            raise DataError('vocabulary has duplicate entries')
        self.frequencies = dict(frequencies or {})

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.ids

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def id_of(self, token):
        # type: (str) -> int
        """Id of token; characters outside the table map to [UNK]."""
        return self.ids.get(token, UNK_ID)

    def token(self, index):
        # type: (int) -> str
        return self.tokens[index]

    @property
    def entries(self):
        """Non-reserved tokens in id order."""
        return self.tokens[RESERVED:]

    def save(self, path):
        """Write one 'token<TAB>frequency' line per non-reserved entry."""
        with open(path, 'w', encoding='utf-8') as handle:
            for token in self.entries:
                handle.write('{}\t{}\n'.format(
                    token, self.frequencies.get(token, 0)
                ))

    @classmethod
    def load(cls, path):
        # type: (str) -> Vocabulary
        tokens, frequencies = [], {}
        with open(path, 'r', encoding='utf-8') as handle:
            for lineno, line in enumerate(handle, 1):
                line = line.rstrip('\n')
                if not line:
                    continue
                token, _, freq = line.partition('\t')
                if len(token) != 1:
                    raise DataError(
                        'vocabulary entry {!r} is not one character'.format(
                            token
                        ), lineno
                    )
                tokens.append(token)
                frequencies[token] = int(freq or 0)
        return cls(tokens, frequencies)


@dataclass
class PretrainExample:
    """One framed sentence pair with its MLM and NSP targets.

    keys are the original frame/character keys; input_keys are what the
    glyph encoder sees after masking.
    """
    keys: List[str]
    input_keys: List[str]
    ids: np.ndarray
    segments: np.ndarray
    mlm_labels: np.ndarray
    nsp_label: int


@dataclass
class PretrainBatch:
    """Padded examples ready for the model."""
    batch: object
    mlm_labels: np.ndarray
    nsp_labels: np.ndarray


class LrSchedule(object):
    """Linear warmup to the base rate, then linear decay to 0.

    lr(step) = base * step / warmup while step <= warmup, then
    base * (total - step) / (total - warmup). Step 0 is treated as step 1.
    """

    def __init__(self, base=1e-4, warmup=10000, total=1000000):
        self.base = base
        self.warmup = warmup
        self.total = total

    def __call__(self, step):
        # type: (int) -> float
        step = max(int(step), 1)
        if self.warmup and step <= self.warmup:
            return self.base * step / self.warmup
        if step >= self.total:
            return 0.0
        return self.base * (self.total - step) / float(
            self.total - self.warmup
        )

    @classmethod
    def from_config(cls, training):
        # type: (TrainingConfig) -> LrSchedule
        return cls(training.lr, training.warmup_steps, training.total_steps)


@dataclass
class PretrainResult:
    """What a pretraining run leaves behind."""
    model: GlyphCRM
    vocab: Vocabulary
    step: int
    checkpoint: Optional[str] = None
    metrics: List[dict] = field(default_factory=list)


# Corpus handling

def iter_corpus_lines(path):
    # type: (str) -> Iterator[str]
    with open(path, 'r', encoding='utf-8') as handle:
        for line in handle:
            yield line.rstrip('\n')


def read_documents(lines):
    # type: (Iterable[str]) -> List[List[List[str]]]
    """Group cleaned sentences into documents.

    :param lines: corpus lines; a blank line closes a document
    :return: documents as lists of sentences as lists of characters
    """
    documents, current = [], []
    for line in lines:
        chars = split_characters(clean_text(line))
        if chars:
            current.append(chars)
        elif not line.strip() and current:
            documents.append(current)
            current = []
    if current:
        documents.append(current)
    return documents


def build_vocab(lines, atlas, min_freq=2):
    # type: (Iterable[str], object, int) -> Vocabulary
    """Count corpus characters and keep the frequent renderable ones.

    Entries are ordered by descending frequency, then ascending codepoint.
    Characters below min_freq or absent from the font are left out and map
    to [UNK] on lookup.

    :param lines: corpus lines
    :param atlas: FontAtlas deciding renderability
    :param min_freq: minimum corpus frequency
    :return: Vocabulary
    """
    counts = Counter()
    for line in lines:
        counts.update(split_characters(clean_text(line)))
    if not counts:
        logger.warning('empty corpus, vocabulary holds only reserved tokens')
    kept = [
        char for char, freq in counts.items()
        if freq >= min_freq and char in atlas
    ]
    kept.sort(key=lambda char: (-counts[char], ord(char)))
    logger.info('vocabulary: %d of %d distinct characters kept',
                len(kept), len(counts))
    return Vocabulary(kept, {char: counts[char] for char in kept})


def truncate_pair(first, second, budget):
    # type: (List[str], List[str], int) -> Tuple[List[str], List[str]]
    """Drop tail characters from the longer side until both fit budget."""
    first, second = list(first), list(second)
    while len(first) + len(second) > budget:
        if len(first) >= len(second):
            first.pop()
        else:
            second.pop()
    return first, second


def make_nsp_pairs(documents, rng, max_len, nsp_probability=0.5):
    # type: (List[List[List[str]]], np.random.Generator, int, float) -> Iterator[Tuple[List[str], List[str], int]]  # noqa
    """Yield (A, B, label) for every adjacent sentence pair.

    With probability nsp_probability B is the true next sentence (IsNext);
    otherwise B is a uniformly drawn sentence of another document
    (NotNext). Pairs are truncated longest-first so that
    [CLS] A [SEP] B [SEP] fits max_len.
    """
    if len(documents) < 2:
        raise DataError('next sentence sampling needs at least 2 documents')
    budget = max_len - 3
    for doc_index, document in enumerate(documents):
        for first, second in zip(document, document[1:]):
            if rng.random() < nsp_probability:
                label = IS_NEXT
            else:
                other = int(rng.integers(len(documents) - 1))
                if other >= doc_index:
                    other += 1
                sentences = documents[other]
                second = sentences[int(rng.integers(len(sentences)))]
                label = NOT_NEXT
            first, second = truncate_pair(first, second, budget)
            yield first, second, label


def apply_mlm_mask(ids, vocab_size, rng, probability=0.15, mask_ratio=0.8,
                   random_ratio=0.1):
    # type: (np.ndarray, int, np.random.Generator, float, float, float) -> Tuple[np.ndarray, np.ndarray]  # noqa
    """Corrupt token ids for masked language modeling.

    Each non-reserved position is selected independently with probability
    `probability`. A selected position becomes [MASK] with probability
    mask_ratio, a uniform non-reserved id with probability random_ratio and
    stays unchanged otherwise. Labels hold the original id at selected
    positions and IGNORE_ID elsewhere.

    :param ids: token ids including frame tokens
    :param vocab_size: vocabulary size
    :param rng: numpy Generator
    :return: (masked ids, labels)
    """
    ids = np.asarray(ids, dtype=np.int64)
    length = ids.shape[0]
    select = rng.random(length) < probability
    action = rng.random(length)
    replacement = (rng.integers(RESERVED, vocab_size, size=length)
                   if vocab_size > RESERVED else np.full(length, UNK_ID))
    select &= ids >= RESERVED
    masked = ids.copy()
    labels = np.full(length, IGNORE_ID, dtype=np.int64)
    labels[select] = ids[select]
    to_mask = select & (action < mask_ratio)
    to_random = select & (action >= mask_ratio) & (
        action < mask_ratio + random_ratio
    )
    masked[to_mask] = MASK_ID
    masked[to_random] = replacement[to_random]
    return masked, labels


def build_example(first, second, label, vocab, rng, training):
    # type: (List[str], List[str], int, Vocabulary, np.random.Generator, TrainingConfig) -> PretrainExample  # noqa
    """Frame a pair as [CLS] A [SEP] B [SEP] and apply MLM corruption.

    Unselected positions keep their real glyph, so characters outside the
    vocabulary are still seen by the glyph encoder.
    """
    keys = [CLS] + list(first) + [SEP] + list(second) + [SEP]
    segments = np.array(
        [0] * (len(first) + 2) + [1] * (len(second) + 1), dtype=np.int64
    )
    ids = np.array([vocab.id_of(key) for key in keys], dtype=np.int64)
    masked, labels = apply_mlm_mask(
        ids, len(vocab), rng, training.mlm_probability, training.mask_ratio,
        training.random_ratio
    )
    input_keys = [
        key if new == old else vocab.token(new)
        for key, old, new in zip(keys, ids, masked)
    ]
    return PretrainExample(keys, input_keys, ids, segments, labels, label)


def collate(examples):
    # type: (Sequence[PretrainExample]) -> PretrainBatch
    batch = pad_batch([ex.input_keys for ex in examples],
                      [ex.segments for ex in examples])
    labels = np.full(batch.shape, IGNORE_ID, dtype=np.int64)
    for row, ex in enumerate(examples):
        labels[row, :len(ex.mlm_labels)] = ex.mlm_labels
    return PretrainBatch(
        batch=batch, mlm_labels=labels,
        nsp_labels=np.array([ex.nsp_label for ex in examples],
                            dtype=np.int64),
    )


class ExampleStream(object):
    """Deterministic indexable stream of pretraining examples.

    Epoch e visits every sentence pair once, in an order shuffled by
    (seed, e); example i is corrupted by its own rng (seed, i).
    """

    def __init__(self, documents, vocab, model_config, training):
        # type: (list, Vocabulary, ModelConfig, TrainingConfig) -> None
        self.documents = documents
        self.vocab = vocab
        self.max_len = model_config.max_len
        self.training = training
        self.seed = training.seed
        self._epoch = None
        self._pairs = None
        size = sum(max(len(doc) - 1, 0) for doc in documents)
        if not size:
            raise DataError('corpus has no adjacent sentence pairs')
        self.epoch_size = size

    def _epoch_pairs(self, epoch):
        if self._epoch != epoch:
            rng = np.random.default_rng([self.seed, PAIR_STREAM, epoch])
            pairs = list(make_nsp_pairs(
                self.documents, rng, self.max_len,
                self.training.nsp_probability
            ))
            order = rng.permutation(len(pairs))
            self._pairs = [pairs[i] for i in order]
            self._epoch = epoch
        return self._pairs

    def example(self, index):
        # type: (int) -> PretrainExample
        epoch, offset = divmod(index, self.epoch_size)
        first, second, label = self._epoch_pairs(epoch)[offset]
        rng = np.random.default_rng([self.seed, EXAMPLE_STREAM, index])
        return build_example(first, second, label, self.vocab, rng,
                             self.training)

    def batch(self, step):
        # type: (int) -> PretrainBatch
        """Batch consumed by optimizer step `step` (1-based)."""
        size = self.training.batch_size
        start = (step - 1) * size
        return collate([self.example(i) for i in range(start, start + size)])


# Losses

def mlm_loss(hidden, labels, weight, bias):
    # type: (Tensor, np.ndarray, Tensor, Tensor) -> Tuple[Tensor, Optional[np.ndarray]]  # noqa
    """Cross-entropy of the vocabulary projection at labelled positions.

    :param hidden: B x L x D (or L x D) final hidden states
    :param labels: matching ids with IGNORE_ID at unselected positions
    :param weight: D x V output projection
    :param bias: V
    :return: (loss, logits of the labelled rows or None); the loss is 0
        when nothing is labelled
    """
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    width = hidden.shape[-1]
    rows = np.nonzero(labels != IGNORE_ID)[0]
    if not rows.size:
        return Tensor(np.zeros((), dtype=hidden.data.dtype)), None
    flat = reshape(hidden, (labels.shape[0], width))
    logits = linear(take(flat, rows), weight, bias)
    return cross_entropy(logits, labels[rows]), logits.data


def nsp_loss(cls_hidden, labels, weight, bias):
    # type: (Tensor, np.ndarray, Tensor, Tensor) -> Tuple[Tensor, np.ndarray]
    """Two-way cross-entropy on the [CLS] states (B x D)."""
    logits = linear(cls_hidden, weight, bias)
    return cross_entropy(logits, np.asarray(labels).reshape(-1)), logits.data


def cls_states(hidden):
    # type: (Tensor) -> Tensor
    """Gather position 0 of every sequence: B x L x D -> B x D."""
    b, length, width = hidden.shape
    flat = reshape(hidden, (b * length, width))
    return take(flat, np.arange(b) * length)


def masked_accuracy(logits, labels):
    labels = np.asarray(labels).reshape(-1)
    targets = labels[labels != IGNORE_ID]
    if logits is None or not targets.size:
        return 0.0
    return float((np.argmax(logits, axis=-1) == targets).mean())


# Training

def training_step(model, batch, bank):
    # type: (GlyphCRM, PretrainBatch, GlyphBank) -> Tuple[Tape, Tensor, dict]
    """Forward pass of one batch on a fresh tape.

    :return: (tape, total loss, metrics)
    """
    mlm_weight, mlm_bias = model.head('mlm')
    nsp_weight, nsp_bias = model.head('nsp')
    with Tape() as tape:
        hidden, _ = model.encode(batch.batch, bank)
        loss_mlm, mlm_logits = mlm_loss(hidden, batch.mlm_labels, mlm_weight,
                                        mlm_bias)
        loss_nsp, nsp_logits = nsp_loss(cls_states(hidden), batch.nsp_labels,
                                        nsp_weight, nsp_bias)
        loss = add(loss_mlm, loss_nsp)
    metrics = {
        'mlm_loss': loss_mlm.item(),
        'nsp_loss': loss_nsp.item(),
        'loss': loss.item(),
        'mlm_acc': masked_accuracy(mlm_logits, batch.mlm_labels),
        'nsp_acc': float(
            (np.argmax(nsp_logits, axis=-1) == batch.nsp_labels).mean()
        ),
    }
    return tape, loss, metrics


def gradients_by_name(model, tape, loss):
    grads = tape.backward(loss)
    return {name: grads.get(tensor) for name, tensor in model.params.items()}


def _checkpoint_state(step, training):
    return {
        'step': step,
        'seed': training.seed,
        'examples': step * training.batch_size,
    }


def _save(path, model, run_config, adam, vocab, step):
    return save_checkpoint(
        path, model.state_arrays(), run_config.to_dict(),
        _checkpoint_state(step, run_config.training), adam, vocab.entries
    )


def pretrain_run(lines, atlas, run_config, out_dir, steps=None, resume=None,
                 progress=False):
    # type: (Iterable[str], object, RunConfig, str, Optional[int], Optional[str], bool) -> PretrainResult  # noqa
    """Pretrain with loss = MLM + NSP, Adam and the warmup/decay schedule.

    Checkpoints are written every checkpoint_every steps and after the last
    step; metrics are appended to metrics.jsonl as one JSON object per
    logged step. A non-finite loss stops the run after writing the last good
    state to last-good.gcrm.

    :param lines: corpus lines
    :param atlas: FontAtlas
    :param run_config: RunConfig
    :param out_dir: output directory
    :param steps: optimizer steps to reach (defaults to total_steps)
    :param resume: checkpoint to continue from
    :param progress: show a tqdm progress bar
    :return: PretrainResult
    """
    training = run_config.training
    os.makedirs(out_dir, exist_ok=True)
    lines = list(lines)
    documents = read_documents(lines)
    bank = GlyphBank(atlas)
    adam = AdamState()
    start = 0
    if resume:
        checkpoint = load_checkpoint(resume)
        if checkpoint.vocab is None:
            raise CheckpointError('{} holds no vocabulary'.format(resume))
        vocab = Vocabulary(checkpoint.vocab)
        saved = RunConfig.from_mapping(checkpoint.config)
        if saved.model != run_config.model:
            raise CheckpointError(
                'model config of {} differs from the run config'.format(
                    resume
                )
            )
        model = GlyphCRM(run_config.model, training.seed,
                         mlm_vocab=len(vocab), nsp=True)
        model.load_arrays(checkpoint.parameters())
        adam = checkpoint.adam_state()
        start = checkpoint.step
        logger.info('resuming from %s at step %d', resume, start)
    else:
        vocab = build_vocab(lines, atlas, training.min_freq)
        model = GlyphCRM(run_config.model, training.seed,
                         mlm_vocab=len(vocab), nsp=True)
    vocab.save(os.path.join(out_dir, VOCAB_FILE))
    stream = ExampleStream(documents, vocab, run_config.model, training)
    schedule = LrSchedule.from_config(training)
    target = steps if steps is not None else training.total_steps
    result = PretrainResult(model=model, vocab=vocab, step=start)
    metrics_path = os.path.join(out_dir, METRICS_FILE)
    epoch_losses = []
    began = time.time()

    with open(metrics_path, 'a', encoding='utf-8') as metrics_log:
        for step in tqdm(range(start + 1, target + 1), disable=not progress,
                         desc='pretrain', initial=start, total=target):
            tape, loss, metrics = training_step(model, stream.batch(step),
                                                bank)
            lr = schedule(step)
            try:
                if not math.isfinite(metrics['loss']):
                    raise NonFiniteError(
                        'loss is {} at step {}'.format(metrics['loss'], step),
                        'loss'
                    )
                adam_step(model.params, gradients_by_name(model, tape, loss),
                          adam, lr, training.beta1, training.beta2,
                          training.adam_eps, training.weight_decay)
            except NonFiniteError:
                result.checkpoint = _save(
                    os.path.join(out_dir, LAST_GOOD_NAME), model, run_config,
                    adam, vocab, step - 1
                )
                raise
            result.step = step
            metrics.update(step=step, lr=lr,
                           wallclock=round(time.time() - began, 3))
            epoch_losses.append(metrics['loss'])
            logger.debug('step %d loss %.4f', step, metrics['loss'])
            if step % training.log_every == 0:
                metrics_log.write(json.dumps(metrics, sort_keys=True) + '\n')
                result.metrics.append(metrics)
            consumed = step * training.batch_size
            if consumed // stream.epoch_size > (
                    consumed - training.batch_size) // stream.epoch_size:
                logger.info('epoch %d done, mean loss %.4f',
                            consumed // stream.epoch_size,
                            float(np.mean(epoch_losses)))
                epoch_losses = []
            if step % training.checkpoint_every == 0 or step == target:
                result.checkpoint = _save(
                    os.path.join(out_dir, CHECKPOINT_NAME.format(step)),
                    model, run_config, adam, vocab, step
                )
    return result
