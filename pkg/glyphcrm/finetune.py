#!/usr/bin/env python
# encoding: utf-8
"""
copyright (c) 2024 GlyphCRM contributors.
All rights reserved

Task heads, fine-tuning and evaluation.

Three task kinds share the encoder:

    single_cls  label<TAB>text                  head on the [CLS] state
    pair_cls    label<TAB>text_a<TAB>text_b     head on the [CLS] state
    tagging     one 'char label' per line,      head on every character
                blank line between sentences

Tagging is scored at entity level: an entity is a maximal B-X (I-X)* run and
only exact (type, start, end) matches count.
"""
from __future__ import annotations

# Imports from Standard Library
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

# Imports from Third Party Modules
import numpy as np
from tqdm import tqdm

# Local Imports
from glyphcrm.checkpoint import load_checkpoint, save_checkpoint
from glyphcrm.cleaning import clean_text, split_characters
from glyphcrm.config import ModelConfig, RunConfig
from glyphcrm.constants import CLS, IGNORE_ID, SEP
from glyphcrm.exceptions import CheckpointError, DataError
from glyphcrm.glyphsource import GlyphBank
from glyphcrm.model import GlyphCRM, pad_batch
from glyphcrm.pretrain import cls_states, gradients_by_name, truncate_pair
from glyphcrm.tensorcore import (
    AdamState,
    Tape,
    Tensor,
    adam_step,
    cross_entropy,
    linear,
    reshape,
    softmax,
)
from glyphcrm.validations import validate_bio_labels, validate_task_labels

# Setup
logger = logging.getLogger(__name__)

# Constants
SINGLE_CLS = 'single_cls'
PAIR_CLS = 'pair_cls'
TAGGING = 'tagging'
TASK_KINDS = (SINGLE_CLS, PAIR_CLS, TAGGING)
OUTSIDE = 'O'
FINETUNED_NAME = 'finetuned.gcrm'
HISTORY_FILE = 'history.jsonl'

# Data Structure Definitions


@dataclass
class TaskSpec:
    """A fine-tuning task: kind, label set and optimisation settings."""
    kind: str
    labels: Tuple[str, ...]
    lr: float = 2e-5
    epochs: int = 3
    max_len: int = 128
    batch_size: int = 16
    weight_decay: float = 0.01
    seed: int = 0

    def __post_init__(self):
        self.labels = tuple(self.labels)
        if self.kind not in TASK_KINDS:
            msg = 'unknown task kind {!r}, expected one of {}'.format(
                self.kind, ', '.join(TASK_KINDS)
            )
            raise DataError(msg)
        validate_task_labels(self.labels)
        if len(self.labels) < 2:
            raise DataError('a task needs at least 2 labels')
        if self.kind == TAGGING:
            validate_bio_labels(self.labels)
        self.label_ids = {label: i for i, label in enumerate(self.labels)}

    def label_id(self, label, line=None):
        try:
            return self.label_ids[label]
        except KeyError:
            raise DataError(
                'label {!r} is not in the declared set'.format(label), line
            )

    def to_dict(self):
        values = asdict(self)
        values['labels'] = list(self.labels)
        return values

    @classmethod
    def from_dict(cls, values):
        return cls(**values)


@dataclass
class ClassificationExample:
    label: int
    text_a: List[str]
    text_b: Optional[List[str]] = None
    line: Optional[int] = None


@dataclass
class TaggingExample:
    chars: List[str]
    labels: List[int]
    line: Optional[int] = None


@dataclass
class EvalReport:
    """Evaluation summary.

    accuracy is sentence accuracy for classification and token accuracy for
    tagging; precision/recall/f1 are entity-level and only set for tagging.
    """
    kind: str
    count: int
    accuracy: float
    precision: Optional[float] = None
    recall: Optional[float] = None
    f1: Optional[float] = None
    per_type: Dict[str, dict] = field(default_factory=dict)
    repaired: int = 0

    @property
    def score(self):
        """Model-selection score: F1 for tagging, accuracy otherwise."""
        return self.f1 if self.kind == TAGGING else self.accuracy

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    def to_table(self):
        """Aligned plain-text rendering."""
        rows = [('', 'precision', 'recall', 'f1', 'support')]
        for name in sorted(self.per_type):
            counts = self.per_type[name]
            rows.append((name, '{:.4f}'.format(counts['precision']),
                         '{:.4f}'.format(counts['recall']),
                         '{:.4f}'.format(counts['f1']),
                         str(counts['support'])))
        if self.f1 is not None:
            rows.append(('overall', '{:.4f}'.format(self.precision),
                         '{:.4f}'.format(self.recall),
                         '{:.4f}'.format(self.f1), ''))
        lines = []
        if len(rows) > 1:
            widths = [max(len(row[i]) for row in rows) for i in range(5)]
            for row in rows:
                lines.append('  '.join(
                    cell.rjust(width) if i else cell.ljust(width)
                    for i, (cell, width) in enumerate(zip(row, widths))
                ).rstrip())
        lines.append('accuracy {:.4f} over {} {}'.format(
            self.accuracy, self.count,
            'tokens' if self.kind == TAGGING else 'examples'
        ))
        if self.repaired:
            lines.append('repaired transitions {}'.format(self.repaired))
        return '\n'.join(lines)


@dataclass
class FinetuneResult:
    model: GlyphCRM
    task: TaskSpec
    report: EvalReport
    best_epoch: int
    history: List[dict] = field(default_factory=list)
    checkpoint: Optional[str] = None


# Private Functions

def _prf(right, found, origin):
    precision = right / found if found else 0.0
    recall = right / origin if origin else 0.0
    f1 = (2 * precision * recall / (precision + recall)
          if precision + recall else 0.0)
    return precision, recall, f1


def _as_sequences(labels):
    if labels and isinstance(labels[0], str):
        return [list(labels)]
    return [list(seq) for seq in labels]


def _text(value):
    return split_characters(clean_text(value))


# Data files

def read_classification_file(path, task):
    # type: (str, TaskSpec) -> List[ClassificationExample]
    columns = 3 if task.kind == PAIR_CLS else 2
    examples = []
    with open(path, 'r', encoding='utf-8') as handle:
        for lineno, line in enumerate(handle, 1):
            line = line.rstrip('\n')
            if not line.strip():
                continue
            parts = line.split('\t')
            if len(parts) != columns:
                raise DataError('expected {} tab-separated columns, got '
                                '{}'.format(columns, len(parts)), lineno)
            label = task.label_id(parts[0].strip(), lineno)
            text_a = _text(parts[1])
            text_b = _text(parts[2]) if columns == 3 else None
            if not text_a or (columns == 3 and not text_b):
                raise DataError('empty text', lineno)
            examples.append(
                ClassificationExample(label, text_a, text_b, lineno)
            )
    return examples


def read_tagging_file(path, task):
    # type: (str, TaskSpec) -> List[TaggingExample]
    """Read 'char label' lines; a blank line ends a sentence."""
    examples = []
    chars, labels, start = [], [], None
    with open(path, 'r', encoding='utf-8') as handle:
        for lineno, line in enumerate(handle, 1):
            parts = line.split()
            if not parts:
                if chars:
                    examples.append(TaggingExample(chars, labels, start))
                chars, labels, start = [], [], None
                continue
            if len(parts) != 2 or len(parts[0]) != 1:
                raise DataError("expected 'char label'", lineno)
            chars.append(parts[0])
            labels.append(task.label_id(parts[1], lineno))
            start = start or lineno
    if chars:
        examples.append(TaggingExample(chars, labels, start))
    return examples


def read_task_file(path, task):
    if task.kind == TAGGING:
        return read_tagging_file(path, task)
    return read_classification_file(path, task)


def read_predictions_file(path):
    # type: (str) -> Tuple[List[List[str]], List[List[str]]]
    """Read 'char gold pred' lines into gold and predicted sequences."""
    gold, pred = [], []
    gold_seq, pred_seq = [], []
    with open(path, 'r', encoding='utf-8') as handle:
        for lineno, line in enumerate(handle, 1):
            parts = line.split()
            if not parts:
                if gold_seq:
                    gold.append(gold_seq)
                    pred.append(pred_seq)
                gold_seq, pred_seq = [], []
                continue
            if len(parts) != 3:
                raise DataError("expected 'char gold pred'", lineno)
            gold_seq.append(parts[1])
            pred_seq.append(parts[2])
    if gold_seq:
        gold.append(gold_seq)
        pred.append(pred_seq)
    return gold, pred


# Framing

def frame_classification(example, max_len):
    """[CLS] A [SEP] (B [SEP]) with tail truncation, longer side first."""
    if example.text_b is None:
        text_a = example.text_a[:max_len - 2]
        keys = [CLS] + text_a + [SEP]
        return keys, [0] * len(keys)
    text_a, text_b = truncate_pair(example.text_a, example.text_b,
                                   max_len - 3)
    keys = [CLS] + text_a + [SEP] + text_b + [SEP]
    return keys, [0] * (len(text_a) + 2) + [1] * (len(text_b) + 1)


def frame_tagging(example, max_len):
    """[CLS] chars [SEP]; frame positions carry IGNORE_ID."""
    chars = example.chars[:max_len - 2]
    keys = [CLS] + chars + [SEP]
    labels = [IGNORE_ID] + list(example.labels[:len(chars)]) + [IGNORE_ID]
    return keys, [0] * len(keys), labels


def sequence_limit(task, config):
    # type: (TaskSpec, ModelConfig) -> int
    """Framed length cap: the task's max_len, never past the model's."""
    return min(task.max_len, config.max_len)


def make_batch(examples, task, max_len=None):
    """Pad framed examples; returns (Batch, targets).

    :param max_len: framed length cap, defaults to task.max_len
    """
    max_len = max_len or task.max_len
    if task.kind == TAGGING:
        framed = [frame_tagging(ex, max_len) for ex in examples]
        batch = pad_batch([f[0] for f in framed], [f[1] for f in framed])
        targets = np.full(batch.shape, IGNORE_ID, dtype=np.int64)
        for row, (_, _, labels) in enumerate(framed):
            targets[row, :len(labels)] = labels
        return batch, targets
    framed = [frame_classification(ex, max_len) for ex in examples]
    batch = pad_batch([f[0] for f in framed], [f[1] for f in framed])
    return batch, np.array([ex.label for ex in examples], dtype=np.int64)


# Heads

def classify(cls_hidden, weight, bias):
    # type: (Tensor, Tensor, Tensor) -> Tensor
    """Label distribution from the [CLS] states (B x D -> B x K)."""
    return softmax(linear(cls_hidden, weight, bias))


def tag(hidden, weight, bias):
    # type: (Tensor, Tensor, Tensor) -> Tuple[Tensor, np.ndarray]
    """Per-token logits (B x L x K) and argmax labels (B x L)."""
    logits = linear(hidden, weight, bias)
    return logits, np.argmax(logits.data, axis=-1)


def task_loss(hidden, targets, weight, bias, kind):
    # type: (Tensor, np.ndarray, Tensor, Tensor, str) -> Tuple[Tensor, np.ndarray]  # noqa
    """Cross-entropy of the task head; frame and pad positions are ignored
    for tagging.

    :return: (loss, predictions)
    """
    if kind == TAGGING:
        logits, predictions = tag(hidden, weight, bias)
        b, length, width = logits.shape
        flat = reshape(logits, (b * length, width))
        return cross_entropy(flat, targets.reshape(-1)), predictions
    logits = linear(cls_states(hidden), weight, bias)
    return cross_entropy(logits, targets), np.argmax(logits.data, axis=-1)


# Metrics

def get_entities(labels):
    # type: (Sequence[str]) -> Tuple[List[Tuple[str, int, int]], int]
    """Extract (type, start, end) spans, end exclusive.

    An I-X that does not continue an entity of type X opens a new one as if
    it were B-X; such repairs are counted.

    :return: (entities, repaired count)
    """
    entities = []
    repaired = 0
    current = None
    for index, label in enumerate(labels):
        prefix, _, kind = label.partition('-')
        if prefix == 'I' and current is not None and current[0] == kind:
            current[2] = index + 1
            continue
        if current is not None:
            entities.append(tuple(current))
            current = None
        if prefix == 'I':
            repaired += 1
        if prefix in ('B', 'I') and kind:
            current = [kind, index, index + 1]
    if current is not None:
        entities.append(tuple(current))
    return entities, repaired


def token_accuracy(pred, gold):
    pred, gold = _as_sequences(pred), _as_sequences(gold)
    total = sum(len(seq) for seq in gold)
    right = sum(
        p == g
        for p_seq, g_seq in zip(pred, gold)
        for p, g in zip(p_seq, g_seq)
    )
    return right / total if total else 0.0


def span_f1(pred, gold):
    # type: (Sequence, Sequence) -> EvalReport
    """Entity-level precision, recall and F1 over aligned BIO sequences.

    :param pred: predicted label sequence or list of sequences
    :param gold: gold label sequence or list of sequences
    :return: EvalReport with totals, per-type scores and token accuracy
    """
    pred, gold = _as_sequences(pred), _as_sequences(gold)
    if len(pred) != len(gold) or any(
            len(p) != len(g) for p, g in zip(pred, gold)):
        raise DataError('predicted and gold sequences are not aligned')
    found, origin, right = [], [], []
    repaired = 0
    for sentence, (p_seq, g_seq) in enumerate(zip(pred, gold)):
        p_entities, p_repaired = get_entities(p_seq)
        g_entities, g_repaired = get_entities(g_seq)
        repaired += p_repaired + g_repaired
        p_keyed = [(sentence,) + e for e in p_entities]
        g_keyed = set((sentence,) + e for e in g_entities)
        found.extend(p_keyed)
        origin.extend(g_keyed)
        right.extend(e for e in p_keyed if e in g_keyed)
    if repaired:
        logger.warning('repaired %d I- labels without an opening B-',
                       repaired)
    per_type = {}
    for kind in sorted({e[1] for e in found} | {e[1] for e in origin}):
        counts = [sum(1 for e in group if e[1] == kind)
                  for group in (right, found, origin)]
        precision, recall, f1 = _prf(*counts)
        per_type[kind] = {'precision': precision, 'recall': recall,
                          'f1': f1, 'support': counts[2]}
    precision, recall, f1 = _prf(len(right), len(found), len(origin))
    return EvalReport(
        kind=TAGGING, count=sum(len(seq) for seq in gold),
        accuracy=token_accuracy(pred, gold), precision=precision,
        recall=recall, f1=f1, per_type=per_type, repaired=repaired,
    )


def select_best(scores):
    # type: (Sequence[float]) -> int
    """Index of the highest score; the earliest wins ties."""
    return int(np.argmax(np.asarray(scores, dtype=np.float64)))


# Prediction and evaluation

def predict(model, task, examples, bank, batch_size=None):
    """Predict labels without recording gradients.

    :return: label names per example (a list per sentence for tagging);
        tagging positions cut by truncation are predicted as 'O'
    """
    weight, bias = model.head('task')
    size = batch_size or task.batch_size
    max_len = sequence_limit(task, model.config)
    predictions = []
    for start in range(0, len(examples), size):
        chunk = examples[start:start + size]
        batch, _ = make_batch(chunk, task, max_len)
        hidden, _ = model.encode(batch, bank)
        if task.kind == TAGGING:
            _, labels = tag(hidden, weight, bias)
            for row, ex in enumerate(chunk):
                kept = min(len(ex.chars), max_len - 2)
                names = [task.labels[i] for i in labels[row, 1:kept + 1]]
                predictions.append(names + [OUTSIDE] * (len(ex.chars) - kept))
        else:
            probs = classify(cls_states(hidden), weight, bias)
            predictions.extend(
                task.labels[i] for i in np.argmax(probs.data, axis=-1)
            )
    return predictions


def evaluate(model, task, examples, bank):
    # type: (GlyphCRM, TaskSpec, list, GlyphBank) -> EvalReport
    """Score the model on labelled examples; parameters are not touched."""
    predictions = predict(model, task, examples, bank)
    if task.kind == TAGGING:
        gold = [[task.labels[i] for i in ex.labels] for ex in examples]
        return span_f1(predictions, gold)
    gold = [task.labels[ex.label] for ex in examples]
    right = sum(p == g for p, g in zip(predictions, gold))
    return EvalReport(kind=task.kind, count=len(gold),
                      accuracy=right / len(gold) if gold else 0.0)


def load_finetuned(path):
    # type: (str) -> Tuple[GlyphCRM, TaskSpec]
    checkpoint = load_checkpoint(path)
    if not checkpoint.task:
        raise CheckpointError('{} is not a fine-tuned checkpoint'.format(
            path
        ))
    task = TaskSpec.from_dict(checkpoint.task)
    config = RunConfig.from_mapping(checkpoint.config).model
    model = GlyphCRM(config, task.seed, task_labels=len(task.labels))
    model.load_arrays(checkpoint.parameters())
    return model, task


def finetune_run(task, train_examples, dev_examples, atlas, out_dir,
                 checkpoint=None, model_config=None, test_examples=None,
                 progress=False):
    # type: (TaskSpec, list, list, object, str, Optional[str], Optional[ModelConfig], Optional[list], bool) -> FinetuneResult  # noqa
    """Fine-tune the whole model and keep the epoch with the best dev score.

    :param task: TaskSpec
    :param train_examples: training examples
    :param dev_examples: examples used for model selection
    :param atlas: FontAtlas
    :param out_dir: directory for the fine-tuned checkpoint and history
    :param checkpoint: pretrained checkpoint, or None to start from random
        initialisation
    :param model_config: model shape; defaults to the checkpoint's
    :param test_examples: scored with the selected model when given,
        otherwise the dev report is returned
    :return: FinetuneResult
    """
    if not train_examples:
        raise DataError('no training examples')
    pretrained = load_checkpoint(checkpoint) if checkpoint else None
    if model_config is None:
        model_config = (RunConfig.from_mapping(pretrained.config).model
                        if pretrained else ModelConfig.from_defaults())
    model = GlyphCRM(model_config, task.seed, task_labels=len(task.labels))
    if pretrained:
        model.load_arrays(pretrained.parameters())
        logger.info('fine-tuning from %s (step %d)', checkpoint,
                    pretrained.step)
    else:
        logger.info('fine-tuning from random initialisation')
    max_len = sequence_limit(task, model_config)
    if max_len < task.max_len:
        logger.info('task max_len %d capped at the model max_len %d',
                    task.max_len, max_len)
    bank = GlyphBank(atlas)
    weight, bias = model.head('task')
    adam = AdamState()
    history, best_arrays, best_score = [], None, None
    os.makedirs(out_dir, exist_ok=True)

    for epoch in tqdm(range(1, task.epochs + 1), disable=not progress,
                      desc='finetune'):
        order = np.random.default_rng([task.seed, epoch]).permutation(
            len(train_examples)
        )
        losses = []
        for start in range(0, len(order), task.batch_size):
            chunk = [train_examples[i]
                     for i in order[start:start + task.batch_size]]
            batch, targets = make_batch(chunk, task, max_len)
            with Tape() as tape:
                hidden, _ = model.encode(batch, bank)
                loss, _ = task_loss(hidden, targets, weight, bias, task.kind)
            adam_step(model.params, gradients_by_name(model, tape, loss),
                      adam, task.lr, weight_decay=task.weight_decay)
            losses.append(loss.item())
        dev = evaluate(model, task, dev_examples, bank)
        record = {'epoch': epoch, 'loss': float(np.mean(losses)),
                  'dev_score': dev.score}
        history.append(record)
        logger.info('epoch %d loss %.4f dev %.4f', epoch, record['loss'],
                    dev.score)
        if best_score is None or dev.score > best_score:
            best_score = dev.score
            best_arrays = model.state_arrays()

    best_epoch = select_best([r['dev_score'] for r in history]) + 1
    model.load_arrays(best_arrays)
    with open(os.path.join(out_dir, HISTORY_FILE), 'w',
              encoding='utf-8') as handle:
        for record in history:
            handle.write(json.dumps(record, sort_keys=True) + '\n')
    path = save_checkpoint(
        os.path.join(out_dir, FINETUNED_NAME), model.state_arrays(),
        RunConfig(model=model_config).to_dict(),
        {'step': best_epoch, 'seed': task.seed}, task=task.to_dict()
    )
    report = evaluate(model, task, test_examples or dev_examples, bank)
    return FinetuneResult(model=model, task=task, report=report,
                          best_epoch=best_epoch, history=history,
                          checkpoint=path)
