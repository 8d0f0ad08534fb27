#!/usr/bin/env python
# encoding: utf-8
"""
copyright (c) 2024 GlyphCRM contributors.
All rights reserved

Unit tests for glyphcrm.pretrain.
"""

# Imports from Standard Library
import json
import math
import os
from unittest import TestCase, mock, skipUnless

# Imports from Third Party Modules
import numpy as np
from numpy.testing import assert_allclose, assert_array_equal
from testfixtures import LogCapture, TempDirectory

# Local Imports
from glyphcrm.checkpoint import load_checkpoint
from glyphcrm.config import TrainingConfig
from glyphcrm.constants import CLS, IGNORE_ID, IS_NEXT, MASK, NOT_NEXT, SEP
from glyphcrm.exceptions import CheckpointError, DataError, NonFiniteError
from glyphcrm.pretrain import (
    MASK_ID,
    UNK_ID,
    ExampleStream,
    LrSchedule,
    Vocabulary,
    apply_mlm_mask,
    build_example,
    build_vocab,
    cls_states,
    collate,
    make_nsp_pairs,
    masked_accuracy,
    mlm_loss,
    nsp_loss,
    pretrain_run,
    read_documents,
    truncate_pair,
)
from glyphcrm.tensorcore import Tape, Tensor
from glyphcrm.tests.utils import (
    SLOW_TESTS,
    TOY_ALPHABET,
    TOY_MODEL,
    fixture_font,
    read_bytes,
    run_config,
    synthetic_atlas,
    tiny_model_config,
    toy_corpus_lines,
)


# Helper Functions & Classes

def training(**overrides):
    return TrainingConfig.from_defaults(**overrides)


def toy_vocab():
    return Vocabulary(TOY_ALPHABET[:20])


# Tests
class TestVocabulary(TestCase):
    """Test build_vocab and Vocabulary."""

    def setUp(self):
        self.atlas = fixture_font()

    def test_min_freq_one(self):
        vocab = build_vocab(['你好。你好吗。'], self.atlas, min_freq=1)
        self.assertEqual(len(vocab), 9)
        self.assertEqual(vocab.entries, ['。', '你', '好', '吗'])
        self.assertEqual(vocab.id_of('。'), 5)
        self.assertEqual(vocab.frequencies['吗'], 1)

    def test_min_freq_two(self):
        # 。 occurs twice as well, so it survives next to 你 and 好
        vocab = build_vocab(['你好。你好吗。'], self.atlas, min_freq=2)
        self.assertEqual(len(vocab), 8)
        self.assertEqual(vocab.entries, ['。', '你', '好'])
        self.assertEqual(vocab.id_of('吗'), UNK_ID)

    def test_unrenderable_left_out(self):
        vocab = build_vocab(['猫猫猫猫我'], self.atlas, min_freq=1)
        self.assertEqual(vocab.entries, ['我'])
        self.assertNotIn('猫', vocab)

    def test_empty_corpus(self):
        with LogCapture() as capture:
            vocab = build_vocab(['', '   '], self.atlas)
        self.assertEqual(len(vocab), 5)
        self.assertEqual(capture.records[0].levelname, 'WARNING')
        self.assertIn('empty corpus', capture.records[0].getMessage())

    def test_reserved_ids(self):
        vocab = Vocabulary(['你'])
        self.assertEqual(vocab.tokens[:5],
                         ['[PAD]', '[UNK]', '[CLS]', '[SEP]', '[MASK]'])
        self.assertEqual(vocab.id_of(MASK), MASK_ID)
        self.assertEqual(vocab.token(5), '你')
        with self.assertRaises(DataError):
            Vocabulary(['你', '你'])

    def test_save_load(self):
        vocab = build_vocab(['你好。你好吗。'], self.atlas, min_freq=1)
        with TempDirectory() as tmp:
            path = os.path.join(tmp.path, 'vocab.txt')
            vocab.save(path)
            self.assertEqual(
                tmp.read('vocab.txt', encoding='utf-8'),
                '。\t2\n你\t2\n好\t2\n吗\t1\n'
            )
            loaded = Vocabulary.load(path)
            self.assertEqual(loaded, vocab)
            self.assertEqual(loaded.frequencies, vocab.frequencies)
            bad = tmp.write('bad.txt', 'ab\t3\n', encoding='utf-8')
            with self.assertRaises(DataError) as ctx:
                Vocabulary.load(bad)
            self.assertEqual(ctx.exception.line, 1)


class TestLrSchedule(TestCase):
    """Test the warmup and decay schedule."""

    def test_default_schedule(self):
        schedule = LrSchedule()
        self.assertEqual(schedule(0), schedule(1))
        assert_allclose(schedule(1), 1e-8)
        assert_allclose(schedule(5000), 0.5e-4)
        assert_allclose(schedule(10000), 1e-4)
        assert_allclose(schedule(505000), 0.5e-4)
        self.assertEqual(schedule(1000000), 0.0)
        self.assertEqual(schedule(2000000), 0.0)

    def test_from_config(self):
        schedule = LrSchedule.from_config(
            training(lr=1e-3, warmup_steps=0, total_steps=10)
        )
        assert_allclose(schedule(1), 1e-3 * 9 / 10)
        assert_allclose(schedule(5), 1e-3 * 5 / 10)


class TestCorpus(TestCase):
    """Test corpus reading and pair construction."""

    def test_read_documents(self):
        lines = ['你好', ' 我 山 ', '', '', '一', '\u200b', '好']
        self.assertEqual(read_documents(lines), [
            [['你', '好'], ['我', '山']],
            [['一'], ['好']],
        ])

    def test_truncate_pair(self):
        first, second = truncate_pair(list('abcdef'), list('xyz'), 6)
        self.assertEqual((first, second), (list('abc'), list('xyz')))
        first, second = truncate_pair(list('ab'), list('wxyz'), 4)
        self.assertEqual((first, second), (list('ab'), list('wx')))
        first, second = truncate_pair(list('abc'), list('xyz'), 4)
        self.assertEqual((first, second), (list('ab'), list('xy')))

    def test_forced_pairs(self):
        documents = [[['a0'], ['a1']], [['b0'], ['b1']]]
        rng = mock.MagicMock()
        rng.random.side_effect = [0.1, 0.9]
        rng.integers.side_effect = [0, 1]
        pairs = list(make_nsp_pairs(documents, rng, 16))
        self.assertEqual(pairs, [
            (['a0'], ['a1'], IS_NEXT),
            (['b0'], ['a1'], NOT_NEXT),
        ])

    def test_not_next_from_other_document(self):
        documents = [[[str(i)] for i in range(50)],
                     [['x{}'.format(i)] for i in range(50)]]
        pairs = list(make_nsp_pairs(documents, np.random.default_rng(1), 8))
        for first, second, label in pairs:
            if label == NOT_NEXT:
                self.assertNotEqual(first[0][0] == 'x', second[0][0] == 'x')

    def test_label_ratio(self):
        documents = [[[chr(0x4E00 + i % 20)] for i in range(5001)]
                     for _ in range(2)]
        pairs = list(make_nsp_pairs(documents, np.random.default_rng(7), 8))
        self.assertEqual(len(pairs), 10000)
        ratio = np.mean([label == IS_NEXT for _, _, label in pairs])
        self.assertLess(abs(ratio - 0.5), 0.02)

    def test_pairs_fit_frame(self):
        documents = [[list('a' * 40), list('b' * 10)],
                     [list('c' * 30), list('d' * 30)]]
        for first, second, _ in make_nsp_pairs(
                documents, np.random.default_rng(0), 16):
            self.assertLessEqual(len(first) + len(second) + 3, 16)
            self.assertTrue(first and second)

    def test_single_document(self):
        with self.assertRaises(DataError):
            list(make_nsp_pairs([[['a'], ['b']]], np.random.default_rng(0),
                                8))


class TestMasking(TestCase):
    """Test apply_mlm_mask."""

    def test_statistics(self):
        rng = np.random.default_rng(11)
        ids = rng.integers(5, 50, size=100000)
        masked, labels = apply_mlm_mask(ids, 50, rng)
        selected = labels != IGNORE_ID
        self.assertLess(abs(selected.mean() - 0.15), 0.01)
        assert_array_equal(labels[selected], ids[selected])
        assert_array_equal(masked[~selected], ids[~selected])
        to_mask = (masked == MASK_ID)[selected].mean()
        unchanged = (masked == ids)[selected].mean()
        changed = 1.0 - to_mask - unchanged
        self.assertLess(abs(to_mask - 0.8), 0.02)
        # a random draw can land on the original id
        self.assertLess(abs(unchanged - (0.1 + 0.1 / 45)), 0.02)
        self.assertLess(abs(changed - 0.1 * 44 / 45), 0.02)
        self.assertTrue(np.all(masked[selected] >= 4))

    def test_reserved_never_selected(self):
        ids = np.array([2, 1, 0, 3, 4] * 100)
        masked, labels = apply_mlm_mask(ids, 50, np.random.default_rng(0),
                                        probability=1.0)
        assert_array_equal(labels, IGNORE_ID)
        assert_array_equal(masked, ids)

    def test_probability_zero(self):
        ids = np.arange(5, 30)
        masked, labels = apply_mlm_mask(ids, 30, np.random.default_rng(0),
                                        probability=0.0)
        assert_array_equal(labels, IGNORE_ID)
        assert_array_equal(masked, ids)


class TestExamples(TestCase):
    """Test example framing and the example stream."""

    def test_frame(self):
        vocab = Vocabulary(['你', '好'])
        example = build_example(['你', '猫'], ['好'], NOT_NEXT, vocab,
                                np.random.default_rng(0),
                                training(mlm_probability=0.0))
        self.assertEqual(example.keys, [CLS, '你', '猫', SEP, '好', SEP])
        self.assertEqual(example.input_keys, example.keys)
        assert_array_equal(example.ids, [2, 5, UNK_ID, 3, 6, 3])
        assert_array_equal(example.segments, [0, 0, 0, 0, 1, 1])
        assert_array_equal(example.mlm_labels, IGNORE_ID)
        self.assertEqual(example.nsp_label, NOT_NEXT)

    def test_masked_positions_render_mask(self):
        vocab = Vocabulary(['你', '好'])
        example = build_example(['你', '猫'], ['好'], IS_NEXT, vocab,
                                np.random.default_rng(0),
                                training(mlm_probability=1.0, mask_ratio=1.0,
                                         random_ratio=0.0))
        self.assertEqual(example.input_keys,
                         [CLS, MASK, '猫', SEP, MASK, SEP])
        assert_array_equal(example.mlm_labels,
                           [IGNORE_ID, 5, IGNORE_ID, IGNORE_ID, 6, IGNORE_ID])

    def test_collate(self):
        vocab = toy_vocab()
        config = training(mlm_probability=0.0)
        rng = np.random.default_rng(0)
        examples = [
            build_example(['一'], ['丁'], IS_NEXT, vocab, rng, config),
            build_example(['一', '七'], ['丁'], NOT_NEXT, vocab, rng, config),
        ]
        batch = collate(examples)
        self.assertEqual(batch.batch.shape, (2, 6))
        assert_array_equal(batch.nsp_labels, [IS_NEXT, NOT_NEXT])
        assert_array_equal(batch.batch.mask[0], [1, 1, 1, 1, 1, 0])
        assert_array_equal(batch.mlm_labels, IGNORE_ID)

    def test_stream_is_deterministic(self):
        documents = read_documents(toy_corpus_lines())
        vocab = toy_vocab()
        model_config = tiny_model_config()
        first = ExampleStream(documents, vocab, model_config, training())
        second = ExampleStream(documents, vocab, model_config, training())
        self.assertEqual(first.epoch_size, 24)
        late = first.example(30)
        for index in (0, 5, 30):
            a, b = first.example(index), second.example(index)
            self.assertEqual(a.input_keys, b.input_keys)
            assert_array_equal(a.mlm_labels, b.mlm_labels)
        self.assertEqual(second.example(30).input_keys, late.input_keys)
        other = ExampleStream(documents, vocab, model_config,
                              training(seed=1))
        self.assertNotEqual(
            [other.example(i).keys for i in range(24)],
            [first.example(i).keys for i in range(24)]
        )

    def test_stream_epochs_cover_all_pairs(self):
        documents = read_documents(toy_corpus_lines())
        stream = ExampleStream(documents, toy_vocab(), tiny_model_config(),
                               training(nsp_probability=1.0))
        firsts = sorted(
            ''.join(stream.example(i).keys[1:stream.example(i).keys.index(
                SEP)]) for i in range(24, 48)
        )
        expected = sorted(
            ''.join(doc[i]) for doc in documents for i in range(len(doc) - 1)
        )
        self.assertEqual(firsts, expected)

    def test_stream_needs_pairs(self):
        with self.assertRaises(DataError):
            ExampleStream([[['一']], [['丁']]], toy_vocab(),
                          tiny_model_config(), training())

    def test_batch(self):
        documents = read_documents(toy_corpus_lines())
        stream = ExampleStream(documents, toy_vocab(), tiny_model_config(),
                               training(batch_size=3))
        batch = stream.batch(2)
        self.assertEqual(batch.batch.shape[0], 3)
        self.assertEqual(batch.batch.keys[0][:len(stream.example(3).keys)],
                         stream.example(3).input_keys)


class TestLosses(TestCase):
    """Test the pretraining losses."""

    def test_mlm_uniform_and_peaked(self):
        labels = np.array([[IGNORE_ID, 3, 7, IGNORE_ID]])
        weight = Tensor(np.zeros((4, 11)))
        bias = Tensor(np.zeros(11))
        loss, logits = mlm_loss(Tensor(np.ones((1, 4, 4))), labels, weight,
                                bias)
        assert_allclose(loss.item(), math.log(11), rtol=1e-6)
        self.assertEqual(logits.shape, (2, 11))

        hidden = np.zeros((1, 4, 4))
        hidden[0, 1, 0] = hidden[0, 2, 1] = 1.0
        weight = np.zeros((4, 11))
        weight[0, 3] = weight[1, 7] = 40.0
        loss, _ = mlm_loss(Tensor(hidden), labels, Tensor(weight),
                           Tensor(np.zeros(11)))
        self.assertLess(loss.item(), 1e-6)

    def test_mlm_matches_oracle(self):
        rng = np.random.default_rng(2)
        hidden = rng.normal(size=(6, 5))
        weight = rng.normal(size=(5, 11))
        bias = rng.normal(size=11)
        labels = np.array([4, IGNORE_ID, 0, 10, IGNORE_ID, 7])
        loss, _ = mlm_loss(Tensor(hidden, dtype=np.float64), labels,
                           Tensor(weight, dtype=np.float64),
                           Tensor(bias, dtype=np.float64))
        logits = hidden @ weight + bias
        log_probs = logits - np.log(np.exp(logits).sum(axis=1,
                                                       keepdims=True))
        rows = labels != IGNORE_ID
        expected = -log_probs[rows, labels[rows]].mean()
        assert_allclose(loss.item(), expected, rtol=1e-10)

    def test_mlm_nothing_labelled(self):
        loss, logits = mlm_loss(Tensor(np.ones((1, 3, 4))),
                                np.full((1, 3), IGNORE_ID),
                                Tensor(np.ones((4, 9))), Tensor(np.ones(9)))
        self.assertEqual(loss.item(), 0.0)
        self.assertIsNone(logits)

    def test_nsp(self):
        loss, logits = nsp_loss(Tensor(np.ones((3, 4))), np.array([0, 1, 1]),
                                Tensor(np.zeros((4, 2))), Tensor(np.zeros(2)))
        assert_allclose(loss.item(), math.log(2), rtol=1e-6)
        self.assertEqual(logits.shape, (3, 2))
        loss, _ = nsp_loss(Tensor(np.eye(2)), np.array([0, 1]),
                           Tensor(np.eye(2) * 40.0), Tensor(np.zeros(2)))
        self.assertLess(loss.item(), 1e-6)

    def test_cls_states(self):
        hidden = Tensor(np.arange(24.0).reshape(2, 3, 4))
        assert_array_equal(cls_states(hidden).data,
                           [[0, 1, 2, 3], [12, 13, 14, 15]])

    def test_masked_accuracy(self):
        logits = np.array([[0.0, 1.0], [1.0, 0.0]])
        labels = np.array([IGNORE_ID, 1, 1])
        self.assertEqual(masked_accuracy(logits, labels), 0.5)
        self.assertEqual(masked_accuracy(None, np.full(3, IGNORE_ID)), 0.0)


class TestPretrainRun(TestCase):
    """Test pretrain_run end to end on a toy corpus."""

    def setUp(self):
        self.tmp = TempDirectory()
        self.atlas = synthetic_atlas(TOY_ALPHABET)
        self.lines = toy_corpus_lines()

    def tearDown(self):
        self.tmp.cleanup()

    def out(self, name):
        return os.path.join(self.tmp.path, name)

    def test_outputs(self):
        result = pretrain_run(self.lines, self.atlas, run_config(),
                              self.out('run'), steps=3)
        self.assertEqual(result.step, 3)
        self.assertEqual(sorted(os.listdir(self.out('run'))), [
            'checkpoint-00000003.gcrm', 'metrics.jsonl', 'vocab.txt'
        ])
        with open(self.out('run/metrics.jsonl')) as handle:
            records = [json.loads(line) for line in handle]
        self.assertEqual([r['step'] for r in records], [1, 2, 3])
        self.assertEqual(
            set(records[0]),
            {'step', 'lr', 'loss', 'mlm_loss', 'nsp_loss', 'mlm_acc',
             'nsp_acc', 'wallclock'}
        )
        assert_allclose(records[0]['loss'],
                        records[0]['mlm_loss'] + records[0]['nsp_loss'],
                        rtol=1e-5)
        assert_allclose(records[1]['lr'], 1e-3)
        checkpoint = load_checkpoint(result.checkpoint)
        self.assertEqual(checkpoint.step, 3)
        self.assertEqual(checkpoint.vocab, result.vocab.entries)
        self.assertEqual(checkpoint.adam_state().t, 3)
        seen = set(''.join(self.lines))
        self.assertEqual(len(result.vocab), 5 + len(seen))

    def test_same_seed_same_bytes(self):
        for name in ('a', 'b'):
            pretrain_run(self.lines, self.atlas, run_config(),
                         self.out(name), steps=2)
        self.assertEqual(read_bytes(self.out('a/checkpoint-00000002.gcrm')),
                         read_bytes(self.out('b/checkpoint-00000002.gcrm')))

    def test_resume_matches_uninterrupted(self):
        config = run_config(checkpoint_every=2)
        pretrain_run(self.lines, self.atlas, config, self.out('first'),
                     steps=2)
        pretrain_run(self.lines, self.atlas, config, self.out('resumed'),
                     steps=4,
                     resume=self.out('first/checkpoint-00000002.gcrm'))
        pretrain_run(self.lines, self.atlas, config, self.out('straight'),
                     steps=4)
        self.assertEqual(
            read_bytes(self.out('resumed/checkpoint-00000004.gcrm')),
            read_bytes(self.out('straight/checkpoint-00000004.gcrm'))
        )

    def test_resume_rejects_other_model(self):
        pretrain_run(self.lines, self.atlas, run_config(), self.out('first'),
                     steps=1)
        other = run_config(model=dict(TOY_MODEL, max_len=32))
        with self.assertRaises(CheckpointError):
            pretrain_run(self.lines, self.atlas, other, self.out('second'),
                         steps=2,
                         resume=self.out('first/checkpoint-00000001.gcrm'))

    def test_non_finite_loss_keeps_last_good(self):
        def exploding(model, batch, bank):
            metrics = {'loss': float('nan'), 'mlm_loss': float('nan'),
                       'nsp_loss': 0.0, 'mlm_acc': 0.0, 'nsp_acc': 0.0}
            return Tape(), Tensor(np.array(np.nan)), metrics

        with mock.patch('glyphcrm.pretrain.training_step',
                        side_effect=exploding):
            with self.assertRaises(NonFiniteError):
                pretrain_run(self.lines, self.atlas, run_config(),
                             self.out('run'), steps=3)
        checkpoint = load_checkpoint(self.out('run/last-good.gcrm'))
        self.assertEqual(checkpoint.step, 0)

    def test_single_document_corpus(self):
        with self.assertRaises(DataError):
            pretrain_run(['一二三', '四五六'], self.atlas, run_config(),
                         self.out('run'), steps=1)

    @skipUnless(SLOW_TESTS, 'set GLYPHCRM_SLOW_TESTS=1 to run')
    def test_toy_corpus_learning(self):
        """Test the toy model learns the 32-sentence corpus."""
        config = run_config(model=dict(TOY_MODEL), batch_size=16, lr=1e-3,
                            warmup_steps=100, total_steps=2000,
                            log_every=1, checkpoint_every=1000)
        result = pretrain_run(self.lines, self.atlas, config, self.out('run'))
        tail = result.metrics[-100:]
        self.assertGreater(np.mean([m['mlm_acc'] for m in tail]), 0.9)
        self.assertGreater(np.mean([m['nsp_acc'] for m in tail]), 0.95)
        windows = [np.mean([m['loss'] for m in result.metrics[i:i + 100]])
                   for i in range(0, 2000, 100)]
        self.assertTrue(all(b < a for a, b in zip(windows, windows[1:])))
