"""Mask decoder and loss assembly contracts."""

from __future__ import annotations

import math

import numpy as np
import pytest

from anomseg import seghead as sh
from anomseg.encoders import SEG_TOKEN, TinyLM, TokenSequence, Vocabulary
from anomseg.errors import (ContractError, NumericError, ParameterError,
                            ShapeError)
from anomseg.numcore import Tensor, grad_check


def make_head(rng, lm_width=8, feat_width=8, blocks=2):
    return sh.SegmentationHead(rng, lm_width, feat_width, blocks=blocks)


def make_prompt(rng, head):
    return sh.SegPrompt(Tensor(rng.normal(size=head.feat_width)), 0)


class TestPromptExtraction:

    def setup_method(self):
        r = np.random.default_rng(0)
        self.vocab = Vocabulary(["find", "the", "defect", "it", "is"])
        self.lm = TinyLM(r, self.vocab, width=8, depth=1, max_context=32)
        self.head = make_head(r, lm_width=8, feat_width=8)
        self.seg_id = self.vocab.token_to_id[SEG_TOKEN]

    def hidden_for(self, text):
        seq = TokenSequence(self.vocab.encode(text), None, 0)
        _, hidden = self.lm(self.lm.splice(seq))
        return seq, hidden

    def test_missing_seg_token_is_a_none_not_an_error(self):
        seq, hidden = self.hidden_for("find the defect")
        assert self.head.extract_prompt(hidden, seq, self.seg_id) is None

    def test_prompt_is_deterministic_and_positioned(self):
        seq, hidden = self.hidden_for(f"it is {SEG_TOKEN}")
        a = self.head.extract_prompt(hidden, seq, self.seg_id)
        b = self.head.extract_prompt(hidden, seq, self.seg_id)
        assert a.position == 2
        assert a.vector.data.tobytes() == b.vector.data.tobytes()
        assert a.vector.shape == (8,)

    def test_position_outside_hidden_rejected(self):
        seq, hidden = self.hidden_for(f"it is {SEG_TOKEN}")
        import anomseg.numcore.functional as F
        short = F.take_rows(hidden, np.array([0, 1]))
        with pytest.raises(ShapeError):
            self.head.extract_prompt(short, seq, self.seg_id)


class TestMaskDecoder:

    def test_output_dims_match_upsampled_input(self, rng):
        head = make_head(rng)
        pred = head.decode(make_prompt(rng, head),
                           Tensor(rng.normal(size=(4, 4, 8))))
        assert pred.logits.shape == (16, 16)
        assert pred.probs.shape == (16, 16)
        assert pred.coarse.shape == (4, 4)

    def test_probs_are_open_unit_interval(self, rng):
        head = make_head(rng)
        pred = head.decode(make_prompt(rng, head),
                           Tensor(rng.normal(size=(3, 3, 8))))
        assert (pred.probs.data > 0).all() and (pred.probs.data < 1).all()

    def test_zero_weight_decoder_is_spatially_constant(self, rng):
        head = make_head(rng)
        for _, p in head.named_parameters():
            p.data[...] = 0.0
        pred = head.decode(make_prompt(rng, head),
                           Tensor(rng.normal(size=(3, 3, 8))))
        assert np.all(pred.logits.data == pred.logits.data[0, 0])

    def test_wrong_feature_width_rejected(self, rng):
        head = make_head(rng, feat_width=8)
        with pytest.raises(ShapeError):
            head.decode(make_prompt(rng, head),
                        Tensor(rng.normal(size=(3, 3, 5))))

    def test_translating_features_translates_coarse_logits(self, rng):
        head = make_head(rng)
        prompt = make_prompt(rng, head)
        fmap = rng.normal(size=(3, 3, 8))
        base = head.decode(prompt, Tensor(fmap)).coarse.data
        rolled = head.decode(prompt,
                             Tensor(np.roll(fmap, (1, 1), (0, 1)))).coarse.data
        np.testing.assert_allclose(rolled, np.roll(base, (1, 1), (0, 1)),
                                   atol=1e-12)

    def test_grad_check_through_decoder(self, rng):
        head = make_head(rng, feat_width=4, blocks=1)
        weights = Tensor(rng.normal(size=(8, 8)))

        def run(prompt_vec, fmap):
            pred = head.decode(sh.SegPrompt(prompt_vec, 0), fmap)
            return (pred.logits * weights).sum()

        report = grad_check(run, [Tensor(rng.normal(size=4)),
                                  Tensor(rng.normal(size=(2, 2, 4)))])
        assert report.passed, str(report)


class TestNoveltyChannel:

    def test_cell_without_a_twin_scores_highest(self, rng):
        head = make_head(rng)
        cells = np.tile(rng.normal(size=(1, 8)), (12, 1))
        cells[7] += 2.5
        scores = head.cell_novelty(Tensor(cells)).data.ravel()
        assert scores.argmax() == 7
        assert scores[7] > np.delete(scores, 7).max() + 1.0

    def test_novelty_ignores_feature_scale(self, rng):
        head = make_head(rng)
        cells = rng.normal(size=(9, 8))
        a = head.cell_novelty(Tensor(cells)).data
        b = head.cell_novelty(Tensor(cells * 53.0)).data
        np.testing.assert_allclose(a, b, atol=1e-9)

    def test_gate_starts_open(self, rng):
        head = make_head(rng)
        assert (head.novelty_gate.data == sh.NOVELTY_GATE_INIT).all()

    def test_open_gate_highlights_the_odd_cell(self, rng):
        head = make_head(rng)
        for _, p in head.named_parameters():
            p.data[...] = 0.0
        head.novelty_gate.data[...] = 1.0
        fmap = np.tile(rng.normal(size=(1, 1, 8)), (3, 3, 1))
        fmap[2, 1] += 2.0
        pred = head.decode(make_prompt(rng, head), Tensor(fmap))
        assert np.unravel_index(pred.coarse.data.argmax(),
                                pred.coarse.shape) == (2, 1)

    def test_single_cell_map_has_no_novelty(self, rng):
        head = make_head(rng)
        head.novelty_gate.data[...] = 1.0
        assert (head.cell_novelty(Tensor(rng.normal(size=(1, 8)))).data
                == 0.0).all()
        pred = head.decode(make_prompt(rng, head),
                           Tensor(rng.normal(size=(1, 1, 8))))
        assert pred.coarse.shape == (1, 1)

    def test_grad_check_with_open_gate(self, rng):
        head = make_head(rng, feat_width=4, blocks=1)
        head.novelty_gate.data[...] = 0.8
        weights = Tensor(rng.normal(size=(8, 8)))

        def run(prompt_vec, fmap):
            pred = head.decode(sh.SegPrompt(prompt_vec, 0), fmap)
            return (pred.logits * weights).sum()

        report = grad_check(run, [Tensor(rng.normal(size=4)),
                                  Tensor(rng.normal(size=(2, 2, 4)))])
        assert report.passed, str(report)

    def test_gate_gradient_reaches_the_gate(self, rng):
        head = make_head(rng, feat_width=4, blocks=1)
        pred = head.decode(make_prompt(rng, head),
                           Tensor(rng.normal(size=(3, 3, 4))))
        sh.seg_loss(pred, np.eye(12)).backward()
        assert head.novelty_gate.grad is not None
        assert abs(head.novelty_gate.grad).max() > 0


class TestPixelLosses:

    def test_perfect_hard_prediction(self):
        gt = np.array([[1.0, 0.0], [0.0, 1.0]])
        probs = Tensor(gt.copy())
        assert sh.dice_loss(probs, gt).item() == 0.0
        assert sh.bce_loss(probs, gt).item() < 1e-6

    def test_dice_hand_value_two_sevenths(self):
        gt = np.array([[1.0, 1.0], [0.0, 0.0]])
        probs = Tensor(np.ones((2, 2)))
        assert abs(sh.dice_loss(probs, gt).item() - 2.0 / 7.0) < 1e-12

    def test_empty_gt_and_zero_probs_is_zero_dice(self):
        gt = np.zeros((3, 3))
        assert sh.dice_loss(Tensor(np.zeros((3, 3))), gt).item() == 0.0

    def test_dice_stays_in_unit_interval(self, rng):
        for _ in range(50):
            probs = Tensor(rng.random((4, 4)))
            gt = (rng.random((4, 4)) > 0.5).astype(float)
            val = sh.dice_loss(probs, gt).item()
            assert 0.0 <= val < 1.0

    def test_non_binary_gt_rejected(self, rng):
        with pytest.raises(ContractError):
            sh.bce_loss(Tensor(rng.random((2, 2))), np.full((2, 2), 0.5))
        with pytest.raises(ContractError):
            sh.dice_loss(Tensor(rng.random((2, 2))), np.full((2, 2), 0.3))

    def test_shape_mismatch_rejected(self, rng):
        with pytest.raises(ShapeError):
            sh.bce_loss(Tensor(rng.random((2, 2))), np.zeros((2, 3)))

    def test_seg_loss_blends_with_weights(self, rng):
        probs_arr = rng.random((4, 4))
        gt = (rng.random((4, 4)) > 0.5).astype(float)
        pred = sh.MaskPrediction(Tensor(probs_arr), Tensor(probs_arr),
                                 Tensor(probs_arr))
        w = sh.LossWeights(lambda_bce=2.0, lambda_dice=0.5)
        expected = 2.0 * sh.bce_loss(Tensor(probs_arr), gt).item() \
            + 0.5 * sh.dice_loss(Tensor(probs_arr), gt).item()
        assert abs(sh.seg_loss(pred, gt, w).item() - expected) < 1e-12

    def test_bce_matches_elementwise_formula(self, rng):
        probs_arr = rng.uniform(0.05, 0.95, size=(3, 3))
        gt = (rng.random((3, 3)) > 0.4).astype(float)
        expected = -(gt * np.log(probs_arr)
                     + (1 - gt) * np.log(1 - probs_arr)).mean()
        got = sh.bce_loss(Tensor(probs_arr), gt).item()
        assert abs(got - expected) < 1e-12


class TestTextLoss:

    def test_uniform_logits_cost_log_vocab(self):
        seq = TokenSequence(np.array([2, 3, 4, 3]), None, 1)
        logits = Tensor(np.zeros((4, 7)))
        assert abs(sh.text_loss(logits, seq).item() - math.log(7.0)) < 1e-12

    def test_single_symbol_vocabulary_costs_nothing(self):
        seq = TokenSequence(np.array([0, 0, 0]), None, 1)
        logits = Tensor(np.zeros((3, 1)))
        assert sh.text_loss(logits, seq).item() == 0.0

    def test_instruction_tokens_do_not_contribute(self, rng):
        logits = Tensor(rng.normal(size=(5, 6)))
        ids = np.array([1, 2, 3, 4, 5])
        base = sh.text_loss(logits, TokenSequence(ids, None, 2)).item()
        tampered = ids.copy()
        tampered[:2] = [5, 1]
        after = sh.text_loss(logits, TokenSequence(tampered, None, 2)).item()
        assert base == after

    def test_empty_answer_span_rejected(self, rng):
        seq = TokenSequence(np.array([1, 2]), None, 2)
        with pytest.raises(ContractError):
            sh.text_loss(Tensor(rng.normal(size=(2, 4))), seq)

    def test_answer_at_position_zero_without_context_rejected(self, rng):
        seq = TokenSequence(np.array([1, 2]), None, 0)
        with pytest.raises(ContractError):
            sh.text_loss(Tensor(rng.normal(size=(2, 4))), seq)

    def test_visual_prefix_shifts_logit_rows(self, rng):
        # same ids, with and without a 3-token visual prefix: the span
        # is scored from rows offset by the prefix length
        ids = np.array([1, 2, 3])
        logits = rng.normal(size=(6, 5))
        vis = Tensor(rng.normal(size=(3, 4)))
        with_prefix = sh.text_loss(Tensor(logits),
                                   TokenSequence(ids, vis, 1)).item()
        rows = logits[3 + 1 - 1:3 + 2]   # prefix 3, span rows
        lp = rows - np.log(np.exp(rows).sum(axis=-1, keepdims=True))
        expected = -(lp[0, ids[1]] + lp[1, ids[2]]) / 2.0
        assert abs(with_prefix - expected) < 1e-9


class TestTotalLoss:

    def test_text_only_weights(self, rng):
        t = Tensor(np.array(0.7))
        w = sh.LossWeights(1.0, 0.0, 0.0)
        assert sh.total_loss(t, Tensor(np.array(9.9)),
                             Tensor(np.array(9.9)), w).item() == 0.7

    def test_all_zero_components(self):
        zero = Tensor(np.zeros(()))
        assert sh.total_loss(zero, zero, zero).item() == 0.0

    def test_unit_weights_sum(self):
        w = sh.LossWeights(1.0, 1.0, 1.0)
        got = sh.total_loss(Tensor(np.array(0.5)), Tensor(np.array(0.2)),
                            Tensor(np.array(0.3)), w).item()
        assert abs(got - 1.0) < 1e-12

    def test_missing_components_are_skipped(self):
        got = sh.total_loss(Tensor(np.array(0.5)), None, None).item()
        assert got == 0.5

    def test_nan_component_names_itself(self):
        # an in-graph tensor can never hold NaN (leaf guard), so the
        # reachable case is a plain-number component
        with pytest.raises(NumericError, match="seg"):
            sh.total_loss(Tensor(np.array(0.5)), float("nan"), None)

    def test_weight_validation(self):
        with pytest.raises(ParameterError):
            sh.LossWeights(lambda_txt=-0.1)
        with pytest.raises(ParameterError):
            sh.LossWeights(0.0, 0.0, 0.0, 0.0, 0.0)

    def test_zero_seg_weight_zeroes_decoder_gradients(self, rng):
        head = make_head(rng, feat_width=4, blocks=1)
        fmap = Tensor(rng.normal(size=(2, 2, 4)))
        pred = head.decode(make_prompt(rng, head), fmap)
        gt = (rng.random((8, 8)) > 0.5).astype(float)
        w = sh.LossWeights(lambda_txt=1.0, lambda_seg=0.0)
        text = Tensor(np.array(0.3))
        sh.total_loss(text, sh.seg_loss(pred, gt), None, w).backward()
        for name, p in head.named_parameters():
            assert p.grad is None or not p.grad.any(), name


class TestEndToEndGradients:

    def build(self):
        r = np.random.default_rng(1)
        vocab = Vocabulary(["it", "is", "fine"])
        lm = TinyLM(r, vocab, width=8, depth=1, max_context=16)
        head = make_head(r, lm_width=8, feat_width=4, blocks=1)
        seq = TokenSequence(vocab.encode(f"it is {SEG_TOKEN}"), None, 0)
        seg_id = vocab.token_to_id[SEG_TOKEN]
        return r, lm, head, seq, seg_id

    def test_mask_loss_reaches_lm_parameters(self, rng):
        _, lm, head, seq, seg_id = self.build()
        fmap = Tensor(rng.normal(size=(2, 2, 4)))
        gt = (rng.random((8, 8)) > 0.5).astype(float)
        _, hidden = lm(lm.splice(seq))
        prompt = head.extract_prompt(hidden, seq, seg_id)
        sh.seg_loss(head.decode(prompt, fmap), gt).backward()
        assert lm.tok.table.grad is not None
        assert np.abs(lm.tok.table.grad).max() > 0

    def test_grad_check_from_lm_through_mask_loss(self, rng):
        _, lm, head, seq, seg_id = self.build()
        fmap_data = rng.normal(size=(2, 2, 4))
        gt = (rng.random((8, 8)) > 0.5).astype(float)

        def run(wq, fmap):
            lm.blocks[0].attn.wq.weight = wq
            _, hidden = lm(lm.splice(seq))
            prompt = head.extract_prompt(hidden, seq, seg_id)
            text = Tensor(np.array(0.25))
            return sh.total_loss(text, sh.seg_loss(head.decode(prompt, fmap), gt),
                                 None)

        report = grad_check(run, [lm.blocks[0].attn.wq.weight,
                                  Tensor(fmap_data)])
        assert report.passed, str(report)
