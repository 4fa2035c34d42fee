"""Encoder stand-ins: level structure, locality, causality, tokenizer."""

from __future__ import annotations

import numpy as np
import pytest

from anomseg import encoders as enc
from anomseg import numcore as nc
from anomseg.errors import (CapacityError, ContractError, ShapeError,
                            TokenizationError)
from anomseg.numcore import Tensor


def make_encoder(rng, **kw):
    defaults = dict(image_hw=(64, 64), patch=8, width=32, num_levels=6)
    defaults.update(kw)
    return enc.VisualEncoder(rng, **defaults)


class TestVisualEncoder:

    def test_level_count_and_shapes(self, rng):
        model = make_encoder(rng)
        feats = model(Tensor(rng.uniform(size=(2, 64, 64, 3))))
        assert feats.num_levels == 6
        for lvl in feats.levels:
            assert lvl.shape == (2, 64, 32)
        assert feats.grid_side == 8

    def test_zero_image_finite(self, rng):
        model = make_encoder(rng)
        feats = model(Tensor(np.zeros((1, 64, 64, 3))))
        for lvl in feats.levels:
            assert np.isfinite(lvl.data).all()

    def test_level0_locality(self, rng):
        """Before attention, editing one patch moves exactly one token."""
        model = make_encoder(rng)
        img = rng.uniform(size=(1, 64, 64, 3))
        other = img.copy()
        other[0, 8:16, 24:32] += 0.5          # patch row 1, col 3 -> token 11
        a = model(Tensor(img)).levels[0].data[0]
        b = model(Tensor(other)).levels[0].data[0]
        changed = np.flatnonzero(np.abs(a - b).max(axis=1) > 1e-12)
        np.testing.assert_array_equal(changed, [11])

    def test_deeper_levels_mix_globally(self, rng):
        model = make_encoder(rng)
        img = rng.uniform(size=(1, 64, 64, 3))
        other = img.copy()
        other[0, 8:16, 24:32] += 0.5
        a = model(Tensor(img)).levels[1].data[0]
        b = model(Tensor(other)).levels[1].data[0]
        changed = np.flatnonzero(np.abs(a - b).max(axis=1) > 1e-12)
        assert changed.size > 1

    def test_wrong_image_shape_rejected(self, rng):
        model = make_encoder(rng)
        with pytest.raises(ShapeError):
            model(Tensor(np.zeros((1, 32, 32, 3))))


class TestBackbone:

    def test_output_resolution_fraction(self, rng):
        bb = enc.Backbone(rng, out_ch=32)
        out = bb(Tensor(rng.uniform(size=(2, 64, 64, 3))))
        assert out.shape == (2, 16, 16, 32)

    def test_constant_input_constant_interior(self, rng):
        bb = enc.Backbone(rng, out_ch=16)
        out = bb(Tensor(np.full((1, 32, 32, 3), 0.5))).data[0]
        interior = out[2:-2, 2:-2]
        spread = np.abs(interior - interior[0, 0]).max()
        assert spread < 1e-8

    def test_translation_equivariance_interior(self, rng):
        bb = enc.Backbone(rng, out_ch=16)
        img = rng.uniform(size=(1, 64, 64, 3))
        shifted = np.roll(img, 4, axis=1)     # one cell at stride 4
        a = bb(Tensor(img)).data[0]
        b = bb(Tensor(shifted)).data[0]
        np.testing.assert_allclose(b[4:12, 4:12], a[3:11, 4:12], atol=1e-8)

    def test_indivisible_input_rejected(self, rng):
        bb = enc.Backbone(rng, out_ch=16)
        with pytest.raises(ShapeError):
            bb(Tensor(np.zeros((1, 30, 30, 3))))


class TestVocabulary:

    def test_round_trip(self):
        vocab = enc.Vocabulary.from_corpus(["the panel looks fine .",
                                            "is there a hole ?"])
        ids = vocab.encode("is the panel fine ?")
        assert vocab.decode(ids) == "is the panel fine ?"

    def test_specials_always_present(self):
        vocab = enc.Vocabulary.from_corpus(["plain words"])
        assert enc.IMAGE_TOKEN in vocab.token_to_id
        assert enc.SEG_TOKEN in vocab.token_to_id

    def test_unknown_word_lists_offender(self):
        vocab = enc.Vocabulary.from_corpus(["known words only"])
        with pytest.raises(TokenizationError, match="zebra"):
            vocab.encode("known zebra")

    def test_empty_text_rejected(self):
        vocab = enc.Vocabulary.from_corpus(["word"])
        with pytest.raises(TokenizationError):
            vocab.encode("   ")

    def test_placeholders_tokenize_whole(self):
        vocab = enc.Vocabulary.from_corpus(["it is <seg> ."])
        ids = vocab.encode("it is <seg> .")
        assert vocab.seg_id in ids.tolist()


def make_lm(rng, **kw):
    vocab = enc.Vocabulary.from_corpus(["a b c d e f g . ?"])
    defaults = dict(width=16, depth=2, max_context=32)
    defaults.update(kw)
    return enc.TinyLM(rng, vocab, **defaults)


class TestTinyLM:

    def test_logit_shapes(self, rng):
        lm = make_lm(rng)
        ids = lm.vocab.encode("a b c")
        logits, hidden = lm(lm.tok(ids))
        assert logits.shape == (3, len(lm.vocab))
        assert hidden.shape == (3, 16)

    def test_causality_prefix_bit_identical(self, rng):
        lm = make_lm(rng)
        ids_a = lm.vocab.encode("a b c d e")
        ids_b = ids_a.copy()
        ids_b[-2:] = lm.vocab.encode("f g")
        la, _ = lm(lm.tok(ids_a))
        lb, _ = lm(lm.tok(ids_b))
        assert la.data[:3].tobytes() == lb.data[:3].tobytes()

    def test_context_overflow_raises(self, rng):
        lm = make_lm(rng, max_context=4)
        ids = lm.vocab.encode("a b c d e")
        with pytest.raises(CapacityError):
            lm(lm.tok(ids))

    def test_vocab_always_includes_placeholders(self, rng):
        vocab = enc.Vocabulary(["only"])
        assert len(vocab) == 3    # <image>, <seg>, only
        lm = enc.TinyLM(rng, vocab, width=8, depth=1, max_context=8)
        only = vocab.token_to_id["only"]
        logits, _ = lm(lm.tok(np.array([only, only])))
        assert logits.shape == (2, 3)

    def test_greedy_decode_deterministic(self, rng):
        lm = make_lm(rng)
        ids = lm.vocab.encode("a b")
        first = lm.greedy_decode(lm.tok(ids), max_new=5)
        second = lm.greedy_decode(lm.tok(ids), max_new=5)
        assert first == second
        assert len(first) <= 5

    def test_greedy_decode_stops_on_stop_id(self, rng):
        lm = make_lm(rng)
        ids = lm.vocab.encode("a b c")
        out = lm.greedy_decode(lm.tok(ids), max_new=8, stop_id=None)
        full = lm.greedy_decode(lm.tok(ids), max_new=8, stop_id=out[0])
        assert full[0] == out[0] and len(full) == 1

    def test_embed_text_mean_pooling(self, rng):
        lm = make_lm(rng)
        ids, pooled = lm.embed_text("a b c")
        manual = lm.tok.table.data[ids].mean(axis=0)
        np.testing.assert_allclose(pooled.data, manual, atol=1e-12)

    def test_embed_text_distinct_for_distinct_text(self, rng):
        lm = make_lm(rng)
        _, e1 = lm.embed_text("a b")
        _, e2 = lm.embed_text("c d")
        assert np.abs(e1.data - e2.data).max() > 1e-6


class TestTokenSequence:

    def test_seg_position_accounts_for_visual_prefix(self, rng):
        lm = make_lm(rng)
        ids = np.concatenate([lm.vocab.encode("a b"), [lm.vocab.seg_id]])
        visual = Tensor(rng.normal(size=(4, 16)))
        seq = enc.TokenSequence(ids=ids, visual=visual, answer_start=2)
        assert seq.seg_position(lm.vocab.seg_id) == 6
        assert seq.length == 7

    def test_duplicate_seg_rejected(self, rng):
        lm = make_lm(rng)
        ids = np.array([lm.vocab.seg_id, lm.vocab.seg_id])
        seq = enc.TokenSequence(ids=ids, visual=None, answer_start=0)
        with pytest.raises(ContractError):
            seq.seg_position(lm.vocab.seg_id)

    def test_splice_puts_visual_first(self, rng):
        lm = make_lm(rng)
        ids = lm.vocab.encode("a b c")
        visual = Tensor(rng.normal(size=(2, 16)))
        seq = enc.TokenSequence(ids=ids, visual=visual, answer_start=0)
        embeds = lm.splice(seq)
        assert embeds.shape == (5, 16)
        np.testing.assert_array_equal(embeds.data[:2], visual.data)

    def test_empty_sequence_rejected(self):
        with pytest.raises(ShapeError):
            enc.TokenSequence(ids=np.array([], dtype=np.int64), visual=None,
                              answer_start=0)
