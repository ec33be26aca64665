import random

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import bidirectional_visible, ulm_visible
from sumalign.batching import (
    bidirectional_mask,
    causal_mask,
    collate,
    collate_seq2seq,
    mask_count,
    mask_summary,
    mask_to_grid,
    ulm_mask,
)
from sumalign.tokenizer import EOS, MASK, PAD, SOS, TokenizedPair


def oracle_grid(pred, cl, sl, total):
    return torch.tensor([[pred(i, j, cl, sl) for j in range(total)] for i in range(total)])


def random_pair(rng, code_len, summary_len, vocab=50):
    code = (SOS, *(rng.randrange(5, vocab) for _ in range(code_len - 2)), EOS)
    summ = (*(rng.randrange(5, vocab) for _ in range(summary_len - 1)), EOS)
    return TokenizedPair(code, summ, "w0")


class TestMasks:
    def test_ulm_worked_example(self):
        assert mask_to_grid(ulm_mask(2, 2)).split("\n") == ["1100", "1100", "1110", "1111"]

    def test_ulm_single_summary_token(self):
        vis = ulm_mask(3, 1)
        assert vis[-1].all()

    def test_bidirectional_no_padding(self):
        assert bidirectional_mask(3, 2).all()

    def test_bidirectional_two_pad_columns(self):
        vis = bidirectional_mask(3, 2, 7)
        assert (~vis[:5].any(dim=0)).sum() == 2
        assert not vis[:, 5:].any()

    def test_causal(self):
        assert mask_to_grid(causal_mask(3)) == "100\n110\n111"

    def test_ulm_rejects_empty_regions(self):
        with pytest.raises(ValueError):
            ulm_mask(0, 2)
        with pytest.raises(ValueError):
            ulm_mask(2, 2, 3)

    def test_randomized_against_predicates(self):
        rng = random.Random(0)
        for _ in range(1000):
            cl, sl = rng.randint(1, 12), rng.randint(1, 12)
            total = cl + sl + rng.randint(0, 4)
            assert torch.equal(ulm_mask(cl, sl, total), oracle_grid(ulm_visible, cl, sl, total))
            assert torch.equal(bidirectional_mask(cl, sl, total),
                               oracle_grid(bidirectional_visible, cl, sl, total))


class TestMaskSummary:
    @pytest.mark.parametrize("m, n", [(20, 3), (2, 1), (1, 1), (10, 2), (3, 1), (4, 1), (7, 1), (100, 15)])
    def test_mask_count(self, m, n):
        assert mask_count(m) == n

    def test_only_eos_is_unmaskable(self):
        with pytest.raises(ValueError):
            mask_summary(TokenizedPair((SOS, 7, EOS), (EOS,)), seed=0)

    def test_twenty_tokens(self):
        pair = random_pair(random.Random(1), 6, 21)
        ids, pos, tgt = mask_summary(pair, seed=4)
        assert len(pos) == 3
        assert [ids[p] for p in pos] == [MASK] * 3
        assert [pair.summary_ids[p] for p in pos] == tgt

    def test_randomized_locality(self):
        rng = random.Random(2)
        for trial in range(1000):
            pair = random_pair(rng, rng.randint(2, 10), rng.randint(2, 30))
            ids, pos, tgt = mask_summary(pair, seed=trial)
            maskable = len(pair.summary_ids) - 1
            assert len(pos) == max(1, int(0.15 * maskable + 0.5))
            changed = [i for i, (a, b) in enumerate(zip(ids, pair.summary_ids)) if a != b]
            assert changed == pos
            assert ids[-1] == EOS

    def test_seeded(self):
        pair = random_pair(random.Random(3), 5, 25)
        assert mask_summary(pair, seed=9) == mask_summary(pair, seed=9)


class TestCollate:
    def test_single_row_has_no_pad(self, tiny_pairs, table41):
        for kind in ("ulm", "mlm", "awp"):
            b = collate(tiny_pairs[:1], kind, table41, seed=0)
            assert not (b.ids == PAD).any()

    def test_lengths_ten_and_sixteen(self, table41):
        rng = random.Random(0)
        pairs = [random_pair(rng, 6, 4), random_pair(rng, 10, 6)]
        b = collate(pairs, "ulm", table41, seed=0)
        assert b.length == 16
        assert (b.ids[0] == PAD).sum() == 6
        assert not b.attn[0, :, 10:].any()

    def test_same_seed_same_batch(self, small_pairs, small_table):
        a = collate(small_pairs[:8], "mlm", small_table, seed=[5, 1])
        b = collate(small_pairs[:8], "mlm", small_table, seed=[5, 1])
        for f in ("ids", "attn", "target_rows", "target_cols", "targets"):
            assert torch.equal(getattr(a, f), getattr(b, f))
        assert a.masked_positions == b.masked_positions

    def test_code_region_untouched(self, small_pairs, small_table):
        b = collate(small_pairs, "mlm", small_table, seed=1)
        for r, p in enumerate(small_pairs):
            cl = len(p.code_ids)
            assert b.ids[r, :cl].tolist() == list(p.code_ids)
            assert all(cl <= q < cl + len(p.summary_ids) - 1 for q in b.masked_positions[r])

    def test_ulm_targets_shifted(self, tiny_pairs, table41):
        b = collate(tiny_pairs, "ulm", table41)
        # row 0: code length 5, summary (8, 9, 10, EOS) predicted from columns 4..7
        sel = b.target_rows == 0
        assert b.target_cols[sel].tolist() == [4, 5, 6, 7]
        assert b.targets[sel].tolist() == [8, 9, 10, EOS]

    def test_awp_labels(self, tiny_pairs, table41):
        b = collate(tiny_pairs, "awp", table41)
        assert b.targets.tolist() == [3, 40]
        assert b.target_cols.tolist() == [0, 0]
        assert b.summary_lens == [0, 0]
        full = collate(tiny_pairs, "awp", table41, awp_input="code+summary")
        assert full.summary_lens == [4, 3]

    def test_rejects_out_of_vocab(self, tiny_pairs, table41):
        with pytest.raises(ValueError):
            collate(tiny_pairs, "ulm", table41, vocab_size=12)

    def test_rejects_unknown_kind(self, tiny_pairs):
        with pytest.raises(ValueError):
            collate(tiny_pairs, "clm")

    def test_seq2seq_shift(self, tiny_pairs):
        b = collate_seq2seq(tiny_pairs)
        assert b.dec_in[0].tolist() == [SOS, 8, 9, 10]
        assert b.dec_out[0].tolist() == [8, 9, 10, EOS]
        assert b.dec_in[1].tolist() == [SOS, 13, 14, PAD]
        assert b.target_mask.sum() == 7

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.integers(2, 9), st.integers(2, 9)), min_size=1, max_size=5), st.integers(0, 99))
    def test_pad_columns_invisible(self, shapes, seed):
        rng = random.Random(seed)
        pairs = [random_pair(rng, c, s) for c, s in shapes]
        for kind in ("ulm", "mlm"):
            b = collate(pairs, kind, seed=seed)
            pad = b.ids == PAD
            assert not (b.attn & pad.unsqueeze(1)).any()
            assert b.attn.any(dim=-1).all()
