from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cellrefine.errors import AllZeroExpression, LengthMismatch, RateOutOfRange, UnknownGene
from cellrefine.tokenizer import (
    GeneVocabulary,
    TokenSequence,
    mask_tokens,
    num_masked,
    tokenize,
    tokenize_genes,
)

ABCD = GeneVocabulary(("A", "B", "C", "D"))


def names(seq, vocab=ABCD):
    return tuple(vocab.genes[i] for i in seq.tokens)


def test_reserved_token_layout(tmp_path):
    assert (ABCD.size, ABCD.mask_id, ABCD.pad_id) == (6, 4, 5)
    path = tmp_path / "vocab.json"
    ABCD.save(path)
    assert GeneVocabulary.load(path).genes == ABCD.genes


def test_tokenize_drops_zeros_and_sorts_descending():
    assert names(tokenize([0.1, 5.0, 0.0, 2.0], ABCD, max_len=10)) == ("B", "D", "A")


def test_equal_values_keep_gene_id_order():
    vocab = GeneVocabulary(("g3", "g1", "g2"))
    assert names(tokenize([1.0, 1.0, 1.0], vocab), vocab) == ("g1", "g2", "g3")


def test_truncation_keeps_top_values():
    vocab = GeneVocabulary(tuple("abcde"))
    assert names(tokenize([5, 1, 4, 2, 3], vocab, max_len=3), vocab) == ("a", "c", "e")


def test_medians_rescale_before_ranking():
    vocab = GeneVocabulary(("A", "B"), np.array([10.0, 1.0]))
    assert names(tokenize([5.0, 1.0], vocab), vocab) == ("B", "A")


def test_medians_ignore_zero_entries():
    matrix = np.array([[0.0, 2.0], [4.0, 0.0], [6.0, 0.0]])
    vocab = GeneVocabulary(("A", "B")).with_medians(matrix)
    assert vocab.medians.tolist() == [5.0, 2.0]


def test_tokenize_errors():
    with pytest.raises(LengthMismatch):
        tokenize([1.0, 2.0], ABCD)
    with pytest.raises(AllZeroExpression):
        tokenize([0.0] * 4, ABCD)
    with pytest.raises(UnknownGene):
        tokenize_genes(["A", "Q"], ABCD)


def test_tokenize_genes_preserves_order():
    assert names(tokenize_genes(["D", "A", "C"], ABCD)) == ("D", "A", "C")


expression = st.lists(st.floats(0, 100, allow_nan=False), min_size=6, max_size=6).filter(lambda v: any(x > 0 for x in v))
VOCAB6 = GeneVocabulary(tuple(f"g{i}" for i in range(6)), np.array([0.5, 1, 2, 3, 1, 0.25]))


@given(expression)
def test_reranking_rank_implied_values_is_idempotent(values):
    seq = tokenize(values, VOCAB6)
    implied = np.zeros(6)
    for rank, tok in enumerate(seq.tokens):
        implied[tok] = (len(seq) - rank) * VOCAB6.medians[tok]
    assert tokenize(implied, VOCAB6).tokens == seq.tokens
    assert tokenize(values, VOCAB6) == seq


# --- masking -------------------------------------------------------------------------

SEQ = TokenSequence(tuple(range(20)))
VOCAB20 = GeneVocabulary(tuple(f"g{i:02d}" for i in range(20)))


def test_zero_rate_masks_nothing():
    out = mask_tokens(SEQ, 0.0, seed=1, vocab=VOCAB20)
    assert out.masked_positions == () and out.tokens == SEQ.tokens


def test_full_rate_masks_everything():
    out = mask_tokens(SEQ, 1.0, seed=1, vocab=VOCAB20)
    assert out.masked_positions == tuple(range(20))
    assert set(out.tokens) == {VOCAB20.mask_id}


def test_masking_is_seeded():
    a = mask_tokens(SEQ, 0.15, seed=7, vocab=VOCAB20)
    b = mask_tokens(SEQ, 0.15, seed=7, vocab=VOCAB20)
    assert a == b
    assert len(a.masked_positions) == 3


def test_rate_out_of_range():
    with pytest.raises(RateOutOfRange):
        mask_tokens(SEQ, 1.5, seed=0, vocab=VOCAB20)
    with pytest.raises(RateOutOfRange):
        mask_tokens(SEQ, -0.1, seed=0, vocab=VOCAB20)


def test_rounding_is_half_up():
    assert num_masked(0.15, 10) == 2  # 1.5 -> 2
    assert num_masked(0.25, 2) == 1  # 0.5 -> 1


@given(st.integers(1, 60), st.floats(0, 1), st.integers(0, 2**31))
def test_mask_fraction_and_restoration(t, rate, seed):
    vocab = GeneVocabulary(tuple(f"g{i:02d}" for i in range(70)))
    seq = TokenSequence(tuple(range(t)))
    out = mask_tokens(seq, rate, seed, vocab)
    frac = len(out.masked_positions) / t
    assert rate - 1 / t - 1e-12 <= frac <= rate + 1 / t + 1e-12
    assert all(out.tokens[p] == vocab.mask_id for p in out.masked_positions)
    assert len(out.targets) == len(out.masked_positions)
    assert out.restored() == seq.tokens


@given(st.integers(1, 30), st.integers(1, 10), st.floats(0, 1), st.integers(0, 2**31))
def test_pad_positions_never_masked(t, n_pad, rate, seed):
    vocab = GeneVocabulary(tuple(f"g{i:02d}" for i in range(40)))
    seq = TokenSequence(tuple(range(t)) + (vocab.pad_id,) * n_pad)
    out = mask_tokens(seq, rate, seed, vocab)
    assert all(seq.tokens[p] != vocab.pad_id for p in out.masked_positions)
    assert out.restored() == seq.tokens
