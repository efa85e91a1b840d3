"""BPE learning and replay, the three tokenizers, and the shared label space.

Merge sequences in the BPE tests are derived by hand from pair counts, so
the expected tables are frozen rather than recomputed.
"""

import numpy as np
import pytest

from phrasebreak.corpus import Utterance, Word
from phrasebreak.errors import DataError, ParseError, ShapeError
from phrasebreak.tokenization import (
    CONT,
    MASK,
    PAD,
    SPECIALS,
    SUP_JOIN,
    UNK,
    WORD_START,
    MergeTable,
    PhonemeTokenizer,
    SubwordTokenizer,
    Vocab,
    apply_merges,
    derive_supphonemes,
    make_labels,
    read_lexicon,
    read_merges,
    read_vocab,
    train_bpe,
    train_sup_bpe,
    write_lexicon,
    write_merges,
    write_vocab,
)


def _utt(surfaces, uid="u0", spk=0, phonemes=None):
    words = []
    for i, s in enumerate(surfaces):
        phones = phonemes[i] if phonemes else [c.upper() for c in s]
        words.append(Word(s, phones))
    n = len(words)
    return Utterance(uid, spk, words, [0.0] * (n - 1), [False] * (n - 1), 1.0)


# ---------------------------------------------------------------------------
# vocabulary


def test_vocab_starts_with_specials():
    v = Vocab.build(["x", "y"])
    assert v.token_of[:4] == list(SPECIALS)
    assert v.id("<pad>") == PAD
    assert v.id("<mask>") == MASK
    with pytest.raises(DataError):
        Vocab(["x", "y"])


def test_vocab_build_dedupes_preserving_order():
    v = Vocab.build(["b", "a", "b", "c", "a"])
    assert v.token_of[4:] == ["b", "a", "c"]


def test_vocab_rejects_duplicates():
    with pytest.raises(DataError):
        Vocab(list(SPECIALS) + ["x", "x"])


def test_vocab_unknown_maps_to_unk():
    v = Vocab.build(["x"])
    assert v.id("zzz") == UNK
    assert v.id("x") == 4


# ---------------------------------------------------------------------------
# BPE


def test_train_bpe_hand_derived_merges():
    # pair counts: (a,b) x3 beats (a,a) x2; then (a,ab) x2; then nothing
    seqs = [["a", "a", "b"], ["a", "a", "b"], ["a", "b"]]
    table = train_bpe(seqs, 10)
    assert table.merges == [("a", "b"), ("a", "ab")]


def test_train_bpe_tie_breaks_lexicographically():
    seqs = [["c", "a"], ["c", "a"], ["b", "a"], ["b", "a"]]
    table = train_bpe(seqs, 1)
    assert table.merges == [("b", "a")]


def test_train_bpe_merge_count_limit():
    seqs = [["a", "b", "c", "d"]] * 3
    assert len(train_bpe(seqs, 2).merges) == 2


def test_train_bpe_rejects_negative_count():
    with pytest.raises(ShapeError):
        train_bpe([["a", "b"]], -1)


def test_apply_merges_respects_learned_priority():
    # (b,c) learned before (a,b): replay must consume b first
    table = MergeTable([("b", "c"), ("a", "b")])
    assert apply_merges(["a", "b", "c"], table) == ["a", "bc"]
    table2 = MergeTable([("a", "b"), ("ab", "c")])
    assert apply_merges(["a", "b", "c"], table2) == ["abc"]


def test_apply_merges_repeats_within_word():
    table = MergeTable([("a", "a")])
    assert apply_merges(["a", "a", "a", "a"], table) == ["aa", "aa"]


def test_merge_table_rejects_duplicates():
    with pytest.raises(DataError):
        MergeTable([("a", "b"), ("a", "b")])


def test_merge_table_join_in_products():
    table = MergeTable([("K", "AE")], join=SUP_JOIN)
    assert table.products() == ["K+AE"]


# ---------------------------------------------------------------------------
# subword tokenizer


def test_word_symbols_marks_non_initial_words():
    assert SubwordTokenizer.word_symbols("cat", initial=True) == ["c", "a", "t"]
    assert SubwordTokenizer.word_symbols("cat", initial=False) == [
        WORD_START + "c", "a", "t"]


def test_subword_round_trip():
    utts = [_utt(["the", "cat", "sat"]), _utt(["the", "hat"], uid="u1")]
    tok = SubwordTokenizer.train(utts, 20)
    example = tok.tokenize(utts[0].words)
    assert tok.detokenize(example) == ["the", "cat", "sat"]
    assert example.n_words == 3
    assert int(example.word_final_mask.sum()) == 3


def test_subword_counts_unknowns():
    tok = SubwordTokenizer.train([_utt(["abc"])], 0)
    assert tok.unk_count == 0
    example = tok.tokenize([Word("abz", ["A"])])
    assert tok.unk_count == 1
    assert UNK in example.token_ids.tolist()


def test_subword_merges_never_cross_words():
    # "ab" is frequent only across the word boundary in "...a b..."
    utts = [_utt(["xa", "bx"])] * 5
    tok = SubwordTokenizer.train(utts, 50)
    assert ("a", WORD_START + "b") not in tok.merge_table.merges


def test_subword_one_final_token_per_word():
    utts = [_utt(["banana", "bandana"])]
    tok = SubwordTokenizer.train(utts, 8)
    example = tok.tokenize(utts[0].words)
    for w in range(example.n_words):
        span_mask = example.word_final_mask[example.word_index == w]
        assert span_mask.sum() == 1
        assert span_mask[-1] == 1


# ---------------------------------------------------------------------------
# phoneme tokenizer


def test_phoneme_tokenizer_continuation_prefix():
    utts = [_utt(["cat"], phonemes=[["K", "AE", "T"]])]
    tok = PhonemeTokenizer.train(utts)
    example = tok.tokenize(utts[0].words)
    names = [tok.vocab.token_of[t] for t in example.token_ids]
    assert names == ["K", CONT + "AE", CONT + "T"]
    assert tok.unk_count == 0


def test_phoneme_vocab_closed_under_position():
    # training only ever saw "K" word-initially; a continuation "##K" must
    # still resolve without an unknown
    utts = [_utt(["ka"], phonemes=[["K", "AA"]])]
    tok = PhonemeTokenizer.train(utts)
    example = tok.tokenize([Word("akka", ["AA", "K"])])
    assert tok.unk_count == 0
    assert UNK not in example.token_ids.tolist()


def test_phoneme_tokenizer_requires_phonemes():
    with pytest.raises(DataError):
        PhonemeTokenizer.train([_utt(["a"], phonemes=[[]])])
    tok = PhonemeTokenizer.train([_utt(["a"], phonemes=[["AH"]])])
    with pytest.raises(DataError):
        tok.tokenize([Word("x", [])])


def test_grapheme_targets_constant_per_word():
    utts = [_utt(["cat", "nap"], phonemes=[["K", "AE", "T"], ["N", "AE", "P"]])]
    tok = PhonemeTokenizer.train(utts, with_graphemes=True)
    example = tok.tokenize(utts[0].words)
    targets = example.grapheme_targets
    assert targets is not None
    for w in range(2):
        span = targets[example.word_index == w]
        assert len(set(span.tolist())) == 1
        assert span[0] == tok.grapheme_vocab.id(utts[0].words[w].surface)
    assert targets[0] != targets[-1]


def test_grapheme_targets_unseen_surface_is_unk():
    tok = PhonemeTokenizer.train([_utt(["cat"], phonemes=[["K", "AE", "T"]])],
                                 with_graphemes=True)
    example = tok.tokenize([Word("dog", ["K", "AE"])])
    assert set(example.grapheme_targets.tolist()) == {UNK}


# ---------------------------------------------------------------------------
# sup-phonemes


def test_train_sup_bpe_hand_derived():
    utts = [
        _utt(["cat"], phonemes=[["K", "AE", "T"]]),
        _utt(["cat"], uid="u1", phonemes=[["K", "AE", "T"]]),
        _utt(["at", "cat"], uid="u2", phonemes=[["AE", "T"], ["K", "AE", "T"]]),
    ]
    table, vocab = train_sup_bpe(utts, 10)
    # (AE,T) x4 beats (K,AE) x3, then the grown pair
    assert table.merges == [("AE", "T"), ("K", "AE+T")]
    assert "AE+T" in vocab.id_of
    assert "K+AE+T" in vocab.id_of
    assert "K" in vocab.id_of  # base symbols stay addressable


def test_derive_supphonemes_upsamples_group_ids():
    utts = [
        _utt(["cat"], phonemes=[["K", "AE", "T"]]),
        _utt(["cat"], uid="u1", phonemes=[["K", "AE", "T"]]),
        _utt(["at", "cat"], uid="u2", phonemes=[["AE", "T"], ["K", "AE", "T"]]),
    ]
    ptok = PhonemeTokenizer.train(utts)
    table, sup_vocab = train_sup_bpe(utts, 10)
    example = derive_supphonemes(ptok.tokenize(utts[2].words), ptok.vocab,
                                 table, sup_vocab)
    sup = example.sup_ids
    assert sup is not None and len(sup) == len(example.token_ids)
    # word "at" collapses to one group spanning 2 positions
    assert sup[0] == sup[1] == sup_vocab.id("AE+T")
    # word "cat" collapses to one group spanning 3 positions
    assert sup[2] == sup[3] == sup[4] == sup_vocab.id("K+AE+T")


def test_derive_supphonemes_singleton_groups():
    utts = [_utt(["ta"], phonemes=[["T", "K"]])]
    ptok = PhonemeTokenizer.train(utts)
    table, sup_vocab = train_sup_bpe(utts, 0)
    example = derive_supphonemes(ptok.tokenize(utts[0].words), ptok.vocab,
                                 table, sup_vocab)
    assert example.sup_ids.tolist() == [sup_vocab.id("T"), sup_vocab.id("K")]


# ---------------------------------------------------------------------------
# shared label space


def test_labels_land_on_word_final_tokens():
    utts = [_utt(["the", "cat", "sat"])]
    tok = SubwordTokenizer.train(utts, 4)
    example = make_labels(tok.tokenize(utts[0].words), [True, False])
    finals = np.flatnonzero(example.word_final_mask)
    assert example.labels[finals].tolist() == [1.0, 0.0, 0.0]
    off_final = np.flatnonzero(example.word_final_mask == 0)
    assert not example.labels[off_final].any()


def test_make_labels_checks_arity():
    utts = [_utt(["a", "b"])]
    tok = SubwordTokenizer.train(utts, 0)
    example = tok.tokenize(utts[0].words)
    with pytest.raises(ShapeError):
        make_labels(example, [True, False])


def test_make_labels_single_word():
    utts = [_utt(["hi"])]
    tok = SubwordTokenizer.train(utts, 0)
    example = make_labels(tok.tokenize(utts[0].words), [])
    assert not example.labels.any()


def test_evaluated_positions_agree_across_tokenizations():
    utts = [
        _utt(["the", "striped", "cat"],
             phonemes=[["DH", "AH"], ["S", "T", "R", "AY", "P", "T"],
                       ["K", "AE", "T"]]),
        _utt(["cats", "nap"], uid="u1",
             phonemes=[["K", "AE", "T", "S"], ["N", "AE", "P"]]),
    ]
    stok = SubwordTokenizer.train(utts, 12)
    ptok = PhonemeTokenizer.train(utts)
    table, sup_vocab = train_sup_bpe(utts, 6)
    for utt in utts:
        n = len(utt.words)
        sub = stok.tokenize(utt.words)
        pho = ptok.tokenize(utt.words)
        sup = derive_supphonemes(pho, ptok.vocab, table, sup_vocab)
        assert sub.n_words == pho.n_words == sup.n_words == n
        assert int(sub.word_final_mask.sum()) == n
        assert int(pho.word_final_mask.sum()) == n
        assert int(sup.word_final_mask.sum()) == n


# ---------------------------------------------------------------------------
# plain-text artifacts


def test_vocab_file_round_trip(tmp_path):
    vocab = Vocab.build(["K", "##K", "Ġt"])
    path = tmp_path / "vocab.txt"
    write_vocab(path, vocab)
    assert read_vocab(path).token_of == vocab.token_of


def test_merge_file_round_trip(tmp_path):
    table = MergeTable([("a", "b"), ("ab", "c")])
    path = tmp_path / "merges.txt"
    write_merges(path, table)
    back = read_merges(path)
    assert back.merges == table.merges
    assert back.join == ""


def test_merge_file_preserves_join(tmp_path):
    table = MergeTable([("AE", "T")], join=SUP_JOIN)
    path = tmp_path / "sup_merges.txt"
    write_merges(path, table)
    back = read_merges(path)
    assert back.join == SUP_JOIN
    assert back.compose("AE", "T") == "AE+T"


def test_merge_file_rejects_bad_line(tmp_path):
    path = tmp_path / "merges.txt"
    path.write_text("a b c\n", encoding="utf-8")
    with pytest.raises(ParseError):
        read_merges(path)


def test_lexicon_round_trip(tmp_path):
    entries = {"cat": ["K", "AE", "T"], "a": ["AH"]}
    path = tmp_path / "lexicon.txt"
    write_lexicon(path, entries)
    assert read_lexicon(path) == entries


def test_lexicon_rejects_missing_tab(tmp_path):
    path = tmp_path / "lexicon.txt"
    path.write_text("cat K AE T\n", encoding="utf-8")
    with pytest.raises(ParseError):
        read_lexicon(path)
