"""Tokenizers sharing one label space.

Three views of an utterance feed the models: byte-pair subwords over
characters, phonemes with a continuation prefix, and sup-phonemes (BPE
groups of word-internal phonemes, repeated across their member positions).
Whatever the view, exactly one token per word is word-final, and break
labels live only on word-final tokens, so every tokenizer exposes the same
number of evaluated positions: the word count.

BPE merges are learned greedily on pair frequency with lexicographic
tie-breaking and never cross a word boundary (training sequences are
per-word symbol lists).
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, replace

import numpy as np

from .corpus import Word
from .errors import DataError, ParseError, ShapeError

PAD, UNK, MASK, CLS = 0, 1, 2, 3
SPECIALS = ("<pad>", "<unk>", "<mask>", "<cls>")

WORD_START = "Ġ"   # printable stand-in for the word-leading space
CONT = "##"             # phoneme continuation prefix
SUP_JOIN = "+"          # separator inside sup-phoneme group names


@dataclass
class Vocab:
    token_of: list[str]

    def __post_init__(self):
        if list(self.token_of[: len(SPECIALS)]) != list(SPECIALS):
            raise DataError("vocab must start with the special tokens")
        self.id_of = {tok: i for i, tok in enumerate(self.token_of)}
        if len(self.id_of) != len(self.token_of):
            raise DataError("vocab has duplicate tokens")

    @classmethod
    def build(cls, tokens) -> "Vocab":
        ordered = list(dict.fromkeys(tokens))
        return cls(list(SPECIALS) + [t for t in ordered if t not in SPECIALS])

    def id(self, token: str) -> int:
        return self.id_of.get(token, UNK)

    def __len__(self) -> int:
        return len(self.token_of)


@dataclass
class MergeTable:
    merges: list[tuple[str, str]]
    join: str = ""

    def __post_init__(self):
        if len(set(self.merges)) != len(self.merges):
            raise DataError("merge table has duplicate pairs")
        self._rank = {pair: i for i, pair in enumerate(self.merges)}

    def compose(self, left: str, right: str) -> str:
        return left + self.join + right

    def products(self) -> list[str]:
        symbols = []
        for left, right in self.merges:
            symbols.append(self.compose(left, right))
        return symbols


def train_bpe(sequences, num_merges: int, join: str = "") -> MergeTable:
    """Greedy most-frequent-pair merges over per-word symbol sequences.

    Ties break to the lexicographically smallest (left, right). Stops early
    once no pair repeats or sequences are exhausted.
    """
    if num_merges < 0:
        raise ShapeError(f"num_merges must be >= 0, got {num_merges}")
    seqs = [list(s) for s in sequences]
    table = MergeTable([], join)
    merges: list[tuple[str, str]] = []
    for _ in range(num_merges):
        counts: Counter = Counter()
        for s in seqs:
            counts.update(zip(s, s[1:]))
        if not counts:
            break
        best = min(counts.items(), key=lambda kv: (-kv[1], kv[0]))[0]
        merges.append(best)
        product = best[0] + join + best[1]
        for idx, s in enumerate(seqs):
            seqs[idx] = _merge_once(s, best, product)
    return MergeTable(merges, join)


def _merge_once(symbols, pair, product):
    out = []
    i = 0
    while i < len(symbols):
        if i + 1 < len(symbols) and (symbols[i], symbols[i + 1]) == pair:
            out.append(product)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return out


def apply_merges(symbols, table: MergeTable) -> list[str]:
    """Replay learned merges on one word, highest-priority pair first."""
    symbols = list(symbols)
    while len(symbols) > 1:
        ranked = [(table._rank[p], p) for p in zip(symbols, symbols[1:])
                  if p in table._rank]
        if not ranked:
            break
        _, pair = min(ranked)
        symbols = _merge_once(symbols, pair, table.compose(*pair))
    return symbols


# ---------------------------------------------------------------------------
# tokenized example


@dataclass
class TokenizedExample:
    token_ids: np.ndarray           # [T] int64
    word_index: np.ndarray          # [T] int64, token -> owning word
    word_final_mask: np.ndarray     # [T] int64, 1 at each word's last token
    labels: np.ndarray              # [T] float32, meaningful where mask == 1
    sup_ids: np.ndarray | None = None
    grapheme_targets: np.ndarray | None = None

    def __post_init__(self):
        T = len(self.token_ids)
        for arr in (self.word_index, self.word_final_mask, self.labels):
            if len(arr) != T:
                raise ShapeError("tokenized example arrays disagree in length")

    @property
    def n_words(self) -> int:
        return int(self.word_index[-1]) + 1 if len(self.word_index) else 0


def _assemble(per_word_tokens: list[list[int]]) -> TokenizedExample:
    ids, widx, final = [], [], []
    for w, toks in enumerate(per_word_tokens):
        if not toks:
            raise DataError(f"word {w} produced no tokens")
        ids.extend(toks)
        widx.extend([w] * len(toks))
        final.extend([0] * (len(toks) - 1) + [1])
    return TokenizedExample(
        token_ids=np.asarray(ids, dtype=np.int64),
        word_index=np.asarray(widx, dtype=np.int64),
        word_final_mask=np.asarray(final, dtype=np.int64),
        labels=np.zeros(len(ids), dtype=np.float32),
    )


def make_labels(example: TokenizedExample, rp_label) -> TokenizedExample:
    """Attach boundary labels to word-final tokens.

    rp_label[i] lands on the final token of word i; the last word's final
    token stays 0 because no boundary follows it.
    """
    n_words = example.n_words
    if len(rp_label) != n_words - 1:
        raise ShapeError(
            f"{n_words} words need {n_words - 1} labels, got {len(rp_label)}")
    labels = np.zeros_like(example.labels)
    finals = np.flatnonzero(example.word_final_mask)
    for i, flag in enumerate(rp_label):
        labels[finals[i]] = float(bool(flag))
    return replace(example, labels=labels)


# ---------------------------------------------------------------------------
# subword tokenizer


class SubwordTokenizer:
    """Character BPE; the first token of a non-initial word carries the
    word-start marker as part of its text, GPT-2 style."""

    def __init__(self, merge_table: MergeTable, vocab: Vocab):
        self.merge_table = merge_table
        self.vocab = vocab
        self.unk_count = 0

    @staticmethod
    def word_symbols(surface: str, initial: bool) -> list[str]:
        chars = list(surface)
        if not initial:
            chars[0] = WORD_START + chars[0]
        return chars

    @classmethod
    def train(cls, utterances, num_merges: int) -> "SubwordTokenizer":
        sequences = []
        base: set[str] = set()
        for utt in utterances:
            for i, w in enumerate(utt.words):
                syms = cls.word_symbols(w.surface, i == 0)
                base.update(syms)
                sequences.append(syms)
        table = train_bpe(sequences, num_merges)
        vocab = Vocab.build(sorted(base) + table.products())
        return cls(table, vocab)

    def tokenize(self, words: list[Word]) -> TokenizedExample:
        per_word = []
        for i, w in enumerate(words):
            syms = apply_merges(self.word_symbols(w.surface, i == 0),
                                self.merge_table)
            toks = []
            for s in syms:
                tid = self.vocab.id(s)
                if tid == UNK:
                    self.unk_count += 1
                toks.append(tid)
            per_word.append(toks)
        return _assemble(per_word)

    def detokenize(self, example: TokenizedExample) -> list[str]:
        surfaces = []
        for w in range(example.n_words):
            toks = example.token_ids[example.word_index == w]
            text = "".join(self.vocab.token_of[t] for t in toks)
            surfaces.append(text.removeprefix(WORD_START))
        return surfaces


# ---------------------------------------------------------------------------
# phoneme tokenizer (with optional grapheme targets and sup-phonemes)


class PhonemeTokenizer:
    """Phoneme tokens; word-internal continuations carry the ## prefix.

    When built with a grapheme vocabulary, every token also gets the id of
    its word's surface as a grapheme target (constant across the word span).
    """

    def __init__(self, vocab: Vocab, grapheme_vocab: Vocab | None = None):
        self.vocab = vocab
        self.grapheme_vocab = grapheme_vocab
        self.unk_count = 0

    @classmethod
    def train(cls, utterances, with_graphemes: bool = False) -> "PhonemeTokenizer":
        phones: set[str] = set()
        surfaces: set[str] = set()
        for utt in utterances:
            for w in utt.words:
                if not w.phonemes:
                    raise DataError(f"word {w.surface!r} has no phonemes")
                # closed under position: every phoneme in both plain and
                # continuation form, so word position never creates an UNK
                phones.update(w.phonemes)
                phones.update(CONT + p for p in w.phonemes)
                surfaces.add(w.surface)
        vocab = Vocab.build(sorted(phones))
        graphemes = Vocab.build(sorted(surfaces)) if with_graphemes else None
        return cls(vocab, graphemes)

    def word_tokens(self, w: Word) -> list[str]:
        return [w.phonemes[0]] + [CONT + p for p in w.phonemes[1:]]

    def tokenize(self, words: list[Word]) -> TokenizedExample:
        per_word = []
        for w in words:
            if not w.phonemes:
                raise DataError(f"word {w.surface!r} has no phonemes")
            toks = []
            for s in self.word_tokens(w):
                tid = self.vocab.id(s)
                if tid == UNK:
                    self.unk_count += 1
                toks.append(tid)
            per_word.append(toks)
        example = _assemble(per_word)
        if self.grapheme_vocab is not None:
            targets = np.empty(len(example.token_ids), dtype=np.int64)
            for i, w in enumerate(words):
                targets[example.word_index == i] = self.grapheme_vocab.id(w.surface)
            example = replace(example, grapheme_targets=targets)
        return example


def train_sup_bpe(utterances, num_merges: int):
    """Sup-phoneme inventory: BPE over per-word raw phoneme sequences.

    Returns (merge table joined with '+', sup vocabulary over group names).
    """
    sequences = []
    base: set[str] = set()
    for utt in utterances:
        for w in utt.words:
            base.update(w.phonemes)
            sequences.append(list(w.phonemes))
    table = train_bpe(sequences, num_merges, join=SUP_JOIN)
    vocab = Vocab.build(sorted(base) + table.products())
    return table, vocab


def derive_supphonemes(example: TokenizedExample, phoneme_vocab: Vocab,
                       sup_table: MergeTable, sup_vocab: Vocab) -> TokenizedExample:
    """Aligned sup-phoneme ids, one per phoneme position.

    Each word's phonemes regroup under the sup merges; a group's id repeats
    across its member positions, so the sup lane has the same length and
    word-final structure as the phoneme lane.
    """
    sup = np.empty(len(example.token_ids), dtype=np.int64)
    for w in range(example.n_words):
        span = np.flatnonzero(example.word_index == w)
        raw = [phoneme_vocab.token_of[example.token_ids[t]].removeprefix(CONT)
               for t in span]
        pos = 0
        for group in apply_merges(raw, sup_table):
            size = group.count(SUP_JOIN) + 1
            gid = sup_vocab.id(group)
            for k in range(size):
                sup[span[pos + k]] = gid
            pos += size
        if pos != len(span):
            raise DataError("sup-phoneme groups do not cover the word")
    return replace(example, sup_ids=sup)


# ---------------------------------------------------------------------------
# plain-text artifacts


def write_vocab(path, vocab: Vocab) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for tok in vocab.token_of:
            fh.write(tok + "\n")


def read_vocab(path) -> Vocab:
    with open(path, encoding="utf-8") as fh:
        tokens = [line.rstrip("\n") for line in fh if line.rstrip("\n")]
    return Vocab(tokens)


def write_merges(path, table: MergeTable) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        if table.join:
            fh.write(f"#join={table.join}\n")
        for left, right in table.merges:
            fh.write(f"{left} {right}\n")


def read_merges(path) -> MergeTable:
    join = ""
    merges = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#join="):
                join = line[len("#join="):]
                continue
            parts = line.split(" ")
            if len(parts) != 2:
                raise ParseError(f"expected 'left right', got {line!r}",
                                 line=lineno)
            merges.append((parts[0], parts[1]))
    return MergeTable(merges, join)


def write_lexicon(path, entries: dict[str, list[str]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for word in sorted(entries):
            fh.write(word + "\t" + " ".join(entries[word]) + "\n")


def read_lexicon(path) -> dict[str, list[str]]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            if "\t" not in line:
                raise ParseError("expected word<TAB>phonemes", line=lineno)
            word, phones = line.split("\t", 1)
            out[word] = phones.split()
    return out
