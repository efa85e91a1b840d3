"""Praat TextGrid reader covering both the long and the short text form.

The two forms carry the same values in the same order; the long form just
interleaves them with key names, brackets, and indices. So the reader lexes
the document into a stream of quoted strings and bare numbers (skipping
everything between square brackets, which is only ever an index) and then
interprets that stream positionally. Doubled quotes inside strings unescape
to one quote, as Praat writes them.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .errors import DataError, ParseError

_NUM = re.compile(r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?")


@dataclass
class Interval:
    label: str
    xmin: float
    xmax: float


def _lex(text: str):
    """Quoted strings (as str) and numbers (as float), in document order."""
    tokens: list[object] = []
    i, n = 0, len(text)
    depth = 0
    while i < n:
        ch = text[i]
        if ch == '"':
            j = i + 1
            buf = []
            while j < n:
                if text[j] == '"':
                    if j + 1 < n and text[j + 1] == '"':
                        buf.append('"')
                        j += 2
                        continue
                    break
                buf.append(text[j])
                j += 1
            else:
                raise ParseError("unterminated quoted string",
                                 line=text.count("\n", 0, i) + 1)
            tokens.append("".join(buf))
            i = j + 1
        elif ch == "[":
            depth += 1
            i += 1
        elif ch == "]":
            depth = max(0, depth - 1)
            i += 1
        elif depth == 0 and (ch.isdigit() or
                             (ch in "+-." and i + 1 < n and text[i + 1].isdigit())):
            m = _NUM.match(text, i)
            tokens.append(float(m.group()))
            i = m.end()
        else:
            i += 1
    return tokens


class _Reader:
    def __init__(self, tokens):
        self._tokens = tokens
        self._pos = 0

    def take(self, kind, what):
        if self._pos >= len(self._tokens):
            raise ParseError(f"unexpected end of document, wanted {what}")
        tok = self._tokens[self._pos]
        self._pos += 1
        if not isinstance(tok, kind):
            raise ParseError(f"expected {what}, got {tok!r}")
        return tok


def parse_textgrid(text: str) -> dict[str, list[Interval]]:
    """Tier name -> intervals. Point tiers come back with xmin == xmax.

    Empty labels (silences) are preserved. Duplicate tier names keep the
    last occurrence, matching Praat's own lookup.
    """
    tokens = _lex(text)
    if len(tokens) < 2 or tokens[0] != "ooTextFile" or tokens[1] != "TextGrid":
        raise ParseError("not an ooTextFile TextGrid document")
    r = _Reader(tokens[2:])
    xmin = r.take(float, "file xmin")
    xmax = r.take(float, "file xmax")
    if xmax < xmin:
        raise DataError(f"file xmax {xmax} below xmin {xmin}")
    n_tiers = int(r.take(float, "tier count"))
    doc: dict[str, list[Interval]] = {}
    for _ in range(n_tiers):
        klass = r.take(str, "tier class")
        name = r.take(str, "tier name")
        t_min = r.take(float, "tier xmin")
        t_max = r.take(float, "tier xmax")
        if t_max < t_min:
            raise DataError(f"tier {name!r}: xmax {t_max} below xmin {t_min}")
        size = int(r.take(float, "interval count"))
        intervals = []
        if klass == "IntervalTier":
            for _ in range(size):
                a = r.take(float, "interval xmin")
                b = r.take(float, "interval xmax")
                label = r.take(str, "interval text")
                if b < a:
                    raise DataError(
                        f"tier {name!r}: interval xmax {b} below xmin {a}")
                intervals.append(Interval(label, a, b))
        elif klass == "TextTier":
            for _ in range(size):
                t = r.take(float, "point time")
                label = r.take(str, "point mark")
                intervals.append(Interval(label, t, t))
        else:
            raise ParseError(f"unknown tier class {klass!r}")
        doc[name] = intervals
    return doc


def get_tier(doc: dict[str, list[Interval]], name: str) -> list[Interval]:
    if name not in doc:
        raise DataError(
            f"no tier named {name!r}; available tiers: {sorted(doc)}")
    return doc[name]


SILENCE_LABELS = {"", "sil", "sp", "spn", "<eps>"}
PUNCT_CHARS = ",.;:!?"


def textgrid_to_utterance(doc, utterance_id: str, speaker_id: int,
                          word_tier: str = "words",
                          phone_tier: str = "phones"):
    """Word records with pauses from a forced-alignment TextGrid.

    Silence intervals separate words; the pause at a boundary is the gap
    between consecutive word intervals. Trailing punctuation characters on
    a word label become its punctuation mark; leading ones are dropped.
    Surfaces are lowercased. Labels come back all-false; run label_rps
    after normalization.
    """
    from .corpus import Utterance, Word

    words_iv = [iv for iv in get_tier(doc, word_tier)
                if iv.label.strip().lower() not in SILENCE_LABELS]
    if not words_iv:
        raise DataError(f"utterance {utterance_id}: no word intervals")
    phones_iv = [iv for iv in get_tier(doc, phone_tier)
                 if iv.label.strip().lower() not in SILENCE_LABELS]

    words = []
    for iv in words_iv:
        label = iv.label.strip().lstrip(PUNCT_CHARS)
        core = label.rstrip(PUNCT_CHARS)
        if not core:
            raise DataError(
                f"utterance {utterance_id}: punctuation-only word {iv.label!r}")
        trailing = label[len(core):]
        phonemes = [p.label.strip() for p in phones_iv
                    if iv.xmin <= (p.xmin + p.xmax) / 2 < iv.xmax]
        words.append(Word(core.lower(), phonemes, trailing or None))

    pauses = [max(0.0, (words_iv[i + 1].xmin - words_iv[i].xmax) * 1000.0)
              for i in range(len(words_iv) - 1)]
    duration = words_iv[-1].xmax - words_iv[0].xmin
    if duration <= 0:
        raise DataError(f"utterance {utterance_id}: non-positive span")
    return Utterance(utterance_id, speaker_id, words, pauses,
                     [False] * (len(words) - 1), duration)
