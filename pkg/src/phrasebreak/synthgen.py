"""Synthetic speech corpus with controllable per-speaker pausing styles.

Utterances are sequences of pseudo-words drawn from a fixed lexicon with a
deterministic letter-to-phoneme spelling. Each inter-word boundary either
carries punctuation (fixed 200 ms pause) or may receive a breath pause,
sampled per speaker as sigmoid(rp_bias + weights . features) with log-normal
durations floored at 60 ms so the 50 ms detector always agrees with the
sampled label. A fraction of boundaries get doubled punctuation on purpose
to exercise downstream normalization.

Oracle speaker embeddings are a fixed seeded linear image of the style
vector plus per-utterance Gaussian noise, standing in for an external
speaker-verification model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .corpus import Utterance, Word
from .errors import DataError, ShapeError
from .rng import stream

PIP_MS = 200.0          # pause at punctuation boundaries
RP_FLOOR_MS = 60.0      # sampled breath pauses never fall below this
DURATION_LOG_SIGMA = 0.45
WORDS_MIN, WORDS_MAX = 5, 60

PHONEME_OF_LETTER = {
    "a": "AA", "b": "B", "c": "K", "d": "D", "e": "EH", "f": "F", "g": "G",
    "h": "HH", "i": "IY", "j": "JH", "k": "K", "l": "L", "m": "M", "n": "N",
    "o": "OW", "p": "P", "q": "K", "r": "R", "s": "S", "t": "T", "u": "UW",
    "v": "V", "w": "W", "x": "S", "y": "Y", "z": "Z",
}


def pseudo_g2p(surface: str) -> list[str]:
    """Letter-by-letter phonemes; raises on characters outside the table."""
    try:
        return [PHONEME_OF_LETTER[ch] for ch in surface.lower()]
    except KeyError as exc:
        raise DataError(f"cannot phonemize {surface!r}: no phoneme for {exc}")


def _build_lexicon(size: int = 140) -> tuple[str, ...]:
    consonants = "bdfgklmnprstvz"
    vowels = "aeiou"
    rng = stream(0x5EED, "lexicon")
    words = []
    seen = set()
    while len(words) < size:
        n_syll = int(rng.integers(1, 4))
        parts = []
        for _ in range(n_syll):
            parts.append(consonants[rng.integers(len(consonants))])
            parts.append(vowels[rng.integers(len(vowels))])
            if rng.random() < 0.3:
                parts.append(consonants[rng.integers(len(consonants))])
        w = "".join(parts)
        if w not in seen:
            seen.add(w)
            words.append(w)
    return tuple(words)


LEXICON = _build_lexicon()


@dataclass
class SpeakerStyle:
    speaker_id: int
    rp_bias: float                 # baseline log-odds of pausing
    feature_weights: np.ndarray    # length dim_f
    duration_log_mean: float       # log seconds


def gen_speakers(count: int, dim_f: int, seed: int) -> list[SpeakerStyle]:
    """Heterogeneous styles; each speaker draws from its own stream."""
    if count < 1 or dim_f < 1:
        raise ShapeError(f"bad speaker request: count={count}, dim_f={dim_f}")
    styles = []
    for spk in range(count):
        rng = stream(seed, "style", spk)
        styles.append(SpeakerStyle(
            speaker_id=spk,
            rp_bias=float(rng.uniform(-3.0, -1.0)),
            feature_weights=rng.uniform(-1.0, 1.0, size=dim_f),
            duration_log_mean=float(rng.uniform(math.log(0.1), math.log(0.3))),
        ))
    return styles


def boundary_features(index: int, n_words: int, left: str, right: str,
                      depth: int, dim_f: int) -> np.ndarray:
    """Bounded feature vector for the boundary after word `index`.

    The first four entries are position, neighbor lengths, and clause depth;
    any further entries are position harmonics so every dim_f is defined.
    """
    pos = index / max(1, n_words - 2)
    feats = np.empty(dim_f)
    base = [
        2.0 * pos - 1.0,
        math.tanh((len(left) - 4.0) / 3.0),
        math.tanh((len(right) - 4.0) / 3.0),
        math.tanh(depth / 2.0),
    ]
    for j in range(dim_f):
        feats[j] = base[j] if j < 4 else math.sin(math.pi * (j - 3) * pos)
    return feats


def _sample_skeleton(rng: np.random.Generator, dim_f: int):
    """Words, per-boundary punctuation (possibly doubled), and features.

    Returns (word_surfaces, boundary_puncts, feature_rows, final_punct).
    Punctuation composition and label sampling use separate streams so the
    feature distribution can be sampled on its own.
    """
    n_words = int(rng.integers(WORDS_MIN, WORDS_MAX + 1))
    surfaces = [LEXICON[rng.integers(len(LEXICON))] for _ in range(n_words)]
    depth = 0
    puncts: list[str | None] = []
    features = []
    for i in range(n_words - 1):
        step = rng.random()
        if step < 0.25 and depth < 3:
            depth += 1
        elif step < 0.5 and depth > 0:
            depth -= 1
        punct = None
        if rng.random() < 0.15:
            punct = "," if rng.random() < 0.7 else "."
            if rng.random() < 0.02:
                punct += "," if rng.random() < 0.5 else "."
        elif rng.random() < 0.02:
            # doubled punctuation with no clause motivation, still 2% overall
            punct = ",,"
        puncts.append(punct)
        features.append(boundary_features(i, n_words, surfaces[i],
                                          surfaces[i + 1], depth, dim_f))
    final_punct = "." if rng.random() < 0.8 else None
    if final_punct and rng.random() < 0.02:
        final_punct += "."
    return surfaces, puncts, features, final_punct


def sample_boundary_features(seed: int, draws: int, dim_f: int) -> np.ndarray:
    """Feature rows of punctuation-free boundaries, sampled from the same
    skeleton process gen_corpus uses. Intended for analytic checks."""
    rng = stream(seed, "skeleton-probe")
    rows = []
    while len(rows) < draws:
        _, puncts, features, _ = _sample_skeleton(rng, dim_f)
        rows.extend(f for p, f in zip(puncts, features) if p is None)
    return np.asarray(rows[:draws])


def _word_duration_s(phonemes: list[str]) -> float:
    return 0.15 + 0.06 * len(phonemes)


def gen_corpus(styles: list[SpeakerStyle], utts_per_speaker: int,
               seed: int) -> list[Utterance]:
    """Corpus ordered by (speaker, utterance index), labels included."""
    if utts_per_speaker < 1:
        raise ShapeError(f"utts_per_speaker must be >= 1, got {utts_per_speaker}")
    out = []
    for style in styles:
        dim_f = len(style.feature_weights)
        for j in range(utts_per_speaker):
            skel_rng = stream(seed, "skel", style.speaker_id, j)
            label_rng = stream(seed, "label", style.speaker_id, j)
            surfaces, puncts, features, final_punct = _sample_skeleton(
                skel_rng, dim_f)
            words = [Word(s, pseudo_g2p(s)) for s in surfaces]
            for i, p in enumerate(puncts):
                words[i].trailing_punct = p
            words[-1].trailing_punct = final_punct
            pauses = []
            labels = []
            for punct, feats in zip(puncts, features):
                if punct is not None:
                    pauses.append(PIP_MS)
                    labels.append(False)
                    continue
                p_rp = 1.0 / (1.0 + math.exp(-(style.rp_bias
                                               + float(style.feature_weights @ feats))))
                if label_rng.random() < p_rp:
                    dur = label_rng.lognormal(style.duration_log_mean,
                                              DURATION_LOG_SIGMA)
                    pauses.append(max(RP_FLOOR_MS, dur * 1000.0))
                    labels.append(True)
                else:
                    pauses.append(0.0)
                    labels.append(False)
            total = sum(_word_duration_s(w.phonemes) for w in words)
            total += sum(pauses) / 1000.0
            out.append(Utterance(
                utterance_id=f"spk{style.speaker_id:03d}_utt{j:04d}",
                speaker_id=style.speaker_id,
                words=words,
                boundary_pause_ms=pauses,
                rp_label=labels,
                total_duration_s=total,
            ))
    return out


# ---------------------------------------------------------------------------
# oracle speaker embeddings


def style_vector(style: SpeakerStyle) -> np.ndarray:
    return np.concatenate([[style.rp_bias], style.feature_weights,
                           [style.duration_log_mean]])


def oracle_embeddings(styles: list[SpeakerStyle], utts_per_speaker: int,
                      dim: int, noise_std: float, seed: int):
    """Per-speaker mean embeddings and per-utterance noisy observations.

    The mean is a fixed seeded linear projection of the style vector; each
    utterance adds isotropic Gaussian noise of scale noise_std. Returns
    (means: dict speaker -> [dim], per_utt: dict speaker -> list of [dim]).
    """
    if not styles:
        raise ShapeError("no styles given")
    s_dim = style_vector(styles[0]).size
    if dim < s_dim:
        raise ShapeError(f"embedding dim {dim} below style dimensionality {s_dim}")
    proj = stream(seed, "psvm-proj").normal(0.0, 1.0 / math.sqrt(s_dim),
                                            size=(dim, s_dim))
    means = {}
    per_utt = {}
    for style in styles:
        mean = proj @ style_vector(style)
        means[style.speaker_id] = mean
        obs = []
        for j in range(utts_per_speaker):
            noise = stream(seed, "psvm-noise", style.speaker_id, j).normal(
                0.0, noise_std, size=dim)
            obs.append(mean + noise)
        per_utt[style.speaker_id] = obs
    return means, per_utt
