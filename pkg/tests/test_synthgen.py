"""Synthetic corpus generator: styles, skeletons, labels, oracle embeddings."""

import math

import numpy as np
import pytest

from phrasebreak.corpus import check_labels, normalize_punctuation
from phrasebreak.errors import DataError, ShapeError
from phrasebreak.synthgen import (
    LEXICON,
    PIP_MS,
    RP_FLOOR_MS,
    WORDS_MAX,
    WORDS_MIN,
    SpeakerStyle,
    boundary_features,
    gen_corpus,
    gen_speakers,
    oracle_embeddings,
    pseudo_g2p,
    sample_boundary_features,
    style_vector,
)


# ---------------------------------------------------------------------------
# spelling and lexicon


def test_pseudo_g2p_letter_map():
    assert pseudo_g2p("cat") == ["K", "AA", "T"]
    assert pseudo_g2p("CAT") == ["K", "AA", "T"]


def test_pseudo_g2p_rejects_unknown_characters():
    with pytest.raises(DataError):
        pseudo_g2p("c4t")
    with pytest.raises(DataError):
        pseudo_g2p("naïve")


def test_lexicon_is_usable():
    assert len(LEXICON) == 140
    assert len(set(LEXICON)) == 140
    for word in LEXICON:
        assert pseudo_g2p(word)


# ---------------------------------------------------------------------------
# speaker styles


def test_gen_speakers_ranges():
    styles = gen_speakers(30, 4, seed=5)
    assert [s.speaker_id for s in styles] == list(range(30))
    for s in styles:
        assert -3.0 <= s.rp_bias <= -1.0
        assert np.all(np.abs(s.feature_weights) <= 1.0)
        assert math.log(0.1) <= s.duration_log_mean <= math.log(0.3)
        assert s.feature_weights.shape == (4,)


def test_gen_speakers_stable_per_speaker():
    # adding speakers must not disturb earlier ones
    few = gen_speakers(3, 4, seed=5)
    many = gen_speakers(10, 4, seed=5)
    assert few[2].rp_bias == many[2].rp_bias
    assert np.array_equal(few[2].feature_weights, many[2].feature_weights)


def test_gen_speakers_seed_sensitivity():
    a = gen_speakers(4, 2, seed=1)
    b = gen_speakers(4, 2, seed=2)
    assert any(x.rp_bias != y.rp_bias for x, y in zip(a, b))


def test_gen_speakers_rejects_bad_request():
    with pytest.raises(ShapeError):
        gen_speakers(0, 4, seed=0)
    with pytest.raises(ShapeError):
        gen_speakers(4, 0, seed=0)


def test_style_vector_layout():
    style = SpeakerStyle(0, -2.0, np.array([0.5, -0.5]), -1.5)
    vec = style_vector(style)
    assert vec.tolist() == [-2.0, 0.5, -0.5, -1.5]


# ---------------------------------------------------------------------------
# boundary features


def test_boundary_features_bounded():
    rows = sample_boundary_features(seed=3, draws=500, dim_f=6)
    assert rows.shape == (500, 6)
    assert np.all(np.abs(rows) <= 1.0 + 1e-12)


def test_boundary_features_values():
    feats = boundary_features(0, 2, "word", "word", 0, 4)
    assert feats[0] == -1.0          # first of one boundary sits at pos 0
    assert feats[1] == 0.0           # len 4 is the neutral word length
    assert feats[2] == 0.0
    assert feats[3] == 0.0


def test_boundary_features_harmonics_fill_extra_dims():
    feats = boundary_features(2, 6, "ab", "ab", 1, 6)
    pos = 2 / 4
    assert abs(feats[4] - math.sin(math.pi * pos)) < 1e-12
    assert abs(feats[5] - math.sin(2 * math.pi * pos)) < 1e-12


def test_sample_boundary_features_deterministic():
    a = sample_boundary_features(seed=3, draws=50, dim_f=4)
    b = sample_boundary_features(seed=3, draws=50, dim_f=4)
    assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# corpus generation


@pytest.fixture(scope="module")
def small_corpus():
    styles = gen_speakers(8, 4, seed=11)
    return styles, gen_corpus(styles, 25, seed=11)


def test_gen_corpus_shape_and_order(small_corpus):
    styles, corpus = small_corpus
    assert len(corpus) == 8 * 25
    assert corpus[0].utterance_id == "spk000_utt0000"
    order = [(u.speaker_id, u.utterance_id) for u in corpus]
    assert order == sorted(order)
    for utt in corpus:
        assert WORDS_MIN <= len(utt.words) <= WORDS_MAX


def test_gen_corpus_deterministic(small_corpus):
    styles, corpus = small_corpus
    again = gen_corpus(styles, 25, seed=11)
    assert again == corpus


def test_gen_corpus_labels_survive_the_detector(small_corpus):
    # every sampled label must agree with pause/punctuation evidence, both
    # raw and after punctuation normalization
    _, corpus = small_corpus
    for utt in corpus:
        check_labels(utt)
        check_labels(normalize_punctuation(utt))


def test_gen_corpus_pause_conventions(small_corpus):
    _, corpus = small_corpus
    saw_pip = saw_rp = False
    for utt in corpus:
        for word, pause, label in zip(utt.words, utt.boundary_pause_ms,
                                      utt.rp_label):
            if word.trailing_punct is not None:
                assert pause == PIP_MS
                assert not label
                saw_pip = True
            elif label:
                assert pause >= RP_FLOOR_MS
                saw_rp = True
            else:
                assert pause == 0.0
    assert saw_pip and saw_rp


def test_gen_corpus_contains_doubled_punctuation(small_corpus):
    _, corpus = small_corpus
    doubled = [w.trailing_punct for u in corpus for w in u.words
               if w.trailing_punct and len(w.trailing_punct) > 1]
    assert doubled  # normalization downstream has something to collapse


def test_gen_corpus_duration_adds_up(small_corpus):
    _, corpus = small_corpus
    utt = corpus[0]
    words_s = sum(0.15 + 0.06 * len(w.phonemes) for w in utt.words)
    want = words_s + sum(utt.boundary_pause_ms) / 1000.0
    assert abs(utt.total_duration_s - want) < 1e-9


def test_gen_corpus_styles_differ_in_rp_rate(small_corpus):
    _, corpus = small_corpus
    rates = {}
    for utt in corpus:
        n, d = rates.get(utt.speaker_id, (0, 0))
        rates[utt.speaker_id] = (n + sum(utt.rp_label), d + len(utt.rp_label))
    per_spk = [n / d for n, d in rates.values()]
    assert max(per_spk) - min(per_spk) > 0.02


def test_extreme_styles_drive_rp_rate():
    eager = SpeakerStyle(0, 5.0, np.zeros(2), -1.5)
    silent = SpeakerStyle(1, -15.0, np.zeros(2), -1.5)
    corpus = gen_corpus([eager, silent], 10, seed=0)
    by_spk = {0: [], 1: []}
    for utt in corpus:
        free = [l for w, l in zip(utt.words, utt.rp_label)
                if w.trailing_punct is None]
        by_spk[utt.speaker_id].extend(free)
    assert np.mean(by_spk[0]) > 0.9
    assert sum(by_spk[1]) == 0


def test_gen_corpus_rejects_bad_count():
    styles = gen_speakers(1, 2, seed=0)
    with pytest.raises(ShapeError):
        gen_corpus(styles, 0, seed=0)


# ---------------------------------------------------------------------------
# oracle embeddings


def test_oracle_embeddings_linear_means():
    styles = gen_speakers(5, 2, seed=7)
    means, per_utt = oracle_embeddings(styles, 3, dim=8, noise_std=0.0, seed=7)
    assert set(means) == {0, 1, 2, 3, 4}
    # zero noise collapses every observation onto the mean
    for spk, obs in per_utt.items():
        assert len(obs) == 3
        for o in obs:
            assert np.allclose(o, means[spk])
    # linearity survives through the shared projection
    more, _ = oracle_embeddings(styles[:2], 1, dim=8, noise_std=0.0, seed=7)
    assert np.allclose(more[0], means[0])
    assert np.allclose(more[1], means[1])


def test_oracle_embeddings_noise_scale():
    styles = gen_speakers(2, 2, seed=9)
    means, per_utt = oracle_embeddings(styles, 400, dim=8, noise_std=0.3, seed=9)
    residuals = np.stack([o - means[0] for o in per_utt[0]])
    assert abs(residuals.std() - 0.3) < 0.03
    assert not np.allclose(per_utt[0][0], per_utt[0][1])


def test_oracle_embeddings_deterministic():
    styles = gen_speakers(3, 2, seed=4)
    a_means, a_obs = oracle_embeddings(styles, 2, dim=6, noise_std=0.5, seed=4)
    b_means, b_obs = oracle_embeddings(styles, 2, dim=6, noise_std=0.5, seed=4)
    for spk in a_means:
        assert np.array_equal(a_means[spk], b_means[spk])
        assert all(np.array_equal(x, y)
                   for x, y in zip(a_obs[spk], b_obs[spk]))


def test_oracle_embeddings_dimension_contract():
    styles = gen_speakers(2, 4, seed=0)  # style vector is 6 wide
    with pytest.raises(ShapeError):
        oracle_embeddings(styles, 1, dim=5, noise_std=0.1, seed=0)
    with pytest.raises(ShapeError):
        oracle_embeddings([], 1, dim=8, noise_std=0.1, seed=0)
