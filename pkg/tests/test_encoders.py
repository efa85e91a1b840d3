"""Encoder stack, masking corruption, cross entropy, and pretraining."""

import numpy as np
import pytest

from phrasebreak import nn
from phrasebreak.encoders import (
    OBJECTIVES_OF_KIND,
    Encoder,
    EncoderConfig,
    mask_tokens,
    objective_losses,
    pretrain,
    softmax_cross_entropy,
)
from phrasebreak.errors import ConfigError, DataError, ShapeError
from phrasebreak.synthgen import gen_corpus, gen_speakers
from phrasebreak.tokenization import (
    MASK,
    PhonemeTokenizer,
    derive_supphonemes,
    train_sup_bpe,
)


# ---------------------------------------------------------------------------
# configuration contracts


def test_encoder_config_contracts():
    with pytest.raises(ConfigError):
        EncoderConfig("bert", vocab_size=10)
    with pytest.raises(ConfigError):
        EncoderConfig("phoneme", vocab_size=10, d_enc=15)
    with pytest.raises(ConfigError):
        EncoderConfig("phoneme", vocab_size=0)
    with pytest.raises(ConfigError):
        EncoderConfig("phoneme_mp", vocab_size=10)
    with pytest.raises(ConfigError):
        EncoderConfig("phoneme_pl", vocab_size=10)
    EncoderConfig("phoneme_mp", vocab_size=10, sup_vocab_size=5)
    EncoderConfig("phoneme_pl", vocab_size=10, grapheme_vocab_size=5)


# ---------------------------------------------------------------------------
# encoder forward


def _tiny_encoder(kind="phoneme", **kw):
    cfg = EncoderConfig(kind, vocab_size=12, embed_dim=8, num_layers=2,
                        d_enc=8, max_len=32, **kw)
    store = nn.ParameterStore()
    return Encoder(cfg, store, seed=3), store


def test_encoder_output_shapes():
    enc, _ = _tiny_encoder()
    batch = np.array([[4, 5, 6], [7, 8, 0]])
    out = enc.forward(batch, mask=np.array([[1, 1, 1], [1, 1, 0]]))
    assert out.shape == (2, 3, 8)
    single = enc.forward(np.array([4, 5, 6]))
    assert single.shape == (3, 8)


def test_encoder_deterministic_construction():
    a, _ = _tiny_encoder()
    b, _ = _tiny_encoder()
    x = np.array([[4, 5, 6, 7]])
    assert np.array_equal(a.forward(x), b.forward(x))


def test_encoder_padding_does_not_leak():
    enc, _ = _tiny_encoder()
    short = enc.forward(np.array([4, 5]))
    padded = enc.forward(np.array([[4, 5, 9, 9]]),
                         mask=np.array([[1, 1, 0, 0]]))
    assert np.allclose(padded[0, :2], short, atol=1e-6)


def test_encoder_length_limit():
    enc, _ = _tiny_encoder()
    with pytest.raises(ShapeError):
        enc.forward(np.zeros((1, 33), dtype=np.int64))


def test_mixed_phoneme_encoder_needs_sup_ids():
    enc, _ = _tiny_encoder("phoneme_mp", sup_vocab_size=6)
    with pytest.raises(ShapeError):
        enc.forward(np.array([[4, 5]]))
    out = enc.forward(np.array([[4, 5]]), sup_ids=np.array([[4, 4]]))
    assert out.shape == (1, 2, 8)


def test_sup_ids_change_the_encoding():
    enc, _ = _tiny_encoder("phoneme_mp", sup_vocab_size=6)
    tokens = np.array([[4, 5, 6]])
    a = enc.forward(tokens, sup_ids=np.array([[4, 4, 5]]))
    b = enc.forward(tokens, sup_ids=np.array([[5, 4, 5]]))
    assert not np.allclose(a, b)


# ---------------------------------------------------------------------------
# corruption


def test_mask_tokens_contracts():
    ids = np.arange(10)
    with pytest.raises(ShapeError):
        mask_tokens(ids, 0.0, 0, 20)
    with pytest.raises(ShapeError):
        mask_tokens(ids, 1.2, 0, 20)
    with pytest.raises(ShapeError):
        mask_tokens(ids, 0.15, 0, 4)


def test_mask_tokens_leaves_unselected_alone():
    ids = np.full(2000, 7, dtype=np.int64)
    corrupted, select = mask_tokens(ids, 0.15, seed=1, vocab_size=30)
    assert np.array_equal(corrupted[~select], ids[~select])
    assert corrupted.shape == ids.shape


def test_mask_tokens_mixture_proportions():
    ids = np.full(20000, 7, dtype=np.int64)
    corrupted, select = mask_tokens(ids, 0.15, seed=2, vocab_size=30)
    rate = select.mean()
    assert abs(rate - 0.15) < 0.01
    chosen = corrupted[select]
    frac_mask = np.mean(chosen == MASK)
    assert abs(frac_mask - 0.8) < 0.03
    frac_kept = np.mean(chosen == 7)
    # 10% keep plus the 1-in-26 random draws that land back on 7
    assert abs(frac_kept - 0.1) < 0.03
    replaced = chosen[(chosen != MASK) & (chosen != 7)]
    assert replaced.size
    assert replaced.min() >= 4  # specials never drawn as replacements
    assert replaced.max() < 30


def test_mask_tokens_deterministic():
    ids = np.arange(500) % 20 + 4
    a = mask_tokens(ids, 0.2, seed=9, vocab_size=40)
    b = mask_tokens(ids, 0.2, seed=9, vocab_size=40)
    c = mask_tokens(ids, 0.2, seed=10, vocab_size=40)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    assert not np.array_equal(a[0], c[0])


# ---------------------------------------------------------------------------
# cross entropy


def test_cross_entropy_hand_example():
    loss, dlogits = softmax_cross_entropy(
        np.zeros((1, 2)), np.array([0]), np.array([True]))
    assert abs(loss - np.log(2.0)) < 1e-12
    assert np.allclose(dlogits, [[-0.5, 0.5]])


def test_cross_entropy_empty_selection():
    loss, dlogits = softmax_cross_entropy(
        np.ones((3, 4)), np.zeros(3, dtype=np.int64), np.zeros(3, dtype=bool))
    assert loss == 0.0
    assert not dlogits.any()


def test_cross_entropy_ignores_unselected_rows():
    logits = np.random.default_rng(0).normal(size=(4, 5))
    select = np.array([True, False, True, False])
    _, dlogits = softmax_cross_entropy(logits, np.array([1, 0, 2, 0]), select)
    assert not dlogits[~select].any()
    assert dlogits[select].any()


def test_cross_entropy_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    logits = rng.normal(size=(5, 7))
    targets = rng.integers(0, 7, size=5)
    select = np.array([True, True, False, True, False])
    _, dlogits = softmax_cross_entropy(logits, targets, select)
    eps = 1e-6
    for i in range(5):
        for j in range(7):
            up = logits.copy(); up[i, j] += eps
            dn = logits.copy(); dn[i, j] -= eps
            lu, _ = softmax_cross_entropy(up, targets, select)
            ld, _ = softmax_cross_entropy(dn, targets, select)
            num = (lu - ld) / (2 * eps)
            assert abs(dlogits[i, j] - num) < 1e-8


def test_cross_entropy_stable_at_large_logits():
    logits = np.array([[1000.0, 0.0]])
    with np.errstate(over="raise", invalid="raise"):
        loss, _ = softmax_cross_entropy(logits, np.array([0]), np.array([True]))
    assert loss < 1e-12


# ---------------------------------------------------------------------------
# pretraining


@pytest.fixture(scope="module")
def phoneme_data():
    styles = gen_speakers(4, 2, seed=21)
    corpus = [u for u in gen_corpus(styles, 30, seed=21) if len(u.words) <= 22]
    assert len(corpus) >= 40
    ptok = PhonemeTokenizer.train(corpus, with_graphemes=True)
    sup_table, sup_vocab = train_sup_bpe(corpus, 30)
    examples = []
    for utt in corpus:
        ex = ptok.tokenize(utt.words)
        examples.append(derive_supphonemes(ex, ptok.vocab, sup_table, sup_vocab))
    return ptok, sup_vocab, examples


def _config(kind, ptok, sup_vocab):
    extra = {}
    if kind == "phoneme_mp":
        extra["sup_vocab_size"] = len(sup_vocab)
    if kind == "phoneme_pl":
        extra["grapheme_vocab_size"] = len(ptok.grapheme_vocab)
    return EncoderConfig(kind, vocab_size=len(ptok.vocab), embed_dim=16,
                         num_layers=1, d_enc=16, max_len=256, **extra)


@pytest.mark.parametrize("kind", ["phoneme", "phoneme_mp", "phoneme_pl"])
def test_pretrain_losses_improve(kind, phoneme_data):
    ptok, sup_vocab, examples = phoneme_data
    config = _config(kind, ptok, sup_vocab)
    result = pretrain(config, examples, steps=40, seed=5, batch_size=16)
    log = result.loss_log
    assert set(log) == set(OBJECTIVES_OF_KIND[kind]) | {"total"}
    assert all(len(v) == 40 for v in log.values())
    for name in OBJECTIVES_OF_KIND[kind]:
        early = np.mean(log[name][:5])
        late = np.mean(log[name][-5:])
        assert late < early, f"{name} did not improve: {early} -> {late}"


def test_pretrain_deterministic(phoneme_data):
    ptok, sup_vocab, examples = phoneme_data
    config = _config("phoneme", ptok, sup_vocab)
    a = pretrain(config, examples, steps=5, seed=8, batch_size=8)
    b = pretrain(config, examples, steps=5, seed=8, batch_size=8)
    assert set(a.values) == set(b.values)
    for key in a.values:
        assert np.array_equal(a.values[key], b.values[key])
    assert a.loss_log == b.loss_log


def test_pretrain_input_contracts(phoneme_data):
    ptok, sup_vocab, examples = phoneme_data
    config = _config("phoneme", ptok, sup_vocab)
    with pytest.raises(DataError):
        pretrain(config, [], steps=5, seed=0)
    with pytest.raises(ShapeError):
        pretrain(config, examples, steps=0, seed=0)


def test_pretrain_mp_requires_sup_lane(phoneme_data):
    ptok, sup_vocab, examples = phoneme_data
    config = _config("phoneme_mp", ptok, sup_vocab)
    from dataclasses import replace

    stripped = [replace(ex, sup_ids=None) for ex in examples]
    with pytest.raises(DataError):
        pretrain(config, stripped, steps=2, seed=0)


def test_pretrain_pl_requires_grapheme_targets(phoneme_data):
    ptok, sup_vocab, examples = phoneme_data
    config = _config("phoneme_pl", ptok, sup_vocab)
    from dataclasses import replace

    stripped = [replace(ex, grapheme_targets=None) for ex in examples]
    with pytest.raises(DataError):
        pretrain(config, stripped, steps=2, seed=0)


def test_objective_losses_fixed_point(phoneme_data):
    ptok, sup_vocab, examples = phoneme_data
    config = _config("phoneme_mp", ptok, sup_vocab)
    result = pretrain(config, examples, steps=5, seed=2, batch_size=8)
    before = {k: v.copy() for k, v in result.values.items()}
    a = objective_losses(config, result.values, examples[:24], seed=4)
    b = objective_losses(config, result.values, examples[:24], seed=4)
    assert a == b
    assert set(a) == {"mlm", "sup_mlm"}
    for key in before:  # probing must not touch the weights
        assert np.array_equal(before[key], result.values[key])
