import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from virtuoso.frontend import (
    BYTE_VOCAB_SIZE,
    LOG_EPS,
    N_MELS,
    SHIFT_SAMPLES,
    SPEECH_MASK,
    MaskPolicy,
    Scheme,
    Tokenizer,
    Vocabulary,
    detokenize,
    extract_mel,
    graphemes,
    load_mel,
    mask_spans,
    mel_band_centers,
    mel_filterbank,
    num_frames,
    save_mel,
    tokenize,
)


def test_byte_examples():
    assert tokenize("ab", Scheme.BYTE).ids == [97, 98]
    assert tokenize("", Scheme.BYTE).ids == []
    # U+00E9 is C3 A9 in UTF-8
    assert tokenize("é", Scheme.BYTE).ids == [195, 169]


@given(st.text(max_size=40))
def test_byte_roundtrip(text):
    seq = tokenize(text, Scheme.BYTE)
    assert all(0 <= i < BYTE_VOCAB_SIZE for i in seq.ids)
    assert detokenize(seq) == text


def test_grapheme_clusters_and_unk():
    vocab = Vocabulary.build(["aab", "ба"])
    assert vocab.graphemes[0] == "a"  # most frequent first
    seq = tokenize("abz", Scheme.GRAPHEME, vocab)
    assert seq.ids[-1] == vocab.unk_id
    assert detokenize(tokenize("abба", Scheme.GRAPHEME, vocab), vocab) == "abба"
    # a combining sequence is one cluster
    assert graphemes("éx") == ["é", "x"]


def test_grapheme_requires_vocab():
    with pytest.raises(ValueError):
        tokenize("a", Scheme.GRAPHEME)


def test_tokenizer_roundtrip_dict():
    tok = Tokenizer(Scheme.GRAPHEME, Vocabulary.build(["hello"]))
    again = Tokenizer.from_dict(tok.to_dict())
    assert again.vocab == tok.vocab and again.scheme is tok.scheme
    assert tok.vocab_size == 4 + 4 and tok.bos_id == 1 and tok.mask_id == 2
    assert Tokenizer(Scheme.BYTE).vocab_size == 259


def test_frame_count():
    assert num_frames(16000) == 98
    assert extract_mel(np.zeros(16000)).shape == (98, N_MELS)
    with pytest.raises(ValueError):
        extract_mel(np.zeros(399))


def test_silence_is_log_eps():
    mel = extract_mel(np.zeros(1600))
    np.testing.assert_allclose(mel, np.log(LOG_EPS), rtol=1e-6)


@pytest.mark.parametrize("band", [5, 30, 60, 75])
def test_tone_at_band_center_peaks_in_that_band(band):
    f = mel_band_centers()[band]
    t = np.arange(8000) / 16000
    mel = extract_mel(0.5 * np.sin(2 * np.pi * f * t))
    assert (mel.argmax(axis=1) == band).all()


def test_filterbank_unit_peak():
    fb = mel_filterbank()
    assert fb.shape == (80, 257)
    assert fb.min() >= 0 and fb.max() <= 1 + 1e-12


def test_shift_covariance(rng):
    x = rng.normal(size=4000)
    k = 3
    a = extract_mel(x)
    b = extract_mel(np.concatenate([np.zeros(k * SHIFT_SAMPLES), x]))
    assert b.shape[0] == a.shape[0] + k
    np.testing.assert_allclose(b[k:], a, atol=1e-6)
    assert np.allclose(b[0], np.log(LOG_EPS))


def test_mel_cache_roundtrip(tmp_path, rng):
    mel = rng.normal(size=(7, 80)).astype(np.float32)
    save_mel(tmp_path / "x.vmel", mel)
    raw = (tmp_path / "x.vmel").read_bytes()
    assert raw[:4] == b"VMEL" and len(raw) == 16 + 7 * 80 * 4
    np.testing.assert_array_equal(load_mel(tmp_path / "x.vmel"), mel)


def test_mask_examples(rng):
    assert mask_spans(0, SPEECH_MASK, rng).count == 0
    full = mask_spans(17, MaskPolicy(1.0, 1), rng)
    assert full.masked_positions.all()
    frac = mask_spans(10000, SPEECH_MASK, rng).masked_positions.mean()
    # expected coverage 1 - (1 - 0.065)^10 = 0.489
    assert 0.35 <= frac <= 0.60


@settings(max_examples=200)
@given(st.integers(0, 300), st.floats(0, 1), st.integers(1, 12), st.integers(0, 2**31))
def test_mask_union_of_spans(length, p, span, seed):
    info = mask_spans(length, MaskPolicy(p, span), np.random.default_rng(seed))
    union = np.zeros(length, dtype=bool)
    for start, n in info.spans:
        assert 0 <= start and n >= 1 and start + n <= length
        union[start : start + n] = True
    np.testing.assert_array_equal(union, info.masked_positions)
    if length:
        assert info.masked_positions.any()
