import numpy as np
import pytest
import torch

from virtuoso.corpus import read_audio, resolve_audio
from virtuoso.frontend import SAMPLE_RATE, extract_mel
from virtuoso.inference import (
    InferenceError,
    SynthesisRequest,
    convert_voice,
    griffin_lim,
    recognize,
    synthesize,
)
from virtuoso.model import UnknownLanguageError, UnknownSpeakerError, Virtuoso
from virtuoso.training import Bundle


def test_request_validation():
    with pytest.raises(InferenceError):
        SynthesisRequest("", "s1")
    with pytest.raises(ValueError):
        SynthesisRequest("ab", "s1", scheme="PHONEME")


def test_synthesis_shape_and_determinism(overfit):
    r = overfit.items[0][0]
    a = synthesize(SynthesisRequest(r.text, r.speaker_id), overfit.bundle)
    b = synthesize(SynthesisRequest(r.text, r.speaker_id), overfit.run_dir)
    assert a.mel.shape == (int(a.durations.sum()), 80)
    assert np.array_equal(a.mel, b.mel)


def test_synthesis_reproduces_overfit_target(overfit):
    for r, mel, _, d in overfit.items:
        res = synthesize(SynthesisRequest(r.text, r.speaker_id), overfit.bundle)
        assert res.durations.tolist() == d.tolist()
        assert np.abs(res.mel - mel.numpy()).mean() < 0.1


def test_synthesis_errors(overfit):
    r = overfit.items[0][0]
    with pytest.raises(UnknownSpeakerError, match="known speakers"):
        synthesize(SynthesisRequest(r.text, "nobody"), overfit.bundle)
    with pytest.raises(InferenceError, match="scheme"):
        synthesize(SynthesisRequest(r.text, r.speaker_id, scheme="BYTE"), overfit.bundle)


def test_adapter_requires_known_language(overfit):
    c = overfit.bundle.model.config
    from dataclasses import replace

    m = Virtuoso(replace(c, use_language_adapter=True))
    b = Bundle(m, overfit.bundle.tokenizer)
    r = overfit.items[0][0]
    with pytest.raises(UnknownLanguageError):
        synthesize(SynthesisRequest(r.text, r.speaker_id, "Z"), b)
    with pytest.raises(UnknownLanguageError):
        synthesize(SynthesisRequest(r.text, r.speaker_id), b)
    assert synthesize(SynthesisRequest(r.text, r.speaker_id, r.language_id), b).mel.shape[1] == 80


def test_reference_audio_changes_output(overfit):
    r = overfit.items[0][0]
    plain = synthesize(SynthesisRequest(r.text, r.speaker_id), overfit.bundle)
    styled = synthesize(SynthesisRequest(r.text, r.speaker_id, reference_audio=resolve_audio(r, overfit.manifest)),
                        overfit.bundle)
    assert plain.mel.shape == styled.mel.shape and not np.array_equal(plain.mel, styled.mel)


def test_recognize_overfit_utterances(overfit):
    for r, mel, ids, _ in overfit.items:
        assert recognize(overfit.bundle, mel=mel).tokens.ids == ids
        out = recognize(overfit.bundle, audio=resolve_audio(r, overfit.manifest))
        assert out.text == r.text
        assert recognize(overfit.run_dir, audio=resolve_audio(r, overfit.manifest)).text == r.text


def test_recognize_empty_audio_is_an_error(overfit):
    with pytest.raises(InferenceError):
        recognize(overfit.bundle, audio=np.zeros(0))
    with pytest.raises(InferenceError):
        recognize(overfit.bundle)


def test_voice_conversion(overfit):
    r, mel, _, _ = overfit.items[0]
    same = convert_voice(overfit.bundle, r.speaker_id, mel=mel)
    assert same.shape == (2 * -(-mel.shape[0] // 2), 80)
    assert np.abs(same[: mel.shape[0]] - mel.numpy()).mean() < 0.15
    others = [s for s in overfit.bundle.model.config.speakers if s != r.speaker_id] + ["ANY-SPKR"]
    other = convert_voice(overfit.bundle, others[0], mel=mel)
    assert np.abs(other - same).mean() > 0
    with pytest.raises(UnknownSpeakerError):
        convert_voice(overfit.bundle, "nobody", mel=mel)


def test_odd_length_voice_conversion_frames(overfit):
    mel = overfit.items[0][1][:37]
    assert convert_voice(overfit.bundle, overfit.items[0][0].speaker_id, mel=mel).shape == (38, 80)


# ---------------------------------------------------------------- path isolation


def _forbid(monkeypatch, model, names):
    for name in names:
        def boom(*a, _n=name, **k):
            raise AssertionError(f"{_n} must not run on this path")

        monkeypatch.setattr(model, name, boom)


def test_tts_never_touches_speech_encoder(overfit, monkeypatch):
    m = Virtuoso(overfit.bundle.model.config)
    m.load_state_dict(overfit.bundle.model.state_dict())
    _forbid(monkeypatch, m, ["speech_encoder", "speech_encode", "rnnt_greedy_decode", "lattice"])
    r = overfit.items[0][0]
    synthesize(SynthesisRequest(r.text, r.speaker_id), Bundle(m, overfit.bundle.tokenizer))


def test_asr_never_touches_speech_decoder(overfit, monkeypatch):
    m = Virtuoso(overfit.bundle.model.config)
    m.load_state_dict(overfit.bundle.model.state_dict())
    _forbid(monkeypatch, m, ["speech_decoder", "speech_decode", "reference_encoder", "text_encoder"])
    recognize(Bundle(m, overfit.bundle.tokenizer), mel=overfit.items[0][1])


def test_paths_are_pure(overfit):
    r, mel, _, _ = overfit.items[1]
    before = {k: v.clone() for k, v in overfit.bundle.model.state_dict().items()}
    recognize(overfit.bundle, mel=mel)
    convert_voice(overfit.bundle, r.speaker_id, mel=mel)
    synthesize(SynthesisRequest(r.text, r.speaker_id), overfit.bundle)
    for k, v in overfit.bundle.model.state_dict().items():
        assert torch.equal(v, before[k]), k


# ---------------------------------------------------------------- Griffin-Lim


def test_griffin_lim_round_trip(tiny_corpus):
    from virtuoso.corpus import read_manifest

    man = tiny_corpus.manifests["PAIRED_TTS"]
    wav = read_audio(resolve_audio(read_manifest(man)[0], man))
    mel = extract_mel(wav)
    out = griffin_lim(mel, n_iter=30)
    assert np.abs(out).max() == pytest.approx(0.5, abs=1e-6)
    back = extract_mel(out)
    t = min(len(back), len(mel))
    loud = mel[:t] > np.percentile(mel, 75)
    # the magnitude envelope survives phase reconstruction where there is energy
    assert np.abs(back[:t] - mel[:t])[loud].mean() < 1.5
    assert abs(len(out) - len(wav)) <= SAMPLE_RATE // 100


def test_griffin_lim_deterministic():
    mel = np.random.default_rng(0).normal(-4, 1, size=(20, 80)).astype(np.float32)
    assert np.array_equal(griffin_lim(mel, n_iter=5, seed=1), griffin_lim(mel, n_iter=5, seed=1))
