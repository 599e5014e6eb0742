"""Synthesis, recognition and voice conversion from a trained checkpoint."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .corpus import read_audio
from .frontend import (
    N_FFT,
    SHIFT_SAMPLES,
    WINDOW_SAMPLES,
    Scheme,
    TokenSequence,
    extract_mel,
    mel_filterbank,
)
from .model import UnknownLanguageError, integer_durations, to_encoder_rate, upsample
from .training import Bundle, load_bundle

GRIFFIN_LIM_ITERS = 60


class InferenceError(ValueError):
    pass


@dataclass
class SynthesisRequest:
    text: str
    speaker_id: str
    language_id: Optional[str] = None
    scheme: Optional[Scheme] = None
    reference_audio: Optional[Path] = None

    def __post_init__(self):
        if not self.text:
            raise InferenceError("synthesis text must be non-empty")
        if self.scheme is not None:
            self.scheme = Scheme(self.scheme)


@dataclass
class SynthesisResult:
    mel: np.ndarray
    durations: np.ndarray  # integer mel-rate durations per token
    waveform: Optional[np.ndarray] = None


@dataclass
class Recognition:
    tokens: TokenSequence
    text: str


def _bundle(checkpoint) -> Bundle:
    return checkpoint if isinstance(checkpoint, Bundle) else load_bundle(checkpoint)


def _as_mel(audio=None, mel=None) -> torch.Tensor:
    if mel is None:
        if audio is None:
            raise InferenceError("either audio or mel is required")
        wav = read_audio(audio) if isinstance(audio, (str, Path)) else np.asarray(audio)
        if wav.size == 0:
            raise InferenceError("empty audio")
        mel = extract_mel(wav)
    mel = torch.as_tensor(np.asarray(mel, dtype=np.float32))
    if mel.ndim != 2 or mel.shape[0] == 0:
        raise InferenceError("empty mel")
    return mel


@torch.no_grad()
def synthesize(request: SynthesisRequest, checkpoint, waveform: bool = False) -> SynthesisResult:
    """Text -> shared encoder -> speech decoder; the deepest decoder iterate is the output."""
    b = _bundle(checkpoint)
    model, tok = b.model, b.tokenizer
    model.eval()
    if request.scheme is not None and request.scheme is not tok.scheme:
        raise InferenceError(f"request scheme {request.scheme.value} does not match checkpoint scheme {tok.scheme.value}")
    if model.config.use_language_adapter:
        if request.language_id is None:
            raise UnknownLanguageError("language_id is required when the language adapter is enabled")
        model.language_index(request.language_id)
    spk = model.speaker_embed(request.speaker_id)
    ids = tok.encode(request.text).ids
    if not ids:
        raise InferenceError("text produced no tokens")
    text_emb = model.text_encode(ids, spk, request.language_id)
    durations = integer_durations(model.predict_durations(text_emb, spk))
    shared = model.shared_encode(upsample(text_emb, to_encoder_rate(durations)))
    if request.reference_audio is not None:
        ref = model.reference_encode(_as_mel(request.reference_audio))
    else:
        ref = spk.new_zeros(model.config.d_ref)
    mel = model.speech_decode(shared, spk, ref)[-1][: int(durations.sum())].numpy()
    return SynthesisResult(mel, durations, griffin_lim(mel) if waveform else None)


@torch.no_grad()
def recognize(checkpoint, audio=None, mel=None) -> Recognition:
    """Speech encoder (unmasked) -> shared encoder -> greedy transducer decoding."""
    b = _bundle(checkpoint)
    model = b.model
    model.eval()
    m = _as_mel(audio, mel)
    _, context = model.speech_encode(m)
    ids = model.rnnt_greedy_decode(model.shared_encode(context))
    seq = TokenSequence(ids, b.tokenizer.scheme)
    return Recognition(seq, b.tokenizer.decode(ids))


@torch.no_grad()
def convert_voice(checkpoint, target_speaker: str, audio=None, mel=None) -> np.ndarray:
    """Speech encoder -> shared encoder -> speech decoder with the target speaker and a zero reference."""
    b = _bundle(checkpoint)
    model = b.model
    model.eval()
    spk = model.speaker_embed(target_speaker)
    m = _as_mel(audio, mel)
    _, context = model.speech_encode(m)
    shared = model.shared_encode(context)
    ref = spk.new_zeros(model.config.d_ref)
    return model.speech_decode(shared, spk, ref)[-1].numpy()


# ---------------------------------------------------------------- vocoder stand-in

_WINDOW = np.hanning(WINDOW_SAMPLES + 1)[:-1]


def mel_to_linear(mel: np.ndarray) -> np.ndarray:
    """Least-squares inverse of the log-mel filterbank: (T, n_mels) -> magnitude (T, N_FFT/2 + 1)."""
    power = np.exp(np.asarray(mel, dtype=np.float64))
    inv = np.linalg.pinv(mel_filterbank())
    return np.sqrt(np.maximum(power @ inv.T, 0.0))


def _stft(wav: np.ndarray, frames: int) -> np.ndarray:
    idx = np.arange(frames)[:, None] * SHIFT_SAMPLES + np.arange(WINDOW_SAMPLES)
    return np.fft.rfft(wav[idx] * _WINDOW, n=N_FFT)


def _istft(spec: np.ndarray) -> np.ndarray:
    """Weighted overlap-add inverse of ``_stft`` using the same uncentred framing."""
    frames = spec.shape[0]
    n = WINDOW_SAMPLES + SHIFT_SAMPLES * (frames - 1)
    chunks = np.fft.irfft(spec, n=N_FFT)[:, :WINDOW_SAMPLES] * _WINDOW
    out, norm = np.zeros(n), np.zeros(n)
    for t in range(frames):
        sl = slice(t * SHIFT_SAMPLES, t * SHIFT_SAMPLES + WINDOW_SAMPLES)
        out[sl] += chunks[t]
        norm[sl] += _WINDOW**2
    # the window edges carry almost no energy; do not amplify them
    return out / np.maximum(norm, 0.1 * norm.max())


def griffin_lim(mel: np.ndarray, n_iter: int = GRIFFIN_LIM_ITERS, seed: int = 0) -> np.ndarray:
    """Phase reconstruction from a log-mel spectrogram; returns a waveform peaking at 0.5."""
    mag = mel_to_linear(mel)
    phase = np.exp(2j * np.pi * np.random.default_rng(seed).random(mag.shape))
    for _ in range(n_iter):
        wav = _istft(mag * phase)
        phase = np.exp(1j * np.angle(_stft(wav, mag.shape[0])))
    wav = _istft(mag * phase)
    peak = np.abs(wav).max()
    return (wav / peak * 0.5 if peak > 0 else wav).astype(np.float32)
