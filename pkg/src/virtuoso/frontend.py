"""Text and audio front ends: tokenization, log-mel extraction, span masking."""
from __future__ import annotations

import struct
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import regex

SAMPLE_RATE = 16000
WINDOW_SAMPLES = 400  # 25 ms
SHIFT_SAMPLES = 160  # 10 ms
N_FFT = 512
N_MELS = 80
F_MIN = 20.0
F_MAX = 7600.0
LOG_EPS = 1e-10

# byte scheme: 256 byte values followed by the specials
BYTE_PAD, BYTE_BOS, BYTE_MASK = 256, 257, 258
BYTE_VOCAB_SIZE = 259

GRAPHEME_SPECIALS = ("<pad>", "<bos>", "<mask>", "<unk>")


class Scheme(str, Enum):
    BYTE = "BYTE"
    GRAPHEME = "GRAPHEME"


class Vocabulary:
    """Grapheme vocabulary; ids 0..3 are PAD, BOS, MASK, UNK."""

    pad_id = 0
    bos_id = 1
    mask_id = 2
    unk_id = 3

    def __init__(self, graphemes: Sequence[str]):
        self.graphemes = tuple(graphemes)
        offset = len(GRAPHEME_SPECIALS)
        self._index = {g: i + offset for i, g in enumerate(self.graphemes)}

    @classmethod
    def build(cls, texts: Iterable[str]) -> "Vocabulary":
        counts = Counter(g for t in texts for g in graphemes(t))
        # frequency order, ties broken by code point so the result is stable
        return cls(sorted(counts, key=lambda g: (-counts[g], g)))

    @property
    def size(self) -> int:
        return len(GRAPHEME_SPECIALS) + len(self.graphemes)

    def lookup(self, g: str) -> int:
        return self._index.get(g, self.unk_id)

    def symbol(self, i: int) -> str:
        if i < len(GRAPHEME_SPECIALS):
            return GRAPHEME_SPECIALS[i]
        return self.graphemes[i - len(GRAPHEME_SPECIALS)]

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.graphemes == other.graphemes

    def __repr__(self):
        return f"Vocabulary({''.join(self.graphemes)!r})"


def graphemes(text: str) -> list[str]:
    return regex.findall(r"\X", text)


@dataclass
class TokenSequence:
    ids: list[int]
    scheme: Scheme
    language_id: Optional[str] = None

    def __len__(self) -> int:
        return len(self.ids)


def vocab_size(scheme: Scheme, vocab: Optional[Vocabulary] = None) -> int:
    if Scheme(scheme) is Scheme.BYTE:
        return BYTE_VOCAB_SIZE
    if vocab is None:
        raise ValueError("GRAPHEME scheme requires a vocabulary")
    return vocab.size


def special_ids(scheme: Scheme, vocab: Optional[Vocabulary] = None) -> dict[str, int]:
    if Scheme(scheme) is Scheme.BYTE:
        return {"pad": BYTE_PAD, "bos": BYTE_BOS, "mask": BYTE_MASK}
    return {"pad": Vocabulary.pad_id, "bos": Vocabulary.bos_id, "mask": Vocabulary.mask_id}


def tokenize(
    text: str,
    scheme: Scheme = Scheme.GRAPHEME,
    vocab: Optional[Vocabulary] = None,
    language_id: Optional[str] = None,
) -> TokenSequence:
    scheme = Scheme(scheme)
    if scheme is Scheme.BYTE:
        return TokenSequence(list(text.encode("utf-8")), scheme, language_id)
    if vocab is None:
        raise ValueError("GRAPHEME scheme requires a vocabulary")
    return TokenSequence([vocab.lookup(g) for g in graphemes(text)], scheme, language_id)


def detokenize(tokens: TokenSequence, vocab: Optional[Vocabulary] = None) -> str:
    """Inverse of :func:`tokenize`; special ids are dropped."""
    if Scheme(tokens.scheme) is Scheme.BYTE:
        return bytes(i for i in tokens.ids if i < 256).decode("utf-8", errors="replace")
    if vocab is None:
        raise ValueError("GRAPHEME scheme requires a vocabulary")
    n_special = len(GRAPHEME_SPECIALS)
    return "".join(vocab.symbol(i) for i in tokens.ids if i >= n_special)


# ---------------------------------------------------------------- mel features


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_centers(n_mels: int = N_MELS, f_min: float = F_MIN, f_max: float = F_MAX) -> np.ndarray:
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    return edges[1:-1]


def mel_filterbank(
    n_mels: int = N_MELS,
    n_fft: int = N_FFT,
    sample_rate: int = SAMPLE_RATE,
    f_min: float = F_MIN,
    f_max: float = F_MAX,
) -> np.ndarray:
    """Triangular filters with unit peak, shape (n_mels, n_fft // 2 + 1)."""
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None] - lower) / (center - lower)
    falling = (upper - freqs[None]) / (upper - center)
    return np.clip(np.minimum(rising, falling), 0.0, None)


_FBANK = mel_filterbank()
_WINDOW = np.hanning(WINDOW_SAMPLES + 1)[:-1]  # periodic Hann


def num_frames(num_samples: int) -> int:
    if num_samples < WINDOW_SAMPLES:
        raise ValueError(f"audio has {num_samples} samples, shorter than one {WINDOW_SAMPLES}-sample window")
    return (num_samples - WINDOW_SAMPLES) // SHIFT_SAMPLES + 1


def power_spectrogram(waveform: np.ndarray) -> np.ndarray:
    x = np.asarray(waveform, dtype=np.float64)
    n = num_frames(len(x))
    frames = np.lib.stride_tricks.sliding_window_view(x, WINDOW_SAMPLES)[::SHIFT_SAMPLES][:n]
    spec = np.fft.rfft(frames * _WINDOW, n=N_FFT, axis=-1)
    return spec.real**2 + spec.imag**2


def extract_mel(waveform: np.ndarray) -> np.ndarray:
    """Log-mel spectrogram of a 16 kHz mono waveform, shape (T, 80), float32."""
    energy = power_spectrogram(waveform) @ _FBANK.T
    return np.log(np.maximum(energy, LOG_EPS)).astype(np.float32)


MEL_MAGIC = b"VMEL"


def save_mel(path, mel: np.ndarray) -> None:
    """Header: magic, uint32 n_mels, uint64 frames (little endian); then row-major float32."""
    mel = np.ascontiguousarray(mel, dtype="<f4")
    with open(path, "wb") as f:
        f.write(MEL_MAGIC + struct.pack("<IQ", mel.shape[1], mel.shape[0]))
        f.write(mel.tobytes())


def load_mel(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != MEL_MAGIC:
        raise ValueError(f"{path}: not a mel feature file")
    n_mels, frames = struct.unpack("<IQ", raw[4:16])
    return np.frombuffer(raw[16:], dtype="<f4").reshape(frames, n_mels).copy()


# ---------------------------------------------------------------- masking


@dataclass
class MaskPolicy:
    start_prob: float = 0.065
    span_len: int = 10


SPEECH_MASK = MaskPolicy(0.065, 10)
TEXT_MASK = MaskPolicy(0.065, 2)


@dataclass
class MaskInfo:
    masked_positions: np.ndarray
    spans: list[tuple[int, int]] = field(default_factory=list)

    @property
    def count(self) -> int:
        return int(self.masked_positions.sum())


def mask_spans(length: int, policy: MaskPolicy, rng: np.random.Generator) -> MaskInfo:
    """Sample span starts with ``policy.start_prob`` and mark ``span_len`` positions from each."""
    if length < 0:
        raise ValueError("length must be non-negative")
    mask = np.zeros(length, dtype=bool)
    if length == 0:
        return MaskInfo(mask, [])
    starts = np.flatnonzero(rng.random(length) < policy.start_prob)
    if starts.size == 0:
        starts = np.array([rng.integers(length)])
    spans = []
    for s in starts:
        n = min(policy.span_len, length - int(s))
        mask[s : s + n] = True
        spans.append((int(s), n))
    return MaskInfo(mask, spans)


def no_mask(length: int) -> MaskInfo:
    return MaskInfo(np.zeros(length, dtype=bool), [])


def mask_from_positions(positions: Sequence[int], length: int) -> MaskInfo:
    mask = np.zeros(length, dtype=bool)
    mask[list(positions)] = True
    return MaskInfo(mask, [(int(p), 1) for p in positions])


@dataclass
class Tokenizer:
    """Binds a scheme to its vocabulary and special ids."""

    scheme: Scheme
    vocab: Optional[Vocabulary] = None

    def __post_init__(self):
        self.scheme = Scheme(self.scheme)
        if self.scheme is Scheme.GRAPHEME and self.vocab is None:
            raise ValueError("GRAPHEME scheme requires a vocabulary")

    @property
    def vocab_size(self) -> int:
        return vocab_size(self.scheme, self.vocab)

    @property
    def bos_id(self) -> int:
        return special_ids(self.scheme, self.vocab)["bos"]

    @property
    def mask_id(self) -> int:
        return special_ids(self.scheme, self.vocab)["mask"]

    def encode(self, text: str, language_id: Optional[str] = None) -> TokenSequence:
        return tokenize(text, self.scheme, self.vocab, language_id)

    def decode(self, ids: Sequence[int]) -> str:
        return detokenize(TokenSequence(list(ids), self.scheme), self.vocab)

    def to_dict(self) -> dict:
        return {"scheme": self.scheme.value, "vocab": None if self.vocab is None else list(self.vocab.graphemes)}

    @classmethod
    def from_dict(cls, d: dict) -> "Tokenizer":
        vocab = None if d.get("vocab") is None else Vocabulary(d["vocab"])
        return cls(Scheme(d["scheme"]), vocab)
