"""Synthetic multilingual corpora, manifests and the raw audio container.

Every token of the global inventory owns a 60 ms chord of three sinusoids.
An utterance is the concatenation of its tokens' chords, pitch- and
tempo-warped by the speaker, plus white noise at 30 dB SNR.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import yaml

from .frontend import SAMPLE_RATE, graphemes

ANY_SPKR = "ANY-SPKR"

UNIT_SAMPLES = 960  # 60 ms at 16 kHz
SNR_DB = 30.0
PEAK = 0.5

# Chord frequencies sit on the DFT grid of one 960-sample unit (16.67 Hz)
# so pitch warps map peak bins to exact multiples.
_BIN_HZ = SAMPLE_RATE / UNIT_SAMPLES
LOW_BINS = (18, 24, 30, 36)  # 300..600 Hz
MID_BINS = (60, 78, 96)  # 1.0..1.6 kHz
HIGH_BINS = (144, 180)  # 2.4, 3.0 kHz

# 20 Latin letters plus 4 Cyrillic ones; one chord per position.
DEFAULT_INVENTORY = tuple("abcdefghijklmnopqrst") + ("б", "г", "д", "ж")

AUDIO_MAGIC = b"VAU1"


class Regime(str, Enum):
    PAIRED_TTS = "PAIRED_TTS"
    PAIRED_ASR = "PAIRED_ASR"
    UNTRANSCRIBED_SPEECH = "UNTRANSCRIBED_SPEECH"
    UNSPOKEN_TEXT = "UNSPOKEN_TEXT"


REGIMES = tuple(Regime)


class ManifestError(ValueError):
    pass


class CorpusError(ValueError):
    pass


@dataclass
class LanguageSpec:
    language_id: str
    alphabet: tuple[str, ...]
    seen_in_tts: bool = True
    bigram_weights: Optional[np.ndarray] = None

    def __post_init__(self):
        self.alphabet = tuple(self.alphabet)
        if not self.alphabet:
            raise CorpusError(f"language {self.language_id}: empty alphabet")
        if self.bigram_weights is None:
            rng = np.random.default_rng(zlib.crc32(self.language_id.encode()))
            # peaked rows give each language recognisable phonotactics
            self.bigram_weights = rng.gamma(0.5, size=(len(self.alphabet), len(self.alphabet))) + 1e-3
        w = np.asarray(self.bigram_weights, dtype=np.float64)
        if w.shape != (len(self.alphabet), len(self.alphabet)):
            raise CorpusError(f"language {self.language_id}: bigram_weights must be {len(self.alphabet)}x{len(self.alphabet)}")
        if (w < 0).any() or (w.sum(axis=1) <= 0).any():
            raise CorpusError(f"language {self.language_id}: bigram rows must be non-negative with positive sum")
        self.bigram_weights = w


@dataclass
class SpeakerSpec:
    speaker_id: str
    pitch_scale: float
    tempo_scale: float
    language_id: str

    def __post_init__(self):
        for name in ("pitch_scale", "tempo_scale"):
            v = getattr(self, name)
            if not 0.5 <= v <= 2.0:
                raise CorpusError(f"speaker {self.speaker_id}: {name}={v} outside [0.5, 2.0]")
        if self.speaker_id == ANY_SPKR:
            raise CorpusError(f"{ANY_SPKR} is reserved")


@dataclass
class UtteranceRecord:
    id: str
    regime: Regime
    language_id: str
    text: Optional[str] = None
    audio_ref: Optional[str] = None
    speaker_id: str = ANY_SPKR

    def __post_init__(self):
        self.regime = Regime(self.regime)

    def validate(self) -> None:
        needs_text = self.regime in (Regime.PAIRED_TTS, Regime.PAIRED_ASR, Regime.UNSPOKEN_TEXT)
        needs_audio = self.regime in (Regime.PAIRED_TTS, Regime.PAIRED_ASR, Regime.UNTRANSCRIBED_SPEECH)
        if needs_audio and not self.audio_ref:
            raise ManifestError(f"{self.regime.value} requires audio_ref")
        if needs_text and self.text is None:
            raise ManifestError(f"{self.regime.value} requires text")
        if not needs_audio and self.audio_ref:
            raise ManifestError(f"{self.regime.value} must not carry audio_ref")
        if not needs_text and self.text is not None:
            raise ManifestError(f"{self.regime.value} must not carry text")
        if self.regime is not Regime.PAIRED_TTS and self.speaker_id != ANY_SPKR:
            raise ManifestError(f"{self.regime.value} requires speaker_id {ANY_SPKR}")

    def to_json(self) -> str:
        d = asdict(self)
        d["regime"] = self.regime.value
        return json.dumps(d, ensure_ascii=False, sort_keys=True)


# ---------------------------------------------------------------- manifest IO

_FIELDS = ("id", "regime", "text", "audio_ref", "speaker_id", "language_id")


def write_manifest(records: Sequence[UtteranceRecord], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for r in records:
            r.validate()
            f.write(r.to_json() + "\n")


def read_manifest(path) -> list[UtteranceRecord]:
    records = []
    with open(path, encoding="utf-8") as f:
        for n, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(f"line {n}: malformed record ({e.msg})") from None
            for key in ("id", "regime", "language_id"):
                if not d.get(key):
                    raise ManifestError(f"line {n}: missing field {key}")
            unknown = set(d) - set(_FIELDS)
            if unknown:
                raise ManifestError(f"line {n}: unknown field {sorted(unknown)[0]}")
            try:
                rec = UtteranceRecord(
                    id=d["id"],
                    regime=d["regime"],
                    language_id=d["language_id"],
                    text=d.get("text"),
                    audio_ref=d.get("audio_ref"),
                    speaker_id=d.get("speaker_id") or ANY_SPKR,
                )
                rec.validate()
            except ValueError as e:
                raise ManifestError(f"line {n}: {e}") from None
            records.append(rec)
    return records


def resolve_audio(record: UtteranceRecord, manifest_path) -> Path:
    p = Path(record.audio_ref)
    return p if p.is_absolute() else Path(manifest_path).parent / p


# ---------------------------------------------------------------- audio container


def write_audio(path, waveform: np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    """16-byte header (magic, uint32 rate, uint64 length), then int16 LE samples."""
    pcm = np.clip(np.round(np.asarray(waveform) * 32767.0), -32768, 32767).astype("<i2")
    with open(path, "wb") as f:
        f.write(AUDIO_MAGIC + struct.pack("<IQ", sample_rate, pcm.size))
        f.write(pcm.tobytes())


def read_audio(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != AUDIO_MAGIC:
        raise ValueError(f"{path}: not a {AUDIO_MAGIC!r} audio file")
    rate, n = struct.unpack("<IQ", raw[4:16])
    if rate != SAMPLE_RATE:
        raise ValueError(f"{path}: sample rate {rate}, expected {SAMPLE_RATE}")
    return np.frombuffer(raw[16:], dtype="<i2", count=n).astype(np.float32) / 32767.0


# ---------------------------------------------------------------- synthesis


def chord_bins(token_index: int) -> tuple[int, int, int]:
    """DFT bins (of a 960-sample unit) of the three partials for a token."""
    i = token_index
    return (
        LOW_BINS[i % len(LOW_BINS)],
        MID_BINS[(i // len(LOW_BINS)) % len(MID_BINS)],
        HIGH_BINS[(i // (len(LOW_BINS) * len(MID_BINS))) % len(HIGH_BINS)],
    )


def token_unit(token_index: int, pitch_scale: float = 1.0, tempo_scale: float = 1.0) -> np.ndarray:
    n = int(round(UNIT_SAMPLES / tempo_scale))
    t = np.arange(n) / SAMPLE_RATE
    freqs = np.array(chord_bins(token_index)) * _BIN_HZ * pitch_scale
    return np.sin(2 * np.pi * freqs[:, None] * t[None]).sum(axis=0) / 3.0


def render(
    token_indices: Sequence[int],
    speaker: SpeakerSpec,
    rng: Optional[np.random.Generator] = None,
    snr_db: float = SNR_DB,
) -> np.ndarray:
    clean = np.concatenate([token_unit(i, speaker.pitch_scale, speaker.tempo_scale) for i in token_indices])
    clean *= PEAK / max(np.abs(clean).max(), 1e-9)
    if rng is None:
        return clean
    noise_power = np.mean(clean**2) / 10 ** (snr_db / 10)
    return clean + rng.normal(0.0, np.sqrt(noise_power), clean.shape)


@dataclass
class CorpusSpec:
    languages: list[LanguageSpec]
    speakers: list[SpeakerSpec]
    sizes: dict[str, int]
    seed: int = 0
    inventory: tuple[str, ...] = DEFAULT_INVENTORY
    min_len: int = 4
    max_len: int = 8

    def __post_init__(self):
        self.inventory = tuple(self.inventory)
        for kind, ids in (
            ("language_id", [l.language_id for l in self.languages]),
            ("speaker_id", [s.speaker_id for s in self.speakers]),
        ):
            dup = {i for i in ids if ids.count(i) > 1}
            if dup:
                raise CorpusError(f"duplicate {kind}: {sorted(dup)}")
        if len(set(self.inventory)) != len(self.inventory):
            raise CorpusError("inventory contains duplicates")
        inv = set(self.inventory)
        langs = {l.language_id for l in self.languages}
        for l in self.languages:
            missing = [c for c in l.alphabet if c not in inv]
            if missing:
                raise CorpusError(f"language {l.language_id}: {missing} not in the global inventory")
        for s in self.speakers:
            if s.language_id not in langs:
                raise CorpusError(f"speaker {s.speaker_id}: home language {s.language_id} not in specs")
        for k, v in self.sizes.items():
            if k not in SIZE_KEYS:
                raise CorpusError(f"unknown size key {k!r}; expected one of {SIZE_KEYS}")
            if v < 0:
                raise CorpusError(f"size {k} must be >= 0")

    def language(self, language_id: str) -> LanguageSpec:
        for l in self.languages:
            if l.language_id == language_id:
                return l
        raise KeyError(language_id)

    def speaker(self, speaker_id: str) -> SpeakerSpec:
        for s in self.speakers:
            if s.speaker_id == speaker_id:
                return s
        raise KeyError(speaker_id)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "inventory": "".join(self.inventory),
            "min_len": self.min_len,
            "max_len": self.max_len,
            "sizes": dict(self.sizes),
            "languages": [
                {
                    "language_id": l.language_id,
                    "alphabet": "".join(l.alphabet),
                    "seen_in_tts": l.seen_in_tts,
                    "bigram_weights": l.bigram_weights.round(6).tolist(),
                }
                for l in self.languages
            ],
            "speakers": [asdict(s) for s in self.speakers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusSpec":
        languages = [
            LanguageSpec(
                language_id=l["language_id"],
                alphabet=tuple(graphemes(l["alphabet"])) if isinstance(l["alphabet"], str) else tuple(l["alphabet"]),
                seen_in_tts=bool(l.get("seen_in_tts", True)),
                bigram_weights=None if l.get("bigram_weights") is None else np.asarray(l["bigram_weights"]),
            )
            for l in d["languages"]
        ]
        speakers = [SpeakerSpec(**s) for s in d["speakers"]]
        inv = d.get("inventory", DEFAULT_INVENTORY)
        return cls(
            languages=languages,
            speakers=speakers,
            sizes=dict(d.get("sizes", {})),
            seed=int(d.get("seed", 0)),
            inventory=tuple(graphemes(inv)) if isinstance(inv, str) else tuple(inv),
            min_len=int(d.get("min_len", 4)),
            max_len=int(d.get("max_len", 8)),
        )


SIZE_KEYS = ("PAIRED_TTS", "PAIRED_ASR", "UNTRANSCRIBED_SPEECH", "UNSPOKEN_TEXT", "EVAL")


def load_corpus_spec(path) -> CorpusSpec:
    with open(path, encoding="utf-8") as f:
        return CorpusSpec.from_dict(yaml.safe_load(f))


def save_corpus_spec(spec: CorpusSpec, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(spec.to_dict(), f, allow_unicode=True, sort_keys=False)


def default_corpus_spec(seed: int = 0, scale: float = 1.0) -> CorpusSpec:
    """Three toy languages; ``C`` has no paired TTS data.

    A and B overlap on the middle of the inventory.  C borrows a few letters
    from each and owns the four Cyrillic ones, whose chords combine partials
    that the seen languages only use separately.
    """
    inv = DEFAULT_INVENTORY
    languages = [
        LanguageSpec("A", inv[0:12]),
        LanguageSpec("B", inv[8:20]),
        LanguageSpec("C", inv[2:6] + inv[14:18] + inv[20:24], seen_in_tts=False),
    ]
    speakers = [
        SpeakerSpec("spk_a1", 1.0, 1.0, "A"),
        SpeakerSpec("spk_a2", 0.8, 1.1, "A"),
        SpeakerSpec("spk_b1", 1.25, 0.9, "B"),
        SpeakerSpec("spk_b2", 0.9, 1.0, "B"),
        SpeakerSpec("spk_c1", 1.1, 1.05, "C"),
    ]
    base = {"PAIRED_TTS": 80, "PAIRED_ASR": 80, "UNTRANSCRIBED_SPEECH": 120, "UNSPOKEN_TEXT": 240, "EVAL": 20}
    sizes = {k: int(round(v * scale)) for k, v in base.items()}
    return CorpusSpec(languages, speakers, sizes, seed=seed)


def sample_text(lang: LanguageSpec, length: int, rng: np.random.Generator) -> str:
    probs = lang.bigram_weights / lang.bigram_weights.sum(axis=1, keepdims=True)
    i = int(rng.integers(len(lang.alphabet)))
    out = [lang.alphabet[i]]
    for _ in range(length - 1):
        i = int(rng.choice(len(lang.alphabet), p=probs[i]))
        out.append(lang.alphabet[i])
    return "".join(out)


def eval_speaker(spec: CorpusSpec, lang: LanguageSpec) -> SpeakerSpec:
    """Home speaker of a TTS-seen language, else one from the closest seen language.

    Closeness is alphabet overlap, mirroring the practice of borrowing a
    speaker from a similar language for zero-shot synthesis.
    """
    if lang.seen_in_tts:
        home = [s for s in spec.speakers if s.language_id == lang.language_id]
        if home:
            return home[0]
    seen = [l for l in spec.languages if l.seen_in_tts and any(s.language_id == l.language_id for s in spec.speakers)]
    if not seen:
        return spec.speakers[0]
    best = max(seen, key=lambda l: (len(set(l.alphabet) & set(lang.alphabet)), -spec.languages.index(l)))
    return next(s for s in spec.speakers if s.language_id == best.language_id)


@dataclass
class Corpus:
    """Paths written by :func:`generate_corpus`."""

    root: Path
    manifests: dict[str, Path] = field(default_factory=dict)

    def manifest(self, name: str) -> Path:
        return self.manifests[name]


MANIFEST_NAMES = {
    Regime.PAIRED_TTS: "paired_tts.jsonl",
    Regime.PAIRED_ASR: "paired_asr.jsonl",
    Regime.UNTRANSCRIBED_SPEECH: "untranscribed_speech.jsonl",
    Regime.UNSPOKEN_TEXT: "unspoken_text.jsonl",
}


def generate_corpus(spec: CorpusSpec, out_dir) -> Corpus:
    """Write one manifest per regime plus ``eval.jsonl`` and the audio they reference.

    ``sizes`` are per-language record counts.  The output is a pure function
    of ``spec``: the rng for every record is keyed by (seed, language, regime,
    index).
    """
    out = Path(out_dir)
    (out / "audio").mkdir(parents=True, exist_ok=True)
    inv_index = {c: i for i, c in enumerate(spec.inventory)}
    corpus = Corpus(out)

    def make(regime_key: str, lang: LanguageSpec, k: int):
        rng = np.random.default_rng([spec.seed, zlib.crc32(lang.language_id.encode()), SIZE_KEYS.index(regime_key), k])
        length = int(rng.integers(spec.min_len, spec.max_len + 1))
        text = sample_text(lang, length, rng)
        rid = f"{lang.language_id}-{regime_key.lower()}-{k:05d}"
        if regime_key in ("PAIRED_TTS", "EVAL"):
            if regime_key == "EVAL":
                speaker = eval_speaker(spec, lang)
            else:
                home = [s for s in spec.speakers if s.language_id == lang.language_id] or spec.speakers
                speaker = home[int(rng.integers(len(home)))]
        else:
            speaker = spec.speakers[int(rng.integers(len(spec.speakers)))]
        audio_ref = None
        if regime_key != "UNSPOKEN_TEXT":
            wav = render([inv_index[c] for c in graphemes(text)], speaker, rng)
            audio_ref = f"audio/{rid}.vau"
            write_audio(out / audio_ref, wav)
        regime = Regime.PAIRED_TTS if regime_key == "EVAL" else Regime(regime_key)
        return UtteranceRecord(
            id=rid,
            regime=regime,
            language_id=lang.language_id,
            text=None if regime is Regime.UNTRANSCRIBED_SPEECH else text,
            audio_ref=audio_ref,
            speaker_id=speaker.speaker_id if regime is Regime.PAIRED_TTS else ANY_SPKR,
        )

    for regime_key in SIZE_KEYS:
        n = spec.sizes.get(regime_key, 0)
        records = []
        for lang in spec.languages:
            if regime_key == "PAIRED_TTS" and not lang.seen_in_tts:
                continue
            records.extend(make(regime_key, lang, k) for k in range(n))
        name = "eval.jsonl" if regime_key == "EVAL" else MANIFEST_NAMES[Regime(regime_key)]
        write_manifest(records, out / name)
        corpus.manifests[regime_key] = out / name
    save_corpus_spec(spec, out / "corpus.yaml")
    return corpus


def generate_finetune_set(spec: CorpusSpec, out_dir, language_id: str, n: int,
                          speaker_id: Optional[str] = None) -> Path:
    """A small PAIRED_TTS manifest for one language, read by its evaluation speaker.

    Records are keyed apart from every split of :func:`generate_corpus`, so the
    set can be added to an existing corpus directory.
    """
    if n <= 0:
        raise CorpusError("fine-tuning set size must be positive")
    out = Path(out_dir)
    (out / "audio").mkdir(parents=True, exist_ok=True)
    lang = spec.language(language_id)
    speaker = spec.speaker(speaker_id) if speaker_id else eval_speaker(spec, lang)
    inv_index = {c: i for i, c in enumerate(spec.inventory)}
    records = []
    for k in range(n):
        rng = np.random.default_rng([spec.seed, zlib.crc32(lang.language_id.encode()), len(SIZE_KEYS), k])
        text = sample_text(lang, int(rng.integers(spec.min_len, spec.max_len + 1)), rng)
        rid = f"{lang.language_id}-finetune-{k:05d}"
        audio_ref = f"audio/{rid}.vau"
        write_audio(out / audio_ref, render([inv_index[c] for c in graphemes(text)], speaker, rng))
        records.append(UtteranceRecord(rid, Regime.PAIRED_TTS, lang.language_id, text, audio_ref, speaker.speaker_id))
    path = out / f"finetune_{lang.language_id}.jsonl"
    write_manifest(records, path)
    return path
