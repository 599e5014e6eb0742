"""Run configuration: documented schema, YAML loading and dotted-key overrides."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Iterable

import yaml


class ConfigError(ValueError):
    pass


@dataclass
class ModelSection:
    scheme: str = "GRAPHEME"
    d_model: int = 64
    n_speech_layers: int = 2
    n_text_layers: int = 2
    n_shared_layers: int = 2
    n_decoder_blocks: int = 2
    n_heads: int = 4
    n_decoder_heads: int = 8
    d_speaker: int = 64
    d_ref: int = 8
    codebook_size: int = 64
    d_code: int = 16
    conv_kernel: int = 5
    use_language_adapter: bool = False


@dataclass
class MixerSection:
    asr: int = 1
    tts: int = 2
    speech_only: int = 4
    text_only: int = 8


@dataclass
class CurriculumSection:
    paired_start_step: int = 300
    total_steps: int = 5000


@dataclass
class OptimizerSection:
    peak_lr: float = 2e-3
    warmup_steps: int = 200
    ema_decay: float = 0.999
    beta1: float = 0.9
    beta2: float = 0.98
    grad_clip: float = 5.0


@dataclass
class LossesSection:
    lambda_sd: float = 1.0
    lambda_rnnt: float = 4.0
    lambda_c: float = 1.0
    lambda_mlm_s: float = 1.0
    lambda_d: float = 1.0
    lambda_mm: float = 1.0
    lambda_mlm_t: float = 2.0
    n_distractors: int = 10
    temperature: float = 0.1


@dataclass
class BranchSection:
    p_text: float = 0.5


@dataclass
class MaskingSection:
    speech_start_prob: float = 0.065
    speech_span_len: int = 10
    text_start_prob: float = 0.065
    text_span_len: int = 2


@dataclass
class TrainingSection:
    checkpoint_every: int = 1000
    finetune_keep_duration: bool = True
    terms: str = ""


@dataclass
class RunConfig:
    seed: int = 0
    model: ModelSection = field(default_factory=ModelSection)
    mixer: MixerSection = field(default_factory=MixerSection)
    curriculum: CurriculumSection = field(default_factory=CurriculumSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    losses: LossesSection = field(default_factory=LossesSection)
    branch: BranchSection = field(default_factory=BranchSection)
    masking: MaskingSection = field(default_factory=MaskingSection)
    training: TrainingSection = field(default_factory=TrainingSection)

    def to_dict(self) -> dict:
        return _to_dict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        cfg = cls()
        for key, value in _flatten(d or {}):
            set_key(cfg, key, value)
        return cfg

    def with_overrides(self, overrides: Iterable[str]) -> "RunConfig":
        cfg = copy.deepcopy(self)
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not of the form key=value")
            key, raw = item.split("=", 1)
            set_key(cfg, key.strip(), yaml.safe_load(raw))
        return cfg


KEY_DOCS = {
    "seed": "global seed for initialisation, batch mixing, masking and branch choice",
    "model.scheme": "text tokens: GRAPHEME (vocabulary built from the manifests) or BYTE (UTF-8, V = 259)",
    "model.d_model": "embedding width of every encoder/decoder",
    "model.n_speech_layers": "conformer-lite layers in the speech encoder",
    "model.n_text_layers": "conformer-lite layers in the text encoder",
    "model.n_shared_layers": "conformer-lite layers in the shared encoder",
    "model.n_decoder_blocks": "speech decoder blocks; each emits one mel iterate",
    "model.n_heads": "attention heads in the encoders",
    "model.n_decoder_heads": "attention heads in the speech decoder (falls back to n_heads if d_model is not divisible)",
    "model.d_speaker": "speaker embedding width",
    "model.d_ref": "global reference encoder output width",
    "model.codebook_size": "entries of the frozen random-projection codebook",
    "model.d_code": "codebook vector width",
    "model.conv_kernel": "kernel width of depthwise and lightweight convolutions",
    "model.use_language_adapter": "add a per-language residual bottleneck after the text encoder",
    "mixer.asr": "paired ASR utterances per step (0 disables the regime)",
    "mixer.tts": "paired TTS utterances per step (0 disables the regime)",
    "mixer.speech_only": "untranscribed speech utterances per step (0 disables the regime)",
    "mixer.text_only": "unspoken text utterances per step (0 disables the regime)",
    "curriculum.paired_start_step": "first step that draws paired TTS/ASR parts",
    "curriculum.total_steps": "number of optimisation steps",
    "optimizer.peak_lr": "peak learning rate of the warmup / inverse-sqrt schedule",
    "optimizer.warmup_steps": "linear warmup length",
    "optimizer.ema_decay": "decay of the exponential moving average of parameters",
    "optimizer.beta1": "Adam first-moment decay",
    "optimizer.beta2": "Adam second-moment decay",
    "optimizer.grad_clip": "global gradient-norm clip (0 disables)",
    "losses.lambda_sd": "weight of the iterative spectrogram loss",
    "losses.lambda_rnnt": "weight of the transducer loss",
    "losses.lambda_c": "weight of the contrastive loss",
    "losses.lambda_mlm_s": "weight of the speech masked-prediction loss",
    "losses.lambda_d": "weight of the duration loss",
    "losses.lambda_mm": "weight of the modality matching loss",
    "losses.lambda_mlm_t": "weight of the aligned text masked-prediction loss",
    "losses.n_distractors": "distractors per masked position in the contrastive loss",
    "losses.temperature": "contrastive softmax temperature",
    "branch.p_text": "probability that a paired TTS part uses the text branch",
    "masking.speech_start_prob": "span-start probability for speech masking",
    "masking.speech_span_len": "speech mask span length (encoder frames)",
    "masking.text_start_prob": "span-start probability for text masking",
    "masking.text_span_len": "text mask span length (tokens)",
    "training.checkpoint_every": "steps between checkpoints",
    "training.finetune_keep_duration": "keep the duration loss during fine-tuning",
    "training.terms": "comma-separated subset of loss terms to optimise (empty: all active terms)",
}


def _to_dict(obj) -> Any:
    if is_dataclass(obj):
        return {f.name: _to_dict(getattr(obj, f.name)) for f in fields(obj)}
    return obj


def _flatten(d: dict, prefix: str = ""):
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            yield from _flatten(v, key + ".")
        else:
            yield key, v


def all_keys() -> list[str]:
    return [k for k, _ in _flatten(RunConfig().to_dict())]


def set_key(cfg: RunConfig, key: str, value) -> None:
    parts = key.split(".")
    target = cfg
    for p in parts[:-1]:
        if not hasattr(target, p) or not is_dataclass(getattr(target, p)):
            raise ConfigError(f"unknown config key {key!r}")
        target = getattr(target, p)
    name = parts[-1]
    if not is_dataclass(target) or name not in {f.name for f in fields(target)} or is_dataclass(getattr(target, name)):
        raise ConfigError(f"unknown config key {key!r}")
    current = getattr(target, name)
    try:
        if isinstance(current, bool):
            if not isinstance(value, bool):
                raise TypeError
        elif isinstance(current, int):
            if isinstance(value, bool) or float(value) != int(value):
                raise TypeError
            value = int(value)
        elif isinstance(current, float):
            value = float(value)
        elif isinstance(current, str):
            value = str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"config key {key!r} expects {type(current).__name__}, got {value!r}") from None
    setattr(target, name, value)


def load_config(path=None, overrides: Iterable[str] = ()) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        with open(path, encoding="utf-8") as f:
            cfg = RunConfig.from_dict(yaml.safe_load(f) or {})
    return cfg.with_overrides(overrides)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False), encoding="utf-8")


def describe_keys() -> str:
    defaults = dict(_flatten(RunConfig().to_dict()))
    width = max(map(len, defaults))
    return "\n".join(f"  {k:<{width}}  {KEY_DOCS[k]} (default: {defaults[k]})" for k in defaults)
