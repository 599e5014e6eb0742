"""Speech encoder, text encoder, shared encoder, RNN-T decoder, speech decoder.

All networks run on padded batches ``(B, L, d)`` with an explicit length
vector; padded positions are zeroed before every convolution so a batched
call matches the per-utterance call.  The per-utterance methods
(``speech_encode``, ``text_encode`` ...) wrap the batched ones with B = 1
and take/return unpadded ``(L, d)`` tensors.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .corpus import ANY_SPKR
from .frontend import MaskInfo

SUBSAMPLE = 2
# fixed affine normalisation of log-mel features (desk corpus statistics)
MEL_MEAN = -4.0
MEL_STD = 4.0


class UnknownSpeakerError(KeyError):
    pass


class UnknownLanguageError(KeyError):
    pass


@dataclass
class ModelConfig:
    vocab_size: int
    bos_id: int
    mask_id: int
    speakers: tuple[str, ...] = ()
    languages: tuple[str, ...] = ()
    d_model: int = 64
    n_speech_layers: int = 2
    n_text_layers: int = 2
    n_shared_layers: int = 2
    n_decoder_blocks: int = 2
    n_heads: int = 4
    n_decoder_heads: int = 8
    n_mels: int = 80
    d_speaker: int = 64
    d_ref: int = 8
    codebook_size: int = 64
    d_code: int = 16
    conv_kernel: int = 5
    use_language_adapter: bool = False
    seed: int = 0

    def __post_init__(self):
        self.speakers = tuple(self.speakers)
        self.languages = tuple(self.languages)
        counts = dict(
            d_model=self.d_model,
            n_speech_layers=self.n_speech_layers,
            n_text_layers=self.n_text_layers,
            n_shared_layers=self.n_shared_layers,
            n_decoder_blocks=self.n_decoder_blocks,
            n_heads=self.n_heads,
            vocab_size=self.vocab_size,
            codebook_size=self.codebook_size,
        )
        for k, v in counts.items():
            if v <= 0:
                raise ValueError(f"{k} must be positive")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.use_language_adapter and (not self.languages or self.d_model < 4):
            raise ValueError("language adapter needs languages and d_model >= 4")
        if ANY_SPKR in self.speakers:
            raise ValueError(f"{ANY_SPKR} is implicit and must not be listed")

    @property
    def n_languages(self) -> int:
        return len(self.languages)

    @property
    def decoder_heads(self) -> int:
        return self.n_decoder_heads if self.d_model % self.n_decoder_heads == 0 else self.n_heads

    @property
    def blank_id(self) -> int:
        return self.vocab_size

    def to_dict(self) -> dict:
        d = asdict(self)
        d["speakers"] = list(self.speakers)
        d["languages"] = list(self.languages)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def length_mask(lengths: torch.Tensor, max_len: int) -> torch.Tensor:
    return torch.arange(max_len, device=lengths.device)[None, :] < lengths[:, None]


def pad_batch(seqs: Sequence[torch.Tensor]) -> tuple[torch.Tensor, torch.Tensor]:
    lengths = torch.tensor([s.shape[0] for s in seqs], dtype=torch.long)
    max_len = int(lengths.max()) if len(seqs) else 0
    out = seqs[0].new_zeros((len(seqs), max_len) + tuple(seqs[0].shape[1:]))
    for i, s in enumerate(seqs):
        out[i, : s.shape[0]] = s
    return out, lengths


def _uniform_(t: torch.Tensor, fan_in: int) -> torch.Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        return t.uniform_(-bound, bound)


# ---------------------------------------------------------------- blocks


class SelfAttention(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)

    def forward(self, x, valid):
        B, L, d = x.shape
        q, k, v = self.qkv(x).view(B, L, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // self.heads)
        # large finite negative keeps all-padded rows NaN-free
        scores = scores.masked_fill(~valid[:, None, None, :], -1e9)
        y = (scores.softmax(-1) @ v).transpose(1, 2).reshape(B, L, d)
        return self.out(y)


class ConvModule(nn.Module):
    """Pointwise-GLU, depthwise conv, SiLU, pointwise."""

    def __init__(self, d: int, kernel: int):
        super().__init__()
        self.norm = nn.LayerNorm(d)
        self.pw_in = nn.Linear(d, 2 * d)
        self.dw = nn.Conv1d(d, d, kernel, padding=kernel // 2, groups=d)
        self.pw_out = nn.Linear(d, d)

    def forward(self, x, valid):
        h = F.glu(self.pw_in(self.norm(x)), dim=-1) * valid[..., None]
        h = F.silu(self.dw(h.transpose(1, 2)).transpose(1, 2))
        return self.pw_out(h)


class FeedForward(nn.Module):
    def __init__(self, d: int, mult: int = 4):
        super().__init__()
        self.norm = nn.LayerNorm(d)
        self.fc1 = nn.Linear(d, mult * d)
        self.fc2 = nn.Linear(mult * d, d)

    def forward(self, x):
        return self.fc2(F.silu(self.fc1(self.norm(x))))


class ConformerLite(nn.Module):
    def __init__(self, d: int, heads: int, kernel: int):
        super().__init__()
        self.attn_norm = nn.LayerNorm(d)
        self.attn = SelfAttention(d, heads)
        self.conv = ConvModule(d, kernel)
        self.ff = FeedForward(d)
        self.out_norm = nn.LayerNorm(d)

    def forward(self, x, valid):
        x = x + self.attn(self.attn_norm(x), valid)
        x = x + self.conv(x, valid)
        x = x + self.ff(x)
        return self.out_norm(x) * valid[..., None]


class Stack(nn.Module):
    def __init__(self, n: int, d: int, heads: int, kernel: int):
        super().__init__()
        self.layers = nn.ModuleList(ConformerLite(d, heads, kernel) for _ in range(n))

    def forward(self, x, valid):
        x = x * valid[..., None]
        for layer in self.layers:
            x = layer(x, valid)
        return x


class LightweightConv(nn.Module):
    """Depthwise convolution whose kernels are softmax-normalised and shared by channel groups."""

    def __init__(self, d: int, heads: int, kernel: int):
        super().__init__()
        self.heads, self.kernel = heads, kernel
        self.weight = nn.Parameter(torch.empty(heads, kernel))
        _uniform_(self.weight, kernel)

    def forward(self, x, valid):
        d = x.shape[-1]
        w = self.weight.softmax(-1).repeat_interleave(d // self.heads, dim=0)[:, None, :]
        h = (x * valid[..., None]).transpose(1, 2)
        return F.conv1d(h, w, padding=self.kernel // 2, groups=d).transpose(1, 2)


class DecoderBlock(nn.Module):
    def __init__(self, d: int, heads: int, kernel: int, n_mels: int):
        super().__init__()
        self.attn_norm = nn.LayerNorm(d)
        self.attn = SelfAttention(d, heads)
        self.conv_norm = nn.LayerNorm(d)
        self.conv_in = nn.Linear(d, 2 * d)
        self.lconv = LightweightConv(d, heads, kernel)
        self.conv_out = nn.Linear(d, d)
        self.ff = FeedForward(d)
        self.out_norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, n_mels)

    def forward(self, x, valid):
        x = x + self.attn(self.attn_norm(x), valid)
        h = F.glu(self.conv_in(self.conv_norm(x)), dim=-1)
        x = x + self.conv_out(self.lconv(h, valid))
        x = x + self.ff(x)
        x = self.out_norm(x) * valid[..., None]
        return x, self.head(x)


# ---------------------------------------------------------------- the model


class Virtuoso(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = c = config
        d = c.d_model
        torch.manual_seed(c.seed)

        # speech encoder
        self.subsample1 = nn.Conv1d(c.n_mels, d, 3, stride=SUBSAMPLE, padding=1)
        self.subsample2 = nn.Conv1d(d, d, 3, padding=1)
        self.latent_norm = nn.LayerNorm(d)
        self.speech_mask_emb = nn.Parameter(_uniform_(torch.empty(d), 1))
        self.speech_stack = Stack(c.n_speech_layers, d, c.n_heads, c.conv_kernel)

        # text encoder
        self.token_emb = nn.Embedding(c.vocab_size, d)
        self.text_in = nn.Linear(d + c.d_speaker, d)
        self.text_stack = Stack(c.n_text_layers, d, c.n_heads, c.conv_kernel)
        if c.use_language_adapter:
            bottleneck = max(d // 4, 1)
            self.adapter_down = nn.Parameter(_uniform_(torch.empty(c.n_languages, d, bottleneck), d))
            self.adapter_up = nn.Parameter(torch.zeros(c.n_languages, bottleneck, d))

        # duration predictor
        self.dur_in = nn.Linear(d + c.d_speaker, d)
        self.dur_conv = nn.Conv1d(d, d, 3, padding=1)
        self.dur_head = nn.Linear(d, 1)

        self.speaker_table = nn.Embedding(len(c.speakers) + 1, c.d_speaker)  # row 0: ANY-SPKR

        self.shared_stack = Stack(c.n_shared_layers, d, c.n_heads, c.conv_kernel)

        # RNN-T
        self.pred_emb = nn.Embedding(c.vocab_size, d)
        self.pred_rnn = nn.LSTM(d, d, num_layers=1, batch_first=True)
        self.joint_enc = nn.Linear(d, d)
        self.joint_pred = nn.Linear(d, d, bias=False)
        self.joint_out = nn.Linear(d, c.vocab_size + 1)

        # reference encoder
        self.ref_conv1 = nn.Conv1d(c.n_mels, d, 3, padding=1)
        self.ref_conv2 = nn.Conv1d(d, d, 3, padding=1)
        self.ref_proj = nn.Linear(d, c.d_ref)

        # speech decoder
        self.dec_in = nn.Linear(d + c.d_speaker + c.d_ref, d)
        self.dec_upsample = nn.Linear(d, d)
        self.dec_blocks = nn.ModuleList(
            DecoderBlock(d, c.decoder_heads, c.conv_kernel, c.n_mels) for _ in range(c.n_decoder_blocks)
        )

        # self-supervised heads
        self.contrastive_proj = nn.Linear(d, c.d_code)
        self.mlm_speech_head = nn.Linear(d, c.codebook_size)
        self.mlm_text_head = nn.Linear(d, c.vocab_size)

        for emb in (self.token_emb, self.speaker_table, self.pred_emb):
            _uniform_(emb.weight, 1)
        with torch.no_grad():
            self.dur_head.bias.fill_(math.log(6.0))

        # frozen random-projection quantiser
        g = torch.Generator().manual_seed(c.seed + 7919)
        d_in = SUBSAMPLE * c.n_mels
        projection = torch.randn(d_in, c.d_code, generator=g) / math.sqrt(d_in)
        codebook = F.normalize(torch.randn(c.codebook_size, c.d_code, generator=g), dim=-1)
        self.register_buffer("quantizer_projection", projection)
        self.register_buffer("codebook", codebook)

    # ------------------------------------------------------------ lookups

    def speaker_index(self, speaker_id: str) -> int:
        if speaker_id == ANY_SPKR:
            return 0
        try:
            return self.config.speakers.index(speaker_id) + 1
        except ValueError:
            known = ", ".join((ANY_SPKR,) + self.config.speakers)
            raise UnknownSpeakerError(f"unknown speaker {speaker_id!r}; known speakers: {known}") from None

    def speaker_embed(self, speaker_id: str) -> torch.Tensor:
        return self.speaker_table.weight[self.speaker_index(speaker_id)]

    def speaker_embeds(self, speaker_ids: Sequence[str]) -> torch.Tensor:
        idx = torch.tensor([self.speaker_index(s) for s in speaker_ids], dtype=torch.long)
        return self.speaker_table(idx)

    def language_index(self, language_id: str) -> int:
        try:
            return self.config.languages.index(language_id)
        except ValueError:
            raise UnknownLanguageError(
                f"unknown language {language_id!r}; known: {', '.join(self.config.languages)}"
            ) from None

    # ------------------------------------------------------------ batched networks

    def speech_encoder(self, mel, lengths, masks: Optional[torch.Tensor] = None):
        """mel (B, T, n_mels) -> latent, context (B, ceil(T/2), d) and encoder lengths."""
        valid_in = length_mask(lengths, mel.shape[1])
        x = ((mel - MEL_MEAN) / MEL_STD) * valid_in[..., None]
        enc_len = (lengths + SUBSAMPLE - 1) // SUBSAMPLE
        h = F.silu(self.subsample1(x.transpose(1, 2)))
        valid = length_mask(enc_len, h.shape[2])
        h = h * valid[:, None, :]
        latent = self.latent_norm(self.subsample2(h).transpose(1, 2)) * valid[..., None]
        x = latent
        if masks is not None:
            x = torch.where(masks[..., None], self.speech_mask_emb.to(x.dtype), x)
        return latent, self.speech_stack(x, valid), enc_len

    def text_encoder(self, ids, lengths, spk, lang_idx: Optional[torch.Tensor] = None):
        """ids (B, U), spk (B, d_speaker) -> (B, U, d)."""
        valid = length_mask(lengths, ids.shape[1])
        e = self.token_emb(ids)
        x = self.text_in(torch.cat([e, spk[:, None, :].expand(-1, ids.shape[1], -1)], dim=-1))
        h = self.text_stack(x, valid)
        if self.config.use_language_adapter and lang_idx is not None:
            down = self.adapter_down[lang_idx]
            up = self.adapter_up[lang_idx]
            h = h + torch.relu(h @ down) @ up
            h = h * valid[..., None]
        return h

    def duration_predictor(self, text_emb, lengths, spk):
        """Strictly positive mel-frame durations, (B, U)."""
        valid = length_mask(lengths, text_emb.shape[1])
        x = torch.cat([text_emb, spk[:, None, :].expand(-1, text_emb.shape[1], -1)], dim=-1)
        h = F.silu(self.dur_in(x)) * valid[..., None]
        h = F.silu(self.dur_conv(h.transpose(1, 2)).transpose(1, 2))
        return torch.exp(self.dur_head(h).squeeze(-1))

    def shared_encoder(self, x, lengths):
        return self.shared_stack(x, length_mask(lengths, x.shape[1]))

    def prediction_network(self, ids):
        """ids (B, U) -> (B, U + 1, d); position 0 is the BOS state."""
        bos = torch.full((ids.shape[0], 1), self.config.bos_id, dtype=torch.long)
        out, _ = self.pred_rnn(self.pred_emb(torch.cat([bos, ids], dim=1)))
        return out

    def joint(self, enc, pred):
        """enc (..., d) and pred (..., d) broadcastable -> logits (..., V + 1)."""
        return self.joint_out(torch.tanh(self.joint_enc(enc) + self.joint_pred(pred)))

    def lattice(self, shared, ids):
        """(B, T', d), (B, U) -> logits (B, T', U + 1, V + 1)."""
        pred = self.prediction_network(ids)
        return self.joint(shared[:, :, None, :], pred[:, None, :, :])

    def reference_encoder(self, mel, lengths):
        valid = length_mask(lengths, mel.shape[1])
        x = (((mel - MEL_MEAN) / MEL_STD) * valid[..., None]).transpose(1, 2)
        h = F.silu(self.ref_conv1(x)) * valid[:, None, :]
        h = F.silu(self.ref_conv2(h)) * valid[:, None, :]
        pooled = h.sum(-1) / lengths.clamp(min=1)[:, None].to(h.dtype)
        return self.ref_proj(pooled)

    def speech_decoder(self, shared, lengths, spk, ref):
        """-> list of n_decoder_blocks mel iterates, each (B, 2 L, n_mels)."""
        L = shared.shape[1]
        cond = torch.cat(
            [shared, spk[:, None, :].expand(-1, L, -1), ref[:, None, :].expand(-1, L, -1)], dim=-1
        )
        h = self.dec_in(cond)
        h = self.dec_upsample(h.repeat_interleave(SUBSAMPLE, dim=1))
        valid = length_mask(lengths * SUBSAMPLE, h.shape[1])
        h = h * valid[..., None]
        iterates = []
        for block in self.dec_blocks:
            h, mel = block(h, valid)
            iterates.append((mel * MEL_STD + MEL_MEAN) * valid[..., None])
        return iterates

    # ------------------------------------------------------------ per-utterance API

    def speech_encode(self, mel: torch.Tensor, mask: Optional[MaskInfo] = None):
        if mel.shape[0] == 0:
            raise ValueError("empty mel")
        masks = None
        if mask is not None:
            masks = torch.as_tensor(mask.masked_positions, dtype=torch.bool)[None]
        latent, context, _ = self.speech_encoder(mel[None], torch.tensor([mel.shape[0]]), masks)
        return latent[0], context[0]

    def text_encode(self, ids: Sequence[int], spk: torch.Tensor, language_id: Optional[str] = None):
        if len(ids) == 0:
            return spk.new_zeros((0, self.config.d_model))
        ids_t = torch.as_tensor(list(ids), dtype=torch.long)
        if ids_t.max() >= self.config.vocab_size:
            raise ValueError("token id out of vocabulary range")
        lang = None
        if self.config.use_language_adapter and language_id is not None:
            lang = torch.tensor([self.language_index(language_id)])
        return self.text_encoder(ids_t[None], torch.tensor([len(ids)]), spk[None], lang)[0]

    def predict_durations(self, text_emb: torch.Tensor, spk: torch.Tensor) -> torch.Tensor:
        if text_emb.shape[0] == 0:
            raise ValueError("empty text embedding")
        return self.duration_predictor(text_emb[None], torch.tensor([text_emb.shape[0]]), spk[None])[0]

    def shared_encode(self, emb: torch.Tensor) -> torch.Tensor:
        if emb.shape[0] == 0:
            return emb
        return self.shared_encoder(emb[None], torch.tensor([emb.shape[0]]))[0]

    def rnnt_forward(self, shared: torch.Tensor, ids: Sequence[int]) -> torch.Tensor:
        if shared.shape[0] == 0:
            raise ValueError("empty shared sequence")
        ids_t = torch.as_tensor(list(ids), dtype=torch.long).reshape(1, -1)
        return self.lattice(shared[None], ids_t)[0]

    def reference_encode(self, mel: torch.Tensor) -> torch.Tensor:
        if mel.shape[0] == 0:
            raise ValueError("empty mel")
        return self.reference_encoder(mel[None], torch.tensor([mel.shape[0]]))[0]

    def speech_decode(self, shared: torch.Tensor, spk: torch.Tensor, ref: torch.Tensor) -> list[torch.Tensor]:
        its = self.speech_decoder(shared[None], torch.tensor([shared.shape[0]]), spk[None], ref[None])
        return [m[0] for m in its]

    @torch.no_grad()
    def rnnt_greedy_decode(self, shared: torch.Tensor, max_symbols_per_frame: int = 4) -> list[int]:
        if shared.shape[0] == 0:
            raise ValueError("empty shared sequence")
        blank = self.config.blank_id
        enc = self.joint_enc(shared)
        emb = self.pred_emb(torch.tensor([[self.config.bos_id]]))
        g, state = self.pred_rnn(emb)
        g = self.joint_pred(g[0, 0])
        out: list[int] = []
        for t in range(shared.shape[0]):
            for _ in range(max_symbols_per_frame):
                k = int(self.joint_out(torch.tanh(enc[t] + g)).argmax())
                if k == blank:
                    break
                out.append(k)
                h, state = self.pred_rnn(self.pred_emb(torch.tensor([[k]])), state)
                g = self.joint_pred(h[0, 0])
        return out

    # ------------------------------------------------------------ quantiser

    @torch.no_grad()
    def quantizer_input(self, mel: torch.Tensor) -> torch.Tensor:
        """Normalised mel frames stacked in pairs: (..., T, n_mels) -> (..., ceil(T/2), 2 n_mels).

        Targets built from fixed features cannot collapse the way targets
        built from the trainable encoder latent do.
        """
        x = (mel - MEL_MEAN) / MEL_STD
        T = x.shape[-2]
        if T % SUBSAMPLE:
            pad = x.new_zeros(x.shape[:-2] + (SUBSAMPLE - T % SUBSAMPLE, x.shape[-1]))
            x = torch.cat([x, pad], dim=-2)
        return x.reshape(x.shape[:-2] + (x.shape[-2] // SUBSAMPLE, SUBSAMPLE * x.shape[-1]))

    @torch.no_grad()
    def quantize(self, latent: torch.Tensor) -> torch.Tensor:
        """Nearest codebook row (cosine) of the frozen projection; ties -> lowest index.

        ``latent`` is the quantiser input of width 2 n_mels (see ``quantizer_input``).
        """
        z = F.normalize(latent @ self.quantizer_projection.to(latent.dtype), dim=-1)
        sims = z @ self.codebook.to(latent.dtype).T
        return sims.argmax(-1)  # argmax returns the first maximal index


# ---------------------------------------------------------------- durations and upsampling


def round_half_up(x: np.ndarray) -> np.ndarray:
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5).astype(np.int64)


def integer_durations(durations) -> np.ndarray:
    """Round real durations half-up; a non-empty sequence keeps at least one frame."""
    d = np.asarray(durations.detach().cpu() if torch.is_tensor(durations) else durations, dtype=np.float64)
    r = np.maximum(round_half_up(d), 0)
    if r.size and r.sum() == 0:
        r[int(np.argmax(d))] = 1
    return r


def to_encoder_rate(durations: np.ndarray, factor: int = SUBSAMPLE) -> np.ndarray:
    """Mel-rate integer durations -> encoder-rate durations summing to ceil(T / factor).

    Token boundaries are rounded half-up on the cumulative sum so the total is
    preserved exactly.
    """
    d = np.asarray(durations, dtype=np.int64)
    bounds = np.concatenate([[0], np.cumsum(d)])
    scaled = (bounds + factor - 1) // factor  # == round_half_up(bounds / 2) for factor 2
    return np.diff(scaled)


def upsample(text_emb: torch.Tensor, durations) -> torch.Tensor:
    """Repeat token ``u`` ``round(d_u)`` times; reals are rounded half-up."""
    d = np.asarray(durations.detach().cpu() if torch.is_tensor(durations) else durations)
    if d.shape[0] != text_emb.shape[0]:
        raise ValueError(f"{d.shape[0]} durations for {text_emb.shape[0]} tokens")
    reps = d.astype(np.int64) if np.issubdtype(d.dtype, np.integer) else integer_durations(d)
    return torch.repeat_interleave(text_emb, torch.as_tensor(reps, dtype=torch.long), dim=0)


# ---------------------------------------------------------------- checkpoints


def save_params(path, model: Virtuoso) -> None:
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    np.savez(path, **arrays)


def load_params(path, model: Virtuoso) -> None:
    with np.load(path) as z:
        arrays = {k: z[k] for k in z.files}
    expected = model.state_dict()
    missing, extra = set(expected) - set(arrays), set(arrays) - set(expected)
    if missing or extra:
        raise ValueError(f"checkpoint name mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
    for k, v in expected.items():
        if tuple(arrays[k].shape) != tuple(v.shape):
            raise ValueError(f"checkpoint shape mismatch for {k}: {arrays[k].shape} vs {tuple(v.shape)}")
    model.load_state_dict({k: torch.as_tensor(arrays[k]) for k in expected})


def save_config(path, config: ModelConfig, extra: Optional[dict] = None) -> None:
    payload = {"model": config.to_dict(), **(extra or {})}
    Path(path).write_text(json.dumps(payload, indent=2, ensure_ascii=False), encoding="utf-8")
