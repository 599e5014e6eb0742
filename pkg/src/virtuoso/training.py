"""Batch mixing, curriculum, regime forward passes, optimisation and checkpoints."""
from __future__ import annotations

import json
import logging
import math
import re
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import losses as L
from .config import RunConfig, load_config, save_config
from .corpus import ANY_SPKR, REGIMES, Regime, read_audio, read_manifest, resolve_audio
from .frontend import MaskPolicy, Scheme, Tokenizer, Vocabulary, extract_mel, mask_spans
from .model import (
    ModelConfig,
    Virtuoso,
    integer_durations,
    load_params,
    pad_batch,
    save_params,
    to_encoder_rate,
    upsample,
)

log = logging.getLogger(__name__)

MIXER_ORDER = (
    ("asr", Regime.PAIRED_ASR),
    ("tts", Regime.PAIRED_TTS),
    ("speech_only", Regime.UNTRANSCRIBED_SPEECH),
    ("text_only", Regime.UNSPOKEN_TEXT),
)
PAIRED = (Regime.PAIRED_ASR, Regime.PAIRED_TTS)


class TrainingError(RuntimeError):
    pass


class Branch(str, Enum):
    SPEECH = "SPEECH_BRANCH"
    TEXT = "TEXT_BRANCH"


# ---------------------------------------------------------------- data


@dataclass
class Example:
    id: str
    regime: Regime
    language_id: str
    speaker_id: str = ANY_SPKR
    text: Optional[str] = None
    ids: Optional[list[int]] = None
    mel: Optional[torch.Tensor] = None


_MEL_CACHE: dict[str, np.ndarray] = {}


def mel_for(path: Path) -> np.ndarray:
    key = str(Path(path).resolve())
    if key not in _MEL_CACHE:
        _MEL_CACHE[key] = extract_mel(read_audio(path))
    return _MEL_CACHE[key]


def build_tokenizer(scheme: str, manifests: Sequence) -> Tokenizer:
    if Scheme(scheme) is Scheme.BYTE:
        return Tokenizer(Scheme.BYTE)
    texts = [r.text for m in manifests for r in read_manifest(m) if r.text is not None]
    return Tokenizer(Scheme.GRAPHEME, Vocabulary.build(texts))


def load_examples(manifests: Sequence, tokenizer: Tokenizer) -> dict[Regime, list[Example]]:
    data: dict[Regime, list[Example]] = {r: [] for r in REGIMES}
    for m in manifests:
        for r in read_manifest(m):
            ex = Example(r.id, r.regime, r.language_id, r.speaker_id, r.text)
            if r.text is not None:
                ex.ids = tokenizer.encode(r.text).ids
            if r.audio_ref:
                ex.mel = torch.from_numpy(mel_for(resolve_audio(r, m)))
            data[r.regime].append(ex)
    return data


def speakers_and_languages(data: dict[Regime, list[Example]]) -> tuple[tuple[str, ...], tuple[str, ...]]:
    speakers = sorted({e.speaker_id for exs in data.values() for e in exs} - {ANY_SPKR})
    languages = sorted({e.language_id for exs in data.values() for e in exs})
    return tuple(speakers), tuple(languages)


# ---------------------------------------------------------------- mixing


@dataclass
class BatchPart:
    regime: Regime
    examples: list[Example]


@dataclass
class Batch:
    parts: list[BatchPart]

    def sizes(self) -> dict[Regime, int]:
        return {p.regime: len(p.examples) for p in self.parts}


def active_regimes(cfg: RunConfig, step: int) -> list[tuple[Regime, int]]:
    out = []
    for key, regime in MIXER_ORDER:
        n = getattr(cfg.mixer, key)
        if n <= 0:
            continue
        if regime in PAIRED and step < cfg.curriculum.paired_start_step:
            continue
        out.append((regime, n))
    return out


def mix_batch(data: dict[Regime, list[Example]], cfg: RunConfig, step: int, rng: np.random.Generator) -> Batch:
    """Draw every active regime part at its configured size, uniformly with replacement."""
    parts = []
    for regime, n in active_regimes(cfg, step):
        pool = data.get(regime, [])
        if not pool:
            raise TrainingError(f"regime {regime.value} is active at step {step} but its dataset is empty")
        idx = rng.integers(len(pool), size=n)
        parts.append(BatchPart(regime, [pool[i] for i in idx]))
    return Batch(parts)


def choose_branch(rng: np.random.Generator, p_text: float = 0.5) -> Branch:
    return Branch.TEXT if rng.random() < p_text else Branch.SPEECH


def lr_schedule(step: int, peak_lr: float, warmup_steps: int) -> float:
    """Linear warmup to ``peak_lr`` at ``warmup_steps``, then inverse square-root decay."""
    if step <= 0:
        return 0.0
    if warmup_steps <= 0:
        return peak_lr
    return peak_lr * min(step / warmup_steps, math.sqrt(warmup_steps / step))


# ---------------------------------------------------------------- forward passes


def _weights(cfg: RunConfig) -> L.LossWeights:
    s = cfg.losses
    return L.LossWeights(s.lambda_sd, s.lambda_rnnt, s.lambda_c, s.lambda_mlm_s, s.lambda_d, s.lambda_mm, s.lambda_mlm_t)


def _restrict(cfg: RunConfig) -> Optional[set[str]]:
    terms = cfg.training.terms.strip()
    return None if not terms else {t.strip() for t in terms.split(",")}


def _pad_ids(seqs: Sequence[Sequence[int]]):
    lengths = torch.tensor([len(s) for s in seqs], dtype=torch.long)
    out = torch.zeros(len(seqs), int(lengths.max()) if len(seqs) else 0, dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)
    return out, lengths


def _lang_index(model: Virtuoso, examples: Sequence[Example]):
    if not model.config.use_language_adapter:
        return None
    return torch.tensor([model.language_index(e.language_id) for e in examples])


def _speech_ssl(model, mel, context, enc_len, masks, cfg, rng):
    ids = model.quantize(model.quantizer_input(mel))
    c, m = [], []
    for b, mask in enumerate(masks):
        n = int(enc_len[b])
        c.append(L.contrastive_loss(context[b, :n], ids[b, :n], mask, model, rng,
                                    cfg.losses.n_distractors, cfg.losses.temperature))
        m.append(L.mlm_speech_loss(context[b, :n], ids[b, :n], mask, model.mlm_speech_head))
    return torch.stack(c).mean(), torch.stack(m).mean()


def _speech_masks(enc_len, cfg, rng):
    policy = MaskPolicy(cfg.masking.speech_start_prob, cfg.masking.speech_span_len)
    masks = [mask_spans(int(n), policy, rng) for n in enc_len]
    dense = torch.zeros(len(masks), int(enc_len.max()), dtype=torch.bool)
    for b, m in enumerate(masks):
        dense[b, : len(m.masked_positions)] = torch.from_numpy(m.masked_positions)
    return masks, dense


def speech_only_terms(model, examples, cfg, rng, need):
    mel, mel_len = pad_batch([e.mel for e in examples])
    enc_len = (mel_len + 1) // 2
    masks, dense = _speech_masks(enc_len, cfg, rng)
    _, context, enc_len = model.speech_encoder(mel, mel_len, dense)
    c, m = _speech_ssl(model, mel, context, enc_len, masks, cfg, rng)
    return {"c": c, "mlm_s": m}


def text_only_terms(model, examples, cfg, rng, need):
    ids, tok_len = _pad_ids([e.ids for e in examples])
    policy = MaskPolicy(cfg.masking.text_start_prob, cfg.masking.text_span_len)
    masks = [mask_spans(len(e.ids), policy, rng) for e in examples]
    masked_ids = ids.clone()
    for b, m in enumerate(masks):
        masked_ids[b, : len(m.masked_positions)][torch.from_numpy(m.masked_positions)] = model.config.mask_id
    spk = model.speaker_embeds([ANY_SPKR] * len(examples))
    text_emb = model.text_encoder(masked_ids, tok_len, spk, _lang_index(model, examples))
    with torch.no_grad():
        pred = model.duration_predictor(text_emb, tok_len, spk)
    enc_durs, ups = [], []
    for b, e in enumerate(examples):
        U = len(e.ids)
        # every token keeps a frame so masked tokens can be pooled
        d = np.maximum(to_encoder_rate(integer_durations(pred[b, :U])), 1)
        enc_durs.append(d)
        ups.append(upsample(text_emb[b, :U], d))
    up, up_len = pad_batch(ups)
    shared = model.shared_encoder(up, up_len)
    mlm = [
        L.aligned_mlm_text_loss(shared[b, : int(up_len[b])], e.ids, enc_durs[b], masks[b], model.mlm_text_head)
        for b, e in enumerate(examples)
    ]
    return {"mlm_t": torch.stack(mlm).mean()}


def paired_terms(model, examples, regime, cfg, rng, need, branch: Branch):
    mel, mel_len = pad_batch([e.mel for e in examples])
    ids, tok_len = _pad_ids([e.ids for e in examples])
    terms = {}
    _, ctx_u, enc_len = model.speech_encoder(mel, mel_len)
    shared_u = model.shared_encoder(ctx_u, enc_len)
    lattice = model.lattice(shared_u, ids)
    if "rnnt" in need:
        terms["rnnt"] = L.rnnt_loss_batch(lattice, ids, enc_len, tok_len).mean()

    want_sd = "sd" in need and regime is Regime.PAIRED_TTS
    want_masked = bool(need & {"c", "mlm_s"}) or (want_sd and branch is Branch.SPEECH)
    want_text = bool(need & {"d", "mm"}) or (want_sd and branch is Branch.TEXT)

    if want_masked:
        masks, dense = _speech_masks(enc_len, cfg, rng)
        _, ctx_m, _ = model.speech_encoder(mel, mel_len, dense)
        if need & {"c", "mlm_s"}:
            terms["c"], terms["mlm_s"] = _speech_ssl(model, mel, ctx_m, enc_len, masks, cfg, rng)

    speakers = [e.speaker_id if regime is Regime.PAIRED_TTS else ANY_SPKR for e in examples]
    spk = model.speaker_embeds(speakers)
    if want_text:
        lat = lattice.detach()
        targets = [
            L.forced_align(lat[b, : int(enc_len[b]), : len(e.ids) + 1], e.ids, int(mel_len[b])).durations
            for b, e in enumerate(examples)
        ]
        text_emb = model.text_encoder(ids, tok_len, spk, _lang_index(model, examples))
        ups = [upsample(text_emb[b, : len(e.ids)], to_encoder_rate(targets[b])) for b, e in enumerate(examples)]
        if "d" in need:
            pred = model.duration_predictor(text_emb, tok_len, spk)
            terms["d"] = torch.stack(
                [L.duration_loss(pred[b, : len(e.ids)], targets[b]) for b, e in enumerate(examples)]
            ).mean()
        if "mm" in need:
            terms["mm"] = torch.stack(
                [L.mm_loss(ctx_u[b, : int(enc_len[b])], ups[b]) for b in range(len(examples))]
            ).mean()

    if want_sd:
        ref = model.reference_encoder(mel, mel_len)
        if branch is Branch.SPEECH:
            dec_in, dec_len = model.shared_encoder(ctx_m, enc_len), enc_len
        else:
            up, dec_len = pad_batch(ups)
            dec_in = model.shared_encoder(up, dec_len)
        iterates = model.speech_decoder(dec_in, dec_len, spk, ref)
        terms["sd"] = torch.stack(
            [
                L.spectrogram_iterative_loss([it[b, : 2 * int(dec_len[b])] for it in iterates], e.mel)
                for b, e in enumerate(examples)
            ]
        ).mean()
    return terms


def part_loss(model, part: BatchPart, cfg: RunConfig, rng, branch: Branch) -> L.LossBreakdown:
    restrict = _restrict(cfg)
    active = set(L.ACTIVE_TERMS[part.regime])
    need = active if restrict is None else active & restrict
    if part.regime is Regime.UNTRANSCRIBED_SPEECH:
        terms = speech_only_terms(model, part.examples, cfg, rng, need)
    elif part.regime is Regime.UNSPOKEN_TEXT:
        terms = text_only_terms(model, part.examples, cfg, rng, need)
    else:
        terms = paired_terms(model, part.examples, part.regime, cfg, rng, need, branch)
    return L.regime_loss(part.regime, terms, _weights(cfg), [e.regime for e in part.examples], restrict=restrict)


# ---------------------------------------------------------------- optimisation


@dataclass
class TrainStepRecord:
    step: int
    breakdowns: list[dict]
    branch: Optional[str]
    lr: float
    total: float
    wall_time: float = 0.0

    def to_json(self) -> str:
        return json.dumps(
            {"step": self.step, "branch": self.branch, "lr": self.lr, "total": self.total,
             "wall_time": self.wall_time, "breakdowns": self.breakdowns}
        )

    @classmethod
    def from_json(cls, line: str) -> "TrainStepRecord":
        return cls(**json.loads(line))


class Trainer:
    """Owns the model, Adam state and the EMA shadow for one run."""

    def __init__(self, model: Virtuoso, cfg: RunConfig, data: dict[Regime, list[Example]]):
        self.model, self.cfg, self.data = model, cfg, data
        o = cfg.optimizer
        self.optimizer = torch.optim.Adam(model.parameters(), lr=0.0, betas=(o.beta1, o.beta2), eps=1e-9)
        self.ema = {k: p.detach().clone() for k, p in model.named_parameters()}
        self.step = 0

    def rng(self, step: Optional[int] = None) -> np.random.Generator:
        return np.random.default_rng([self.cfg.seed, self.step if step is None else step])

    def train_step(self, batch: Optional[Batch] = None, rng=None) -> TrainStepRecord:
        t0 = time.perf_counter()
        rng = self.rng() if rng is None else rng
        if batch is None:
            batch = mix_batch(self.data, self.cfg, self.step, rng)
        model, cfg = self.model, self.cfg
        model.train()
        branch = None
        breakdowns = []
        for part in batch.parts:
            br = Branch.SPEECH
            if part.regime is Regime.PAIRED_TTS:
                br = branch = choose_branch(rng, cfg.branch.p_text)
            bd = part_loss(model, part, cfg, rng, br)
            for term, value in bd.terms.items():
                if not math.isfinite(value):
                    raise TrainingError(f"step {self.step}: non-finite {term} loss ({value}) in {part.regime.value} part")
            breakdowns.append(bd)
        lr = lr_schedule(self.step + 1, cfg.optimizer.peak_lr, cfg.optimizer.warmup_steps)
        tensors = [bd.total_tensor for bd in breakdowns if bd.total_tensor is not None]
        self.optimizer.zero_grad(set_to_none=True)
        if tensors:
            torch.stack(tensors).sum().backward()
            if cfg.optimizer.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.optimizer.grad_clip)
            for g in self.optimizer.param_groups:
                g["lr"] = lr
            self.optimizer.step()
        self._update_ema()
        self.step += 1
        return TrainStepRecord(
            step=self.step - 1,
            breakdowns=[bd.to_dict() for bd in breakdowns],
            branch=None if branch is None else branch.value,
            lr=lr,
            total=sum(bd.total for bd in breakdowns),
            wall_time=time.perf_counter() - t0,
        )

    @torch.no_grad()
    def _update_ema(self):
        decay = self.cfg.optimizer.ema_decay
        for k, p in self.model.named_parameters():
            self.ema[k].mul_(decay).add_(p.detach(), alpha=1.0 - decay)

    def ema_state_dict(self) -> dict[str, torch.Tensor]:
        state = dict(self.model.state_dict())
        state.update(self.ema)
        return state

    # ------------------------------------------------------------ persistence

    def save(self, run_dir: Path) -> Path:
        d = Path(run_dir) / f"step-{self.step}"
        d.mkdir(parents=True, exist_ok=True)
        save_params(d / "params.npz", self.model)
        np.savez(d / "ema.npz", **{k: v.cpu().numpy() for k, v in self.ema_state_dict().items()})
        names = {id(p): k for k, p in self.model.named_parameters()}
        opt = {"__step__": np.array(self.step)}
        for p, st in self.optimizer.state.items():
            for key, value in st.items():
                opt[f"{names[id(p)]}/{key}"] = value.cpu().numpy()
        np.savez(d / "opt_state.npz", **opt)
        return d

    def load(self, step_dir: Path) -> None:
        step_dir = Path(step_dir)
        load_params(step_dir / "params.npz", self.model)
        with np.load(step_dir / "ema.npz") as z:
            self.ema = {k: torch.as_tensor(z[k]).clone() for k, _ in self.model.named_parameters()}
        params = dict(self.model.named_parameters())
        with np.load(step_dir / "opt_state.npz") as z:
            self.step = int(z["__step__"])
            state: dict = {}
            for key in z.files:
                if key == "__step__":
                    continue
                name, field_ = key.rsplit("/", 1)
                state.setdefault(params[name], {})[field_] = torch.as_tensor(z[key]).clone()
        self.optimizer.state.clear()
        for p, st in state.items():
            self.optimizer.state[p] = st


# ---------------------------------------------------------------- runs


@dataclass
class Bundle:
    """A model plus the tokenizer it was trained with."""

    model: Virtuoso
    tokenizer: Tokenizer
    run_config: RunConfig = field(default_factory=RunConfig)


def model_config_for(cfg: RunConfig, tokenizer: Tokenizer, speakers, languages) -> ModelConfig:
    m = cfg.model
    return ModelConfig(
        vocab_size=tokenizer.vocab_size,
        bos_id=tokenizer.bos_id,
        mask_id=tokenizer.mask_id,
        speakers=tuple(speakers),
        languages=tuple(languages),
        d_model=m.d_model,
        n_speech_layers=m.n_speech_layers,
        n_text_layers=m.n_text_layers,
        n_shared_layers=m.n_shared_layers,
        n_decoder_blocks=m.n_decoder_blocks,
        n_heads=m.n_heads,
        n_decoder_heads=m.n_decoder_heads,
        d_speaker=m.d_speaker,
        d_ref=m.d_ref,
        codebook_size=m.codebook_size,
        d_code=m.d_code,
        conv_kernel=m.conv_kernel,
        use_language_adapter=m.use_language_adapter,
        seed=cfg.seed,
    )


def write_model_meta(run_dir: Path, config: ModelConfig, tokenizer: Tokenizer) -> None:
    meta = {"model": config.to_dict(), "tokenizer": tokenizer.to_dict()}
    (Path(run_dir) / "model.json").write_text(json.dumps(meta, indent=2, ensure_ascii=False), encoding="utf-8")


def read_model_meta(run_dir: Path) -> tuple[ModelConfig, Tokenizer]:
    meta = json.loads((Path(run_dir) / "model.json").read_text(encoding="utf-8"))
    return ModelConfig.from_dict(meta["model"]), Tokenizer.from_dict(meta["tokenizer"])


_STEP_DIR = re.compile(r"^step-(\d+)$")


def checkpoint_steps(run_dir: Path) -> list[int]:
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        return []
    return sorted(int(m.group(1)) for p in run_dir.iterdir() if (m := _STEP_DIR.match(p.name)) and p.is_dir())


def resolve_checkpoint(path) -> tuple[Path, Path]:
    """Accept a run directory (latest step) or a ``step-N`` directory; return (run_dir, step_dir)."""
    path = Path(path)
    if _STEP_DIR.match(path.name) and (path / "params.npz").exists():
        return path.parent, path
    steps = checkpoint_steps(path)
    if not steps:
        raise FileNotFoundError(f"no checkpoint found under {path}")
    return path, path / f"step-{steps[-1]}"


def load_bundle(path, ema: bool = True) -> Bundle:
    run_dir, step_dir = resolve_checkpoint(path)
    config, tokenizer = read_model_meta(run_dir)
    model = Virtuoso(config)
    load_params(step_dir / ("ema.npz" if ema else "params.npz"), model)
    model.eval()
    cfg_path = run_dir / "config.yaml"
    run_cfg = load_config(cfg_path) if cfg_path.exists() else RunConfig()
    return Bundle(model, tokenizer, run_cfg)


def run_training(
    cfg: RunConfig,
    manifests: Sequence,
    out_dir,
    resume: bool = True,
    init_from: Optional[Bundle] = None,
    stop_at: Optional[int] = None,
    progress: bool = False,
) -> Path:
    """Train for ``cfg.curriculum.total_steps`` steps, checkpointing into ``out_dir``.

    An existing ``out_dir`` with checkpoints is resumed from its latest step.
    ``stop_at`` ends the run early (as if interrupted) after that many steps.
    Returns the directory of the final checkpoint.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if init_from is not None:
        tokenizer = init_from.tokenizer
    elif (out / "model.json").exists():
        _, tokenizer = read_model_meta(out)
    else:
        tokenizer = build_tokenizer(cfg.model.scheme, manifests)
    data = load_examples(manifests, tokenizer)
    if init_from is not None:
        mconf = init_from.model.config
    elif (out / "model.json").exists():
        mconf, _ = read_model_meta(out)
    else:
        mconf = model_config_for(cfg, tokenizer, *speakers_and_languages(data))
    model = Virtuoso(mconf)
    if init_from is not None:
        model.load_state_dict(init_from.model.state_dict())
    trainer = Trainer(model, cfg, data)
    write_model_meta(out, mconf, tokenizer)
    save_config(cfg, out / "config.yaml")
    records_path = out / "records.jsonl"

    steps = checkpoint_steps(out)
    if resume and steps:
        trainer.load(out / f"step-{steps[-1]}")
        # drop records beyond the restored step
        if records_path.exists():
            kept = [l for l in records_path.read_text().splitlines() if json.loads(l)["step"] < trainer.step]
            records_path.write_text("".join(k + "\n" for k in kept))
    else:
        records_path.write_text("")
        trainer.save(out)

    total = cfg.curriculum.total_steps
    end = total if stop_at is None else min(total, stop_at)
    every = max(cfg.training.checkpoint_every, 1)
    with open(records_path, "a", encoding="utf-8") as rec_file:
        while trainer.step < end:
            rec = trainer.train_step()
            rec_file.write(rec.to_json() + "\n")
            if progress and (trainer.step % 100 == 0 or trainer.step == end):
                log.info("step %d total %.4f lr %.2e", rec.step, rec.total, rec.lr)
            if trainer.step % every == 0 or trainer.step == end:
                rec_file.flush()
                trainer.save(out)
    return out / f"step-{trainer.step}"


def read_records(run_dir) -> list[TrainStepRecord]:
    path = Path(run_dir) / "records.jsonl"
    return [TrainStepRecord.from_json(l) for l in path.read_text().splitlines() if l.strip()]


def finetune(pretrained, manifests: Sequence, cfg: RunConfig, out_dir) -> Path:
    """Continue training on PAIRED_TTS records only, with the self-supervised terms disabled."""
    base = pretrained if isinstance(pretrained, Bundle) else load_bundle(pretrained)
    records = [r for m in manifests for r in read_manifest(m)]
    if not any(r.regime is Regime.PAIRED_TTS for r in records):
        raise TrainingError("fine-tuning manifest has no PAIRED_TTS records")
    unknown = {r.speaker_id for r in records if r.regime is Regime.PAIRED_TTS} - set(base.model.config.speakers)
    if unknown:
        raise TrainingError(f"fine-tuning speakers {sorted(unknown)} are not in the pretrained model")
    ft = finetune_config(cfg)
    return run_training(ft, manifests, out_dir, resume=False, init_from=base)


def finetune_config(cfg: RunConfig) -> RunConfig:
    ft = cfg.with_overrides(
        [
            "mixer.asr=0", "mixer.speech_only=0", "mixer.text_only=0",
            "curriculum.paired_start_step=0",
            "losses.lambda_c=0", "losses.lambda_mlm_s=0", "losses.lambda_mm=0", "losses.lambda_mlm_t=0",
        ]
    )
    if ft.mixer.tts <= 0:
        ft = ft.with_overrides(["mixer.tts=2"])
    terms = "rnnt,sd,d" if cfg.training.finetune_keep_duration else "rnnt,sd"
    return ft.with_overrides([f"training.terms={terms}"])
