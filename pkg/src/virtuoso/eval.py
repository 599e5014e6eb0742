"""Token error rate, synthesize-then-recognize evaluation and report emission."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import torch

from .corpus import ANY_SPKR, Regime, read_manifest, resolve_audio
from .frontend import TokenSequence
from .inference import SynthesisRequest, recognize, synthesize
from .training import Bundle, load_bundle, mel_for

NATURAL = "Natural"


class EvalError(ValueError):
    pass


def edit_distance(a: Sequence, b: Sequence) -> int:
    """Levenshtein distance with unit costs."""
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[-1]


def _seq(x) -> list:
    if isinstance(x, TokenSequence):
        return list(x.ids)
    return list(x)


def token_error_rate(hyp, ref) -> float:
    """100 * edit distance / reference length; may exceed 100 with insertions."""
    h, r = _seq(hyp), _seq(ref)
    if not r:
        raise EvalError("reference token sequence is empty")
    return 100.0 * edit_distance(h, r) / len(r)


# ---------------------------------------------------------------- reports


@dataclass
class EvalRow:
    variant: str
    language: str
    ter: float
    mae: Optional[float] = None
    n: int = 0


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def variants(self) -> list[str]:
        return list(dict.fromkeys(r.variant for r in self.rows))

    def languages(self) -> list[str]:
        return sorted({r.language for r in self.rows})

    def get(self, variant: str, language: str) -> Optional[EvalRow]:
        for r in self.rows:
            if r.variant == variant and r.language == language:
                return r
        return None

    def ter(self, variant: str, language: str) -> float:
        row = self.get(variant, language)
        if row is None:
            raise KeyError(f"no row for {variant}/{language}")
        return row.ter

    def merge(self, other: "EvalReport") -> "EvalReport":
        """Rows of ``other`` replace rows of ``self`` with the same (variant, language)."""
        keys = {(r.variant, r.language) for r in other.rows}
        rows = [r for r in self.rows if (r.variant, r.language) not in keys] + list(other.rows)
        meta = dict(self.metadata)
        meta.update(other.metadata)
        return EvalReport(rows, meta)


class _Accumulator:
    def __init__(self):
        self.edits, self.ref_len, self.abs_err, self.cells, self.n = 0, 0, 0.0, 0, 0

    def add(self, hyp, ref, mae_pair=None):
        self.edits += edit_distance(hyp, ref)
        self.ref_len += len(ref)
        self.n += 1
        if mae_pair is not None:
            a, b = mae_pair
            t = min(len(a), len(b))
            self.abs_err += float(np.abs(a[:t] - b[:t]).sum())
            self.cells += t * a.shape[1]

    @property
    def ter(self) -> float:
        return 100.0 * self.edits / max(self.ref_len, 1)

    @property
    def mae(self) -> Optional[float]:
        return self.abs_err / self.cells if self.cells else None


def _rows(variant: str, acc: dict[str, _Accumulator], with_overall: bool = True) -> list[EvalRow]:
    rows = [EvalRow(variant, lang, a.ter, a.mae, a.n) for lang, a in sorted(acc.items())]
    if with_overall and len(acc) > 1:
        total = _Accumulator()
        for a in acc.values():
            total.edits += a.edits
            total.ref_len += a.ref_len
            total.abs_err += a.abs_err
            total.cells += a.cells
            total.n += a.n
        rows.append(EvalRow(variant, "ALL", total.ter, total.mae, total.n))
    return rows


def _records(manifest):
    recs = [r for r in read_manifest(manifest) if r.text and r.audio_ref]
    if not recs:
        raise EvalError(f"{manifest}: no records with both text and audio")
    return recs


def evaluate_natural(asr_checkpoint, manifest, languages: Optional[Iterable[str]] = None) -> EvalReport:
    """Recognize the reference audio itself: the evaluator's own TER floor."""
    asr = _load(asr_checkpoint, "ASR")
    keep = None if languages is None else set(languages)
    acc: dict[str, _Accumulator] = {}
    for r in _records(manifest):
        if keep is not None and r.language_id not in keep:
            continue
        hyp = recognize(asr, mel=mel_for(resolve_audio(r, manifest))).tokens.ids
        ref = asr.tokenizer.encode(r.text).ids
        acc.setdefault(r.language_id, _Accumulator()).add(hyp, ref)
    return EvalReport(_rows(NATURAL, acc), {"manifest": str(manifest)})


def evaluate_tts(
    checkpoint,
    manifest,
    asr_checkpoint,
    variant: str = "model",
    seen_languages: Optional[Iterable[str]] = None,
    include_natural: bool = True,
) -> EvalReport:
    """Synthesize every eval record, recognize the mel with the held-out ASR model, score TER.

    Reconstruction MAE against the natural mel (over the overlapping frames)
    is reported for ``seen_languages`` only; all languages if not given.
    """
    if asr_checkpoint is None:
        raise EvalError("evaluate_tts requires a separate ASR checkpoint")
    tts = _load(checkpoint, "TTS")
    asr = _load(asr_checkpoint, "ASR")
    if asr.model is tts.model:
        raise EvalError("the ASR evaluator must not be the model under test")
    seen = None if seen_languages is None else set(seen_languages)
    acc: dict[str, _Accumulator] = {}
    for r in _records(manifest):
        syn = synthesize(SynthesisRequest(r.text, r.speaker_id, r.language_id), tts)
        hyp = recognize(asr, mel=syn.mel).tokens.ids
        ref = asr.tokenizer.encode(r.text).ids
        pair = None
        if seen is None or r.language_id in seen:
            pair = (syn.mel, mel_for(resolve_audio(r, manifest)))
        acc.setdefault(r.language_id, _Accumulator()).add(hyp, ref, pair)
    meta = {"manifest": str(manifest), "variant_checkpoints": {variant: _describe(checkpoint)},
            "asr_checkpoint": _describe(asr_checkpoint)}
    report = EvalReport(_rows(variant, acc), meta)
    if include_natural:
        report = report.merge(evaluate_natural(asr, manifest))
    return report


@torch.no_grad()
def speech_branch_mae(checkpoint, manifest, limit: Optional[int] = None) -> float:
    """Mean absolute mel error of the masked-autoencoder path run without masks.

    speech encoder -> shared encoder -> speech decoder with the utterance's own
    speaker (ANY-SPKR if unknown to the model) and reference vector.
    """
    b = _load(checkpoint, "model")
    m = b.model
    recs = _records(manifest)[:limit]
    abs_err, cells = 0.0, 0
    for r in recs:
        mel = torch.from_numpy(mel_for(resolve_audio(r, manifest)))
        spk_id = r.speaker_id if r.speaker_id in m.config.speakers else ANY_SPKR
        _, ctx = m.speech_encode(mel)
        out = m.speech_decode(m.shared_encode(ctx), m.speaker_embed(spk_id), m.reference_encode(mel))[-1]
        t = min(out.shape[0], mel.shape[0])
        abs_err += float((out[:t] - mel[:t]).abs().sum())
        cells += t * mel.shape[1]
    return abs_err / cells


def _load(checkpoint, what: str) -> Bundle:
    if isinstance(checkpoint, Bundle):
        return checkpoint
    if checkpoint is None or not Path(checkpoint).exists():
        raise EvalError(f"missing {what} checkpoint: {checkpoint}")
    return load_bundle(checkpoint)


def _describe(checkpoint) -> str:
    return "<in-memory>" if isinstance(checkpoint, Bundle) else str(checkpoint)


# ---------------------------------------------------------------- emission


def _fmt(x: Optional[float]) -> str:
    return "-" if x is None else f"{x:.1f}" if x >= 1 else f"{x:.3f}"


def render_table(report: EvalReport) -> str:
    """Languages as rows; TER and MAE blocks with one column per variant."""
    variants = report.variants()
    langs = [l for l in report.languages() if l != "ALL"] + (["ALL"] if "ALL" in report.languages() else [])
    width = max([8] + [len(v) for v in variants])
    header = f"{'language':<10}" + "".join(f"  {'TER ' + v:>{width + 4}}" for v in variants)
    header += "".join(f"  {'MAE ' + v:>{width + 4}}" for v in variants if v != NATURAL)
    lines = [header, "-" * len(header)]
    for lang in langs:
        cells = []
        for v in variants:
            row = report.get(v, lang)
            cells.append(f"  {_fmt(None if row is None else row.ter):>{width + 4}}")
        for v in variants:
            if v == NATURAL:
                continue
            row = report.get(v, lang)
            cells.append(f"  {_fmt(None if row is None else row.mae):>{width + 4}}")
        lines.append(f"{lang:<10}" + "".join(cells))
    return "\n".join(lines) + "\n"


def write_jsonl(report: EvalReport, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps({"metadata": report.metadata}, sort_keys=True) + "\n")
        for r in report.rows:
            f.write(json.dumps(asdict(r), sort_keys=True) + "\n")


def read_jsonl(path) -> EvalReport:
    report = EvalReport()
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            obj = json.loads(line)
            if "metadata" in obj:
                report.metadata = obj["metadata"]
            else:
                report.rows.append(EvalRow(**obj))
    return report


def plot_metric(report: EvalReport, metric: str, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    variants = [v for v in report.variants() if not (metric == "mae" and v == NATURAL)]
    langs = report.languages()
    fig, ax = plt.subplots(figsize=(1.5 + 1.2 * max(len(langs), 1), 3.2))
    width = 0.8 / max(len(variants), 1)
    for i, v in enumerate(variants):
        vals = []
        for lang in langs:
            row = report.get(v, lang)
            val = None if row is None else getattr(row, metric)
            vals.append(np.nan if val is None else val)
        ax.bar(np.arange(len(langs)) + i * width, vals, width, label=v)
    ax.set_xticks(np.arange(len(langs)) + 0.4 - width / 2)
    ax.set_xticklabels(langs)
    ax.set_ylabel({"ter": "TER (%)", "mae": "mel MAE"}[metric])
    if variants:
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def emit_report(report: EvalReport, out_dir, formats: Iterable[str] = ("text", "jsonl", "png")) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = {}
    formats = set(formats)
    if "text" in formats:
        p = out / "report.txt"
        p.write_text(render_table(report), encoding="utf-8")
        written["text"] = p
    if "jsonl" in formats:
        p = out / "report.jsonl"
        write_jsonl(report, p)
        written["jsonl"] = p
    if "png" in formats:
        for metric in ("ter", "mae"):
            p = out / f"{metric}.png"
            plot_metric(report, metric, p)
            written[f"png_{metric}"] = p
    return written
