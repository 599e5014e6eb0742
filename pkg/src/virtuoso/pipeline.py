"""End-to-end recipe: corpus, ASR evaluator, the three training variants, evaluation and fine-tuning."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

from .config import RunConfig
from .corpus import MANIFEST_NAMES, Regime, default_corpus_spec, generate_corpus, generate_finetune_set
from .eval import EvalReport, emit_report, evaluate_natural, evaluate_tts
from .training import finetune, run_training

log = logging.getLogger(__name__)

# Variants differ only in which regimes the mixer draws.
VARIANTS = {
    "TTS-only": ["mixer.asr=0", "mixer.speech_only=0", "mixer.text_only=0", "curriculum.paired_start_step=0"],
    "Pair": ["mixer.speech_only=0", "mixer.text_only=0", "curriculum.paired_start_step=0"],
    "All": [],
}
FINETUNED = "All+FT"


def variant_config(base: RunConfig, name: str) -> RunConfig:
    if name not in VARIANTS:
        raise KeyError(f"unknown variant {name!r}; known: {', '.join(VARIANTS)}")
    return base.with_overrides(VARIANTS[name])


def asr_evaluator_config(base: RunConfig, steps: int) -> RunConfig:
    return base.with_overrides(
        [
            "mixer.asr=4", "mixer.tts=0", "mixer.speech_only=0", "mixer.text_only=0",
            "curriculum.paired_start_step=0", f"curriculum.total_steps={steps}", "training.terms=rnnt",
        ]
    )


@dataclass
class ReproSettings:
    seed: int = 0
    corpus_scale: float = 1.0
    asr_steps: int = 2000
    finetune_steps: int = 600
    finetune_size: int = 40
    target_language: str = "C"


@dataclass
class ReproResult:
    report: EvalReport
    run_dirs: dict[str, Path] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)

    def ter(self, variant: str, language: Optional[str] = None) -> float:
        return self.report.ter(variant, language or self.report.metadata.get("target_language", "C"))


def _timed(timings: dict, key: str, fn, *args, **kwargs):
    t0 = time.perf_counter()
    out = fn(*args, **kwargs)
    timings[key] = time.perf_counter() - t0
    log.info("%s done in %.1fs", key, timings[key])
    return out


def run_repro(out_dir, cfg: Optional[RunConfig] = None, settings: Optional[ReproSettings] = None,
              variants=tuple(VARIANTS), with_finetune: bool = True) -> ReproResult:
    """Generate data, train the evaluator and every variant, evaluate and fine-tune.

    Writes ``report.txt``, ``report.jsonl`` and bar charts under ``out_dir/report``.
    """
    cfg = cfg or RunConfig()
    st = settings or ReproSettings(seed=cfg.seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    timings: dict[str, float] = {}
    spec = default_corpus_spec(st.seed, st.corpus_scale)
    data_dir = out / "data"
    corpus = _timed(timings, "gen-data", generate_corpus, spec, data_dir)
    train_manifests = [corpus.manifests[r.value] for r in MANIFEST_NAMES]
    eval_manifest = corpus.manifests["EVAL"]
    seen = [l.language_id for l in spec.languages if l.seen_in_tts]

    runs: dict[str, Path] = {}
    runs["ASR"] = out / "asr_evaluator"
    _timed(timings, "train ASR", run_training, asr_evaluator_config(cfg, st.asr_steps),
           [corpus.manifests[Regime.PAIRED_ASR.value]], runs["ASR"], resume=False)

    report = _timed(timings, "eval Natural", evaluate_natural, runs["ASR"], eval_manifest)
    for name in variants:
        runs[name] = out / f"variant_{name}"
        _timed(timings, f"train {name}", run_training, variant_config(cfg, name), train_manifests, runs[name],
               resume=False)
        rep = _timed(timings, f"eval {name}", evaluate_tts, runs[name], eval_manifest, runs["ASR"],
                     variant=name, seen_languages=seen, include_natural=False)
        report = report.merge(rep)

    if with_finetune and "All" in variants:
        ft_manifest = generate_finetune_set(spec, data_dir, st.target_language, st.finetune_size)
        ft_cfg = cfg.with_overrides([f"curriculum.total_steps={st.finetune_steps}"])
        runs[FINETUNED] = out / "finetune_All"
        _timed(timings, "finetune All", finetune, runs["All"], [ft_manifest], ft_cfg, runs[FINETUNED])
        rep = _timed(timings, f"eval {FINETUNED}", evaluate_tts, runs[FINETUNED], eval_manifest, runs["ASR"],
                     variant=FINETUNED, seen_languages=seen, include_natural=False)
        report = report.merge(rep)

    report.metadata.update(
        {"seed": st.seed, "corpus": str(data_dir), "target_language": st.target_language,
         "settings": asdict(st), "timings_s": timings,
         "checkpoints": {k: str(v) for k, v in runs.items()}}
    )
    emit_report(report, out / "report")
    (out / "report" / "timings.json").write_text(json.dumps(timings, indent=2))
    return ReproResult(report, runs, timings)
