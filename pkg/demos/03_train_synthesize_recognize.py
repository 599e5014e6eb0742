"""A few hundred steps of joint training on a small corpus, then every inference path.

The model is far too small and too briefly trained to speak well; the point is
the plumbing: variants are plain config, and synthesis, recognition, voice
conversion and evaluation all read the same checkpoint directory.
"""
import sys
import tempfile
from pathlib import Path

import numpy as np
import torch

from virtuoso.config import RunConfig
from virtuoso.corpus import MANIFEST_NAMES, default_corpus_spec, generate_corpus, read_manifest, resolve_audio
from virtuoso.eval import evaluate_tts, render_table
from virtuoso.inference import SynthesisRequest, convert_voice, griffin_lim, recognize, synthesize
from virtuoso.training import read_records, run_training

torch.set_num_threads(1)
steps = int(sys.argv[1]) if len(sys.argv) > 1 else 300
root = Path(tempfile.mkdtemp(prefix="virtuoso-demo-"))
corpus = generate_corpus(default_corpus_spec(seed=0, scale=0.2), root / "data")
manifests = [corpus.manifests[r.value] for r in MANIFEST_NAMES]

cfg = RunConfig().with_overrides([
    "model.d_model=32", "model.n_heads=2", "model.d_speaker=16",
    f"curriculum.total_steps={steps}", "curriculum.paired_start_step=50", "optimizer.warmup_steps=50",
])
run = root / "all"
run_training(cfg, manifests, run)

recs = read_records(run)
for r in recs[:: max(1, len(recs) // 6)]:
    parts = ", ".join(f"{b['regime']}:{b['total']:.2f}" for b in r.breakdowns)
    print(f"step {r.step:>4} lr {r.lr:.2e} total {r.total:7.2f}  [{parts}]")

rec = read_manifest(corpus.manifests["PAIRED_TTS"])[0]
audio = resolve_audio(rec, corpus.manifests["PAIRED_TTS"])
syn = synthesize(SynthesisRequest(rec.text, rec.speaker_id), run)
print(f"\nsynth {rec.text!r}: durations {syn.durations.tolist()} -> mel {syn.mel.shape}")
wav = griffin_lim(syn.mel, n_iter=16)
print(f"griffin-lim waveform: {len(wav)} samples, peak {np.abs(wav).max():.2f}")
print("asr on the natural audio:", repr(recognize(run, audio=audio).text), "reference", repr(rec.text))
vc = convert_voice(run, "spk_b1", audio=audio)
print("voice conversion to spk_b1:", vc.shape)

# the model evaluates itself only as a smoke test; real reports use a separate ASR checkpoint
asr = root / "asr"
run_training(cfg.with_overrides(["mixer.tts=0", "mixer.speech_only=0", "mixer.text_only=0", "mixer.asr=4",
                                 "curriculum.paired_start_step=0", "training.terms=rnnt"]),
             [corpus.manifests["PAIRED_ASR"]], asr)
print()
print(render_table(evaluate_tts(run, corpus.manifests["EVAL"], asr, variant="All", seen_languages=["A", "B"])))
