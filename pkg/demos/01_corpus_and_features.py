"""Walk through the synthetic corpus: records, audio, mel frames and tokens."""
import tempfile
from collections import Counter

import numpy as np

from virtuoso.corpus import default_corpus_spec, generate_corpus, read_audio, read_manifest, resolve_audio
from virtuoso.frontend import Scheme, Tokenizer, extract_mel
from virtuoso.training import build_tokenizer

out = tempfile.mkdtemp(prefix="virtuoso-demo-")
corpus = generate_corpus(default_corpus_spec(seed=0, scale=0.1), out)

for name, path in corpus.manifests.items():
    recs = read_manifest(path)
    langs = Counter(r.language_id for r in recs)
    print(f"{name:<22} {len(recs):>4} records  {dict(sorted(langs.items()))}")

# language C never appears in the paired TTS split
tts = read_manifest(corpus.manifests["PAIRED_TTS"])
print("C in PAIRED_TTS:", any(r.language_id == "C" for r in tts))

r = tts[0]
wav = read_audio(resolve_audio(r, corpus.manifests["PAIRED_TTS"]))
mel = extract_mel(wav)
print(f"\n{r.id}: text {r.text!r}, speaker {r.speaker_id}, {len(wav)} samples -> mel {mel.shape}")
print("mel range", np.round(mel.min(), 2), np.round(mel.max(), 2))

# every token is a 60 ms chord (6 mel frames) divided by the speaker tempo
print("frames per token", mel.shape[0] / len(r.text))

grapheme = build_tokenizer("GRAPHEME", [corpus.manifests["PAIRED_TTS"], corpus.manifests["PAIRED_ASR"]])
byte = Tokenizer(Scheme.BYTE)
print("\ngrapheme ids", grapheme.encode(r.text).ids)
print("byte ids    ", byte.encode("feдc").ids)
print("vocab sizes ", grapheme.vocab_size, byte.vocab_size)
