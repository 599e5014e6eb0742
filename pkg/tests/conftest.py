from pathlib import Path

import numpy as np
import pytest
import torch

from virtuoso.corpus import default_corpus_spec, generate_corpus
from virtuoso.frontend import Tokenizer, Scheme, Vocabulary
from virtuoso.model import ModelConfig, Virtuoso

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Three-language corpus at 5% of the default split sizes."""
    return generate_corpus(default_corpus_spec(seed=3, scale=0.05), tmp_path_factory.mktemp("corpus"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(**kw) -> ModelConfig:
    base = dict(
        vocab_size=12, bos_id=1, mask_id=2, speakers=("s1", "s2"), languages=("A", "B"),
        d_model=8, n_speech_layers=1, n_text_layers=1, n_shared_layers=1, n_decoder_blocks=2,
        n_heads=2, n_decoder_heads=2, n_mels=80, d_speaker=4, d_ref=3, codebook_size=8, d_code=4,
        conv_kernel=3, seed=0,
    )
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny_model():
    return Virtuoso(tiny_config())


@pytest.fixture
def tiny_tokenizer():
    return Tokenizer(Scheme.GRAPHEME, Vocabulary(list("abcdefgh")))


TINY_RUN = [
    "model.d_model=8", "model.n_heads=2", "model.n_decoder_heads=2", "model.n_speech_layers=1",
    "model.n_text_layers=1", "model.n_shared_layers=1", "model.d_speaker=4", "model.d_ref=3",
    "model.codebook_size=8", "model.d_code=4", "model.conv_kernel=3",
    "curriculum.paired_start_step=2", "curriculum.total_steps=6", "training.checkpoint_every=3",
]


def tiny_run_config(*overrides):
    from virtuoso.config import RunConfig

    return RunConfig().with_overrides(TINY_RUN + list(overrides))


@pytest.fixture(scope="session")
def tiny_manifests(tiny_corpus):
    from virtuoso.corpus import MANIFEST_NAMES

    return [tiny_corpus.manifests[r.value] for r in MANIFEST_NAMES]


class Overfit:
    """A small model driven to (near) zero loss on two utterances, with fixed even-split durations."""

    def __init__(self, run_dir, bundle, items, manifest):
        self.run_dir, self.bundle, self.items, self.manifest = run_dir, bundle, items, manifest


def train_overfit(corpus, out_dir, steps=1500, seed=0, d_model=64):
    from virtuoso.corpus import Regime, read_manifest, resolve_audio
    from virtuoso.losses import duration_loss, rnnt_loss, spectrogram_iterative_loss
    from virtuoso.model import save_params, to_encoder_rate, upsample
    from virtuoso.training import Bundle, build_tokenizer, mel_for, write_model_meta

    man = corpus.manifests[Regime.PAIRED_TTS.value]
    recs = read_manifest(man)
    first = recs[0]
    second = next(r for r in recs[1:] if r.text != first.text)
    tok = build_tokenizer("GRAPHEME", [man])
    items = []
    for r in (first, second):
        mel = torch.from_numpy(mel_for(resolve_audio(r, man)))
        ids = tok.encode(r.text).ids
        d = np.full(len(ids), mel.shape[0] // len(ids))
        d[-1] += mel.shape[0] - d.sum()
        items.append((r, mel, ids, d))
    config = ModelConfig(
        vocab_size=tok.vocab_size, bos_id=tok.bos_id, mask_id=tok.mask_id, speakers=tuple(sorted({first.speaker_id, second.speaker_id})),
        languages=tuple(sorted({first.language_id, second.language_id})), d_model=d_model, n_speech_layers=1, n_text_layers=1, n_shared_layers=1,
        n_decoder_blocks=2, n_heads=2, n_decoder_heads=2, d_speaker=8, d_ref=8, codebook_size=8, d_code=4,
        conv_kernel=3, seed=seed,
    )
    model = Virtuoso(config)
    opt = torch.optim.Adam(model.parameters(), lr=3e-3)
    zero = torch.zeros(config.d_ref)
    for _ in range(steps):
        loss = 0.0
        for r, mel, ids, d in items:
            spk = model.speaker_embed(r.speaker_id)
            _, ctx = model.speech_encode(mel)
            shared = model.shared_encode(ctx)
            emb = model.text_encode(ids, spk)
            text_shared = model.shared_encode(upsample(emb, to_encoder_rate(d)))
            loss = loss + rnnt_loss(model.rnnt_forward(shared, ids), ids)
            loss = loss + spectrogram_iterative_loss(model.speech_decode(shared, spk, zero), mel)
            loss = loss + spectrogram_iterative_loss(model.speech_decode(text_shared, spk, zero), mel)
            loss = loss + duration_loss(model.predict_durations(emb, spk), d)
        opt.zero_grad()
        loss.backward()
        opt.step()
    model.eval()
    out = Path(out_dir)
    (out / "step-1").mkdir(parents=True)
    write_model_meta(out, config, tok)
    save_params(out / "step-1" / "params.npz", model)
    save_params(out / "step-1" / "ema.npz", model)
    return Overfit(out, Bundle(model, tok), items, man)


@pytest.fixture(scope="session")
def overfit(tiny_corpus, tmp_path_factory):
    return train_overfit(tiny_corpus, tmp_path_factory.mktemp("overfit") / "run")


# acceptance criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
