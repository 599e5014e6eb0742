import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import tiny_config
from fd import directional_check
from virtuoso.corpus import Regime
from virtuoso.frontend import MaskInfo
from virtuoso.losses import (
    ACTIVE_TERMS,
    TERMS,
    LossError,
    LossWeights,
    aligned_mlm_text_loss,
    contrastive_loss,
    duration_loss,
    forced_align,
    mlm_speech_loss,
    mm_loss,
    regime_loss,
    rnnt_loss,
    rnnt_loss_batch,
    spectrogram_iterative_loss,
    viterbi,
)
from virtuoso.model import Virtuoso


def brute_force_paths(T, U):
    """All monotone move strings: T blanks and U emissions, ending with a blank."""
    for emit_slots in itertools.combinations(range(T - 1 + U), U):
        moves = ["b"] * (T - 1 + U)
        for i in emit_slots:
            moves[i] = "e"
        yield moves + ["b"]


def path_logprob(logp, ids, moves):
    t = u = 0
    total = 0.0
    blank = logp.shape[-1] - 1
    for m in moves:
        if m == "b":
            total += logp[t, u, blank]
            t += 1
        else:
            total += logp[t, u, ids[u]]
            u += 1
    return total


def brute_force_nll(lattice, ids):
    logp = torch.as_tensor(lattice, dtype=torch.float64).log_softmax(-1).numpy()
    T = logp.shape[0]
    scores = [path_logprob(logp, ids, m) for m in brute_force_paths(T, len(ids))]
    return -float(np.logaddexp.reduce(scores))


def random_lattice(rng, T, U, V):
    lat = torch.as_tensor(rng.normal(0, 2, size=(T, U + 1, V)), dtype=torch.float64)
    ids = list(rng.integers(0, V - 1, size=U))
    return lat, ids


# ---------------------------------------------------------------- transducer


def test_rnnt_single_blank_uniform():
    assert rnnt_loss(torch.zeros(1, 1, 3, dtype=torch.float64), []).item() == pytest.approx(math.log(3), abs=1e-12)


def test_rnnt_two_paths():
    rng = np.random.default_rng(0)
    lat, ids = random_lattice(rng, 2, 1, 3)
    logp = lat.log_softmax(-1).numpy()
    p1 = logp[0, 0, ids[0]] + logp[0, 1, 2] + logp[1, 1, 2]
    p2 = logp[0, 0, 2] + logp[1, 0, ids[0]] + logp[1, 1, 2]
    assert rnnt_loss(lat, ids).item() == pytest.approx(-np.logaddexp(p1, p2), abs=1e-9)


def test_rnnt_matches_enumeration_on_500_lattices():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(500):
        T, U, V = rng.integers(1, 5), rng.integers(0, 4), rng.integers(2, 5)
        lat, ids = random_lattice(rng, T, U, V)
        worst = max(worst, abs(rnnt_loss(lat, ids).item() - brute_force_nll(lat, ids)))
    assert worst < 1e-6


def test_rnnt_shift_invariance():
    rng = np.random.default_rng(1)
    lat, ids = random_lattice(rng, 3, 2, 4)
    shifted = lat.clone()
    shifted[1, 1] += 5.0
    assert rnnt_loss(shifted, ids).item() == pytest.approx(rnnt_loss(lat, ids).item(), abs=1e-10)


def test_rnnt_no_frames_is_infinite():
    assert math.isinf(rnnt_loss(torch.zeros(0, 2, 3), [0]).item())


def test_rnnt_batch_matches_single():
    rng = np.random.default_rng(2)
    a, ia = random_lattice(rng, 4, 2, 5)
    b, ib = random_lattice(rng, 3, 1, 5)
    lat = torch.zeros(2, 4, 3, 5, dtype=torch.float64)
    lat[0] = a
    lat[1, :3, :2] = b
    ids = torch.tensor([ia, ib + [0]])
    out = rnnt_loss_batch(lat, ids, torch.tensor([4, 3]), torch.tensor([2, 1]))
    assert out[0].item() == pytest.approx(rnnt_loss(a, ia).item(), abs=1e-10)
    assert out[1].item() == pytest.approx(rnnt_loss(b, ib).item(), abs=1e-10)


# ---------------------------------------------------------------- alignment


def test_alignment_invariants_on_500_lattices():
    rng = np.random.default_rng(11)
    for _ in range(500):
        Tp, U, V = rng.integers(1, 7), rng.integers(0, 5), rng.integers(2, 6)
        lat, ids = random_lattice(rng, Tp, U, V)
        T = 2 * Tp - rng.integers(0, 2)
        a = forced_align(lat, ids, T)
        assert a.path[0] == (0, 0) and a.path[-1] == (Tp, U)
        for (t0, u0), (t1, u1) in zip(a.path, a.path[1:]):
            assert (t1 - t0, u1 - u0) in ((1, 0), (0, 1))
        assert a.encoder_durations.sum() == (Tp if U else 0)
        if U:
            assert a.durations.sum() == T and (a.durations >= 0).all()
        assert a.score <= -rnnt_loss(lat, ids).item() + 1e-9


def test_viterbi_equals_best_enumerated_path():
    rng = np.random.default_rng(3)
    for _ in range(50):
        lat, ids = random_lattice(rng, rng.integers(1, 5), rng.integers(0, 4), 4)
        logp = lat.log_softmax(-1).numpy()
        best = max(path_logprob(logp, ids, m) for m in brute_force_paths(lat.shape[0], len(ids)))
        assert viterbi(lat, ids)[0] == pytest.approx(best, abs=1e-9)


def test_all_tokens_at_first_frame_gives_final_token_everything():
    T, ids = 4, [0, 1, 2]
    lat = torch.full((T, 4, 4), -20.0)
    for u, k in enumerate(ids):
        lat[0, u, k] = 20.0
    lat[:, 3, 3] = 20.0
    for emission in ("start", "end"):
        a = forced_align(lat, ids, 2 * T, emission=emission)
        assert a.durations.tolist() == [0, 0, 2 * T]


def test_emission_conventions():
    # token 0 emitted at t=1, token 1 at t=3, of 5 encoder frames
    ids = [0, 1]
    lat = torch.full((5, 3, 3), -20.0)
    lat[:, :, 2] = 20.0
    lat[1, 0, 0] = 40.0
    lat[3, 1, 1] = 40.0
    start = forced_align(lat, ids, 10, emission="start")
    end = forced_align(lat, ids, 10, emission="end")
    assert start.encoder_durations.tolist() == [3, 2]  # leading blank + frames 1, 2
    assert end.encoder_durations.tolist() == [1, 4]
    assert start.durations.tolist() == [6, 4]
    assert forced_align(lat, ids, 9).durations.tolist() == [6, 3]


def test_alignment_errors():
    with pytest.raises(LossError):
        forced_align(torch.zeros(0, 2, 3), [0])
    with pytest.raises(LossError):
        forced_align(torch.zeros(3, 2, 3), [0], num_frames=9)
    with pytest.raises(LossError):
        forced_align(torch.zeros(3, 2, 3), [0], emission="middle")


# ---------------------------------------------------------------- self-supervised speech


@pytest.fixture
def dmodel():
    return Virtuoso(tiny_config()).double()


def _mask(bits):
    return MaskInfo(np.array(bits, dtype=bool))


def test_contrastive_single_masked_position_is_zero(dmodel):
    ctx = torch.randn(4, 8, dtype=torch.float64)
    loss = contrastive_loss(ctx, torch.tensor([1, 2, 3, 4]), _mask([0, 1, 0, 0]), dmodel, np.random.default_rng(0))
    assert loss.item() == pytest.approx(0.0, abs=1e-12)


def test_contrastive_low_temperature_limit(dmodel):
    # context projects exactly onto its own (orthogonal) code
    with torch.no_grad():
        dmodel.codebook.copy_(torch.eye(8, 4, dtype=torch.float64))
        dmodel.contrastive_proj.weight.copy_(torch.eye(4, 8, dtype=torch.float64))
        dmodel.contrastive_proj.bias.zero_()
    ids = torch.tensor([0, 1, 2, 3])
    ctx = torch.eye(4, 8, dtype=torch.float64)
    loss = contrastive_loss(ctx, ids, _mask([1, 1, 1, 1]), dmodel, np.random.default_rng(0), temperature=0.01)
    assert loss.item() < 1e-30


def test_contrastive_needs_a_masked_position(dmodel):
    with pytest.raises(LossError):
        contrastive_loss(torch.randn(3, 8), torch.tensor([0, 1, 2]), _mask([0, 0, 0]), dmodel, np.random.default_rng(0))


def test_mlm_speech_uniform_and_masked_only(dmodel):
    head = torch.nn.Linear(8, 16).double()
    with torch.no_grad():
        head.weight.zero_()
        head.bias.zero_()
    ctx = torch.randn(5, 8, dtype=torch.float64)
    ids = torch.tensor([1, 2, 3, 4, 5])
    mask = _mask([0, 1, 0, 1, 0])
    assert mlm_speech_loss(ctx, ids, mask, head).item() == pytest.approx(math.log(16))
    ctx2 = ctx.clone()
    ctx2[[0, 2, 4]] += 3.0
    assert torch.equal(mlm_speech_loss(ctx, ids, mask, dmodel.mlm_speech_head),
                       mlm_speech_loss(ctx2, ids, mask, dmodel.mlm_speech_head))
    with pytest.raises(LossError):
        mlm_speech_loss(ctx, ids, _mask([0] * 5), head)


def test_aligned_mlm_text_uniform_and_restricted():
    head = torch.nn.Linear(8, 12).double()
    with torch.no_grad():
        head.weight.zero_()
        head.bias.zero_()
    frames = torch.randn(6, 8, dtype=torch.float64)
    ids, d = [3, 4, 5], [2, 1, 3]
    assert aligned_mlm_text_loss(frames, ids, d, _mask([1, 1, 0]), head).item() == pytest.approx(math.log(12))
    trained = torch.nn.Linear(8, 12).double()
    base = aligned_mlm_text_loss(frames, ids, d, _mask([0, 1, 0]), trained)
    other = frames.clone()
    other[[0, 1, 3, 4, 5]] = torch.randn(5, 8, dtype=torch.float64)
    assert torch.equal(base, aligned_mlm_text_loss(other, ids, d, _mask([0, 1, 0]), trained))


def test_aligned_mlm_text_errors():
    head = torch.nn.Linear(8, 12)
    with pytest.raises(LossError):
        aligned_mlm_text_loss(torch.randn(6, 8), [3, 4], [2, 3], _mask([1, 0]), head)
    with pytest.raises(LossError):
        aligned_mlm_text_loss(torch.randn(5, 8), [3, 4], [2, 3], _mask([0, 0]), head)
    with pytest.raises(LossError):  # the only masked token has no frames
        aligned_mlm_text_loss(torch.randn(5, 8), [3, 4, 5], [2, 0, 3], _mask([0, 1, 0]), head)


# ---------------------------------------------------------------- duration, MM, spectrogram


def test_duration_loss_examples():
    t = np.array([3, 5, 2])
    assert duration_loss(torch.tensor(t + 1e-3, dtype=torch.float64), t).item() == pytest.approx(0.0, abs=1e-20)
    assert duration_loss(torch.tensor([math.e * (4 + 1e-3)], dtype=torch.float64), [4]).item() == pytest.approx(1.0)
    with pytest.raises(LossError):
        duration_loss(torch.ones(2), [1, 2, 3])


def test_mm_loss_examples():
    s = torch.randn(6, 8, dtype=torch.float64)
    assert mm_loss(s, s.clone()).item() == 0.0
    assert mm_loss(s, s + 0.7).item() == pytest.approx(0.49)
    assert mm_loss(s, torch.cat([s, s[:1]]) + 0.7).item() == pytest.approx(0.49)  # off by one: truncate
    with pytest.raises(LossError):
        mm_loss(s, s[:4])


def test_mm_loss_gradient_flows_to_text_only():
    s = torch.randn(5, 4, dtype=torch.float64, requires_grad=True)
    t = torch.randn(5, 4, dtype=torch.float64, requires_grad=True)
    mm_loss(s, t).backward()
    assert s.grad is None or torch.count_nonzero(s.grad) == 0
    assert torch.allclose(t.grad, 2 * (t - s).detach() / t.numel())


@given(st.permutations(list(range(6))))
def test_mm_loss_permutation_invariant(perm):
    g = torch.Generator().manual_seed(0)
    s, t = torch.randn(6, 3, generator=g, dtype=torch.float64), torch.randn(6, 3, generator=g, dtype=torch.float64)
    assert mm_loss(s[perm], t[perm]).item() == pytest.approx(mm_loss(s, t).item(), abs=1e-14)


def test_iterative_loss_examples():
    y = torch.randn(10, 80, dtype=torch.float64)
    assert spectrogram_iterative_loss([y, y], y).item() == 0.0
    assert spectrogram_iterative_loss([y + 1, y], y).item() == pytest.approx(0.5)
    assert spectrogram_iterative_loss([y[:9], y], y).item() == 0.0
    with pytest.raises(LossError):
        spectrogram_iterative_loss([y[:8]], y)


# ---------------------------------------------------------------- regime objectives


def test_tts_total_with_unit_losses():
    b = regime_loss(Regime.PAIRED_TTS, {t: 1.0 for t in TERMS}, LossWeights())
    assert abs(b.total - 8.3) <= 1e-9
    assert set(b.terms) == {"sd", "rnnt", "c", "mlm_s", "d", "mm"}


def test_active_term_sets():
    assert set(ACTIVE_TERMS[Regime.PAIRED_ASR]) == {"rnnt", "c", "mlm_s", "d", "mm"}
    assert set(ACTIVE_TERMS[Regime.UNTRANSCRIBED_SPEECH]) == {"c", "mlm_s"}
    b = regime_loss(Regime.UNSPOKEN_TEXT, {"mlm_t": 1.5, "sd": 9.0}, LossWeights())
    assert b.terms == {"mlm_t": 1.5} and b.total == pytest.approx(3.0)


@settings(max_examples=50)
@given(st.sampled_from(list(Regime)), st.lists(st.floats(0, 10), min_size=7, max_size=7),
       st.lists(st.floats(0, 10), min_size=7, max_size=7))
def test_weighted_sum_identity(regime, raw, lam):
    w = LossWeights(**dict(zip(TERMS, lam)))
    terms = dict(zip(TERMS, raw))
    b = regime_loss(regime, terms, w)
    assert abs(b.total - sum(w[t] * terms[t] for t in ACTIVE_TERMS[regime])) <= 1e-9
    assert set(b.terms) == set(ACTIVE_TERMS[regime])


def test_zero_weights_give_zero_total():
    w = LossWeights(**{t: 0.0 for t in TERMS})
    assert regime_loss(Regime.PAIRED_TTS, {t: 123.0 for t in TERMS}, w).total == 0.0


def test_mixed_part_and_missing_terms_rejected():
    with pytest.raises(LossError, match="mixed-regime"):
        regime_loss(Regime.PAIRED_ASR, {t: 1.0 for t in TERMS}, LossWeights(),
                    regimes_in_part=[Regime.PAIRED_ASR, Regime.PAIRED_TTS])
    with pytest.raises(LossError):
        regime_loss(Regime.PAIRED_ASR, {"rnnt": 1.0}, LossWeights())


def test_restrict_drops_terms():
    b = regime_loss(Regime.PAIRED_TTS, {"sd": 1.0, "rnnt": 1.0, "d": 1.0}, LossWeights(), restrict=["rnnt", "sd", "d"])
    assert set(b.terms) == {"sd", "rnnt", "d"} and b.total == pytest.approx(6.0)


def test_weights_validated():
    with pytest.raises(ValueError):
        LossWeights(mm=-1)
    with pytest.raises(ValueError):
        LossWeights(sd=float("nan"))
    assert LossWeights.with_language_ids().mlm_t == 12.0
    assert LossWeights().mlm_t == 2.0


# ---------------------------------------------------------------- finite differences on every loss


def _leaf(*shape, seed=0, scale=1.0):
    g = torch.Generator().manual_seed(seed)
    return (torch.randn(*shape, generator=g, dtype=torch.float64) * scale).requires_grad_(True)


def test_fd_rnnt():
    rng = np.random.default_rng(5)
    for _ in range(5):
        lat, ids = random_lattice(rng, 4, 3, 5)
        lat.requires_grad_(True)
        assert not directional_check(lambda: rnnt_loss(lat, ids), [lat])


def test_fd_sd():
    its = [_leaf(7, 80, seed=1), _leaf(7, 80, seed=2)]
    y = torch.randn(7, 80, dtype=torch.float64)
    assert not directional_check(lambda: spectrogram_iterative_loss(its, y), its)


def test_fd_contrastive(dmodel):
    ctx = _leaf(6, 8, seed=3)
    ids = torch.tensor([0, 3, 5, 1, 7, 2])
    mask = _mask([1, 1, 0, 1, 1, 1])
    params = [ctx, dmodel.contrastive_proj.weight, dmodel.contrastive_proj.bias]
    fn = lambda: contrastive_loss(ctx, ids, mask, dmodel, np.random.default_rng(0), n_distractors=3)  # noqa: E731
    assert not directional_check(fn, params)


def test_fd_mlm_speech(dmodel):
    ctx = _leaf(6, 8, seed=4)
    ids = torch.tensor([0, 3, 5, 1, 7, 2])
    head = dmodel.mlm_speech_head
    fn = lambda: mlm_speech_loss(ctx, ids, _mask([0, 1, 1, 0, 1, 0]), head)  # noqa: E731
    assert not directional_check(fn, [ctx, head.weight, head.bias])


def test_fd_mlm_text(dmodel):
    frames = _leaf(7, 8, seed=5)
    head = dmodel.mlm_text_head
    fn = lambda: aligned_mlm_text_loss(frames, [3, 4, 5, 6], [2, 1, 3, 1], _mask([1, 0, 1, 1]), head)  # noqa: E731
    assert not directional_check(fn, [frames, head.weight, head.bias])


def test_fd_duration():
    log_pred = _leaf(5, seed=6)
    fn = lambda: duration_loss(torch.exp(log_pred), [3, 0, 5, 2, 7])  # noqa: E731
    assert not directional_check(fn, [log_pred])


def test_fd_duration_through_predictor_head(dmodel):
    spk = dmodel.speaker_embed("s1")
    emb = dmodel.text_encode([3, 4, 5], spk).detach()
    fn = lambda: dmodel.predict_durations(emb, spk.detach()).mean()  # noqa: E731
    assert not directional_check(fn, [dmodel.dur_head.weight, dmodel.dur_head.bias])


def test_fd_mm():
    # the speech side is a constant target, so only the text side is checked
    s, t = _leaf(6, 8, seed=7), _leaf(6, 8, seed=8)
    assert not directional_check(lambda: mm_loss(s, t), [t])
