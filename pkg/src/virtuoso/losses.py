"""Loss terms, transducer dynamic programming and regime-level objectives."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .corpus import Regime
from .frontend import MaskInfo
from .model import SUBSAMPLE

TERMS = ("sd", "rnnt", "c", "mlm_s", "mlm_t", "d", "mm")

ACTIVE_TERMS = {
    Regime.PAIRED_TTS: ("sd", "rnnt", "c", "mlm_s", "d", "mm"),
    Regime.PAIRED_ASR: ("rnnt", "c", "mlm_s", "d", "mm"),
    Regime.UNTRANSCRIBED_SPEECH: ("c", "mlm_s"),
    Regime.UNSPOKEN_TEXT: ("mlm_t",),
}


class LossError(ValueError):
    pass


@dataclass
class LossWeights:
    sd: float = 1.0
    rnnt: float = 4.0
    c: float = 1.0
    mlm_s: float = 1.0
    d: float = 1.0
    mm: float = 0.3
    mlm_t: float = 2.0

    def __post_init__(self):
        for k in TERMS:
            v = float(getattr(self, k))
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"lambda_{k} must be finite and >= 0, got {v}")

    def __getitem__(self, term: str) -> float:
        return float(getattr(self, term))

    @classmethod
    def with_language_ids(cls) -> "LossWeights":
        return cls(mlm_t=12.0)


@dataclass
class LossBreakdown:
    """Raw per-term values of one regime part and their weighted total.

    ``terms`` holds only the terms active for the regime; inactive terms are
    absent, not zero.  ``total`` is a python float computed from the float
    values of the terms, ``total_tensor`` the differentiable counterpart.
    """

    regime: Regime
    terms: dict[str, float]
    total: float
    weights: dict[str, float] = field(default_factory=dict)
    total_tensor: Optional[torch.Tensor] = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        return {"regime": self.regime.value, "terms": dict(self.terms), "total": self.total}


def regime_loss(regime: Regime, terms: Mapping[str, torch.Tensor | float], weights: LossWeights,
                regimes_in_part: Optional[Sequence[Regime]] = None,
                restrict: Optional[Iterable[str]] = None) -> LossBreakdown:
    """Combine raw terms with the regime's active weights.

    ``regimes_in_part`` lists the regime of every record in the batch part and
    must be homogeneous. ``restrict`` narrows the active set (used when
    fine-tuning with a subset of the objective).
    """
    regime = Regime(regime)
    if regimes_in_part is not None:
        mixed = {Regime(r) for r in regimes_in_part} - {regime}
        if mixed:
            raise LossError(f"mixed-regime batch part: {regime.value} part contains {sorted(r.value for r in mixed)}")
    active = ACTIVE_TERMS[regime]
    if restrict is not None:
        keep = set(restrict)
        active = tuple(t for t in active if t in keep)
    missing = [t for t in active if t not in terms]
    if missing:
        raise LossError(f"{regime.value} needs terms {missing}")
    values = {t: float(terms[t].detach()) if torch.is_tensor(terms[t]) else float(terms[t]) for t in active}
    total = sum(weights[t] * values[t] for t in active)
    total_tensor = None
    tensors = [terms[t] for t in active if torch.is_tensor(terms[t])]
    if tensors:
        total_tensor = sum(weights[t] * terms[t] for t in active)
    return LossBreakdown(regime, values, total, {t: weights[t] for t in active}, total_tensor)


# ---------------------------------------------------------------- transducer


def rnnt_loss(lattice: torch.Tensor, ids: Sequence[int], blank: Optional[int] = None) -> torch.Tensor:
    """Negative log-likelihood of ``ids`` under a (T', U+1, V') logit lattice."""
    return rnnt_loss_batch(lattice[None], torch.as_tensor(list(ids), dtype=torch.long).reshape(1, -1),
                           torch.tensor([lattice.shape[0]]), torch.tensor([len(ids)]), blank)[0]


def _transitions(lattice, ids, blank):
    logp = lattice.log_softmax(-1)
    V = lattice.shape[-1]
    blank = V - 1 if blank is None else blank
    blank_lp = logp[..., blank]  # (B, T, U+1)
    U = ids.shape[1]
    idx = ids[:, None, :, None].expand(-1, logp.shape[1], -1, -1)
    emit_lp = logp[:, :, :U, :].gather(-1, idx).squeeze(-1)  # (B, T, U)
    return blank_lp, emit_lp


def rnnt_loss_batch(lattice, ids, enc_lengths, token_lengths, blank: Optional[int] = None) -> torch.Tensor:
    """Per-utterance transducer NLL for a padded batch.

    Row-wise recursion: with beta(u) = alpha(t-1, u) + blank(t-1, u) and
    C(u) the cumulative emission log-probability along row t,
    alpha(t, u) = C(u) + logcumsumexp_k<=u(beta(k) - C(k)).
    """
    B, T, U1, _ = lattice.shape
    if T == 0:
        # no frames: no path exists
        return torch.full((B,), math.inf, dtype=lattice.dtype)
    blank_lp, emit_lp = _transitions(lattice, ids, blank)
    neg_inf = torch.tensor(-math.inf, dtype=lattice.dtype)
    beta = torch.full((B, U1), -math.inf, dtype=lattice.dtype)
    beta[:, 0] = 0.0
    alphas = []
    for t in range(T):
        c = torch.cat([beta.new_zeros(B, 1), emit_lp[:, t].cumsum(-1)], dim=-1)
        alpha = c + torch.logcumsumexp(beta - c, dim=-1)
        alphas.append(alpha)
        beta = alpha + blank_lp[:, t]
    alphas = torch.stack(alphas, dim=1)  # (B, T, U+1)
    losses = []
    for b in range(B):
        tb, ub = int(enc_lengths[b]), int(token_lengths[b])
        if tb == 0:
            losses.append(-neg_inf)
            continue
        losses.append(-(alphas[b, tb - 1, ub] + blank_lp[b, tb - 1, ub]))
    return torch.stack(losses)


@dataclass
class Alignment:
    path: list[tuple[int, int]]  # visited grid points, (0, 0) ... (T', U)
    encoder_durations: np.ndarray  # sums to T'
    durations: np.ndarray  # mel-frame rate, sums to T
    score: float  # Viterbi path log-probability


def viterbi(lattice: torch.Tensor | np.ndarray, ids: Sequence[int], blank: Optional[int] = None):
    """Best monotone path; returns (score, moves) with moves 'b' (advance t) / 'e' (emit)."""
    lat = torch.as_tensor(lattice).detach().to(torch.float64)
    T, U1, V = lat.shape
    if T == 0:
        raise LossError("cannot align an empty encoder sequence")
    U = len(ids)
    if U1 != U + 1:
        raise LossError(f"lattice has {U1} label positions for {U} tokens")
    logp = lat.log_softmax(-1).numpy()
    blank = V - 1 if blank is None else blank
    bl = logp[:, :, blank]
    em = logp[:, np.arange(U), list(ids)] if U else np.zeros((T, 0))
    alpha = np.full((T, U1), -np.inf)
    from_blank = np.zeros((T, U1), dtype=bool)
    for t in range(T):
        for u in range(U1):
            if t == 0 and u == 0:
                alpha[0, 0] = 0.0
                continue
            via_b = alpha[t - 1, u] + bl[t - 1, u] if t > 0 else -np.inf
            via_e = alpha[t, u - 1] + em[t, u - 1] if u > 0 else -np.inf
            # ties go to blank (advance t)
            if via_b >= via_e:
                alpha[t, u], from_blank[t, u] = via_b, True
            else:
                alpha[t, u] = via_e
    score = alpha[T - 1, U] + bl[T - 1, U]
    moves = ["b"]
    t, u = T - 1, U
    while (t, u) != (0, 0):
        if from_blank[t, u]:
            moves.append("b")
            t -= 1
        else:
            moves.append("e")
            u -= 1
    return float(score), moves[::-1]


EMISSION_CONVENTIONS = ("start", "end")


def forced_align(lattice, ids: Sequence[int], num_frames: Optional[int] = None,
                 blank: Optional[int] = None, emission: str = "start") -> Alignment:
    """Viterbi alignment and per-token durations.

    With ``emission="start"`` a token is taken to be emitted on its first
    frame: the k-th token (1-based) owns the blanks at label position k and the
    first token also owns the leading blanks at position 0.  With ``"end"``
    the k-th token (0-based) owns the blanks at position k, the frames before
    its emission, and the final token absorbs the trailing blanks.
    Encoder-rate durations are scaled by the subsample factor; when the mel
    length ``num_frames`` is odd the final token gives back the extra frame.
    """
    if emission not in EMISSION_CONVENTIONS:
        raise LossError(f"emission convention must be one of {EMISSION_CONVENTIONS}, got {emission!r}")
    score, moves = viterbi(lattice, ids, blank)
    T_enc = int(torch.as_tensor(lattice).shape[0])
    U = len(ids)
    path = [(0, 0)]
    counts = np.zeros(U + 1, dtype=np.int64)
    t = u = 0
    for m in moves:
        if m == "b":
            counts[u] += 1
            t += 1
        else:
            u += 1
        path.append((t, u))
    if U == 0:
        enc = np.zeros(0, dtype=np.int64)
    elif emission == "start":
        enc = counts[1:].copy()
        enc[0] += counts[0]
    else:
        enc = counts[:U].copy()
        enc[-1] += counts[U]
    num_frames = SUBSAMPLE * T_enc if num_frames is None else int(num_frames)
    if (num_frames + SUBSAMPLE - 1) // SUBSAMPLE != T_enc:
        raise LossError(f"{num_frames} mel frames do not subsample to {T_enc} encoder frames")
    mel = enc * SUBSAMPLE
    if U:
        mel[-1] -= SUBSAMPLE * T_enc - num_frames
    return Alignment(path, enc, mel, score)


# ---------------------------------------------------------------- self-supervised speech


def contrastive_loss(context: torch.Tensor, ids: torch.Tensor, mask: MaskInfo, model,
                     rng: np.random.Generator, n_distractors: int = 10, temperature: float = 0.1) -> torch.Tensor:
    """InfoNCE between projected context vectors and their quantised targets.

    Distractors are the targets of up to ``n_distractors`` other masked
    positions of the same utterance, sampled without replacement.
    """
    positions = np.flatnonzero(mask.masked_positions)
    if positions.size == 0:
        raise LossError("contrastive loss needs at least one masked position")
    q = F.normalize(model.contrastive_proj(context[positions]), dim=-1)
    targets = model.codebook.to(context.dtype)[ids[positions]]
    P = positions.size
    k = min(n_distractors, P - 1)
    cand = np.empty((P, k + 1), dtype=np.int64)
    for i in range(P):
        others = np.delete(np.arange(P), i)
        cand[i, 0] = i
        cand[i, 1:] = rng.choice(others, size=k, replace=False) if k else others
    cands = targets[torch.from_numpy(cand)]  # (P, k + 1, d_code)
    logits = (cands @ q[:, :, None]).squeeze(-1) / temperature
    return (torch.logsumexp(logits, -1) - logits[:, 0]).mean()


def mlm_speech_loss(context: torch.Tensor, ids: torch.Tensor, mask: MaskInfo, head) -> torch.Tensor:
    positions = torch.as_tensor(np.flatnonzero(mask.masked_positions), dtype=torch.long)
    if positions.numel() == 0:
        raise LossError("MLM loss needs at least one masked position")
    return F.cross_entropy(head(context[positions]), ids[positions])


def aligned_mlm_text_loss(shared_out: torch.Tensor, ids: Sequence[int], durations, mask: MaskInfo, head) -> torch.Tensor:
    """Mean-pool each masked token's frames (per the duration expansion) and classify it.

    Masked tokens that received no frames are skipped.
    """
    d = np.asarray(durations, dtype=np.int64)
    if int(d.sum()) != shared_out.shape[0]:
        raise LossError(f"durations sum to {int(d.sum())} but the sequence has {shared_out.shape[0]} frames")
    bounds = np.concatenate([[0], np.cumsum(d)])
    masked = [u for u in np.flatnonzero(mask.masked_positions) if d[u] > 0]
    if not masked:
        raise LossError("aligned MLM loss needs at least one masked token with frames")
    pooled = torch.stack([shared_out[bounds[u] : bounds[u + 1]].mean(0) for u in masked])
    target = torch.as_tensor([ids[u] for u in masked], dtype=torch.long)
    return F.cross_entropy(head(pooled), target)


# ---------------------------------------------------------------- duration, MM, spectrogram


def duration_loss(predicted: torch.Tensor, target, eps: float = 1e-3) -> torch.Tensor:
    target = torch.as_tensor(np.asarray(target), dtype=predicted.dtype)
    if predicted.shape != target.shape:
        raise LossError(f"duration length mismatch: {tuple(predicted.shape)} vs {tuple(target.shape)}")
    return ((torch.log(predicted) - torch.log(target + eps)) ** 2).mean()


def _reconcile(a: torch.Tensor, b: torch.Tensor, what: str, tolerance: int = 1):
    if abs(a.shape[0] - b.shape[0]) > tolerance:
        raise LossError(f"{what}: lengths {a.shape[0]} and {b.shape[0]} differ by more than {tolerance}")
    n = min(a.shape[0], b.shape[0])
    return a[:n], b[:n]


def mm_loss(speech_frames: torch.Tensor, text_frames: torch.Tensor) -> torch.Tensor:
    """MSE pulling upsampled text embeddings onto (constant) speech-encoder outputs."""
    s, t = _reconcile(speech_frames.detach(), text_frames, "modality matching")
    return ((t - s) ** 2).mean()


def spectrogram_iterative_loss(iterates: Sequence[torch.Tensor], target: torch.Tensor) -> torch.Tensor:
    """Mean over decoder blocks of the L1 error of each block's prediction."""
    target = torch.as_tensor(target)
    total = 0.0
    for it in iterates:
        p, y = _reconcile(it, target.to(it.dtype), "spectrogram")
        total = total + (p - y).abs().mean()
    return total / len(iterates)
