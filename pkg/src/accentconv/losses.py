"""Speech-encoder training criteria and their weighted sum.

    L_SE = w_C * L_C + w_TC * L_TC + L_TTS

L_C is a per-position InfoNCE between speech and text embeddings of the same
utterance (positive: the aligned text row, negatives: the other text rows),
L_TC is token cross-entropy against the phoneme transcript + EOS, and L_TTS is
the frozen decoder's reconstruction loss (see ``tts.tts_loss``).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor
from torch.nn import functional as F

from .text import PAD
from .speech_encoder import classes_from_ids


@dataclass(frozen=True)
class LossWeights:
    w_C: float = 30.0
    w_TC: float = 1.0
    temperature: float = 0.1

    def __post_init__(self):
        if self.w_C < 0 or self.w_TC < 0:
            raise ValueError("loss weights must be non-negative")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


@dataclass(frozen=True)
class LossBreakdown:
    L_C: float
    L_TC: float
    L_TTS: float
    L_SE: float

    def to_dict(self) -> dict:
        return {"L_C": self.L_C, "L_TC": self.L_TC, "L_TTS": self.L_TTS, "L_SE": self.L_SE}


def compose(l_c, l_tc, l_tts, weights: LossWeights):
    """Weighted sum; works on floats and on tensors (keeps the graph)."""
    return weights.w_C * l_c + weights.w_TC * l_tc + l_tts


def total_loss(l_c: float, l_tc: float, l_tts: float, weights: LossWeights = LossWeights()) -> LossBreakdown:
    l_c, l_tc, l_tts = float(l_c), float(l_tc), float(l_tts)
    return LossBreakdown(l_c, l_tc, l_tts, compose(l_c, l_tc, l_tts, weights))


def contrastive_loss(
    speech_emb: Tensor,
    text_emb: Tensor,
    temperature: float = 0.1,
    lengths: Tensor | None = None,
) -> Tensor:
    """Mean over valid positions of -log softmax_j(cos(s_i, t_j) / tau)[j = i].

    Accepts (L, d) or (B, L, d). Negatives come only from the same utterance;
    a single-phoneme utterance contributes 0. Text embeddings are used as given
    (detach them upstream when the text encoder is frozen).
    """
    if speech_emb.shape != text_emb.shape:
        raise ValueError(f"embedding shapes differ: {tuple(speech_emb.shape)} vs {tuple(text_emb.shape)}")
    if speech_emb.dim() == 2:
        speech_emb, text_emb = speech_emb[None], text_emb[None]
    b, l, _ = speech_emb.shape
    if l < 1:
        raise ValueError("contrastive loss needs at least one position")
    if lengths is None:
        lengths = torch.full((b,), l, dtype=torch.long)
    valid = torch.arange(l)[None, :] < lengths[:, None]
    s_norm = speech_emb.norm(dim=-1)
    t_norm = text_emb.norm(dim=-1)
    if bool(((s_norm == 0) & valid).any()) or bool(((t_norm == 0) & valid).any()):
        raise ValueError("zero-norm embedding row: cosine similarity undefined")
    s = speech_emb / torch.where(valid, s_norm, torch.ones_like(s_norm))[..., None]
    t = text_emb / torch.where(valid, t_norm, torch.ones_like(t_norm))[..., None]
    sim = torch.bmm(s, t.transpose(1, 2)) / temperature  # (B, L, L)
    sim = sim.masked_fill(~valid[:, None, :], float("-inf"))
    logp = torch.log_softmax(sim, dim=-1)
    diag = torch.diagonal(logp, dim1=1, dim2=2)  # (B, L)
    diag = torch.where(valid, diag, torch.zeros_like(diag))
    return -diag.sum() / valid.sum()


def text_classification_loss(logits: Tensor, target_ids: Tensor) -> Tensor:
    """Mean cross-entropy over non-PAD positions.

    ``target_ids`` are token ids of the transcript followed by EOS (PAD-padded);
    ``logits`` rows must match them one to one.
    """
    if logits.dim() == 2:
        logits, target_ids = logits[None], target_ids[None]
    if logits.shape[:2] != target_ids.shape:
        raise ValueError(
            f"logits rows {tuple(logits.shape[:2])} do not match target length {tuple(target_ids.shape)}"
        )
    classes = classes_from_ids(target_ids).masked_fill(target_ids == PAD, -100)
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), classes.reshape(-1), ignore_index=-100)


def mean_cosine(speech_emb: Tensor, text_emb: Tensor, lengths: Tensor | None = None) -> Tensor:
    if speech_emb.dim() == 2:
        speech_emb, text_emb = speech_emb[None], text_emb[None]
    b, l, _ = speech_emb.shape
    if lengths is None:
        lengths = torch.full((b,), l, dtype=torch.long)
    valid = (torch.arange(l)[None, :] < lengths[:, None]).to(speech_emb.dtype)
    cos = F.cosine_similarity(speech_emb, text_emb, dim=-1, eps=1e-12)
    return (cos * valid).sum() / valid.sum()


def pairwise_contrastive_loss(
    speech_emb: Tensor,
    text_emb: Tensor,
    margin: float = 1.0,
    lengths: Tensor | None = None,
) -> Tensor:
    """Pull/push alternative to ``contrastive_loss`` on unit-normalised rows:
    mean squared distance of aligned pairs plus mean squared hinge
    max(0, margin - distance) over the other rows of the same utterance.

    Unlike InfoNCE it keeps pulling aligned pairs together after the positive
    already wins the softmax.
    """
    if speech_emb.shape != text_emb.shape:
        raise ValueError(f"embedding shapes differ: {tuple(speech_emb.shape)} vs {tuple(text_emb.shape)}")
    if speech_emb.dim() == 2:
        speech_emb, text_emb = speech_emb[None], text_emb[None]
    b, l, _ = speech_emb.shape
    if lengths is None:
        lengths = torch.full((b,), l, dtype=torch.long)
    valid = torch.arange(l)[None, :] < lengths[:, None]
    s = F.normalize(speech_emb, dim=-1, eps=1e-12)
    t = F.normalize(text_emb, dim=-1, eps=1e-12)
    dist = (s[:, :, None, :] - t[:, None, :, :]).pow(2).sum(-1).clamp_min(1e-12).sqrt()
    pair = (valid[:, :, None] & valid[:, None, :]).to(s.dtype)
    eye = torch.eye(l, dtype=s.dtype)[None]
    pos = (dist.pow(2) * eye * pair).sum() / (eye * pair).sum()
    neg_mask = pair * (1 - eye)
    if float(neg_mask.sum()) == 0:
        return pos
    neg = (F.relu(margin - dist).pow(2) * neg_mask).sum() / neg_mask.sum()
    return pos + neg


CONTRASTIVE_FORMS = ("infonce", "pairwise")


def contrastive(form: str, speech_emb: Tensor, text_emb: Tensor, temperature: float, lengths=None) -> Tensor:
    if form == "infonce":
        return contrastive_loss(speech_emb, text_emb, temperature, lengths)
    if form == "pairwise":
        return pairwise_contrastive_loss(speech_emb, text_emb, lengths=lengths)
    raise ValueError(f"unknown contrastive form {form!r}; expected one of {CONTRASTIVE_FORMS}")
