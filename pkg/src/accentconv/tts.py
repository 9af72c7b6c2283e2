"""Multi-speaker Tacotron2-style TTS.

Text encoder: embedding -> conv stack -> BLSTM, giving one ``d_emb`` vector per
phoneme (the text embedding). Decoder: prenet -> attention LSTM ->
location-sensitive attention -> decoder LSTM -> mel / stop projections,
conditioned on a speaker vector concatenated to the recurrent inputs and the
output projection. No post-net.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import NamedTuple, Sequence

import numpy as np
import torch
from torch import Tensor, nn
from torch.nn import functional as F

from . import dsp
from .text import PhonemeInventory, PhonemeSequence

N_MELS = dsp.N_MELS


@dataclass
class TTSConfig:
    d_emb: int = 64
    d_spk: int = 16
    conv_layers: int = 2
    conv_channels: int = 64
    conv_kernel: int = 5
    encoder_dropout: float = 0.1
    prenet_dim: int = 64
    prenet_dropout: float = 0.5
    attention_rnn_dim: int = 64
    decoder_rnn_dim: int = 64
    attention_dim: int = 64
    location_filters: int = 8
    location_kernel: int = 15
    reduction_factor: int = 1
    # add the phoneme embedding to the BLSTM output so rows stay phoneme-specific
    embedding_residual: bool = True
    # subtract a running mean of the encoder output (masked batch mean while training)
    center_output: bool = True
    center_momentum: float = 0.1

    @classmethod
    def full(cls) -> "TTSConfig":
        return cls(
            d_emb=512,
            d_spk=256,
            conv_layers=3,
            conv_channels=512,
            prenet_dim=256,
            attention_rnn_dim=512,
            decoder_rnn_dim=512,
            attention_dim=128,
            location_filters=32,
            location_kernel=31,
        )

    @classmethod
    def from_dict(cls, d: dict) -> "TTSConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def to_dict(self) -> dict:
        return asdict(self)


def length_mask(lengths: Tensor, width: int) -> Tensor:
    """(B, width) bool mask, True on valid positions."""
    return torch.arange(width, device=lengths.device)[None, :] < lengths[:, None]


class LocationSensitiveAttention(nn.Module):
    """Additive attention whose energies also see the previous and cumulative
    alignments through a 1-D convolution."""

    def __init__(self, query_dim, memory_dim, attention_dim, n_filters, kernel_size):
        super().__init__()
        self.query_layer = nn.Linear(query_dim, attention_dim, bias=False)
        self.memory_layer = nn.Linear(memory_dim, attention_dim, bias=False)
        self.location_conv = nn.Conv1d(2, n_filters, kernel_size, padding=(kernel_size - 1) // 2, bias=False)
        self.location_dense = nn.Linear(n_filters, attention_dim, bias=False)
        self.v = nn.Linear(attention_dim, 1, bias=True)

    def process_memory(self, memory: Tensor) -> Tensor:
        return self.memory_layer(memory)

    def forward(self, query, memory, processed_memory, prev_align, cum_align, mask):
        loc = self.location_conv(torch.stack([prev_align, cum_align], dim=1)).transpose(1, 2)
        energies = self.v(
            torch.tanh(self.query_layer(query)[:, None, :] + processed_memory + self.location_dense(loc))
        ).squeeze(-1)
        energies = energies.masked_fill(~mask, float("-inf"))
        align = torch.softmax(energies, dim=1)
        context = torch.bmm(align[:, None, :], memory).squeeze(1)
        return context, align


class TextEncoder(nn.Module):
    def __init__(self, num_ids: int, cfg: TTSConfig):
        super().__init__()
        self.embedding = nn.Embedding(num_ids, cfg.conv_channels, padding_idx=0)
        if num_ids <= cfg.conv_channels:
            # orthogonal rows at the default N(0, 1) norm: distinct phonemes start maximally apart
            with torch.no_grad():
                nn.init.orthogonal_(self.embedding.weight, gain=cfg.conv_channels**0.5)
                self.embedding.weight[0].zero_()
        convs = []
        for _ in range(cfg.conv_layers):
            convs.append(
                nn.Conv1d(cfg.conv_channels, cfg.conv_channels, cfg.conv_kernel, padding=(cfg.conv_kernel - 1) // 2)
            )
        self.convs = nn.ModuleList(convs)
        self.dropout = nn.Dropout(cfg.encoder_dropout)
        self.lstm = nn.LSTM(cfg.conv_channels, cfg.d_emb // 2, batch_first=True, bidirectional=True)
        self.residual = None
        if cfg.embedding_residual:
            self.residual = (
                nn.Identity() if cfg.conv_channels == cfg.d_emb else nn.Linear(cfg.conv_channels, cfg.d_emb, bias=False)
            )
        self.center = cfg.center_output
        self.momentum = cfg.center_momentum
        self.register_buffer("running_mean", torch.zeros(cfg.d_emb))

    def forward(self, ids: Tensor, lengths: Tensor) -> Tensor:
        mask = length_mask(lengths, ids.shape[1])[:, None, :].to(self.embedding.weight.dtype)
        emb = self.embedding(ids)
        x = emb.transpose(1, 2)
        for conv in self.convs:
            x = self.dropout(F.relu(conv(x * mask)))
        x = x.transpose(1, 2)
        packed = nn.utils.rnn.pack_padded_sequence(x, lengths.cpu(), batch_first=True, enforce_sorted=False)
        out, _ = self.lstm(packed)
        out, _ = nn.utils.rnn.pad_packed_sequence(out, batch_first=True, total_length=ids.shape[1])
        if self.residual is not None:
            out = out + self.residual(emb) * mask.transpose(1, 2)
        if self.center:
            valid = mask.transpose(1, 2)
            if self.training:
                mean = (out * valid).sum(dim=(0, 1)) / valid.sum()
                with torch.no_grad():
                    self.running_mean.mul_(1 - self.momentum).add_(self.momentum * mean.detach())
            else:
                mean = self.running_mean
            out = (out - mean) * valid
        return out


class Prenet(nn.Module):
    def __init__(self, in_dim, dim, dropout):
        super().__init__()
        self.layers = nn.ModuleList([nn.Linear(in_dim, dim), nn.Linear(dim, dim)])
        self.dropout = dropout

    def forward(self, x):
        for layer in self.layers:
            x = F.dropout(F.relu(layer(x)), p=self.dropout, training=self.training)
        return x


class DecoderOutput(NamedTuple):
    mel: Tensor  # (B, T, 80)
    stop_logits: Tensor  # (B, T)
    alignments: Tensor  # (B, steps, L)


class Decoder(nn.Module):
    def __init__(self, cfg: TTSConfig):
        super().__init__()
        self.cfg = cfg
        r = cfg.reduction_factor
        self.prenet = Prenet(N_MELS, cfg.prenet_dim, cfg.prenet_dropout)
        self.attention_rnn = nn.LSTMCell(cfg.prenet_dim + cfg.d_emb + cfg.d_spk, cfg.attention_rnn_dim)
        self.attention = LocationSensitiveAttention(
            cfg.attention_rnn_dim, cfg.d_emb, cfg.attention_dim, cfg.location_filters, cfg.location_kernel
        )
        self.decoder_rnn = nn.LSTMCell(cfg.attention_rnn_dim + cfg.d_emb, cfg.decoder_rnn_dim)
        out_in = cfg.decoder_rnn_dim + cfg.d_emb + cfg.d_spk
        self.mel_proj = nn.Linear(out_in, N_MELS * r)
        # stop also sees how much attention has accumulated on the final phoneme
        self.stop_proj = nn.Linear(out_in + 1, r)

    def _init_state(self, memory: Tensor):
        b, l, d = memory.shape
        z = memory.new_zeros
        return {
            "att_h": z(b, self.cfg.attention_rnn_dim),
            "att_c": z(b, self.cfg.attention_rnn_dim),
            "dec_h": z(b, self.cfg.decoder_rnn_dim),
            "dec_c": z(b, self.cfg.decoder_rnn_dim),
            "context": z(b, d),
            "align": z(b, l),
            "cum_align": z(b, l),
        }

    def step(self, prev_frame, spk, memory, processed, mask, st, last_index):
        x = torch.cat([self.prenet(prev_frame), st["context"], spk], dim=-1)
        att_h, att_c = self.attention_rnn(x, (st["att_h"], st["att_c"]))
        context, align = self.attention(att_h, memory, processed, st["align"], st["cum_align"], mask)
        dec_h, dec_c = self.decoder_rnn(torch.cat([att_h, context], dim=-1), (st["dec_h"], st["dec_c"]))
        out = torch.cat([dec_h, context, spk], dim=-1)
        b = out.shape[0]
        r = self.cfg.reduction_factor
        mel = self.mel_proj(out).view(b, r, N_MELS)
        cum_align = st["cum_align"] + align
        cum_last = cum_align.gather(1, last_index[:, None])
        stop = self.stop_proj(torch.cat([out, cum_last], dim=-1))
        new = {
            "att_h": att_h,
            "att_c": att_c,
            "dec_h": dec_h,
            "dec_c": dec_c,
            "context": context,
            "align": align,
            "cum_align": cum_align,
        }
        return mel, stop, align, new

    def forward(self, memory, memory_lengths, spk, teacher) -> DecoderOutput:
        """Teacher-forced decoding; output has exactly ``teacher.shape[1]`` frames."""
        if memory.shape[-1] != self.cfg.d_emb:
            raise ValueError(f"embedding width {memory.shape[-1]} != decoder d_emb {self.cfg.d_emb}")
        b, t, _ = teacher.shape
        r = self.cfg.reduction_factor
        steps = -(-t // r)
        if steps * r != t:
            teacher = F.pad(teacher, (0, 0, 0, steps * r - t))
        mask = length_mask(memory_lengths, memory.shape[1])
        processed = self.attention.process_memory(memory)
        st = self._init_state(memory)
        # the frame fed at step k is the last ground-truth frame of group k-1
        inputs = torch.cat([teacher.new_zeros(b, 1, N_MELS), teacher[:, r - 1 :: r][:, : steps - 1]], dim=1)
        mels, stops, aligns = [], [], []
        for k in range(steps):
            mel, stop, align, st = self.step(inputs[:, k], spk, memory, processed, mask, st, memory_lengths - 1)
            mels.append(mel)
            stops.append(stop)
            aligns.append(align)
        mel = torch.cat(mels, dim=1)[:, :t]
        stop = torch.cat(stops, dim=1)[:, :t]
        return DecoderOutput(mel, stop, torch.stack(aligns, dim=1))

    @torch.no_grad()
    def infer(self, memory, spk, max_frames: int, threshold: float = 0.5):
        """Free-running decoding of a single item (B=1).

        Returns (mel (T, 80), alignments (steps, L), truncated flag).
        """
        if memory.shape[-1] != self.cfg.d_emb:
            raise ValueError(f"embedding width {memory.shape[-1]} != decoder d_emb {self.cfg.d_emb}")
        mask = torch.ones(1, memory.shape[1], dtype=torch.bool)
        processed = self.attention.process_memory(memory)
        st = self._init_state(memory)
        frame = memory.new_zeros(1, N_MELS)
        last = torch.tensor([memory.shape[1] - 1])
        mels, aligns = [], []
        produced = 0
        while produced < max_frames:
            mel, stop, align, st = self.step(frame, spk, memory, processed, mask, st, last)
            aligns.append(align[0])
            probs = torch.sigmoid(stop[0])
            for j in range(mel.shape[1]):
                mels.append(mel[0, j])
                produced += 1
                if probs[j] > threshold:
                    return torch.stack(mels), torch.stack(aligns), False
                if produced >= max_frames:
                    break
            frame = mel[:, -1]
        return torch.stack(mels), torch.stack(aligns), True


class Synthesis(NamedTuple):
    mel: dsp.MelSpectrogram  # denormalized log-mel
    alignments: np.ndarray
    truncated: bool


class TTSModel(nn.Module):
    def __init__(
        self,
        inventory: PhonemeInventory,
        speakers: Sequence[str],
        stats: dsp.MelStats,
        cfg: TTSConfig | None = None,
    ):
        super().__init__()
        self.cfg = cfg or TTSConfig()
        if self.cfg.d_emb % 2:
            raise ValueError("d_emb must be even (bidirectional text encoder)")
        self.inventory = inventory
        self.speakers = list(speakers)
        self.stats = stats
        self.text_encoder = TextEncoder(inventory.num_ids, self.cfg)
        self.speaker_table = nn.Embedding(len(self.speakers), self.cfg.d_spk)
        nn.init.normal_(self.speaker_table.weight, std=0.3)
        self.decoder = Decoder(self.cfg)

    @property
    def d_emb(self) -> int:
        return self.cfg.d_emb

    def speaker_index(self, speaker_id: str) -> int:
        try:
            return self.speakers.index(speaker_id)
        except ValueError:
            raise KeyError(f"unknown speaker {speaker_id!r}; TTS knows {self.speakers}") from None

    def speaker_vectors(self, speaker_ids: Sequence[str]) -> Tensor:
        idx = torch.tensor([self.speaker_index(s) for s in speaker_ids], dtype=torch.long)
        return self.speaker_table(idx)

    def encode_text(self, ids: Tensor, lengths: Tensor) -> Tensor:
        if ids.numel() and int(ids.max()) >= self.inventory.num_ids:
            raise ValueError("phoneme id outside the model's inventory")
        return self.text_encoder(ids, lengths)

    def forward(self, ids, id_lengths, spk, teacher) -> DecoderOutput:
        memory = self.encode_text(ids, id_lengths)
        return self.decoder(memory, id_lengths, spk, teacher)

    def text_embedding(self, seq: PhonemeSequence) -> np.ndarray:
        """L x d_emb text embedding of one transcript (evaluation mode)."""
        seq.validate(self.inventory)
        was = self.training
        self.eval()
        with torch.no_grad():
            ids = torch.tensor([seq.ids], dtype=torch.long)
            out = self.encode_text(ids, torch.tensor([len(seq)]))[0]
        self.train(was)
        return out.double().numpy()

    def to_normalized(self, mel: dsp.MelSpectrogram) -> np.ndarray:
        return dsp.normalize(mel, self.stats).values

    def synthesize_from_embedding(self, memory: Tensor, spk: Tensor, max_frames: int) -> Synthesis:
        was = self.training
        self.eval()
        mel, align, truncated = self.decoder.infer(memory[None], spk[None], max_frames)
        self.train(was)
        denorm = dsp.denormalize(dsp.MelSpectrogram(mel.double().numpy()), self.stats)
        return Synthesis(denorm, align.double().numpy(), truncated)

    def synthesize(
        self,
        seq: PhonemeSequence,
        speaker: str | Tensor,
        max_frames: int = 1000,
    ) -> Synthesis:
        """Free-running synthesis, stop-token terminated or capped at ``max_frames``."""
        if len(seq) == 0:
            raise ValueError("cannot synthesize an empty phoneme sequence")
        seq.validate(self.inventory)
        spk = speaker if isinstance(speaker, Tensor) else self.speaker_vectors([speaker])[0]
        with torch.no_grad():
            was = self.training
            self.eval()
            ids = torch.tensor([seq.ids], dtype=torch.long)
            memory = self.encode_text(ids, torch.tensor([len(seq)]))[0]
            self.train(was)
            return self.synthesize_from_embedding(memory, spk.detach(), max_frames)


def stop_targets(lengths: Tensor, width: int) -> Tensor:
    """1.0 on each item's final valid frame, 0 elsewhere."""
    t = torch.zeros(len(lengths), width)
    t[torch.arange(len(lengths)), lengths - 1] = 1.0
    return t


def tts_loss(
    predicted_mel: Tensor,
    target_mel: Tensor,
    stop_logits: Tensor,
    stop_target: Tensor,
    frame_mask: Tensor | None = None,
    stop_weight: float = 1.0,
) -> Tensor:
    """Masked MSE over mel frames plus binary cross-entropy over stop logits."""
    if predicted_mel.shape != target_mel.shape:
        raise ValueError(f"mel shape mismatch {tuple(predicted_mel.shape)} vs {tuple(target_mel.shape)}")
    if stop_logits.shape != stop_target.shape or stop_logits.shape != predicted_mel.shape[:-1]:
        raise ValueError("stop logits/targets must match the mel frame layout")
    if frame_mask is None:
        frame_mask = torch.ones_like(stop_logits, dtype=torch.bool)
    m = frame_mask.to(predicted_mel.dtype)
    n_frames = m.sum()
    mse = (((predicted_mel - target_mel) ** 2).mean(dim=-1) * m).sum() / n_frames
    bce = F.binary_cross_entropy_with_logits(stop_logits, stop_target.to(stop_logits.dtype), reduction="none")
    return mse + stop_weight * (bce * m).sum() / n_frames
