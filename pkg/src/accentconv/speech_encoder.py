"""Listen-attend-spell speech encoder.

The listener is two pyramid BLSTM layers: each concatenates adjacent frame
pairs (repeating the final frame when the length is odd) and runs a BLSTM,
so T frames become ceil(ceil(T/2)/2) states. The speller is one LSTM with
location-aware attention over those states. At every speller step the state
and attention context go through a linear bottleneck of width ``d_emb`` (the
speech embedding) and then the output projection over the inventory + EOS.

Output class ``c`` corresponds to token id ``c + 2``: class 0 is EOS, class
``k >= 1`` is symbol id ``k + 2``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import NamedTuple, Sequence

import numpy as np
import torch
from torch import Tensor, nn
from torch.nn import functional as F

from . import dsp
from .text import EOS, SOS, PhonemeInventory, PhonemeSequence
from .tts import LocationSensitiveAttention, length_mask

CLASS_OFFSET = EOS  # token id = class index + 2


@dataclass
class SpeechEncoderConfig:
    d_emb: int = 64
    listener_dim: int = 64
    speller_dim: int = 64
    token_dim: int = 64
    attention_dim: int = 64
    location_filters: int = 8
    location_kernel: int = 15
    d_spk: int = 16

    @classmethod
    def full(cls) -> "SpeechEncoderConfig":
        return cls(
            d_emb=512,
            listener_dim=256,
            speller_dim=512,
            token_dim=512,
            attention_dim=128,
            location_filters=32,
            location_kernel=31,
            d_spk=256,
        )

    @classmethod
    def from_dict(cls, d: dict) -> "SpeechEncoderConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def to_dict(self) -> dict:
        return asdict(self)


def pyramid_length(t: int) -> int:
    return -(-t // 2)


def listener_length(t: int) -> int:
    return pyramid_length(pyramid_length(t))


def pyramid_stack(x: Tensor, lengths: Tensor) -> tuple[Tensor, Tensor]:
    """Concatenate frame pairs. Odd lengths repeat their final valid frame."""
    b, t, d = x.shape
    width = t + (t % 2)
    if width != t:
        x = F.pad(x, (0, 0, 0, 1))
    odd = (lengths % 2) == 1
    if odd.any():
        x = x.clone()
        rows = torch.nonzero(odd).squeeze(1)
        x[rows, lengths[rows]] = x[rows, lengths[rows] - 1]
    return x.reshape(b, width // 2, 2 * d), (lengths + 1) // 2


class Listener(nn.Module):
    def __init__(self, in_dim: int, hidden: int, layers: int = 2):
        super().__init__()
        dims = [in_dim] + [2 * hidden] * (layers - 1)
        self.layers = nn.ModuleList(
            [nn.LSTM(2 * d, hidden, batch_first=True, bidirectional=True) for d in dims]
        )

    def forward(self, x: Tensor, lengths: Tensor) -> tuple[Tensor, Tensor]:
        for lstm in self.layers:
            x, lengths = pyramid_stack(x, lengths)
            packed = nn.utils.rnn.pack_padded_sequence(x, lengths.cpu(), batch_first=True, enforce_sorted=False)
            out, _ = lstm(packed)
            x, _ = nn.utils.rnn.pad_packed_sequence(out, batch_first=True, total_length=x.shape[1])
        return x, lengths


class SpellerOutput(NamedTuple):
    bottleneck: Tensor  # (B, L + 1, d_emb), last row is the EOS step
    logits: Tensor  # (B, L + 1, classes)
    alignments: Tensor  # (B, L + 1, U)


class BeamHypothesis(NamedTuple):
    ids: tuple[int, ...]
    log_prob: float
    bottleneck_trace: np.ndarray  # (len(ids), d_emb)
    finished: bool

    @property
    def num_scored(self) -> int:
        return len(self.ids) + (1 if self.finished else 0)

    @property
    def score(self) -> float:
        """Length-normalised log-probability used for final ranking."""
        return self.log_prob / max(self.num_scored, 1)


class SpeechEncoderModel(nn.Module):
    def __init__(
        self,
        inventory: PhonemeInventory,
        stats: dsp.MelStats,
        cfg: SpeechEncoderConfig | None = None,
        speakers: Sequence[str] = (),
    ):
        super().__init__()
        self.cfg = cfg or SpeechEncoderConfig()
        self.inventory = inventory
        self.stats = stats
        self.speakers = list(speakers)
        c = self.cfg
        self.listener = Listener(dsp.N_MELS, c.listener_dim)
        memory_dim = 2 * c.listener_dim
        self.token_embedding = nn.Embedding(inventory.num_ids, c.token_dim)
        self.speller_rnn = nn.LSTMCell(c.token_dim + memory_dim, c.speller_dim)
        self.attention = LocationSensitiveAttention(
            c.speller_dim, memory_dim, c.attention_dim, c.location_filters, c.location_kernel
        )
        self.bottleneck = nn.Linear(c.speller_dim + memory_dim, c.d_emb)
        self.output = nn.Linear(c.d_emb, inventory.num_classes)
        # source-speaker conditioning rows for the frozen TTS decoder
        self.speaker_table = nn.Embedding(max(len(self.speakers), 1), c.d_spk)
        nn.init.normal_(self.speaker_table.weight, std=0.3)

    @property
    def d_emb(self) -> int:
        return self.cfg.d_emb

    def speaker_vectors(self, speaker_ids: Sequence[str]) -> Tensor:
        try:
            idx = [self.speakers.index(s) for s in speaker_ids]
        except ValueError:
            raise KeyError(f"speech encoder has no speaker row for one of {list(speaker_ids)}") from None
        return self.speaker_table(torch.tensor(idx, dtype=torch.long))

    def has_speaker(self, speaker_id: str) -> bool:
        return speaker_id in self.speakers

    # ---- listener -----------------------------------------------------

    def listen(self, mel: Tensor, lengths: Tensor) -> tuple[Tensor, Tensor]:
        """mel: (B, T, 80) normalised features."""
        return self.listener(mel, lengths)

    def listener_forward(self, mel: dsp.MelSpectrogram) -> np.ndarray:
        x = torch.tensor(dsp.normalize(mel, self.stats).values, dtype=self._dtype)[None]
        with torch.no_grad():
            h, _ = self.listen(x, torch.tensor([mel.num_frames]))
        return h[0].double().numpy()

    @property
    def _dtype(self):
        return self.output.weight.dtype

    # ---- speller ------------------------------------------------------

    def _speller_init(self, memory: Tensor):
        b, u, d = memory.shape
        z = memory.new_zeros
        return {
            "h": z(b, self.cfg.speller_dim),
            "c": z(b, self.cfg.speller_dim),
            "context": z(b, d),
            "align": z(b, u),
            "cum_align": z(b, u),
        }

    def _speller_step(self, prev_ids: Tensor, memory, processed, mask, st):
        x = torch.cat([self.token_embedding(prev_ids), st["context"]], dim=-1)
        h, c = self.speller_rnn(x, (st["h"], st["c"]))
        context, align = self.attention(h, memory, processed, st["align"], st["cum_align"], mask)
        bottleneck = self.bottleneck(torch.cat([h, context], dim=-1))
        logits = self.output(bottleneck)
        new = {"h": h, "c": c, "context": context, "align": align, "cum_align": st["cum_align"] + align}
        return bottleneck, logits, align, new

    def spell(self, memory: Tensor, memory_lengths: Tensor, targets: Tensor) -> SpellerOutput:
        """Teacher-forced speller. ``targets`` (B, L) are phoneme ids (PAD-padded);
        the decoder is fed SOS + targets and runs L + 1 steps."""
        b, l = targets.shape
        inputs = torch.cat([torch.full((b, 1), SOS, dtype=torch.long), targets], dim=1)
        mask = length_mask(memory_lengths, memory.shape[1])
        processed = self.attention.process_memory(memory)
        st = self._speller_init(memory)
        bns, logits, aligns = [], [], []
        for i in range(l + 1):
            bn, lg, al, st = self._speller_step(inputs[:, i], memory, processed, mask, st)
            bns.append(bn)
            logits.append(lg)
            aligns.append(al)
        return SpellerOutput(torch.stack(bns, 1), torch.stack(logits, 1), torch.stack(aligns, 1))

    def forward(self, mel: Tensor, mel_lengths: Tensor, targets: Tensor) -> SpellerOutput:
        memory, mem_lengths = self.listen(mel, mel_lengths)
        return self.spell(memory, mem_lengths, targets)

    def teacher_forced_forward(self, mel: dsp.MelSpectrogram, target: PhonemeSequence):
        """Returns (speech_emb (L, d_emb), logits (L + 1, classes), alignments)."""
        if len(target) < 1:
            raise ValueError("target sequence must have at least one phoneme")
        target.validate(self.inventory)
        x = torch.tensor(dsp.normalize(mel, self.stats).values, dtype=self._dtype)[None]
        y = torch.tensor([target.ids], dtype=torch.long)
        with torch.no_grad():
            out = self(x, torch.tensor([mel.num_frames]), y)
        l = len(target)
        return (
            out.bottleneck[0, :l].double().numpy(),
            out.logits[0].double().numpy(),
            out.alignments[0].double().numpy(),
        )

    # ---- decoding -----------------------------------------------------

    @torch.no_grad()
    def beam_search(
        self,
        mel: dsp.MelSpectrogram,
        beam_width: int = 10,
        max_len: int | None = None,
    ) -> list[BeamHypothesis]:
        """All finished (or max_len-truncated) hypotheses, best first.

        Candidates are ranked by raw log-probability during search with ties
        broken by the lexicographically smaller id sequence; the returned list
        is ordered by length-normalised score (same tie-break).
        """
        if beam_width < 1:
            raise ValueError("beam_width must be >= 1")
        if mel.num_frames < 1:
            raise ValueError("cannot decode an empty mel spectrogram")
        x = torch.tensor(dsp.normalize(mel, self.stats).values, dtype=self._dtype)[None]
        memory, mem_len = self.listen(x, torch.tensor([mel.num_frames]))
        if max_len is None:
            max_len = 2 * int(mem_len[0])
        processed = self.attention.process_memory(memory)
        mask = length_mask(mem_len, memory.shape[1])

        live = [((), 0.0, [])]  # (ids, log_prob, trace)
        states = self._speller_init(memory)
        finished: list[BeamHypothesis] = []
        for _ in range(max_len):
            n = len(live)
            prev = torch.tensor([h[0][-1] if h[0] else SOS for h in live], dtype=torch.long)
            bn, logits, _, states = self._speller_step(
                prev, memory.expand(n, -1, -1), processed.expand(n, -1, -1), mask.expand(n, -1), states
            )
            logp = torch.log_softmax(logits.double(), dim=-1).numpy()
            bn_np = bn.double().numpy()
            candidates = []
            for k, (ids, lp, _trace) in enumerate(live):
                for cls in range(logp.shape[1]):
                    candidates.append((lp + float(logp[k, cls]), ids + (cls + CLASS_OFFSET,), k))
            candidates.sort(key=lambda c: (-c[0], c[1]))
            next_live, parents = [], []
            for score, ids, k in candidates[:beam_width]:
                trace = live[k][2]
                if ids[-1] == EOS:
                    finished.append(BeamHypothesis(ids[:-1], score, _trace_array(trace, self.cfg.d_emb), True))
                else:
                    next_live.append((ids, score, trace + [bn_np[k]]))
                    parents.append(k)
            if not next_live:
                live = []
                break
            idx = torch.tensor(parents, dtype=torch.long)
            states = {key: v[idx] for key, v in states.items()}
            live = next_live
        # hypotheses still open after max_len tokens are kept as truncated
        for ids, lp, trace in live:
            finished.append(BeamHypothesis(ids, lp, _trace_array(trace, self.cfg.d_emb), False))
        finished.sort(key=lambda h: (-h.score, h.ids))
        return finished

    def beam_search_decode(
        self, mel: dsp.MelSpectrogram, beam_width: int = 10, max_len: int | None = None
    ) -> BeamHypothesis:
        return self.beam_search(mel, beam_width, max_len)[0]

    @torch.no_grad()
    def greedy_decode(self, mel: dsp.MelSpectrogram, max_len: int | None = None) -> tuple[int, ...]:
        """Argmax decoding (ties -> smallest id); independent of ``beam_search``."""
        x = torch.tensor(dsp.normalize(mel, self.stats).values, dtype=self._dtype)[None]
        memory, mem_len = self.listen(x, torch.tensor([mel.num_frames]))
        if max_len is None:
            max_len = 2 * int(mem_len[0])
        processed = self.attention.process_memory(memory)
        mask = length_mask(mem_len, memory.shape[1])
        st = self._speller_init(memory)
        prev = SOS
        ids: list[int] = []
        for _ in range(max_len):
            _, logits, _, st = self._speller_step(torch.tensor([prev]), memory, processed, mask, st)
            cls = int(torch.argmax(logits[0].double()))
            token = cls + CLASS_OFFSET
            if token == EOS:
                break
            ids.append(token)
            prev = token
        return tuple(ids)


def _trace_array(trace, d_emb: int) -> np.ndarray:
    if not trace:
        return np.zeros((0, d_emb))
    return np.stack(trace)


def classes_from_ids(ids: Tensor) -> Tensor:
    """Token ids (EOS or symbols) -> output class indices."""
    return ids - CLASS_OFFSET
