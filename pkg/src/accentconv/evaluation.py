"""Objective evaluation: phoneme/word error rates, the intra/inter-accent
PER protocol, embedding alignment, and a pluggable transcription client.

PER protocol: a recognizer trained on target-accent data decodes the
converted audio, the natural target-accent rendering and the natural
source-accent rendering of each utterance. ``per_intra`` is the error of the
converted decode against the target decode, ``per_inter`` against the source
decode. The denominator is the reference length.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Iterable, Mapping, Protocol, Sequence

import numpy as np
import torch

from . import _kernels, dsp
from .corpus import CorpusManifest
from .losses import mean_cosine
from .speech_encoder import SpeechEncoderModel
from .text import encode_transcript, pad_batch
from .tts import TTSModel


class IdMismatchError(ValueError):
    def __init__(self, problems: Sequence[str]):
        super().__init__("utterance id mismatch:\n  " + "\n  ".join(problems))
        self.problems = list(problems)


class TranscriptionError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# edit distance


def _as_int_arrays(a: Sequence[Hashable], b: Sequence[Hashable]) -> tuple[np.ndarray, np.ndarray]:
    codes: dict = {}
    x = np.array([codes.setdefault(s, len(codes)) for s in a], dtype=np.int64)
    y = np.array([codes.setdefault(s, len(codes)) for s in b], dtype=np.int64)
    return x, y


def levenshtein(a: Sequence[Hashable], b: Sequence[Hashable]) -> int:
    """Unit-cost insert/delete/substitute distance between two symbol lists."""
    return _kernels.levenshtein(*_as_int_arrays(a, b))


def edit_distance(a: Sequence[Hashable], b: Sequence[Hashable]) -> tuple[int, float]:
    """(distance, distance / len(b)); ``b`` is the reference."""
    if len(b) == 0:
        raise ValueError("error rate needs a non-empty reference")
    d = levenshtein(a, b)
    return d, d / len(b)


def format_percent(x: float) -> str:
    return f"{x:.2f}"


# --------------------------------------------------------------------------
# PER protocol


@dataclass
class PERRow:
    utterance_id: str
    converted: list
    target: list
    source: list
    rate_intra: float
    rate_inter: float


def _protocol_rate(hyp, ref) -> float:
    # a recognizer may decode nothing; score an empty reference as if it had length 1
    return levenshtein(hyp, ref) / max(len(ref), 1)


def per_protocol(
    converted: Mapping[str, Sequence],
    target_refs: Mapping[str, Sequence],
    source_refs: Mapping[str, Sequence],
) -> tuple[float, float, list[PERRow]]:
    """Returns (per_intra %, per_inter %, per-utterance rows)."""
    problems = []
    for name, refs in (("target", target_refs), ("source", source_refs)):
        missing = sorted(set(converted) - set(refs))
        extra = sorted(set(refs) - set(converted))
        if missing:
            problems.append(f"{name} refs missing ids: {missing}")
        if extra:
            problems.append(f"{name} refs have ids without a conversion: {extra}")
    if problems:
        raise IdMismatchError(problems)
    rows = []
    for uid in sorted(converted):
        hyp = list(converted[uid])
        intra = _protocol_rate(hyp, list(target_refs[uid]))
        inter = _protocol_rate(hyp, list(source_refs[uid]))
        rows.append(PERRow(uid, hyp, list(target_refs[uid]), list(source_refs[uid]), intra, inter))
    if not rows:
        return math.nan, math.nan, rows
    per_intra = 100.0 * float(np.mean([r.rate_intra for r in rows]))
    per_inter = 100.0 * float(np.mean([r.rate_inter for r in rows]))
    return per_intra, per_inter, rows


def recognize(recognizer: SpeechEncoderModel, w: dsp.Waveform, beam_width: int = 10) -> list[str]:
    """Phoneme symbols decoded from audio by the target-accent recognizer."""
    if w.sample_rate != dsp.SAMPLE_RATE:
        w = dsp.resample(w, dsp.SAMPLE_RATE)
    hyp = recognizer.beam_search_decode(dsp.mel_spectrogram(w), beam_width)
    return [recognizer.inventory.symbol_of(i) for i in hyp.ids]


# --------------------------------------------------------------------------
# embedding alignment


@torch.no_grad()
def embedding_alignment(
    enc: SpeechEncoderModel, tts: TTSModel, manifest: CorpusManifest, batch_size: int = 32
) -> float:
    """Mean teacher-forced cosine(speech_emb_i, text_emb_i) over all
    utterances and positions."""
    enc.eval()
    tts.eval()
    total, count = 0.0, 0
    records = list(manifest.records)
    for start in range(0, len(records), batch_size):
        chunk = records[start : start + batch_size]
        seqs = [encode_transcript(r.transcript, tts.inventory) for r in chunk]
        mels = []
        for r in chunk:
            w = dsp.read_wav(r.audio_path)
            if w.sample_rate != dsp.SAMPLE_RATE:
                w = dsp.resample(w, dsp.SAMPLE_RATE)
            mels.append(dsp.normalize(dsp.mel_spectrogram(w), enc.stats).values)
        ids, lens = pad_batch(seqs)
        ids_t, lens_t = torch.tensor(ids), torch.tensor(lens)
        t_max = max(len(m) for m in mels)
        mel = np.zeros((len(mels), t_max, dsp.N_MELS))
        for k, m in enumerate(mels):
            mel[k, : len(m)] = m
        dtype = next(enc.parameters()).dtype
        out = enc(torch.tensor(mel, dtype=dtype), torch.tensor([len(m) for m in mels]), ids_t)
        text_emb = tts.encode_text(ids_t, lens_t)
        n = int(lens.sum())
        total += float(mean_cosine(out.bottleneck[:, : ids.shape[1]], text_emb.to(dtype), lens_t)) * n
        count += n
    return total / count if count else math.nan


# --------------------------------------------------------------------------
# word error rate through a transcription client


class TranscriptionClient(Protocol):
    def transcribe(self, waveform: dsp.Waveform, *, key: str) -> list[str]: ...


class MockTranscriptionClient:
    """Table-driven stand-in: ``key`` -> word list. A missing key or a
    ``None`` entry raises ``TranscriptionError``."""

    def __init__(self, table: Mapping[str, Sequence[str] | None]):
        self.table = dict(table)

    @classmethod
    def from_file(cls, path) -> "MockTranscriptionClient":
        with open(path, encoding="utf-8") as f:
            table = json.load(f)
        if not isinstance(table, dict):
            raise ValueError(f"{path}: mock ASR table must be a JSON object id -> word list")
        return cls(table)

    def transcribe(self, waveform: dsp.Waveform, *, key: str) -> list[str]:
        words = self.table.get(key)
        if words is None:
            raise TranscriptionError(f"mock transcription unavailable for {key!r}")
        return list(words)


@dataclass
class WERResult:
    percent: float
    num_scored: int
    num_failed: int
    failures: dict = field(default_factory=dict)


def wer(
    client: TranscriptionClient,
    audio: Mapping[str, dsp.Waveform],
    references: Mapping[str, Sequence[str]],
) -> WERResult:
    """Mean word-level error rate; client failures are excluded and counted."""
    rates, failures = [], {}
    for key in sorted(audio):
        try:
            hyp = client.transcribe(audio[key], key=key)
        except Exception as exc:
            failures[key] = f"{type(exc).__name__}: {exc}"
            continue
        rates.append(edit_distance(hyp, list(references[key]))[1])
    pct = 100.0 * float(np.mean(rates)) if rates else math.nan
    return WERResult(pct, len(rates), len(failures), failures)


# --------------------------------------------------------------------------
# report


@dataclass
class EvalReport:
    per_intra: float
    per_inter: float
    rows: list[PERRow]
    wer: WERResult | None = None
    mean_cosine: float | None = None
    system: str = "TTS-AC"

    def to_dict(self) -> dict:
        d = {
            "system": self.system,
            "per_intra": self.per_intra,
            "per_inter": self.per_inter,
            "per_intra_str": format_percent(self.per_intra),
            "per_inter_str": format_percent(self.per_inter),
            "num_utterances": len(self.rows),
            "rows": [r.__dict__ for r in self.rows],
        }
        if self.wer is not None:
            d["wer"] = self.wer.percent
            d["wer_str"] = format_percent(self.wer.percent)
            d["wer_num_scored"] = self.wer.num_scored
            d["wer_num_failed"] = self.wer.num_failed
            d["wer_failures"] = self.wer.failures
        if self.mean_cosine is not None:
            d["mean_cosine"] = self.mean_cosine
        return d

    def write_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=1))
        return path

    def write_csv(self, path) -> Path:
        """One row in the layout system, WER, intra-PER, inter-PER."""
        path = Path(path)
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["system", "WER", "intra-PER", "inter-PER"])
            w.writerow(
                [
                    self.system,
                    format_percent(self.wer.percent) if self.wer is not None else "",
                    format_percent(self.per_intra),
                    format_percent(self.per_inter),
                ]
            )
        return path

    def write_plots(self, out_dir) -> list[Path]:
        """Histogram of per-utterance intra/inter PER (needs matplotlib)."""
        try:
            import matplotlib

            matplotlib.use("Agg")
            import matplotlib.pyplot as plt
        except ImportError as exc:  # pragma: no cover - optional extra
            raise RuntimeError("plots need matplotlib (pip install matplotlib)") from exc
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        fig, ax = plt.subplots(figsize=(5, 3.5))
        bins = np.linspace(0, max([1.0] + [r.rate_inter for r in self.rows] + [r.rate_intra for r in self.rows]), 21)
        ax.hist([100 * r.rate_intra for r in self.rows], bins=100 * bins, alpha=0.6, label="intra-accent")
        ax.hist([100 * r.rate_inter for r in self.rows], bins=100 * bins, alpha=0.6, label="inter-accent")
        ax.set_xlabel("PER (%)")
        ax.set_ylabel("utterances")
        ax.legend()
        fig.tight_layout()
        path = out_dir / "per_distribution.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        return [path]


def converted_ids(converted_dir) -> list[str]:
    return sorted(p.name[: -len(".wav")] for p in Path(converted_dir).glob("*.wav"))


def evaluate_converted(
    converted_dir,
    target_refs: CorpusManifest,
    source_refs: CorpusManifest,
    recognizer: SpeechEncoderModel,
    beam_width: int = 10,
    asr: TranscriptionClient | None = None,
    ids: Iterable[str] | None = None,
) -> EvalReport:
    """Decode converted/target/source audio with the recognizer and apply the
    PER protocol. Reference manifests may list more utterances than were
    converted; every converted id must appear in both."""
    converted_dir = Path(converted_dir)
    ids = sorted(ids) if ids is not None else converted_ids(converted_dir)
    tgt, src = target_refs.by_id(), source_refs.by_id()
    problems = [f"{uid}: not in target refs" for uid in ids if uid not in tgt]
    problems += [f"{uid}: not in source refs" for uid in ids if uid not in src]
    if problems:
        raise IdMismatchError(problems)
    recognizer.eval()
    conv_dec, tgt_dec, src_dec, audio = {}, {}, {}, {}
    with torch.no_grad():
        for uid in ids:
            w = dsp.read_wav(converted_dir / f"{uid}.wav")
            audio[uid] = w
            conv_dec[uid] = recognize(recognizer, w, beam_width)
            tgt_dec[uid] = recognize(recognizer, dsp.read_wav(tgt[uid].audio_path), beam_width)
            src_dec[uid] = recognize(recognizer, dsp.read_wav(src[uid].audio_path), beam_width)
    per_intra, per_inter, rows = per_protocol(conv_dec, tgt_dec, src_dec)
    wer_result = None
    if asr is not None:
        wer_result = wer(asr, audio, {uid: list(tgt[uid].transcript) for uid in ids})
    return EvalReport(per_intra, per_inter, rows, wer_result)
