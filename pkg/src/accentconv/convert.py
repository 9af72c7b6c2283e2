"""Accent conversion at run time.

    source wav -> log-mel -> speech encoder (beam search) -> bottleneck trace
               -> frozen TTS decoder (free running) -> log-mel -> Griffin-Lim

No transcript enters this path: the phoneme sequence and the per-phoneme
speech embedding both come from the encoder's own beam search.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from . import _kernels, dsp
from .checkpoint import check_compatible
from .corpus import CorpusManifest
from .speech_encoder import SpeechEncoderModel
from .text import decode_ids
from .tts import TTSModel

log = logging.getLogger(__name__)

DEFAULT_BEAM = 10


class ConversionError(RuntimeError):
    pass


@dataclass
class ConversionTrace:
    decoded_ids: list[int]
    decoded_symbols: list[str]
    beam_score: float
    log_prob: float
    beam_finished: bool
    mel_frames: int
    truncated: bool
    speaker_id: str

    def to_dict(self) -> dict:
        return asdict(self)


def default_max_frames(source_frames: int) -> int:
    """Free-running cap: three times the source length plus slack."""
    return 3 * int(source_frames) + 50


class Converter:
    """Bundles a trained encoder with its frozen TTS; widths are checked here,
    before any audio is touched."""

    def __init__(
        self,
        enc: SpeechEncoderModel,
        tts: TTSModel,
        beam_width: int = DEFAULT_BEAM,
        gl_iterations: int = dsp.GRIFFIN_LIM_ITERS,
    ):
        check_compatible(enc, tts)
        if beam_width < 1:
            raise ValueError("beam_width must be >= 1")
        self.enc = enc.eval()
        self.tts = tts.eval()
        self.beam_width = beam_width
        self.gl_iterations = gl_iterations

    def speaker_vector(self, speaker_id: str) -> torch.Tensor:
        # source speakers live in the encoder; target speakers in the TTS table
        if self.enc.has_speaker(speaker_id):
            return self.enc.speaker_vectors([speaker_id])[0]
        if speaker_id in self.tts.speakers:
            return self.tts.speaker_vectors([speaker_id])[0]
        raise KeyError(
            f"unknown speaker {speaker_id!r}: not a stage-2 source speaker {list(self.enc.speakers)} "
            f"nor a TTS speaker {list(self.tts.speakers)}"
        )

    @torch.no_grad()
    def convert_mel(
        self, mel: dsp.MelSpectrogram, speaker_id: str, max_frames: int | None = None
    ) -> tuple[dsp.MelSpectrogram, ConversionTrace]:
        spk = self.speaker_vector(speaker_id)
        hyp = self.enc.beam_search_decode(mel, self.beam_width)
        if len(hyp.ids) == 0:
            raise ConversionError("beam search produced an empty hypothesis")
        if max_frames is None:
            max_frames = default_max_frames(mel.num_frames)
        memory = torch.tensor(hyp.bottleneck_trace, dtype=next(self.tts.parameters()).dtype)
        synth = self.tts.synthesize_from_embedding(memory, spk, max_frames)
        if synth.truncated:
            log.warning("decoder hit max_frames=%d without stopping", max_frames)
        trace = ConversionTrace(
            decoded_ids=[int(i) for i in hyp.ids],
            decoded_symbols=decode_ids(hyp.ids, self.enc.inventory),
            beam_score=float(hyp.score),
            log_prob=float(hyp.log_prob),
            beam_finished=bool(hyp.finished),
            mel_frames=synth.mel.num_frames,
            truncated=bool(synth.truncated),
            speaker_id=speaker_id,
        )
        return synth.mel, trace

    def convert(
        self, w: dsp.Waveform, speaker_id: str, max_frames: int | None = None
    ) -> tuple[dsp.Waveform, dsp.MelSpectrogram, ConversionTrace]:
        if w.sample_rate != dsp.SAMPLE_RATE:
            w = dsp.resample(w, dsp.SAMPLE_RATE)
        mel, trace = self.convert_mel(dsp.mel_spectrogram(w), speaker_id, max_frames)
        return dsp.griffin_lim(mel, self.gl_iterations), mel, trace


def convert_utterance(
    w: dsp.Waveform,
    enc: SpeechEncoderModel,
    tts: TTSModel,
    speaker_id: str,
    beam_width: int = DEFAULT_BEAM,
    gl_iterations: int = dsp.GRIFFIN_LIM_ITERS,
) -> tuple[dsp.Waveform, ConversionTrace]:
    audio, _mel, trace = Converter(enc, tts, beam_width, gl_iterations).convert(w, speaker_id)
    return audio, trace


def convert_batch(
    manifest: CorpusManifest,
    enc: SpeechEncoderModel,
    tts: TTSModel,
    out_dir,
    beam_width: int = DEFAULT_BEAM,
    speaker_id: str | None = None,
    gl_iterations: int = dsp.GRIFFIN_LIM_ITERS,
) -> Path:
    """Convert every record; failures are recorded and the batch continues.

    Writes ``{id}.wav``, ``{id}.trace.json``, ``{id}.mel`` (the converted
    log-mel before inversion) and ``report.json``. Transcripts in the
    manifest are ignored.
    """
    conv = Converter(enc, tts, beam_width, gl_iterations)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    done, failures = [], []
    for r in manifest.records:
        spk = speaker_id or r.speaker_id
        try:
            w = dsp.read_wav(r.audio_path)
            audio, mel, trace = conv.convert(w, spk)
        except Exception as exc:  # fault isolation: one bad file must not stop the batch
            log.warning("%s: %s", r.utterance_id, exc)
            failures.append({"utterance_id": r.utterance_id, "error": f"{type(exc).__name__}: {exc}"})
            continue
        dsp.write_wav(out_dir / f"{r.utterance_id}.wav", audio)
        dsp.write_mel_dump(out_dir / f"{r.utterance_id}.mel", mel)
        (out_dir / f"{r.utterance_id}.trace.json").write_text(json.dumps(trace.to_dict(), indent=1))
        done.append({"utterance_id": r.utterance_id, **trace.to_dict()})
    report = {
        "num_requested": len(manifest.records),
        "num_converted": len(done),
        "num_failed": len(failures),
        "beam_width": beam_width,
        "utterances": done,
        "failures": failures,
    }
    path = out_dir / "report.json"
    path.write_text(json.dumps(report, indent=1))
    return path


def mel_distance(a: dsp.MelSpectrogram | np.ndarray, b: dsp.MelSpectrogram | np.ndarray) -> float:
    """DTW log-mel distance: symmetric-step path cost with Euclidean frame
    cost, divided by (n + m)."""
    x = a.values if isinstance(a, dsp.MelSpectrogram) else np.asarray(a, dtype=np.float64)
    y = b.values if isinstance(b, dsp.MelSpectrogram) else np.asarray(b, dtype=np.float64)
    if len(x) == 0 or len(y) == 0:
        return math.inf
    sq = (x * x).sum(1)[:, None] + (y * y).sum(1)[None, :] - 2.0 * x @ y.T
    cost = np.sqrt(np.maximum(sq, 0.0))
    return float(_kernels.dtw(np.ascontiguousarray(cost))) / (len(x) + len(y))
