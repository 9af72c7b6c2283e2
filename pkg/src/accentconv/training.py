"""Two-stage training.

Stage 1 (``pretrain_tts``) fits the TTS on target-accent speech by minimising
L_TTS. Stage 2 (``train_speech_encoder``) freezes the TTS and fits the speech
encoder plus one conditioning row per source speaker on L_SE. A third entry
point, ``train_recognizer``, fits a speech encoder on L_TC alone; it is the
phoneme recognizer used for PER evaluation.

Runs are deterministic for a fixed seed: batch order comes from a seeded numpy
generator, torch is seeded and restricted to one thread for the duration.
"""

from __future__ import annotations

import contextlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import nn

from . import dsp
from .checkpoint import parameter_checksum, save_checkpoint
from .corpus import CorpusManifest, UtteranceRecord
from .losses import (
    CONTRASTIVE_FORMS,
    LossWeights,
    compose,
    contrastive as contrastive_term,
    mean_cosine,
    text_classification_loss,
    total_loss,
)
from .speech_encoder import SpeechEncoderConfig, SpeechEncoderModel
from .text import EOS, PAD, PhonemeInventory, encode_transcript
from .tts import TTSConfig, TTSModel, length_mask, stop_targets, tts_loss

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class TrainingDivergedError(TrainingError):
    def __init__(self, step: int, last_good: Path | None):
        where = f"; last good checkpoint at {last_good}" if last_good else ""
        super().__init__(f"non-finite loss at step {step}{where}")
        self.step = step
        self.last_good = last_good


@dataclass
class TrainConfig:
    stage: str = "tts"
    batch_size: int = 16
    learning_rate: float = 1e-3
    max_steps: int = 300
    seed: int = 0
    w_C: float = 30.0
    w_TC: float = 1.0
    temperature: float = 0.1
    contrastive: str = "infonce"
    grad_clip: float = 1.0
    validation_interval: int = 50
    checkpoint_interval: int = 0
    scale: str = "desk"
    d_emb: int = 64
    d_spk: int = 16
    rnn_dim: int = 64
    listener_dim: int = 64
    speller_dim: int = 64
    reduction_factor: int = 1
    target_accents: tuple[str, ...] = ("target",)

    def __post_init__(self):
        self.target_accents = tuple(self.target_accents)
        problems = self.validate()
        if problems:
            raise ValueError("invalid training config: " + "; ".join(problems))

    def validate(self) -> list[str]:
        problems = []
        if self.stage not in ("tts", "encoder", "recognizer"):
            problems.append(f"stage must be tts, encoder or recognizer, got {self.stage!r}")
        for name in ("batch_size", "max_steps", "d_emb", "d_spk", "rnn_dim", "listener_dim", "speller_dim"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be positive")
        if self.learning_rate <= 0:
            problems.append("learning_rate must be positive")
        if self.grad_clip <= 0:
            problems.append("grad_clip must be positive")
        if self.w_C < 0 or self.w_TC < 0:
            problems.append("loss weights must be non-negative")
        if self.temperature <= 0:
            problems.append("temperature must be positive")
        if self.contrastive not in CONTRASTIVE_FORMS:
            problems.append(f"contrastive must be one of {list(CONTRASTIVE_FORMS)}, got {self.contrastive!r}")
        if self.scale not in ("desk", "full"):
            problems.append(f"scale must be desk or full, got {self.scale!r}")
        if self.reduction_factor < 1:
            problems.append("reduction_factor must be >= 1")
        return problems

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.w_C, self.w_TC, self.temperature)

    def tts_config(self) -> TTSConfig:
        if self.scale == "full":
            cfg = TTSConfig.full()
            cfg.reduction_factor = self.reduction_factor
            return cfg
        return TTSConfig(
            d_emb=self.d_emb,
            d_spk=self.d_spk,
            conv_channels=self.d_emb,
            prenet_dim=self.rnn_dim,
            attention_rnn_dim=self.rnn_dim,
            decoder_rnn_dim=self.rnn_dim,
            attention_dim=self.rnn_dim,
            reduction_factor=self.reduction_factor,
        )

    def encoder_config(self, d_emb: int | None = None, d_spk: int | None = None) -> SpeechEncoderConfig:
        if self.scale == "full":
            cfg = SpeechEncoderConfig.full()
        else:
            cfg = SpeechEncoderConfig(
                d_emb=self.d_emb,
                listener_dim=self.listener_dim,
                speller_dim=self.speller_dim,
                token_dim=self.speller_dim,
                attention_dim=self.speller_dim,
                d_spk=self.d_spk,
            )
        if d_emb is not None:
            cfg.d_emb = d_emb
        if d_spk is not None:
            cfg.d_spk = d_spk
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        d["target_accents"] = list(self.target_accents)
        return d

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class TrainLogRecord:
    step: int
    losses: dict
    metrics: dict = field(default_factory=dict)
    wall_time: float = 0.0

    def to_json(self) -> str:
        return json.dumps({"step": self.step, "losses": self.losses, "metrics": self.metrics, "wall_time": self.wall_time})


# --------------------------------------------------------------------------
# features and batches


@dataclass
class Example:
    utterance_id: str
    speaker_id: str
    ids: np.ndarray  # phoneme ids, no specials
    mel: np.ndarray  # raw log-mel (T, 80)


def load_waveform(record: UtteranceRecord) -> dsp.Waveform:
    w = dsp.read_wav(record.audio_path)
    if w.sample_rate != dsp.SAMPLE_RATE:
        w = dsp.resample(w, dsp.SAMPLE_RATE)
    return w


def load_examples(manifest: CorpusManifest, inventory: PhonemeInventory) -> list[Example]:
    out = []
    for r in manifest.records:
        mel = dsp.mel_spectrogram(load_waveform(r))
        ids = np.array(encode_transcript(r.transcript, inventory).ids, dtype=np.int64)
        out.append(Example(r.utterance_id, r.speaker_id, ids, mel.values))
    return out


@dataclass
class Batch:
    ids: torch.Tensor  # (B, L)
    id_lengths: torch.Tensor
    mel: torch.Tensor  # (B, T, 80) normalised, zero padded
    mel_lengths: torch.Tensor
    speakers: list[str]

    @property
    def target_ids(self) -> torch.Tensor:
        """Transcript + EOS, PAD padded: (B, L + 1)."""
        b, l = self.ids.shape
        out = torch.full((b, l + 1), PAD, dtype=torch.long)
        out[:, :l] = self.ids
        out[torch.arange(b), self.id_lengths] = EOS
        return out


def make_batch(examples: Sequence[Example], stats: dsp.MelStats, dtype=torch.float32) -> Batch:
    b = len(examples)
    l = max(len(e.ids) for e in examples)
    t = max(len(e.mel) for e in examples)
    ids = torch.full((b, l), PAD, dtype=torch.long)
    mel = torch.zeros(b, t, dsp.N_MELS, dtype=dtype)
    for k, e in enumerate(examples):
        ids[k, : len(e.ids)] = torch.from_numpy(e.ids)
        norm = (e.mel - stats.mean) / stats.std
        mel[k, : len(e.mel)] = torch.from_numpy(norm).to(dtype)
    return Batch(
        ids,
        torch.tensor([len(e.ids) for e in examples]),
        mel,
        torch.tensor([len(e.mel) for e in examples]),
        [e.speaker_id for e in examples],
    )


class BatchSampler:
    """Epoch-wise seeded shuffling; deterministic for a given seed."""

    def __init__(self, n: int, batch_size: int, seed: int):
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = np.random.default_rng(seed)
        self._order: list[int] = []

    def next(self) -> list[int]:
        if len(self._order) < self.batch_size:
            self._order.extend(self.rng.permutation(self.n).tolist())
        out, self._order = self._order[: self.batch_size], self._order[self.batch_size :]
        return out


@contextlib.contextmanager
def deterministic(seed: int):
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    torch.manual_seed(seed)
    try:
        yield
    finally:
        torch.set_num_threads(threads)


def _clip_and_step(params, optimizer, clip):
    nn.utils.clip_grad_norm_(params, clip)
    optimizer.step()


# --------------------------------------------------------------------------
# stage 1


def check_target_only(manifest: CorpusManifest, target_accents: Iterable[str]) -> None:
    allowed = set(target_accents)
    for r in manifest.records:
        if r.accent_label not in allowed:
            raise TrainingError(
                f"TTS pretraining accepts target-accent data only; record {r.utterance_id!r} "
                f"has accent {r.accent_label!r} (allowed: {sorted(allowed)})"
            )


def tts_batch_loss(model: TTSModel, batch: Batch) -> torch.Tensor:
    spk = model.speaker_vectors(batch.speakers)
    out = model(batch.ids, batch.id_lengths, spk, batch.mel)
    t = batch.mel.shape[1]
    return tts_loss(
        out.mel, batch.mel, out.stop_logits, stop_targets(batch.mel_lengths, t), length_mask(batch.mel_lengths, t)
    )


def pretrain_tts(
    manifest: CorpusManifest,
    cfg: TrainConfig,
    inventory: PhonemeInventory,
    *,
    validation: CorpusManifest | None = None,
    log_path=None,
    checkpoint_dir=None,
    examples: list[Example] | None = None,
) -> tuple[TTSModel, list[TrainLogRecord]]:
    check_target_only(manifest, cfg.target_accents)
    examples = examples if examples is not None else load_examples(manifest, inventory)
    val_examples = load_examples(validation, inventory) if validation is not None else []
    stats = dsp.compute_stats(dsp.MelSpectrogram(e.mel) for e in examples)
    records: list[TrainLogRecord] = []
    with deterministic(cfg.seed):
        model = TTSModel(inventory, manifest.speakers, stats, cfg.tts_config())
        model.train()
        opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
        sampler = BatchSampler(len(examples), cfg.batch_size, cfg.seed)
        writer = _LogWriter(log_path)
        last_good = None
        start = time.perf_counter()
        for step in range(1, cfg.max_steps + 1):
            batch = make_batch([examples[i] for i in sampler.next()], stats)
            loss = tts_batch_loss(model, batch)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(step, last_good)
            opt.zero_grad()
            loss.backward()
            _clip_and_step(model.parameters(), opt, cfg.grad_clip)
            metrics = {}
            if val_examples and cfg.validation_interval and step % cfg.validation_interval == 0:
                metrics["val_L_TTS"] = _tts_validation(model, val_examples, stats)
            rec = TrainLogRecord(step, {"L_TTS": float(loss.detach())}, metrics, time.perf_counter() - start)
            records.append(rec)
            writer.write(rec)
            if checkpoint_dir and cfg.checkpoint_interval and step % cfg.checkpoint_interval == 0:
                last_good = Path(checkpoint_dir) / f"tts_step{step:06d}.ckpt"
                save_checkpoint(model, last_good, {"step": step})
        writer.close()
    model.eval()
    return model, records


def _tts_validation(model, examples, stats) -> float:
    was = model.training
    model.eval()
    with torch.no_grad():
        loss = float(tts_batch_loss(model, make_batch(examples, stats)))
    model.train(was)
    return loss


# --------------------------------------------------------------------------
# stage 2


def _freeze(model: nn.Module) -> list[bool]:
    flags = [p.requires_grad for p in model.parameters()]
    for p in model.parameters():
        p.requires_grad_(False)
    return flags


def _unfreeze(model: nn.Module, flags: list[bool]) -> None:
    for p, f in zip(model.parameters(), flags):
        p.requires_grad_(f)


def encoder_batch_losses(
    enc: SpeechEncoderModel, tts: TTSModel | None, batch: Batch, weights: LossWeights, form: str = "infonce"
):
    """Returns (L_SE tensor, L_C, L_TC, L_TTS tensors, speech_emb, text_emb).

    With ``tts=None`` (recognizer training) L_C and L_TTS are zero.
    """
    out = enc(batch.mel, batch.mel_lengths, batch.ids)
    l = batch.ids.shape[1]
    speech_emb = out.bottleneck[:, :l]
    l_tc = text_classification_loss(out.logits, batch.target_ids)
    zero = speech_emb.new_zeros(())
    if tts is None:
        return compose(zero, l_tc, zero, weights), zero, l_tc, zero, speech_emb, None
    with torch.no_grad():
        text_emb = tts.encode_text(batch.ids, batch.id_lengths)
    l_c = contrastive_term(form, speech_emb, text_emb, weights.temperature, batch.id_lengths)
    spk = enc.speaker_vectors(batch.speakers)
    dec = tts.decoder(speech_emb, batch.id_lengths, spk, batch.mel)
    t = batch.mel.shape[1]
    l_tts = tts_loss(
        dec.mel, batch.mel, dec.stop_logits, stop_targets(batch.mel_lengths, t), length_mask(batch.mel_lengths, t)
    )
    return compose(l_c, l_tc, l_tts, weights), l_c, l_tc, l_tts, speech_emb, text_emb


def train_speech_encoder(
    manifest: CorpusManifest,
    tts: TTSModel | None,
    cfg: TrainConfig,
    *,
    validation: CorpusManifest | None = None,
    log_path=None,
    checkpoint_dir=None,
    inventory: PhonemeInventory | None = None,
    stats: dsp.MelStats | None = None,
    examples: list[Example] | None = None,
) -> tuple[SpeechEncoderModel, list[TrainLogRecord]]:
    """Stage-2 training (``tts`` given) or recognizer training (``tts=None``)."""
    if tts is not None:
        inventory = tts.inventory
        stats = tts.stats
    if inventory is None or stats is None:
        raise TrainingError("recognizer training needs an inventory and mel stats")
    for r in manifest.records:
        if not r.transcript:
            raise TrainingError(f"record {r.utterance_id!r} has no transcript")
    examples = examples if examples is not None else load_examples(manifest, inventory)
    val_examples = load_examples(validation, inventory) if validation is not None else []
    weights = cfg.weights if tts is not None else LossWeights(0.0, 1.0, cfg.temperature)
    records: list[TrainLogRecord] = []

    frozen_flags = None
    if tts is not None:
        tts.eval()
        frozen_flags = _freeze(tts)
        before = parameter_checksum(tts)
    try:
        with deterministic(cfg.seed):
            enc_cfg = cfg.encoder_config(
                d_emb=tts.d_emb if tts is not None else None, d_spk=tts.cfg.d_spk if tts is not None else None
            )
            speakers = manifest.speakers if tts is not None else ()
            enc = SpeechEncoderModel(inventory, stats, enc_cfg, speakers)
            if tts is not None:
                if enc.d_emb != tts.d_emb:
                    raise TrainingError(f"speech embedding width {enc.d_emb} != TTS d_emb {tts.d_emb}")
                with torch.no_grad():
                    enc.speaker_table.weight.copy_(tts.speaker_table.weight.mean(0).expand_as(enc.speaker_table.weight))
            enc.train()
            opt = torch.optim.Adam(enc.parameters(), lr=cfg.learning_rate)
            sampler = BatchSampler(len(examples), cfg.batch_size, cfg.seed)
            writer = _LogWriter(log_path)
            last_good = None
            start = time.perf_counter()
            for step in range(1, cfg.max_steps + 1):
                batch = make_batch([examples[i] for i in sampler.next()], stats)
                loss, l_c, l_tc, l_tts, _, _ = encoder_batch_losses(enc, tts, batch, weights, cfg.contrastive)
                if not torch.isfinite(loss):
                    raise TrainingDivergedError(step, last_good)
                opt.zero_grad()
                loss.backward()
                _clip_and_step(enc.parameters(), opt, cfg.grad_clip)
                breakdown = total_loss(float(l_c.detach()), float(l_tc.detach()), float(l_tts.detach()), weights)
                metrics = {}
                if val_examples and cfg.validation_interval and step % cfg.validation_interval == 0:
                    metrics.update(_encoder_validation(enc, tts, val_examples, stats))
                rec = TrainLogRecord(step, breakdown.to_dict(), metrics, time.perf_counter() - start)
                records.append(rec)
                writer.write(rec)
                if checkpoint_dir and cfg.checkpoint_interval and step % cfg.checkpoint_interval == 0:
                    last_good = Path(checkpoint_dir) / f"encoder_step{step:06d}.ckpt"
                    save_checkpoint(enc, last_good, {"step": step})
            writer.close()
    finally:
        if tts is not None:
            _unfreeze(tts, frozen_flags)
    if tts is not None and parameter_checksum(tts) != before:
        raise TrainingError("TTS parameters changed during speech-encoder training")
    enc.eval()
    return enc, records


def train_recognizer(
    manifest: CorpusManifest,
    cfg: TrainConfig,
    inventory: PhonemeInventory,
    stats: dsp.MelStats | None = None,
    **kwargs,
) -> tuple[SpeechEncoderModel, list[TrainLogRecord]]:
    check_target_only(manifest, cfg.target_accents)
    examples = kwargs.pop("examples", None) or load_examples(manifest, inventory)
    if stats is None:
        stats = dsp.compute_stats(dsp.MelSpectrogram(e.mel) for e in examples)
    return train_speech_encoder(
        manifest, None, cfg, inventory=inventory, stats=stats, examples=examples, **kwargs
    )


def _encoder_validation(enc, tts, examples, stats) -> dict:
    was = enc.training
    enc.eval()
    with torch.no_grad():
        batch = make_batch(examples, stats)
        out = enc(batch.mel, batch.mel_lengths, batch.ids)
        l = batch.ids.shape[1]
        metrics = {"val_L_TC": float(text_classification_loss(out.logits, batch.target_ids))}
        if tts is not None:
            text_emb = tts.encode_text(batch.ids, batch.id_lengths)
            metrics["val_cosine"] = float(mean_cosine(out.bottleneck[:, :l], text_emb, batch.id_lengths))
    enc.train(was)
    return metrics


class _LogWriter:
    def __init__(self, path):
        self.f = None
        if path is not None:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            self.f = open(path, "w", encoding="utf-8")

    def write(self, rec: TrainLogRecord):
        if rec.step % 50 == 0 or rec.step == 1:
            log.info("step %d %s %s", rec.step, rec.losses, rec.metrics)
        if self.f is not None:
            self.f.write(rec.to_json() + "\n")

    def close(self):
        if self.f is not None:
            self.f.close()
            self.f = None


def read_log(path) -> list[dict]:
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]
