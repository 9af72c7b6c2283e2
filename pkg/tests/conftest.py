from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pytest
import torch

from accentconv import corpus, dsp, training
from accentconv.checkpoint import parameter_checksum
from accentconv.convert import convert_batch
from accentconv.speech_encoder import SpeechEncoderConfig, SpeechEncoderModel
from accentconv.tts import TTSConfig, TTSModel

torch.set_num_threads(1)


def small_spec(**kw) -> corpus.ToyCorpusSpec:
    base = dict(train_utterances_per_speaker=6, num_utterances_per_split=2, utterance_length_range=(3, 5))
    base.update(kw)
    return corpus.ToyCorpusSpec(**base)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """Few-utterance toy corpus shared by fast unit tests."""
    spec = small_spec()
    root = tmp_path_factory.mktemp("small_toy")
    manifest = corpus.generate_toy_corpus(spec, root)
    return spec, root, manifest


@pytest.fixture(scope="session")
def small_stats(small_corpus):
    _, _, manifest = small_corpus
    return dsp.compute_stats(dsp.mel_spectrogram(dsp.read_wav(r.audio_path)) for r in manifest.records[:8])


@pytest.fixture()
def tiny_tts(small_corpus, small_stats):
    spec, _, manifest = small_corpus
    torch.manual_seed(0)
    cfg = TTSConfig(
        d_emb=16, d_spk=4, conv_channels=16, prenet_dim=16, attention_rnn_dim=16, decoder_rnn_dim=16, attention_dim=16
    )
    return TTSModel(corpus.toy_inventory(spec), manifest.filter(accents=["target"]).speakers, small_stats, cfg).eval()


@pytest.fixture()
def tiny_encoder(small_corpus, small_stats):
    spec, _, manifest = small_corpus
    torch.manual_seed(1)
    cfg = SpeechEncoderConfig(d_emb=16, listener_dim=16, speller_dim=16, token_dim=16, attention_dim=16, d_spk=4)
    return SpeechEncoderModel(corpus.toy_inventory(spec), small_stats, cfg, ["src_a"]).eval()


# --------------------------------------------------------------------------
# full desk-scale pipeline (acceptance and trained-model checks)


@dataclass
class PipelineRun:
    root: Path
    spec: corpus.ToyCorpusSpec
    manifest: corpus.CorpusManifest
    parallel: corpus.CorpusManifest
    train: corpus.CorpusManifest
    held: corpus.CorpusManifest
    tts: object
    enc: object
    tts_logs: list
    enc_logs: list
    tts_checksum_before: str
    tts_checksum_after: str
    converted_dir: Path | None = None
    extras: dict = field(default_factory=dict)

    @property
    def held_source(self) -> corpus.CorpusManifest:
        return self.held.filter(accents=[a for a in self.manifest.accent_set if a != self.spec.target_accent])

    @property
    def held_target(self) -> corpus.CorpusManifest:
        return self.held.filter(accents=[self.spec.target_accent])


def run_pipeline(
    root: Path,
    spec: corpus.ToyCorpusSpec,
    tts_steps: int = 300,
    enc_steps: int = 500,
    convert_count: int | None = None,
    seed: int = 0,
) -> PipelineRun:
    root = Path(root)
    manifest = corpus.generate_toy_corpus(spec, root / "toy")
    parallel = corpus.load_manifest(root / "toy" / corpus.PARALLEL_MANIFEST_NAME)
    train, held = corpus.split_corpus(manifest, spec.num_utterances_per_split, spec.seed)
    inv = corpus.toy_inventory(spec)
    target = [spec.target_accent]
    source = [a for a in manifest.accent_set if a != spec.target_accent]

    tts_cfg = training.TrainConfig(stage="tts", max_steps=tts_steps, seed=seed)
    tts, tts_logs = training.pretrain_tts(train.filter(accents=target), tts_cfg, inv, log_path=root / "tts_log.jsonl")
    before = parameter_checksum(tts)
    enc_cfg = training.TrainConfig(stage="encoder", max_steps=enc_steps, seed=seed)
    enc, enc_logs = training.train_speech_encoder(
        train.filter(accents=source), tts, enc_cfg, log_path=root / "encoder_log.jsonl"
    )
    after = parameter_checksum(tts)
    run = PipelineRun(root, spec, manifest, parallel, train, held, tts, enc, tts_logs, enc_logs, before, after)
    if convert_count != 0:
        records = run.held_source.records
        if convert_count is not None:
            records = records[:convert_count]
        run.converted_dir = root / "converted"
        convert_batch(run.held_source.subset(records), enc, tts, run.converted_dir)
    return run


@pytest.fixture(scope="session")
def pipeline(tmp_path_factory) -> PipelineRun:
    """Default toy spec, 300 TTS steps, 500 encoder steps, every held-out
    source utterance converted."""
    return run_pipeline(tmp_path_factory.mktemp("pipeline"), corpus.ToyCorpusSpec())


@pytest.fixture(scope="session")
def ablation_encoder(pipeline):
    src = [a for a in pipeline.manifest.accent_set if a != pipeline.spec.target_accent]
    cfg = training.TrainConfig(stage="encoder", max_steps=500, seed=0, w_C=0.0)
    enc, _ = training.train_speech_encoder(pipeline.train.filter(accents=src), pipeline.tts, cfg)
    return enc


@pytest.fixture(scope="session")
def recognizer(pipeline):
    cfg = training.TrainConfig(stage="recognizer", max_steps=int(os.environ.get("AC_RECOGNIZER_STEPS", "500")), seed=0)
    target = pipeline.train.filter(accents=[pipeline.spec.target_accent])
    rec, _ = training.train_recognizer(target, cfg, corpus.toy_inventory(pipeline.spec), stats=pipeline.tts.stats)
    return rec


def sine(freq: float, seconds: float = 1.0, rate: int = dsp.SAMPLE_RATE, amp: float = 0.5) -> dsp.Waveform:
    t = np.arange(int(round(seconds * rate))) / rate
    return dsp.Waveform(amp * np.sin(2 * np.pi * freq * t), rate)


def finite_difference_check(loss_fn, param: torch.Tensor, indices, step: float = 1e-3):
    """Central differences vs autograd on selected flat indices of ``param``.

    Returns a list of (analytic, numeric) pairs. ``loss_fn`` takes no
    arguments and must be deterministic.
    """
    param.grad = None
    loss = loss_fn()
    (grad,) = torch.autograd.grad(loss, [param])
    flat = param.data.view(-1)
    pairs = []
    with torch.no_grad():
        for i in indices:
            orig = float(flat[i])
            flat[i] = orig + step
            up = float(loss_fn())
            flat[i] = orig - step
            down = float(loss_fn())
            flat[i] = orig
            pairs.append((float(grad.view(-1)[i]), (up - down) / (2 * step)))
    return pairs


def relative_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


# --------------------------------------------------------------------------
# acceptance verdict lines, echoed after the run

ACCEPTANCE_LINES: list[str] = []


def verdict(criterion: int, ok: bool, detail: str) -> bool:
    line = f"AC{criterion:<2} {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s[2:4])):
            terminalreporter.write_line(line)
