from __future__ import annotations

import json
import os
import stat
import subprocess
import sys

import pytest

from accentconv import cli, corpus, dsp
from accentconv.checkpoint import load_checkpoint

from conftest import small_spec

TINY_CONFIG = {
    "max_steps": 20,
    "d_emb": 16,
    "d_spk": 4,
    "rnn_dim": 16,
    "listener_dim": 16,
    "speller_dim": 16,
    "batch_size": 4,
    "validation_interval": 0,
}


def run(argv, capsys=None):
    code = cli.main([str(a) for a in argv])
    err = capsys.readouterr().err if capsys is not None else ""
    return code, err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """gen-toy and all three training commands on a few-utterance corpus."""
    root = tmp_path_factory.mktemp("cli")
    (root / "spec.json").write_text(json.dumps(small_spec().to_dict()))
    (root / "cfg.json").write_text(json.dumps(TINY_CONFIG))
    toy = root / "toy"
    assert cli.main(["gen-toy", "--spec", str(root / "spec.json"), "--out", str(toy)]) == 0
    common = ["--config", str(root / "cfg.json"), "--data", str(toy / "train.jsonl")]
    assert cli.main(["train-tts", *common, "--out", str(root / "tts.ckpt")]) == 0
    assert cli.main(["train-encoder", *common, "--tts", str(root / "tts.ckpt"), "--out", str(root / "enc.ckpt")]) == 0
    assert cli.main(["train-recognizer", *common, "--tts", str(root / "tts.ckpt"), "--out", str(root / "rec.ckpt")]) == 0
    return root


# --------------------------------------------------------------------------
# config


def test_help_lists_every_config_key():
    text = cli.build_parser().format_help()
    for key in cli.TrainConfig.keys():
        if key != "stage":
            assert key in text, key
    sub = subprocess.run(
        [sys.executable, "-m", "accentconv.cli", "train-tts", "--help"], capture_output=True, text=True, check=True
    )
    assert "learning_rate" in sub.stdout and "AC_SEED" in sub.stdout


def test_unknown_key_named_exit_2(tmp_path, capsys):
    (tmp_path / "c.json").write_text(json.dumps({"learnin_rate": 0.1, "batch_size": "x"}))
    code, err = run(["train-tts", "--config", tmp_path / "c.json", "--data", tmp_path / "none.jsonl",
                     "--out", tmp_path / "t.ckpt"], capsys)
    assert code == 2
    assert "learnin_rate" in err and "batch_size" in err


def test_ac_seed_overrides_config(monkeypatch):
    monkeypatch.setenv("AC_SEED", "77")
    assert cli.build_config({"seed": 3}, "tts").seed == 77
    monkeypatch.setenv("AC_SEED", "abc")
    with pytest.raises(cli.ConfigError, match="AC_SEED"):
        cli.build_config({}, "tts")


def test_full_scale_preset():
    cfg = cli.build_config({"scale": "full"}, "encoder")
    enc = cfg.encoder_config(512, 256)
    assert (enc.listener_dim, enc.speller_dim, enc.d_emb) == (256, 512, 512)


# --------------------------------------------------------------------------
# exit codes


def test_missing_required_flag_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as err:
        cli.main(["train-encoder", "--data", str(tmp_path / "m.jsonl"), "--out", str(tmp_path / "e.ckpt")])
    assert err.value.code == 2


def test_missing_manifest_is_data_error(tmp_path, capsys):
    code, err = run(["train-tts", "--data", tmp_path / "absent.jsonl", "--out", tmp_path / "t.ckpt"], capsys)
    assert code == 3 and "absent.jsonl" in err


@pytest.mark.skipif(hasattr(os, "geteuid") and os.geteuid() == 0, reason="root ignores directory permissions")
def test_gen_toy_unwritable_dir(tmp_path, capsys):
    locked = tmp_path / "locked"
    locked.mkdir()
    locked.chmod(stat.S_IRUSR | stat.S_IXUSR)
    try:
        code, err = run(["gen-toy", "--out", locked / "toy"], capsys)
    finally:
        locked.chmod(stat.S_IRWXU)
    assert code != 0 and err


def test_gen_toy_out_is_a_file(tmp_path, capsys):
    (tmp_path / "file").write_text("x")
    code, err = run(["gen-toy", "--out", tmp_path / "file" / "toy"], capsys)
    assert code == 3 and err


def test_wrong_checkpoint_section_is_data_error(workspace, tmp_path, capsys):
    # the TTS checkpoint passed where the encoder belongs
    code, err = run(["convert", "--enc", workspace / "tts.ckpt", "--tts", workspace / "tts.ckpt",
                     "--in", workspace / "toy" / "eval.jsonl", "--out", tmp_path], capsys)
    assert code == 3 and err


def test_bad_beam_rejected(workspace, tmp_path):
    with pytest.raises(SystemExit) as err:
        cli.main(["convert", "--enc", "a", "--tts", "b", "--in", "c", "--out", str(tmp_path), "--beam", "0"])
    assert err.value.code == 2


def test_wav_input_needs_speaker(workspace, tmp_path, capsys):
    wav = next((workspace / "toy" / "wavs").glob("*.wav"))
    code, err = run(["convert", "--enc", workspace / "enc.ckpt", "--tts", workspace / "tts.ckpt",
                     "--in", wav, "--out", tmp_path], capsys)
    assert code == 2 and "--speaker" in err


# --------------------------------------------------------------------------
# end to end


def test_gen_toy_repeatable(tmp_path):
    (tmp_path / "spec.json").write_text(json.dumps(small_spec().to_dict()))
    for name in ("a", "b"):
        assert cli.main(["gen-toy", "--spec", str(tmp_path / "spec.json"), "--out", str(tmp_path / name)]) == 0
    for f in ("train.jsonl", "eval.jsonl", corpus.MANIFEST_NAME):
        a = (tmp_path / "a" / f).read_text().replace(str(tmp_path / "a"), "")
        b = (tmp_path / "b" / f).read_text().replace(str(tmp_path / "b"), "")
        assert a == b, f


def test_training_writes_logs_and_loadable_checkpoints(workspace):
    for name, section in (("tts", "tts"), ("enc", "speech_encoder"), ("rec", "speech_encoder")):
        load_checkpoint(workspace / f"{name}.ckpt", section=section)
        lines = (workspace / f"{name}.log.jsonl").read_text().splitlines()
        assert len(lines) == TINY_CONFIG["max_steps"]


def test_convert_beam_one_is_greedy(workspace, tmp_path):
    out = tmp_path / "conv"
    assert cli.main(["convert", "--enc", str(workspace / "enc.ckpt"), "--tts", str(workspace / "tts.ckpt"),
                     "--in", str(workspace / "toy" / "eval.jsonl"), "--out", str(out), "--beam", "1"]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["beam_width"] == 1 and report["num_requested"] == report["num_converted"] + report["num_failed"]
    assert report["utterances"]
    enc = load_checkpoint(workspace / "enc.ckpt", section="speech_encoder")
    by_id = {r.utterance_id: r for r in corpus.load_manifest(workspace / "toy" / "eval.jsonl").records}
    for row in report["utterances"]:
        mel = dsp.mel_spectrogram(dsp.read_wav(by_id[row["utterance_id"]].audio_path))
        assert tuple(row["decoded_ids"]) == tuple(enc.greedy_decode(mel))


def test_evaluate_identity_and_optional_wer(workspace, tmp_path):
    toy = workspace / "toy"
    parallel = corpus.load_manifest(toy / corpus.PARALLEL_MANIFEST_NAME)
    conv = tmp_path / "conv"
    conv.mkdir()
    for r in parallel.records[:3]:
        (conv / f"{r.utterance_id}.wav").write_bytes(r.audio_path.read_bytes())
    base = ["evaluate", "--converted", conv, "--target-refs", toy / corpus.PARALLEL_MANIFEST_NAME,
            "--source-refs", toy / corpus.MANIFEST_NAME, "--recognizer", workspace / "rec.ckpt", "--beam", 2]
    assert cli.main([str(a) for a in base + ["--csv", tmp_path / "r.csv"]]) == 0
    report = json.loads((conv / "eval_report.json").read_text())
    assert report["per_intra"] == 0.0 and "wer" not in report
    assert (tmp_path / "r.csv").read_text().startswith("system,WER,intra-PER,inter-PER")

    table = {r.utterance_id: list(r.transcript) for r in parallel.records[:3]}
    (tmp_path / "asr.json").write_text(json.dumps(table))
    out = tmp_path / "with_wer.json"
    assert cli.main([str(a) for a in base + ["--asr", f"mock:{tmp_path / 'asr.json'}", "--out", out]]) == 0
    assert json.loads(out.read_text())["wer"] == 0.0


def test_evaluate_bad_asr_spec(workspace, tmp_path, capsys):
    toy = workspace / "toy"
    code, err = run(["evaluate", "--converted", tmp_path, "--target-refs", toy / corpus.PARALLEL_MANIFEST_NAME,
                     "--source-refs", toy / corpus.MANIFEST_NAME, "--recognizer", workspace / "rec.ckpt",
                     "--asr", "whisper"], capsys)
    assert code == 2 and "mock:" in err
