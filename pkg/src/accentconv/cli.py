"""Command-line entry point: ``accentconv <command> ...``.

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 numerical divergence during training.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from . import corpus, dsp
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .convert import DEFAULT_BEAM, ConversionError, Converter, convert_batch
from .corpus import ManifestError
from .evaluation import IdMismatchError, MockTranscriptionClient, embedding_alignment, evaluate_converted
from .text import UnknownSymbolError
from .training import (
    TrainConfig,
    TrainingDivergedError,
    TrainingError,
    pretrain_tts,
    train_recognizer,
    train_speech_encoder,
)

log = logging.getLogger("accentconv")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


class UsageError(ValueError):
    pass


# --------------------------------------------------------------------------
# config


def config_help() -> str:
    lines = ["config keys (flat JSON object; every key optional):"]
    for f in dataclasses.fields(TrainConfig):
        if f.name == "stage":
            continue  # set by the subcommand
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        lines.append(f"  {f.name:<20} default {json.dumps(list(default) if isinstance(default, tuple) else default)}")
    lines.append('  "scale": "full" selects the full-size widths (512/256/512); "desk" uses the width keys.')
    lines.append("environment: AC_SEED overrides the config seed; AC_DISABLE_NUMBA=1 forces the numpy kernels.")
    return "\n".join(lines)


def _check_type(name: str, value, default) -> str | None:
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, tuple):
        ok = isinstance(value, list) and all(isinstance(v, str) for v in value)
    else:  # pragma: no cover
        ok = True
    return None if ok else f"{name}: expected {type(default).__name__}, got {json.dumps(value)}"


def build_config(raw: dict, stage: str) -> TrainConfig:
    """Validate a flat key/value mapping; every problem is reported at once."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    defaults = TrainConfig()
    known = set(TrainConfig.keys()) - {"stage"}
    problems = [f"unknown config key {k!r}" for k in sorted(set(raw) - known)]
    values = {}
    for k, v in raw.items():
        if k in known:
            msg = _check_type(k, v, getattr(defaults, k))
            if msg:
                problems.append(msg)
            else:
                values[k] = tuple(v) if isinstance(v, list) else v
    if "AC_SEED" in os.environ:
        try:
            values["seed"] = int(os.environ["AC_SEED"])
        except ValueError:
            problems.append(f"AC_SEED must be an integer, got {os.environ['AC_SEED']!r}")
    values["stage"] = stage
    if not problems:
        cfg = TrainConfig.__new__(TrainConfig)
        for f in dataclasses.fields(TrainConfig):
            setattr(cfg, f.name, values.get(f.name, getattr(defaults, f.name)))
        cfg.target_accents = tuple(cfg.target_accents)
        problems += cfg.validate()
    if problems:
        raise ConfigError("invalid config:\n  " + "\n  ".join(problems))
    return cfg


def load_config(path: str | None, stage: str) -> TrainConfig:
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    return build_config(raw, stage)


# --------------------------------------------------------------------------
# commands


def cmd_gen_toy(args) -> int:
    spec = corpus.ToyCorpusSpec()
    if args.spec:
        try:
            raw = json.loads(Path(args.spec).read_text(encoding="utf-8"))
            spec = corpus.ToyCorpusSpec.from_dict(raw)
        except (json.JSONDecodeError, ValueError, TypeError) as exc:
            raise ConfigError(f"{args.spec}: {exc}") from None
    out = Path(args.out)
    manifest = corpus.generate_toy_corpus(spec, out)
    train, held = corpus.split_corpus(manifest, spec.num_utterances_per_split, spec.seed)
    corpus.write_manifest(train, out / "train.jsonl")
    corpus.write_manifest(held, out / "eval.jsonl")
    log.info("wrote %d utterances to %s (train %d, eval %d)", len(manifest.records), out, len(train.records), len(held.records))
    return EXIT_OK


def _select(manifest, accents, keep: bool):
    wanted = set(accents)
    records = [r for r in manifest.records if (r.accent_label in wanted) == keep]
    return manifest.subset(records)


def _validation(path, accents, keep):
    return _select(corpus.load_manifest(path), accents, keep) if path else None


def cmd_train_tts(args) -> int:
    cfg = load_config(args.config, "tts")
    manifest = _select(corpus.load_manifest(args.data), cfg.target_accents, True)
    if not manifest.records:
        raise ManifestError(f"{args.data}: no target-accent records ({list(cfg.target_accents)})")
    inventory = _inventory_for(args.data, manifest)
    model, _ = pretrain_tts(
        manifest, cfg, inventory,
        validation=_validation(args.val, cfg.target_accents, True),
        log_path=args.log or Path(args.out).with_suffix(".log.jsonl"),
        checkpoint_dir=Path(args.out).parent,
    )
    save_checkpoint(model, args.out, {"stage": "tts", "config": cfg.to_dict()})
    log.info("saved TTS checkpoint to %s", args.out)
    return EXIT_OK


def cmd_train_encoder(args) -> int:
    cfg = load_config(args.config, "encoder")
    tts = load_checkpoint(args.tts, section="tts")
    manifest = _select(corpus.load_manifest(args.data), cfg.target_accents, False)
    if not manifest.records:
        raise ManifestError(f"{args.data}: no source-accent records")
    enc, _ = train_speech_encoder(
        manifest, tts, cfg,
        validation=_validation(args.val, cfg.target_accents, False),
        log_path=args.log or Path(args.out).with_suffix(".log.jsonl"),
        checkpoint_dir=Path(args.out).parent,
    )
    save_checkpoint(enc, args.out, {"stage": "encoder", "config": cfg.to_dict()})
    log.info("saved speech-encoder checkpoint to %s", args.out)
    return EXIT_OK


def cmd_train_recognizer(args) -> int:
    cfg = load_config(args.config, "recognizer")
    manifest = _select(corpus.load_manifest(args.data), cfg.target_accents, True)
    if not manifest.records:
        raise ManifestError(f"{args.data}: no target-accent records")
    inventory = _inventory_for(args.data, manifest)
    stats = load_checkpoint(args.tts, section="tts").stats if args.tts else None
    rec, _ = train_recognizer(
        manifest, cfg, inventory, stats,
        validation=_validation(args.val, cfg.target_accents, True),
        log_path=args.log or Path(args.out).with_suffix(".log.jsonl"),
    )
    save_checkpoint(rec, args.out, {"stage": "recognizer", "config": cfg.to_dict()})
    log.info("saved recognizer checkpoint to %s", args.out)
    return EXIT_OK


def _inventory_for(manifest_path, manifest):
    # prefer an inventory file next to the manifest; else collect symbols in first-seen order
    from .text import PhonemeInventory, load_inventory

    path = Path(manifest_path).parent / "inventory.txt"
    if path.exists():
        return load_inventory(path, manifest.inventory_name)
    seen = []
    for r in manifest.records:
        for s in r.transcript:
            if s not in seen:
                seen.append(s)
    return PhonemeInventory(tuple(seen), manifest.inventory_name)


def cmd_convert(args) -> int:
    enc = load_checkpoint(args.enc, section="speech_encoder")
    tts = load_checkpoint(args.tts, section="tts")
    conv = Converter(enc, tts, args.beam)  # width/inventory check before any audio
    src = Path(args.inp)
    if src.suffix.lower() == ".wav":
        if not args.speaker:
            raise UsageError("--speaker is required when --in is a WAV file")
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        audio, mel, trace = conv.convert(dsp.read_wav(src), args.speaker)
        dsp.write_wav(out / f"{src.stem}.wav", audio)
        dsp.write_mel_dump(out / f"{src.stem}.mel", mel)
        (out / f"{src.stem}.trace.json").write_text(json.dumps(trace.to_dict(), indent=1))
        return EXIT_OK
    manifest = corpus.load_manifest(src)
    report = convert_batch(manifest, enc, tts, args.out, args.beam, speaker_id=args.speaker)
    summary = json.loads(report.read_text())
    log.info("converted %d/%d utterances; report at %s", summary["num_converted"], summary["num_requested"], report)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    recognizer = load_checkpoint(args.recognizer, section="speech_encoder")
    asr = None
    if args.asr:
        kind, _, table = args.asr.partition(":")
        if kind != "mock" or not table:
            raise UsageError("--asr must look like mock:<table.json> (only the mock client ships)")
        asr = MockTranscriptionClient.from_file(table)
    target_refs = corpus.load_manifest(args.target_refs)
    source_refs = corpus.load_manifest(args.source_refs)
    report = evaluate_converted(args.converted, target_refs, source_refs, recognizer, args.beam, asr)
    if args.enc and args.tts:
        enc = load_checkpoint(args.enc, section="speech_encoder")
        tts = load_checkpoint(args.tts, section="tts")
        ids = {row.utterance_id for row in report.rows}
        report.mean_cosine = embedding_alignment(enc, tts, source_refs.subset([r for r in source_refs.records if r.utterance_id in ids]))
    out = Path(args.out) if args.out else Path(args.converted) / "eval_report.json"
    report.write_json(out)
    if args.csv:
        report.write_csv(args.csv)
    if args.plots:
        report.write_plots(args.plots)
    log.info("per_intra %.2f%% per_inter %.2f%%; report at %s", report.per_intra, report.per_inter, out)
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="accentconv",
        description="Accent conversion with a TTS-guided speech encoder.",
        epilog=config_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_text, fn):
        sp = sub.add_parser(name, help=help_text, epilog=config_help(), formatter_class=argparse.RawDescriptionHelpFormatter)
        sp.set_defaults(fn=fn)
        return sp

    sp = add("gen-toy", "generate the synthetic accent corpus", cmd_gen_toy)
    sp.add_argument("--spec", help="toy corpus spec JSON (defaults when omitted)")
    sp.add_argument("--out", required=True, help="output directory")

    for name, fn, help_text in (
        ("train-tts", cmd_train_tts, "stage 1: pretrain the TTS on target-accent records"),
        ("train-encoder", cmd_train_encoder, "stage 2: train the speech encoder against a frozen TTS"),
        ("train-recognizer", cmd_train_recognizer, "train the target-accent phoneme recognizer used for PER"),
    ):
        sp = add(name, help_text, fn)
        sp.add_argument("--config", help="flat JSON config (see keys below)")
        sp.add_argument("--data", required=True, help="training manifest (JSONL)")
        sp.add_argument("--val", help="validation manifest")
        sp.add_argument("--out", required=True, help="output checkpoint path")
        sp.add_argument("--log", help="training log path (JSONL); default next to --out")
        if name == "train-encoder":
            sp.add_argument("--tts", required=True, help="stage-1 TTS checkpoint")
        elif name == "train-recognizer":
            sp.add_argument("--tts", help="TTS checkpoint whose mel stats to reuse")

    sp = add("convert", "convert source-accent audio", cmd_convert)
    sp.add_argument("--enc", required=True, help="speech-encoder checkpoint")
    sp.add_argument("--tts", required=True, help="TTS checkpoint")
    sp.add_argument("--in", dest="inp", required=True, help="a WAV file or a manifest")
    sp.add_argument("--speaker", help="speaker id (required for WAV input; overrides manifest speakers)")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--beam", type=int, default=DEFAULT_BEAM, help="beam width (default %(default)s)")

    sp = add("evaluate", "PER/WER evaluation of converted audio", cmd_evaluate)
    sp.add_argument("--converted", required=True, help="directory written by convert")
    sp.add_argument("--target-refs", required=True, help="manifest of target-accent references")
    sp.add_argument("--source-refs", required=True, help="manifest of source-accent references")
    sp.add_argument("--recognizer", required=True, help="recognizer checkpoint")
    sp.add_argument("--asr", help="transcription client, mock:<table.json>")
    sp.add_argument("--beam", type=int, default=DEFAULT_BEAM, help="recognizer beam width")
    sp.add_argument("--enc", help="speech-encoder checkpoint (adds mean_cosine with --tts)")
    sp.add_argument("--tts", help="TTS checkpoint (adds mean_cosine with --enc)")
    sp.add_argument("--out", help="report path (default <converted>/eval_report.json)")
    sp.add_argument("--csv", help="also write a CSV summary here")
    sp.add_argument("--plots", help="also write PER plots into this directory")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    if getattr(args, "beam", 1) < 1:
        parser.error("--beam must be >= 1")
    try:
        return args.fn(args)
    except (ConfigError, UsageError) as exc:
        print(f"accentconv: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDivergedError as exc:
        print(f"accentconv: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (
        ManifestError,
        CheckpointError,
        TrainingError,
        IdMismatchError,
        ConversionError,
        UnknownSymbolError,
        KeyError,
        OSError,
        ValueError,
    ) as exc:
        print(f"accentconv: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
