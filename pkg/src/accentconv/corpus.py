"""Corpus manifests, per-speaker splitting and the synthetic accent corpus.

Manifest files are UTF-8 JSON lines. The first line is a header::

    {"accent_set": ["source", "target"], "inventory_name": "toy"}

and every following line is one utterance::

    {"id": "u1", "audio": "wavs/u1.wav", "speaker": "spk1",
     "accent": "target", "phonemes": ["p1", "p2"]}

Relative audio paths resolve against the manifest's directory.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import dsp
from .text import PhonemeInventory, save_inventory

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.jsonl"
PARALLEL_MANIFEST_NAME = "parallel_manifest.jsonl"
INVENTORY_NAME = "inventory.txt"


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class UtteranceRecord:
    utterance_id: str
    audio_path: Path
    speaker_id: str
    accent_label: str
    transcript: tuple[str, ...]

    def __post_init__(self):
        if not self.utterance_id:
            raise ManifestError("utterance_id must be non-empty")
        if not self.transcript:
            raise ManifestError(f"utterance {self.utterance_id!r} has an empty transcript")
        object.__setattr__(self, "audio_path", Path(self.audio_path))
        object.__setattr__(self, "transcript", tuple(self.transcript))

    def to_json(self, base_dir: Path | None = None) -> dict:
        audio = self.audio_path
        if base_dir is not None:
            try:
                audio = audio.relative_to(base_dir)
            except ValueError:
                pass
        return {
            "id": self.utterance_id,
            "audio": audio.as_posix(),
            "speaker": self.speaker_id,
            "accent": self.accent_label,
            "phonemes": list(self.transcript),
        }


@dataclass(frozen=True)
class CorpusManifest:
    records: tuple[UtteranceRecord, ...]
    accent_set: frozenset[str]
    inventory_name: str = "default"

    def __post_init__(self):
        records = tuple(self.records)
        accents = frozenset(self.accent_set)
        seen: set[str] = set()
        for r in records:
            if r.utterance_id in seen:
                raise ManifestError(f"duplicate utterance id {r.utterance_id!r}")
            seen.add(r.utterance_id)
            if r.accent_label not in accents:
                raise ManifestError(
                    f"utterance {r.utterance_id!r} has accent {r.accent_label!r} "
                    f"outside the declared set {sorted(accents)}"
                )
        object.__setattr__(self, "records", records)
        object.__setattr__(self, "accent_set", accents)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def speakers(self) -> list[str]:
        return sorted({r.speaker_id for r in self.records})

    def by_id(self) -> dict[str, UtteranceRecord]:
        return {r.utterance_id: r for r in self.records}

    def subset(self, records: Iterable[UtteranceRecord]) -> "CorpusManifest":
        return replace(self, records=tuple(records))

    def filter(self, *, accents: Iterable[str] | None = None, speakers: Iterable[str] | None = None):
        accents = set(accents) if accents is not None else None
        speakers = set(speakers) if speakers is not None else None
        return self.subset(
            r
            for r in self.records
            if (accents is None or r.accent_label in accents)
            and (speakers is None or r.speaker_id in speakers)
        )


def load_manifest(path) -> CorpusManifest:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    base = path.parent
    header = None
    records = []
    with path.open(encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                if not isinstance(obj, dict):
                    raise TypeError("line is not a JSON object")
                if header is None and "accent_set" in obj:
                    header = obj
                    continue
                audio = Path(obj["audio"])
                phonemes = obj["phonemes"]
                if not isinstance(phonemes, list) or not all(isinstance(p, str) for p in phonemes):
                    raise TypeError("phonemes must be a list of strings")
                records.append(
                    UtteranceRecord(
                        utterance_id=str(obj["id"]),
                        audio_path=audio if audio.is_absolute() else base / audio,
                        speaker_id=str(obj["speaker"]),
                        accent_label=str(obj["accent"]),
                        transcript=tuple(phonemes),
                    )
                )
            except (json.JSONDecodeError, KeyError, TypeError, ManifestError) as exc:
                raise ManifestError(f"{path}:{lineno}: malformed manifest line ({exc})") from exc
    if header is None:
        raise ManifestError(f"{path}: missing header line declaring accent_set")
    return CorpusManifest(tuple(records), frozenset(header["accent_set"]), header.get("inventory_name", "default"))


def write_manifest(manifest: CorpusManifest, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = path.parent.resolve()
    lines = [json.dumps({"accent_set": sorted(manifest.accent_set), "inventory_name": manifest.inventory_name})]
    for r in manifest.records:
        rec = r if r.audio_path.is_absolute() else replace(r, audio_path=r.audio_path.resolve())
        lines.append(json.dumps(rec.to_json(base)))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def split_corpus(manifest: CorpusManifest, eval_count_per_speaker: int, seed: int):
    """Seeded per-speaker hold-out. Both halves keep the input's record order."""
    if eval_count_per_speaker < 0:
        raise ValueError("eval_count_per_speaker must be >= 0")
    rng = np.random.default_rng(seed)
    eval_ids: set[str] = set()
    for spk in manifest.speakers:
        ids = [r.utterance_id for r in manifest.records if r.speaker_id == spk]
        if len(ids) <= eval_count_per_speaker and eval_count_per_speaker > 0:
            raise ManifestError(
                f"speaker {spk!r} has {len(ids)} utterances, needs more than {eval_count_per_speaker}"
            )
        order = rng.permutation(len(ids))
        eval_ids.update(ids[k] for k in order[:eval_count_per_speaker])
    train = manifest.subset(r for r in manifest.records if r.utterance_id not in eval_ids)
    held = manifest.subset(r for r in manifest.records if r.utterance_id in eval_ids)
    return train, held


# --------------------------------------------------------------------------
# synthetic accent corpus

# (first, second) formant-like frequencies in Hz for the default 10 phonemes
DEFAULT_RECIPES = (
    (300.0, 900.0),
    (300.0, 1800.0),
    (450.0, 1200.0),
    (450.0, 2400.0),
    (600.0, 1000.0),
    (600.0, 1700.0),
    (750.0, 1300.0),
    (750.0, 2200.0),
    (900.0, 1500.0),
    (900.0, 2600.0),
)

DEFAULT_SOURCE_SHIFTS = {
    "p1": (1.4, 1.0),
    "p3": (1.0, 0.8),
    "p6": (0.8, 1.0),
    "p8": (1.0, 1.25),
}


def _default_speakers():
    return (("tgt_a", 1.0), ("tgt_b", 0.92), ("tgt_c", 1.08), ("src_a", 1.04))


def _default_speaker_accents():
    return {"tgt_a": "target", "tgt_b": "target", "tgt_c": "target", "src_a": "source"}


def _default_perturbations():
    return {"target": {}, "source": dict(DEFAULT_SOURCE_SHIFTS)}


@dataclass(frozen=True)
class ToyCorpusSpec:
    num_phonemes: int = 10
    utterance_length_range: tuple[int, int] = (4, 10)
    num_utterances_per_split: int = 60
    train_utterances_per_speaker: int = 120
    speakers: tuple[tuple[str, float], ...] = field(default_factory=_default_speakers)
    speaker_accents: Mapping[str, str] = field(default_factory=_default_speaker_accents)
    accent_perturbations: Mapping[str, Mapping[str, tuple[float, float]]] = field(
        default_factory=_default_perturbations
    )
    target_accent: str = "target"
    sample_rate: int = dsp.SAMPLE_RATE
    seed: int = 0
    phoneme_duration: float = 0.120
    fade: float = 0.010
    amplitudes: tuple[float, float] = (0.3, 0.2)
    noise_level: float = 1e-3
    recipes: tuple[tuple[float, float], ...] | None = None
    # draw each transcript without replacement (no phoneme twice in one utterance)
    distinct_phonemes: bool = True

    def __post_init__(self):
        lo, hi = self.utterance_length_range
        problems = []
        if lo < 1 or lo > hi:
            problems.append(f"utterance_length_range {self.utterance_length_range} needs 1 <= min <= max")
        if self.num_phonemes < 1:
            problems.append("num_phonemes must be >= 1")
        if self.distinct_phonemes and hi > self.num_phonemes:
            problems.append(f"distinct_phonemes needs max length {hi} <= num_phonemes {self.num_phonemes}")
        for spk, scale in self.speakers:
            if scale <= 0:
                problems.append(f"speaker {spk!r} pitch_scale must be > 0")
            if spk not in self.speaker_accents:
                problems.append(f"speaker {spk!r} has no accent assignment")
        for accent, shifts in self.accent_perturbations.items():
            for ph, ratio in shifts.items():
                if min(_ratio_pair(ratio)) <= 0:
                    problems.append(f"accent {accent!r} phoneme {ph!r} shift ratios must be > 0")
        for spk, accent in self.speaker_accents.items():
            if accent not in self.accent_perturbations:
                problems.append(f"speaker {spk!r} uses undeclared accent {accent!r}")
        if self.target_accent not in self.accent_perturbations:
            problems.append(f"target accent {self.target_accent!r} is not declared")
        if self.recipes is not None and len(self.recipes) != self.num_phonemes:
            problems.append("recipes must list one (f1, f2) pair per phoneme")
        if self.recipes is None and self.num_phonemes > len(DEFAULT_RECIPES):
            problems.append(f"num_phonemes > {len(DEFAULT_RECIPES)} requires explicit recipes")
        if problems:
            raise ValueError("invalid toy corpus spec: " + "; ".join(problems))

    @property
    def symbols(self) -> tuple[str, ...]:
        return tuple(f"p{k}" for k in range(self.num_phonemes))

    @property
    def base_recipes(self) -> dict[str, tuple[float, float]]:
        recipes = self.recipes if self.recipes is not None else DEFAULT_RECIPES[: self.num_phonemes]
        return dict(zip(self.symbols, (tuple(r) for r in recipes)))

    @property
    def pitch_scales(self) -> dict[str, float]:
        return {spk: float(scale) for spk, scale in self.speakers}

    def formants(self, phoneme: str, accent: str, pitch_scale: float) -> tuple[float, float]:
        f1, f2 = self.base_recipes[phoneme]
        r1, r2 = _ratio_pair(self.accent_perturbations[accent].get(phoneme, (1.0, 1.0)))
        return f1 * r1 * pitch_scale, f2 * r2 * pitch_scale

    def to_dict(self) -> dict:
        return {
            "num_phonemes": self.num_phonemes,
            "utterance_length_range": list(self.utterance_length_range),
            "num_utterances_per_split": self.num_utterances_per_split,
            "train_utterances_per_speaker": self.train_utterances_per_speaker,
            "speakers": [list(s) for s in self.speakers],
            "speaker_accents": dict(self.speaker_accents),
            "accent_perturbations": {
                a: {p: list(_ratio_pair(r)) for p, r in shifts.items()}
                for a, shifts in self.accent_perturbations.items()
            },
            "target_accent": self.target_accent,
            "sample_rate": self.sample_rate,
            "seed": self.seed,
            "phoneme_duration": self.phoneme_duration,
            "fade": self.fade,
            "amplitudes": list(self.amplitudes),
            "noise_level": self.noise_level,
            "recipes": None if self.recipes is None else [list(r) for r in self.recipes],
            "distinct_phonemes": self.distinct_phonemes,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ToyCorpusSpec":
        known = set(cls().to_dict())
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown toy spec keys: {unknown}")
        kw = dict(d)
        if "utterance_length_range" in kw:
            kw["utterance_length_range"] = tuple(kw["utterance_length_range"])
        if "speakers" in kw:
            kw["speakers"] = tuple((str(s), float(p)) for s, p in kw["speakers"])
        if "amplitudes" in kw:
            kw["amplitudes"] = tuple(kw["amplitudes"])
        if kw.get("recipes") is not None:
            kw["recipes"] = tuple(tuple(r) for r in kw["recipes"])
        if "accent_perturbations" in kw:
            kw["accent_perturbations"] = {
                a: {p: _ratio_pair(r) for p, r in shifts.items()} for a, shifts in kw["accent_perturbations"].items()
            }
        return cls(**kw)


def _ratio_pair(ratio) -> tuple[float, float]:
    if isinstance(ratio, (int, float)):
        return float(ratio), float(ratio)
    r1, r2 = ratio
    return float(r1), float(r2)


def render_phoneme(freqs: tuple[float, float], spec: ToyCorpusSpec) -> np.ndarray:
    """One fixed-duration two-sinusoid segment with linear fades."""
    n = int(round(spec.phoneme_duration * spec.sample_rate))
    t = np.arange(n) / spec.sample_rate
    seg = spec.amplitudes[0] * np.sin(2 * np.pi * freqs[0] * t) + spec.amplitudes[1] * np.sin(
        2 * np.pi * freqs[1] * t
    )
    nf = min(int(round(spec.fade * spec.sample_rate)), n // 2)
    if nf > 0:
        ramp = np.linspace(0.0, 1.0, nf, endpoint=False)
        seg[:nf] *= ramp
        seg[n - nf :] *= ramp[::-1]
    return seg


def render_utterance(
    phonemes: Sequence[str], speaker_id: str, accent: str, spec: ToyCorpusSpec, noise_seed: int
) -> dsp.Waveform:
    scale = spec.pitch_scales[speaker_id]
    segments = [render_phoneme(spec.formants(p, accent, scale), spec) for p in phonemes]
    samples = np.concatenate(segments)
    if spec.noise_level > 0:
        samples = samples + spec.noise_level * np.random.default_rng(noise_seed).standard_normal(len(samples))
    return dsp.Waveform(samples, spec.sample_rate)


def toy_inventory(spec: ToyCorpusSpec) -> PhonemeInventory:
    return PhonemeInventory(spec.symbols, name="toy")


def generate_toy_corpus(spec: ToyCorpusSpec, out_dir) -> CorpusManifest:
    """Render the toy corpus to ``out_dir``.

    Writes ``wavs/``, ``manifest.jsonl``, ``inventory.txt``, ``toy_spec.json``
    and, for every utterance not in the target accent, a target-accent
    rendering of the same speaker/transcript/noise under ``parallel/`` listed
    in ``parallel_manifest.jsonl`` (same utterance ids).
    """
    out_dir = Path(out_dir)
    (out_dir / "wavs").mkdir(parents=True, exist_ok=True)
    (out_dir / "parallel").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    symbols = spec.symbols
    lo, hi = spec.utterance_length_range
    per_speaker = spec.train_utterances_per_speaker + spec.num_utterances_per_split

    records, parallel = [], []
    for spk, _scale in spec.speakers:
        accent = spec.speaker_accents[spk]
        for k in range(per_speaker):
            length = int(rng.integers(lo, hi + 1))
            if spec.distinct_phonemes:
                picks = rng.permutation(len(symbols))[:length]
            else:
                picks = rng.integers(0, len(symbols), size=length)
            transcript = tuple(symbols[i] for i in picks)
            noise_seed = int(rng.integers(0, 2**31 - 1))
            uid = f"{spk}_{k:04d}"
            wav_path = out_dir / "wavs" / f"{uid}.wav"
            dsp.write_wav(wav_path, render_utterance(transcript, spk, accent, spec, noise_seed))
            records.append(UtteranceRecord(uid, wav_path, spk, accent, transcript))
            if accent != spec.target_accent:
                par_path = out_dir / "parallel" / f"{uid}.wav"
                dsp.write_wav(par_path, render_utterance(transcript, spk, spec.target_accent, spec, noise_seed))
                parallel.append(UtteranceRecord(uid, par_path, spk, spec.target_accent, transcript))

    accents = frozenset(spec.accent_perturbations)
    manifest = CorpusManifest(tuple(records), accents, "toy")
    write_manifest(manifest, out_dir / MANIFEST_NAME)
    write_manifest(CorpusManifest(tuple(parallel), accents, "toy"), out_dir / PARALLEL_MANIFEST_NAME)
    save_inventory(toy_inventory(spec), out_dir / INVENTORY_NAME)
    (out_dir / "toy_spec.json").write_text(json.dumps(spec.to_dict(), indent=2), encoding="utf-8")
    log.info("wrote %d utterances (%d parallel) to %s", len(records), len(parallel), out_dir)
    return load_manifest(out_dir / MANIFEST_NAME)
