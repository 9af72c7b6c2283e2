"""Waveform I/O, resampling, log-mel features and Griffin-Lim inversion."""

from __future__ import annotations

import math
import struct
import wave
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.signal import get_window, resample_poly

from ._kernels import overlap_add

SAMPLE_RATE = 16000
N_MELS = 80
WIN_LENGTH = 800  # 50 ms at 16 kHz
HOP_LENGTH = 200  # 12.5 ms at 16 kHz
N_FFT = WIN_LENGTH
LOG_FLOOR = 1e-5
STD_FLOOR = 1e-5
GRIFFIN_LIM_ITERS = 60

MEL_DUMP_MAGIC = 0x4C454D41  # b"AMEL" little-endian
MEL_DUMP_VERSION = 1


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError(f"waveform must be mono (1-D), got shape {samples.shape}")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("waveform contains non-finite samples")
        object.__setattr__(self, "samples", samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def __len__(self) -> int:
        return len(self.samples)


@dataclass(frozen=True)
class MelSpectrogram:
    values: np.ndarray  # (T, 80)
    frame_shift: float = HOP_LENGTH / SAMPLE_RATE
    window: float = WIN_LENGTH / SAMPLE_RATE
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[1] != N_MELS:
            raise ValueError(f"mel must be (T, {N_MELS}), got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("mel contains non-finite values")
        object.__setattr__(self, "values", values)

    @property
    def num_frames(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class MelStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        std = np.maximum(np.asarray(self.std, dtype=np.float64), STD_FLOOR)
        if mean.shape != (N_MELS,) or std.shape != (N_MELS,):
            raise ValueError("mel stats must be 80-vectors")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(std))):
            raise ValueError("mel stats must be finite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "MelStats":
        return cls(np.asarray(d["mean"]), np.asarray(d["std"]))


# --------------------------------------------------------------------------
# WAV I/O


def read_wav(path) -> Waveform:
    """Read a 16-bit PCM mono WAV file."""
    with wave.open(str(path), "rb") as f:
        if f.getnchannels() != 1:
            raise ValueError(f"{path}: expected mono audio, got {f.getnchannels()} channels")
        if f.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit PCM")
        rate = f.getframerate()
        raw = f.readframes(f.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples, rate)


def write_wav(path, w: Waveform) -> None:
    pcm = np.clip(np.round(w.samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(int(w.sample_rate))
        f.writeframes(pcm.tobytes())


def resample(w: Waveform, target_rate: int) -> Waveform:
    if target_rate <= 0:
        raise ValueError(f"target_rate must be positive, got {target_rate}")
    if target_rate == w.sample_rate:
        return Waveform(w.samples.copy(), w.sample_rate)
    ratio = Fraction(int(target_rate), int(w.sample_rate))
    out = resample_poly(w.samples, ratio.numerator, ratio.denominator)
    return Waveform(out, int(target_rate))


# --------------------------------------------------------------------------
# framing / STFT


def num_frames(num_samples: int, hop: int = HOP_LENGTH) -> int:
    return math.ceil(num_samples / hop)


def _pad_for_frames(x: np.ndarray, n_frames: int) -> np.ndarray:
    half = N_FFT // 2
    right = (n_frames - 1) * HOP_LENGTH + N_FFT - half - len(x)
    if len(x) > 1:
        padded = np.pad(x, (half, 0), mode="reflect")
        if right > 0:
            padded = np.pad(padded, (0, right), mode="reflect")
    else:
        padded = np.pad(x, (half, max(right, 0)), mode="edge")
    return padded[: (n_frames - 1) * HOP_LENGTH + N_FFT]


def _frames(padded: np.ndarray, n_frames: int) -> np.ndarray:
    view = np.lib.stride_tricks.sliding_window_view(padded, N_FFT)
    return view[:: HOP_LENGTH][:n_frames]


_WINDOW = get_window("hann", WIN_LENGTH, fftbins=True)


def _stft_padded(padded: np.ndarray, n_frames: int) -> np.ndarray:
    return np.fft.rfft(_frames(padded, n_frames) * _WINDOW, axis=1)


def _istft_padded(spec: np.ndarray) -> np.ndarray:
    """Least-squares inverse of ``_stft_padded`` (Griffin & Lim's ISTFT)."""
    n_frames = spec.shape[0]
    length = (n_frames - 1) * HOP_LENGTH + N_FFT
    frames = np.fft.irfft(spec, n=N_FFT, axis=1) * _WINDOW
    num = overlap_add(frames, HOP_LENGTH, length)
    den = overlap_add(np.tile(_WINDOW**2, (n_frames, 1)), HOP_LENGTH, length)
    return num / np.maximum(den, 1e-8)


def stft_magnitude(samples: np.ndarray) -> np.ndarray:
    n = num_frames(len(samples))
    return np.abs(_stft_padded(_pad_for_frames(samples, n), n))


# --------------------------------------------------------------------------
# mel filterbank


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(n_mels: int = N_MELS, fmin: float = 0.0, fmax: float = SAMPLE_RATE / 2):
    return mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))[1:-1]


def mel_filterbank(
    n_mels: int = N_MELS,
    n_fft: int = N_FFT,
    sample_rate: int = SAMPLE_RATE,
    fmin: float = 0.0,
    fmax: float | None = None,
) -> np.ndarray:
    """HTK-scale triangular filters with unit peak, shape (n_mels, n_fft//2 + 1)."""
    fmax = sample_rate / 2 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.fft.rfftfreq(n_fft, 1.0 / sample_rate)
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lower) / (center - lower)
    falling = (upper - freqs[None, :]) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


_MEL_FB = mel_filterbank()
_MEL_FB_PINV = np.linalg.pinv(_MEL_FB)


def mel_spectrogram(w: Waveform, floor: float = LOG_FLOOR) -> MelSpectrogram:
    """Natural-log mel amplitudes, T = ceil(N / 200) center-padded frames."""
    if w.sample_rate != SAMPLE_RATE:
        raise ValueError(f"mel_spectrogram expects {SAMPLE_RATE} Hz audio, got {w.sample_rate}")
    if len(w) == 0:
        raise ValueError("cannot compute a mel spectrogram of an empty waveform")
    mag = stft_magnitude(w.samples)
    mel = mag @ _MEL_FB.T
    return MelSpectrogram(np.log(np.maximum(mel, floor)))


# --------------------------------------------------------------------------
# normalization


def compute_stats(mels: Iterable[MelSpectrogram]) -> MelStats:
    arrays = [m.values for m in mels]
    if not arrays:
        raise ValueError("compute_stats needs at least one mel spectrogram")
    stacked = np.concatenate(arrays, axis=0)
    return MelStats(stacked.mean(axis=0), stacked.std(axis=0))


def normalize(mel: MelSpectrogram, stats: MelStats) -> MelSpectrogram:
    return MelSpectrogram((mel.values - stats.mean) / stats.std)


def denormalize(mel: MelSpectrogram, stats: MelStats) -> MelSpectrogram:
    return MelSpectrogram(mel.values * stats.std + stats.mean)


# --------------------------------------------------------------------------
# Griffin-Lim


def mel_to_linear(mel: MelSpectrogram) -> np.ndarray:
    """Pseudo-inverse of the filterbank applied to exp(log-mel), clipped at 0."""
    return np.maximum(np.exp(mel.values) @ _MEL_FB_PINV.T, 0.0)


def spectral_convergence(target_mag: np.ndarray, samples_padded: np.ndarray) -> float:
    est = np.abs(_stft_padded(samples_padded, target_mag.shape[0]))
    return float(np.linalg.norm(target_mag - est) / max(np.linalg.norm(target_mag), 1e-12))


def griffin_lim_padded(mag: np.ndarray, iterations: int) -> np.ndarray:
    """Run GL on a linear magnitude (T, 401); returns the padded-domain signal."""
    if iterations < 1:
        raise ValueError(f"iterations must be >= 1, got {iterations}")
    n = mag.shape[0]
    x = _istft_padded(mag.astype(np.complex128))  # zero-phase start
    for _ in range(iterations):
        spec = _stft_padded(x, n)
        phase = np.exp(1j * np.angle(spec))
        x = _istft_padded(mag * phase)
    return x


def griffin_lim(mel: MelSpectrogram, iterations: int = GRIFFIN_LIM_ITERS) -> Waveform:
    mag = mel_to_linear(mel)
    padded = griffin_lim_padded(mag, iterations)
    half = N_FFT // 2
    samples = padded[half : half + mel.num_frames * HOP_LENGTH]
    peak = np.max(np.abs(samples)) if samples.size else 0.0
    if peak > 1.0:
        samples = samples / peak
    return Waveform(samples, SAMPLE_RATE)


def mel_correlation(a: MelSpectrogram, b: MelSpectrogram, domain: str = "amplitude") -> float:
    """Mean over frames of the Pearson correlation across the 80 bins.

    ``domain="amplitude"`` correlates exp(log-mel); ``"log"`` correlates the
    log values directly, which for tonal input is dominated by floor bins.
    """
    t = min(a.num_frames, b.num_frames)
    xa, ya = a.values[:t], b.values[:t]
    if domain == "amplitude":
        xa, ya = np.exp(xa), np.exp(ya)
    elif domain != "log":
        raise ValueError(f"unknown domain {domain!r}")
    x = xa - xa.mean(axis=1, keepdims=True)
    y = ya - ya.mean(axis=1, keepdims=True)
    denom = np.linalg.norm(x, axis=1) * np.linalg.norm(y, axis=1)
    ok = denom > 0
    return float(np.mean(np.sum(x * y, axis=1)[ok] / denom[ok]))


# --------------------------------------------------------------------------
# mel dump files


def write_mel_dump(path, mel: MelSpectrogram) -> None:
    header = struct.pack("<4i", MEL_DUMP_MAGIC, MEL_DUMP_VERSION, mel.num_frames, N_MELS)
    Path(path).write_bytes(header + mel.values.astype("<f4").tobytes(order="C"))


def read_mel_dump(path) -> MelSpectrogram:
    data = Path(path).read_bytes()
    if len(data) < 16:
        raise ValueError(f"{path}: mel dump too short for header")
    magic, version, t, n_mels = struct.unpack("<4i", data[:16])
    if magic != MEL_DUMP_MAGIC:
        raise ValueError(f"{path}: bad mel dump magic {magic:#x}")
    if version != MEL_DUMP_VERSION:
        raise ValueError(f"{path}: unsupported mel dump version {version}")
    expected = 16 + 4 * t * n_mels
    if n_mels != N_MELS or len(data) != expected:
        raise ValueError(f"{path}: mel dump size mismatch (expected {expected} bytes, got {len(data)})")
    values = np.frombuffer(data[16:], dtype="<f4").reshape(t, n_mels)
    return MelSpectrogram(values.astype(np.float64))


def waveform_rms(w: Waveform) -> float:
    return float(np.sqrt(np.mean(w.samples**2))) if len(w) else 0.0


def fft_peak_hz(samples: Sequence[float], sample_rate: int) -> float:
    """Frequency of the largest FFT bin (Hann-windowed, zero-padded to 8x)."""
    x = np.asarray(samples, dtype=np.float64)
    n = 8 * len(x)
    spec = np.abs(np.fft.rfft(x * np.hanning(len(x)), n=n))
    return float(np.argmax(spec) * sample_rate / n)
