"""WAV I/O, STFT / log-mel features and waveform perturbations.

Power-spectrum convention: ``stft`` returns the one-sided ``rfft`` of each
Hann-windowed frame, unnormalised. Parseval therefore reads

    sum_k c_k |X[k]|^2 = N * sum_n (x[n] w[n])^2

with ``c_k = 1`` for the DC and Nyquist bins and ``c_k = 2`` otherwise.
"""
from __future__ import annotations

import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateInputError, FormatError

LOG_FLOOR = 1e-10


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.samples.size == 0:
            raise DegenerateInputError("empty waveform")

    def __len__(self) -> int:
        return self.samples.size


def read_wav(path) -> Waveform:
    """Read a 16-bit PCM WAV file, averaging channels to mono."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such WAV file: {path}")
    try:
        with wave.open(str(path), "rb") as f:
            width = f.getsampwidth()
            channels = f.getnchannels()
            sr = f.getframerate()
            raw = f.readframes(f.getnframes())
    except wave.Error as exc:
        raise FormatError(f"{path}: unsupported 'fmt ' chunk or missing 'data' chunk ({exc})") from exc
    except EOFError as exc:
        raise FormatError(f"{path}: truncated RIFF container") from exc
    if width != 2:
        raise FormatError(f"{path}: 'fmt ' chunk declares {8 * width}-bit samples, only 16-bit PCM is supported")
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if channels > 1:
        pcm = pcm.reshape(-1, channels).mean(axis=1)
    return Waveform(pcm, sr)


def write_wav(path, w: Waveform) -> None:
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(int(w.sample_rate))
        f.writeframes(pcm.tobytes())


def resample_linear(samples: np.ndarray, src_rate: int, dst_rate: int) -> np.ndarray:
    if src_rate == dst_rate:
        return np.asarray(samples, dtype=np.float64)
    n_out = max(1, int(round(len(samples) * dst_rate / src_rate)))
    pos = np.arange(n_out) * (src_rate / dst_rate)
    return np.interp(pos, np.arange(len(samples)), samples, right=0.0)


def hann(n: int) -> np.ndarray:
    """Symmetric Hann window, ``0.5 * (1 - cos(2 pi k / (n - 1)))``."""
    return np.hanning(n)


def num_frames(length: int, frame: int = 1024, hop: int = 320) -> int:
    return 1 + (max(length, frame) - frame) // hop


def stft(samples, frame: int = 1024, hop: int = 320) -> np.ndarray:
    """Complex spectrogram of shape ``(frames, frame // 2 + 1)``."""
    x = np.asarray(samples.samples if isinstance(samples, Waveform) else samples, dtype=np.float64)
    if x.size < frame:
        x = np.pad(x, (0, frame - x.size))
    frames = np.lib.stride_tricks.sliding_window_view(x, frame)[::hop]
    return np.fft.rfft(frames * hann(frame), axis=1)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: int, n_fft: int = 1024, mel_bins: int = 64,
                   fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Triangular HTK-scale filters, shape ``(mel_bins, n_fft // 2 + 1)``."""
    if mel_bins < 1:
        raise ValueError("mel_bins must be >= 1")
    fmax = sample_rate / 2.0 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), mel_bins + 2))
    freqs = np.fft.rfftfreq(n_fft, 1.0 / sample_rate)
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lower) / (center - lower)
    falling = (upper - freqs) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def mel_centers(sample_rate: int, mel_bins: int = 64, fmin: float = 0.0,
                fmax: float | None = None) -> np.ndarray:
    fmax = sample_rate / 2.0 if fmax is None else fmax
    return mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), mel_bins + 2))[1:-1]


def log_mel(spec: np.ndarray, sample_rate: int, mel_bins: int = 64,
            fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Natural-log mel energies ``(frames, mel_bins)`` from a complex STFT."""
    n_fft = 2 * (spec.shape[1] - 1)
    fb = mel_filterbank(sample_rate, n_fft, mel_bins, fmin, fmax)
    power = np.abs(spec) ** 2
    return np.log(np.maximum(power @ fb.T, LOG_FLOOR))


@dataclass(frozen=True)
class Frontend:
    sample_rate: int = 16000
    frame: int = 1024
    hop: int = 320
    mel_bins: int = 64
    fmin: float = 0.0
    fmax: float | None = None

    def __call__(self, samples) -> np.ndarray:
        return log_mel(stft(samples, self.frame, self.hop), self.sample_rate,
                       self.mel_bins, self.fmin, self.fmax)

    def pooled(self, samples) -> np.ndarray:
        return self(samples).mean(axis=0)

    def key(self) -> str:
        return f"sr{self.sample_rate}-f{self.frame}-h{self.hop}-m{self.mel_bins}-{self.fmin}-{self.fmax}"


# --- perturbations -----------------------------------------------------------

PERTURBATION_KINDS = ("time_shift", "pitch_shift", "colored_noise")


@dataclass(frozen=True)
class PerturbationSpec:
    """A perturbation family member plus the ranges its parameters are drawn from."""

    kind: str
    seed: int = 0
    shift_range: tuple[float, float] = (-0.25, 0.25)
    semitone_range: tuple[float, float] = (-2.0, 2.0)
    alpha_range: tuple[float, float] = (0.0, 2.0)
    snr_db_range: tuple[float, float] = (10.0, 30.0)

    def __post_init__(self):
        if self.kind not in PERTURBATION_KINDS:
            raise ValueError(f"unknown perturbation kind {self.kind!r}")
        for name in ("shift_range", "semitone_range", "alpha_range", "snr_db_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} is empty: {lo} > {hi}")
        if max(abs(v) for v in self.shift_range) > 0.5:
            raise ValueError("shift fractions must lie in [-0.5, 0.5]")
        if max(abs(v) for v in self.semitone_range) > 4:
            raise ValueError("semitone shifts must lie in [-4, 4]")
        if self.alpha_range[0] < 0 or self.alpha_range[1] > 2:
            raise ValueError("noise exponent must lie in [0, 2]")


def _draw(rng: np.random.Generator, bounds: tuple[float, float]) -> float:
    lo, hi = bounds
    return float(lo) if lo == hi else float(rng.uniform(lo, hi))


def roll_samples(samples: np.ndarray, n: int) -> np.ndarray:
    return np.roll(np.asarray(samples, dtype=np.float64), n)


def time_shift(samples: np.ndarray, fraction: float) -> np.ndarray:
    x = np.asarray(samples, dtype=np.float64)
    return np.clip(roll_samples(x, int(round(fraction * x.size))), -1.0, 1.0)


def pitch_shift(samples: np.ndarray, semitones: float) -> np.ndarray:
    """Resample by ``2**(semitones/12)`` with linear interpolation, keep the length."""
    x = np.asarray(samples, dtype=np.float64)
    ratio = 2.0 ** (semitones / 12.0)
    pos = np.arange(x.size) * ratio
    return np.clip(np.interp(pos, np.arange(x.size), x, right=0.0), -1.0, 1.0)


def colored_noise(n: int, alpha: float, rng: np.random.Generator) -> np.ndarray:
    """Unit-power noise with PSD proportional to ``1 / f**alpha``."""
    spectrum = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n)
    scale = np.zeros_like(f)
    scale[1:] = f[1:] ** (-alpha / 2.0)
    noise = np.fft.irfft(spectrum * scale, n)
    noise -= noise.mean()
    power = np.mean(noise ** 2)
    return noise / np.sqrt(power) if power > 0 else noise


def add_colored_noise(samples: np.ndarray, alpha: float, snr_db: float,
                      rng: np.random.Generator) -> np.ndarray:
    x = np.asarray(samples, dtype=np.float64)
    if np.isinf(snr_db) and snr_db > 0:
        return x.copy()
    signal_power = np.mean(x ** 2)
    if signal_power == 0:
        raise DegenerateInputError("cannot set a finite SNR against a zero-energy signal")
    gain = np.sqrt(signal_power / 10.0 ** (snr_db / 10.0))
    return np.clip(x + gain * colored_noise(x.size, alpha, rng), -1.0, 1.0)


def _samples(w) -> tuple[np.ndarray, int | None]:
    if isinstance(w, Waveform):
        return w.samples, w.sample_rate
    return np.asarray(w, dtype=np.float64), None


def _wrap(out: np.ndarray, sr: int | None):
    return Waveform(out, sr) if sr is not None else out


def perturb_time_shift(w, spec: PerturbationSpec):
    x, sr = _samples(w)
    rng = np.random.default_rng(spec.seed)
    return _wrap(time_shift(x, _draw(rng, spec.shift_range)), sr)


def perturb_pitch_shift(w, spec: PerturbationSpec):
    x, sr = _samples(w)
    rng = np.random.default_rng(spec.seed)
    return _wrap(pitch_shift(x, _draw(rng, spec.semitone_range)), sr)


def perturb_colored_noise(w, spec: PerturbationSpec):
    x, sr = _samples(w)
    rng = np.random.default_rng(spec.seed)
    alpha = _draw(rng, spec.alpha_range)
    snr = _draw(rng, spec.snr_db_range)
    return _wrap(add_colored_noise(x, alpha, snr, rng), sr)


PERTURBERS = {
    "time_shift": perturb_time_shift,
    "pitch_shift": perturb_pitch_shift,
    "colored_noise": perturb_colored_noise,
}


def perturb(w, spec: PerturbationSpec):
    return PERTURBERS[spec.kind](w, spec)
