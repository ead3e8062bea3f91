"""Waveform ingestion, FBank features, and waveform-level augmentation.

Feature pipeline (pinned for reproducibility): 25 ms / 10 ms frames at
16 kHz, per-frame pre-emphasis 0.97, Hamming window, 512-point DFT power
spectrum, 80 triangular mel filters spanning 20-7600 Hz, natural log with
floor 1e-10, no dither.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .formats import DataError, FormatError

SAMPLE_RATE = 16000
FRAME_LENGTH = 400          # 25 ms at 16 kHz
FRAME_SHIFT = 160           # 10 ms
NUM_MELS = 80
FFT_SIZE = 512
MEL_LOW_HZ = 20.0
MEL_HIGH_HZ = 7600.0
PREEMPHASIS = 0.97
LOG_FLOOR = 1e-10


@dataclass
class Waveform:
    """Mono PCM samples in [-1, 1] plus their sample rate."""
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError("waveform must be a non-empty 1-D sample sequence")
        if self.sample_rate <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate}")

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


# ------------------------------------------------------------------- wav io
def load_wav(path) -> Waveform:
    """Read a RIFF/WAVE file (PCM16 or IEEE float32), downmixed to mono."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 12:
        raise FormatError(f"{path}: file too short for a RIFF header (byte offset 0)")
    if blob[0:4] != b"RIFF":
        raise FormatError(f"{path}: missing RIFF magic at byte offset 0")
    if blob[8:12] != b"WAVE":
        raise FormatError(f"{path}: missing WAVE form type at byte offset 8")
    pos = 12
    fmt = None
    data = None
    while pos + 8 <= len(blob):
        cid = blob[pos:pos + 4]
        (size,) = struct.unpack("<I", blob[pos + 4:pos + 8])
        body = blob[pos + 8:pos + 8 + size]
        if len(body) != size:
            raise FormatError(
                f"{path}: chunk {cid!r} truncated at byte offset {pos + 8}")
        if cid == b"fmt ":
            if size < 16:
                raise FormatError(
                    f"{path}: fmt chunk too small at byte offset {pos + 8}")
            fmt = struct.unpack("<HHIIHH", body[:16])
        elif cid == b"data":
            data = (body, pos + 8)
        pos += 8 + size + (size & 1)
    if fmt is None:
        raise FormatError(f"{path}: no fmt chunk found (scanned to byte offset {pos})")
    if data is None:
        raise FormatError(f"{path}: no data chunk found (scanned to byte offset {pos})")
    audio_format, channels, rate, _, _, bits = fmt
    body, offset = data
    if audio_format == 1 and bits == 16:
        raw = np.frombuffer(body, dtype="<i2").astype(np.float32) / 32768.0
    elif audio_format == 3 and bits == 32:
        raw = np.frombuffer(body, dtype="<f4").astype(np.float32)
    else:
        raise FormatError(
            f"{path}: unsupported codec (format {audio_format}, {bits}-bit) "
            f"at byte offset {offset}")
    if channels > 1:
        raw = raw[: len(raw) - len(raw) % channels]
        raw = raw.reshape(-1, channels).mean(axis=1).astype(np.float32)
    return Waveform(raw, rate)


def save_wav(path, w: Waveform) -> None:
    """Write mono PCM16."""
    pcm = np.clip(w.samples, -1.0, 1.0)
    pcm = np.round(pcm * 32767.0).astype("<i2")
    body = pcm.tobytes()
    with open(path, "wb") as f:
        f.write(b"RIFF")
        f.write(struct.pack("<I", 36 + len(body)))
        f.write(b"WAVE")
        f.write(b"fmt ")
        f.write(struct.pack("<IHHIIHH", 16, 1, 1, w.sample_rate,
                            w.sample_rate * 2, 2, 16))
        f.write(b"data")
        f.write(struct.pack("<I", len(body)))
        f.write(body)


# ------------------------------------------------------------------ features
def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(num_mels=NUM_MELS, fft_size=FFT_SIZE, sample_rate=SAMPLE_RATE,
                   low_hz=MEL_LOW_HZ, high_hz=MEL_HIGH_HZ) -> np.ndarray:
    """(num_mels, fft_size//2 + 1) triangular weights on the mel scale."""
    edges = mel_to_hz(np.linspace(hz_to_mel(low_hz), hz_to_mel(high_hz),
                                  num_mels + 2))
    bin_freqs = np.arange(fft_size // 2 + 1) * (sample_rate / fft_size)
    weights = np.zeros((num_mels, fft_size // 2 + 1))
    for m in range(num_mels):
        lo, center, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (bin_freqs - lo) / (center - lo)
        down = (hi - bin_freqs) / (hi - center)
        weights[m] = np.maximum(0.0, np.minimum(up, down))
    return weights.astype(np.float32)


_MEL_WEIGHTS: Optional[np.ndarray] = None


def fbank(w: Waveform) -> np.ndarray:
    """Log mel-filterbank energies, frames x 80."""
    if w.sample_rate != SAMPLE_RATE:
        raise ValueError(
            f"fbank expects {SAMPLE_RATE} Hz input, got {w.sample_rate}")
    n = len(w.samples)
    if n < FRAME_LENGTH:
        raise ValueError(
            f"fbank needs at least {FRAME_LENGTH} samples, got {n}")
    global _MEL_WEIGHTS
    if _MEL_WEIGHTS is None:
        _MEL_WEIGHTS = mel_filterbank()
    num_frames = 1 + (n - FRAME_LENGTH) // FRAME_SHIFT
    idx = (np.arange(FRAME_LENGTH)[None, :]
           + FRAME_SHIFT * np.arange(num_frames)[:, None])
    frames = w.samples[idx].astype(np.float64)
    # per-frame pre-emphasis; first sample attenuated against itself
    pre = np.empty_like(frames)
    pre[:, 1:] = frames[:, 1:] - PREEMPHASIS * frames[:, :-1]
    pre[:, 0] = frames[:, 0] * (1.0 - PREEMPHASIS)
    pre *= np.hamming(FRAME_LENGTH)
    spectrum = np.fft.rfft(pre, n=FFT_SIZE, axis=1)
    power = spectrum.real ** 2 + spectrum.imag ** 2
    energies = power @ _MEL_WEIGHTS.T.astype(np.float64)
    return np.log(np.maximum(energies, LOG_FLOOR)).astype(np.float32)


def mean_normalize(feats: np.ndarray) -> np.ndarray:
    """Subtract the per-feature mean over the utterance."""
    return (feats - feats.mean(axis=0, keepdims=True)).astype(np.float32)


# -------------------------------------------------------------- augmentation
def add_noise(clean: Waveform, noise: Waveform, snr_db: float) -> Waveform:
    """Mix noise scaled so the signal-to-noise ratio equals snr_db."""
    if noise.sample_rate != clean.sample_rate:
        raise ValueError("clean and noise sample rates differ")
    n = len(clean)
    src = noise.samples
    if len(src) < n:
        src = np.tile(src, -(-n // len(src)))
    src = src[:n].astype(np.float64)
    p_signal = np.mean(clean.samples.astype(np.float64) ** 2)
    p_noise = np.mean(src ** 2)
    if p_noise <= 0.0:
        raise ValueError("noise waveform has zero power")
    scale = np.sqrt(p_signal / (p_noise * 10.0 ** (snr_db / 10.0)))
    mixed = clean.samples.astype(np.float64) + scale * src
    return Waveform(mixed.astype(np.float32), clean.sample_rate)


def reverberate(clean: Waveform, rir: Waveform) -> Waveform:
    """Convolve with an impulse response, truncate to the input length,
    renormalize so the peak stays <= 1."""
    if rir.sample_rate != clean.sample_rate:
        raise ValueError("clean and impulse sample rates differ")
    if len(rir) == 0:
        raise ValueError("impulse response is empty")
    n = len(clean)
    m = len(rir)
    size = 1
    while size < n + m - 1:
        size *= 2
    spec = (np.fft.rfft(clean.samples.astype(np.float64), size)
            * np.fft.rfft(rir.samples.astype(np.float64), size))
    out = np.fft.irfft(spec, size)[:n]
    peak = np.max(np.abs(out))
    if peak > 1.0:
        out = out / peak
    return Waveform(out.astype(np.float32), clean.sample_rate)


def speed_perturb(w: Waveform, factor: float) -> Tuple[Waveform, int]:
    """Resample by linear interpolation; returns the perturbed waveform and
    the speaker-label block offset (1.0 -> 0, slower -> 1, faster -> 2)."""
    if factor <= 0:
        raise ValueError(f"speed factor must be positive, got {factor}")
    if factor == 1.0:
        return Waveform(w.samples.copy(), w.sample_rate), 0
    out_len = int(round(len(w) / factor))
    positions = np.arange(out_len, dtype=np.float64) * factor
    out = np.interp(positions, np.arange(len(w), dtype=np.float64),
                    w.samples.astype(np.float64))
    offset = 1 if factor < 1.0 else 2
    return Waveform(out.astype(np.float32), w.sample_rate), offset


def crop_or_duplicate(w: Waveform, target_samples: int,
                      rng: np.random.Generator) -> Waveform:
    """Random contiguous crop when long enough, else tile and truncate."""
    if target_samples <= 0:
        raise ValueError("target_samples must be positive")
    n = len(w)
    if n >= target_samples:
        start = int(rng.integers(0, n - target_samples + 1))
        out = w.samples[start:start + target_samples].copy()
    else:
        out = np.tile(w.samples, -(-target_samples // n))[:target_samples].copy()
    return Waveform(out, w.sample_rate)


@dataclass
class AugmentSpec:
    """One concrete augmentation to apply."""
    kind: str                              # noise | reverb | speed
    snr_db: float = 0.0
    impulse: Optional[Waveform] = None
    factor: float = 1.0

    def __post_init__(self):
        if self.kind not in ("noise", "reverb", "speed"):
            raise ValueError(f"unknown augmentation kind {self.kind!r}")
        if self.kind == "noise" and not 0.0 <= self.snr_db <= 15.0:
            raise ValueError(f"noise SNR {self.snr_db} outside [0, 15]")
        if self.kind == "speed" and self.factor not in (0.9, 1.0, 1.1):
            raise ValueError(f"speed factor {self.factor} not one of 0.9/1.0/1.1")


@dataclass
class AugmentProfile:
    """Random augmentation policy: each effect applied independently with
    probability ``prob``; speed perturbation picks uniformly among the three
    factors and shifts the label block."""
    noise_pool: List[Waveform] = field(default_factory=list)
    rir_pool: List[Waveform] = field(default_factory=list)
    snr_range: Tuple[float, float] = (0.0, 15.0)
    speed: bool = False
    prob: float = 0.6


def apply_augment(w: Waveform, profile: AugmentProfile,
                  rng: np.random.Generator) -> Tuple[Waveform, int]:
    """Returns the augmented waveform and the speed label offset."""
    offset = 0
    if profile.speed:
        factor = [1.0, 0.9, 1.1][int(rng.integers(0, 3))]
        w, offset = speed_perturb(w, factor)
    if profile.rir_pool and rng.random() < profile.prob:
        rir = profile.rir_pool[int(rng.integers(0, len(profile.rir_pool)))]
        w = reverberate(w, rir)
    if profile.noise_pool and rng.random() < profile.prob:
        noise = profile.noise_pool[int(rng.integers(0, len(profile.noise_pool)))]
        snr = float(rng.uniform(*profile.snr_range))
        w = add_noise(w, noise, snr)
    return w, offset


# ------------------------------------------------------------------ manifest
def read_manifest(path) -> List[Tuple[str, str, str]]:
    """Rows of (utterance-id, wav-path, speaker-id), tab-separated."""
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(
                    f"{path}:{lineno}: expected 3 tab-separated fields, "
                    f"got {len(parts)}")
            rows.append((parts[0], parts[1], parts[2]))
    return rows


def write_manifest(path, rows: Sequence[Tuple[str, str, str]]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for utt, wav, spk in rows:
            f.write(f"{utt}\t{wav}\t{spk}\n")
