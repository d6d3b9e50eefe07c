"""Speech-command audio -> log-mel dense SPKDS.

Source layout: a directory with one subdirectory per word, each holding
16 kHz mono 16-bit PCM wav files. Clips are zero-padded (or truncated) to
exactly one second, so every converted sample shares the same frame count.

Front-end: 25 ms Hann window, 10 ms hop, power spectrum -> 140 triangular
mel filters (20 Hz .. 8 kHz, HTK mel scale) -> log(1e-6 + power). For a
1 s clip that is 1 + (16000 - 400) // 160 = 98 frames.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from spikedelay.datasets import ENC_DENSE, SpikeDataset, SpikeSample

SAMPLE_RATE = 16000
WINDOW = 400                  # 25 ms
HOP = 160                     # 10 ms
NFFT = 512
LOG_FLOOR = 1e-6


class AudioError(ValueError):
    pass


@dataclass
class AudioJob:
    input_dir: str
    output_path: str
    mel_bins: int = 140
    fmin_hz: float = 20.0
    fmax_hz: float = 8000.0

    def __post_init__(self) -> None:
        if self.mel_bins < 1:
            raise AudioError(f"mel_bins must be positive, got {self.mel_bins}")
        if not 0 <= self.fmin_hz < self.fmax_hz <= SAMPLE_RATE / 2:
            raise AudioError(f"bad mel range [{self.fmin_hz}, {self.fmax_hz}]")

    @property
    def frames_per_second(self) -> int:
        return 1 + (SAMPLE_RATE - WINDOW) // HOP


def read_wav(path) -> np.ndarray:
    """Mono float32 waveform in [-1, 1] at the contract rate."""
    try:
        with wave.open(str(path), "rb") as fh:
            if fh.getframerate() != SAMPLE_RATE:
                raise AudioError(f"{path}: sample rate {fh.getframerate()} != {SAMPLE_RATE}")
            if fh.getsampwidth() != 2 or fh.getnchannels() != 1:
                raise AudioError(f"{path}: need 16-bit mono PCM")
            raw = fh.readframes(fh.getnframes())
    except wave.Error as exc:
        raise AudioError(f"{path}: unreadable wav: {exc}") from exc
    return np.frombuffer(raw, "<i2").astype(np.float32) / 32768.0


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, np.float64) / 2595.0) - 1.0)


def mel_filterbank(job: AudioJob) -> np.ndarray:
    """[mel_bins, NFFT//2 + 1] triangular filters on the HTK mel scale."""
    edges_mel = np.linspace(_hz_to_mel(job.fmin_hz), _hz_to_mel(job.fmax_hz),
                            job.mel_bins + 2)
    edges_hz = _mel_to_hz(edges_mel)
    fft_hz = np.fft.rfftfreq(NFFT, 1.0 / SAMPLE_RATE)
    bank = np.zeros((job.mel_bins, len(fft_hz)), np.float64)
    for b in range(job.mel_bins):
        lo, mid, hi = edges_hz[b], edges_hz[b + 1], edges_hz[b + 2]
        up = (fft_hz - lo) / (mid - lo)
        down = (hi - fft_hz) / (hi - mid)
        bank[b] = np.clip(np.minimum(up, down), 0.0, None)
    return bank


def log_mel(waveform: np.ndarray, job: AudioJob, bank: np.ndarray | None = None) -> np.ndarray:
    """[mel_bins, frames] float32 features for a clip padded/cut to 1 s."""
    x = np.zeros(SAMPLE_RATE, np.float64)
    n = min(len(waveform), SAMPLE_RATE)
    x[:n] = waveform[:n]
    if bank is None:
        bank = mel_filterbank(job)
    window = np.hanning(WINDOW)
    frames = job.frames_per_second
    spec = np.empty((frames, NFFT // 2 + 1), np.float64)
    for f in range(frames):
        seg = x[f * HOP: f * HOP + WINDOW] * window
        fx = np.fft.rfft(seg, NFFT)
        spec[f] = fx.real**2 + fx.imag**2
    return np.log(LOG_FLOOR + bank @ spec.T).astype(np.float32)


def scan_classes(input_dir) -> list[str]:
    """Word subdirectories in sorted order; the index is the label."""
    root = Path(input_dir)
    if not root.is_dir():
        raise AudioError(f"{input_dir} is not a directory")
    words = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not words:
        raise AudioError(f"{input_dir} has no word subdirectories")
    return words


def convert_audio(job: AudioJob) -> SpikeDataset:
    """Whole-corpus conversion, words then filenames in sorted order."""
    words = scan_classes(job.input_dir)
    bank = mel_filterbank(job)
    samples = []
    for label, word in enumerate(words):
        for path in sorted((Path(job.input_dir) / word).glob("*.wav")):
            feats = log_mel(read_wav(path), job, bank)
            samples.append(SpikeSample(
                duration=feats.shape[1], label=label, dense=feats))
    if not samples:
        raise AudioError(f"{job.input_dir}: no wav files found")
    ds = SpikeDataset(
        encoding=ENC_DENSE,
        num_channels=job.mel_bins,
        num_classes=len(words),
        delta_t_us=int(round(HOP / SAMPLE_RATE * 1e6)),
        samples=samples,
    )
    ds.validate()
    return ds
