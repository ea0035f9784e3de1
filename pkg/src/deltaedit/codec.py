"""Latent/signal boundary: identity codec, a mel-spectrogram codec and WAV I/O.

The editor only ever sees :class:`LatentClip` objects; codecs live at the
edges of a pipeline.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np
from scipy.optimize import nnls
from scipy.signal import istft, stft

from .errors import FormatError, ParameterError, ShapeError
from .schedule import LatentClip

DEFAULT_SAMPLE_RATE = 16000


class CodecInterface(Protocol):
    sample_rate: int

    def encode(self, signal) -> LatentClip: ...

    def decode(self, latent: LatentClip): ...


class IdentityCodec:
    """Latent and signal are the same tensor."""

    def __init__(self, sample_rate: int = DEFAULT_SAMPLE_RATE, duration: float = 5.0):
        self.sample_rate = sample_rate
        self.duration = duration

    def latent_shape(self, signal_shape):
        return tuple(signal_shape)

    def encode(self, signal) -> LatentClip:
        if isinstance(signal, LatentClip):
            return signal
        return LatentClip(np.asarray(signal), self.sample_rate, self.duration)

    def decode(self, latent: LatentClip) -> np.ndarray:
        return np.array(latent.data)


def identity_codec(sample_rate: int = DEFAULT_SAMPLE_RATE) -> IdentityCodec:
    return IdentityCodec(sample_rate)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int, fmin: float = 0.0, fmax: float | None = None):
    """Triangular HTK-scale filters, ``(n_mels, n_fft // 2 + 1)``, plus band centres in Hz."""
    fmax = sample_rate / 2 if fmax is None else fmax
    fft_freqs = np.linspace(0, sample_rate / 2, n_fft // 2 + 1)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    fb = np.zeros((n_mels, fft_freqs.size))
    for m in range(n_mels):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (fft_freqs - lo) / max(mid - lo, 1e-12)
        down = (hi - fft_freqs) / max(hi - mid, 1e-12)
        fb[m] = np.clip(np.minimum(up, down), 0.0, None)
    # Narrow low bands can fall between FFT bins; give them their nearest bin.
    for m in np.flatnonzero(fb.sum(axis=1) == 0):
        fb[m, np.argmin(np.abs(fft_freqs - edges[m + 1]))] = 1.0
    return fb, edges[1:-1]


@dataclass
class MelConfig:
    sample_rate: int = DEFAULT_SAMPLE_RATE
    n_mels: int = 64
    frame: int = 1024
    hop: int = 256
    fmin: float = 0.0
    fmax: float | None = None
    griffin_lim_iters: int = 64
    seed: int = 0


class MelCodec:
    """Magnitude mel spectrogram; decoding estimates phase with Griffin-Lim (lossy)."""

    def __init__(self, config: MelConfig | None = None):
        self.config = config or MelConfig()
        c = self.config
        self.sample_rate = c.sample_rate
        self.filterbank, self.band_centres = mel_filterbank(c.sample_rate, c.frame, c.n_mels, c.fmin, c.fmax)

    def _stft(self, y):
        c = self.config
        return stft(y, fs=c.sample_rate, window="hann", nperseg=c.frame, noverlap=c.frame - c.hop,
                    boundary="even", padded=True)[2]

    def _istft(self, Z, length):
        c = self.config
        _, y = istft(Z, fs=c.sample_rate, window="hann", nperseg=c.frame, noverlap=c.frame - c.hop,
                     boundary=True)
        y = y[:length]
        if y.size < length:
            y = np.pad(y, (0, length - y.size))
        return y

    def encode(self, signal) -> LatentClip:
        y = np.asarray(signal, dtype=np.float64)
        if y.ndim != 1 or y.size < self.config.frame:
            raise ShapeError(f"mel codec expects a mono waveform of at least {self.config.frame} samples")
        mel = self.filterbank @ np.abs(self._stft(y))
        return LatentClip(mel[None], self.sample_rate, y.size / self.sample_rate)

    def magnitude(self, latent: LatentClip) -> np.ndarray:
        """Per-frame non-negative least-squares estimate of the linear magnitude."""
        mel = np.asarray(latent.data, dtype=np.float64)
        if mel.ndim != 3 or mel.shape[:2] != (1, self.config.n_mels):
            raise ShapeError(f"expected a (1, {self.config.n_mels}, frames) mel latent, got {mel.shape}")
        mel = np.clip(mel[0], 0.0, None)
        return np.stack([nnls(self.filterbank, col)[0] for col in mel.T], axis=1)

    def decode(self, latent: LatentClip) -> np.ndarray:
        """Griffin-Lim whose magnitude is re-fitted to the mel frames every iteration.

        A mel band is wider than a semitone in the melody range, so a fixed
        magnitude estimate blurs pitch. Rescaling the current STFT magnitude
        so its mel projection matches the target (a multiplicative update)
        lets phase consistency pick the right bins inside each band.
        """
        mag = self.magnitude(latent)
        target = np.clip(np.asarray(latent.data, dtype=np.float64)[0], 0.0, None)
        fb = self.filterbank
        weight = fb.sum(axis=0)[:, None]
        covered = weight > 0
        length = int(round(latent.duration * self.sample_rate))
        rng = np.random.default_rng(self.config.seed)
        y = self._istft(mag * np.exp(2j * np.pi * rng.random(mag.shape)), length)
        for _ in range(self.config.griffin_lim_iters):
            Z = self._fit_frames(self._stft(y), mag.shape[1])
            S = np.abs(Z)
            ratio = target / np.maximum(fb @ S, 1e-10)
            S = np.where(covered, S * (fb.T @ ratio) / np.where(covered, weight, 1.0), S)
            y = self._istft(S * np.exp(1j * np.angle(Z)), length)
        return y

    @staticmethod
    def _fit_frames(Z, frames):
        if Z.shape[1] > frames:
            return Z[:, :frames]
        return np.pad(Z, ((0, 0), (0, frames - Z.shape[1])))


def mel_codec(config: MelConfig | None = None) -> MelCodec:
    return MelCodec(config)


def render_melody(melody, sample_rate: int = DEFAULT_SAMPLE_RATE, duration: float = 2.0,
                  scale=(0, 2, 4, 5, 7, 9, 11, 12), base_midi: int = 60) -> np.ndarray:
    """Sine rendering of toy pitch classes, one note per melody entry."""
    melody = np.asarray(melody, dtype=np.int64)
    n = int(round(duration * sample_rate))
    bounds = np.linspace(0, n, melody.size + 1).astype(np.int64)
    y = np.zeros(n)
    for k, cls in enumerate(melody):
        freq = 440.0 * 2 ** ((base_midi + scale[int(cls) % len(scale)] - 69) / 12)
        idx = np.arange(bounds[k], bounds[k + 1])
        ramp = np.minimum(1.0, np.minimum(idx - bounds[k], bounds[k + 1] - idx) / (0.01 * sample_rate))
        y[idx] = 0.5 * ramp * np.sin(2 * np.pi * freq * idx / sample_rate)
    return y


def write_wav(path, waveform, sample_rate: int = DEFAULT_SAMPLE_RATE) -> None:
    y = np.asarray(waveform, dtype=np.float64)
    if y.ndim != 1:
        raise ShapeError("only mono audio is supported")
    pcm = np.clip(np.rint(y * 32767.0), -32768, 32767).astype("<i2")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(int(sample_rate))
        fh.writeframes(pcm.tobytes())


def read_wav(path) -> tuple[np.ndarray, int]:
    with wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1 or fh.getsampwidth() != 2:
            raise FormatError("expected mono 16-bit PCM")
        rate = fh.getframerate()
        pcm = np.frombuffer(fh.readframes(fh.getnframes()), dtype="<i2")
    return pcm.astype(np.float64) / 32767.0, rate


def spectrogram_to_audio(spectrogram, sample_rate: int = DEFAULT_SAMPLE_RATE, duration: float = 2.0,
                         scale=(0, 2, 4, 5, 7, 9, 11, 12), base_midi: int = 60) -> np.ndarray:
    """Additive-sine audition of a toy spectrogram: bin ``b`` plays octave ``b // 8`` of class ``b % 8``."""
    x = np.clip(np.asarray(getattr(spectrogram, "data", spectrogram), dtype=np.float64), 0, None)
    if x.ndim == 3:
        x = x.sum(axis=0)
    if x.ndim != 2:
        raise ParameterError("expected a (bins, frames) spectrogram")
    n_bins, n_frames = x.shape
    n = int(round(duration * sample_rate))
    tt = np.arange(n) / sample_rate
    frame_of = np.minimum((np.arange(n) * n_frames) // n, n_frames - 1)
    y = np.zeros(n)
    for b in range(n_bins):
        if not x[b].any():
            continue
        midi = base_midi + scale[b % len(scale)] + 12 * (b // len(scale))
        freq = 440.0 * 2 ** ((midi - 69) / 12)
        if freq >= sample_rate / 2:
            continue
        y += x[b, frame_of] * np.sin(2 * np.pi * freq * tt)
    peak = np.max(np.abs(y))
    return y / peak * 0.9 if peak > 0 else y
