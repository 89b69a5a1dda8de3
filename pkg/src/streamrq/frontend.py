"""16 kHz audio in, 80-dim log-mel frames out at 100 frames per second."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SAMPLE_RATE = 16000
WINDOW = 400  # 25 ms
HOP = 160  # 10 ms
N_FFT = 512
N_MELS = 80
LOG_FLOOR = 1e-10
VAR_FLOOR = 1e-8


class AudioFormatError(ValueError):
    """WAV header describes audio we refuse to reinterpret."""


class TooShortError(ValueError):
    """Input too short to produce a single frame."""


@dataclass
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32).reshape(-1)
        if self.sample_rate != SAMPLE_RATE:
            raise AudioFormatError(f"expected {SAMPLE_RATE} Hz, got {self.sample_rate}")
        if self.samples.size and np.abs(self.samples).max() > 1 + 1e-6:
            raise AudioFormatError("samples must lie in [-1, 1]")

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class FeatureSequence:
    frames: np.ndarray
    frame_hop_ms: int = 10
    frame_window_ms: int = 25
    normalized: bool = False

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2:
            raise ValueError("frames must be a T x D matrix")

    def __len__(self) -> int:
        return self.frames.shape[0]


def load_wav(path) -> AudioBuffer:
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise AudioFormatError(f"{path}: not a RIFF/WAVE file")
    pos, fmt, payload = 12, None, None
    while pos + 8 <= len(data):
        cid, size = data[pos : pos + 4], struct.unpack("<I", data[pos + 4 : pos + 8])[0]
        body = data[pos + 8 : pos + 8 + size]
        if len(body) < size:
            raise OSError(f"{path}: truncated {cid.decode(errors='replace')} chunk")
        if cid == b"fmt ":
            fmt = struct.unpack("<HHIIHH", body[:16])
        elif cid == b"data":
            payload = body
        pos += 8 + size + (size & 1)
    if fmt is None or payload is None:
        raise OSError(f"{path}: missing fmt or data chunk")
    tag, channels, rate, _, _, bits = fmt
    if channels != 1:
        raise AudioFormatError(f"{path}: {channels} channels, need mono")
    if rate != SAMPLE_RATE:
        raise AudioFormatError(f"{path}: {rate} Hz, need {SAMPLE_RATE}")
    if tag == 1 and bits == 16:
        samples = np.frombuffer(payload[: len(payload) // 2 * 2], dtype="<i2").astype(np.float32) / 32768.0
    elif tag == 3 and bits == 32:
        samples = np.frombuffer(payload[: len(payload) // 4 * 4], dtype="<f4").astype(np.float32)
    else:
        raise AudioFormatError(f"{path}: unsupported encoding tag={tag} bits={bits}")
    return AudioBuffer(samples, rate)


def save_wav(path, samples, sample_rate: int = SAMPLE_RATE) -> None:
    """Write mono PCM16."""
    pcm = np.clip(np.round(np.asarray(samples, dtype=np.float64) * 32768.0), -32768, 32767).astype("<i2")
    payload = pcm.tobytes()
    header = b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVE"
    header += b"fmt " + struct.pack("<IHHIIHH", 16, 1, 1, sample_rate, sample_rate * 2, 2, 16)
    header += b"data" + struct.pack("<I", len(payload))
    Path(path).write_bytes(header + payload)


def num_frames(num_samples: int) -> int:
    if num_samples < WINDOW:
        return 0
    return (num_samples - WINDOW) // HOP + 1


def _hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def _mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT, sr: int = SAMPLE_RATE,
                   fmin: float = 0.0, fmax: float = 8000.0) -> np.ndarray:
    """Triangular filters on the HTK mel scale, shape ``(n_mels, n_fft // 2 + 1)``."""
    edges = _mel_to_hz(np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sr / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lo) / (mid - lo)
    falling = (hi - freqs[None, :]) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


_HANN = (0.5 - 0.5 * np.cos(2 * np.pi * np.arange(WINDOW) / WINDOW))
_FBANK = mel_filterbank()


def frames_to_logmel(frames: np.ndarray) -> np.ndarray:
    """Windowed sample frames ``(n, 400)`` to log-mel rows ``(n, 80)``.

    Rows are processed one at a time so the values of a frame never depend
    on how many frames are computed together.
    """
    out = np.empty((frames.shape[0], N_MELS), dtype=np.float32)
    for i, frame in enumerate(frames):
        spec = np.fft.rfft(frame.astype(np.float64) * _HANN, n=N_FFT)
        power = spec.real ** 2 + spec.imag ** 2
        out[i] = np.log(np.maximum(_FBANK @ power, LOG_FLOOR))
    return out


def log_mel(audio: AudioBuffer) -> FeatureSequence:
    n = num_frames(audio.samples.size)
    if n == 0:
        raise TooShortError(f"need at least {WINDOW} samples, got {audio.samples.size}")
    idx = np.arange(n)[:, None] * HOP + np.arange(WINDOW)[None, :]
    return FeatureSequence(frames_to_logmel(audio.samples[idx]))


def cmvn_stats(frames: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = frames.astype(np.float64)
    mean = x.mean(axis=0)
    var = np.maximum(x.var(axis=0), VAR_FLOOR)
    return mean, np.sqrt(var)


def cmvn(features: FeatureSequence, stats: tuple | None = None) -> FeatureSequence:
    """Per-utterance zero-mean, unit-variance normalization per dimension."""
    if len(features) < 2 and stats is None:
        raise ValueError("per-utterance CMVN needs at least 2 frames")
    mean, std = stats if stats is not None else cmvn_stats(features.frames)
    normed = (features.frames.astype(np.float64) - mean) / std
    return FeatureSequence(normed.astype(np.float32), features.frame_hop_ms,
                           features.frame_window_ms, normalized=True)


@dataclass
class RunningCMVN:
    """Exponential moving mean/variance for live normalization.

    The first chunk seeds the statistics directly; each later frame updates
    them with ``decay``. ``fixed`` freezes externally supplied statistics.
    """

    decay: float = 0.999
    mean: np.ndarray | None = None
    var: np.ndarray | None = None
    frozen: bool = False

    @classmethod
    def fixed(cls, mean, std) -> "RunningCMVN":
        return cls(mean=np.asarray(mean, np.float64), var=np.asarray(std, np.float64) ** 2, frozen=True)

    def normalize(self, chunk: np.ndarray) -> np.ndarray:
        x = chunk.astype(np.float64)
        if not self.frozen:
            if self.mean is None:
                self.mean = x.mean(axis=0)
                self.var = x.var(axis=0) if len(x) > 1 else np.ones(x.shape[1])
            else:
                for row in x:
                    self.mean = self.decay * self.mean + (1 - self.decay) * row
                    self.var = self.decay * self.var + (1 - self.decay) * (row - self.mean) ** 2
        std = np.sqrt(np.maximum(self.var, VAR_FLOOR))
        return ((x - self.mean) / std).astype(np.float32)


@dataclass
class FrameStream:
    """Incremental framer: accepts samples in any push size, yields frames
    with the same 25 ms / 10 ms grid as :func:`log_mel`."""

    _buf: np.ndarray = field(default_factory=lambda: np.zeros(0, np.float32))
    _next: int = 0  # absolute index of the next frame to produce
    _offset: int = 0  # absolute sample index of _buf[0]

    def push(self, samples) -> None:
        self._buf = np.concatenate([self._buf, np.asarray(samples, np.float32).reshape(-1)])

    @property
    def available(self) -> int:
        total = self._offset + self._buf.size
        return max(0, num_frames(total) - self._next)

    @property
    def buffered_samples(self) -> int:
        return self._buf.size

    def take(self, n: int) -> np.ndarray:
        if n > self.available:
            raise ValueError("not enough buffered audio")
        starts = (self._next + np.arange(n)) * HOP - self._offset
        frames = self._buf[starts[:, None] + np.arange(WINDOW)[None, :]]
        feats = frames_to_logmel(frames) if n else np.zeros((0, N_MELS), np.float32)
        self._next += n
        drop = self._next * HOP - self._offset
        self._buf, self._offset = self._buf[drop:], self._offset + drop
        return feats


def save_features(path, frames: np.ndarray) -> None:
    """Raw dump: u32 T, u32 D, then float32 little-endian row-major."""
    frames = np.asarray(frames, dtype="<f4")
    Path(path).write_bytes(struct.pack("<II", *frames.shape) + frames.tobytes())


def load_features(path) -> np.ndarray:
    data = Path(path).read_bytes()
    T, D = struct.unpack("<II", data[:8])
    if len(data) != 8 + 4 * T * D:
        raise OSError(f"{path}: payload size does not match header {T}x{D}")
    return np.frombuffer(data[8:], dtype="<f4").reshape(T, D).copy()
