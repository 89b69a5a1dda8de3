"""Incremental chunk-by-chunk inference with cached left context."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .chunking import FRAME_MS, ChunkPolicy, latency_ms
from .ctc import BLANK
from .encoder import SUBSAMPLE, sinusoidal_positions
from .frontend import FrameStream, RunningCMVN
from .model import SpeechModel
from .tensor import ConfigError, assert_finite


class SessionClosedError(RuntimeError):
    """Audio pushed into, or finalize called on, a finalized session."""


@dataclass(frozen=True)
class StreamConfig:
    chunk_size: int = 8
    left_chunks: int | None = None
    emit: str = "partial"

    def __post_init__(self):
        if not 1 <= self.chunk_size <= 128:
            raise ConfigError("chunk_size must lie in [1, 128]")
        if self.left_chunks is not None and self.left_chunks < 0:
            raise ConfigError("left_chunks must be >= 0")
        if self.emit not in ("partial", "final-only"):
            raise ConfigError(f"unknown emit mode {self.emit!r}")

    @property
    def policy(self) -> ChunkPolicy:
        return ChunkPolicy.chunked(self.chunk_size, self.left_chunks)


@dataclass
class LatencyReport:
    algorithmic_ms: float
    chunks: int
    compute_ms_mean: float
    compute_ms_p95: float

    def to_dict(self) -> dict:
        return {
            "algorithmic_ms": self.algorithmic_ms,
            "chunks": self.chunks,
            "compute_ms_mean": self.compute_ms_mean,
            "compute_ms_p95": self.compute_ms_p95,
        }


@dataclass
class Emission:
    token: str
    chunk: int
    audio_ms: float


class StreamSession:
    """One live utterance. Not safe for concurrent pushes; open one session
    per stream. Sessions opened from the same model share only its
    (read-only) parameters."""

    def __init__(self, model: SpeechModel, cfg: StreamConfig, cmvn_stats=None):
        model.require_probe()
        self.model = model
        self.cfg = cfg
        self.frames = FrameStream()
        self.cmvn = RunningCMVN.fixed(*cmvn_stats) if cmvn_stats is not None else RunningCMVN()
        self.cache = model.encoder.init_stream_cache()
        self.chunks_processed = 0
        self.encoder_frames = 0
        self.emitted: list[int] = []
        self.emissions: list[Emission] = []
        self.outputs: list[torch.Tensor] = []
        self.compute_ms: list[float] = []
        self.peak_cache: list[int] = [0] * len(self.cache)
        self.samples_in = 0
        self._prev_group: np.ndarray | None = None
        self._last_id = BLANK
        self._closed = False

    @property
    def algorithmic_latency_ms(self) -> float:
        return latency_ms(self.cfg.policy)

    @property
    def transcript(self) -> str:
        return self.model.vocab.decode(self.emitted)

    @property
    def cached_frames(self) -> list[int]:
        return [0 if c["attn"] is None else c["attn"].shape[1] for c in self.cache]

    def push_audio(self, samples) -> list[str]:
        """Feed samples; returns the tokens emitted by any chunks completed."""
        if self._closed:
            raise SessionClosedError("session already finalized")
        samples = np.asarray(samples, dtype=np.float32).reshape(-1)
        self.samples_in += samples.size
        self.frames.push(samples)
        per_chunk = self.cfg.chunk_size * SUBSAMPLE
        new: list[str] = []
        while self.frames.available >= per_chunk:
            new += self._run_chunk(self.frames.take(per_chunk))
        return new if self.cfg.emit == "partial" else []

    def finalize(self) -> tuple[str, LatencyReport]:
        if self._closed:
            raise SessionClosedError("session already finalized")
        if self.frames.available:
            self._run_chunk(self.frames.take(self.frames.available), final=True)
        self._closed = True
        ms = np.asarray(self.compute_ms) if self.compute_ms else np.zeros(1)
        report = LatencyReport(self.algorithmic_latency_ms, self.chunks_processed,
                               float(ms.mean()), float(np.percentile(ms, 95)))
        return self.transcript, report

    def encoder_output(self) -> torch.Tensor:
        return torch.cat(self.outputs, dim=0) if self.outputs else torch.zeros(0, self.model.cfg.d_model)

    @torch.no_grad()
    def _run_chunk(self, raw: np.ndarray, final: bool = False) -> list[str]:
        start = time.perf_counter()
        feats = self.cmvn.normalize(raw)
        seg = feats if self._prev_group is None else np.concatenate([self._prev_group, feats])
        enc = self.model.encoder
        sub = enc.subsample(torch.from_numpy(seg).unsqueeze(0))
        if self._prev_group is not None:
            sub = sub[:, 1:]
        x = sub + sinusoidal_positions(self.encoder_frames, sub.shape[1], enc.cfg.d_model)
        C, L = self.cfg.chunk_size, self.cfg.left_chunks
        out = enc.forward_chunk(x, self.cache, None if L is None else L * C)[0]
        logprobs = assert_finite(self.model.probe(out), "stream logprobs")
        self._prev_group = feats[-SUBSAMPLE:]
        self.encoder_frames += out.shape[0]
        self.chunks_processed += 1
        self.outputs.append(out)

        sizes = self.cached_frames
        self.peak_cache = [max(p, s) for p, s in zip(self.peak_cache, sizes)]
        if not final:
            bound = self.chunks_processed if L is None else min(self.chunks_processed, L)
            if any(s != bound * C for s in sizes):
                raise RuntimeError(f"cache size {sizes} breaks the {bound * C}-frame bound")

        tokens = []
        audio_ms = self.samples_in / 16.0
        for k in logprobs.argmax(dim=-1).tolist():
            if k != self._last_id and k != BLANK:
                self.emitted.append(k)
                tok = self.model.vocab.tokens[k]
                tokens.append(tok)
                self.emissions.append(Emission(tok, self.chunks_processed - 1, audio_ms))
            self._last_id = k
        self.compute_ms.append((time.perf_counter() - start) * 1000.0)
        return tokens


def open_session(model: SpeechModel, cfg: StreamConfig, cmvn_stats=None) -> StreamSession:
    return StreamSession(model, cfg, cmvn_stats)


def stream_file(model: SpeechModel, samples: np.ndarray, cfg: StreamConfig,
                push_samples: int | None = None, cmvn_stats=None):
    """Replay ``samples`` in pushes of ``push_samples`` (whole file if None)."""
    session = open_session(model, cfg, cmvn_stats)
    step = push_samples or max(1, samples.size)
    for i in range(0, samples.size, step):
        session.push_audio(samples[i : i + step])
    text, report = session.finalize()
    return text, report, session


def first_emission_bound_ms(chunk_size: int) -> float:
    """Audio needed before the first chunk can run: its feature frames plus
    the analysis window overhang (25 ms window, 10 ms hop)."""
    return chunk_size * FRAME_MS + 15.0
