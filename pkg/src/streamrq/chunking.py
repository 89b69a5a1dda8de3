"""Context regimes for chunked attention and within-chunk convolution."""

from __future__ import annotations

import math
import random
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .tensor import ConfigError

FRAME_MS = 40
FULL_LEFT = None  # sentinel for unlimited left context
LATENCY_UNBOUNDED = math.inf

__all__ = [
    "FRAME_MS",
    "FULL_LEFT",
    "LATENCY_UNBOUNDED",
    "ChunkPolicy",
    "ScheduleConfig",
    "sample_policy",
    "attention_mask",
    "conv_validity",
    "latency_ms",
]


@dataclass(frozen=True)
class ChunkPolicy:
    """Full context, or chunks of ``chunk_size`` frames with ``left_chunks``
    previous chunks visible (``None`` means every previous chunk)."""

    mode: str = "full"
    chunk_size: int = 0
    left_chunks: Optional[int] = FULL_LEFT

    def __post_init__(self):
        if self.mode not in ("full", "chunked"):
            raise ConfigError(f"unknown policy mode {self.mode!r}")
        if self.mode == "chunked":
            if self.chunk_size < 1:
                raise ConfigError("chunked policy needs chunk_size >= 1")
            if self.left_chunks is not None and self.left_chunks < 0:
                raise ConfigError("left_chunks must be >= 0")
        elif self.left_chunks is not None:
            raise ConfigError("a left-context budget only applies to chunked policies")

    @classmethod
    def full(cls) -> "ChunkPolicy":
        return cls("full", 0, None)

    @classmethod
    def chunked(cls, chunk_size: int, left_chunks: Optional[int] = FULL_LEFT) -> "ChunkPolicy":
        return cls("chunked", int(chunk_size), None if left_chunks is None else int(left_chunks))

    @property
    def is_full(self) -> bool:
        return self.mode == "full"

    def describe(self) -> str:
        if self.is_full:
            return "full"
        left = "full" if self.left_chunks is None else str(self.left_chunks)
        return f"chunk={self.chunk_size},left={left}"


@dataclass(frozen=True)
class ScheduleConfig:
    p_full: float = 0.40
    chunk_range: tuple = (8, 32)
    p_limited_left: float = 0.75
    left_range: tuple = (2, 32)

    def __post_init__(self):
        for name in ("p_full", "p_limited_left"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name}={p} outside [0, 1]")
        for name in ("chunk_range", "left_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name} is empty: {lo} > {hi}")
        if self.chunk_range[0] < 1 or self.left_range[0] < 0:
            raise ConfigError("chunk sizes must be >= 1 and left budgets >= 0")


def sample_policy(rng: random.Random, schedule: ScheduleConfig, phase: str = "pretrain") -> ChunkPolicy:
    """Draw the context regime for one batch.

    Pre-training mixes full-context batches in with probability ``p_full``;
    fine-tuning always chunks. Chunk size and left budget are uniform over
    their inclusive ranges.
    """
    if phase not in ("pretrain", "finetune"):
        raise ConfigError(f"unknown phase {phase!r}")
    p_full = schedule.p_full if phase == "pretrain" else 0.0
    if rng.random() < p_full:
        return ChunkPolicy.full()
    chunk = rng.randint(*schedule.chunk_range)
    if rng.random() < schedule.p_limited_left:
        return ChunkPolicy.chunked(chunk, rng.randint(*schedule.left_range))
    return ChunkPolicy.chunked(chunk, FULL_LEFT)


def attention_mask(T: int, policy: ChunkPolicy) -> np.ndarray:
    """``allowed[i, j]``: query frame ``i`` may attend to key frame ``j``."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if policy.is_full:
        return np.ones((T, T), dtype=bool)
    chunk = np.arange(T) // policy.chunk_size
    q, k = chunk[:, None], chunk[None, :]
    allowed = k <= q
    if policy.left_chunks is not None:
        allowed &= k >= q - policy.left_chunks
    return allowed


def conv_validity(T: int, policy: ChunkPolicy, K: int, conv_left_context: str = "within_chunk") -> np.ndarray:
    """``valid[i, k]``: tap ``k`` of a size-``K`` kernel centred on ``i`` is readable.

    Chunked policies keep taps inside the output frame's own chunk. The
    ``causal_past`` variant additionally admits taps reaching into earlier
    chunks (never later ones). The left-context budget does not widen it.
    """
    if K % 2 == 0:
        raise ConfigError(f"kernel size must be odd, got {K}")
    if conv_left_context not in ("within_chunk", "causal_past"):
        raise ConfigError(f"unknown conv_left_context {conv_left_context!r}")
    src = np.arange(T)[:, None] + np.arange(K)[None, :] - K // 2
    in_range = (src >= 0) & (src < T)
    if policy.is_full:
        return in_range
    own = (np.arange(T) // policy.chunk_size)[:, None]
    tap_chunk = np.where(in_range, src, 0) // policy.chunk_size
    if conv_left_context == "within_chunk":
        return in_range & (tap_chunk == own)
    return in_range & (tap_chunk <= own)


def latency_ms(policy: ChunkPolicy, frame_ms: int = FRAME_MS) -> float:
    """Algorithmic latency: a frame's output is ready once its chunk completes."""
    if policy.is_full:
        return LATENCY_UNBOUNDED
    return policy.chunk_size * frame_ms
