"""BEST-RQ targets and masking.

A frozen random projection followed by nearest-neighbour lookup in a frozen
random codebook turns each group of four stacked feature frames into a
discrete label. The encoder sees span-masked features and is trained to
predict the labels of the masked encoder frames.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn

from .chunking import ChunkPolicy
from .encoder import SUBSAMPLE, ConformerEncoder
from .tensor import ConfigError, assert_finite, log_softmax

log = logging.getLogger(__name__)

NORM_EPS = 1e-8


@dataclass(frozen=True)
class QuantizerConfig:
    seed: int = 0
    codebook_size: int = 8192
    code_dim: int = 16
    input_dim: int = SUBSAMPLE * 80

    def __post_init__(self):
        if self.codebook_size < 2:
            raise ConfigError("codebook_size must be >= 2")


class Quantizer:
    """Random-projection quantizer; ``projection`` and ``codebook`` never change."""

    def __init__(self, cfg: QuantizerConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        proj = rng.standard_normal((cfg.input_dim, cfg.code_dim)) / np.sqrt(cfg.input_dim)
        book = rng.standard_normal((cfg.codebook_size, cfg.code_dim))
        book /= np.linalg.norm(book, axis=1, keepdims=True)
        self.projection = proj.astype(np.float32)
        self.codebook = book.astype(np.float32)
        self.projection.setflags(write=False)
        self.codebook.setflags(write=False)

    @classmethod
    def from_arrays(cls, cfg: QuantizerConfig, projection, codebook) -> "Quantizer":
        q = cls.__new__(cls)
        q.cfg = cfg
        q.projection = np.array(projection, dtype=np.float32)
        q.codebook = np.array(codebook, dtype=np.float32)
        q.projection.setflags(write=False)
        q.codebook.setflags(write=False)
        return q

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(self.projection.tobytes())
        h.update(self.codebook.tobytes())
        return h.hexdigest()

    def quantize(self, stacked) -> np.ndarray:
        """Labels for ``[T', input_dim]`` stacked frames; ties go to the lowest index."""
        x = np.asarray(stacked, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.cfg.input_dim:
            raise ValueError(f"expected [T', {self.cfg.input_dim}] input, got {x.shape}")
        y = x @ self.projection.astype(np.float64)
        y /= np.maximum(np.linalg.norm(y, axis=1, keepdims=True), NORM_EPS)
        book = self.codebook.astype(np.float64)
        labels = np.empty(len(y), dtype=np.int64)
        for start in range(0, len(y), 256):
            block = y[start : start + 256]
            dist = ((block[:, None, :] - book[None, :, :]) ** 2).sum(axis=-1)
            labels[start : start + 256] = dist.argmin(axis=1)
        return labels


def stack_frames(frames: np.ndarray, group: int = SUBSAMPLE) -> np.ndarray:
    """``[T, D]`` -> ``[ceil(T/group), group*D]``, zero-padding the last group."""
    T, D = frames.shape
    n = -(-T // group)
    padded = np.zeros((n * group, D), dtype=np.float32)
    padded[:T] = frames
    return padded.reshape(n, group * D)


@dataclass(frozen=True)
class MaskSpec:
    segment_frames: int = SUBSAMPLE
    p_start: float = 0.15
    span_segments: int = 4
    noise_std: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.p_start <= 1.0:
            raise ConfigError("p_start must lie in [0, 1]")
        if self.segment_frames != SUBSAMPLE:
            raise ConfigError(f"segments must align with the {SUBSAMPLE}x subsampler")
        if self.span_segments < 1:
            raise ConfigError("span_segments must be >= 1")

    @property
    def expected_coverage(self) -> float:
        return 1.0 - (1.0 - self.p_start) ** self.span_segments


@dataclass
class MaskRealization:
    masked: np.ndarray  # bool per encoder frame

    @property
    def empty(self) -> bool:
        return not self.masked.any()

    @property
    def coverage(self) -> float:
        return float(self.masked.mean()) if self.masked.size else 0.0

    def feature_mask(self, n_frames: int) -> np.ndarray:
        return np.repeat(self.masked, SUBSAMPLE)[:n_frames]


def sample_mask(n_segments: int, spec: MaskSpec, rng: np.random.Generator) -> MaskRealization:
    """Independent span starts; each start masks ``span_segments`` frames.

    An empty draw is retried once and then returned as is.
    """
    if n_segments < 1:
        raise ValueError("need at least one encoder frame")
    for _ in range(2):
        starts = np.flatnonzero(rng.random(n_segments) < spec.p_start)
        masked = np.zeros(n_segments, dtype=bool)
        for s in starts:
            masked[s : s + spec.span_segments] = True
        if masked.any():
            break
    return MaskRealization(masked)


def apply_mask(frames: np.ndarray, mask: MaskRealization, spec: MaskSpec,
               rng: np.random.Generator) -> np.ndarray:
    out = np.array(frames, dtype=np.float32, copy=True)
    fm = mask.feature_mask(len(out))
    n = int(fm.sum())
    if n:
        out[fm] = rng.normal(0.0, spec.noise_std, size=(n, out.shape[1])).astype(np.float32)
    return out


def classifier_head(d_model: int, codebook_size: int, seed: int = 0, std: float = 0.02) -> nn.Linear:
    """Linear ``d_model -> codebook_size`` with small weights, so an untrained
    model predicts close to uniformly (loss near ``ln N``)."""
    head = nn.Linear(d_model, codebook_size)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        head.weight.copy_(torch.randn(head.weight.shape, generator=gen) * std)
        head.bias.zero_()
    return head


def pad_batch(frames: list[np.ndarray]) -> tuple[torch.Tensor, torch.Tensor]:
    lengths = torch.tensor([len(f) for f in frames])
    batch = torch.zeros(len(frames), int(lengths.max()), frames[0].shape[1])
    for i, f in enumerate(frames):
        batch[i, : len(f)] = torch.from_numpy(np.asarray(f, dtype=np.float32))
    return batch, lengths


def masked_prediction_loss(logits: torch.Tensor, targets: torch.Tensor, masked: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over positions where ``masked`` is true.

    Accumulated in float64 so the scalar keeps the precision a finite
    difference check needs; gradients flow back to ``logits`` in its dtype.
    """
    logp = log_softmax(logits.double(), dim=-1)
    picked = logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    weight = masked.double()
    return -(picked * weight).sum() / weight.sum()


def prepare_pretrain_batch(batch: list[np.ndarray], quantizer: Quantizer, spec: MaskSpec,
                           rng: np.random.Generator):
    """Targets from clean features, noised inputs and per-frame loss weights."""
    targets, noised, masks = [], [], []
    for frames in batch:
        targets.append(quantizer.quantize(stack_frames(frames)))
        m = sample_mask(len(targets[-1]), spec, rng)
        masks.append(m.masked)
        noised.append(apply_mask(frames, m, spec, rng))
    feats, lengths = pad_batch(noised)
    Tp = max(len(t) for t in targets)
    tgt = torch.zeros(len(batch), Tp, dtype=torch.long)
    weight = torch.zeros(len(batch), Tp)
    for i, (t, m) in enumerate(zip(targets, masks)):
        tgt[i, : len(t)] = torch.from_numpy(t)
        weight[i, : len(m)] = torch.from_numpy(m.astype(np.float32))
    return feats, lengths, tgt, weight


def pretrain_step(encoder: ConformerEncoder, head: nn.Linear, batch: list[np.ndarray],
                  policy: ChunkPolicy, quantizer: Quantizer, spec: MaskSpec,
                  rng: np.random.Generator, optimizer: torch.optim.Optimizer | None = None):
    """One masked-prediction update. Returns the loss, or ``None`` when the
    batch drew no masked frame (the step is skipped)."""
    feats, lengths, tgt, weight = prepare_pretrain_batch(batch, quantizer, spec, rng)
    if weight.sum() == 0:
        log.warning("pretrain step skipped: no masked frames in batch")
        return None
    hidden = encoder(feats, policy, lengths)
    loss = masked_prediction_loss(head(hidden), tgt, weight)
    assert_finite(loss.detach(), "pretrain loss")
    if optimizer is not None:
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
    return float(loss.detach())


def quantizer_config_dict(cfg: QuantizerConfig) -> dict:
    return asdict(cfg)
