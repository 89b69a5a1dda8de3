"""Context-maskable Conformer encoder.

Feature frames (10 ms) go through two stride-2 convolutions, giving one
encoder frame per 40 ms. Each block is macaron half-FFN, masked multi-head
self-attention, a convolution module whose depthwise conv honours a tap
validity mask, a second half-FFN and a closing layer norm.

Subsampler length formula: each conv has kernel 3, stride 2 and one frame of
zero padding on each side in time, so ``T1 = ceil(T / 2)`` and
``T' = ceil(T1 / 2) = ceil(T / 4)``. Encoder frame ``t`` reads feature frames
``4t - 3 .. 4t + 3``, i.e. nothing past the end of its own 4-frame group.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import tensor as T_
from .chunking import ChunkPolicy, attention_mask, conv_validity
from .frontend import N_MELS, TooShortError
from .tensor import ConfigError, DimensionError

SUBSAMPLE = 4
MIN_FEATURE_FRAMES = 8
MASK_VALUE = -1e9


@dataclass(frozen=True)
class EncoderConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ffn_expansion: int = 4
    conv_kernel: int = 15
    dropout: float = 0.1
    n_mels: int = N_MELS
    conv_left_context: str = "within_chunk"

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.conv_kernel % 2 == 0:
            raise ConfigError(f"conv_kernel must be odd, got {self.conv_kernel}")
        if self.conv_left_context not in ("within_chunk", "causal_past"):
            raise ConfigError(f"unknown conv_left_context {self.conv_left_context!r}")

    @classmethod
    def preset(cls, name: str, **overrides) -> "EncoderConfig":
        try:
            base = PRESETS[name.lower()]
        except KeyError:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
        return replace(base, **overrides)

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS = {
    "large": EncoderConfig(d_model=848, n_layers=24, n_heads=8),
    "base": EncoderConfig(d_model=576, n_layers=12, n_heads=8),
    "tiny": EncoderConfig(d_model=64, n_layers=2, n_heads=4),
}


def subsampled_length(n_frames: int) -> int:
    return -(-n_frames // SUBSAMPLE)


def sinusoidal_positions(start: int, length: int, d_model: int) -> torch.Tensor:
    pos = torch.arange(start, start + length, dtype=torch.float64)[:, None]
    freq = torch.exp(torch.arange(0, d_model, 2, dtype=torch.float64) * (-math.log(10000.0) / d_model))
    pe = torch.zeros(length, d_model, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * freq)
    pe[:, 1::2] = torch.cos(pos * freq[: d_model // 2])
    return pe.float()


class LayerNorm(nn.Module):
    def __init__(self, d: int, eps: float = 1e-5):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(d))
        self.bias = nn.Parameter(torch.zeros(d))
        self.eps = eps

    def forward(self, x):
        return T_.layer_norm(x, self.gain, self.bias, self.eps)


class Dropout(nn.Module):
    """Dropout drawing from an explicit generator shared across the model."""

    def __init__(self, p: float, generator: torch.Generator):
        super().__init__()
        self.p = p
        self.generator = generator

    def forward(self, x):
        return T_.dropout(x, self.p, self.training, self.generator)


class Subsampler(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        ch = cfg.d_model
        self.conv1 = nn.Conv2d(1, ch, 3, stride=2, padding=(1, 0))
        self.conv2 = nn.Conv2d(ch, ch, 3, stride=2, padding=(1, 0))
        freq = ((cfg.n_mels - 3) // 2 + 1 - 3) // 2 + 1
        self.out = nn.Linear(ch * freq, cfg.d_model)

    def forward(self, feats: torch.Tensor, lengths: torch.Tensor | None = None) -> torch.Tensor:
        """``feats`` ``[B, T, n_mels]`` -> ``[B, ceil(T/4), d_model]``.

        With ``lengths``, first-layer outputs past each utterance's end are
        zeroed so batched results match unbatched zero padding.
        """
        h = T_.swish(self.conv1(feats.unsqueeze(1)))
        if lengths is not None:
            t1 = -(-lengths // 2)
            keep = torch.arange(h.shape[2])[None, :] < t1[:, None]
            h = h * keep[:, None, :, None].to(h.dtype)
        h = T_.swish(self.conv2(h))
        B, C, T2, Fq = h.shape
        return self.out(h.permute(0, 2, 1, 3).reshape(B, T2, C * Fq))


class FeedForward(nn.Module):
    def __init__(self, cfg: EncoderConfig, gen):
        super().__init__()
        self.norm = LayerNorm(cfg.d_model)
        self.w1 = nn.Linear(cfg.d_model, cfg.d_model * cfg.ffn_expansion)
        self.w2 = nn.Linear(cfg.d_model * cfg.ffn_expansion, cfg.d_model)
        self.drop = Dropout(cfg.dropout, gen)

    def forward(self, x):
        return self.drop(self.w2(self.drop(T_.swish(self.w1(self.norm(x))))))


class SelfAttention(nn.Module):
    def __init__(self, cfg: EncoderConfig, gen):
        super().__init__()
        self.norm = LayerNorm(cfg.d_model)
        self.h = cfg.n_heads
        self.dk = cfg.d_model // cfg.n_heads
        self.q = nn.Linear(cfg.d_model, cfg.d_model)
        self.k = nn.Linear(cfg.d_model, cfg.d_model)
        self.v = nn.Linear(cfg.d_model, cfg.d_model)
        self.o = nn.Linear(cfg.d_model, cfg.d_model)
        self.drop = Dropout(cfg.dropout, gen)

    def forward(self, x_q, x_kv, allowed):
        """``allowed`` broadcasts to ``[B, Tq, Tk]``."""
        B, Tq, D = x_q.shape
        Tk = x_kv.shape[1]
        q = self.q(self.norm(x_q)).view(B, Tq, self.h, self.dk).transpose(1, 2)
        kv_in = self.norm(x_kv)
        k = self.k(kv_in).view(B, Tk, self.h, self.dk).transpose(1, 2)
        v = self.v(kv_in).view(B, Tk, self.h, self.dk).transpose(1, 2)
        scores = T_.matmul(q, k.transpose(-1, -2)) / math.sqrt(self.dk)
        scores = scores.masked_fill(~allowed.unsqueeze(1), MASK_VALUE)
        ctx = T_.matmul(T_.softmax(scores, dim=-1), v)
        return self.drop(self.o(ctx.transpose(1, 2).reshape(B, Tq, D)))


class ConvModule(nn.Module):
    def __init__(self, cfg: EncoderConfig, gen):
        super().__init__()
        d = cfg.d_model
        self.norm = LayerNorm(d)
        self.pw1 = nn.Linear(d, 2 * d)
        self.kernel = nn.Parameter(torch.randn(cfg.conv_kernel, d) / math.sqrt(cfg.conv_kernel))
        self.dw_bias = nn.Parameter(torch.zeros(d))
        self.dw_norm = LayerNorm(d)
        self.pw2 = nn.Linear(d, d)
        self.drop = Dropout(cfg.dropout, gen)

    def pre(self, x):
        return F.glu(self.pw1(self.norm(x)), dim=-1)

    def post(self, g, valid):
        h = T_.depthwise_conv1d_masked(g, self.kernel, valid) + self.dw_bias
        return self.drop(self.pw2(T_.swish(self.dw_norm(h))))

    def forward(self, x, valid):
        return self.post(self.pre(x), valid)


class ConformerBlock(nn.Module):
    def __init__(self, cfg: EncoderConfig, gen):
        super().__init__()
        self.ffn1 = FeedForward(cfg, gen)
        self.attn = SelfAttention(cfg, gen)
        self.conv = ConvModule(cfg, gen)
        self.ffn2 = FeedForward(cfg, gen)
        self.final = LayerNorm(cfg.d_model)
        self.K = cfg.conv_kernel

    def forward(self, x, allowed, valid):
        x = x + 0.5 * self.ffn1(x)
        x = x + self.attn(x, x, allowed)
        x = x + self.conv(x, valid)
        x = x + 0.5 * self.ffn2(x)
        return self.final(x)

    def forward_chunk(self, x, cache, causal_past: bool):
        """One chunk ``[1, C, d]`` against cached left context.

        ``cache`` holds ``attn`` (post-FFN residual states of the visible
        left frames) and ``conv`` (the last ``K // 2`` depthwise inputs, only
        used when convolution may read into earlier chunks).
        """
        h = x + 0.5 * self.ffn1(x)
        kv = torch.cat([cache["attn"], h], dim=1) if cache["attn"] is not None else h
        allowed = torch.ones(1, h.shape[1], kv.shape[1], dtype=torch.bool)
        x = h + self.attn(h, kv, allowed)
        g = self.conv.pre(x)
        C = g.shape[1]
        if causal_past and cache["conv"] is not None:
            g_all = torch.cat([cache["conv"], g], dim=1)
        else:
            g_all = g
        valid = torch.as_tensor(conv_validity(g_all.shape[1], ChunkPolicy.full(), self.K))
        conv_out = self.conv.post(g_all, valid)[:, -C:]
        x = x + conv_out
        x = x + 0.5 * self.ffn2(x)
        return self.final(x), h, g


class ConformerEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.generator = torch.Generator().manual_seed(seed)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.subsample = Subsampler(cfg)
            self.blocks = nn.ModuleList(ConformerBlock(cfg, self.generator) for _ in range(cfg.n_layers))

    def masks(self, T: int, policy: ChunkPolicy):
        allowed = torch.as_tensor(attention_mask(T, policy))
        valid = torch.as_tensor(conv_validity(T, policy, self.cfg.conv_kernel, self.cfg.conv_left_context))
        return allowed, valid

    def embed(self, feats: torch.Tensor, lengths: torch.Tensor | None = None) -> torch.Tensor:
        """Subsample and add absolute positions; ``feats`` ``[B, T, n_mels]``."""
        if feats.dim() != 3 or feats.shape[-1] != self.cfg.n_mels:
            raise DimensionError(f"expected [B, T, {self.cfg.n_mels}] features, got {tuple(feats.shape)}")
        if feats.shape[1] < MIN_FEATURE_FRAMES:
            raise TooShortError(f"need >= {MIN_FEATURE_FRAMES} feature frames, got {feats.shape[1]}")
        x = self.subsample(feats, lengths)
        return x + sinusoidal_positions(0, x.shape[1], self.cfg.d_model)

    def encode(self, x: torch.Tensor, attn_mask, conv_mask, lengths: torch.Tensor | None = None) -> torch.Tensor:
        """Run the block stack on ``x`` (``[T', d]`` or ``[B, T', d]``).

        ``attn_mask`` is ``[T', T']``; ``conv_mask`` is ``[T', K]``. With
        ``lengths`` (batched), padded keys and conv taps are masked as well.
        """
        squeeze = x.dim() == 2
        if squeeze:
            x = x.unsqueeze(0)
        B, T, _ = x.shape
        attn_mask = torch.as_tensor(attn_mask, dtype=torch.bool)
        conv_mask = torch.as_tensor(conv_mask, dtype=torch.bool)
        if tuple(attn_mask.shape) != (T, T) or tuple(conv_mask.shape) != (T, self.cfg.conv_kernel):
            raise DimensionError(
                f"masks {tuple(attn_mask.shape)}/{tuple(conv_mask.shape)} do not match T'={T}"
            )
        allowed = attn_mask.unsqueeze(0).expand(B, T, T)
        valid = conv_mask
        if lengths is not None:
            real = torch.arange(T)[None, :] < lengths[:, None]
            allowed = allowed & real[:, None, :]
            allowed = allowed | torch.eye(T, dtype=torch.bool)[None]
            src = torch.arange(T)[:, None] + torch.arange(self.cfg.conv_kernel)[None, :] - self.cfg.conv_kernel // 2
            tap_real = (src[None] >= 0) & (src[None] < lengths[:, None, None])
            valid = conv_mask[None] & tap_real
        for block in self.blocks:
            x = block(x, allowed, valid)
        return x.squeeze(0) if squeeze else x

    def forward(self, feats: torch.Tensor, policy: ChunkPolicy, lengths: torch.Tensor | None = None) -> torch.Tensor:
        x = self.embed(feats, lengths)
        allowed, valid = self.masks(x.shape[1], policy)
        enc_lengths = None if lengths is None else -(-lengths // SUBSAMPLE)
        return self.encode(x, allowed, valid, enc_lengths)

    def init_stream_cache(self) -> list:
        return [{"attn": None, "conv": None} for _ in self.blocks]

    def forward_chunk(self, x: torch.Tensor, cache: list, keep_frames: int | None) -> torch.Tensor:
        """Advance every layer by one chunk; ``keep_frames`` bounds the left
        cache (``None`` keeps everything)."""
        causal_past = self.cfg.conv_left_context == "causal_past"
        half = self.cfg.conv_kernel // 2
        for block, c in zip(self.blocks, cache):
            x, h, g = block.forward_chunk(x, c, causal_past)
            hist = torch.cat([c["attn"], h], dim=1) if c["attn"] is not None else h
            if keep_frames is not None:
                hist = hist[:, hist.shape[1] - min(keep_frames, hist.shape[1]):]
            c["attn"] = hist if hist.shape[1] else None
            if causal_past and half:
                gh = torch.cat([c["conv"], g], dim=1) if c["conv"] is not None else g
                c["conv"] = gh[:, -half:]
        return x


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
