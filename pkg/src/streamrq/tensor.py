"""Closed operator set used by the encoder, probe and losses.

Tensors are plain ``torch.Tensor`` objects in float32; reverse-mode
differentiation is torch autograd. This module pins down the exact op
surface, adds the masked depthwise convolution the chunked encoder needs,
and provides a finite-difference gradient checker used as a test oracle.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

DTYPE = torch.float32

__all__ = [
    "DimensionError",
    "ConfigError",
    "NumericError",
    "tensor",
    "matmul",
    "add",
    "mul",
    "gelu",
    "swish",
    "sigmoid",
    "layer_norm",
    "softmax",
    "log_softmax",
    "depthwise_conv1d_masked",
    "embedding",
    "dropout",
    "concat",
    "backward",
    "assert_finite",
    "check_gradients",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ConfigError(ValueError):
    """An operator or model was configured with invalid hyper-parameters."""


class NumericError(FloatingPointError):
    """A NaN or infinity appeared in a tensor that must stay finite."""


def tensor(data, requires_grad: bool = False) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(data, dtype=np.float32)).clone()
    if t.dim() > 4:
        raise DimensionError(f"rank {t.dim()} exceeds the supported maximum of 4")
    return t.requires_grad_(requires_grad)


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 2 or b.dim() < 2:
        raise DimensionError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"inner dimensions differ: {tuple(a.shape)} @ {tuple(b.shape)}"
        )
    try:
        torch.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except RuntimeError as exc:
        raise DimensionError(str(exc)) from None
    return torch.matmul(a, b)


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return a + b


def mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return a * b


def gelu(x: torch.Tensor) -> torch.Tensor:
    return F.gelu(x)


def swish(x: torch.Tensor) -> torch.Tensor:
    return x * torch.sigmoid(x)


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(x)


def layer_norm(
    x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor, eps: float = 1e-5
) -> torch.Tensor:
    if x.shape[-1] != gain.shape[-1] or gain.shape != bias.shape:
        raise DimensionError("gain/bias must match the last dimension of x")
    # Statistics in float64, result back in the input dtype.
    xd = x.double()
    mean = xd.mean(dim=-1, keepdim=True)
    var = ((xd - mean) ** 2).mean(dim=-1, keepdim=True)
    normed = ((xd - mean) / torch.sqrt(var + eps)).to(x.dtype)
    return normed * gain + bias


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return torch.softmax(x, dim=dim)


def log_softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    # logsumexp in float64 with max subtraction.
    xd = x.double()
    m = xd.amax(dim=dim, keepdim=True).detach()
    lse = m + torch.log(torch.exp(xd - m).sum(dim=dim, keepdim=True))
    return (xd - lse).to(x.dtype)


def depthwise_conv1d_masked(
    x: torch.Tensor, kernel: torch.Tensor, valid: torch.Tensor
) -> torch.Tensor:
    """Depthwise 1-D convolution with per-position tap validity.

    ``x`` is ``[T, D]`` or ``[B, T, D]``, ``kernel`` is ``[K, D]`` and
    ``valid`` is a boolean ``[T, K]`` (or per-item ``[B, T, K]``) mask; tap
    ``k`` at output ``t`` reads
    ``x[t + k - K // 2]`` and contributes only where ``valid[t, k]``.
    Taps falling outside ``[0, T)`` read zero padding.
    """
    K = kernel.shape[0]
    if K % 2 == 0:
        raise ConfigError(f"kernel size must be odd, got {K}")
    squeeze = x.dim() == 2
    if squeeze:
        x = x.unsqueeze(0)
    B, T, D = x.shape
    if kernel.shape[1] != D:
        raise DimensionError(f"kernel channels {kernel.shape[1]} != input channels {D}")
    if tuple(valid.shape[-2:]) != (T, K) or valid.dim() not in (2, 3):
        raise DimensionError(f"validity mask {tuple(valid.shape)} != ({T}, {K})")
    half = K // 2
    padded = F.pad(x, (0, 0, half, half))
    taps = torch.stack([padded[:, k : k + T] for k in range(K)], dim=0)  # K,B,T,D
    v = valid.to(x.dtype)
    v = v.t()[:, None, :] if v.dim() == 2 else v.permute(2, 0, 1)  # K,(B|1),T
    weight = kernel[:, None, None, :] * v[..., None]
    out = (taps * weight).sum(dim=0)
    return out.squeeze(0) if squeeze else out


def embedding(ids: torch.Tensor, table: torch.Tensor) -> torch.Tensor:
    return table[ids]


def dropout(
    x: torch.Tensor, p: float, training: bool, generator: torch.Generator | None = None
) -> torch.Tensor:
    if not training or p == 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator) >= p
    return x * keep.to(x.dtype) / (1.0 - p)


def concat(parts: Sequence[torch.Tensor], dim: int = 0) -> torch.Tensor:
    return torch.cat(list(parts), dim=dim)


def backward(loss: torch.Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from a scalar loss.

    Repeated calls accumulate, as with any autograd engine.
    """
    if loss.numel() != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    loss.backward()


def assert_finite(t: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NumericError(f"non-finite values in {what}")
    return t


def check_gradients(
    f: Callable[[], torch.Tensor],
    params: Iterable[torch.Tensor],
    h: float = 1e-3,
    n_coords: int = 8,
    seed: int = 0,
    grad_floor: float = 0.01,
) -> float:
    """Compare autograd gradients against central finite differences.

    ``f`` rebuilds the graph from the current parameter values and returns a
    scalar. For every parameter tensor, up to ``n_coords`` coordinates are
    drawn among those whose analytic gradient is at least ``grad_floor``
    times the largest gradient magnitude over all ``params``. Smaller
    coordinates move a float32 loss by less than its rounding noise at step
    ``h``, so their difference quotients carry no signal; a tensor with no
    coordinate above the floor is skipped.
    Returns the max of ``|a - n| / (|a| + |n| + 1e-8)`` over the draws.
    """
    params = list(params)
    for p in params:
        p.grad = None
    loss = f()
    backward(loss)
    analytic = [torch.zeros_like(p) if p.grad is None else p.grad.detach().clone() for p in params]
    top = max(float(g.abs().max()) for g in analytic)
    rng = np.random.default_rng(seed)
    worst = 0.0
    if top == 0.0:
        return worst
    with torch.no_grad():
        for p, g in zip(params, analytic):
            flat_g = g.reshape(-1)
            candidates = torch.nonzero(flat_g.abs() >= grad_floor * top).reshape(-1).numpy()
            if len(candidates) == 0:
                continue
            picks = rng.choice(candidates, size=min(n_coords, len(candidates)), replace=False)
            flat_p = p.data.view(-1)
            for idx in picks:
                orig = flat_p[idx].item()
                flat_p[idx] = orig + h
                up = float(f())
                flat_p[idx] = orig - h
                down = float(f())
                flat_p[idx] = orig
                numeric = (up - down) / (2 * h)
                a = float(flat_g[idx])
                err = abs(a - numeric) / (abs(a) + abs(numeric) + 1e-8)
                if math.isnan(err):
                    return float("inf")
                worst = max(worst, err)
    for p in params:
        p.grad = None
    return worst
