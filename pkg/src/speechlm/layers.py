"""Small building blocks shared by the encoder and the language model."""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def seeded_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(seed)
    return g


@torch.no_grad()
def init_linear_(linear: nn.Linear, gen: torch.Generator) -> None:
    # uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) drawn from `gen`, zero bias
    bound = 1.0 / math.sqrt(linear.in_features)
    linear.weight.copy_(torch.rand(linear.weight.shape, generator=gen) * 2 * bound - bound)
    if linear.bias is not None:
        linear.bias.zero_()


def attention(q, k, v, mask=None):
    """Scaled dot-product attention on ``[B, H, L, Dh]`` tensors.

    ``mask`` is boolean and broadcastable to ``[B, H, Lq, Lk]``; True keeps a key.
    """
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    if mask is not None:
        scores = scores.masked_fill(~mask, torch.finfo(scores.dtype).min)
    return F.softmax(scores, dim=-1) @ v


def sinusoidal_positions(length: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    i = torch.arange(0, dim, 2, dtype=torch.float64)
    angle = pos / torch.pow(10000.0, i / dim)
    pe = torch.zeros(length, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle[:, : dim // 2])
    return pe.to(dtype)


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))

    def forward(self, x):
        return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.eps) * self.weight


class _RoundBf16(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        return x.to(torch.bfloat16).to(x.dtype)

    @staticmethod
    def backward(ctx, grad):
        return grad.to(torch.bfloat16).to(grad.dtype)


def round_bf16(x: torch.Tensor) -> torch.Tensor:
    """Round values (and the gradient flowing back) to bfloat16 precision."""
    return _RoundBf16.apply(x)
