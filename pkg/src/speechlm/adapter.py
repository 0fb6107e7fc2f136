"""Time-downsampling adapter bridging encoder frames into the LM embedding space.

Each group of ``k`` consecutive encoder frames is concatenated into one
``k * d_enc`` vector, then passed through Linear -> ReLU -> Linear.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .config import AdapterConfig
from .encoder import EncoderOutput
from .errors import InputError, ShapeError


@dataclass(frozen=True)
class AudioPromptEmbedding:
    vectors: np.ndarray  # [T'', d_llm]
    granularity_ms: float

    @property
    def num_frames(self) -> int:
        return self.vectors.shape[0]


def adapter_param_count(cfg: AdapterConfig) -> int:
    return (cfg.k * cfg.d_enc * cfg.d_hidden + cfg.d_hidden) + (cfg.d_hidden * cfg.d_llm + cfg.d_llm)


def output_lengths(lengths, k: int, tail_policy: str):
    """Row count after grouping: floor(T/k) for ``drop``, ceil(T/k) for ``pad_repeat``."""
    if tail_policy == "drop":
        return lengths // k
    return -(-lengths // k)


class Adapter(nn.Module):
    def __init__(self, cfg: AdapterConfig, seed: int = 3):
        super().__init__()
        self.cfg = cfg
        self.linear1 = nn.Linear(cfg.k * cfg.d_enc, cfg.d_hidden)
        self.act = nn.ReLU()
        self.linear2 = nn.Linear(cfg.d_hidden, cfg.d_llm)
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for lin in (self.linear1, self.linear2):
                bound = lin.in_features**-0.5
                lin.weight.copy_(torch.rand(lin.weight.shape, generator=g) * 2 * bound - bound)
                lin.bias.zero_()

    def forward(self, x, lengths=None):
        """``x``: ``[B, T', d_enc]`` -> ``([B, T'', d_llm], out_lengths)``."""
        k = self.cfg.k
        b, t, d = x.shape
        if d != self.cfg.d_enc:
            raise ShapeError(f"adapter expects dim {self.cfg.d_enc}, got {d}")
        if lengths is None:
            lengths = torch.full((b,), t, dtype=torch.long)
        out_len = output_lengths(lengths, k, self.cfg.tail_policy)
        if (out_len < 1).any():
            raise InputError(f"encoder output shorter than k={k} frames under tail_policy=drop")
        t_out = int(out_len.max())
        # frame index for (group j, slot r): j*k + r, clamped to the sample's last valid frame
        idx = torch.arange(t_out)[:, None] * k + torch.arange(k)[None, :]
        idx = torch.minimum(idx[None], (lengths - 1)[:, None, None]).reshape(b, t_out * k)
        grouped = torch.gather(x, 1, idx[..., None].expand(b, t_out * k, d)).reshape(b, t_out, k * d)
        return self.linear2(self.act(self.linear1(grouped))), out_len


@torch.no_grad()
def adapt(enc_out: EncoderOutput, adapter: Adapter) -> AudioPromptEmbedding:
    frames = np.asarray(enc_out.frames)
    if frames.ndim != 2 or frames.shape[1] != adapter.cfg.d_enc:
        raise ShapeError(f"encoder output dim {frames.shape[-1]} != adapter d_enc {adapter.cfg.d_enc}")
    if adapter.cfg.tail_policy == "drop" and frames.shape[0] < adapter.cfg.k:
        raise InputError(f"{frames.shape[0]} encoder frames < k={adapter.cfg.k}")
    dtype = adapter.linear1.weight.dtype
    y, _ = adapter(torch.as_tensor(frames, dtype=dtype)[None])
    return AudioPromptEmbedding(
        vectors=y[0].numpy(), granularity_ms=enc_out.effective_shift_ms * adapter.cfg.k
    )
