"""Toy frame-synchronous audio encoder (pre-norm transformer, bidirectional)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.utils.checkpoint import checkpoint

from .config import EncoderConfig, config_to_dict
from .container import Container, read_container, write_container
from .errors import FormatError, ShapeError
from .frontend import LfrSequence
from .layers import attention, init_linear_, seeded_generator, sinusoidal_positions


@dataclass(frozen=True)
class EncoderOutput:
    frames: np.ndarray  # [T', d_enc]
    effective_shift_ms: float = 60.0

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


class EncoderBlock(nn.Module):
    def __init__(self, d: int, n_heads: int, d_ff: int):
        super().__init__()
        self.n_heads = n_heads
        self.norm1 = nn.LayerNorm(d)
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.o = nn.Linear(d, d)
        self.norm2 = nn.LayerNorm(d)
        self.ff1 = nn.Linear(d, d_ff)
        self.ff2 = nn.Linear(d_ff, d)

    def _heads(self, x):
        b, t, d = x.shape
        return x.view(b, t, self.n_heads, d // self.n_heads).transpose(1, 2)

    def forward(self, x, key_mask):
        h = self.norm1(x)
        a = attention(self._heads(self.q(h)), self._heads(self.k(h)), self._heads(self.v(h)), key_mask)
        x = x + self.o(a.transpose(1, 2).reshape(x.shape))
        return x + self.ff2(F.gelu(self.ff1(self.norm2(x))))


class AudioEncoder(nn.Module):
    """Maps ``[B, T', d_in]`` LFR features to ``[B, T', d_enc]``; no change along time."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.grad_checkpoint = False
        self.proj = nn.Linear(cfg.d_in, cfg.d_enc)
        self.blocks = nn.ModuleList(
            EncoderBlock(cfg.d_enc, cfg.n_heads, cfg.d_ff) for _ in range(cfg.n_layers)
        )
        self.norm = nn.LayerNorm(cfg.d_enc)
        self.reset_parameters()

    def reset_parameters(self):
        # Linear weights ~ U(+-1/sqrt(fan_in)) from one generator walked in
        # module registration order; biases 0; LayerNorm gain 1, bias 0.
        gen = seeded_generator(self.cfg.seed)
        for mod in self.modules():
            if isinstance(mod, nn.Linear):
                init_linear_(mod, gen)
            elif isinstance(mod, nn.LayerNorm):
                nn.init.ones_(mod.weight)
                nn.init.zeros_(mod.bias)

    def forward(self, x, lengths=None):
        if x.shape[-1] != self.cfg.d_in:
            raise ShapeError(f"encoder expects feature dim {self.cfg.d_in}, got {x.shape[-1]}")
        b, t, _ = x.shape
        if lengths is None:
            lengths = torch.full((b,), t, dtype=torch.long)
        key_mask = (torch.arange(t)[None, :] < lengths[:, None])[:, None, None, :]
        h = self.proj(x) + sinusoidal_positions(t, self.cfg.d_enc, x.dtype)
        for block in self.blocks:
            if self.grad_checkpoint and torch.is_grad_enabled():
                h = checkpoint(block, h, key_mask, use_reentrant=False)
            else:
                h = block(h, key_mask)
        return self.norm(h)


def init_encoder(cfg: EncoderConfig) -> AudioEncoder:
    enc = AudioEncoder(cfg)
    enc.requires_grad_(cfg.trainable)
    return enc


def encoder_param_count(cfg: EncoderConfig) -> int:
    d, f = cfg.d_enc, cfg.d_ff
    block = 2 * (2 * d) + 4 * (d * d + d) + (d * f + f) + (f * d + d)
    return cfg.d_in * d + d + cfg.n_layers * block + 2 * d


@torch.no_grad()
def encode(lfr: LfrSequence, encoder: AudioEncoder) -> EncoderOutput:
    frames = np.asarray(lfr.frames)
    if frames.ndim != 2 or frames.shape[1] != encoder.cfg.d_in:
        raise ShapeError(f"LFR dim {frames.shape[-1]} != encoder d_in {encoder.cfg.d_in}")
    dtype = next(encoder.parameters()).dtype
    out = encoder(torch.as_tensor(frames, dtype=dtype)[None])[0]
    return EncoderOutput(frames=out.numpy(), effective_shift_ms=lfr.effective_shift_ms)


def save_encoder_weights(path, encoder: AudioEncoder) -> None:
    tensors = {f"encoder.{k}": v.detach().cpu().numpy() for k, v in encoder.state_dict().items()}
    write_container(path, Container(config={"encoder": config_to_dict(encoder.cfg)}, tensors=tensors))


def import_encoder_weights(path, cfg: EncoderConfig) -> AudioEncoder:
    """Load ``encoder.*`` tensors from any container (encoder-only or full checkpoint)."""
    box = read_container(path)
    declared = box.config.get("encoder") or box.config.get("model", {}).get("encoder")
    if declared is None:
        raise FormatError(f"{path}: no encoder config in header")
    for key in ("d_in", "d_enc", "n_layers", "n_heads", "d_ff"):
        if declared.get(key) != getattr(cfg, key):
            raise FormatError(f"{path}: header {key}={declared.get(key)} != config {getattr(cfg, key)}")
    enc = AudioEncoder(cfg)
    state = enc.state_dict()
    for name in state:
        arr = box.tensors.get(f"encoder.{name}")
        if arr is None:
            raise FormatError(f"{path}: missing tensor encoder.{name}")
        if tuple(arr.shape) != tuple(state[name].shape):
            raise FormatError(f"{path}: encoder.{name} has shape {arr.shape}")
        state[name] = torch.from_numpy(arr.copy())
    enc.load_state_dict(state)
    enc.requires_grad_(cfg.trainable)
    return enc
