"""Decoder-only language model with LoRA on the attention and MLP projections."""
from __future__ import annotations

import contextlib
import math

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.utils.checkpoint import checkpoint

from .config import LmConfig, LoraConfig
from .errors import InputError, ShapeError
from .layers import RMSNorm, attention, init_linear_, round_bf16, seeded_generator


def lora_forward(x, weight, bias, lora_a, lora_b, scaling):
    """``W x + b + scaling * B (A x)``."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"input dim {x.shape[-1]} != weight in-dim {weight.shape[1]}")
    y = F.linear(x, weight, bias)
    if lora_a is None or lora_a.shape[0] == 0:
        return y
    if lora_a.shape[1] != weight.shape[1] or lora_b.shape[0] != weight.shape[0]:
        raise ShapeError("LoRA factor shapes do not match the base projection")
    return y + scaling * F.linear(F.linear(x, lora_a), lora_b)


class LoraLinear(nn.Module):
    """A frozen-able base ``nn.Linear`` plus an optional rank-``r`` residual.

    ``lora_B`` starts at zero so the wrapped layer initially computes exactly
    the base projection.
    """

    def __init__(self, d_in: int, d_out: int, bias: bool, r: int = 0, scaling: float = 0.0, dropout: float = 0.0):
        super().__init__()
        self.base = nn.Linear(d_in, d_out, bias=bias)
        self.r = r
        self.scaling = scaling
        self.enabled = True
        self.dropout = nn.Dropout(dropout) if dropout > 0 else nn.Identity()
        if r > 0:
            self.lora_A = nn.Parameter(torch.zeros(r, d_in))
            self.lora_B = nn.Parameter(torch.zeros(d_out, r))
        else:
            self.register_parameter("lora_A", None)
            self.register_parameter("lora_B", None)

    @torch.no_grad()
    def reset_lora(self, gen: torch.Generator) -> None:
        if self.r > 0:
            bound = 1.0 / math.sqrt(self.lora_A.shape[1])
            self.lora_A.copy_(torch.rand(self.lora_A.shape, generator=gen) * 2 * bound - bound)
            self.lora_B.zero_()

    def forward(self, x):
        if self.r == 0 or not self.enabled:
            return self.base(x)
        return self.base(x) + self.scaling * F.linear(F.linear(self.dropout(x), self.lora_A), self.lora_B)


def _rotate_half(x):
    a, b = x.chunk(2, dim=-1)
    return torch.cat((-b, a), dim=-1)


def rotary(x, positions):
    """Apply rotary position embedding to ``[B, H, L, Dh]``."""
    dh = x.shape[-1]
    inv = 1.0 / (10000.0 ** (torch.arange(0, dh, 2, dtype=torch.float64) / dh))
    ang = positions.to(torch.float64)[:, None] * inv[None, :]
    ang = torch.cat((ang, ang), dim=-1).to(x.dtype)
    return x * ang.cos() + _rotate_half(x) * ang.sin()


class DecoderBlock(nn.Module):
    def __init__(self, cfg: LmConfig, lora: LoraConfig | None):
        super().__init__()
        self.cfg = cfg
        d, kv, ff = cfg.d_llm, cfg.kv_dim, cfg.d_ff

        def proj(name, d_in, d_out, bias=False):
            if lora is not None and name in lora.target_modules and lora.r > 0:
                return LoraLinear(d_in, d_out, bias, lora.r, lora.scaling, lora.dropout)
            return LoraLinear(d_in, d_out, bias)

        self.attn_norm = RMSNorm(d, cfg.rms_eps)
        self.q_proj = proj("q_proj", d, d, cfg.qkv_bias)
        self.k_proj = proj("k_proj", d, kv, cfg.qkv_bias)
        self.v_proj = proj("v_proj", d, kv, cfg.qkv_bias)
        self.o_proj = proj("o_proj", d, d)
        self.mlp_norm = RMSNorm(d, cfg.rms_eps)
        self.gate_proj = proj("gate_proj", d, ff)
        self.up_proj = proj("up_proj", d, ff)
        self.down_proj = proj("down_proj", ff, d)

    def forward(self, x, mask):
        cfg = self.cfg
        b, length, d = x.shape
        h = self.attn_norm(x)
        q = self.q_proj(h).view(b, length, cfg.n_heads, cfg.head_dim).transpose(1, 2)
        k = self.k_proj(h).view(b, length, cfg.kv_heads, cfg.head_dim).transpose(1, 2)
        v = self.v_proj(h).view(b, length, cfg.kv_heads, cfg.head_dim).transpose(1, 2)
        if cfg.positional == "rotary":
            pos = torch.arange(length)
            q, k = rotary(q, pos), rotary(k, pos)
        rep = cfg.n_heads // cfg.kv_heads
        if rep > 1:
            k = k.repeat_interleave(rep, dim=1)
            v = v.repeat_interleave(rep, dim=1)
        a = attention(q, k, v, mask).transpose(1, 2).reshape(b, length, d)
        x = x + self.o_proj(a)
        h = self.mlp_norm(x)
        return x + self.down_proj(F.silu(self.gate_proj(h)) * self.up_proj(h))


class LanguageModel(nn.Module):
    """Consumes input embeddings ``[B, L, d]`` and returns logits ``[B, L, V]``."""

    def __init__(self, cfg: LmConfig, lora: LoraConfig | None = None):
        super().__init__()
        if cfg.vocab_size <= 0:
            raise InputError("LmConfig.vocab_size must be set from the tokenizer")
        self.cfg = cfg
        self.lora_cfg = lora if cfg.llm_mode == "lora" else None
        self.grad_checkpoint = False
        self.precision_mode = "fp32"
        self.embed_tokens = nn.Embedding(cfg.vocab_size, cfg.d_llm)
        if cfg.positional == "learned":
            self.embed_positions = nn.Embedding(cfg.max_seq, cfg.d_llm)
        else:
            self.register_module("embed_positions", None)
        self.layers = nn.ModuleList(DecoderBlock(cfg, self.lora_cfg) for _ in range(cfg.n_layers))
        self.norm = RMSNorm(cfg.d_llm, cfg.rms_eps)
        self.lm_head = nn.Linear(cfg.d_llm, cfg.vocab_size, bias=False)
        self.reset_parameters()

    def reset_parameters(self):
        gen = seeded_generator(self.cfg.seed)
        with torch.no_grad():
            self.embed_tokens.weight.copy_(torch.randn(self.embed_tokens.weight.shape, generator=gen) * 0.5)
            if self.embed_positions is not None:
                self.embed_positions.weight.copy_(
                    torch.randn(self.embed_positions.weight.shape, generator=gen) * 0.1
                )
            for mod in self.modules():
                if isinstance(mod, LoraLinear):
                    init_linear_(mod.base, gen)
            # Output head at embedding scale: with RMS-normalised hidden states a
            # U(+-1/sqrt(d)) head caps logits near +-5, which a frozen head can
            # never escape.
            self.lm_head.weight.copy_(torch.randn(self.lm_head.weight.shape, generator=gen) * 0.5)
        lora_gen = seeded_generator(self.lora_cfg.seed if self.lora_cfg else 0)
        for mod in self.modules():
            if isinstance(mod, LoraLinear):
                mod.reset_lora(lora_gen)

    def lora_modules(self):
        return [m for m in self.modules() if isinstance(m, LoraLinear) and m.r > 0]

    def embed(self, token_ids):
        return self.embed_tokens(token_ids)

    def forward(self, inputs_embeds, valid=None):
        b, length, d = inputs_embeds.shape
        if d != self.cfg.d_llm:
            raise ShapeError(f"input dim {d} != d_llm {self.cfg.d_llm}")
        if length > self.cfg.max_seq:
            raise InputError(f"sequence length {length} exceeds max_seq {self.cfg.max_seq}")
        mask = torch.ones(length, length, dtype=torch.bool).tril()[None, None]
        if valid is not None:
            mask = mask & valid[:, None, None, :]
        x = inputs_embeds
        if self.embed_positions is not None:
            x = x + self.embed_positions.weight[:length]
        bf16 = self.precision_mode == "bf16-sim"
        for layer in self.layers:
            if bf16:
                x = round_bf16(x)
            if self.grad_checkpoint and torch.is_grad_enabled():
                x = checkpoint(layer, x, mask, use_reentrant=False)
            else:
                x = layer(x, mask)
        logits = self.lm_head(self.norm(x))
        return round_bf16(logits) if bf16 else logits


@contextlib.contextmanager
def lora_disabled(model: nn.Module):
    mods = [m for m in model.modules() if isinstance(m, LoraLinear)]
    prev = [m.enabled for m in mods]
    for m in mods:
        m.enabled = False
    try:
        yield model
    finally:
        for m, p in zip(mods, prev):
            m.enabled = p


def projection_dims(cfg: LmConfig) -> dict:
    """``(d_in, d_out)`` for each of the seven per-layer projections."""
    d, kv, ff = cfg.d_llm, cfg.kv_dim, cfg.d_ff
    return {
        "q_proj": (d, d),
        "k_proj": (d, kv),
        "v_proj": (d, kv),
        "o_proj": (d, d),
        "gate_proj": (d, ff),
        "up_proj": (d, ff),
        "down_proj": (ff, d),
    }


def lora_param_count(dims, n_layers: int, r: int) -> int:
    """``n_layers * sum_modules r * (d_in + d_out)``.

    ``dims`` is an iterable of ``(d_in, d_out)`` pairs for the adapted
    projections of a single layer.
    """
    return n_layers * sum(r * (d_in + d_out) for d_in, d_out in dims)


def lm_lora_param_count(cfg: LmConfig, lora: LoraConfig) -> int:
    if cfg.llm_mode != "lora":
        return 0
    dims = projection_dims(cfg)
    return lora_param_count([dims[m] for m in lora.target_modules], cfg.n_layers, lora.r)


def lm_base_param_count(cfg: LmConfig) -> int:
    d, kv, ff, v = cfg.d_llm, cfg.kv_dim, cfg.d_ff, cfg.vocab_size
    bias = (d + 2 * kv) if cfg.qkv_bias else 0
    layer = 2 * d * d + 2 * d * kv + bias + 3 * d * ff + 2 * d
    pos = cfg.max_seq * d if cfg.positional == "learned" else 0
    return 2 * v * d + pos + cfg.n_layers * layer + d
