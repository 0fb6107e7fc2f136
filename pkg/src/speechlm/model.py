"""Encoder + adapter + LM assembled into one module, with the freeze policy."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .adapter import Adapter, AudioPromptEmbedding, adapter_param_count
from .config import PARAFORMER_ENCODER_PARAMS, PRESETS, ModelConfig
from .encoder import AudioEncoder, encoder_param_count
from .errors import InputError, TruncationError
from .frontend import LfrSequence
from .lm import LanguageModel, lm_base_param_count, lm_lora_param_count
from .prompting import ChatSequence


@dataclass
class ParamPartition:
    frozen: dict  # name -> numel
    trainable: dict

    def module_counts(self, module: str) -> tuple[int, int]:
        """(total, trainable) for one of encoder/adapter/llm. LoRA factors are
        counted as trainable but not in the LLM total, which is the base-model size."""
        total = sum(
            n for name, n in {**self.frozen, **self.trainable}.items()
            if name.startswith(module + ".") and not is_lora(name)
        )
        trainable = sum(n for name, n in self.trainable.items() if name.startswith(module + "."))
        return total, trainable


def is_lora(name: str) -> bool:
    return ".lora_A" in name or ".lora_B" in name


def trainable_ratio(partition: ParamPartition) -> float:
    """Trainable LLM parameters over base LLM parameters."""
    total, trainable = partition.module_counts("llm")
    return trainable / total


class SpeechLLM(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = AudioEncoder(cfg.encoder)
        self.adapter = Adapter(cfg.adapter)
        self.llm = LanguageModel(cfg.lm, cfg.lora)
        self.apply_freeze_policy()

    def apply_freeze_policy(self) -> None:
        self.encoder.requires_grad_(self.cfg.encoder.trainable)
        self.adapter.requires_grad_(True)
        mode = self.cfg.lm.llm_mode
        for name, p in self.llm.named_parameters():
            p.requires_grad_(is_lora(name) or mode == "full")

    def partition(self) -> ParamPartition:
        frozen, trainable = {}, {}
        for name, p in self.named_parameters():
            (trainable if p.requires_grad else frozen)[name] = p.numel()
        return ParamPartition(frozen=frozen, trainable=trainable)

    def trainable_named_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]

    def set_grad_checkpoint(self, on: bool) -> None:
        self.llm.grad_checkpoint = on
        self.encoder.grad_checkpoint = on

    @property
    def dtype(self):
        return self.llm.lm_head.weight.dtype

    def audio_embeddings(self, feats, feat_lens):
        feats = feats.to(self.dtype)
        if self.cfg.encoder.trainable:
            enc = self.encoder(feats, feat_lens)
        else:
            with torch.no_grad():
                enc = self.encoder(feats, feat_lens)
        return self.adapter(enc, feat_lens)

    def build_inputs(self, feats, feat_lens, tokens, token_lens, loss_mask):
        """Splice each sample's audio vectors before its token embeddings and right-pad.

        Returns ``(embeds, valid, labels, label_mask)``, all ``[B, Lmax(, d)]``.
        """
        audio, audio_lens = self.audio_embeddings(feats, feat_lens)
        tok_emb = self.llm.embed(tokens)
        b = tokens.shape[0]
        total = audio_lens + token_lens
        length = int(total.max())
        if length > self.cfg.lm.max_seq:
            raise InputError(f"spliced length {length} exceeds max_seq {self.cfg.lm.max_seq}")
        rows, labels, lmask = [], [], []
        for i in range(b):
            s, t = int(audio_lens[i]), int(token_lens[i])
            pad = length - s - t
            rows.append(torch.cat([audio[i, :s], tok_emb[i, :t], tok_emb.new_zeros(pad, tok_emb.shape[-1])]))
            labels.append(torch.cat([tokens.new_zeros(s), tokens[i, :t], tokens.new_zeros(pad)]))
            lmask.append(torch.cat([loss_mask.new_zeros(s), loss_mask[i, :t], loss_mask.new_zeros(pad)]))
        valid = torch.arange(length)[None, :] < total[:, None]
        return torch.stack(rows), valid, torch.stack(labels), torch.stack(lmask)

    def forward(self, batch):
        embeds, valid, labels, lmask = self.build_inputs(
            batch.feats, batch.feat_lens, batch.tokens, batch.token_lens, batch.loss_mask
        )
        return self.llm(embeds, valid), labels, lmask

    def prompt_embedding(self, lfr: LfrSequence) -> AudioPromptEmbedding:
        feats = torch.as_tensor(np.asarray(lfr.frames))[None]
        with torch.no_grad():
            y, _ = self.audio_embeddings(feats, torch.tensor([feats.shape[1]]))
        return AudioPromptEmbedding(vectors=y[0].numpy(), granularity_ms=lfr.effective_shift_ms * self.cfg.adapter.k)


@torch.no_grad()
def lm_forward(model: SpeechLLM, audio: AudioPromptEmbedding | None, chat: ChatSequence):
    """Logits ``[S + L, V]`` for one spliced sequence."""
    text = model.llm.embed(torch.as_tensor(chat.token_ids, dtype=torch.long))
    if audio is not None and audio.num_frames:
        x = torch.cat([torch.as_tensor(audio.vectors, dtype=text.dtype), text])
    else:
        x = text
    return model.llm(x[None])[0]


@torch.no_grad()
def greedy_decode(model: SpeechLLM, audio: AudioPromptEmbedding | None, prefix_ids, max_new: int, end_id: int):
    """Append the argmax token until ``end_id`` or ``max_new`` tokens.

    ``torch.argmax`` returns the first maximal index, so ties go to the lowest id.
    The end marker is not included in the output.
    """
    s = 0 if audio is None else audio.num_frames
    max_seq = model.cfg.lm.max_seq
    if s + len(prefix_ids) > max_seq:
        raise TruncationError(f"prefix of {s + len(prefix_ids)} positions exceeds max_seq {max_seq}")
    out: list[int] = []
    ids = list(prefix_ids)
    for _ in range(max_new):
        if s + len(ids) >= max_seq:
            raise TruncationError("generation reached max_seq before the end marker", partial=out)
        logits = lm_forward(model, audio, ChatSequence(token_ids=ids, loss_mask=[0] * len(ids)))
        nxt = int(torch.argmax(logits[-1]))
        if nxt == end_id:
            break
        out.append(nxt)
        ids.append(nxt)
    return out


def param_table(cfg: ModelConfig) -> list[tuple[str, int, int]]:
    """Rows ``(module, params, trainable params)`` computed in closed form."""
    enc = encoder_param_count(cfg.encoder)
    ad = adapter_param_count(cfg.adapter)
    base = lm_base_param_count(cfg.lm)
    mode = cfg.lm.llm_mode
    llm_train = base if mode == "full" else lm_lora_param_count(cfg.lm, cfg.lora)
    return [
        ("Encoder", enc, enc if cfg.encoder.trainable else 0),
        ("Adapter", ad, ad),
        ("LLM", base, llm_train),
    ]


def preset_param_table(name: str) -> list[tuple[str, int, int]]:
    lm, adapter, lora = PRESETS[name]
    return [
        ("Encoder", PARAFORMER_ENCODER_PARAMS, 0),
        ("Adapter", adapter_param_count(adapter), adapter_param_count(adapter)),
        ("LLM", lm_base_param_count(lm), lm_lora_param_count(lm, lora)),
    ]


def format_param_table(rows) -> str:
    lines = [f"{'Module':<10}{'Params':>18}{'trainable Params':>20}"]
    for name, total, train in rows:
        lines.append(f"{name:<10}{total:>18,}{train:>20,}")
    return "\n".join(lines)
