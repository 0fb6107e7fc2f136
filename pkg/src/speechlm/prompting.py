"""Character tokenizer, chat-template assembly and speech/text splicing.

Rendered layout (``{target}`` and its closing marker are absent at inference)::

    <speech><|im_start|>system\\n{system}<|im_end|>\\n<|im_start|>user\\n{instruction}<|im_end|>\\n<|im_start|>assistant\\n{target}<|im_end|>
"""
from __future__ import annotations

import string
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import torch

from .errors import EncodingError, InputError, ShapeError

PAD, EOT, IM_START, IM_END = "<pad>", "<|endoftext|>", "<|im_start|>", "<|im_end|>"
SPECIAL_TOKENS = (PAD, EOT, IM_START, IM_END)

SYSTEM_PROMPT = "You are a helpful assistant."
ASR_INSTRUCTION = "Transcribe speech to text."
AST_INSTRUCTION = "Translate speech to english text."
DEFAULT_INSTRUCTIONS = {"asr": ASR_INSTRUCTION, "ast": AST_INSTRUCTION, "mtl": AST_INSTRUCTION}


class Tokenizer:
    """One id per character, plus four reserved special tokens at ids 0..3."""

    def __init__(self, chars: Iterable[str]):
        chars = sorted(set(chars))
        for c in chars:
            if len(c) != 1:
                raise ValueError(f"vocabulary entries must be single characters, got {c!r}")
        self.specials = list(SPECIAL_TOKENS)
        self.chars = chars
        self.id_to_piece = self.specials + chars
        self.piece_to_id = {p: i for i, p in enumerate(self.id_to_piece)}
        self.pad_id, self.eot_id, self.im_start_id, self.im_end_id = range(4)

    @classmethod
    def from_texts(cls, texts: Iterable[str], include_ascii: bool = True) -> "Tokenizer":
        chars = set("\n")
        if include_ascii:
            chars.update(c for c in string.printable if c not in "\t\r\x0b\x0c")
        for t in (SYSTEM_PROMPT, *DEFAULT_INSTRUCTIONS.values(), *texts):
            chars.update(t)
        return cls(chars)

    def __len__(self) -> int:
        return len(self.id_to_piece)

    @property
    def vocab_size(self) -> int:
        return len(self.id_to_piece)

    def tokenize(self, text: str) -> list[int]:
        for special in self.specials:
            if special in text:
                raise EncodingError(f"text contains reserved token {special}")
        unknown = sorted({c for c in text if c not in self.piece_to_id})
        if unknown:
            raise EncodingError(f"characters not in vocabulary: {unknown}")
        return [self.piece_to_id[c] for c in text]

    def detokenize(self, ids: Sequence[int]) -> str:
        try:
            return "".join(self.id_to_piece[int(i)] for i in ids)
        except IndexError as exc:
            raise EncodingError(f"token id out of range in {list(ids)}") from exc

    def to_dict(self) -> dict:
        return {"chars": "".join(self.chars)}

    @classmethod
    def from_dict(cls, d: dict) -> "Tokenizer":
        return cls(d["chars"])


@dataclass(frozen=True)
class Task:
    kind: str  # "asr" | "ast" | "mtl"
    instruction: Optional[str] = None

    def __post_init__(self):
        kind = self.kind.lower()
        if kind not in DEFAULT_INSTRUCTIONS:
            raise InputError(f"unknown task {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        if self.instruction is None:
            object.__setattr__(self, "instruction", DEFAULT_INSTRUCTIONS[kind])


@dataclass
class ChatSequence:
    token_ids: list[int]
    loss_mask: list[int]
    speech_len: int = 0

    def __len__(self) -> int:
        return len(self.token_ids)


def target_text(task: Task, transcript: Optional[str], translation: Optional[str]) -> str:
    if task.kind == "asr":
        if transcript is None:
            raise InputError("ASR target needs a transcript")
        return transcript
    if task.kind == "ast":
        if translation is None:
            raise InputError("AST target needs a translation")
        return translation
    if transcript is None or translation is None:
        raise InputError("MTL target needs both transcript and translation")
    return transcript + "\n" + translation


def _segments(task: Task, system: str, target: Optional[str]):
    # (piece, is_special, trained)
    segs = [
        (IM_START, True, False), ("system\n" + system, False, False), (IM_END, True, False),
        ("\n", False, False),
        (IM_START, True, False), ("user\n" + task.instruction, False, False), (IM_END, True, False),
        ("\n", False, False),
        (IM_START, True, False), ("assistant\n", False, False),
    ]
    if target is not None:
        segs += [(target, False, True), (IM_END, True, True)]
    return segs


def render_prompt(task: Task, target=None, system: str = SYSTEM_PROMPT, speech: str = "") -> str:
    """Template as a plain string; ``speech`` stands in for the spliced embeddings."""
    tgt = None if target is None else target_text(task, *_pair(target))
    return speech + "".join(p for p, _, _ in _segments(task, system, tgt))


def _pair(target):
    if isinstance(target, str):
        return target, None
    t = tuple(target) + (None,) * (2 - len(tuple(target)))
    return t[0], t[1]


def assemble_prompt(tok: Tokenizer, task: Task, target=None, system: str = SYSTEM_PROMPT) -> ChatSequence:
    """Token ids and loss mask for one utterance.

    ``target`` is ``(transcript, translation)`` (either may be ``None`` when the
    task does not use it) or ``None`` for inference. The mask is 1 exactly on
    the assistant content and its closing ``<|im_end|>``.
    """
    tgt = None if target is None else target_text(task, *_pair(target))
    ids, mask = [], []
    for piece, special, trained in _segments(task, system, tgt):
        seg = [tok.piece_to_id[piece]] if special else tok.tokenize(piece)
        ids += seg
        mask += [int(trained)] * len(seg)
    return ChatSequence(token_ids=ids, loss_mask=mask)


def splice(audio: torch.Tensor, chat: ChatSequence, embed_tokens) -> torch.Tensor:
    """``[S, d]`` audio vectors followed by the ``[L, d]`` token embeddings."""
    text = embed_tokens(torch.as_tensor(chat.token_ids, dtype=torch.long))
    audio = torch.as_tensor(audio, dtype=text.dtype)
    if audio.ndim != 2 or audio.shape[1] != text.shape[1]:
        raise ShapeError(f"audio embedding dim {tuple(audio.shape)} does not match d_llm={text.shape[1]}")
    chat.speech_len = audio.shape[0]
    return torch.cat([audio, text], dim=0)
