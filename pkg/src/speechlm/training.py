"""Loss, LR schedule, the accumulation train step, verification harnesses and checkpoints."""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .config import (
    ModelConfig,
    TrainConfig,
    config_to_dict,
    model_config_from_dict,
    train_config_from_dict,
)
from .container import Container, read_container, write_container
from .data import Batch, BatchMaker, PipelinedLoader
from .errors import FormatError, InputError, NonFiniteLossError
from .model import SpeechLLM
from .prompting import Tokenizer


def lr_at_step(step: int, cfg: TrainConfig) -> float:
    """Linear warmup 0 -> lr over ``warmup_steps``, then linear decay to 0 at ``total_steps``.

    Steps past ``total_steps`` return 0.
    """
    if step < 0:
        raise InputError("step must be >= 0")
    if step > cfg.total_steps:
        return 0.0
    if step <= cfg.warmup_steps and cfg.warmup_steps > 0:
        return cfg.lr * (step / cfg.warmup_steps)
    return cfg.lr * ((cfg.total_steps - step) / (cfg.total_steps - cfg.warmup_steps))


def compute_loss(logits, labels, loss_mask):
    """Mean next-token cross-entropy over positions whose label has ``loss_mask == 1``.

    Logits at position ``p`` predict the label at ``p + 1``.
    """
    mask = loss_mask[:, 1:].to(torch.bool)
    n = int(mask.sum())
    if n == 0:
        raise InputError("batch has no positions with loss_mask=1")
    pred = logits[:, :-1][mask]
    return F.cross_entropy(pred, labels[:, 1:][mask], reduction="sum") / n


@dataclass
class StepReport:
    step: int
    lr: float
    loss: float


class Trainer:
    """Single-writer optimisation loop over a :class:`BatchMaker` schedule."""

    def __init__(self, model: SpeechLLM, tokenizer: Tokenizer, batches: BatchMaker, cfg: TrainConfig):
        self.model, self.tokenizer, self.batches, self.cfg = model, tokenizer, batches, cfg
        torch.manual_seed(cfg.seed)
        model.apply_freeze_policy()
        model.set_grad_checkpoint(cfg.grad_checkpoint)
        model.llm.precision_mode = cfg.precision_mode
        self.named = model.trainable_named_parameters()
        self.optimizer = torch.optim.Adam(
            [p for _, p in self.named], lr=0.0, betas=(cfg.adam_beta1, cfg.adam_beta2), eps=cfg.adam_eps
        )
        self.step = 0
        self.micro_index = 0

    def train_step(self, micro_batches: list[Batch]) -> StepReport:
        """Average gradients over the micro-batches, then take one Adam step."""
        self.model.train()
        self.optimizer.zero_grad(set_to_none=True)
        total = 0.0
        for mb in micro_batches:
            logits, labels, mask = self.model(mb)
            loss = compute_loss(logits, labels, mask)
            if not torch.isfinite(loss):
                raise NonFiniteLossError(self.step + 1, mb.ids)
            (loss / len(micro_batches)).backward()
            total += loss.item()
        lr = lr_at_step(self.step + 1, self.cfg)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.optimizer.step()
        self.step += 1
        self.micro_index += len(micro_batches)
        return StepReport(self.step, lr, total / len(micro_batches))

    def run(self, n_steps: int, on_step: Optional[Callable[[StepReport], None]] = None) -> list[StepReport]:
        accum = self.cfg.accum_steps
        start = self.micro_index
        source = self.batches.indices(start, start + n_steps * accum)
        loader = PipelinedLoader(source, depth=self.cfg.loader_depth, build=self.batches.build)
        reports, pending = [], []
        for batch in loader:
            pending.append(batch)
            if len(pending) == accum:
                rep = self.train_step(pending)
                pending = []
                reports.append(rep)
                if on_step:
                    on_step(rep)
        return reports

    def save(self, path) -> None:
        save_checkpoint(path, self)


# -- verification harnesses ---------------------------------------------------


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    """``|a - b| / max(|a|, |b|)`` in the Frobenius norm; 0 when both vanish."""
    a, b = a.detach().double().reshape(-1), b.detach().double().reshape(-1)
    scale = max(a.norm().item(), b.norm().item())
    return 0.0 if scale == 0.0 else (a - b).norm().item() / scale


@torch.no_grad()
def numeric_gradients(loss_fn: Callable[[], torch.Tensor], params: dict, eps: float = 1e-4) -> dict:
    """Central differences ``(L(p + eps) - L(p - eps)) / 2 eps``, element by element."""
    out = {}
    for name, p in params.items():
        flat = p.data.view(-1)
        numeric = torch.zeros_like(flat)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            up = loss_fn().item()
            flat[i] = orig - eps
            down = loss_fn().item()
            flat[i] = orig
            numeric[i] = (up - down) / (2 * eps)
        out[name] = numeric.view_as(p)
    return out


def analytic_gradients(loss_fn: Callable[[], torch.Tensor], params: dict) -> dict:
    for p in params.values():
        p.grad = None
    loss_fn().backward()
    return {n: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)) for n, p in params.items()}


def finite_difference_check(loss_fn: Callable[[], torch.Tensor], params: dict, eps: float = 1e-4) -> dict:
    """Per-tensor relative error between autograd and central differences."""
    analytic = analytic_gradients(loss_fn, params)
    numeric = numeric_gradients(loss_fn, params, eps)
    return {n: relative_error(analytic[n], numeric[n]) for n in params}


@dataclass
class GradCheckReport:
    max_rel_error: float  # float64 autograd vs float64 differences
    per_tensor: dict
    max_rel_error_native: float  # the model's own-precision autograd vs the same differences
    per_tensor_native: dict
    frozen_grads_zero: bool


def _loss_closure(model: SpeechLLM, batch: Batch):
    def loss_fn():
        logits, labels, mask = model(batch)
        return compute_loss(logits, labels, mask)

    return loss_fn


def gradient_check(model: SpeechLLM, batch: Batch, eps: float = 1e-4) -> GradCheckReport:
    """Finite-difference check of every trainable tensor.

    Central differences are taken on a float64 copy: in float32 a step of
    ``1e-4`` leaves ~1e-3 relative rounding noise in the quotient, which would
    swamp any real discrepancy. Both the copy's autograd gradients and the
    original model's (normally float32) gradients are compared against them.
    """
    m = copy.deepcopy(model).to(torch.float64)
    m.llm.precision_mode = "fp32"
    m.eval()
    params = dict(m.trainable_named_parameters())
    loss64 = _loss_closure(m, batch)
    analytic = analytic_gradients(loss64, params)
    frozen_zero = all(p.grad is None or not p.grad.any() for _, p in m.named_parameters() if not p.requires_grad)
    numeric = numeric_gradients(loss64, params, eps)
    errors = {n: relative_error(analytic[n], numeric[n]) for n in params}

    was_training = model.training
    model.eval()
    try:
        native = analytic_gradients(_loss_closure(model, batch), dict(model.trainable_named_parameters()))
    finally:
        model.train(was_training)
        model.zero_grad(set_to_none=True)
    native_errors = {n: relative_error(native[n], numeric[n]) for n in params}
    return GradCheckReport(
        max(errors.values(), default=0.0), errors,
        max(native_errors.values(), default=0.0), native_errors, frozen_zero,
    )


class ActivationCounter:
    """Counts tensors saved for backward while active (``saved_tensors_hooks``)."""

    def __init__(self):
        self.count = 0
        self.bytes = 0
        self._hooks = torch.autograd.graph.saved_tensors_hooks(self._pack, lambda t: t)

    def _pack(self, t):
        self.count += 1
        self.bytes += t.numel() * t.element_size()
        return t

    def __enter__(self):
        self._hooks.__enter__()
        return self

    def __exit__(self, *exc):
        return self._hooks.__exit__(*exc)


@dataclass
class CheckpointedRun:
    loss: torch.Tensor
    grads: dict
    saved_tensors: int
    saved_bytes: int


def forward_with_checkpointing(model: SpeechLLM, batch: Batch, on: bool) -> CheckpointedRun:
    """Forward + backward with block recomputation toggled by ``on``."""
    prev = model.llm.grad_checkpoint
    model.set_grad_checkpoint(on)
    try:
        model.zero_grad(set_to_none=True)
        counter = ActivationCounter()
        with counter:
            logits, labels, mask = model(batch)
            loss = compute_loss(logits, labels, mask)
        loss.backward()
        grads = {n: p.grad.detach().clone() for n, p in model.trainable_named_parameters()}
    finally:
        model.set_grad_checkpoint(prev)
    return CheckpointedRun(loss.detach(), grads, counter.count, counter.bytes)


# -- checkpoints ---------------------------------------------------------------


@dataclass
class CheckpointState:
    model_cfg: ModelConfig
    train_cfg: Optional[TrainConfig]
    tokenizer: Tokenizer
    params: dict
    optim: dict = field(default_factory=dict)
    rng: Optional[np.ndarray] = None
    step: int = 0
    micro_index: int = 0
    meta: dict = field(default_factory=dict)

    def build_model(self) -> SpeechLLM:
        model = SpeechLLM(self.model_cfg)
        load_params(model, self.params)
        return model


def load_params(model: SpeechLLM, params: dict) -> None:
    state = model.state_dict()
    for name, t in state.items():
        arr = params.get(name)
        if arr is None:
            raise FormatError(f"checkpoint lacks tensor {name}")
        if tuple(arr.shape) != tuple(t.shape):
            raise FormatError(f"tensor {name}: checkpoint shape {arr.shape} != model {tuple(t.shape)}")
        state[name] = torch.from_numpy(np.array(arr, dtype=np.float32))
    model.load_state_dict(state)


def save_checkpoint(path, trainer: Trainer, extra_meta: dict | None = None) -> None:
    tensors = {f"model.{k}": v.detach().cpu().numpy() for k, v in trainer.model.state_dict().items()}
    for name, p in trainer.named:
        st = trainer.optimizer.state.get(p)
        if st:
            tensors[f"optim.{name}.exp_avg"] = st["exp_avg"].numpy()
            tensors[f"optim.{name}.exp_avg_sq"] = st["exp_avg_sq"].numpy()
            tensors[f"optim.{name}.step"] = np.asarray(float(st["step"]), dtype=np.float64)
    tensors["rng.torch"] = torch.get_rng_state().numpy()
    meta = {
        "vocab": trainer.tokenizer.to_dict(),
        "step": trainer.step,
        "micro_index": trainer.micro_index,
        **(extra_meta or {}),
    }
    config = {"model": config_to_dict(trainer.model.cfg), "train": config_to_dict(trainer.cfg)}
    write_container(path, Container(config=config, meta=meta, tensors=tensors))


def load_checkpoint(path, expect: ModelConfig | None = None) -> CheckpointState:
    box = read_container(path)
    try:
        model_cfg = model_config_from_dict(box.config["model"])
        train_cfg = train_config_from_dict(box.config["train"]) if "train" in box.config else None
        tok = Tokenizer.from_dict(box.meta["vocab"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: incomplete checkpoint header ({exc})") from exc
    if expect is not None and expect != model_cfg:
        raise FormatError(f"{path}: checkpoint model config does not match the requested config")
    params = {k[len("model."):]: v for k, v in box.tensors.items() if k.startswith("model.")}
    optim = {k[len("optim."):]: v for k, v in box.tensors.items() if k.startswith("optim.")}
    return CheckpointState(
        model_cfg=model_cfg,
        train_cfg=train_cfg,
        tokenizer=tok,
        params=params,
        optim=optim,
        rng=box.tensors.get("rng.torch"),
        step=int(box.meta.get("step", 0)),
        micro_index=int(box.meta.get("micro_index", 0)),
        meta=box.meta,
    )


def resume_trainer(path, batches: BatchMaker, cfg: TrainConfig | None = None) -> Trainer:
    """Rebuild model, optimizer moments, RNG and schedule position from a checkpoint."""
    state = load_checkpoint(path)
    model = state.build_model()
    trainer = Trainer(model, state.tokenizer, batches, cfg or state.train_cfg)
    for name, p in trainer.named:
        if f"{name}.exp_avg" in state.optim:
            trainer.optimizer.state[p] = {
                "step": torch.tensor(float(state.optim[f"{name}.step"])),
                "exp_avg": torch.from_numpy(state.optim[f"{name}.exp_avg"].copy()),
                "exp_avg_sq": torch.from_numpy(state.optim[f"{name}.exp_avg_sq"].copy()),
            }
    if state.rng is not None:
        torch.set_rng_state(torch.from_numpy(state.rng.copy()))
    trainer.step = state.step
    trainer.micro_index = state.micro_index
    return trainer


def init_from_checkpoint(path, model_cfg: ModelConfig | None = None) -> tuple[SpeechLLM, Tokenizer]:
    """Weights and vocabulary of an earlier run, for fine-tuning with a fresh optimizer."""
    state = load_checkpoint(path, expect=model_cfg)
    return state.build_model(), state.tokenizer


def mean_loss(model: SpeechLLM, batch: Batch) -> float:
    with torch.no_grad():
        logits, labels, mask = model(batch)
        return compute_loss(logits, labels, mask).item()


def converged(final_loss: float, vocab_size: int, factor: float = 0.5) -> bool:
    """Heuristic "converged" label: final loss below ``factor * ln(V)``."""
    return math.isfinite(final_loss) and final_loss < factor * math.log(vocab_size)


def checkpoint_path(out_dir, step: int) -> Path:
    return Path(out_dir) / f"step{step:07d}.ckpt"
