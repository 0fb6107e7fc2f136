"""Dataclass configs for every stage of the pipeline plus the flat key/value file format.

Config files are plain text, one ``key = value`` per line, ``#`` starts a
comment. Keys are ``<section>.<field>`` (``encoder.d_enc``, ``lora.r``,
``train.lr``...). See ``README.md`` for the full key list.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .errors import ConfigError

LORA_TARGETS = ("q_proj", "k_proj", "v_proj", "o_proj", "gate_proj", "up_proj", "down_proj")
LLM_MODES = ("frozen", "lora", "full")
TAIL_POLICIES = ("drop", "pad_repeat")
PRECISION_MODES = ("fp32", "bf16-sim")
TASKS = ("asr", "ast", "mtl")


@dataclass(frozen=True)
class FrontendConfig:
    sample_rate: int = 16000
    n_mels: int = 80
    frame_shift_ms: float = 10.0
    frame_length_ms: float = 25.0
    log_floor: float = 1e-10
    lfr_m: int = 7
    lfr_n: int = 6

    def __post_init__(self):
        if self.n_mels <= 0:
            raise ConfigError("n_mels must be positive")
        if self.sample_rate <= 0:
            raise ConfigError("sample_rate must be positive")
        if self.frame_length_ms < self.frame_shift_ms:
            raise ConfigError("frame_length_ms must be >= frame_shift_ms")
        if self.log_floor <= 0:
            raise ConfigError("log_floor must be positive")
        if self.lfr_m < 1 or self.lfr_n < 1:
            raise ConfigError("lfr_m and lfr_n must be >= 1")

    @property
    def window_samples(self) -> int:
        return int(round(self.sample_rate * self.frame_length_ms / 1000))

    @property
    def shift_samples(self) -> int:
        return int(round(self.sample_rate * self.frame_shift_ms / 1000))

    @property
    def lfr_dim(self) -> int:
        return self.n_mels * self.lfr_m


@dataclass(frozen=True)
class EncoderConfig:
    d_in: int = 560
    d_enc: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    trainable: bool = False
    seed: int = 0

    def __post_init__(self):
        if min(self.d_in, self.d_enc, self.n_heads, self.d_ff) <= 0 or self.n_layers < 0:
            raise ConfigError("encoder dims must be positive")
        if self.d_enc % self.n_heads:
            raise ConfigError(f"d_enc={self.d_enc} not divisible by n_heads={self.n_heads}")


@dataclass(frozen=True)
class AdapterConfig:
    k: int = 2
    d_enc: int = 64
    d_hidden: int = 128
    d_llm: int = 64
    tail_policy: str = "drop"

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("adapter k must be >= 1")
        if min(self.d_enc, self.d_hidden, self.d_llm) <= 0:
            raise ConfigError("adapter dims must be positive")
        if self.tail_policy not in TAIL_POLICIES:
            raise ConfigError(f"tail_policy must be one of {TAIL_POLICIES}")


@dataclass(frozen=True)
class LmConfig:
    d_llm: int = 64
    n_layers: int = 2
    n_heads: int = 4
    n_kv_heads: Optional[int] = None
    d_ff: int = 256
    vocab_size: int = 0
    max_seq: int = 512
    llm_mode: str = "lora"
    positional: str = "learned"
    qkv_bias: bool = True
    rms_eps: float = 1e-6
    seed: int = 1

    def __post_init__(self):
        if min(self.d_llm, self.n_heads, self.d_ff, self.max_seq) <= 0 or self.n_layers < 0:
            raise ConfigError("lm dims must be positive")
        if self.d_llm % self.n_heads:
            raise ConfigError(f"d_llm={self.d_llm} not divisible by n_heads={self.n_heads}")
        if self.n_heads % self.kv_heads:
            raise ConfigError("n_heads must be a multiple of n_kv_heads")
        if self.llm_mode not in LLM_MODES:
            raise ConfigError(f"llm_mode must be one of {LLM_MODES}")
        if self.positional not in ("learned", "rotary"):
            raise ConfigError("positional must be 'learned' or 'rotary'")

    @property
    def kv_heads(self) -> int:
        return self.n_kv_heads or self.n_heads

    @property
    def head_dim(self) -> int:
        return self.d_llm // self.n_heads

    @property
    def kv_dim(self) -> int:
        return self.head_dim * self.kv_heads


@dataclass(frozen=True)
class LoraConfig:
    r: int = 64
    alpha: float = 16.0
    target_modules: tuple = LORA_TARGETS
    dropout: float = 0.0
    seed: int = 2

    def __post_init__(self):
        if self.r < 0:
            raise ConfigError("lora r must be >= 0")
        if self.alpha <= 0:
            raise ConfigError("lora alpha must be > 0")
        unknown = set(self.target_modules) - set(LORA_TARGETS)
        if unknown:
            raise ConfigError(f"unknown lora target modules: {sorted(unknown)}")
        object.__setattr__(self, "target_modules", tuple(self.target_modules))

    @property
    def scaling(self) -> float:
        return self.alpha / self.r if self.r > 0 else 0.0


@dataclass(frozen=True)
class TrainConfig:
    micro_batch: int = 8
    accum_steps: int = 2
    lr: float = 1e-4
    warmup_steps: int = 1000
    total_steps: int = 1_000_000
    run_steps: int = 0  # steps to execute; 0 means total_steps
    precision_mode: str = "fp32"
    grad_checkpoint: bool = False
    seed: int = 0
    init_from: Optional[str] = None
    task: str = "mtl"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    loader_depth: int = 2
    log_every: int = 10
    ckpt_every: int = 0

    def __post_init__(self):
        if self.micro_batch < 1 or self.accum_steps < 1:
            raise ConfigError("micro_batch and accum_steps must be >= 1")
        if self.warmup_steps < 0 or self.warmup_steps > self.total_steps:
            raise ConfigError("need 0 <= warmup_steps <= total_steps")
        if self.precision_mode not in PRECISION_MODES:
            raise ConfigError(f"precision_mode must be one of {PRECISION_MODES}")
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}")
        if self.loader_depth < 1:
            raise ConfigError("loader_depth must be >= 1")


@dataclass(frozen=True)
class ModelConfig:
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    lm: LmConfig = field(default_factory=LmConfig)
    lora: LoraConfig = field(default_factory=LoraConfig)

    def __post_init__(self):
        if self.encoder.d_in != self.frontend.lfr_dim:
            raise ConfigError(
                f"encoder.d_in={self.encoder.d_in} != n_mels*lfr_m={self.frontend.lfr_dim}"
            )
        if self.adapter.d_enc != self.encoder.d_enc:
            raise ConfigError("adapter.d_enc must equal encoder.d_enc")
        if self.adapter.d_llm != self.lm.d_llm:
            raise ConfigError("adapter.d_llm must equal lm.d_llm")

    @property
    def granularity_ms(self) -> float:
        return self.frontend.frame_shift_ms * self.frontend.lfr_n * self.adapter.k


SECTIONS = {
    "frontend": FrontendConfig,
    "encoder": EncoderConfig,
    "adapter": AdapterConfig,
    "lm": LmConfig,
    "lora": LoraConfig,
    "train": TrainConfig,
}


def _coerce(value: str, default, name: str):
    text = value.strip()
    if isinstance(default, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {value!r}")
    if isinstance(default, tuple):
        return tuple(t.strip() for t in text.split(",") if t.strip())
    try:
        if isinstance(default, int):
            return int(text.replace("_", ""))
        if isinstance(default, float):
            return float(text)
    except ValueError as exc:
        raise ConfigError(f"{name}: cannot parse {value!r}") from exc
    if text.lower() in ("none", ""):
        return None
    # Optional[int] fields default to None; accept integers for them
    if default is None and text.lstrip("-").isdigit():
        return int(text)
    return text


def parse_overrides(pairs: dict) -> dict:
    """Split ``{"encoder.d_enc": "32", ...}`` into per-section typed kwargs."""
    out: dict = {name: {} for name in SECTIONS}
    for key, raw in pairs.items():
        section, _, fname = key.partition(".")
        cls = SECTIONS.get(section)
        if cls is None or not fname:
            raise ConfigError(f"unknown config key: {key}")
        fields = {f.name: f for f in dataclasses.fields(cls)}
        if fname not in fields:
            raise ConfigError(f"unknown config key: {key}")
        f = fields[fname]
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        out[section][fname] = _coerce(raw, default, key) if isinstance(raw, str) else raw
    return out


def read_config_file(path) -> dict:
    pairs = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def build_configs(pairs: dict, vocab_size: int = 0) -> tuple[ModelConfig, TrainConfig]:
    """Build model/train configs from flat pairs, deriving dependent dims.

    ``encoder.d_in`` follows ``n_mels * lfr_m`` and the adapter dims follow
    the encoder/LM unless set explicitly.
    """
    sec = parse_overrides(pairs)
    frontend = FrontendConfig(**sec["frontend"])
    enc_kw = {"d_in": frontend.lfr_dim, **sec["encoder"]}
    encoder = EncoderConfig(**enc_kw)
    lm_kw = dict(sec["lm"])
    if vocab_size and "vocab_size" not in lm_kw:
        lm_kw["vocab_size"] = vocab_size
    lm = LmConfig(**lm_kw)
    ad_kw = {"d_enc": encoder.d_enc, "d_llm": lm.d_llm, "d_hidden": 2 * lm.d_llm, **sec["adapter"]}
    adapter = AdapterConfig(**ad_kw)
    lora = LoraConfig(**sec["lora"])
    model = ModelConfig(frontend=frontend, encoder=encoder, adapter=adapter, lm=lm, lora=lora)
    return model, TrainConfig(**sec["train"])


def config_to_dict(cfg) -> dict:
    d = dataclasses.asdict(cfg)

    def fix(x):
        if isinstance(x, dict):
            return {k: fix(v) for k, v in x.items()}
        if isinstance(x, tuple):
            return list(x)
        return x

    return fix(d)


def model_config_from_dict(d: dict) -> ModelConfig:
    lora = dict(d["lora"])
    lora["target_modules"] = tuple(lora["target_modules"])
    return ModelConfig(
        frontend=FrontendConfig(**d["frontend"]),
        encoder=EncoderConfig(**d["encoder"]),
        adapter=AdapterConfig(**d["adapter"]),
        lm=LmConfig(**d["lm"]),
        lora=LoraConfig(**lora),
    )


def train_config_from_dict(d: dict) -> TrainConfig:
    return TrainConfig(**d)


def config_digest(d: dict) -> str:
    blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


# Full-scale dimension table, used only for parameter counting. Nothing of
# this size is ever allocated.
QWEN2_7B_DIMS = LmConfig(
    d_llm=3584,
    n_layers=28,
    n_heads=28,
    n_kv_heads=4,
    d_ff=18944,
    vocab_size=152064,
    max_seq=32768,
    positional="rotary",
    qkv_bias=True,
)
PARAFORMER_ENCODER_PARAMS = 158_000_000  # reported figure, architecture not modelled
FULL_ADAPTER = AdapterConfig(k=2, d_enc=512, d_hidden=2048, d_llm=3584)
FULL_LORA = LoraConfig(r=64, alpha=16)

PRESETS = {"qwen2-7b-dims": (QWEN2_7B_DIMS, FULL_ADAPTER, FULL_LORA)}
