"""Log-mel filterbank features, low-frame-rate stacking and 16-bit PCM WAV I/O."""
from __future__ import annotations

import math
import struct
import wave
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .config import FrontendConfig
from .errors import FormatError, InputError


@dataclass(frozen=True)
class AudioWave:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise InputError("audio must be mono (1-D samples)")
        if self.sample_rate <= 0:
            raise InputError("sample_rate must be positive")
        if not np.all(np.isfinite(samples)):
            raise InputError("audio contains non-finite samples")
        object.__setattr__(self, "samples", samples)

    @property
    def duration_ms(self) -> float:
        return 1000.0 * len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class FeatureSequence:
    frames: np.ndarray  # [T, n_mels]
    frame_shift_ms: float = 10.0

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class LfrSequence:
    frames: np.ndarray  # [T', n_mels * m]
    effective_shift_ms: float
    m: int
    n: int

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


@lru_cache(maxsize=16)
def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangular HTK-mel filters, shape ``[n_mels, n_fft // 2 + 1]``."""
    n_bins = n_fft // 2 + 1
    bin_hz = np.linspace(0.0, sample_rate / 2, n_bins)
    edges = _mel_to_hz(np.linspace(0.0, _hz_to_mel(sample_rate / 2), n_mels + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (bin_hz[None, :] - lo) / (mid - lo)
    down = (hi - bin_hz[None, :]) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(up, down))
    fb.setflags(write=False)
    return fb


def num_fbank_frames(num_samples: int, cfg: FrontendConfig) -> int:
    if num_samples < cfg.window_samples:
        return 0
    return (num_samples - cfg.window_samples) // cfg.shift_samples + 1


def compute_fbank(wave_: AudioWave, cfg: FrontendConfig = FrontendConfig()) -> FeatureSequence:
    """Hann-windowed power spectrum -> mel energies -> ``log(max(e, log_floor))``.

    No dither, no pre-emphasis, so the output is a pure function of the samples.
    """
    if wave_.sample_rate != cfg.sample_rate:
        raise InputError(f"expected {cfg.sample_rate} Hz audio, got {wave_.sample_rate} Hz")
    x = wave_.samples
    if x.size == 0:
        raise InputError("empty audio")
    win, hop = cfg.window_samples, cfg.shift_samples
    if x.size < win:
        raise InputError(f"audio has {x.size} samples, shorter than one {win}-sample window")

    frames = np.lib.stride_tricks.sliding_window_view(x, win)[::hop]
    n_fft = 1 << (win - 1).bit_length()
    window = np.hanning(win + 1)[:-1]  # periodic Hann
    spec = np.fft.rfft(frames * window, n=n_fft, axis=1)
    power = spec.real**2 + spec.imag**2
    energies = power @ mel_filterbank(cfg.n_mels, n_fft, cfg.sample_rate).T
    feats = np.log(np.maximum(energies, cfg.log_floor))
    return FeatureSequence(frames=feats.astype(np.float32), frame_shift_ms=cfg.frame_shift_ms)


def apply_lfr(feats: FeatureSequence, m: int = 7, n: int = 6) -> LfrSequence:
    """Stack ``m`` consecutive frames every ``n`` frames.

    Row ``i`` holds frames ``[i*n, i*n + m)``; windows running past the end
    repeat the last frame.
    """
    x = np.asarray(feats.frames)
    if x.ndim != 2 or x.shape[0] < 1:
        raise InputError("apply_lfr needs at least one frame")
    if m < 1 or n < 1:
        raise InputError("m and n must be >= 1")
    t = x.shape[0]
    t_out = math.ceil(t / n)
    idx = np.minimum(np.arange(t_out)[:, None] * n + np.arange(m)[None, :], t - 1)
    out = x[idx].reshape(t_out, m * x.shape[1])
    return LfrSequence(frames=out, effective_shift_ms=feats.frame_shift_ms * n, m=m, n=n)


def featurize(wave_: AudioWave, cfg: FrontendConfig = FrontendConfig()) -> LfrSequence:
    return apply_lfr(compute_fbank(wave_, cfg), cfg.lfr_m, cfg.lfr_n)


def read_wav(path, expected_rate: int | None = None) -> AudioWave:
    """Read a mono 16-bit PCM WAV file; anything else is rejected."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    try:
        with wave.open(str(path), "rb") as w:
            channels, width, rate, count = (
                w.getnchannels(),
                w.getsampwidth(),
                w.getframerate(),
                w.getnframes(),
            )
            raw = w.readframes(count)
    except (wave.Error, EOFError) as exc:
        raise InputError(f"{path}: not a PCM WAV file ({exc})") from exc
    if channels != 1 or width != 2:
        raise InputError(f"{path}: need mono 16-bit PCM, got {channels} ch / {8 * width} bit")
    if expected_rate is not None and rate != expected_rate:
        raise InputError(f"{path}: sample rate {rate} != expected {expected_rate}")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return AudioWave(samples=samples, sample_rate=rate)


def wav_num_samples(path) -> int:
    try:
        with wave.open(str(path), "rb") as w:
            return w.getnframes()
    except (wave.Error, EOFError) as exc:
        raise InputError(f"{path}: not a PCM WAV file ({exc})") from exc


def write_wav(path, wave_: AudioWave) -> None:
    pcm = np.clip(np.round(wave_.samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(wave_.sample_rate)
        w.writeframes(pcm.tobytes())


# Feature sidecar: little-endian header then float32 payloads
#   magic "SLMF" | version u32 | T u32 | n_mels u32 | shift_ms f32 |
#   T' u32 | lfr_dim u32 | lfr_shift_ms f32 | m u32 | n u32
_FEAT_HEADER = struct.Struct("<4sIIIfIIfII")
FEAT_MAGIC = b"SLMF"


def write_feature_file(path, feats: FeatureSequence, lfr: LfrSequence) -> None:
    base = np.ascontiguousarray(feats.frames, dtype="<f4")
    stacked = np.ascontiguousarray(lfr.frames, dtype="<f4")
    header = _FEAT_HEADER.pack(
        FEAT_MAGIC, 1, base.shape[0], base.shape[1], feats.frame_shift_ms,
        stacked.shape[0], stacked.shape[1], lfr.effective_shift_ms, lfr.m, lfr.n,
    )
    with open(path, "wb") as f:
        f.write(header + base.tobytes() + stacked.tobytes())


def read_feature_file(path) -> tuple[FeatureSequence, LfrSequence]:
    raw = Path(path).read_bytes()
    if len(raw) < _FEAT_HEADER.size:
        raise FormatError(f"{path}: truncated feature header")
    magic, version, t, d, shift, t2, d2, shift2, m, n = _FEAT_HEADER.unpack_from(raw)
    if magic != FEAT_MAGIC or version != 1:
        raise FormatError(f"{path}: not a version-1 feature file")
    body = np.frombuffer(raw, dtype="<f4", offset=_FEAT_HEADER.size)
    if body.size != t * d + t2 * d2:
        raise FormatError(f"{path}: payload size does not match header")
    base = body[: t * d].reshape(t, d).astype(np.float32)
    stacked = body[t * d :].reshape(t2, d2).astype(np.float32)
    return FeatureSequence(base, shift), LfrSequence(stacked, shift2, m, n)
