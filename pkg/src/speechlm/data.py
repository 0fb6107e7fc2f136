"""Manifests, synthetic tone datasets, batching and the pipelined loader.

Manifest format: JSON lines, one utterance per line::

    {"id": "utt0000", "audio": "wavs/utt0000.wav", "text": "你好",
     "translation": "you good", "lang": "zh", "testset": "synth"}

``id``, ``audio`` and ``text`` are required. Relative ``audio`` paths resolve
against the manifest's directory.
"""
from __future__ import annotations

import json
import math
import queue
import threading
import warnings
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable, Iterator, Optional

import numpy as np
import torch

from .adapter import output_lengths
from .config import ModelConfig
from .errors import ConfigError, InputError, LoaderError, ValidationError
from .frontend import AudioWave, featurize, num_fbank_frames, read_wav, wav_num_samples, write_wav
from .prompting import Task, Tokenizer, assemble_prompt

MANIFEST_VERSION = 1


@dataclass(frozen=True)
class ManifestRecord:
    id: str
    audio: str
    text: str
    translation: Optional[str] = None
    lang: str = "zh"
    testset: Optional[str] = None

    def to_json(self, base: Path | None = None) -> str:
        d = asdict(self)
        if base is not None:
            try:
                d["audio"] = str(Path(self.audio).relative_to(base))
            except ValueError:
                pass
        return json.dumps({k: v for k, v in d.items() if v is not None}, ensure_ascii=False)


@dataclass
class ManifestResult:
    records: list
    errors: list  # (line number, message)


def read_manifest(path) -> ManifestResult:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise OSError(f"cannot read manifest {path}: {exc}") from exc
    records, errors, seen = [], [], set()
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            if not isinstance(obj, dict):
                raise ValueError("not a JSON object")
            missing = [k for k in ("id", "audio", "text") if not isinstance(obj.get(k), str)]
            if missing:
                raise ValueError(f"missing field(s) {missing}")
            if obj.get("lang", "zh") not in ("zh", "en"):
                raise ValueError(f"lang must be zh or en, got {obj['lang']!r}")
        except ValueError as exc:
            errors.append((lineno, str(exc)))
            continue
        if obj["id"] in seen:
            raise ValidationError(f"duplicate utterance id {obj['id']!r} at line {lineno}")
        seen.add(obj["id"])
        audio = Path(obj["audio"])
        if not audio.is_absolute():
            audio = path.parent / audio
        records.append(
            ManifestRecord(
                id=obj["id"],
                audio=str(audio),
                text=obj["text"],
                translation=obj.get("translation"),
                lang=obj.get("lang", "zh"),
                testset=obj.get("testset"),
            )
        )
    return ManifestResult(records=records, errors=errors)


def write_manifest(path, records: Iterable[ManifestRecord]) -> None:
    path = Path(path)
    body = "".join(r.to_json(path.parent.resolve()) + "\n" for r in records)
    path.write_text(body, encoding="utf-8")


DEFAULT_LEXICON = (
    ("你", "you"), ("我", "me"), ("他", "him"), ("好", "good"),
    ("大", "big"), ("小", "small"), ("山", "hill"), ("水", "water"),
    ("火", "fire"), ("天", "sky"), ("人", "man"), ("月", "moon"),
)


def tone_burst_audio(text: str, lexicon=DEFAULT_LEXICON, burst_ms: float = 200.0, sample_rate: int = 16000,
                     base_hz: float = 400.0, step_hz: float = 150.0, amplitude: float = 0.5) -> AudioWave:
    """One sine burst per character; frequency = base_hz + lexicon_index * step_hz."""
    index = {zh: i for i, (zh, _) in enumerate(lexicon)}
    n = int(round(sample_rate * burst_ms / 1000))
    t = np.arange(n) / sample_rate
    parts = [amplitude * np.sin(2 * np.pi * (base_hz + index[c] * step_hz) * t) for c in text]
    return AudioWave(np.concatenate(parts), sample_rate)


def synth_dataset(out_dir, seed: int = 7, n_utts: int = 10, lexicon=DEFAULT_LEXICON, min_chars: int = 2,
                  max_chars: int = 4, burst_ms: float = 200.0, sample_rate: int = 16000,
                  testset: str = "synth") -> Path:
    """Write ``n_utts`` tone-burst WAVs and ``manifest.jsonl`` under ``out_dir``.

    Texts are drawn from ``lexicon`` with ``numpy.random.default_rng(seed)``;
    the translation is the word-by-word gloss. Same seed gives identical bytes.
    """
    if n_utts < 1:
        raise InputError("n_utts must be >= 1")
    out = Path(out_dir)
    (out / "wavs").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n_utts):
        length = int(rng.integers(min_chars, max_chars + 1))
        picks = rng.integers(0, len(lexicon), size=length)
        text = "".join(lexicon[j][0] for j in picks)
        translation = " ".join(lexicon[j][1] for j in picks)
        wav_path = out / "wavs" / f"utt{i:04d}.wav"
        write_wav(wav_path, tone_burst_audio(text, lexicon, burst_ms, sample_rate))
        records.append(
            ManifestRecord(id=f"utt{i:04d}", audio=str(wav_path), text=text, translation=translation,
                           lang="zh", testset=testset)
        )
    manifest = out / "manifest.jsonl"
    write_manifest(manifest, records)
    return manifest


def speech_positions(num_samples: int, cfg: ModelConfig) -> int:
    """Closed-form count of audio embedding positions for a waveform length."""
    t = num_fbank_frames(num_samples, cfg.frontend)
    if t == 0:
        return 0
    t_lfr = math.ceil(t / cfg.frontend.lfr_n)
    return int(output_lengths(t_lfr, cfg.adapter.k, cfg.adapter.tail_policy))


class FeatureCache:
    """LFR features keyed by audio path; safe to share between loader threads."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self._store: dict = {}
        self._lock = threading.Lock()

    def __call__(self, path: str) -> np.ndarray:
        with self._lock:
            hit = self._store.get(path)
        if hit is not None:
            return hit
        frames = featurize(read_wav(path, self.cfg.frontend.sample_rate), self.cfg.frontend).frames
        with self._lock:
            self._store[path] = frames
        return frames


@dataclass
class Batch:
    index: int
    ids: list
    feats: torch.Tensor  # [B, T', d_in], zero-padded
    feat_lens: torch.Tensor  # [B]
    tokens: torch.Tensor  # [B, L], pad id beyond token_lens
    token_lens: torch.Tensor
    loss_mask: torch.Tensor  # [B, L], 0 on padding

    def num_target_tokens(self) -> int:
        return int(self.loss_mask.sum())

    def same_as(self, other: "Batch") -> bool:
        return (
            self.index == other.index
            and self.ids == other.ids
            and all(
                torch.equal(getattr(self, f), getattr(other, f))
                for f in ("feats", "feat_lens", "tokens", "token_lens", "loss_mask")
            )
        )


def collate(index: int, records, tokenizer: Tokenizer, task: Task, features: Callable) -> Batch:
    feats = [features(r.audio) for r in records]
    chats = [assemble_prompt(tokenizer, task, (r.text, r.translation)) for r in records]
    b = len(records)
    t_max = max(f.shape[0] for f in feats)
    l_max = max(len(c) for c in chats)
    x = np.zeros((b, t_max, feats[0].shape[1]), dtype=np.float32)
    tokens = torch.full((b, l_max), tokenizer.pad_id, dtype=torch.long)
    mask = torch.zeros((b, l_max), dtype=torch.long)
    for i, (f, c) in enumerate(zip(feats, chats)):
        x[i, : f.shape[0]] = f
        tokens[i, : len(c)] = torch.tensor(c.token_ids)
        mask[i, : len(c)] = torch.tensor(c.loss_mask)
    return Batch(
        index=index,
        ids=[r.id for r in records],
        feats=torch.from_numpy(x),
        feat_lens=torch.tensor([f.shape[0] for f in feats]),
        tokens=tokens,
        token_lens=torch.tensor([len(c) for c in chats]),
        loss_mask=mask,
    )


class BatchMaker:
    """Deterministic micro-batch schedule over an unbounded sequence of epochs.

    Micro-batch ``g`` belongs to epoch ``g // num_batches``; each epoch is a
    uniform shuffle drawn from ``default_rng([seed, epoch])``, so any position
    in the stream can be rebuilt without replaying the ones before it.
    """

    def __init__(self, records, tokenizer: Tokenizer, cfg: ModelConfig, task: Task, micro_batch: int,
                 seed: int = 0, features: Callable | None = None):
        if not records:
            raise InputError("no records to batch")
        if micro_batch < 1:
            raise ConfigError("micro_batch must be >= 1")
        self.tokenizer, self.cfg, self.task = tokenizer, cfg, task
        self.micro_batch, self.seed = micro_batch, seed
        self.features = features or FeatureCache(cfg)
        self.records, self.skipped = [], []
        for r in records:
            length = self._sequence_length(r)
            if length is None or length > cfg.lm.max_seq:
                why = "audio yields no embedding positions" if length is None else (
                    f"spliced length {length} exceeds max_seq={cfg.lm.max_seq}")
                warnings.warn(f"skipping {r.id}: {why}")
                self.skipped.append(r.id)
            else:
                self.records.append(r)
        if not self.records:
            raise InputError("every record was skipped")

    def _sequence_length(self, r: ManifestRecord):
        s = speech_positions(wav_num_samples(r.audio), self.cfg)
        if s < 1:
            return None
        return s + len(assemble_prompt(self.tokenizer, self.task, (r.text, r.translation)))

    @property
    def num_batches(self) -> int:
        return math.ceil(len(self.records) / self.micro_batch)

    def epoch_order(self, epoch: int) -> np.ndarray:
        return np.random.default_rng([self.seed, epoch]).permutation(len(self.records))

    def group(self, g: int) -> list:
        epoch, pos = divmod(g, self.num_batches)
        order = self.epoch_order(epoch)[pos * self.micro_batch : (pos + 1) * self.micro_batch]
        return [self.records[i] for i in order]

    def build(self, g: int) -> Batch:
        return collate(g, self.group(g), self.tokenizer, self.task, self.features)

    def indices(self, start: int = 0, stop: int | None = None) -> Iterator[int]:
        g = start
        while stop is None or g < stop:
            yield g
            g += 1


def make_batches(records, tokenizer: Tokenizer, cfg: ModelConfig, micro_batch: int, seed: int = 0,
                 task: Task = Task("mtl"), epoch: int = 0) -> Iterator[Batch]:
    """One epoch of padded micro-batches (``ceil(N / micro_batch)`` of them)."""
    maker = BatchMaker(records, tokenizer, cfg, task, micro_batch, seed)
    first = epoch * maker.num_batches
    for g in range(first, first + maker.num_batches):
        yield maker.build(g)


_DONE = object()


class PipelinedLoader:
    """Bounded producer/consumer over ``build(item)`` for each item of ``source``.

    A producer thread walks ``source`` and submits ``build`` calls to a pool of
    ``workers`` threads, keeping at most ``depth`` results queued ahead of the
    consumer. Results come back strictly in source order, so the output is the
    same for every ``depth``/``workers`` combination.
    """

    def __init__(self, source: Iterable, depth: int = 2, build: Callable | None = None, workers: int = 1):
        if depth < 1:
            raise ConfigError("loader depth must be >= 1")
        if workers < 1:
            raise ConfigError("loader workers must be >= 1")
        self.source = source
        self.depth = depth
        self.build = build or (lambda item: item)
        self.workers = workers
        self.max_prepared_ahead = 0
        self._queue: queue.Queue | None = None

    def prepared_ahead(self) -> int:
        q = self._queue
        if q is None:
            return 0
        with q.mutex:
            return sum(1 for _, fut in q.queue if isinstance(fut, Future) and fut.done())

    def __iter__(self):
        q: queue.Queue = queue.Queue(maxsize=self.depth)
        self._queue = q
        stop = threading.Event()
        pool = ThreadPoolExecutor(max_workers=self.workers)

        def put(item):
            while not stop.is_set():
                try:
                    q.put(item, timeout=0.05)
                    return True
                except queue.Full:
                    continue
            return False

        def produce():
            index = 0
            try:
                for index, item in enumerate(self.source):
                    if stop.is_set() or not put((index, pool.submit(self.build, item))):
                        return
                put((None, _DONE))
            except BaseException as exc:  # surfaced to the consumer
                put((index, exc))

        producer = threading.Thread(target=produce, daemon=True)
        producer.start()
        try:
            while True:
                self.max_prepared_ahead = max(self.max_prepared_ahead, self.prepared_ahead())
                index, fut = q.get()
                if fut is _DONE:
                    return
                if isinstance(fut, BaseException):
                    raise LoaderError(index, fut) from fut
                try:
                    result = fut.result()
                except Exception as exc:
                    raise LoaderError(index, exc) from exc
                yield result
        finally:
            stop.set()
            producer.join(timeout=5)
            pool.shutdown(wait=True, cancel_futures=True)
            self._queue = None


def pipelined_loader(source: Iterable, depth: int = 2, build: Callable | None = None, workers: int = 1):
    return PipelinedLoader(source, depth, build, workers)
