"""Manifest-driven decoding + scoring, and the single-axis training sweep."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

from .config import build_configs
from .data import BatchMaker, ManifestRecord, read_manifest
from .errors import InputError, TruncationError
from .frontend import featurize, read_wav
from .metrics import bleu, char_units, edit_distance, word_units
from .model import SpeechLLM, greedy_decode
from .prompting import Task, Tokenizer, assemble_prompt


@dataclass
class MetricRow:
    name: str
    metric: str  # CER | WER | BLEU
    value: float
    count: int


@dataclass
class MetricReport:
    rows: list
    averages: list = field(default_factory=list)
    errors: list = field(default_factory=list)  # (utterance id, message)

    @classmethod
    def from_rows(cls, rows, errors=()) -> "MetricReport":
        averages = []
        for metric in dict.fromkeys(r.metric for r in rows):
            sel = [r for r in rows if r.metric == metric]
            averages.append(
                MetricRow("AVG.", metric, sum(r.value for r in sel) / len(sel), sum(r.count for r in sel))
            )
        return cls(rows=list(rows), averages=averages, errors=list(errors))

    def average(self, metric: str) -> float:
        return next(r.value for r in self.averages if r.metric == metric)

    def to_table(self) -> str:
        lines = [f"{'testset':<20}{'metric':<8}{'value':>10}{'utts':>7}"]
        for r in self.rows + self.averages:
            lines.append(f"{r.name:<20}{r.metric:<8}{r.value:>10.4f}{r.count:>7}")
        if self.errors:
            lines.append(f"excluded utterances: {len(self.errors)}")
        return "\n".join(lines)

    def to_jsonl(self) -> str:
        out = [json.dumps(asdict(r), ensure_ascii=False) for r in self.rows + self.averages]
        out += [json.dumps({"error": msg, "id": uid}, ensure_ascii=False) for uid, msg in self.errors]
        return "\n".join(out) + "\n"


def decode_utterance(model: SpeechLLM, tok: Tokenizer, task: Task, wav_path, max_new: Optional[int] = None) -> str:
    lfr = featurize(read_wav(wav_path, model.cfg.frontend.sample_rate), model.cfg.frontend)
    audio = model.prompt_embedding(lfr)
    prefix = assemble_prompt(tok, task).token_ids
    room = model.cfg.lm.max_seq - audio.num_frames - len(prefix)
    try:
        ids = greedy_decode(model, audio, prefix, room if max_new is None else max_new, tok.im_end_id)
    except TruncationError as exc:
        ids = exc.partial
    return tok.detokenize(ids)


def split_mtl(text: str) -> tuple[str, str]:
    head, _, tail = text.partition("\n")
    return head, tail


def _rate_row(name, pairs, lang) -> MetricRow:
    units = char_units if lang == "zh" else word_units
    errs = total = 0
    for ref, hyp in pairs:
        r = units(ref)
        if not r:
            raise InputError(f"empty reference in test set {name}")
        errs += edit_distance(r, units(hyp))
        total += len(r)
    return MetricRow(name, "CER" if lang == "zh" else "WER", errs / total, len(pairs))


def score(records: list[ManifestRecord], hyps: dict, task: Task) -> list[MetricRow]:
    """Per-test-set rows; CER/WER are corpus-level (total edits / total reference units)."""
    groups: dict = {}
    for r in records:
        if r.id in hyps:
            groups.setdefault((r.testset or "default", r.lang), []).append(r)
    rows = []
    for (name, lang), recs in groups.items():
        if task.kind in ("asr", "mtl"):
            pairs = [(r.text, hyps[r.id] if task.kind == "asr" else split_mtl(hyps[r.id])[0]) for r in recs]
            rows.append(_rate_row(name, pairs, lang))
        if task.kind in ("ast", "mtl"):
            refs = [r.translation or "" for r in recs]
            outs = [hyps[r.id] if task.kind == "ast" else split_mtl(hyps[r.id])[1] for r in recs]
            rows.append(MetricRow(name, "BLEU", bleu(refs, outs), len(recs)))
    return rows


def evaluate_manifest(model: Optional[SpeechLLM], tok: Optional[Tokenizer], manifest, task: Task,
                      oracle: bool = False, hyp_path=None, max_new: Optional[int] = None) -> MetricReport:
    """Greedy-decode every utterance and score it per ``testset`` tag.

    With ``oracle=True`` the reference target stands in for the decode, which
    checks the scoring path alone. Hypotheses go to ``<manifest>.hyp.jsonl``
    unless ``hyp_path`` says otherwise.
    """
    manifest = Path(manifest)
    loaded = read_manifest(manifest)
    errors = [(f"line {n}", msg) for n, msg in loaded.errors]
    hyps = {}
    for r in loaded.records:
        if oracle:
            hyps[r.id] = _reference(r, task)
            continue
        if not Path(r.audio).exists():
            errors.append((r.id, f"missing audio {r.audio}"))
            continue
        try:
            hyps[r.id] = decode_utterance(model, tok, task, r.audio, max_new)
        except (InputError, ValueError) as exc:
            errors.append((r.id, str(exc)))
    hyp_path = Path(hyp_path) if hyp_path else manifest.with_name(manifest.name + ".hyp.jsonl")
    with open(hyp_path, "w", encoding="utf-8") as f:
        for r in loaded.records:
            if r.id in hyps:
                f.write(json.dumps({"id": r.id, "hyp": hyps[r.id], "ref": _reference(r, task)}, ensure_ascii=False) + "\n")
    return MetricReport.from_rows(score(loaded.records, hyps, task), errors)


def _reference(r: ManifestRecord, task: Task) -> str:
    if task.kind == "asr":
        return r.text
    if task.kind == "ast":
        return r.translation or ""
    return f"{r.text}\n{r.translation or ''}"


# -- sweeps ----------------------------------------------------------------------

AXES = {"granularity_k": "adapter.k", "llm_mode": "lm.llm_mode", "encoder_variant": "encoder.trainable"}
CONVERGE_FACTOR = 0.5  # "converged" iff final loss < CONVERGE_FACTOR * ln(V)


@dataclass
class SweepSpec:
    axis: str
    values: list
    base: dict = field(default_factory=dict)  # flat config pairs
    steps: int = 100

    def __post_init__(self):
        if self.axis not in AXES:
            raise InputError(f"unknown sweep axis {self.axis!r}; choose from {sorted(AXES)}")
        if not self.values:
            raise InputError("sweep needs at least one value")
        if self.steps < 1:
            raise InputError("sweep budget must be >= 1 step")


@dataclass
class SweepRow:
    value: object
    dev_metric: Optional[float]
    final_loss: Optional[float]
    converged: bool
    granularity_ms: Optional[float] = None
    error: Optional[str] = None


def _axis_value(axis: str, value):
    if axis == "encoder_variant":
        return "true" if str(value) in ("trainable", "true", "True") else "false"
    return str(value)


def run_sweep(spec: SweepSpec, records: list[ManifestRecord], tok: Tokenizer,
              dev_records: Optional[list[ManifestRecord]] = None) -> list[SweepRow]:
    """Train one model per axis value (shared seed and data) and tabulate the outcome.

    The dev metric is the mean per-utterance CER (or WER for English) of the
    leading transcript line, so it applies to every task.
    """
    from .training import Trainer, converged

    dev = dev_records if dev_records is not None else records
    rows = []
    for value in spec.values:
        try:
            pairs = {**spec.base, AXES[spec.axis]: _axis_value(spec.axis, value)}
            mcfg, tcfg = build_configs(pairs, vocab_size=tok.vocab_size)
            task = Task(tcfg.task)
            model = SpeechLLM(mcfg)
            batches = BatchMaker(records, tok, mcfg, task, tcfg.micro_batch, tcfg.seed)
            trainer = Trainer(model, tok, batches, tcfg)
            reports = trainer.run(spec.steps)
            final = reports[-1].loss
            model.eval()
            errs = []
            for r in dev:
                hyp = split_mtl(decode_utterance(model, tok, task, r.audio, max_new=64))[0]
                units = char_units if r.lang == "zh" else word_units
                ref = units(r.text)
                errs.append(edit_distance(ref, units(hyp)) / len(ref))
            rows.append(
                SweepRow(value, sum(errs) / len(errs), final, converged(final, tok.vocab_size, CONVERGE_FACTOR),
                         mcfg.granularity_ms)
            )
        except Exception as exc:  # one failed run must not stop the sweep
            rows.append(SweepRow(value, None, None, False, error=f"{type(exc).__name__}: {exc}"))
    return rows


def format_sweep(spec: SweepSpec, rows: list[SweepRow]) -> str:
    lines = [f"{spec.axis:<16}{'gran_ms':>8}{'dev_err':>10}{'loss':>10}  status"]
    for r in rows:
        if r.error:
            lines.append(f"{str(r.value):<16}{'-':>8}{'-':>10}{'-':>10}  failed: {r.error}")
            continue
        status = "converged" if r.converged else "no-converge"
        loss = r.final_loss if r.final_loss is not None and math.isfinite(r.final_loss) else float("nan")
        lines.append(f"{str(r.value):<16}{r.granularity_ms:>8.0f}{r.dev_metric:>10.4f}{loss:>10.4f}  {status}")
    return "\n".join(lines)
