import pytest
import torch

from speechlm.config import build_configs
from speechlm.data import BatchMaker, read_manifest, synth_dataset
from speechlm.prompting import Task, Tokenizer

# Small enough that a full forward/backward takes milliseconds.
TINY = {
    "encoder.d_enc": "16",
    "encoder.n_heads": "2",
    "encoder.d_ff": "32",
    "encoder.n_layers": "1",
    "lm.d_llm": "16",
    "lm.n_heads": "2",
    "lm.d_ff": "32",
    "lm.n_layers": "2",
    "lora.r": "4",
}

# Acceptance results, printed once at the end of the session.
CRITERIA: dict = {}


def tiny_configs(vocab_size, **extra):
    pairs = dict(TINY)
    pairs.update({k.replace("__", "."): str(v) for k, v in extra.items()})
    return build_configs(pairs, vocab_size=vocab_size)


def tokenizer_for(records):
    return Tokenizer.from_texts([r.text for r in records] + [r.translation for r in records])


@pytest.fixture(scope="session")
def synth(tmp_path_factory):
    manifest = synth_dataset(tmp_path_factory.mktemp("synth"), seed=7, n_utts=10)
    records = read_manifest(manifest).records
    return manifest, records, tokenizer_for(records)


@pytest.fixture(scope="session")
def synth_equal(tmp_path_factory):
    """Eight utterances of exactly three characters: equal target lengths."""
    manifest = synth_dataset(tmp_path_factory.mktemp("equal"), seed=3, n_utts=8, min_chars=3, max_chars=3)
    records = read_manifest(manifest).records
    return manifest, records, tokenizer_for(records)


@pytest.fixture
def tiny_model(synth):
    from speechlm.model import SpeechLLM

    _, records, tok = synth
    mcfg, _ = tiny_configs(tok.vocab_size)
    torch.manual_seed(0)
    return SpeechLLM(mcfg)


@pytest.fixture
def tiny_batch(synth, tiny_model):
    _, records, tok = synth
    maker = BatchMaker(records, tok, tiny_model.cfg, Task("mtl"), micro_batch=3, seed=0)
    return maker.build(0)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, line = CRITERIA[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:>2}. {line}")
