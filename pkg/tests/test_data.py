import json
import time

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from speechlm.data import (
    BatchMaker,
    ManifestRecord,
    PipelinedLoader,
    make_batches,
    read_manifest,
    speech_positions,
    synth_dataset,
    write_manifest,
)
from speechlm.errors import ConfigError, InputError, LoaderError, ValidationError
from speechlm.prompting import Task

from conftest import tiny_configs


def test_synth_is_byte_deterministic(tmp_path):
    a = synth_dataset(tmp_path / "a", seed=11, n_utts=3)
    b = synth_dataset(tmp_path / "b", seed=11, n_utts=3)
    for i in range(3):
        name = f"wavs/utt{i:04d}.wav"
        assert (a.parent / name).read_bytes() == (b.parent / name).read_bytes()
    assert [r.text for r in read_manifest(a).records] == [r.text for r in read_manifest(b).records]
    with pytest.raises(InputError):
        synth_dataset(tmp_path / "c", n_utts=0)


def test_synth_translation_is_a_gloss(synth):
    _, records, _ = synth
    assert len(records) == 10
    for r in records:
        assert len(r.translation.split()) == len(r.text)


def test_manifest_parsing(tmp_path):
    (tmp_path / "x.wav").write_bytes(b"")
    lines = [
        json.dumps({"id": "a", "audio": "x.wav", "text": "hi"}),
        "{not json",
        json.dumps({"id": "b", "text": "no audio"}),
        "",
        json.dumps({"id": "c", "audio": "/abs/y.wav", "text": "yo", "translation": "yo", "lang": "en"}),
    ]
    (tmp_path / "m.jsonl").write_text("\n".join(lines), encoding="utf-8")
    res = read_manifest(tmp_path / "m.jsonl")
    assert [r.id for r in res.records] == ["a", "c"]
    assert res.records[0].audio == str(tmp_path / "x.wav")
    assert res.records[1].audio == "/abs/y.wav"
    assert [n for n, _ in res.errors] == [2, 3]


def test_manifest_duplicate_ids(tmp_path):
    rec = json.dumps({"id": "a", "audio": "x.wav", "text": "hi"})
    (tmp_path / "m.jsonl").write_text(rec + "\n" + rec + "\n")
    with pytest.raises(ValidationError):
        read_manifest(tmp_path / "m.jsonl")


def test_manifest_roundtrip(tmp_path):
    recs = [ManifestRecord("u1", str(tmp_path / "a.wav"), "你好", "hello", "zh", "t1")]
    write_manifest(tmp_path / "m.jsonl", recs)
    assert read_manifest(tmp_path / "m.jsonl").records == recs


def test_speech_positions_match_model(synth, tiny_model, tiny_batch):
    from speechlm.frontend import wav_num_samples

    _, records, _ = synth
    by_id = {r.id: r for r in records}
    _, lens = tiny_model.audio_embeddings(tiny_batch.feats, tiny_batch.feat_lens)
    for uid, n in zip(tiny_batch.ids, lens.tolist()):
        assert speech_positions(wav_num_samples(by_id[uid].audio), tiny_model.cfg) == n


def test_batch_padding(tiny_batch):
    b = tiny_batch
    assert b.feats.shape[0] == b.tokens.shape[0] == 3
    for i in range(3):
        assert not b.feats[i, b.feat_lens[i] :].any()
        assert (b.tokens[i, b.token_lens[i] :] == 0).all()
        assert not b.loss_mask[i, b.token_lens[i] :].any()


def test_epochs_cover_every_record_once(synth):
    _, records, tok = synth
    mcfg, _ = tiny_configs(tok.vocab_size)
    maker = BatchMaker(records, tok, mcfg, Task("mtl"), micro_batch=4, seed=5)
    assert maker.num_batches == 3
    for epoch in range(3):
        ids = [r.id for g in range(epoch * 3, epoch * 3 + 3) for r in maker.group(g)]
        assert sorted(ids) == sorted(r.id for r in records)
    assert len(list(make_batches(records, tok, mcfg, 4))) == 3


def test_overlong_records_are_skipped(synth):
    _, records, tok = synth
    mcfg, _ = tiny_configs(tok.vocab_size, lm__max_seq=106)
    with pytest.warns(UserWarning):
        maker = BatchMaker(records, tok, mcfg, Task("mtl"), micro_batch=4)
    assert maker.skipped and len(maker.records) + len(maker.skipped) == 10
    mcfg, _ = tiny_configs(tok.vocab_size, lm__max_seq=20)
    with pytest.warns(UserWarning), pytest.raises(InputError):
        BatchMaker(records, tok, mcfg, Task("mtl"), micro_batch=4)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(1, 3), st.integers(0, 30), st.integers(0, 2**16))
def test_loader_preserves_order(depth, workers, n, seed):
    rng = np.random.default_rng(seed)
    delays = rng.uniform(0, 0.002, size=n)

    def build(i):
        time.sleep(delays[i])
        return i * i

    assert list(PipelinedLoader(range(n), depth=depth, build=build, workers=workers)) == [i * i for i in range(n)]


def test_loader_is_bounded():
    built = []

    def build(i):
        built.append(i)
        return i

    loader = PipelinedLoader(range(100), depth=3, build=build)
    it = iter(loader)
    assert next(it) == 0
    time.sleep(0.2)  # producer runs ahead until the queue is full
    assert len(built) <= 1 + 3 + 1
    assert list(it) == list(range(1, 100))
    assert loader.max_prepared_ahead <= 3


def test_loader_errors():
    with pytest.raises(ConfigError):
        PipelinedLoader(range(3), depth=0)

    def build(i):
        if i == 4:
            raise RuntimeError("boom")
        return i

    got = []
    with pytest.raises(LoaderError) as exc:
        for x in PipelinedLoader(range(10), depth=2, build=build):
            got.append(x)
    assert got == [0, 1, 2, 3] and exc.value.index == 4


def test_batches_rebuild_identically(synth):
    _, records, tok = synth
    mcfg, _ = tiny_configs(tok.vocab_size)
    a = BatchMaker(records, tok, mcfg, Task("asr"), micro_batch=3, seed=1)
    b = BatchMaker(records, tok, mcfg, Task("asr"), micro_batch=3, seed=1)
    for g in (0, 5, 17):
        assert a.build(g).same_as(b.build(g))
    assert torch.equal(a.build(2).tokens, b.build(2).tokens)
