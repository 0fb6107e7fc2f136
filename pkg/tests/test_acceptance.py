"""The twelve acceptance criteria, one test each.

Every test records a PASS/FAIL line; the lines are printed together in the
terminal summary (and immediately with ``pytest -s``).
"""
import contextlib
import random
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from speechlm.adapter import adapter_param_count
from speechlm.cli import main
from speechlm.config import FULL_ADAPTER, FULL_LORA, QWEN2_7B_DIMS, LmConfig, LoraConfig, TrainConfig, build_configs
from speechlm.data import BatchMaker, PipelinedLoader, collate
from speechlm.evaluation import SweepSpec, evaluate_manifest, run_sweep
from speechlm.frontend import featurize, read_wav
from speechlm.lm import LanguageModel, lm_lora_param_count, lora_disabled
from speechlm.metrics import bleu, cer, wer
from speechlm.model import SpeechLLM
from speechlm.prompting import Task, render_prompt
from speechlm.training import (
    Trainer,
    forward_with_checkpointing,
    gradient_check,
    lr_at_step,
    relative_error,
)

from conftest import CRITERIA, TINY, tiny_configs

ROOT = Path(__file__).resolve().parents[1]


@contextlib.contextmanager
def criterion(n, text):
    detail = {}
    try:
        yield detail
    except BaseException:
        CRITERIA[n] = (False, text)
        print(f"\n[FAIL] {n:>2}. {text}")
        raise
    line = text + (f" ({detail['info']})" if "info" in detail else "")
    CRITERIA[n] = (True, line)
    print(f"\n[PASS] {n:>2}. {line}")


def test_01_parameter_reconciliation():
    with criterion(1, "parameter reconciliation: adapter 9,442,816 and LoRA 161,480,704") as d:
        adapter = adapter_param_count(FULL_ADAPTER)
        lora = lm_lora_param_count(QWEN2_7B_DIMS, FULL_LORA)
        assert (FULL_ADAPTER.k, FULL_ADAPTER.d_enc, FULL_ADAPTER.d_hidden, FULL_ADAPTER.d_llm) == (2, 512, 2048, 3584)
        assert (FULL_LORA.r, len(FULL_LORA.target_modules)) == (64, 7)
        assert adapter == 9_442_816
        assert lora == 161_480_704
        d["info"] = f"adapter={adapter:,}, lora={lora:,}"


def test_02_granularity_law(synth):
    with criterion(2, "granularity: 120 ms default, 180/240 ms for k=3/4") as d:
        _, records, tok = synth
        mcfg, _ = build_configs({}, vocab_size=tok.vocab_size)
        model = SpeechLLM(mcfg)
        for r in records:
            lfr = featurize(read_wav(r.audio), mcfg.frontend)
            assert model.prompt_embedding(lfr).granularity_ms == 120
        base = {**TINY, "train.micro_batch": "5", "train.accum_steps": "1", "train.warmup_steps": "1",
                "train.total_steps": "5", "train.task": "asr"}
        rows = run_sweep(SweepSpec("granularity_k", [2, 3, 4], base=base, steps=1), records, tok, records[:1])
        assert [r.granularity_ms for r in rows] == [120, 180, 240]
        for k, expect in ((3, 180), (4, 240)):
            cfg, _ = tiny_configs(tok.vocab_size, adapter__k=k)
            emb = SpeechLLM(cfg).prompt_embedding(featurize(read_wav(records[0].audio), cfg.frontend))
            assert emb.granularity_ms == expect
        d["info"] = "sweep rows " + "/".join(f"{r.granularity_ms:g}" for r in rows)


def test_03_freeze_policy(synth):
    with criterion(3, "freeze policy: 100 steps leave encoder and LLM base bit-identical") as d:
        _, records, tok = synth
        mcfg, _ = tiny_configs(tok.vocab_size)
        tcfg = TrainConfig(micro_batch=4, accum_steps=1, lr=1e-3, warmup_steps=5, total_steps=100)
        model = SpeechLLM(mcfg)
        before = {n: t.clone() for n, t in model.state_dict().items()}
        Trainer(model, tok, BatchMaker(records, tok, mcfg, Task("mtl"), 4), tcfg).run(100)
        changed = {n for n, t in model.state_dict().items() if not torch.equal(t, before[n])}
        frozen = {n for n in before if n.startswith("encoder.") or (n.startswith("llm.") and "lora_" not in n)}
        trainable = {n for n, _ in model.named_parameters()} - frozen
        assert not changed & frozen
        assert changed == trainable
        assert all(n.startswith("adapter.") or "lora_" in n for n in trainable)
        d["info"] = f"{len(frozen)} frozen tensors unchanged, {len(trainable)} adapter/LoRA tensors updated"


def test_04_lora_zero_init():
    with criterion(4, "LoRA zero-init: logits bit-identical to the base model on 100 inputs") as d:
        cfg = LmConfig(vocab_size=120)
        with_lora = LanguageModel(cfg, LoraConfig())
        base = LanguageModel(LmConfig(vocab_size=120, llm_mode="frozen"), LoraConfig())
        for (n, a) in base.state_dict().items():
            assert torch.equal(a, with_lora.state_dict()[n])
        gen = torch.Generator().manual_seed(123)
        with torch.no_grad():
            for _ in range(100):
                length = int(torch.randint(1, 64, (1,), generator=gen))
                x = torch.randn(1, length, cfg.d_llm, generator=gen)
                y = with_lora(x)
                assert torch.equal(y, base(x))
                with lora_disabled(with_lora):
                    assert torch.equal(y, with_lora(x))
        d["info"] = "100/100 exact"


def test_05_gradient_check(synth):
    with criterion(5, "finite differences: max relative error < 1e-4 at eps 1e-4") as d:
        _, records, tok = synth
        mcfg, _ = tiny_configs(
            tok.vocab_size, encoder__d_enc=8, lm__d_llm=8, lm__d_ff=16, lm__n_layers=1, lora__r=2
        )
        torch.manual_seed(0)
        model = SpeechLLM(mcfg)
        # with B = 0 every dL/dA vanishes; give B values so both factors are exercised
        with torch.no_grad():
            for m in model.llm.lora_modules():
                m.lora_B.normal_(0.0, 0.2)
        batch = collate(0, records[:2], tok, Task("mtl"), BatchMaker(records, tok, mcfg, Task("mtl"), 2).features)
        report = gradient_check(model, batch, eps=1e-4)
        names = {n for n, _ in model.trainable_named_parameters()}
        assert set(report.per_tensor) == names and len(names) == 4 + 14
        assert report.frozen_grads_zero
        assert report.max_rel_error < 1e-4
        assert report.max_rel_error_native < 1e-4
        d["info"] = (f"{len(names)} tensors; float64 autograd {report.max_rel_error:.2e}, "
                     f"fp32 autograd {report.max_rel_error_native:.2e}")


def test_06_accumulation_equivalence(synth_equal):
    with criterion(6, "accumulation: 2 x 4 micro-batches == one batch of 8 within 1e-6") as d:
        _, records, tok = synth_equal
        mcfg, _ = tiny_configs(tok.vocab_size)
        task = Task("asr")
        maker = BatchMaker(records, tok, mcfg, task, 8)
        halves = [collate(0, records[:4], tok, task, maker.features), collate(1, records[4:], tok, task, maker.features)]
        whole = collate(0, records, tok, task, maker.features)
        assert halves[0].num_target_tokens() == halves[1].num_target_tokens()

        def one_step(batches, accum):
            torch.manual_seed(0)
            model = SpeechLLM(mcfg)
            before = {n: p.detach().clone() for n, p in model.trainable_named_parameters()}
            tcfg = TrainConfig(micro_batch=8 // accum, accum_steps=accum, lr=1e-3, warmup_steps=0, total_steps=10)
            trainer = Trainer(model, tok, maker, tcfg)
            trainer.train_step(batches)
            grads = {n: p.grad.clone() for n, p in trainer.named}
            deltas = {n: p.detach() - before[n] for n, p in trainer.named}
            return grads, deltas

        g_acc, u_acc = one_step(halves, 2)
        g_one, u_one = one_step([whole], 1)
        grad_err = max(relative_error(g_acc[n], g_one[n]) for n in g_acc)
        upd_err = max(relative_error(u_acc[n], u_one[n]) for n in u_acc)
        assert grad_err <= 1e-6 and upd_err <= 1e-6
        d["info"] = f"grad rel err {grad_err:.1e}, update rel err {upd_err:.1e}"


def test_07_checkpointing_equivalence(tiny_model, tiny_batch):
    with criterion(7, "gradient checkpointing: same grads within 1e-6, fewer saved activations") as d:
        off = forward_with_checkpointing(tiny_model, tiny_batch, on=False)
        on = forward_with_checkpointing(tiny_model, tiny_batch, on=True)
        err = max(relative_error(off.grads[n], on.grads[n]) for n in off.grads)
        assert err <= 1e-6
        assert on.saved_tensors < off.saved_tensors
        d["info"] = f"grad rel err {err:.1e}; saved tensors {off.saved_tensors} -> {on.saved_tensors}"


@pytest.mark.filterwarnings("ignore:skipping")
def test_08_overfit_end_to_end(tmp_path, capsys):
    with criterion(8, "overfit: CER 0.0 on 10 synthetic utterances and exact MTL inference") as d:
        start = time.time()
        assert main(["synth", "--out", str(tmp_path / "data"), "--seed", "7", "--n-utts", "10"]) == 0
        manifest = tmp_path / "data" / "manifest.jsonl"
        cfg = ROOT / "configs" / "toy_overfit.cfg"
        assert main(["train", "--config", str(cfg), "--manifest", str(manifest), "--out", str(tmp_path / "run")]) == 0
        ckpt = tmp_path / "run" / "final.ckpt"
        steps = sum(1 for _ in open(tmp_path / "run" / "loss.csv")) - 1
        assert steps <= 2000

        from speechlm.training import load_checkpoint

        state = load_checkpoint(ckpt)
        report = evaluate_manifest(state.build_model().eval(), state.tokenizer, manifest, Task("mtl"))
        assert not report.errors
        assert report.average("CER") == 0.0

        from speechlm.data import read_manifest

        records = read_manifest(manifest).records
        capsys.readouterr()
        for r in records:
            assert main(["infer", "--ckpt", str(ckpt), "--wav", r.audio, "--task", "mtl"]) == 0
            assert capsys.readouterr().out == f"{r.text}\n{r.translation}\n"
        d["info"] = f"{steps} steps, {time.time() - start:.0f} s, 10/10 exact MTL outputs"


def brute_distance(a, b):
    table = np.zeros((len(a) + 1, len(b) + 1), dtype=int)
    table[:, 0] = range(len(a) + 1)
    table[0, :] = range(len(b) + 1)
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            table[i, j] = min(table[i - 1, j] + 1, table[i, j - 1] + 1, table[i - 1, j - 1] + (a[i - 1] != b[j - 1]))
    return int(table[-1, -1])


def test_09_metric_oracles():
    with criterion(9, "metrics: CER/WER vs DP oracle on 1000 pairs; BLEU 66.87; identity 100") as d:
        rng = random.Random(2024)
        alphabet = "abcde 你好"
        for _ in range(1000):
            ref = "".join(rng.choice(alphabet) for _ in range(rng.randint(1, 12)))
            hyp = "".join(rng.choice(alphabet) for _ in range(rng.randint(0, 12)))
            rc, hc = [c for c in ref if c != " "], [c for c in hyp if c != " "]
            if rc:
                assert cer(ref, hyp) == brute_distance(rc, hc) / len(rc)
            rw, hw = ref.split(), hyp.split()
            if rw:
                assert wer(ref, hyp) == brute_distance(rw, hw) / len(rw)
        score = bleu(["a b c d e"], ["a b c d f"])
        assert abs(score - 66.87) <= 0.01
        corpus = ["the cat sat on the mat", "a b c d e", "你 好"]
        assert bleu(corpus, corpus) == 100.0
        d["info"] = f"BLEU {score:.4f}"


def test_10_lr_schedule():
    with criterion(10, "LR schedule: 1e-4 at step 1000, 5e-5 at step 500"):
        cfg = TrainConfig()
        assert (cfg.lr, cfg.warmup_steps) == (1e-4, 1000)
        assert lr_at_step(1000, cfg) == 1e-4
        assert lr_at_step(500, cfg) == 5e-5


def test_11_loader_determinism(synth):
    with criterion(11, "loader: depths 1/2/8 under random delays give identical batches (50 trials)") as d:
        _, records, tok = synth
        mcfg, _ = tiny_configs(tok.vocab_size)
        maker = BatchMaker(records, tok, mcfg, Task("mtl"), micro_batch=3, seed=9)
        n = 12
        reference = [maker.build(g) for g in range(n)]
        runs = 0
        for trial in range(50):
            for depth in (1, 2, 8):
                rng = random.Random(trial * 10 + depth)
                delays = [rng.uniform(0.0, 0.003) for _ in range(n)]

                def build(g):
                    time.sleep(delays[g])
                    return maker.build(g)

                got = list(PipelinedLoader(range(n), depth=depth, build=build, workers=1 + trial % 3))
                assert len(got) == n and all(a.same_as(b) for a, b in zip(got, reference))
                runs += 1
        d["info"] = f"{runs} runs"


def test_12_template_bytes():
    with criterion(12, "template: rendered prompt matches the reference block byte for byte"):
        expected = (
            "<|im_start|>system\nYou are a helpful assistant.<|im_end|>\n"
            "<|im_start|>user\nTranslate speech to english text.<|im_end|>\n"
            "<|im_start|>assistant\n你叫什么名字？\nWhat's your name?<|im_end|>"
        )
        got = render_prompt(Task("mtl"), ("你叫什么名字？", "What's your name?"))
        assert got.encode("utf-8") == expected.encode("utf-8")
        assert render_prompt(Task("mtl"), ("你叫什么名字？", "What's your name?"), speech="<S>") == "<S>" + expected
