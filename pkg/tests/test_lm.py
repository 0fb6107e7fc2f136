import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from speechlm.adapter import AudioPromptEmbedding
from speechlm.config import LORA_TARGETS, QWEN2_7B_DIMS, LmConfig, LoraConfig
from speechlm.errors import InputError, ShapeError, TruncationError
from speechlm.lm import (
    LanguageModel,
    LoraLinear,
    lm_base_param_count,
    lm_lora_param_count,
    lora_disabled,
    lora_forward,
    lora_param_count,
    projection_dims,
)
from speechlm.model import greedy_decode, param_table, trainable_ratio

from conftest import tiny_configs


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 4), st.floats(0.1, 8.0))
def test_lora_forward_matches_numpy(d_in, d_out, r, scaling):
    rng = np.random.default_rng(d_in * 100 + d_out * 10 + r)
    x, w, b = rng.normal(size=(3, d_in)), rng.normal(size=(d_out, d_in)), rng.normal(size=d_out)
    a, bb = rng.normal(size=(r, d_in)), rng.normal(size=(d_out, r))
    expect = x @ w.T + b + scaling * (x @ a.T) @ bb.T
    got = lora_forward(*(torch.from_numpy(v) for v in (x, w, b, a, bb)), scaling)
    np.testing.assert_allclose(got.numpy(), expect, rtol=1e-10, atol=1e-10)


def test_lora_forward_shape_errors():
    with pytest.raises(ShapeError):
        lora_forward(torch.zeros(2, 3), torch.zeros(4, 5), None, None, None, 1.0)
    with pytest.raises(ShapeError):
        lora_forward(torch.zeros(2, 5), torch.zeros(4, 5), None, torch.zeros(2, 3), torch.zeros(4, 2), 1.0)


def test_lora_rank_zero_is_plain_linear():
    assert torch.equal(lora_forward(torch.ones(1, 2), torch.eye(2), None, torch.zeros(0, 2), None, 3.0), torch.ones(1, 2))


@settings(max_examples=30)
@given(st.integers(1, 4), st.integers(1, 128), st.lists(st.tuples(st.integers(1, 64), st.integers(1, 64)), min_size=1, max_size=7))
def test_lora_count_formula(n_layers, r, dims):
    assert lora_param_count(dims, n_layers, r) == n_layers * sum(r * (a + b) for a, b in dims)


def test_lora_count_at_full_scale():
    dims = projection_dims(QWEN2_7B_DIMS)
    assert dims["k_proj"] == (3584, 512) and dims["down_proj"] == (18944, 3584)
    assert lm_lora_param_count(QWEN2_7B_DIMS, LoraConfig(r=64, alpha=16)) == 161_480_704


def test_base_count_at_full_scale():
    assert lm_base_param_count(QWEN2_7B_DIMS) == 7_615_616_512


@pytest.mark.parametrize(
    "cfg",
    [
        LmConfig(d_llm=16, n_heads=4, d_ff=24, vocab_size=30, max_seq=40),
        LmConfig(d_llm=16, n_heads=4, n_kv_heads=2, d_ff=24, vocab_size=30, positional="rotary", qkv_bias=False),
    ],
)
def test_counts_match_modules(cfg):
    lora = LoraConfig(r=3)
    lm = LanguageModel(cfg, lora)
    base = sum(p.numel() for n, p in lm.named_parameters() if "lora_" not in n)
    adapters = sum(p.numel() for n, p in lm.named_parameters() if "lora_" in n)
    assert base == lm_base_param_count(cfg)
    assert adapters == lm_lora_param_count(cfg, lora)


def test_lora_b_starts_at_zero_and_scaling():
    lm = LanguageModel(LmConfig(d_llm=8, n_heads=2, d_ff=8, vocab_size=10), LoraConfig(r=4, alpha=16))
    mods = lm.lora_modules()
    assert len(mods) == len(LORA_TARGETS) * 2
    for m in mods:
        assert not m.lora_B.any() and m.lora_A.abs().sum() > 0
        assert m.scaling == 4.0


def test_frozen_mode_has_no_adapters():
    lm = LanguageModel(LmConfig(d_llm=8, n_heads=2, d_ff=8, vocab_size=10, llm_mode="frozen"), LoraConfig(r=4))
    assert lm.lora_modules() == []


def test_causal_mask():
    lm = LanguageModel(LmConfig(d_llm=8, n_heads=2, d_ff=8, vocab_size=10), LoraConfig(r=2))
    x = torch.randn(1, 6, 8)
    y = x.clone()
    y[0, 4:] += 5.0
    torch.testing.assert_close(lm(x)[0, :4], lm(y)[0, :4])


def test_padding_mask_isolates_samples():
    lm = LanguageModel(LmConfig(d_llm=8, n_heads=2, d_ff=8, vocab_size=10), LoraConfig(r=2))
    x = torch.randn(1, 4, 8)
    padded = torch.cat([x, torch.randn(1, 3, 8)], 1)
    valid = torch.tensor([[True] * 4 + [False] * 3])
    torch.testing.assert_close(lm(x)[0], lm(padded, valid)[0, :4], rtol=1e-5, atol=1e-5)


def test_lm_rejects_overlong_input():
    lm = LanguageModel(LmConfig(d_llm=8, n_heads=2, d_ff=8, vocab_size=10, max_seq=5))
    with pytest.raises(InputError):
        lm(torch.zeros(1, 6, 8))
    with pytest.raises(ShapeError):
        lm(torch.zeros(1, 3, 7))


def test_lora_disabled_restores_flags():
    lm = LanguageModel(LmConfig(d_llm=8, n_heads=2, d_ff=8, vocab_size=10), LoraConfig(r=2))
    with lora_disabled(lm):
        assert not any(m.enabled for m in lm.modules() if isinstance(m, LoraLinear))
    assert all(m.enabled for m in lm.modules() if isinstance(m, LoraLinear))


def test_trainable_ratio_tiny_and_table(tiny_model):
    part = tiny_model.partition()
    rows = dict((n, (t, tr)) for n, t, tr in param_table(tiny_model.cfg))
    assert part.module_counts("encoder") == (rows["Encoder"][0], 0)
    assert part.module_counts("adapter") == rows["Adapter"]
    assert part.module_counts("llm") == rows["LLM"]
    assert trainable_ratio(part) == rows["LLM"][1] / rows["LLM"][0]


def test_greedy_decode_stops_and_truncates(synth):
    _, _, tok = synth
    mcfg, _ = tiny_configs(tok.vocab_size, lm__max_seq=20)
    from speechlm.model import SpeechLLM

    model = SpeechLLM(mcfg)
    torch.nn.init.zeros_(model.llm.lm_head.weight)
    # all-zero logits: argmax picks id 0 every time, so the end marker never comes
    audio = AudioPromptEmbedding(np.zeros((2, 16), np.float32), 120.0)
    assert greedy_decode(model, audio, [5, 6], max_new=3, end_id=tok.im_end_id) == [0, 0, 0]
    with pytest.raises(TruncationError) as exc:
        greedy_decode(model, audio, [5, 6], max_new=100, end_id=tok.im_end_id)
    assert exc.value.partial == [0] * 16


def test_greedy_decode_ties_and_end_marker(monkeypatch, tiny_model):
    import speechlm.model as m

    def fake(model, audio, chat):
        v = model.cfg.lm.vocab_size
        logits = torch.zeros(len(chat.token_ids), v)
        if len(chat.token_ids) < 4:
            logits[-1, 7] = logits[-1, 9] = 1.0  # tie: lower id wins
        else:
            logits[-1, 3] = 1.0
        return logits

    monkeypatch.setattr(m, "lm_forward", fake)
    assert greedy_decode(tiny_model, None, [5, 6], max_new=10, end_id=3) == [7, 7]
