from functools import lru_cache

import pytest
from hypothesis import given
from hypothesis import strategies as st

from speechlm.errors import InputError
from speechlm.metrics import bleu, cer, char_units, edit_distance, normalize_text, wer, word_units


def brute_distance(a, b):
    @lru_cache(maxsize=None)
    def d(i, j):
        if i == 0:
            return j
        if j == 0:
            return i
        return min(d(i - 1, j) + 1, d(i, j - 1) + 1, d(i - 1, j - 1) + (a[i - 1] != b[j - 1]))

    return d(len(a), len(b))


short = st.text(alphabet="abc ", max_size=8)


@given(short, short)
def test_edit_distance_matches_recursion(a, b):
    assert edit_distance(a, b) == brute_distance(a, b)


@given(short, short, short)
def test_edit_distance_is_a_metric(a, b, c):
    assert edit_distance(a, b) == edit_distance(b, a)
    assert (edit_distance(a, b) == 0) == (a == b)
    assert edit_distance(a, c) <= edit_distance(a, b) + edit_distance(b, c)


def test_normalisation():
    assert normalize_text("  Hello,  World!  ") == "hello world"
    assert normalize_text("你好，世界。") == "你好世界"
    assert char_units("a b.") == ["a", "b"]
    assert word_units("What's  UP?") == ["what's", "up"]


def test_cer_and_wer_values():
    assert cer("你叫什么名字？", "你叫什么名子") == pytest.approx(1 / 6)
    assert cer("ab", "ab") == 0.0
    assert wer("the cat sat", "the cat") == pytest.approx(1 / 3)
    assert wer("a b", "x y z w") == 2.0  # insertions can push the rate above 1
    with pytest.raises(InputError):
        cer("。", "x")
    with pytest.raises(InputError):
        wer("", "x")


@pytest.mark.parametrize(
    "ref,hyp,expected,smooth",
    [
        ("a b c d e", "a b c d f", 66.8740304976422, False),  # p = 4/5, 3/4, 2/3, 1/2
        ("a b c d e f", "a b c d e", 81.87307530779819, False),  # exp(1 - 6/5)
        ("the cat", "the the the the", 0.0, False),  # clipping leaves no bigram match
        ("the cat", "the the the the", 31.94715521231362, True),  # add-one above unigrams
    ],
)
def test_bleu_hand_values(ref, hyp, expected, smooth):
    assert bleu([ref], [hyp], smooth=smooth) == pytest.approx(expected, abs=1e-9)


@given(st.lists(st.text(alphabet="abcd ", min_size=1, max_size=20).filter(str.strip), min_size=1, max_size=5))
def test_bleu_identity_is_100(refs):
    assert bleu(refs, refs) == 100.0


def test_bleu_is_corpus_level():
    # per-sentence scores would be 100 and 0; the corpus pools n-gram counts
    score = bleu(["a b c d", "e f g h"], ["a b c d", "x y z w"])
    assert 0.0 < score < 100.0


def test_bleu_character_level_and_errors():
    assert bleu(["你叫什么名字"], ["你叫什么名字"], char_level=True) == 100.0
    assert bleu(["a b"], [""]) == 0.0
    with pytest.raises(InputError):
        bleu(["a"], ["a", "b"])
    with pytest.raises(InputError):
        bleu([], [])
