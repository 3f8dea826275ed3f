import pytest
from hypothesis import given, strategies as st

from cltprobe.vocab import Vocabulary, strip_marker

TOKENS = ["<bos>", "\n", " the", " cat", " ca", "t", " ", "a", "b", "c", "Out", " out", "▁round"]


def vocab():
    return Vocabulary(TOKENS, bos_id=0)


def test_greedy_longest_match():
    v = vocab()
    assert v.encode(" the cat\n") == [0, 2, 3, 1]
    assert v.encode(" cab", add_bos=False) == [4, 8]
    assert v.encode(" tab", add_bos=False) == [6, 5, 7, 8]


def test_unknown_text_raises():
    with pytest.raises(ValueError):
        vocab().encode("xyz")


def test_newline_detected():
    assert vocab().newline_id == 1


def test_word_variants():
    v = vocab()
    assert sorted(v.word_token_ids("out")) == [10, 11]
    assert v.word_token_ids("round") == [12]
    assert v.word_token_ids("zebra") == []


def test_strip_marker():
    assert strip_marker("▁round") == "round"
    assert strip_marker("Ġout") == "out"
    assert strip_marker(" the") == "the"


def test_save_load(tmp_path):
    v = vocab()
    back = Vocabulary.load(v.save(tmp_path / "v.json"))
    assert back.tokens == v.tokens and back.bos_id == 0 and back.newline_id == 1


@given(st.lists(st.sampled_from(TOKENS[1:]), max_size=20))
def test_decode_encode_roundtrip(pieces):
    v = vocab()
    text = "".join(pieces)
    assert v.decode(v.encode(text)) == text
