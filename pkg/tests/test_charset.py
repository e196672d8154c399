import itertools

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from srtext import (
    CHARSET,
    Label,
    ModelConfig,
    ctc_min_frames,
    decode_indices,
    encode_text,
    fits_frame_budget,
    normalize_text,
)

CFG = ModelConfig()


def test_normalize_lowercases_and_filters():
    assert normalize_text("Hello!") == "hello"
    assert normalize_text("AB-12 xy") == "ab12xy"
    assert normalize_text("¿@#") == ""
    assert normalize_text("") == ""


def test_encode_simple_word():
    label = encode_text("ab1", CFG)
    assert label.text == "ab1"
    assert label.indices == (1, 2, 28)


def test_encode_covers_charset_bounds():
    assert encode_text("a", CFG).indices == (1,)
    assert encode_text("z", CFG).indices == (26,)
    assert encode_text("0", CFG).indices == (27,)
    assert encode_text("9", CFG).indices == (36,)


def test_encode_rejects_empty():
    with pytest.raises(ValueError, match="empty"):
        encode_text("", CFG)


def test_encode_rejects_unknown_character():
    with pytest.raises(ValueError, match="unknown character"):
        encode_text("a!", CFG)


def test_decode_rejects_out_of_range():
    with pytest.raises(ValueError):
        decode_indices([0], CFG)
    with pytest.raises(ValueError):
        decode_indices([37], CFG)


def test_ctc_min_frames_counts_repeats():
    assert ctc_min_frames(()) == 0
    assert ctc_min_frames((1, 2)) == 2
    assert ctc_min_frames((1, 1)) == 3
    assert ctc_min_frames((1, 1, 1)) == 5
    assert ctc_min_frames((1, 1, 2, 2)) == 6


def test_fits_frame_budget():
    ok = Label(text="ab", indices=(1, 2))
    assert fits_frame_budget(ok, CFG)
    # 17 equal characters need 33 frames, one more than the 32 available.
    too_long = encode_text("a" * 17, CFG)
    assert not fits_frame_budget(too_long, CFG)
    exactly = encode_text("a" * 16, CFG)  # needs 31 frames
    assert fits_frame_budget(exactly, CFG)
    empty = Label(text="", indices=())
    assert not fits_frame_budget(empty, CFG)


@given(st.text(alphabet=CHARSET, min_size=1, max_size=32))
@settings(max_examples=100, deadline=None)
def test_encode_decode_round_trip(text):
    label = encode_text(text, CFG)
    assert decode_indices(label.indices, CFG) == text
    assert all(1 <= i <= 36 for i in label.indices)


@given(st.text(max_size=64))
@settings(max_examples=100, deadline=None)
def test_normalize_is_idempotent_and_in_charset(raw):
    once = normalize_text(raw)
    assert normalize_text(once) == once
    assert all(ch in CHARSET for ch in once)


@given(st.lists(st.integers(min_value=1, max_value=36), min_size=1, max_size=20))
@settings(max_examples=100, deadline=None)
def test_min_frames_matches_group_oracle(indices):
    # Independent count: each run of k equal labels needs k characters plus
    # k-1 separating blanks.
    oracle = sum(
        2 * len(list(group)) - 1 for _, group in itertools.groupby(indices)
    )
    assert ctc_min_frames(indices) == oracle
