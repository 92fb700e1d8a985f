import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from masattn.errors import ValidationError
from masattn.masking import (
    SENTINEL,
    AttnMask,
    SegmentedTokens,
    build_mask,
    build_rows,
    decode_mask_row,
    mask_oracle,
    to_pgm,
    unify_segments,
)


@st.composite
def segment_layouts(draw, max_len=64):
    """Contiguous prompt segments followed by an optional generated tail."""
    n = draw(st.integers(1, max_len))
    n_gen = draw(st.integers(0, n - 1))
    n_prompt = n - n_gen
    ids, seg = [], 0
    while len(ids) < n_prompt:
        run = draw(st.integers(1, n_prompt - len(ids)))
        ids += [seg] * run
        seg += draw(st.integers(1, 3))
    return ids + [SENTINEL] * n_gen


def rows(mask):
    return mask.rows()


def test_two_segments():
    assert rows(build_mask([0, 0, 1, 1], "mas")) == ["1100", "1100", "1111", "1111"]


def test_singletons_are_causal():
    assert build_mask([0, 1, 2], "mas") == build_mask([0, 1, 2], "causal")
    assert rows(build_mask([0, 1, 2], "causal")) == ["100", "110", "111"]


def test_sentinel_rows_are_causal():
    m = build_mask([0, 0, 0, SENTINEL, SENTINEL], "mas")
    assert rows(m) == ["11100", "11100", "11100", "11110", "11111"]


def test_non_contiguous_segments_rejected():
    with pytest.raises(ValidationError):
        build_mask([0, 1, 0], "mas")
    with pytest.raises(ValidationError):
        build_mask([0, SENTINEL, 0], "mas")
    with pytest.raises(ValidationError):
        build_mask([1, 1, 0], "mas")


def test_unknown_mode_rejected():
    with pytest.raises(ValidationError):
        build_mask([0, 0], "bidirectional")


def test_segmented_tokens_invariants():
    with pytest.raises(ValidationError):
        SegmentedTokens((1, 2), (0,), ("system", "system"))
    with pytest.raises(ValidationError):
        SegmentedTokens((1, 2), (0, SENTINEL), ("system", "user"))
    with pytest.raises(ValidationError):
        SegmentedTokens((1,), (0,), ("assistant",))
    seg = SegmentedTokens((5, 6, 7, 8), (0, 1, SENTINEL, SENTINEL), ("system", "user", "assistant", "assistant"))
    assert seg.prefill_len == 2


def test_decode_row():
    assert decode_mask_row(0).tolist() == [True]
    assert decode_mask_row(5).tolist() == [True] * 6
    with pytest.raises(ValidationError):
        decode_mask_row(-1)


@given(segment_layouts(max_len=24), st.integers(1, 6))
@settings(max_examples=60, deadline=None)
def test_decode_rows_extend_the_full_mask(ids, k):
    extended = ids + [SENTINEL] * k
    full = build_mask(extended, "mas").allowed
    n = len(ids)
    for step in range(k):
        row = decode_mask_row(n + step)
        assert torch.equal(full[n + step, : n + step + 1], row)
        assert not full[n + step, n + step + 1:].any()


def test_unify():
    seg = SegmentedTokens.from_segments([0, 0, 1, 1, SENTINEL])
    assert unify_segments(seg).segment_ids == (0, 0, 0, 0, SENTINEL)
    once = unify_segments(seg)
    assert unify_segments(once) == once
    assert rows(build_mask(unify_segments(SegmentedTokens.from_segments([0, 0, 1, 1])), "mas")) == ["1111"] * 4


def test_unify_keeps_later_turns_apart():
    seg = SegmentedTokens.from_segments([0, 1, SENTINEL, 2, 2, SENTINEL])
    assert unify_segments(seg).segment_ids == (0, 0, SENTINEL, 1, 1, SENTINEL)


def test_oracle_causal_and_full_block():
    assert rows(mask_oracle(list(range(8)), "causal")) == ["1" * (i + 1) + "0" * (7 - i) for i in range(8)]
    assert rows(mask_oracle([0] * 5, "mas")) == ["11111"] * 5


@given(segment_layouts(), st.sampled_from(["causal", "mas"]))
@settings(max_examples=150, deadline=None)
def test_build_mask_matches_oracle(ids, mode):
    assert build_mask(ids, mode) == mask_oracle(ids, mode)


@given(segment_layouts())
@settings(max_examples=100, deadline=None)
def test_mas_only_unmasks(ids):
    mas, causal = build_mask(ids, "mas").allowed, build_mask(ids, "causal").allowed
    assert bool((mas | causal).eq(mas).all())
    assert bool(mas.diagonal().all())
    assert bool(mas.any(dim=1).all())


@given(segment_layouts())
@settings(max_examples=100, deadline=None)
def test_generated_rows_identical_between_modes(ids):
    mas, causal = build_mask(ids, "mas").allowed, build_mask(ids, "causal").allowed
    for i, s in enumerate(ids):
        if s == SENTINEL:
            assert torch.equal(mas[i], causal[i])


@given(segment_layouts())
@settings(max_examples=100, deadline=None)
def test_within_segment_symmetry(ids):
    mas = build_mask(ids, "mas").allowed
    for i, si in enumerate(ids):
        for j, sj in enumerate(ids):
            if si != SENTINEL and si == sj:
                assert mas[i, j] and mas[j, i]


def test_build_rows_is_a_slice():
    ids = [0, 0, 1, 1, 1, SENTINEL]
    assert torch.equal(build_rows(ids, 2, "mas"), build_mask(ids, "mas").allowed[2:])


def test_pgm_bytes():
    data = to_pgm(build_mask([0, 0], "causal"))
    assert data == b"P5\n2 2\n255\n" + bytes([255, 0, 255, 255])


def test_additive_rendering():
    add = build_mask([0, 1], "causal").additive()
    assert add.tolist() == [[0.0, float("-inf")], [0.0, 0.0]]


def test_attn_mask_requires_square_bool():
    with pytest.raises(ValidationError):
        AttnMask(torch.ones(2, 3, dtype=torch.bool))
