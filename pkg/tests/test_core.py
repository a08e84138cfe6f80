import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from feedloc.core import (
    ClauseSet,
    DegenerateSpan,
    InvalidSpan,
    Span,
    Temporal,
    clips_in_span,
    intersection,
    require_clips,
    span_duration,
    tiou,
)


@st.composite
def spans(draw, hi=100.0):
    a = draw(st.floats(0, hi - 0.01, allow_nan=False))
    length = draw(st.floats(0.01, hi, allow_nan=False))
    return Span(a, a + length)


def test_tiou_examples():
    assert tiou(Span(3, 7), Span(3, 7)) == 1.0
    assert tiou(Span(0, 5), Span(5, 9)) == 0.0
    assert tiou(Span(0, 10), Span(5, 15)) == pytest.approx(5 / 15)


def test_span_duration_examples():
    assert span_duration(Span(2, 6)) == 4.0
    assert span_duration(Span(0, 1)) == 1.0
    assert span_duration(Span(1.5, 2.75)) == 1.25


def test_clips_in_span_examples():
    assert clips_in_span(Span(2, 5), 10) == [2, 3, 4]
    assert clips_in_span(Span(0, 1), 4) == [0]
    # clip 2 overlaps by 0.4, clip 3 by 1.0, clip 4 by 0.4
    assert clips_in_span(Span(2.6, 4.4), 10) == [3]


def test_exact_half_clip_overlap_is_excluded():
    assert clips_in_span(Span(0.5, 2.0), 4) == [1]


def test_sub_clip_span_is_degenerate():
    with pytest.raises(DegenerateSpan):
        require_clips(Span(2.3, 2.6), 10)


@pytest.mark.parametrize("start,end", [(3, 3), (5, 2), (-1, 2), (0, math.inf), (math.nan, 1)])
def test_invalid_spans_rejected(start, end):
    with pytest.raises(InvalidSpan):
        Span(start, end)


def test_clause_set_rejects_contradiction():
    with pytest.raises(ValueError):
        ClauseSet(("at001",), ("at001",))


def test_temporal_flip():
    assert Temporal.BEFORE.flipped() is Temporal.AFTER
    assert Temporal.AFTER.flipped() is Temporal.BEFORE
    assert Temporal.NONE.flipped() is Temporal.NONE


@given(spans(), spans())
def test_tiou_symmetric_and_bounded(a, b):
    v = tiou(a, b)
    assert v == tiou(b, a)
    assert 0.0 <= v <= 1.0
    assert (v == 0.0) == (intersection(a, b) == 0.0)


@given(spans())
def test_tiou_self_is_one(a):
    assert tiou(a, a) == pytest.approx(1.0)


@given(spans(), st.floats(0, 5), st.floats(0, 5), st.floats(0, 5), st.floats(0, 5))
def test_tiou_nesting_monotone(a, l1, r1, l2, r2):
    b = Span(max(0.0, a.start - l1), a.end + r1)
    c = Span(max(0.0, b.start - l2), b.end + r2)
    assert tiou(b, c) >= tiou(a, c) - 1e-12


@given(st.integers(0, 50), st.integers(1, 20))
def test_integer_spans_cover_their_clips(start, length):
    s = Span(start, start + length)
    assert clips_in_span(s, start + length) == list(range(start, start + length))
