"""Exit rule, caption loop, and speedup accounting."""

import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from exitsim import (
    CaptionRun,
    ExitHistogram,
    TokenTrace,
    TraceValidationError,
    decide_exit,
    run_caption,
    speedup_ratio,
)

from conftest import make_trace


# ---------------------------------------------------------------------------
# decide_exit


def test_exit_at_first_clearing_layer():
    trace = make_trace([0.3, 0.65, 0.9])
    decision = decide_exit(trace, 0.6)
    assert decision.exit_layer == 2
    assert decision.confidence == 0.65
    assert decision.token_id == 2
    assert decision.first_layer_confidence == 0.3


def test_final_layer_is_unconditional_fallback():
    # No layer clears 0.6, including the last one: exit at N regardless.
    trace = make_trace([0.2, 0.3, 0.4])
    decision = decide_exit(trace, 0.6)
    assert decision.exit_layer == 3
    assert decision.confidence == 0.4


def test_zero_threshold_always_exits_at_layer_one():
    trace = make_trace([0.0, 0.5, 0.9])
    assert decide_exit(trace, 0.0).exit_layer == 1


def test_threshold_one_needs_exact_full_confidence():
    assert decide_exit(make_trace([0.999999, 0.5]), 1.0).exit_layer == 2
    assert decide_exit(make_trace([1.0, 0.5]), 1.0).exit_layer == 1


def test_comparison_is_inclusive():
    trace = make_trace([0.6, 0.9])
    assert decide_exit(trace, 0.6).exit_layer == 1


def test_token_comes_from_the_exiting_layer():
    trace = make_trace([0.1, 0.8, 0.9], token_ids=[7, 11, 13])
    assert decide_exit(trace, 0.5).token_id == 11
    assert decide_exit(trace, 0.95).token_id == 13


@pytest.mark.parametrize("alpha", [-0.1, 1.5, math.nan])
def test_threshold_outside_unit_interval_rejected(alpha):
    with pytest.raises(ValueError):
        decide_exit(make_trace([0.5, 0.5]), alpha)


def test_trace_needs_two_layers():
    with pytest.raises(TraceValidationError):
        TokenTrace.from_arrays([0.5], [1])


def test_trace_rejects_bad_confidence_and_token():
    with pytest.raises(TraceValidationError):
        make_trace([0.5, 1.2])
    with pytest.raises(TraceValidationError):
        make_trace([-0.1, 0.5])
    with pytest.raises(TraceValidationError):
        TokenTrace.from_arrays([0.5, 0.5], [1, -2])
    with pytest.raises(TraceValidationError):
        TokenTrace.from_arrays([0.5, 0.5, 0.5], [1, 2])


@given(
    confs=st.lists(
        st.floats(min_value=0.0, max_value=1.0), min_size=2, max_size=12
    ),
    a_lo=st.floats(min_value=0.0, max_value=1.0),
    a_hi=st.floats(min_value=0.0, max_value=1.0),
)
def test_exit_layer_monotone_in_threshold(confs, a_lo, a_hi):
    # Raising the threshold can only push the exit deeper.
    if a_lo > a_hi:
        a_lo, a_hi = a_hi, a_lo
    trace = make_trace(confs)
    assert decide_exit(trace, a_lo).exit_layer <= decide_exit(trace, a_hi).exit_layer


@given(
    confs=st.lists(
        st.floats(min_value=0.0, max_value=1.0), min_size=2, max_size=12
    ),
    alpha=st.floats(min_value=0.0, max_value=1.0),
)
def test_exit_matches_brute_force_scan(confs, alpha):
    trace = make_trace(confs)
    expected = len(confs)
    for i, c in enumerate(confs[:-1], start=1):
        if c >= alpha:
            expected = i
            break
    assert decide_exit(trace, alpha).exit_layer == expected


def test_decide_exit_is_deterministic():
    trace = make_trace([0.31, 0.62, 0.93])
    assert decide_exit(trace, 0.6) == decide_exit(trace, 0.6)


# ---------------------------------------------------------------------------
# run_caption


def test_caption_stops_on_eos():
    traces = [
        make_trace([0.9, 0.5], token_ids=[0, 3]),  # layer 1 emits eos
        make_trace([0.9, 0.5], token_ids=[4, 5]),
    ]
    run = run_caption(traces, alpha=0.5, eos_id=0)
    assert len(run) == 1
    assert run.terminated_by_eos
    assert not run.truncated
    assert run.tokens[0].token_id == 0


def test_caption_hits_length_cap_without_eos():
    def endless():
        while True:
            yield make_trace([0.9, 0.5], token_ids=[3, 4])

    run = run_caption(endless(), alpha=0.5, max_caption_length=20)
    assert len(run) == 20
    assert not run.terminated_by_eos
    assert not run.truncated


def test_caption_marks_truncation_when_source_runs_dry():
    traces = [make_trace([0.9, 0.5], token_ids=[3, 4])] * 2
    run = run_caption(traces, alpha=0.5, max_caption_length=20)
    assert len(run) == 2
    assert run.truncated
    assert not run.terminated_by_eos


def test_caption_scripted_exits():
    # Hand-checked: layers clearing 0.7 are (2, 1, fallback 3).
    traces = [
        make_trace([0.4, 0.8, 0.9], token_ids=[1, 2, 3]),
        make_trace([0.7, 0.1, 0.9], token_ids=[4, 5, 6]),
        make_trace([0.2, 0.3, 0.5], token_ids=[7, 8, 0]),
    ]
    run = run_caption(traces, alpha=0.7, eos_id=0, image_id="img-9")
    assert [d.exit_layer for d in run.tokens] == [2, 1, 3]
    assert [d.token_id for d in run.tokens] == [2, 4, 0]
    assert run.terminated_by_eos
    assert run.image_id == "img-9"
    assert run.length == 3


def test_caption_rejects_nonpositive_cap():
    with pytest.raises(ValueError):
        run_caption([], alpha=0.5, max_caption_length=0)


def test_caption_run_is_reproducible():
    traces = [make_trace([0.4, 0.8, 0.9]), make_trace([0.2, 0.3, 0.5])]
    assert run_caption(traces, 0.7) == run_caption(traces, 0.7)


def test_caption_run_is_a_plain_record():
    run = CaptionRun(image_id=1, tokens=(), terminated_by_eos=False)
    assert run.length == 0
    assert not run.truncated


# ---------------------------------------------------------------------------
# ExitHistogram and speedup_ratio


def test_speedup_all_final_layer_is_one():
    hist = ExitHistogram.empty(12)
    for _ in range(50):
        hist.record(12)
    assert speedup_ratio(hist) == pytest.approx(1.0, abs=1e-12)


def test_speedup_all_half_depth_is_two():
    hist = ExitHistogram.empty(12)
    for _ in range(50):
        hist.record(6)
    assert speedup_ratio(hist) == pytest.approx(2.0, abs=1e-12)


def test_speedup_mixed_hand_value():
    # 10 tokens at layer 3 and 10 at layer 12 of a 12-layer stack:
    # (20 * 12) / (10 * 3 + 10 * 12) = 240 / 150 = 1.6 exactly.
    hist = ExitHistogram.empty(12)
    hist.counts[2] = 10
    hist.counts[11] = 10
    assert abs(speedup_ratio(hist) - 1.6) < 1e-12


def test_speedup_everything_at_layer_one_is_n():
    hist = ExitHistogram.empty(7)
    hist.counts[0] = 13
    assert speedup_ratio(hist) == pytest.approx(7.0, abs=1e-12)


@given(
    counts=st.lists(st.integers(min_value=0, max_value=1000), min_size=2, max_size=16),
    scale=st.integers(min_value=1, max_value=50),
)
def test_speedup_bounds_and_scale_invariance(counts, scale):
    if sum(counts) == 0:
        counts[0] = 1
    hist = ExitHistogram(list(counts))
    value = speedup_ratio(hist)
    assert 1.0 <= value <= len(counts) + 1e-12
    scaled = ExitHistogram([c * scale for c in counts])
    assert speedup_ratio(scaled) == pytest.approx(value, rel=1e-12)


def test_speedup_rejects_empty_histogram():
    with pytest.raises(ValueError):
        speedup_ratio(ExitHistogram.empty(12))


def test_speedup_rejects_layer_count_mismatch():
    hist = ExitHistogram.empty(12)
    hist.record(1)
    with pytest.raises(ValueError):
        speedup_ratio(hist, n_layers=10)


def test_histogram_record_validates_layer():
    hist = ExitHistogram.empty(3)
    with pytest.raises(ValueError):
        hist.record(0)
    with pytest.raises(ValueError):
        hist.record(4)
    hist.record(3)
    assert hist.total == 1


def test_histogram_from_decisions():
    traces = [make_trace([0.9, 0.2]), make_trace([0.1, 0.2])]
    decisions = [decide_exit(t, 0.5) for t in traces]
    hist = ExitHistogram.from_decisions(decisions, n_layers=2)
    assert hist.counts == [1, 1]


@settings(max_examples=30)
@given(
    confs=st.lists(
        st.lists(st.floats(min_value=0.0, max_value=1.0), min_size=4, max_size=4),
        min_size=1,
        max_size=30,
    ),
    alpha=st.floats(min_value=0.0, max_value=1.0),
)
def test_histogram_total_matches_caption_length(confs, alpha):
    traces = [make_trace(row) for row in confs]
    run = run_caption(traces, alpha, max_caption_length=100, eos_id=-1)
    hist = ExitHistogram.from_decisions(run.tokens, n_layers=4)
    assert hist.total == len(run)
