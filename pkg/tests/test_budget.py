import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nanoprune.budget import (BudgetFilterState, Phase, TagIds, check_well_formed, feed_token,
                              filter_stream, finish, metrics)

OPEN, CLOSE, NL = 1, 2, 3
TAGS = TagIds(OPEN, CLOSE, NL)


def think(n, newline_at=()):
    body = [NL if i in newline_at else 10 for i in range(n)]
    return [OPEN, *body]


def test_newline_after_budget_closes():
    out, st_ = filter_stream(think(10, newline_at={6}), budget=4, tags=TAGS, grace=100)
    assert out.index(CLOSE) == out.index(NL) + 1
    assert st_.inserted_at == 7 and st_.inserted_reason == "newline"


def test_newline_before_budget_ignored():
    out, st_ = filter_stream(think(8, newline_at={1}), budget=4, tags=TAGS, grace=2)
    assert st_.inserted_reason == "forced" and st_.inserted_at == 6
    assert out[:3] == [OPEN, 10, NL]


def test_forced_after_grace():
    out, st_ = filter_stream(think(30), budget=5, tags=TAGS, grace=7)
    assert st_.inserted_at == 12
    assert out[13] == CLOSE  # open tag + 12 thinking tokens, then the tag
    assert check_well_formed(out, CLOSE).well_formed


def test_natural_close_passes_through():
    stream = [OPEN, 10, 10, NL, CLOSE, 10, NL, 10]
    out, st_ = filter_stream(stream, budget=100, tags=TAGS)
    assert out == stream and st_.natural_close and st_.inserted_at is None


def test_eos_inside_thinking():
    out, st_ = filter_stream(think(3), budget=10, tags=TAGS)
    assert out[-1] == CLOSE and st_.inserted_reason == "eos"
    out, st_ = filter_stream(think(3), budget=10, tags=TAGS, close_at_eos=False)
    assert CLOSE not in out and st_.phase is Phase.THINKING


def test_no_open_tag_means_no_insertion():
    out, st_ = filter_stream([10, NL] * 40, budget=1, tags=TAGS, grace=1)
    assert CLOSE not in out and st_.phase is Phase.PRE_THINK


def test_zero_budget_closes_at_first_newline():
    out, st_ = filter_stream(think(5, newline_at={2}), budget=0, tags=TAGS, grace=500)
    assert st_.inserted_at == 3


def test_extra_closes_counted():
    out, st_ = filter_stream([OPEN, 10, CLOSE, 10, CLOSE], 5, TAGS)
    assert st_.extra_closes == 1 and not metrics(st_)["well_formed"]


def test_negative_budget_rejected():
    with pytest.raises(ValueError):
        BudgetFilterState(budget=-1, tags=TAGS)


def test_streaming_equals_batch():
    rng = np.random.default_rng(0)
    stream = [OPEN, *rng.choice([10, 11, NL], size=200, p=[0.6, 0.35, 0.05]).tolist()]
    s = BudgetFilterState(budget=40, tags=TAGS, grace=20)
    out = []
    for tok in stream:
        out.extend(feed_token(s, tok))
    out.extend(finish(s))
    assert out == filter_stream(stream, 40, TAGS, 20)[0]


def test_metrics_keys():
    _, st_ = filter_stream(think(5), 2, TAGS, 1)
    m = metrics(st_)
    assert {"well_formed", "inserted_at", "natural_close"} <= set(m)


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 60), st.integers(0, 40), st.integers(0, 10**6), st.floats(0, 0.3))
def test_properties_without_close_in_source(budget, grace, seed, p_nl):
    rng = np.random.default_rng(seed)
    n = rng.integers(0, 150)
    body = np.where(rng.random(n) < p_nl, NL, 10).tolist()
    prefix = [10] * int(rng.integers(0, 3))
    out, st_ = filter_stream([*prefix, OPEN, *body], budget, TAGS, grace)
    wf = check_well_formed(out, CLOSE)
    assert wf.close_count == 1 and wf.well_formed
    if st_.inserted_reason in ("newline", "forced"):
        assert budget <= st_.inserted_at <= budget + grace
    # removing the inserted tag recovers the source
    src = list(out)
    src.remove(CLOSE)
    assert src == [*prefix, OPEN, *body]
