"""Thinking-budget enforcement over a token stream.

Thinking tokens are counted from the open tag. Once the count reaches the
budget the filter waits for the next newline token and inserts the close tag
right after it; if ``budget + grace`` thinking tokens pass without a newline
the close tag is appended after that token regardless.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field


class Phase(str, enum.Enum):
    PRE_THINK = "pre-think"
    THINKING = "thinking"
    AWAITING_NEWLINE = "awaiting-newline"
    CLOSED = "closed"


@dataclass(frozen=True)
class TagIds:
    open_id: int
    close_id: int
    newline_id: int


@dataclass
class BudgetFilterState:
    budget: int
    tags: TagIds
    grace: int = 500
    phase: Phase = Phase.PRE_THINK
    think_count: int = 0
    inserted_at: int | None = None  # think-token count after which the tag went in
    inserted_reason: str | None = None  # "newline", "forced" or "eos"
    natural_close: bool = False
    extra_closes: int = 0  # close tags seen after the stream was already closed
    emitted: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.budget < 0 or self.grace < 0:
            raise ValueError("budget and grace must be non-negative")


def feed_token(state: BudgetFilterState, token: int) -> list[int]:
    """Advance the filter by one model token; returns the tokens to emit."""
    t = state.tags
    out = [token]
    if state.phase is Phase.PRE_THINK:
        if token == t.open_id:
            state.phase = Phase.THINKING
            if state.budget == 0:
                state.phase = Phase.AWAITING_NEWLINE
                if state.grace == 0:
                    _close(state, out, "forced")
    elif state.phase is Phase.CLOSED:
        if token == t.close_id:
            state.extra_closes += 1
    elif token == t.close_id:
        state.phase = Phase.CLOSED
        state.natural_close = True
    else:
        state.think_count += 1
        if state.think_count >= state.budget:
            state.phase = Phase.AWAITING_NEWLINE
        if state.phase is Phase.AWAITING_NEWLINE:
            if token == t.newline_id:
                _close(state, out, "newline")
            elif state.think_count >= state.budget + state.grace:
                _close(state, out, "forced")
    state.emitted.extend(out)
    return out


def _close(state: BudgetFilterState, out: list[int], reason: str) -> None:
    out.append(state.tags.close_id)
    state.phase = Phase.CLOSED
    state.inserted_at = state.think_count
    state.inserted_reason = reason


def finish(state: BudgetFilterState, close_open_thinking: bool = True) -> list[int]:
    """End of generation: optionally close a thinking section the model left open."""
    if close_open_thinking and state.phase in (Phase.THINKING, Phase.AWAITING_NEWLINE):
        out: list[int] = []
        _close(state, out, "eos")
        state.emitted.extend(out)
        return out
    return []


def filter_stream(tokens, budget: int, tags: TagIds, grace: int = 500,
                  close_at_eos: bool = True) -> tuple[list[int], BudgetFilterState]:
    state = BudgetFilterState(budget=budget, tags=tags, grace=grace)
    for tok in tokens:
        feed_token(state, int(tok))
    finish(state, close_at_eos)
    return state.emitted, state


@dataclass
class WellFormedness:
    well_formed: bool
    close_count: int
    close_positions: list[int]


def check_well_formed(tokens, close_id: int) -> WellFormedness:
    """Well-formed means exactly one close tag in the full output."""
    pos = [i for i, tok in enumerate(tokens) if tok == close_id]
    return WellFormedness(len(pos) == 1, len(pos), pos)


def metrics(state: BudgetFilterState) -> dict:
    wf = check_well_formed(state.emitted, state.tags.close_id)
    return {
        "well_formed": wf.well_formed,
        "close_count": wf.close_count,
        "close_positions": wf.close_positions,
        "inserted_at": state.inserted_at,
        "inserted_reason": state.inserted_reason,
        "natural_close": state.natural_close,
        "think_count": state.think_count,
        "extra_closes": state.extra_closes,
        "budget": state.budget,
        "grace": state.grace,
    }
