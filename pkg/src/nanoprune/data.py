"""Deterministic byte-level corpora for desk-scale training.

Two synthetic streams stand in for the pretraining and post-training mixes:
``prose`` is grammar-generated English-like text, ``qa`` is short
question/answer arithmetic with a fixed answer format.
"""

from __future__ import annotations

import numpy as np

_NOUNS = ("model", "layer", "token", "state", "head", "cache", "budget", "signal", "matrix",
          "river", "garden", "teacher", "student", "window", "engine", "letter", "number")
_VERBS = ("reads", "writes", "keeps", "drops", "moves", "holds", "finds", "sends", "learns",
          "prunes", "counts", "mixes")
_ADJS = ("small", "large", "quiet", "bright", "early", "late", "sparse", "dense", "simple",
         "narrow", "deep", "warm")
_DETS = ("the", "a", "each", "every", "one")


def _sentence(rng: np.random.Generator) -> str:
    def noun_phrase():
        words = [_DETS[rng.integers(len(_DETS))]]
        if rng.random() < 0.5:
            words.append(_ADJS[rng.integers(len(_ADJS))])
        words.append(_NOUNS[rng.integers(len(_NOUNS))])
        return " ".join(words)

    s = f"{noun_phrase()} {_VERBS[rng.integers(len(_VERBS))]} {noun_phrase()}"
    if rng.random() < 0.3:
        s += f" and {_VERBS[rng.integers(len(_VERBS))]} {noun_phrase()}"
    return s[0].upper() + s[1:] + "."


def prose_text(n_chars: int, seed: int) -> str:
    rng = np.random.default_rng(seed)
    parts, total = [], 0
    while total < n_chars:
        s = _sentence(rng) + ("\n" if rng.random() < 0.2 else " ")
        parts.append(s)
        total += len(s)
    return "".join(parts)[:n_chars]


def qa_text(n_chars: int, seed: int) -> str:
    rng = np.random.default_rng(seed)
    parts, total = [], 0
    while total < n_chars:
        a, b = rng.integers(0, 50, size=2)
        op = "+" if rng.random() < 0.6 else "-"
        ans = a + b if op == "+" else a - b
        s = f"Q: {a}{op}{b}? A: {ans}\n"
        parts.append(s)
        total += len(s)
    return "".join(parts)[:n_chars]


def encode(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.int64)


def decode(ids) -> str:
    return bytes(int(i) for i in ids).decode("utf-8", errors="replace")


STREAMS = {"prose": prose_text, "qa": qa_text}


class TokenStream:
    """Random fixed-length windows over one encoded corpus."""

    def __init__(self, name: str, n_chars: int = 200_000, seed: int = 0):
        if name not in STREAMS:
            raise ValueError(f"unknown stream {name!r}; choose from {sorted(STREAMS)}")
        self.name = name
        self.ids = encode(STREAMS[name](n_chars, seed))

    def sample(self, rng: np.random.Generator, n: int, seq_len: int) -> np.ndarray:
        """``n`` windows of ``seq_len + 1`` tokens (inputs plus shifted targets)."""
        if seq_len + 1 > self.ids.size:
            raise ValueError("sequence longer than corpus")
        starts = rng.integers(0, self.ids.size - seq_len - 1, size=n)
        return np.stack([self.ids[s:s + seq_len + 1] for s in starts])


class MixedStream:
    """Draws a fixed share of every batch from ``primary``, the rest from ``secondary``."""

    def __init__(self, primary: TokenStream, secondary: TokenStream | None, fraction: float):
        if not 0 <= fraction <= 1:
            raise ValueError("mix fraction must lie in [0, 1]")
        self.primary, self.secondary, self.fraction = primary, secondary, fraction

    def sample(self, rng: np.random.Generator, n: int, seq_len: int) -> np.ndarray:
        if self.secondary is None:
            return self.primary.sample(rng, n, seq_len)
        n_primary = int(round(self.fraction * n))
        parts = []
        if n_primary:
            parts.append(self.primary.sample(rng, n_primary, seq_len))
        if n - n_primary:
            parts.append(self.secondary.sample(rng, n - n_primary, seq_len))
        return np.concatenate(parts)


def heldout_batch(stream: TokenStream, n: int, seq_len: int, seed: int = 12345) -> np.ndarray:
    return stream.sample(np.random.default_rng(seed), n, seq_len)
