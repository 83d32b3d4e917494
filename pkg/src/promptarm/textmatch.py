"""Fuzzy substring matching for verifying quotes against source letters.

Similarity between two strings is 1 - edit_distance / max(len(a), len(b)).
``best_match_window`` finds the source substring most similar to a quote by
running a semi-global alignment (free start and end in the source) and then
rescoring candidate windows exactly, so the returned similarity is always the
true normalized similarity of the returned span.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_MATCH_THRESHOLD = 0.85

# Window lengths considered around the quote length, as a fraction.
_LENGTH_SLACK = 0.2
# How many alignment end positions are rescored exactly.
_CANDIDATE_ENDS = 8


def _relax_insertions(row: np.ndarray) -> np.ndarray:
    # row[j] = min over k <= j of row[k] + (j - k), computed as a running min
    # of (row[k] - k) plus j.
    idx = np.arange(len(row), dtype=np.int64)
    return np.minimum(row, np.minimum.accumulate(row - idx) + idx)


def edit_distance(a: str, b: str) -> int:
    """Levenshtein distance with unit costs."""
    if not a:
        return len(b)
    if not b:
        return len(a)
    b_codes = np.frombuffer(b.encode("utf-32-le"), dtype=np.uint32)
    prev = np.arange(len(b) + 1, dtype=np.int64)
    for i, ch in enumerate(a, start=1):
        cur = np.empty_like(prev)
        cur[0] = i
        cost = (b_codes != ord(ch)).astype(np.int64)
        np.minimum(prev[:-1] + cost, prev[1:] + 1, out=cur[1:])
        prev = _relax_insertions(cur)
    return int(prev[-1])


def similarity(a: str, b: str) -> float:
    """Normalized edit similarity: 1 - distance / max(len(a), len(b))."""
    if not a and not b:
        return 1.0
    return 1.0 - edit_distance(a, b) / max(len(a), len(b))


@dataclass(frozen=True)
class MatchWindow:
    start: int
    end: int
    similarity: float


def _semiglobal_end_scores(quote: str, text: str) -> np.ndarray:
    """Distance of the best alignment of ``quote`` ending at each text offset.

    Row DP over the quote with free start in the text: entry j of the result
    is the minimal edit distance between the quote and some window of the
    text ending at offset j.
    """
    n = len(text)
    t_codes = np.frombuffer(text.encode("utf-32-le"), dtype=np.uint32)
    prev = np.zeros(n + 1, dtype=np.int64)  # free start: row 0 is all zeros
    for i, ch in enumerate(quote, start=1):
        cur = np.empty_like(prev)
        cur[0] = i
        cost = (t_codes != ord(ch)).astype(np.int64)
        np.minimum(prev[:-1] + cost, prev[1:] + 1, out=cur[1:])
        prev = _relax_insertions(cur)
    return prev


def best_match_window(quote: str, text: str) -> MatchWindow | None:
    """Locate the text window maximizing normalized edit similarity to quote.

    Returns None only for empty inputs. The similarity of the returned window
    is exact (recomputable via :func:`similarity` on the window substring).
    """
    if not quote or not text:
        return None
    # Fast path: exact substring.
    pos = text.find(quote)
    if pos >= 0:
        return MatchWindow(pos, pos + len(quote), 1.0)

    m = len(quote)
    end_scores = _semiglobal_end_scores(quote, text)
    # Pick a handful of promising end offsets, then rescore windows of
    # every allowed length ending there exactly.
    order = np.argsort(end_scores[1:], kind="stable") + 1
    ends = order[:_CANDIDATE_ENDS].tolist()

    lo_len = max(1, int(m * (1 - _LENGTH_SLACK)))
    hi_len = int(np.ceil(m * (1 + _LENGTH_SLACK)))
    best: MatchWindow | None = None
    seen: set[tuple[int, int]] = set()
    for end in ends:
        for length in range(lo_len, hi_len + 1):
            start = end - length
            if start < 0:
                continue
            key = (start, end)
            if key in seen:
                continue
            seen.add(key)
            sim = similarity(quote, text[start:end])
            if best is None or sim > best.similarity:
                best = MatchWindow(start, end, sim)
    return best
