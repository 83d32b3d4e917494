import random

import pytest

from promptarm.textmatch import best_match_window, edit_distance, similarity


def reference_levenshtein(a: str, b: str) -> int:
    """Classic full-table reference implementation."""
    rows = [list(range(len(b) + 1))]
    for i, ca in enumerate(a, 1):
        row = [i]
        for j, cb in enumerate(b, 1):
            row.append(
                min(
                    rows[i - 1][j] + 1,
                    row[j - 1] + 1,
                    rows[i - 1][j - 1] + (ca != cb),
                )
            )
        rows.append(row)
    return rows[-1][-1]


def brute_force_best(quote: str, text: str, slack: float = 0.2):
    """Exhaustive window search used as the oracle for best_match_window."""
    m = len(quote)
    lo = max(1, int(m * (1 - slack)))
    hi = int(-(-m * (1 + slack) // 1))
    best = None
    for start in range(len(text)):
        for length in range(lo, hi + 1):
            end = start + length
            if end > len(text):
                break
            sim = 1 - reference_levenshtein(quote, text[start:end]) / max(m, length)
            if best is None or sim > best[2]:
                best = (start, end, sim)
    return best


class TestEditDistance:
    @pytest.mark.parametrize(
        "a,b,expected",
        [
            ("", "", 0),
            ("abc", "", 3),
            ("", "abc", 3),
            ("kitten", "sitting", 3),
            ("flaw", "lawn", 2),
            ("same", "same", 0),
        ],
    )
    def test_known_pairs(self, a, b, expected):
        assert edit_distance(a, b) == expected

    def test_matches_reference_on_random_strings(self):
        rng = random.Random(3)
        alphabet = "abcde "
        for _ in range(100):
            a = "".join(rng.choice(alphabet) for _ in range(rng.randrange(0, 20)))
            b = "".join(rng.choice(alphabet) for _ in range(rng.randrange(0, 20)))
            assert edit_distance(a, b) == reference_levenshtein(a, b)


class TestSimilarity:
    def test_identical(self):
        assert similarity("abc", "abc") == 1.0

    def test_one_typo_in_sixty(self):
        a = "x" * 60
        b = "y" + "x" * 59
        assert similarity(a, b) == pytest.approx(1 - 1 / 60)


LETTER = (
    "I fully support the effort to make more public lands available for solar"
    " development. Alternative 5 is the most sensible option here. While we may"
    " need to use more of our public lands, the agency should not open lands"
    " that are largely undisturbed. Initial efforts should focus entirely on"
    " lands that are both disturbed and near a power line."
)


class TestBestMatchWindow:
    def test_exact_substring(self):
        quote = "Alternative 5 is the most sensible option here."
        w = best_match_window(quote, LETTER)
        assert w is not None
        assert LETTER[w.start : w.end] == quote
        assert w.similarity == 1.0

    def test_near_match_without_trailing_words(self):
        quote = "Alternative 5 is the most sensible option"
        w = best_match_window(quote, LETTER)
        assert w is not None
        assert w.similarity > 0.9
        assert "Alternative 5" in LETTER[w.start : w.end]

    def test_one_typo_quote_retained(self):
        quote = "Initial efforts should focus entirely on lands that are both disturbed"
        corrupted = quote.replace("entirely", "entirly")
        w = best_match_window(corrupted, LETTER)
        assert w is not None
        assert w.similarity >= 0.95
        # the returned similarity is exact for the returned window
        assert w.similarity == pytest.approx(similarity(corrupted, LETTER[w.start : w.end]))

    def test_unrelated_text_scores_low(self):
        quote = "The committee convened to discuss quarterly budget allocations."
        w = best_match_window(quote, LETTER)
        oracle = brute_force_best(quote, LETTER)
        assert oracle[2] < 0.85
        assert w is None or w.similarity < 0.85

    def test_agrees_with_brute_force_on_small_cases(self):
        rng = random.Random(9)
        text = "the quick brown fox jumps over the lazy dog near the river bank"
        for _ in range(25):
            start = rng.randrange(0, len(text) - 12)
            length = rng.randrange(8, 18)
            quote = text[start : start + length]
            if rng.random() < 0.5:  # inject one typo
                pos = rng.randrange(len(quote))
                quote = quote[:pos] + "#" + quote[pos + 1 :]
            w = best_match_window(quote, text)
            oracle = brute_force_best(quote, text)
            assert w is not None
            assert w.similarity == pytest.approx(oracle[2], abs=1e-12)

    def test_empty_inputs(self):
        assert best_match_window("", "text") is None
        assert best_match_window("quote", "") is None
