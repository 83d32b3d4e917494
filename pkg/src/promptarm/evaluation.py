"""Ground-truth comparison harness and the rare-letters bandit demonstration.

Sentence-level quote precision/recall, per-letter binning recall/precision,
normalized length variability, recall-versus-length curves, and approximate
confusion matrices, all computed with pooled (micro-averaged) aggregates.
Also hosts the desk-scale demonstration of prompt-distribution evolution on
the rare-letters counting task.
"""

from __future__ import annotations

import json
import math
import random
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter1d

from . import bandit
from .backends import (
    BackendError,
    GenerationRequest,
    PoolEntry,
    ScriptedBackend,
    count_rare_letter_words,
    fingerprint,
    serialize_input,
)
from .bandit import EXPLORE, ArmStats, BanditState, BetaSchedule, beta_at
from .schema import (
    FieldSpec,
    IntegerKind,
    Schema,
    SubroutineSpec,
    TextKind,
    emit_constraint_schema,
)

# ---------------------------------------------------------------------------
# Sentence segmentation
# ---------------------------------------------------------------------------

# Trailing tokens that end with '.' but do not terminate a sentence.
ABBREVIATIONS = frozenset(
    {
        "dr", "mr", "mrs", "ms", "prof", "sr", "jr", "st", "no", "vs", "etc",
        "e.g", "i.e", "fig", "al", "inc", "corp", "dept", "approx", "u.s", "d.c",
    }
)

_TERMINALS = ".!?"


@dataclass(frozen=True)
class SentenceSpan:
    letter_id: str
    index: int
    start: int
    end: int


def _is_abbreviation(text: str, dot_index: int) -> bool:
    j = dot_index - 1
    while j >= 0 and not text[j].isspace():
        j -= 1
    token = text[j + 1 : dot_index].lower().rstrip(".")
    return token in ABBREVIATIONS


def split_sentences(text: str, letter_id: str = "") -> list[SentenceSpan]:
    """Deterministic segmentation on terminal punctuation with an
    abbreviation guard; spans cover all non-whitespace text."""
    if not text:
        raise ValueError("text must be nonempty")
    breaks: list[int] = []
    i = 0
    n = len(text)
    while i < n:
        ch = text[i]
        if ch in _TERMINALS:
            # absorb runs like "?!" or "..."
            j = i
            while j + 1 < n and text[j + 1] in _TERMINALS:
                j += 1
            at_end = j + 1 >= n or text[j + 1].isspace()
            if at_end and not (ch == "." and i == j and _is_abbreviation(text, i)):
                breaks.append(j + 1)
            i = j + 1
        else:
            i += 1
    if not breaks or breaks[-1] < n:
        breaks.append(n)
    spans = []
    cursor = 0
    for b in breaks:
        chunk = text[cursor:b]
        stripped = chunk.strip()
        if stripped:
            start = cursor + (len(chunk) - len(chunk.lstrip()))
            end = start + len(stripped)
            spans.append(SentenceSpan(letter_id, len(spans), start, end))
        cursor = b
    return spans


# ---------------------------------------------------------------------------
# Quote metrics
# ---------------------------------------------------------------------------

MEMBERSHIP_FRACTION = 0.5


def _covered_chars(start: int, end: int, spans: Iterable[tuple[int, int]]) -> int:
    length = end - start
    covered = np.zeros(length, dtype=bool)
    for s, e in spans:
        lo = max(s, start)
        hi = min(e, end)
        if lo < hi:
            covered[lo - start : hi - start] = True
    return int(covered.sum())


def sentence_in_selection(
    sentence: SentenceSpan, spans: Iterable[tuple[int, int]]
) -> bool:
    """A sentence belongs to a selection when at least half of its characters
    lie inside the selection's spans (union semantics)."""
    length = sentence.end - sentence.start
    return _covered_chars(sentence.start, sentence.end, spans) >= MEMBERSHIP_FRACTION * length


@dataclass(frozen=True)
class QuoteMetrics:
    precision: float | None
    recall: float | None
    quote_sentences: int
    sme_sentences: int
    shared_sentences: int


def quote_metrics(
    sentences: Sequence[SentenceSpan],
    quote_spans: Iterable[tuple[int, int]],
    sme_spans: Iterable[tuple[int, int]],
) -> QuoteMetrics:
    """Sentence-level precision and recall of system quotes against reviewer
    selections. Undefined ratios (empty conditioning set) come back as None
    and are excluded from aggregates.
    """
    quote_spans = list(quote_spans)
    sme_spans = list(sme_spans)
    in_quotes = in_sme = in_both = 0
    for s in sentences:
        q = sentence_in_selection(s, quote_spans)
        m = sentence_in_selection(s, sme_spans)
        in_quotes += q
        in_sme += m
        in_both += q and m
    precision = in_both / in_quotes if in_quotes else None
    recall = in_both / in_sme if in_sme else None
    return QuoteMetrics(precision, recall, in_quotes, in_sme, in_both)


def binning_metrics(
    sme_bins: set[str], system_bins: set[str]
) -> tuple[float | None, float | None]:
    """Per-letter (recall, precision) of bin identification."""
    shared = len(sme_bins & system_bins)
    recall = shared / len(sme_bins) if sme_bins else None
    precision = shared / len(system_bins) if system_bins else None
    return recall, precision


def length_variability(lengths: Sequence[float]) -> float:
    """Population stdev of lengths over their mean, as a percentage."""
    if len(lengths) < 2:
        raise ValueError("need at least two lengths")
    arr = np.asarray(lengths, dtype=float)
    return float(arr.std() / arr.mean() * 100.0)


def recall_vs_length(
    letter_lengths: Mapping[str, int],
    letter_recall: Mapping[str, float],
    bucket_edges: Sequence[int],
) -> list[dict[str, Any]]:
    """Mean per-letter recall grouped by letter length buckets.

    ``bucket_edges`` are ordered interior edges; bucket i covers
    [edge[i-1], edge[i]). Empty buckets report a None mean.
    """
    edges = list(bucket_edges)
    if edges != sorted(edges):
        raise ValueError("bucket edges must be ordered")
    bounds = [0] + edges + [math.inf]
    out = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        rs = [
            letter_recall[lid]
            for lid, length in letter_lengths.items()
            if lo <= length < hi and lid in letter_recall
        ]
        out.append(
            {
                "lo": lo,
                "hi": hi,
                "letters": len(rs),
                "mean_recall": sum(rs) / len(rs) if rs else None,
            }
        )
    return out


def confusion_counts(
    sentences: Sequence[SentenceSpan],
    sme_labeled: Sequence[tuple[tuple[int, int], str]],
    system_labeled: Sequence[tuple[tuple[int, int], Sequence[str]]],
) -> Counter:
    """Counts over (reviewer bin, system bin) for sentences both sides chose.

    Restricted to sentences selected by the reviewer and quoted by the
    system. Each such sentence counts once per system bin of each concern
    citing it (a sentence quoted by concerns in several bins contributes to
    several cells); its reviewer bin is the label of the covering span with
    the largest overlap.
    """
    counts: Counter = Counter()
    for s in sentences:
        if not sentence_in_selection(s, [sp for sp, _ in sme_labeled]):
            continue
        sme_bin = None
        best_overlap = 0
        for (start, end), label in sme_labeled:
            overlap = min(end, s.end) - max(start, s.start)
            if overlap > best_overlap:
                best_overlap = overlap
                sme_bin = label
        system_bins: set[str] = set()
        cited = False
        for (span, labels) in system_labeled:
            if sentence_in_selection(s, [span]):
                cited = True
                system_bins.update(labels)
        if not cited or sme_bin is None:
            continue
        for b in sorted(system_bins):
            counts[(sme_bin, b)] += 1
    return counts


# ---------------------------------------------------------------------------
# Run evaluation against ground truth
# ---------------------------------------------------------------------------

DEFAULT_BUCKET_EDGES = (500, 1000, 2000, 4000)


def evaluate_run(
    system_report: Mapping[str, Any],
    truth_records: Sequence[Mapping[str, Any]],
    bucket_edges: Sequence[int] = DEFAULT_BUCKET_EDGES,
) -> dict[str, Any]:
    """Compare a run report against reviewer ground truth.

    ``truth_records`` rows carry {letter_id, start, end, bin_name}; every
    span selects reviewer text and maps it to exactly one bin. Aggregates
    pool sentence counts across letters (micro-averaging), not means of
    per-letter rates.
    """
    truth_by_letter: dict[str, list[dict[str, Any]]] = {}
    for r in truth_records:
        truth_by_letter.setdefault(r["letter_id"], []).append(dict(r))

    per_letter: dict[str, dict[str, Any]] = {}
    pooled_quotes = pooled_sme = pooled_shared = 0
    pooled_bin_shared = pooled_bin_sme = pooled_bin_system = 0
    sme_lengths: list[int] = []
    system_lengths: list[int] = []
    letter_lengths: dict[str, int] = {}
    letter_recall: dict[str, float] = {}
    confusion: Counter = Counter()

    for entry in system_report["letters"]:
        letter_id = entry["letter_id"]
        text = entry["text"]
        sentences = split_sentences(text, letter_id)
        quote_spans = [(q["start"], q["end"]) for q in entry["quote_spans"]]
        truth = truth_by_letter.get(letter_id, [])
        sme_spans = [(t["start"], t["end"]) for t in truth]
        qm = quote_metrics(sentences, quote_spans, sme_spans)
        pooled_quotes += qm.quote_sentences
        pooled_sme += qm.sme_sentences
        pooled_shared += qm.shared_sentences
        system_lengths.extend(e - s for s, e in quote_spans)
        sme_lengths.extend(e - s for s, e in sme_spans)

        sme_bins = {t["bin_name"] for t in truth}
        system_bins = set(entry["bins"])
        b_recall, b_precision = binning_metrics(sme_bins, system_bins)
        shared_bins = len(sme_bins & system_bins)
        if sme_bins:
            pooled_bin_shared += shared_bins
            pooled_bin_sme += len(sme_bins)
        if system_bins:
            pooled_bin_system += len(system_bins)

        letter_lengths[letter_id] = len(text)
        if qm.recall is not None:
            letter_recall[letter_id] = qm.recall

        # confusion inputs: system spans labeled with their concern's bins
        system_labeled = _system_labeled_spans(system_report, letter_id)
        sme_labeled = [((t["start"], t["end"]), t["bin_name"]) for t in truth]
        confusion.update(confusion_counts(sentences, sme_labeled, system_labeled))

        per_letter[letter_id] = {
            "precision": qm.precision,
            "recall": qm.recall,
            "binning_recall": b_recall,
            "binning_precision": b_precision,
            "sentences": len(sentences),
        }

    report: dict[str, Any] = {
        "per_letter": per_letter,
        "aggregate": {
            "quote_precision": pooled_shared / pooled_quotes if pooled_quotes else None,
            "quote_recall": pooled_shared / pooled_sme if pooled_sme else None,
            "binning_recall": pooled_bin_shared / pooled_bin_sme if pooled_bin_sme else None,
            "binning_precision": (
                pooled_bin_shared / pooled_bin_system if pooled_bin_system else None
            ),
        },
        "length_variability": {
            "sme_pct": length_variability(sme_lengths) if len(sme_lengths) >= 2 else None,
            "system_pct": length_variability(system_lengths) if len(system_lengths) >= 2 else None,
        },
        "recall_vs_length": recall_vs_length(letter_lengths, letter_recall, bucket_edges),
        "confusion": [
            {"sme_bin": k[0], "system_bin": k[1], "count": v}
            for k, v in sorted(confusion.items())
        ],
    }
    return report


def _system_labeled_spans(
    system_report: Mapping[str, Any], letter_id: str
) -> list[tuple[tuple[int, int], list[str]]]:
    out: list[tuple[tuple[int, int], list[str]]] = []
    for br in system_report.get("batches", []):
        bins_by_concern = {a["concern_id"]: a["bin_names"] for a in br.get("assignments", [])}
        for c in br.get("concerns", []):
            if c["letter_id"] != letter_id:
                continue
            labels = bins_by_concern.get(c["concern_id"], [])
            for q in c["quotes"]:
                out.append(((q["start"], q["end"]), list(labels)))
    return out


def render_eval_report(report: Mapping[str, Any]) -> str:
    agg = report["aggregate"]
    lv = report["length_variability"]

    def pct(x: float | None) -> str:
        return "-" if x is None else f"{100 * x:.1f}%"

    lines = [
        "Evaluation report",
        "=================",
        "",
        "Aggregate (pooled sentence counts across letters):",
        f"  quote precision:   {pct(agg['quote_precision'])}",
        f"  quote recall:      {pct(agg['quote_recall'])}",
        f"  binning recall:    {pct(agg['binning_recall'])}",
        f"  binning precision: {pct(agg['binning_precision'])}",
        "",
        "Normalized length stdev:",
        f"  reviewer comments: {lv['sme_pct']:.1f}%" if lv["sme_pct"] is not None else "  reviewer comments: -",
        f"  system quotes:     {lv['system_pct']:.1f}%" if lv["system_pct"] is not None else "  system quotes:     -",
        "",
        "Recall by letter length:",
    ]
    for b in report["recall_vs_length"]:
        hi = "inf" if b["hi"] == math.inf else int(b["hi"])
        mean = "-" if b["mean_recall"] is None else f"{b['mean_recall']:.2f}"
        lines.append(f"  [{int(b['lo'])}, {hi}): {mean} over {b['letters']} letters")
    lines.append("")
    lines.append("Confusion counts (reviewer bin x system bin):")
    for row in report["confusion"]:
        lines.append(f"  {row['sme_bin']} x {row['system_bin']}: {row['count']}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Rare-letters demonstration
# ---------------------------------------------------------------------------

def _sentence_pool() -> tuple[str, ...]:
    # Every sentence contains at least one word with each rare letter, so the
    # counting task is never degenerate.
    q_words = ("quiz", "quartz", "liquor", "queen", "quilt")
    triples = (
        ("wolves", "boxes", "zebras"),
        ("windows", "taxis", "puzzles"),
        ("waves", "axles", "bronze"),
        ("wagons", "oxen", "zippers"),
        ("willows", "sphinx", "blizzards"),
        ("walnuts", "pixels", "gazebos"),
        ("weavers", "exits", "horizons"),
        ("wrens", "flax", "topaz"),
    )
    templates = (
        "The {q} story mentioned {w}, {x}, and {z} today.",
        "A {q} came with {w} near {x} beside {z}.",
        "Our {q} reporter saw {w} hauling {x} past {z} again.",
    )
    sentences = []
    for i, q in enumerate(q_words):
        for j, (w, x, z) in enumerate(triples):
            for k, template in enumerate(templates):
                sentences.append(template.format(q=q, w=w, x=x, z=z))
    return tuple(sentences)


SENTENCE_POOL = _sentence_pool()


def rare_letters_oracle(text: str) -> int:
    """Ground truth for the demonstration task: words containing Q, W, X, or Z.

    The rare-letter set is configurable through
    :func:`promptarm.backends.count_rare_letter_words`; this default follows
    the demonstration's fixed set.
    """
    return count_rare_letter_words(text)


def rare_letters_subroutine_spec() -> SubroutineSpec:
    return SubroutineSpec(
        name="count_rare_letter_words",
        task_doc="Count the number of words containing rare letters in the given text.",
        input_schema=Schema((FieldSpec("given_text", TextKind(), "The given text"),)),
        output_schema=Schema(
            (
                FieldSpec("scratch_work", TextKind(), "A place for scratch work"),
                FieldSpec("character_count", IntegerKind(), "Number of instances in the text"),
            )
        ),
    )


def demo_backend(error_rates: Sequence[float], seed: int = 0) -> ScriptedBackend:
    pool = [
        PoolEntry(
            preamble=(
                f"You are an expert text analyst (strategy {i + 1}). Count the"
                " number of words that contain rare letters and report the count."
            ),
            error_rate=rate,
            correct_behavior="count_rare_letters",
            incorrect_behavior="miscount_rare_letters",
        )
        for i, rate in enumerate(error_rates)
    ]
    return ScriptedBackend(pools={"count_rare_letter_words": pool}, seed=seed)


@dataclass(frozen=True)
class DemoConfig:
    trials: int = 100
    seed: int = 0
    schedule: BetaSchedule = field(default_factory=BetaSchedule)
    error_rates: tuple[float, ...] = (0.1, 0.5, 0.9)
    request_seed: int = 0
    smoothing_sigma: float = 15.0


@dataclass(frozen=True)
class DemoArm:
    arm_id: str
    prompt: str
    pull_count: int
    mean_loss: float


@dataclass(frozen=True)
class DemoResult:
    losses: list[float]
    selections: list[str]
    smoothed: list[float]
    arms: list[DemoArm]


def gaussian_smooth(values: Sequence[float], sigma: float = 15.0) -> list[float]:
    """Mean-preserving Gaussian smoothing of a discrete loss trace."""
    arr = np.asarray(values, dtype=float)
    return gaussian_filter1d(arr, sigma=sigma, mode="reflect").tolist()


def _conditional_redraw(state: BanditState, rng: random.Random) -> str:
    """Redraw among explored arms with explore mass redistributed
    proportionally (the sampling rule conditioned on not exploring)."""
    dist = bandit.sample_distribution(state)
    del dist[EXPLORE]
    total = sum(dist.values())
    u = rng.random() * total
    acc = 0.0
    for arm_id, p in dist.items():
        acc += p
        if u < acc:
            return arm_id
    return next(reversed(dist))


def rare_letters_demo(config: DemoConfig, backend: ScriptedBackend | None = None) -> DemoResult:
    """Run the counting subroutine under the bandit for ``trials`` trials.

    Each trial draws a sentence from the pool (stratified: the pool is
    reshuffled and cycled so every window of trials sees a balanced mix),
    samples an arm, invokes the backend, and scores loss 0/1 against the
    brute-force oracle; backend failures score 1.0. Exploration synthesizes a
    prompt from the scripted pool; once the configured pool is exhausted an
    exploration draw falls back to the conditional distribution over explored
    arms (there is nothing left to explore in the finite desk-scale universe).
    """
    rng = random.Random(config.seed)
    backend = backend or demo_backend(config.error_rates, seed=config.seed)
    spec = rare_letters_subroutine_spec()
    constraint = emit_constraint_schema(spec.output_schema)
    pool_size = len(config.error_rates)

    state = BanditState("rare_letters_demo", (), 0, 0.0)
    prompts: dict[str, str] = {}
    losses: list[float] = []
    selections: list[str] = []
    sentence_queue: list[str] = []
    synthesized = 0

    for t in range(config.trials):
        if not sentence_queue:
            sentence_queue = list(SENTENCE_POOL)
            rng.shuffle(sentence_queue)
        sentence = sentence_queue.pop()
        state = replace(state, beta=beta_at(config.schedule, t))
        choice = bandit.draw(state, rng)
        new_arm = False
        if choice == EXPLORE:
            if synthesized < pool_size:
                prompt = backend.synthesize_prompt(spec)
                synthesized += 1
                choice = fingerprint(prompt)
                prompts[choice] = prompt
                new_arm = True
            else:
                choice = _conditional_redraw(state, rng)

        user_payload = serialize_input({"given_text": sentence}, ["given_text"])
        request = GenerationRequest(
            prompts[choice], user_payload, constraint, seed=config.request_seed
        )
        try:
            result = backend.generate(request)
            count = json.loads(result.raw_text)["character_count"]
            loss = 0.0 if count == rare_letters_oracle(sentence) else 1.0
        except BackendError:
            loss = 1.0

        if new_arm:
            state = replace(
                state,
                arms=state.arms + (ArmStats(choice, 1, loss),),
                trial_index=state.trial_index + 1,
            )
        else:
            state = bandit.record_loss(state, choice, loss)
        losses.append(loss)
        selections.append(choice)

    arms = [
        DemoArm(a.arm_id, prompts[a.arm_id], a.pull_count, a.mean_loss)
        for a in state.arms
    ]
    return DemoResult(losses, selections, gaussian_smooth(losses, config.smoothing_sigma), arms)
