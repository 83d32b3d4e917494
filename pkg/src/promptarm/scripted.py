"""Scripted stand-ins for the four pipeline stages.

These generators give desk-scale runs and tests deterministic, schema-exact
outputs: summaries and concerns derive mechanically from the letter text,
binning reads the allowed bins straight out of the constraint document, and
bin summaries cite the quotes they were handed. Error-mode variants exercise
the verification and retry paths.
"""

from __future__ import annotations

from typing import Any

from .backends import BehaviorContext, PoolEntry, ScriptedBackend, register_behavior
from .evaluation import split_sentences


def _sentences(text: str, limit: int) -> list[str]:
    spans = split_sentences(text)
    return [text[s.start : s.end] for s in spans[:limit]]


@register_behavior("summarize_leading")
def _summarize_leading(ctx: BehaviorContext) -> dict[str, Any]:
    text = ctx.fields.get("letter_text", "")
    lead = " ".join(_sentences(text, 2))
    return {"summary": f"The letter argues: {lead}"}


@register_behavior("summarize_vacuous")
def _summarize_vacuous(ctx: BehaviorContext) -> dict[str, Any]:
    return {"summary": "This letter raises no concerns."}


@register_behavior("extract_leading_concerns")
def _extract_leading_concerns(ctx: BehaviorContext) -> dict[str, Any]:
    """Two concerns quoting the letter's leading sentences verbatim."""
    text = ctx.fields.get("letter_text", "")
    sentences = _sentences(text, 4)
    concerns = []
    for i in range(0, len(sentences), 2):
        chunk = sentences[i : i + 2]
        concerns.append(
            {"statement": f"Concern about: {chunk[0][:60]}", "quotes": chunk}
        )
    return {"concerns": concerns[:2]}


@register_behavior("extract_with_fabricated_quote")
def _extract_with_fabricated(ctx: BehaviorContext) -> dict[str, Any]:
    """One real concern plus one whose only quote is invented."""
    text = ctx.fields.get("letter_text", "")
    sentences = _sentences(text, 1)
    return {
        "concerns": [
            {"statement": "Real concern", "quotes": sentences},
            {
                "statement": "Fabricated concern",
                "quotes": ["The committee unanimously praised the proposal's elegance."],
            },
        ]
    }


@register_behavior("bin_first_allowed")
def _bin_first_allowed(ctx: BehaviorContext) -> dict[str, Any]:
    """Assign every concern key its first allowed bin, read from the constraint."""
    assignments_node = ctx.constraint["properties"]["assignments"]
    out = {}
    for key, node in assignments_node["properties"].items():
        allowed = node["items"]["enum"]
        out[key] = [allowed[0]]
    return {"assignments": out}


@register_behavior("bin_spread")
def _bin_spread(ctx: BehaviorContext) -> dict[str, Any]:
    """Deterministically spread concerns across the allowed bins."""
    assignments_node = ctx.constraint["properties"]["assignments"]
    out = {}
    for i, (key, node) in enumerate(assignments_node["properties"].items()):
        allowed = node["items"]["enum"]
        out[key] = [allowed[i % len(allowed)]]
    return {"assignments": out}


@register_behavior("bin_unknown_once")
def _bin_unknown_once(ctx: BehaviorContext) -> dict[str, Any]:
    """Emits an unknown bin name on the first attempt, then behaves.

    Exercises the constraint-violation retry path end to end.
    """
    if ctx.attempt == 0:
        assignments_node = ctx.constraint["properties"]["assignments"]
        return {
            "assignments": {k: ["no-such-bin"] for k in assignments_node["properties"]}
        }
    return _bin_first_allowed(ctx)


@register_behavior("bin_summary_cite_quotes")
def _bin_summary_cite_quotes(ctx: BehaviorContext) -> dict[str, Any]:
    concerns = ctx.fields.get("concerns", [])
    bin_name = ctx.fields.get("bin_name", "")
    citations = []
    for c in concerns:
        if c["quotes"]:
            citations.append({"letter_id": c["letter_id"], "quote": c["quotes"][0]})
    statements = "; ".join(c["statement"] for c in concerns)
    return {"summary": f"Concerns in {bin_name}: {statements}", "citations": citations}


@register_behavior("bin_summary_bad_citation")
def _bin_summary_bad_citation(ctx: BehaviorContext) -> dict[str, Any]:
    """Cites an assigned letter but with a quote that was never verified."""
    concerns = ctx.fields.get("concerns", [])
    letter = concerns[0]["letter_id"] if concerns else "unknown"
    return {
        "summary": "Summary with an unusable citation.",
        "citations": [{"letter_id": letter, "quote": "A quote nobody ever wrote."}],
    }


STAGE_BEHAVIORS = {
    "summarize_letter": ("summarize_leading", "summarize_vacuous"),
    "extract_concerns": ("extract_leading_concerns", "extract_with_fabricated_quote"),
    "bin_concerns": ("bin_first_allowed", "bin_unknown_once"),
    "summarize_bin": ("bin_summary_cite_quotes", "bin_summary_bad_citation"),
}


def scripted_pipeline_backend(
    *,
    error_rates: dict[str, float] | None = None,
    critique_rating: int = 10,
    overrides: dict[str, tuple[str, str]] | None = None,
    pool_sizes: int = 1,
    seed: int = 0,
) -> ScriptedBackend:
    """Scripted backend covering all four stages and their critiques.

    By default every stage behaves perfectly and critiques rate everything at
    the top of the scale, so loops exit on the first iteration and end-to-end
    runs are fast and deterministic. ``error_rates`` (by subroutine name) and
    ``overrides`` (behavior pairs by subroutine name) shape failure-mode
    tests.
    """
    error_rates = error_rates or {}
    overrides = overrides or {}
    pools: dict[str, list[PoolEntry]] = {}
    for name, (correct, incorrect) in STAGE_BEHAVIORS.items():
        correct, incorrect = overrides.get(name, (correct, incorrect))
        pools[name] = [
            PoolEntry(
                preamble=f"You perform the {name} task (strategy {i + 1}).",
                error_rate=error_rates.get(name, 0.0),
                correct_behavior=correct,
                incorrect_behavior=incorrect,
            )
            for i in range(pool_sizes)
        ]
        pools[f"{name}_critique"] = [
            PoolEntry(
                preamble=f"You rate {name} outputs (strategy {i + 1}).",
                error_rate=0.0,
                correct_behavior=f"constant_rating:{critique_rating}",
                incorrect_behavior="echo_empty",
            )
            for i in range(pool_sizes)
        ]
    return ScriptedBackend(pools=pools, seed=seed)
