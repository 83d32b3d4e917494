"""Four-stage public-comment pipeline: summarize, extract concerns and
quotes, bin concerns, summarize bins.

Each stage runs its subroutine inside a self-critique loop. Letters are
processed in batches; arm statistics are frozen per batch (a snapshot taken
when the batch starts), so reviewer feedback collected during review shifts
the prompt distribution of the next batch, never the current one. Stage tasks
are queued durably and their effects commit atomically with the task
acknowledgement, which makes re-execution after a crash effect-free.
"""

from __future__ import annotations

import json
import re
import uuid
from dataclasses import dataclass, field
from typing import Any, Mapping

from .critique import LoopConfig, RatingDimension, derive_critique_spec, self_critique_loop
from .engine import SubroutineEngine, SubroutineHandle
from .schema import (
    EnumKind,
    FieldSpec,
    ListKind,
    RecordKind,
    Schema,
    SubroutineSpec,
    TextKind,
)
from .store import AuditStore
from .taskqueue import Task, TaskQueue, WorkerPool
from .textmatch import DEFAULT_MATCH_THRESHOLD, MatchWindow, best_match_window

STAGES = ("summarize", "extract", "bin", "bin_summary")

DEFAULT_STAGE_DIMS: dict[str, list[RatingDimension]] = {
    "summarize": [RatingDimension("coverage"), RatingDimension("brevity")],
    "extract": [RatingDimension("faithfulness"), RatingDimension("completeness")],
    "bin": [RatingDimension("correctness")],
    "bin_summary": [RatingDimension("coverage"), RatingDimension("citation_quality")],
}


@dataclass(frozen=True)
class Letter:
    letter_id: str
    text: str
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.text:
            raise ValueError("letter text must be nonempty")


@dataclass(frozen=True)
class QuoteSpan:
    raw_quote: str
    start: int
    end: int
    similarity: float


@dataclass(frozen=True)
class Concern:
    concern_id: str
    letter_id: str
    statement: str
    quotes: tuple[QuoteSpan, ...]

    def __post_init__(self) -> None:
        if not self.quotes:
            raise ValueError("a concern requires at least one verified quote")


@dataclass(frozen=True)
class BinDef:
    bin_name: str
    guidance: str = ""


@dataclass(frozen=True)
class BinAssignment:
    concern_id: str
    bin_names: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.bin_names:
            raise ValueError("a concern must map to at least one bin")


@dataclass(frozen=True)
class BinSummary:
    bin_name: str
    summary: str
    citations: tuple[tuple[str, QuoteSpan], ...]


@dataclass
class PipelineConfig:
    bins: list[BinDef]
    project_context: str = ""
    batch_size: int = 100
    concern_batch_size: int = 20
    quote_threshold: float = DEFAULT_MATCH_THRESHOLD
    loop: LoopConfig = field(default_factory=LoopConfig)
    stage_dims: dict[str, list[RatingDimension]] = field(
        default_factory=lambda: {k: list(v) for k, v in DEFAULT_STAGE_DIMS.items()}
    )
    workers: int = 4

    def __post_init__(self) -> None:
        if not self.bins:
            raise ValueError("at least one bin is required")
        names = [b.bin_name for b in self.bins]
        if len(set(names)) != len(names):
            raise ValueError(f"bin names must be distinct: {names}")

    def bin_names(self) -> list[str]:
        return [b.bin_name for b in self.bins]

    def guidance_text(self) -> str:
        lines = []
        for b in self.bins:
            lines.append(f"- {b.bin_name}: {b.guidance}" if b.guidance else f"- {b.bin_name}")
        return "Bins:\n" + "\n".join(lines)


# ---------------------------------------------------------------------------
# Quote verification
# ---------------------------------------------------------------------------

def verify_quote(
    quote: str, letter_text: str, threshold: float = DEFAULT_MATCH_THRESHOLD
) -> QuoteSpan | None:
    """Locate a quote in its source letter, or reject it.

    Finds the source window maximizing normalized edit similarity and accepts
    it only at or above the threshold, so every span that leaves this
    function is re-checkable against the original letter text.
    """
    if not quote:
        raise ValueError("quote must be nonempty")
    window = best_match_window(quote, letter_text)
    if window is None or window.similarity < threshold:
        return None
    return QuoteSpan(quote, window.start, window.end, window.similarity)


def _sanitize_key(text: str) -> str:
    out = re.sub(r"[^A-Za-z0-9_]", "_", text)
    if not out or not re.match(r"[A-Za-z_]", out[0]):
        out = "k_" + out
    return out


def concern_keys(concern_ids: list[str], min_len: int = 8) -> dict[str, str]:
    """Unique, identifier-safe string prefixes keyed back to concern ids.

    Prefixes start at ``min_len`` characters and lengthen until unique. When
    sanitization itself collapses distinct ids (so no prefix length can
    separate them) a counter suffix disambiguates.
    """
    max_len = max((len(cid) for cid in concern_ids), default=0)
    for length in range(min_len, max_len + 1):
        keys = {_sanitize_key(cid[:length]): cid for cid in concern_ids}
        if len(keys) == len(concern_ids):
            return keys
    keys = {}
    seen: dict[str, int] = {}
    for cid in concern_ids:
        base = _sanitize_key(cid)
        n = seen.get(base, 0)
        seen[base] = n + 1
        keys[base if n == 0 else f"{base}_{n}"] = cid
    return keys


# ---------------------------------------------------------------------------
# Stage subroutine declarations
# ---------------------------------------------------------------------------

def summarize_spec(project_context: str) -> SubroutineSpec:
    return SubroutineSpec(
        name="summarize_letter",
        task_doc=(
            "Summarize a letter of public correspondence, distilling its chief"
            " concerns without regard to authorship, tone, or extraneous information."
        ),
        input_schema=Schema((FieldSpec("letter_text", TextKind(), "The full letter text"),)),
        output_schema=Schema((FieldSpec("summary", TextKind(), "Concise summary of the letter's concerns"),)),
        context=project_context or None,
    )


def extract_spec(project_context: str) -> SubroutineSpec:
    concern_record = RecordKind(
        (
            FieldSpec("statement", TextKind(), "The concern articulated in natural language"),
            FieldSpec(
                "quotes",
                ListKind(FieldSpec("quote", TextKind(), "Verbatim quote from the letter")),
                "Supporting quotes copied exactly from the letter",
            ),
        )
    )
    return SubroutineSpec(
        name="extract_concerns",
        task_doc=(
            "Extract the distinct concerns raised by a letter, each supported by"
            " one or more verbatim quotes from the letter."
        ),
        input_schema=Schema(
            (
                FieldSpec("letter_text", TextKind(), "The full letter text"),
                FieldSpec("summary", TextKind(), "A summary of the letter"),
            )
        ),
        output_schema=Schema(
            (FieldSpec("concerns", ListKind(FieldSpec("concern", concern_record)), "All distinct concerns"),)
        ),
        context=project_context or None,
    )


def bin_spec(project_context: str, guidance_text: str) -> SubroutineSpec:
    concern_record = RecordKind(
        (
            FieldSpec("key", TextKind(), "Short key identifying the concern"),
            FieldSpec("statement", TextKind(), "The concern"),
            FieldSpec("quotes", ListKind(FieldSpec("quote", TextKind())), "Supporting quotes"),
        )
    )
    context = (project_context + "\n\n" + guidance_text).strip()
    return SubroutineSpec(
        name="bin_concerns",
        task_doc=(
            "Map each concern in a batch to one or more of the project's bins,"
            " following the binning guidance."
        ),
        input_schema=Schema(
            (FieldSpec("concerns", ListKind(FieldSpec("concern", concern_record)), "The batch of concerns"),)
        ),
        # The concrete assignment keys are supplied per request (one list of
        # bins per concern key); this registration-time shape documents the
        # pattern for the prompt engineer.
        output_schema=Schema(
            (
                FieldSpec(
                    "assignments",
                    RecordKind(()),
                    "One property per concern key, each a nonempty list of bin names",
                ),
            )
        ),
        context=context or None,
    )


def bin_summary_spec(project_context: str, guidance_text: str) -> SubroutineSpec:
    concern_record = RecordKind(
        (
            FieldSpec("letter_id", TextKind(), "The letter the concern came from"),
            FieldSpec("statement", TextKind(), "The concern"),
            FieldSpec("quotes", ListKind(FieldSpec("quote", TextKind())), "Verified quotes"),
        )
    )
    citation_record = RecordKind(
        (
            FieldSpec("letter_id", TextKind(), "Cited letter"),
            FieldSpec("quote", TextKind(), "A verified quote from that letter"),
        )
    )
    context = (project_context + "\n\n" + guidance_text).strip()
    return SubroutineSpec(
        name="summarize_bin",
        task_doc=(
            "Summarize the concerns assigned to one bin, citing the original"
            " correspondence by letter and verified quote."
        ),
        input_schema=Schema(
            (
                FieldSpec("bin_name", TextKind(), "The bin being summarized"),
                FieldSpec("concerns", ListKind(FieldSpec("concern", concern_record)), "Assigned concerns"),
            )
        ),
        output_schema=Schema(
            (
                FieldSpec("summary", TextKind(), "Summary of the bin's concerns"),
                FieldSpec("citations", ListKind(FieldSpec("citation", citation_record)), "Citations"),
            )
        ),
        context=context or None,
    )


def bin_output_schema(keys: list[str], bin_names: list[str]) -> Schema:
    """Per-batch constraint: each concern key maps to a nonempty list of bins."""
    fields = tuple(
        FieldSpec(
            key,
            ListKind(FieldSpec("bin", EnumKind(tuple(bin_names)), "A bin name")),
            "Bins for this concern",
        )
        for key in keys
    )
    return Schema((FieldSpec("assignments", RecordKind(fields), "Assignments by concern key"),))


def citation_output_schema(letter_ids: list[str]) -> Schema:
    citation_record = RecordKind(
        (
            FieldSpec("letter_id", EnumKind(tuple(sorted(set(letter_ids)))), "Cited letter"),
            FieldSpec("quote", TextKind(), "A verified quote from that letter"),
        )
    )
    return Schema(
        (
            FieldSpec("summary", TextKind(), "Summary of the bin's concerns"),
            FieldSpec("citations", ListKind(FieldSpec("citation", citation_record)), "Citations"),
        )
    )


# ---------------------------------------------------------------------------
# Pipeline orchestration
# ---------------------------------------------------------------------------

class PipelineError(Exception):
    pass


class CommentPipeline:
    """Owns the stage subroutines, task handlers, and batch orchestration."""

    def __init__(
        self,
        store: AuditStore,
        engine: SubroutineEngine,
        config: PipelineConfig,
        *,
        queue: TaskQueue | None = None,
    ):
        self.store = store
        self.engine = engine
        self.config = config
        self.queue = queue or TaskQueue(store)
        guidance = config.guidance_text()
        self.targets: dict[str, SubroutineHandle] = {
            "summarize": engine.register(summarize_spec(config.project_context)),
            "extract": engine.register(extract_spec(config.project_context)),
            "bin": engine.register(bin_spec(config.project_context, guidance)),
            "bin_summary": engine.register(bin_summary_spec(config.project_context, guidance)),
        }
        self.critiques: dict[str, SubroutineHandle] = {}
        for stage, handle in self.targets.items():
            crit_spec = derive_critique_spec(handle.spec, config.stage_dims[stage])
            self.critiques[stage] = engine.register(crit_spec, critique_of=handle.subroutine_id)
        self.handlers = {
            "summarize": self._handle_summarize,
            "extract": self._handle_extract,
            "bin": self._handle_bin,
            "bin_summary": self._handle_bin_summary,
        }

    def stage_subroutine_ids(self) -> list[str]:
        ids = [h.subroutine_id for h in self.targets.values()]
        ids += [h.subroutine_id for h in self.critiques.values()]
        return ids

    def dims_for_stage(self, stage: str) -> list[RatingDimension]:
        return self.config.stage_dims[stage]

    # -- run/batch setup ---------------------------------------------------------

    def ingest(self, letters: list[Letter]) -> dict[str, str]:
        """Idempotently persist letters with their ingest invocations."""
        ingest_ids: dict[str, str] = {}
        for letter in letters:
            with self.store.transaction():
                self.store.upsert_letter(letter.letter_id, letter.text, letter.metadata)
                row = self.store.get_letter(letter.letter_id)
                if row["ingest_invocation_id"] is None:
                    inv = self.engine.ingest_invocation(
                        {"letter_id": letter.letter_id, "metadata": letter.metadata},
                        {"letter_id": letter.letter_id},
                        item_key=letter.letter_id,
                    )
                    self.store.set_letter_ingest(letter.letter_id, inv.invocation_id)
                    ingest_ids[letter.letter_id] = inv.invocation_id
                else:
                    ingest_ids[letter.letter_id] = row["ingest_invocation_id"]
        return ingest_ids

    def setup_run(self, letters: list[Letter], run_id: str) -> list[str]:
        """Ingest the corpus and create its batches; safe to re-run."""
        if not letters:
            raise PipelineError("corpus is empty")
        self.ingest(letters)
        size = self.config.batch_size
        batch_ids = []
        for position, start in enumerate(range(0, len(letters), size)):
            chunk = letters[start : start + size]
            batch_id = f"{run_id}-b{position:03d}"
            self.store.create_batch(batch_id, run_id, position, [l.letter_id for l in chunk])
            batch_ids.append(batch_id)
        return batch_ids

    def process_batch(self, batch_id: str) -> None:
        """Drive one batch to the reviewable state.

        The arm snapshot is taken once (first call wins, surviving restarts),
        stage-1 tasks are enqueued for every letter, and workers drain the
        queue until the batch barrier is met.
        """
        batch = self.store.get_batch(batch_id)
        letter_ids = json.loads(batch["letter_ids_json"])
        if not self.store.has_snapshot(batch_id):
            self.store.snapshot_arms(batch_id, self.stage_subroutine_ids())
        for letter_id in letter_ids:
            self.queue.enqueue(
                "summarize",
                {"batch_id": batch_id, "stage": "summarize", "item_key": letter_id, "letter_id": letter_id},
                f"{batch_id}:summarize:{letter_id}",
            )
        pool = WorkerPool(self.queue, self.handlers, size=self.config.workers)
        pool.drain(until=lambda: self._sweep_and_check(batch_id))
        if batch["state"] != "reviewable":
            self.store.set_batch_state(batch_id, "reviewable")

    def _sweep_and_check(self, batch_id: str) -> bool:
        """Idle-time barrier sweep: dead tasks spawn no successors, so the
        next stage is (idempotently) enqueued here when its inputs settle."""
        self._maybe_enqueue_bins(batch_id)
        self._maybe_enqueue_bin_summaries(batch_id)
        return self._batch_complete(batch_id)

    def run(self, letters: list[Letter], run_id: str) -> list[str]:
        """Process the whole corpus batch by batch; returns the batch ids."""
        batch_ids = self.setup_run(letters, run_id)
        for batch_id in batch_ids:
            self.process_batch(batch_id)
        return batch_ids

    # -- barriers -------------------------------------------------------------------

    def _task_dead(self, batch_id: str, stage: str, item_key: str) -> bool:
        row = self.store._conn().execute(
            "SELECT state FROM tasks WHERE idempotency_key = ?",
            (f"{batch_id}:{stage}:{item_key}",),
        ).fetchone()
        return row is not None and row["state"] == "dead"

    def _items_terminal(self, batch_id: str, stage: str, keys: list[str]) -> bool:
        for key in keys:
            if self.store.get_stage_output(batch_id, stage, key) is None and not self._task_dead(
                batch_id, stage, key
            ):
                return False
        return True

    _PER_LETTER_STAGES = ("summarize", "extract")

    def _letter_stage_terminal(self, batch_id: str, stage: str, letter_id: str) -> bool:
        """A letter's stage is settled when it has an output or when the
        stage's task, or any earlier per-letter stage's task, is dead (a dead
        upstream task means this stage's task will never exist)."""
        if self.store.get_stage_output(batch_id, stage, letter_id) is not None:
            return True
        upto = self._PER_LETTER_STAGES.index(stage) + 1
        return any(
            self._task_dead(batch_id, s, letter_id) for s in self._PER_LETTER_STAGES[:upto]
        )

    def _letters_terminal(self, batch_id: str, stage: str) -> bool:
        return all(
            self._letter_stage_terminal(batch_id, stage, lid)
            for lid in self._letter_ids(batch_id)
        )

    def _letter_ids(self, batch_id: str) -> list[str]:
        return json.loads(self.store.get_batch(batch_id)["letter_ids_json"])

    def _chunk_keys(self, batch_id: str) -> list[str]:
        concerns = self._batch_concerns(batch_id)
        n_chunks = (len(concerns) + self.config.concern_batch_size - 1) // max(
            self.config.concern_batch_size, 1
        )
        return [f"chunk-{i:03d}" for i in range(n_chunks)]

    def _bin_keys(self, batch_id: str) -> list[str]:
        return sorted(self._assignments_by_bin(batch_id))

    def _batch_complete(self, batch_id: str) -> bool:
        if not self._letters_terminal(batch_id, "summarize"):
            return False
        if not self._letters_terminal(batch_id, "extract"):
            return False
        if not self._items_terminal(batch_id, "bin", self._chunk_keys(batch_id)):
            return False
        return self._items_terminal(batch_id, "bin_summary", self._bin_keys(batch_id))

    # -- shared lookups ----------------------------------------------------------------

    def _batch_concerns(self, batch_id: str) -> list[dict[str, Any]]:
        """All extracted concerns of a batch, in letter-then-index order."""
        out: list[dict[str, Any]] = []
        for letter_id in self._letter_ids(batch_id):
            payload = self.store.get_stage_output(batch_id, "extract", letter_id)
            if payload:
                out.extend(payload["concerns"])
        return out

    def _assignments_by_bin(self, batch_id: str) -> dict[str, list[str]]:
        """bin name -> concern ids, from completed bin-stage outputs."""
        by_bin: dict[str, list[str]] = {}
        for key in self._chunk_keys(batch_id):
            payload = self.store.get_stage_output(batch_id, "bin", key)
            if not payload:
                continue
            for a in payload["assignments"]:
                for bin_name in a["bin_names"]:
                    by_bin.setdefault(bin_name, []).append(a["concern_id"])
        return by_bin

    def _ingest_id(self, letter_id: str) -> str:
        row = self.store.get_letter(letter_id)
        if row["ingest_invocation_id"] is None:
            raise PipelineError(f"letter {letter_id} was never ingested")
        return row["ingest_invocation_id"]

    # -- stage handlers -----------------------------------------------------------------

    def _handle_summarize(self, task: Task) -> None:
        batch_id, letter_id = task.payload["batch_id"], task.payload["letter_id"]
        if self.store.get_stage_output(batch_id, "summarize", letter_id) is None:
            letter = self.store.get_letter(letter_id)
            output, trace = self_critique_loop(
                self.engine,
                self.targets["summarize"],
                self.critiques["summarize"],
                {"letter_text": letter["text"]},
                [self._ingest_id(letter_id)],
                self.config.loop,
                batch_id=batch_id,
                stage="summarize",
                item_key=letter_id,
            )
            if output is None:
                raise PipelineError(f"summarize loop failed for {letter_id}")
            selected = trace.iterations[trace.selected_index - 1] if trace.iterations else None
            self.store.record_stage_output(
                batch_id,
                "summarize",
                letter_id,
                selected.candidate_invocation_id if selected else None,
                {
                    "letter_id": letter_id,
                    "summary": output["summary"],
                    "loop": _trace_json(trace),
                },
            )
        self.queue.enqueue(
            "extract",
            {"batch_id": batch_id, "stage": "extract", "item_key": letter_id, "letter_id": letter_id},
            f"{batch_id}:extract:{letter_id}",
        )

    def _handle_extract(self, task: Task) -> None:
        batch_id, letter_id = task.payload["batch_id"], task.payload["letter_id"]
        if self.store.get_stage_output(batch_id, "extract", letter_id) is None:
            letter = self.store.get_letter(letter_id)
            summary_out = self.store.get_stage_output(batch_id, "summarize", letter_id)
            if summary_out is None:
                raise PipelineError(f"summary missing for {letter_id}")
            summary_inv = self.store.stage_outputs(batch_id, "summarize")
            parent_ids = [
                r["invocation_id"]
                for r in summary_inv
                if r["item_key"] == letter_id and r["invocation_id"]
            ]
            output, trace = self_critique_loop(
                self.engine,
                self.targets["extract"],
                self.critiques["extract"],
                {"letter_text": letter["text"], "summary": summary_out["summary"]},
                parent_ids or [self._ingest_id(letter_id)],
                self.config.loop,
                batch_id=batch_id,
                stage="extract",
                item_key=letter_id,
            )
            if output is None:
                raise PipelineError(f"extract loop failed for {letter_id}")
            selected = trace.iterations[trace.selected_index - 1] if trace.iterations else None
            concerns = self._verify_concerns(
                letter_id,
                letter["text"],
                output["concerns"],
                selected.candidate_invocation_id if selected else None,
                batch_id,
            )
            self.store.record_stage_output(
                batch_id,
                "extract",
                letter_id,
                selected.candidate_invocation_id if selected else None,
                {"letter_id": letter_id, "concerns": concerns, "loop": _trace_json(trace)},
            )
        self._maybe_enqueue_bins(batch_id)

    def _verify_concerns(
        self,
        letter_id: str,
        letter_text: str,
        raw_concerns: list[dict[str, Any]],
        invocation_id: str | None,
        batch_id: str,
    ) -> list[dict[str, Any]]:
        """Fuzzy-verify every quote; drop concerns with no surviving quote."""
        verified: list[dict[str, Any]] = []
        for i, rc in enumerate(raw_concerns):
            spans = []
            for quote in rc["quotes"]:
                span = verify_quote(quote, letter_text, self.config.quote_threshold)
                if span is None:
                    self.store.record_event(
                        "quote_verification_failed",
                        json.dumps({"letter_id": letter_id, "quote": quote}),
                        invocation_id=invocation_id,
                        batch_id=batch_id,
                    )
                else:
                    spans.append(
                        {
                            "raw_quote": span.raw_quote,
                            "start": span.start,
                            "end": span.end,
                            "similarity": span.similarity,
                        }
                    )
            if spans:
                verified.append(
                    {
                        "concern_id": f"{letter_id}-c{i}",
                        "letter_id": letter_id,
                        "statement": rc["statement"],
                        "quotes": spans,
                    }
                )
            else:
                self.store.record_event(
                    "concern_dropped",
                    json.dumps({"letter_id": letter_id, "statement": rc["statement"]}),
                    invocation_id=invocation_id,
                    batch_id=batch_id,
                )
        return verified

    def _maybe_enqueue_bins(self, batch_id: str) -> None:
        if not self._letters_terminal(batch_id, "extract"):
            return
        concerns = self._batch_concerns(batch_id)
        size = max(self.config.concern_batch_size, 1)
        for i in range(0, max(len(concerns), 0), size):
            chunk = concerns[i : i + size]
            key = f"chunk-{i // size:03d}"
            self.queue.enqueue(
                "bin",
                {
                    "batch_id": batch_id,
                    "stage": "bin",
                    "item_key": key,
                    "concern_ids": [c["concern_id"] for c in chunk],
                },
                f"{batch_id}:bin:{key}",
            )
        if not concerns:
            self._maybe_enqueue_bin_summaries(batch_id)

    def _handle_bin(self, task: Task) -> None:
        batch_id, key = task.payload["batch_id"], task.payload["item_key"]
        if self.store.get_stage_output(batch_id, "bin", key) is None:
            concerns = {
                c["concern_id"]: c
                for c in self._batch_concerns(batch_id)
                if c["concern_id"] in set(task.payload["concern_ids"])
            }
            ordered_ids = [cid for cid in task.payload["concern_ids"] if cid in concerns]
            keys = concern_keys(ordered_ids)
            key_by_cid = {cid: k for k, cid in keys.items()}
            schema = bin_output_schema([key_by_cid[cid] for cid in ordered_ids], self.config.bin_names())
            input_record = {
                "concerns": [
                    {
                        "key": key_by_cid[cid],
                        "statement": concerns[cid]["statement"],
                        "quotes": [q["raw_quote"] for q in concerns[cid]["quotes"]],
                    }
                    for cid in ordered_ids
                ]
            }
            parent_ids = self._extract_invocation_ids(batch_id, ordered_ids)
            output, trace = self_critique_loop(
                self.engine,
                self.targets["bin"],
                self.critiques["bin"],
                input_record,
                parent_ids,
                self.config.loop,
                output_schema=schema,
                batch_id=batch_id,
                stage="bin",
                item_key=key,
            )
            if output is None:
                raise PipelineError(f"bin loop failed for {key}")
            assignments = []
            for k, cid in keys.items():
                bins = output["assignments"][k]
                if not bins:
                    raise PipelineError(f"concern {cid} received no bins")
                assignments.append({"concern_id": cid, "bin_names": sorted(set(bins))})
            assignments.sort(key=lambda a: ordered_ids.index(a["concern_id"]))
            selected = trace.iterations[trace.selected_index - 1] if trace.iterations else None
            self.store.record_stage_output(
                batch_id,
                "bin",
                key,
                selected.candidate_invocation_id if selected else None,
                {"assignments": assignments, "loop": _trace_json(trace)},
            )
        self._maybe_enqueue_bin_summaries(batch_id)

    def _extract_invocation_ids(self, batch_id: str, concern_ids: list[str]) -> list[str]:
        letter_ids = {cid.rsplit("-c", 1)[0] for cid in concern_ids}
        out = []
        for r in self.store.stage_outputs(batch_id, "extract"):
            if r["item_key"] in letter_ids and r["invocation_id"]:
                out.append(r["invocation_id"])
        return out

    def _maybe_enqueue_bin_summaries(self, batch_id: str) -> None:
        if not self._items_terminal(batch_id, "bin", self._chunk_keys(batch_id)):
            return
        for bin_name, concern_ids in sorted(self._assignments_by_bin(batch_id).items()):
            self.queue.enqueue(
                "bin_summary",
                {
                    "batch_id": batch_id,
                    "stage": "bin_summary",
                    "item_key": bin_name,
                    "bin_name": bin_name,
                    "concern_ids": concern_ids,
                },
                f"{batch_id}:bin_summary:{bin_name}",
            )

    def _handle_bin_summary(self, task: Task) -> None:
        batch_id, bin_name = task.payload["batch_id"], task.payload["bin_name"]
        if self.store.get_stage_output(batch_id, "bin_summary", bin_name) is not None:
            return
        concern_ids = set(task.payload["concern_ids"])
        concerns = [c for c in self._batch_concerns(batch_id) if c["concern_id"] in concern_ids]
        if not concerns:
            return
        letter_ids = sorted({c["letter_id"] for c in concerns})
        input_record = {
            "bin_name": bin_name,
            "concerns": [
                {
                    "letter_id": c["letter_id"],
                    "statement": c["statement"],
                    "quotes": [q["raw_quote"] for q in c["quotes"]],
                }
                for c in concerns
            ],
        }
        # Parent edges: the bin-stage invocations covering these concerns.
        parent_ids = []
        for r in self.store.stage_outputs(batch_id, "bin"):
            payload = json.loads(r["payload_json"])
            if r["invocation_id"] and any(
                a["concern_id"] in concern_ids for a in payload["assignments"]
            ):
                parent_ids.append(r["invocation_id"])
        output, trace = self_critique_loop(
            self.engine,
            self.targets["bin_summary"],
            self.critiques["bin_summary"],
            input_record,
            parent_ids,
            self.config.loop,
            output_schema=citation_output_schema(letter_ids),
            batch_id=batch_id,
            stage="bin_summary",
            item_key=bin_name,
        )
        if output is None:
            raise PipelineError(f"bin summary loop failed for {bin_name}")
        selected = trace.iterations[trace.selected_index - 1] if trace.iterations else None
        selected_id = selected.candidate_invocation_id if selected else None
        citations, rejected = self._check_citations(output["citations"], concerns)
        for detail in rejected:
            self.store.record_event("citation_rejected", detail, selected_id, batch_id)
        if not citations:
            err = PipelineError(f"no valid citations for bin {bin_name}")
            # surfaced after the task transaction rolls back
            err.audit_events = [
                ("citation_rejected", d, selected_id, batch_id) for d in rejected
            ]
            raise err
        self.store.record_stage_output(
            batch_id,
            "bin_summary",
            bin_name,
            selected_id,
            {
                "bin_name": bin_name,
                "summary": output["summary"],
                "citations": citations,
                "loop": _trace_json(trace),
            },
        )

    def _check_citations(
        self,
        raw_citations: list[dict[str, str]],
        concerns: list[dict[str, Any]],
    ) -> tuple[list[dict[str, Any]], list[str]]:
        """Split citations into those matching a verified span of an assigned
        letter and the rejects (as event detail strings)."""
        spans: dict[tuple[str, str], dict[str, Any]] = {}
        for c in concerns:
            for q in c["quotes"]:
                spans[(c["letter_id"], q["raw_quote"])] = q
        valid, rejected = [], []
        for cit in raw_citations:
            span = spans.get((cit["letter_id"], cit["quote"]))
            if span is None:
                rejected.append(json.dumps(cit))
            else:
                valid.append({"letter_id": cit["letter_id"], "span": span})
        return valid, rejected

    # -- reporting ---------------------------------------------------------------------

    def batch_report(self, batch_id: str) -> dict[str, Any]:
        batch = self.store.get_batch(batch_id)
        letters = self._letter_ids(batch_id)
        report: dict[str, Any] = {
            "batch_id": batch_id,
            "state": batch["state"],
            "letters": letters,
            "summaries": {},
            "concerns": [],
            "assignments": [],
            "bin_summaries": [],
            "failures": [],
        }
        for r in self.store.stage_outputs(batch_id, "summarize"):
            payload = json.loads(r["payload_json"])
            report["summaries"][r["item_key"]] = payload["summary"]
        report["concerns"] = self._batch_concerns(batch_id)
        for key in self._chunk_keys(batch_id):
            payload = self.store.get_stage_output(batch_id, "bin", key)
            if payload:
                report["assignments"].extend(payload["assignments"])
        for r in self.store.stage_outputs(batch_id, "bin_summary"):
            payload = json.loads(r["payload_json"])
            report["bin_summaries"].append(payload)
        for stage in STAGES:
            for item in self.store.list_review_items(batch_id, stage):
                if item["status"] == "failed":
                    report["failures"].append(
                        {"stage": stage, "item_key": item["item_key"], "reason": item.get("reason")}
                    )
        return report

    def run_report(self, run_id: str) -> dict[str, Any]:
        """Self-contained system-output document for a run (evaluator input)."""
        batches = self.store.list_batches(run_id)
        letters: dict[str, dict[str, Any]] = {}
        batch_reports = []
        for b in batches:
            br = self.batch_report(b["batch_id"])
            batch_reports.append(br)
            for letter_id in br["letters"]:
                row = self.store.get_letter(letter_id)
                entry = letters.setdefault(
                    letter_id,
                    {"letter_id": letter_id, "text": row["text"], "quote_spans": [], "bins": []},
                )
            bins_by_concern: dict[str, list[str]] = {
                a["concern_id"]: a["bin_names"] for a in br["assignments"]
            }
            for c in br["concerns"]:
                entry = letters[c["letter_id"]]
                for q in c["quotes"]:
                    entry["quote_spans"].append({"start": q["start"], "end": q["end"]})
                for bin_name in bins_by_concern.get(c["concern_id"], []):
                    if bin_name not in entry["bins"]:
                        entry["bins"].append(bin_name)
        return {
            "run_id": run_id,
            "letters": list(letters.values()),
            "batches": batch_reports,
        }


def _trace_json(trace: Any) -> dict[str, Any]:
    return {
        "iterations": [
            {
                "candidate": it.candidate_invocation_id,
                "critique": it.critique_invocation_id,
                "derived_loss": it.derived_loss,
            }
            for it in trace.iterations
        ],
        "selected_index": trace.selected_index,
        "exit_reason": trace.exit_reason,
    }


def render_report(report: dict[str, Any]) -> str:
    """Human-readable rendering of a run report."""
    lines = [f"Run {report['run_id']}", "=" * (4 + len(report["run_id"])), ""]
    for br in report["batches"]:
        lines.append(f"Batch {br['batch_id']} ({br['state']}), {len(br['letters'])} letters")
        for bs in br["bin_summaries"]:
            lines.append(f"  [{bs['bin_name']}] {bs['summary']}")
            for cit in bs["citations"]:
                quote = cit["span"]["raw_quote"]
                lines.append(f"    - {cit['letter_id']}: \"{quote}\"")
        if br["failures"]:
            lines.append("  Failures:")
            for f in br["failures"]:
                lines.append(f"    - {f['stage']}/{f['item_key']}")
        lines.append("")
    return "\n".join(lines)
