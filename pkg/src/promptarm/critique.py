"""Critique subroutines, the self-critique loop, and feedback propagation.

A critique subroutine is derived mechanically from its target: it receives
the target's input-output pair and returns an explanation plus one bounded
integer rating per configured dimension. Ratings map linearly onto a scalar
loss in [0, 1]. Reviewer ratings use the same instruments, so the reviewer
loss and the critique-derived loss share a scale by construction, and the
critique arm is scored by the squared difference between the two.
"""

from __future__ import annotations

import json
import uuid
from dataclasses import dataclass
from typing import Any, Mapping

from .engine import SubroutineEngine, SubroutineHandle
from .schema import (
    BoundedIntKind,
    FieldSpec,
    Schema,
    SchemaError,
    SubroutineSpec,
    TextKind,
)
from .store import AuditStore, FeedbackRecord, InvocationRecord, UnknownIdError


@dataclass(frozen=True)
class RatingDimension:
    name: str
    lo: int = 1
    hi: int = 10

    def __post_init__(self) -> None:
        if self.lo >= self.hi:
            raise ValueError(f"rating dimension requires lo < hi, got ({self.lo}, {self.hi})")


@dataclass(frozen=True)
class CritiqueResult:
    explanation: str
    ratings: dict[str, int]
    derived_loss: float


@dataclass(frozen=True)
class LoopIteration:
    candidate_invocation_id: str
    critique_invocation_id: str | None
    derived_loss: float


@dataclass(frozen=True)
class LoopTrace:
    """Record of one self-critique loop.

    ``selected_index`` is the 1-based iteration number of the minimal
    derived-loss candidate.
    """

    iterations: tuple[LoopIteration, ...]
    selected_index: int
    exit_reason: str  # max_iters | no_improvement | threshold_met | error


@dataclass(frozen=True)
class LoopConfig:
    max_iters: int = 3
    loss_threshold: float = 0.1


INPUT_NS = "input_"
OUTPUT_NS = "output_"


def critique_input(input_record: Mapping[str, Any], output_record: Mapping[str, Any]) -> dict[str, Any]:
    """Pack a target input-output pair into a critique input record."""
    packed = {f"{INPUT_NS}{k}": v for k, v in input_record.items()}
    packed.update({f"{OUTPUT_NS}{k}": v for k, v in output_record.items()})
    return packed


def derive_critique_spec(target: SubroutineSpec, dims: list[RatingDimension]) -> SubroutineSpec:
    """Build the critique declaration for a target subroutine.

    The critique's input is the target's input-output pair, namespaced by
    field-name prefixes (which preserves the target schemas' nesting depth);
    its output is an explanation plus one bounded-integer rating per
    dimension.
    """
    if not dims:
        raise SchemaError("at least one rating dimension is required")
    names = [d.name for d in dims]
    if len(set(names)) != len(names):
        raise SchemaError(f"duplicate rating dimensions: {names}")
    if "explanation" in names:
        raise SchemaError('rating dimension may not be named "explanation"')
    input_fields = [
        FieldSpec(f"{INPUT_NS}{f.name}", f.kind, f"Target subroutine input: {f.doc or f.name}")
        for f in target.input_schema.fields
    ]
    input_fields += [
        FieldSpec(f"{OUTPUT_NS}{f.name}", f.kind, f"Target subroutine output: {f.doc or f.name}")
        for f in target.output_schema.fields
    ]
    output_fields = [FieldSpec("explanation", TextKind(), "Justification for the ratings")]
    for d in dims:
        output_fields.append(
            FieldSpec(d.name, BoundedIntKind(d.lo, d.hi), f"{d.name} rating from {d.lo} to {d.hi}")
        )
    return SubroutineSpec(
        name=f"{target.name}_critique",
        task_doc=(
            f"Rate the quality of an output produced by the {target.name} subroutine"
            " for the given input, along each rating dimension."
        ),
        input_schema=Schema(tuple(input_fields)),
        output_schema=Schema(tuple(output_fields)),
        context=target.context,
    )


def rating_to_loss(ratings: Mapping[str, int], dims: list[RatingDimension]) -> float:
    """Linear map from ratings to a loss in [0, 1]: best rating is 0 loss."""
    total = 0.0
    for d in dims:
        r = ratings[d.name]
        if not (d.lo <= r <= d.hi):
            raise ValueError(f"rating {d.name}={r} out of bounds [{d.lo}, {d.hi}]")
        total += (d.hi - r) / (d.hi - d.lo)
    return total / len(dims)


def critique_loss(sme_loss: float, critique_derived_loss: float) -> float:
    """Squared disagreement between a reviewer's loss and the critique's."""
    for v in (sme_loss, critique_derived_loss):
        if not (0.0 <= v <= 1.0):
            raise ValueError(f"losses must lie in [0, 1], got {v}")
    return (sme_loss - critique_derived_loss) ** 2


def dims_from_schema(output_schema: Schema) -> list[RatingDimension]:
    """Recover the rating dimensions from a critique output schema."""
    return [
        RatingDimension(f.name, f.kind.lo, f.kind.hi)
        for f in output_schema.fields
        if isinstance(f.kind, BoundedIntKind)
    ]


def critique_result(invocation: InvocationRecord, dims: list[RatingDimension]) -> CritiqueResult:
    """Interpret a critique invocation's output payload."""
    out = invocation.output_payload or {}
    ratings = {d.name: out[d.name] for d in dims}
    return CritiqueResult(out.get("explanation", ""), ratings, rating_to_loss(ratings, dims))


def _revision_context(iteration: int, candidate: Mapping[str, Any], crit: CritiqueResult) -> str:
    return (
        f"Revision round {iteration}. Your previous attempt and its critique follow;"
        " produce an improved output.\n"
        f"Previous output:\n{json.dumps(candidate, indent=2)}\n"
        f"Critique (ratings {crit.ratings}): {crit.explanation}"
    )


def self_critique_loop(
    engine: SubroutineEngine,
    target_handle: SubroutineHandle,
    critique_handle: SubroutineHandle,
    input_record: Mapping[str, Any],
    parents: list[str] | tuple[str, ...] = (),
    config: LoopConfig | None = None,
    *,
    output_schema: Any = None,
    batch_id: str | None = None,
    stage: str | None = None,
    item_key: str | None = None,
) -> tuple[dict[str, Any] | None, LoopTrace]:
    """Generate-critique-revise until ratings stop improving.

    Each iteration invokes the target (from round 2 on, with the previous
    candidate and its critique appended to the input context), invokes the
    critique on the (input, candidate) pair, and records the derived loss as
    the candidate arm's loss. Exits when the loss reaches the threshold, when
    it stops strictly improving on the running best, or at ``max_iters``; the
    minimal-loss candidate is returned.
    """
    cfg = config or LoopConfig()
    dims = dims_from_schema(critique_handle.spec.output_schema)
    iterations: list[LoopIteration] = []
    best_loss = float("inf")
    best_output: dict[str, Any] | None = None
    best_index = 0
    exit_reason = "max_iters"
    extra_context: str | None = None
    store = engine.store

    # Per-call output schemas reshape the critique's input pair too.
    critique_in_schema: Schema | None = None
    if output_schema is not None:
        fields = [
            FieldSpec(f"{INPUT_NS}{f.name}", f.kind, f.doc)
            for f in target_handle.spec.input_schema.fields
        ]
        fields += [
            FieldSpec(f"{OUTPUT_NS}{f.name}", f.kind, f.doc) for f in output_schema.fields
        ]
        critique_in_schema = Schema(tuple(fields))

    for i in range(1, cfg.max_iters + 1):
        candidate = engine.invoke(
            target_handle,
            input_record,
            parents,
            extra_context=extra_context,
            output_schema=output_schema,
            batch_id=batch_id,
            stage=stage,
            item_key=item_key,
        )
        if candidate.status == "failed":
            # Exit with the best candidate so far if one exists, else fail.
            exit_reason = "error"
            break
        critique_inv = engine.invoke(
            critique_handle,
            critique_input(input_record, candidate.output_payload or {}),
            [candidate.invocation_id],
            extra_context=f"Loop iteration: {i}",
            input_schema=critique_in_schema,
            batch_id=batch_id,
            stage=stage,
            item_key=item_key,
        )
        if critique_inv.status == "failed":
            exit_reason = "error"
            if best_output is None:
                # An unrated candidate beats returning nothing.
                best_output = candidate.output_payload
            break
        crit = critique_result(critique_inv, dims)
        store.apply_loss(candidate.invocation_id, crit.derived_loss)
        iterations.append(
            LoopIteration(candidate.invocation_id, critique_inv.invocation_id, crit.derived_loss)
        )
        improved = crit.derived_loss < best_loss
        if improved:
            best_loss = crit.derived_loss
            best_output = candidate.output_payload
            best_index = len(iterations)
        if crit.derived_loss <= cfg.loss_threshold:
            exit_reason = "threshold_met"
            break
        if not improved:
            exit_reason = "no_improvement"
            break
        extra_context = _revision_context(i, candidate.output_payload or {}, crit)

    trace = LoopTrace(tuple(iterations), best_index, exit_reason)
    return best_output, trace


def propagate_sme_feedback(
    store: AuditStore,
    invocation_id: str,
    ratings: Mapping[str, int],
    dims: list[RatingDimension],
    *,
    reviewer_id: str,
    comment: str | None = None,
    submission_id: str | None = None,
    late: bool = False,
) -> tuple[FeedbackRecord, float, dict[str, float]]:
    """Apply one reviewer rating to the target arm and its critique arms.

    The target invocation's arm receives the reviewer-derived loss (replacing
    the provisional critique-derived loss for the same invocation); each
    critique invocation of that output receives the squared disagreement with
    the reviewer. All effects commit atomically with the feedback record.

    Returns the feedback record, the reviewer loss, and the per-critique
    losses applied.
    """
    inv = store.get_invocation(invocation_id)
    if inv.subroutine_id is None:
        raise UnknownIdError(f"invocation {invocation_id} is not a subroutine invocation")
    sme_loss = rating_to_loss(ratings, dims)
    critique_effects: dict[str, float] = {}
    with store.transaction():
        record = store.record_feedback(
            feedback_id=str(uuid.uuid4()),
            invocation_id=invocation_id,
            reviewer_id=reviewer_id,
            source="sme",
            ratings=ratings,
            loss=sme_loss,
            comment=comment,
            late=late,
            submission_id=submission_id,
        )
        store.apply_loss(invocation_id, sme_loss)
        for critique_sid in store.critiques_of(inv.subroutine_id):
            spec, _ = store.get_subroutine(critique_sid)
            c_dims = dims_from_schema(spec.output_schema)
            for child in store.children_of(invocation_id, critique_sid):
                if child.status != "succeeded":
                    continue
                derived = critique_result(child, c_dims).derived_loss
                c_loss = critique_loss(sme_loss, derived)
                store.apply_loss(child.invocation_id, c_loss)
                critique_effects[child.invocation_id] = c_loss
    return record, sme_loss, critique_effects
