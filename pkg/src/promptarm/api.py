"""HTTP API for batch review, feedback submission, arm inspection, and
trace retrieval.

Handlers are stateless over the shared store; the only write surface is
feedback submission (idempotent under retry via the submission id) and run
launch. Invocation payloads are never writable. Route payloads are documented
in docs/api.md.
"""

from __future__ import annotations

import json
import threading
import uuid
from typing import Any

from fastapi import FastAPI, HTTPException, Response
from pydantic import BaseModel, Field

from .bandit import beta_at, sample_distribution
from .critique import RatingDimension, dims_from_schema, propagate_sme_feedback
from .engine import SubroutineEngine
from .pipeline import CommentPipeline
from .store import AuditStore, FeedbackRecord, InvocationRecord, UnknownIdError


class FeedbackSubmission(BaseModel):
    invocation_id: str
    reviewer_id: str
    ratings: dict[str, int]
    comment: str | None = None
    submission_id: str | None = None


class RunRequest(BaseModel):
    config_path: str


def _invocation_view(inv: InvocationRecord) -> dict[str, Any]:
    return {
        "invocation_id": inv.invocation_id,
        "subroutine_id": inv.subroutine_id,
        "arm_id": inv.arm_id,
        "status": inv.status,
        "input": inv.input_payload,
        "output": inv.output_payload,
        "error": inv.error,
        "parents": list(inv.parent_ids),
        "batch_id": inv.batch_id,
        "stage": inv.stage,
        "item_key": inv.item_key,
        "created_at": inv.created_at,
    }


def _feedback_view(fb: FeedbackRecord) -> dict[str, Any]:
    return {
        "feedback_id": fb.feedback_id,
        "invocation_id": fb.invocation_id,
        "reviewer_id": fb.reviewer_id,
        "source": fb.source,
        "ratings": fb.ratings,
        "loss": fb.loss,
        "comment": fb.comment,
        "late": fb.late,
    }


def create_app(store: AuditStore, engine: SubroutineEngine, pipeline: CommentPipeline | None = None) -> FastAPI:
    app = FastAPI(title="promptarm", version="0.1.0")

    def _critique_dims(subroutine_id: str) -> list[RatingDimension]:
        """Rating instrument for an invocation's stage: the dimensions of the
        subroutine's critique (reviewers and critiques share the scale)."""
        critique_ids = store.critiques_of(subroutine_id)
        if critique_ids:
            spec, _ = store.get_subroutine(critique_ids[0])
            return dims_from_schema(spec.output_schema)
        spec, _ = store.get_subroutine(subroutine_id)
        return dims_from_schema(spec.output_schema) or [RatingDimension("quality", 1, 10)]

    def _arm_stats_view(subroutine_id: str) -> dict[str, Any]:
        pulls = store.total_pulls(subroutine_id)
        beta = beta_at(engine.beta_schedule, pulls)
        state = store.bandit_state(subroutine_id, beta)
        dist = sample_distribution(state)
        arms = []
        for row in store.arm_rows(subroutine_id):
            arm_id = row["arm_id"]
            arms.append(
                {
                    "arm_id": arm_id,
                    "prompt_text": row["prompt_text"],
                    "pull_count": row["pull_count"],
                    "loss_sum": row["loss_sum"],
                    "mean_loss": row["loss_sum"] / row["pull_count"] if row["pull_count"] else None,
                    "probability": dist.get(arm_id),
                }
            )
        return {
            "subroutine_id": subroutine_id,
            "beta": beta,
            "arms": arms,
            "explore_probability": dist["__explore__"],
        }

    @app.get("/batches")
    def list_batches() -> list[dict[str, Any]]:
        out = []
        for row in store.list_batches():
            batch_id = row["batch_id"]
            letter_ids = json.loads(row["letter_ids_json"])
            stages = {}
            for stage in ("summarize", "extract", "bin", "bin_summary"):
                stages[stage] = len(store.stage_outputs(batch_id, stage))
            out.append(
                {
                    "batch_id": batch_id,
                    "run_id": row["run_id"],
                    "position": row["position"],
                    "state": row["state"],
                    "letters": len(letter_ids),
                    "stage_outputs": stages,
                }
            )
        return out

    @app.get("/batches/{batch_id}/items")
    def review_items(batch_id: str, stage: str) -> list[dict[str, Any]]:
        try:
            items = store.list_review_items(batch_id, stage)
        except UnknownIdError as exc:
            raise HTTPException(404, str(exc)) from exc
        return [
            {
                "item_key": item["item_key"],
                "status": item["status"],
                "invocation": _invocation_view(item["invocation"]) if item["invocation"] else None,
                "output": item["output"],
                "feedback": [_feedback_view(f) for f in item["feedback"]],
                "reason": item.get("reason"),
            }
            for item in items
        ]

    @app.post("/feedback")
    def submit_feedback(sub: FeedbackSubmission, response: Response) -> dict[str, Any]:
        try:
            inv = store.get_invocation(sub.invocation_id)
        except UnknownIdError as exc:
            raise HTTPException(404, str(exc)) from exc
        if inv.subroutine_id is None:
            raise HTTPException(422, "cannot rate a non-subroutine invocation")
        dims = _critique_dims(inv.subroutine_id)
        by_name = {d.name: d for d in dims}
        if set(sub.ratings) != set(by_name):
            raise HTTPException(
                422, f"ratings must cover dimensions {sorted(by_name)}, got {sorted(sub.ratings)}"
            )
        for name, value in sub.ratings.items():
            d = by_name[name]
            if not (d.lo <= value <= d.hi):
                raise HTTPException(422, f"rating {name}={value} out of bounds [{d.lo}, {d.hi}]")
        # Feedback on a superseded batch still propagates, flagged late. A
        # batch is superseded once a later batch of its run has frozen its
        # arm snapshot: this signal arrived too late to shape that freeze.
        late = False
        if inv.batch_id is not None:
            batch = store.get_batch(inv.batch_id)
            late = any(
                b["position"] > batch["position"] and store.has_snapshot(b["batch_id"])
                for b in store.list_batches(batch["run_id"])
            )
        record, sme_loss, effects = propagate_sme_feedback(
            store,
            sub.invocation_id,
            sub.ratings,
            dims,
            reviewer_id=sub.reviewer_id,
            comment=sub.comment,
            submission_id=sub.submission_id or str(uuid.uuid4()),
            late=late,
        )
        if late:
            response.status_code = 409
        return {
            "feedback": _feedback_view(record),
            "sme_loss": sme_loss,
            "critique_losses": effects,
            "late": late,
            "arms": _arm_stats_view(inv.subroutine_id),
        }

    @app.get("/invocations/{invocation_id}/trace")
    def get_trace(invocation_id: str) -> dict[str, Any]:
        try:
            trace = store.trace(invocation_id)
        except UnknownIdError as exc:
            raise HTTPException(404, str(exc)) from exc
        return {
            "root": trace.root,
            "nodes": [
                {
                    "invocation": _invocation_view(n.invocation),
                    "prompt_text": n.prompt_text,
                    "feedback": [_feedback_view(f) for f in n.feedback],
                }
                for n in trace.nodes
            ],
            "edges": [{"child": e.child, "parent": e.parent} for e in trace.edges],
        }

    @app.get("/subroutines")
    def list_subroutines() -> list[dict[str, Any]]:
        return [
            {"subroutine_id": sid, "name": name, "critique_of": critique_of}
            for sid, name, critique_of in store.list_subroutines()
        ]

    @app.get("/subroutines/{subroutine_id}/arms")
    def subroutine_arms(subroutine_id: str) -> dict[str, Any]:
        try:
            store.get_subroutine(subroutine_id)
        except UnknownIdError as exc:
            raise HTTPException(404, str(exc)) from exc
        return _arm_stats_view(subroutine_id)

    @app.post("/runs")
    def start_run(req: RunRequest) -> dict[str, Any]:
        from .config import build_pipeline, load_corpus, load_run_settings

        try:
            settings = load_run_settings(req.config_path)
            letters = load_corpus(settings.corpus_path)
            run_pipeline = build_pipeline(store, settings)
        except Exception as exc:
            raise HTTPException(422, str(exc)) from exc
        thread = threading.Thread(
            target=run_pipeline.run, args=(letters, settings.run_id), daemon=True
        )
        thread.start()
        return {"run_id": settings.run_id, "letters": len(letters)}

    return app
