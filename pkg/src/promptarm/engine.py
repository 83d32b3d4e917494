"""Lifecycle of an LM-powered subroutine.

Registration derives a stable handle from the spec, invocation selects an arm
through the bandit (synthesizing a fresh prompt when the exploration arm is
drawn), runs the backend under the schema constraint, and persists the
invocation with its dependency edges atomically with the arm's pull
accounting.
"""

from __future__ import annotations

import json
import random
import uuid
from dataclasses import dataclass
from typing import Any, Mapping, Protocol

from . import bandit
from .backends import (
    BackendError,
    GenerationRequest,
    GenerationResult,
    fingerprint,
    serialize_input,
)
from .bandit import EXPLORE, BanditState, BetaSchedule, beta_at
from .schema import (
    Schema,
    SubroutineSpec,
    emit_constraint_schema,
    serialize_declaration,
    spec_hash,
    validate_payload,
)
from .store import AuditStore, InvocationRecord


class Backend(Protocol):
    backend_id: str

    def generate(self, request: GenerationRequest) -> GenerationResult: ...

    def synthesize_prompt(self, spec: SubroutineSpec, context: str | None = None) -> str: ...


@dataclass(frozen=True)
class SubroutineHandle:
    """Stable reference to a registered subroutine."""

    subroutine_id: str
    spec: SubroutineSpec


def subroutine_id_for(spec: SubroutineSpec) -> str:
    # Derived from the full spec serialization, so ids survive restarts and
    # any change to the declaration produces a new subroutine.
    return f"{spec.name}-{spec_hash(spec)[:12]}"


class InvocationInputError(ValueError):
    """The input record does not validate; nothing was persisted."""


class SubroutineEngine:
    """Executes subroutines against a backend with full audit recording."""

    def __init__(
        self,
        store: AuditStore,
        backend: Backend,
        *,
        beta_schedule: BetaSchedule | None = None,
        task_temperature: float = 0.2,
        rng: random.Random | int | None = None,
    ):
        self.store = store
        self.backend = backend
        self.beta_schedule = beta_schedule or BetaSchedule()
        self.task_temperature = task_temperature
        if isinstance(rng, random.Random):
            self.rng = rng
        else:
            self.rng = random.Random(rng)

    # -- registration -----------------------------------------------------------

    def register(self, spec: SubroutineSpec, critique_of: str | None = None) -> SubroutineHandle:
        """Idempotent: the same spec always yields the same handle."""
        sid = subroutine_id_for(spec)
        self.store.upsert_subroutine(sid, spec, critique_of)
        return SubroutineHandle(sid, spec)

    def handle_for(self, subroutine_id: str) -> SubroutineHandle:
        spec, _ = self.store.get_subroutine(subroutine_id)
        return SubroutineHandle(subroutine_id, spec)

    # -- sampling -----------------------------------------------------------------

    def bandit_state(self, subroutine_id: str, batch_id: str | None = None) -> BanditState:
        """Live arm statistics, or the batch snapshot when one is frozen."""
        pulls = self.store.total_pulls(subroutine_id)
        beta = beta_at(self.beta_schedule, pulls)
        if batch_id is not None:
            snapshot = self.store.snapshot_state(batch_id, subroutine_id, beta)
            if snapshot is not None:
                return snapshot
        return self.store.bandit_state(subroutine_id, beta)

    def _select_arm(self, handle: SubroutineHandle, batch_id: str | None) -> str:
        state = self.bandit_state(handle.subroutine_id, batch_id)
        choice = bandit.draw(state, self.rng)
        if choice != EXPLORE:
            return choice
        prompt = self.backend.synthesize_prompt(handle.spec, handle.spec.context)
        arm_id = fingerprint(prompt)
        self.store.create_arm(handle.subroutine_id, arm_id, prompt)
        return arm_id

    # -- invocation ------------------------------------------------------------------

    def invoke(
        self,
        handle: SubroutineHandle,
        input_record: Mapping[str, Any],
        parents: list[str] | tuple[str, ...] = (),
        *,
        extra_context: str | None = None,
        input_schema: Schema | None = None,
        output_schema: Schema | None = None,
        batch_id: str | None = None,
        stage: str | None = None,
        item_key: str | None = None,
    ) -> InvocationRecord:
        """Run the subroutine once and persist the result.

        Returns the persisted record; ``status`` is ``failed`` when the
        backend errored or exhausted its constraint retries, in which case the
        arm has already absorbed a loss of 1.0 (an unusable output is
        maximally costly, and skipping the pull would bias exploration toward
        fragile prompts).

        ``input_schema`` / ``output_schema`` override the declared schemas for
        this call only; batch-shaped stages use this for dynamically keyed
        constraints while keeping one subroutine identity (and one bandit)
        across calls.
        """
        spec = handle.spec
        effective_input = input_schema or spec.input_schema
        try:
            typed_input = validate_payload(effective_input, dict(input_record))
        except Exception as exc:
            raise InvocationInputError(str(exc)) from exc
        for parent in parents:
            if not self.store.invocation_exists(parent):
                raise InvocationInputError(f"unknown parent invocation: {parent}")

        arm_id = self._select_arm(handle, batch_id)
        prompt = self.store.arm_prompt(handle.subroutine_id, arm_id)
        effective_schema = output_schema or spec.output_schema
        constraint = emit_constraint_schema(effective_schema)
        user_payload = serialize_input(
            typed_input, list(effective_input.field_names()), extra_context
        )
        seed = self.rng.randrange(2**31)
        request = GenerationRequest(
            prompt, user_payload, constraint, temperature=self.task_temperature, seed=seed
        )

        output: dict[str, Any] | None = None
        raw: str | None = None
        error: str | None = None
        status = "succeeded"
        try:
            result = self.backend.generate(request)
            raw = result.raw_text
            output = validate_payload(effective_schema, json.loads(raw))
        except BackendError as exc:
            status = "failed"
            error = str(exc)

        record = InvocationRecord(
            invocation_id=str(uuid.uuid4()),
            subroutine_id=handle.subroutine_id,
            arm_id=arm_id,
            input_payload=typed_input,
            output_payload=output,
            status=status,
            parent_ids=tuple(parents),
            error=error,
            user_payload=user_payload,
            raw_output=raw,
            request_seed=seed,
            constraint_doc=constraint,
            batch_id=batch_id,
            stage=stage,
            item_key=item_key,
        )
        with self.store.transaction():
            persisted = self.store.persist_invocation(record)
            if status == "failed":
                self.store.apply_loss(persisted.invocation_id, 1.0)
        return persisted

    def ingest_invocation(
        self,
        input_payload: Mapping[str, Any],
        output_payload: Mapping[str, Any],
        *,
        stage: str = "ingest",
        item_key: str | None = None,
        batch_id: str | None = None,
    ) -> InvocationRecord:
        """Persist a non-LM root node (e.g. letter ingest) for the audit DAG."""
        record = InvocationRecord(
            invocation_id=str(uuid.uuid4()),
            subroutine_id=None,
            arm_id=None,
            input_payload=dict(input_payload),
            output_payload=dict(output_payload),
            status="succeeded",
            stage=stage,
            item_key=item_key,
            batch_id=batch_id,
        )
        return self.store.persist_invocation(record)


def declaration_text(spec: SubroutineSpec) -> str:
    """Rendering of a declaration as used by the prompt engineer."""
    return serialize_declaration(spec)
