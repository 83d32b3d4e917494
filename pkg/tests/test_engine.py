import json

import pytest

from promptarm.backends import PoolEntry, ScriptedBackend, fingerprint
from promptarm.engine import InvocationInputError, SubroutineEngine, subroutine_id_for
from promptarm.schema import (
    FieldSpec,
    IntegerKind,
    Schema,
    SchemaError,
    SubroutineSpec,
    TextKind,
)
from promptarm.store import AuditStore

RARE_SPEC = SubroutineSpec(
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


def rare_pool(error_rate=0.0):
    return [
        PoolEntry(
            preamble="You count words containing rare letters.",
            error_rate=error_rate,
            correct_behavior="count_rare_letters",
            incorrect_behavior="miscount_rare_letters",
        )
    ]


@pytest.fixture
def store(tmp_path):
    return AuditStore(str(tmp_path / "audit.db"))


@pytest.fixture
def engine(store):
    backend = ScriptedBackend(pools={"count_rare_letter_words": rare_pool(0.0)})
    return SubroutineEngine(store, backend, rng=0)


class TestRegister:
    def test_idempotent(self, engine):
        h1 = engine.register(RARE_SPEC)
        h2 = engine.register(RARE_SPEC)
        assert h1.subroutine_id == h2.subroutine_id

    def test_task_doc_feeds_identity(self):
        other = SubroutineSpec(
            RARE_SPEC.name,
            RARE_SPEC.task_doc + " Be careful.",
            RARE_SPEC.input_schema,
            RARE_SPEC.output_schema,
        )
        assert subroutine_id_for(RARE_SPEC) != subroutine_id_for(other)

    def test_invalid_spec_rejected(self):
        with pytest.raises(SchemaError):
            SubroutineSpec(
                "x",
                "doc",
                Schema((FieldSpec("a", TextKind()), FieldSpec("a", TextKind()))),
                Schema(),
            )


class TestInvoke:
    def test_fresh_subroutine_forces_exploration(self, engine, store):
        handle = engine.register(RARE_SPEC)
        inv = engine.invoke(handle, {"given_text": "Quick wax zebras jump."})
        assert inv.status == "succeeded"
        state = store.bandit_state(handle.subroutine_id, 0.0)
        assert len(state.arms) == 1
        assert state.arms[0].pull_count == 1

    def test_scripted_count_matches_oracle(self, engine):
        handle = engine.register(RARE_SPEC)
        inv = engine.invoke(handle, {"given_text": "Quick wax zebras jump."})
        # brute force: Quick (q), wax (w, x), zebras (z)
        assert inv.output_payload["character_count"] == 3

    def test_invalid_input_persists_nothing(self, engine, store):
        handle = engine.register(RARE_SPEC)
        with pytest.raises(InvocationInputError):
            engine.invoke(handle, {"wrong_field": "x"})
        assert store.list_invocations(handle.subroutine_id) == []

    def test_unknown_parent_rejected(self, engine):
        handle = engine.register(RARE_SPEC)
        with pytest.raises(InvocationInputError):
            engine.invoke(handle, {"given_text": "t"}, ["missing-parent"])

    def test_pull_accounting_matches_invocations(self, engine, store):
        handle = engine.register(RARE_SPEC)
        for text in ("Quick wax zebras jump.", "The quartz box went west.", "Zulu wax quiz next."):
            engine.invoke(handle, {"given_text": text})
        pulls = store.total_pulls(handle.subroutine_id)
        invocations = store.list_invocations(handle.subroutine_id)
        assert pulls == len(invocations) == 3

    def test_failed_generation_charges_full_loss(self, store):
        backend = ScriptedBackend(
            pools={
                "count_rare_letter_words": [
                    PoolEntry("Broken.", 1.0, "count_rare_letters", "always_violates_engine")
                ]
            }
        )
        from promptarm.backends import register_behavior

        @register_behavior("always_violates_engine")
        def _violate(ctx):
            return {"nope": 1}

        engine = SubroutineEngine(store, backend, rng=0)
        handle = engine.register(RARE_SPEC)
        inv = engine.invoke(handle, {"given_text": "text"})
        assert inv.status == "failed"
        state = store.bandit_state(handle.subroutine_id, 0.0)
        assert state.arms[0].loss_sum == pytest.approx(1.0)
        assert state.arms[0].pull_count == 1
        # failed invocations count as pulls
        assert store.total_pulls(handle.subroutine_id) == 1

    def test_replay_reproduces_output(self, engine, store):
        handle = engine.register(RARE_SPEC)
        inv = engine.invoke(handle, {"given_text": "Quick wax zebras jump."})
        from promptarm.backends import GenerationRequest

        prompt = store.arm_prompt(handle.subroutine_id, inv.arm_id)
        replay = engine.backend.generate(
            GenerationRequest(prompt, inv.user_payload, inv.constraint_doc, seed=inv.request_seed)
        )
        assert replay.raw_text == inv.raw_output

    def test_output_validates_against_spec(self, engine, store):
        from promptarm.schema import validate_payload

        handle = engine.register(RARE_SPEC)
        engine.invoke(handle, {"given_text": "Quick wax zebras jump."})
        for inv in store.list_invocations(handle.subroutine_id):
            if inv.status == "succeeded":
                validate_payload(handle.spec.output_schema, inv.output_payload)

    def test_parent_edges_recorded(self, engine, store):
        handle = engine.register(RARE_SPEC)
        root = engine.ingest_invocation({"letter_id": "L1", "metadata": {}}, {"letter_id": "L1"})
        child = engine.invoke(handle, {"given_text": "t quartz"}, [root.invocation_id])
        trace = store.trace(child.invocation_id)
        assert [n.invocation.invocation_id for n in trace.nodes] == [
            root.invocation_id,
            child.invocation_id,
        ]
