import pytest

from promptarm.backends import PoolEntry, ScriptedBackend
from promptarm.critique import (
    LoopConfig,
    RatingDimension,
    critique_loss,
    derive_critique_spec,
    dims_from_schema,
    propagate_sme_feedback,
    rating_to_loss,
    self_critique_loop,
)
from promptarm.engine import SubroutineEngine
from promptarm.schema import (
    BoundedIntKind,
    FieldSpec,
    Schema,
    SchemaError,
    SubroutineSpec,
    TextKind,
)
from promptarm.store import AuditStore

TARGET_SPEC = SubroutineSpec(
    name="draft_reply",
    task_doc="Draft a reply to the given note.",
    input_schema=Schema((FieldSpec("note", TextKind(), "The note"),)),
    output_schema=Schema((FieldSpec("reply", TextKind(), "The reply"),)),
)


class TestDeriveCritiqueSpec:
    def test_construction(self):
        spec = derive_critique_spec(TARGET_SPEC, [RatingDimension("accuracy", 1, 10)])
        names = [f.name for f in spec.output_schema.fields]
        assert names == ["explanation", "accuracy"]
        rating = spec.output_schema.fields[1]
        assert rating.kind == BoundedIntKind(1, 10)
        # input-output pair, namespaced by prefix
        in_names = [f.name for f in spec.input_schema.fields]
        assert in_names == ["input_note", "output_reply"]

    def test_multiple_dimensions(self):
        spec = derive_critique_spec(
            TARGET_SPEC, [RatingDimension("brevity"), RatingDimension("accuracy")]
        )
        names = [f.name for f in spec.output_schema.fields]
        assert names == ["explanation", "brevity", "accuracy"]

    def test_empty_dims_rejected(self):
        with pytest.raises(SchemaError):
            derive_critique_spec(TARGET_SPEC, [])

    def test_explanation_collision_rejected(self):
        with pytest.raises(SchemaError):
            derive_critique_spec(TARGET_SPEC, [RatingDimension("explanation")])


class TestRatingToLoss:
    def test_best_rating(self):
        assert rating_to_loss({"d": 10}, [RatingDimension("d", 1, 10)]) == 0.0

    def test_worst_rating(self):
        assert rating_to_loss({"d": 1}, [RatingDimension("d", 1, 10)]) == 1.0

    def test_two_dims(self):
        dims = [RatingDimension("a", 1, 10), RatingDimension("b", 1, 10)]
        # ((10-7)/9 + (10-4)/9) / 2
        assert rating_to_loss({"a": 7, "b": 4}, dims) == pytest.approx(0.5)

    def test_out_of_bounds_rejected(self):
        with pytest.raises(ValueError):
            rating_to_loss({"d": 0}, [RatingDimension("d", 1, 10)])


class TestCritiqueLoss:
    def test_agreement(self):
        assert critique_loss(0.3, 0.3) == 0.0

    def test_maximal_disagreement(self):
        assert critique_loss(1.0, 0.0) == 1.0

    def test_squared_difference(self):
        assert critique_loss(0.2, 0.7) == pytest.approx(0.25)

    def test_symmetric_bounded(self):
        for a, b in [(0.1, 0.9), (0.0, 0.4), (0.6, 0.6)]:
            assert critique_loss(a, b) == critique_loss(b, a)
            assert 0.0 <= critique_loss(a, b) <= 1.0
            if a == b:
                assert critique_loss(a, b) == 0.0


def loop_fixture(tmp_path, ratings_csv, error_rate=0.0, dims=None):
    """Engine with a scripted target and a critique following a schedule."""
    store = AuditStore(str(tmp_path / "audit.db"))
    dims = dims or [RatingDimension("quality", 0, 10)]
    critique_spec = derive_critique_spec(TARGET_SPEC, dims)
    backend = ScriptedBackend(
        pools={
            "draft_reply": [PoolEntry("Draft replies.", error_rate, "echo_empty", "echo_empty")],
            "draft_reply_critique": [
                PoolEntry("Rate replies.", 0.0, f"iteration_ratings:{ratings_csv}", "echo_empty")
            ],
        }
    )
    engine = SubroutineEngine(store, backend, rng=0)
    target = engine.register(TARGET_SPEC)
    critique = engine.register(critique_spec, critique_of=target.subroutine_id)
    return store, engine, target, critique, dims


class TestSelfCritiqueLoop:
    def test_immediate_threshold_exit(self, tmp_path):
        # rating 10 on a 0..10 dim -> loss 0.0 <= 0.1
        store, engine, target, critique, _ = loop_fixture(tmp_path, "10")
        output, trace = self_critique_loop(
            engine, target, critique, {"note": "hello"}, config=LoopConfig(max_iters=5, loss_threshold=0.1)
        )
        assert output is not None
        assert len(trace.iterations) == 1
        assert trace.exit_reason == "threshold_met"
        assert trace.selected_index == 1

    def test_no_improvement_exit(self, tmp_path):
        # losses 0.6, 0.4, 0.5 on a 0..10 dim via ratings 4, 6, 5
        store, engine, target, critique, _ = loop_fixture(tmp_path, "4,6,5")
        output, trace = self_critique_loop(
            engine, target, critique, {"note": "hello"}, config=LoopConfig(max_iters=5, loss_threshold=0.1)
        )
        assert [round(it.derived_loss, 6) for it in trace.iterations] == [0.6, 0.4, 0.5]
        assert trace.exit_reason == "no_improvement"
        assert trace.selected_index == 2

    def test_max_iters_exit(self, tmp_path):
        # losses 0.9, 0.8, 0.7 via ratings 1, 2, 3
        store, engine, target, critique, _ = loop_fixture(tmp_path, "1,2,3")
        output, trace = self_critique_loop(
            engine, target, critique, {"note": "hello"}, config=LoopConfig(max_iters=3, loss_threshold=0.1)
        )
        assert [round(it.derived_loss, 6) for it in trace.iterations] == [0.9, 0.8, 0.7]
        assert trace.exit_reason == "max_iters"
        assert trace.selected_index == 3

    def test_selected_index_is_argmin(self, tmp_path):
        store, engine, target, critique, _ = loop_fixture(tmp_path, "5,8,6")
        _, trace = self_critique_loop(
            engine, target, critique, {"note": "x"}, config=LoopConfig(max_iters=5, loss_threshold=0.0)
        )
        losses = [it.derived_loss for it in trace.iterations]
        assert trace.selected_index == losses.index(min(losses)) + 1

    def test_candidate_arm_receives_derived_loss(self, tmp_path):
        store, engine, target, critique, _ = loop_fixture(tmp_path, "4")
        _, trace = self_critique_loop(
            engine, target, critique, {"note": "x"}, config=LoopConfig(max_iters=1)
        )
        it = trace.iterations[0]
        inv = store.get_invocation(it.candidate_invocation_id)
        state = store.bandit_state(target.subroutine_id, 0.0)
        assert state.arm(inv.arm_id).loss_sum == pytest.approx(0.6)


class TestPropagateSmeFeedback:
    def _run_loop(self, tmp_path, ratings_csv="8"):
        store, engine, target, critique, dims = loop_fixture(tmp_path, ratings_csv)
        _, trace = self_critique_loop(
            engine, target, critique, {"note": "x"}, config=LoopConfig(max_iters=1)
        )
        return store, engine, target, critique, dims, trace

    def test_agreement_zeroes_critique_loss(self, tmp_path):
        # critique rated 8 on 0..10 -> derived loss 0.2; reviewer agrees
        store, engine, target, critique, dims, trace = self._run_loop(tmp_path)
        inv_id = trace.iterations[0].candidate_invocation_id
        _, sme_loss, effects = propagate_sme_feedback(
            store, inv_id, {"quality": 8}, dims, reviewer_id="rev1"
        )
        assert sme_loss == pytest.approx(0.2)
        critique_inv = trace.iterations[0].critique_invocation_id
        assert effects == {critique_inv: pytest.approx(0.0)}

    def test_disagreement_penalizes_critique(self, tmp_path):
        # critique derived loss 0.2 (rating 8); reviewer says loss 1.0 (rating 0)
        store, engine, target, critique, dims, trace = self._run_loop(tmp_path)
        inv_id = trace.iterations[0].candidate_invocation_id
        _, sme_loss, effects = propagate_sme_feedback(
            store, inv_id, {"quality": 0}, dims, reviewer_id="rev1"
        )
        assert sme_loss == 1.0
        critique_inv = trace.iterations[0].critique_invocation_id
        assert effects[critique_inv] == pytest.approx(0.64)

    def test_updates_exactly_target_and_critique_arms(self, tmp_path):
        store, engine, target, critique, dims, trace = self._run_loop(tmp_path)
        inv_id = trace.iterations[0].candidate_invocation_id

        def arm_table():
            rows = {}
            for sid, _, _ in store.list_subroutines():
                for r in store.arm_rows(sid):
                    rows[(sid, r["arm_id"])] = (r["pull_count"], r["loss_sum"])
            return rows

        before = arm_table()
        propagate_sme_feedback(store, inv_id, {"quality": 5}, dims, reviewer_id="rev1")
        after = arm_table()
        target_inv = store.get_invocation(inv_id)
        critique_inv = store.get_invocation(trace.iterations[0].critique_invocation_id)
        changed = {k for k in after if after[k] != before[k]}
        assert changed == {
            (target.subroutine_id, target_inv.arm_id),
            (critique.subroutine_id, critique_inv.arm_id),
        }
        # pull counts unchanged: feedback replaces losses, it is not a new pull
        for k in changed:
            assert after[k][0] == before[k][0]

    def test_sme_loss_replaces_derived_loss(self, tmp_path):
        store, engine, target, critique, dims, trace = self._run_loop(tmp_path)
        inv_id = trace.iterations[0].candidate_invocation_id
        inv = store.get_invocation(inv_id)
        before = store.bandit_state(target.subroutine_id, 0.0).arm(inv.arm_id)
        assert before.loss_sum == pytest.approx(0.2)  # derived loss from the loop
        propagate_sme_feedback(store, inv_id, {"quality": 4}, dims, reviewer_id="rev1")
        after = store.bandit_state(target.subroutine_id, 0.0).arm(inv.arm_id)
        assert after.loss_sum == pytest.approx(0.6)
        assert after.pull_count == before.pull_count

    def test_two_critiques_example(self, tmp_path):
        # reviewer loss 0.5 against critiques with derived losses 0.3 and 0.9
        # -> squared differences 0.04 and 0.16
        assert critique_loss(0.5, 0.3) == pytest.approx(0.04)
        assert critique_loss(0.5, 0.9) == pytest.approx(0.16)

    def test_payloads_never_mutated(self, tmp_path):
        store, engine, target, critique, dims, trace = self._run_loop(tmp_path)
        inv_id = trace.iterations[0].candidate_invocation_id
        before = store.get_invocation(inv_id)
        propagate_sme_feedback(store, inv_id, {"quality": 3}, dims, reviewer_id="rev1")
        after = store.get_invocation(inv_id)
        assert after.input_payload == before.input_payload
        assert after.output_payload == before.output_payload


def test_dims_round_trip_through_schema():
    dims = [RatingDimension("a", 1, 5), RatingDimension("b", 0, 10)]
    spec = derive_critique_spec(TARGET_SPEC, dims)
    assert dims_from_schema(spec.output_schema) == dims
