import json

import pytest
from hypothesis import given, strategies as st

from promptarm.schema import (
    BoundedIntKind,
    EnumKind,
    FieldSpec,
    IntegerKind,
    ListKind,
    PayloadViolation,
    RecordKind,
    Schema,
    SchemaError,
    SubroutineSpec,
    TextKind,
    emit_constraint_schema,
    schema_from_constraint,
    schema_from_dict,
    schema_to_dict,
    serialize_declaration,
    spec_hash,
    validate_payload,
)


def rare_letters_spec() -> SubroutineSpec:
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


class TestConstruction:
    def test_duplicate_field_names_rejected(self):
        with pytest.raises(SchemaError):
            Schema((FieldSpec("a", TextKind()), FieldSpec("a", IntegerKind())))

    def test_bad_identifier_rejected(self):
        with pytest.raises(SchemaError):
            FieldSpec("not-an-identifier", TextKind())

    def test_bounded_integer_requires_ordered_bounds(self):
        with pytest.raises(SchemaError):
            BoundedIntKind(10, 1)
        BoundedIntKind(3, 3)  # lo == hi is allowed

    def test_enumeration_requires_values(self):
        with pytest.raises(SchemaError):
            EnumKind(())
        with pytest.raises(SchemaError):
            EnumKind(("a", "a"))

    def test_nesting_depth_cap(self):
        deep = FieldSpec("a", TextKind())
        for name in ("b", "c", "d"):
            deep = FieldSpec(name, RecordKind((deep,)))
        Schema((deep,))  # depth 4 is fine
        too_deep = FieldSpec("e", RecordKind((deep,)))
        with pytest.raises(SchemaError):
            Schema((too_deep,))

    def test_empty_task_doc_rejected(self):
        with pytest.raises(SchemaError):
            SubroutineSpec("x", "  ", Schema(), Schema())


class TestConstraintDocument:
    def test_empty_schema(self):
        doc = json.loads(emit_constraint_schema(Schema()))
        assert doc == {
            "type": "object",
            "properties": {},
            "required": [],
            "additionalProperties": False,
        }

    def test_two_field_schema_matches_fig_shape(self):
        schema = rare_letters_spec().output_schema
        doc = json.loads(emit_constraint_schema(schema))
        assert list(doc["properties"]) == ["scratch_work", "character_count"]
        assert doc["properties"]["scratch_work"]["type"] == "string"
        assert doc["properties"]["character_count"]["type"] == "integer"
        assert doc["required"] == ["scratch_work", "character_count"]

    def test_bounds_pass_through(self):
        schema = Schema((FieldSpec("rating", BoundedIntKind(1, 10)),))
        doc = json.loads(emit_constraint_schema(schema))
        assert doc["properties"]["rating"] == {
            "type": "integer",
            "minimum": 1,
            "maximum": 10,
        }

    def test_byte_identical_for_equal_schemas(self):
        a = emit_constraint_schema(rare_letters_spec().output_schema)
        b = emit_constraint_schema(rare_letters_spec().output_schema)
        assert a == b

    def test_constraint_round_trips_to_schema(self):
        schema = Schema(
            (
                FieldSpec("t", TextKind(), "doc t"),
                FieldSpec("n", BoundedIntKind(0, 5)),
                FieldSpec("e", EnumKind(("x", "y"))),
                FieldSpec("l", ListKind(FieldSpec("item", TextKind()))),
                FieldSpec("r", RecordKind((FieldSpec("inner", IntegerKind()),))),
            )
        )
        assert schema_from_constraint(emit_constraint_schema(schema)) == schema


class TestValidation:
    def test_accepts_simple_record(self):
        schema = Schema((FieldSpec("n", IntegerKind()),))
        assert validate_payload(schema, {"n": 4}) == {"n": 4}

    def test_out_of_bounds(self):
        schema = Schema((FieldSpec("rating", BoundedIntKind(1, 10)),))
        with pytest.raises(PayloadViolation) as err:
            validate_payload(schema, {"rating": 11})
        assert err.value.field_path == "rating"
        assert "out of bounds" in err.value.reason

    def test_missing_field(self):
        schema = Schema((FieldSpec("a", TextKind()), FieldSpec("b", IntegerKind())))
        with pytest.raises(PayloadViolation) as err:
            validate_payload(schema, {"a": "x"})
        assert err.value.field_path == "b"
        assert err.value.reason == "missing field"

    def test_unknown_field_rejected(self):
        schema = Schema((FieldSpec("a", TextKind()),))
        with pytest.raises(PayloadViolation) as err:
            validate_payload(schema, {"a": "x", "zz": 1})
        assert err.value.field_path == "zz"
        assert err.value.reason == "unknown field"

    def test_bool_is_not_integer(self):
        schema = Schema((FieldSpec("n", IntegerKind()),))
        with pytest.raises(PayloadViolation):
            validate_payload(schema, {"n": True})

    def test_nested_paths_in_reports(self):
        schema = Schema(
            (
                FieldSpec(
                    "items",
                    ListKind(FieldSpec("item", RecordKind((FieldSpec("v", IntegerKind()),)))),
                ),
            )
        )
        with pytest.raises(PayloadViolation) as err:
            validate_payload(schema, {"items": [{"v": 1}, {"v": "bad"}]})
        assert err.value.field_path == "items[1].v"

    def test_round_trip_revalidates_equal(self):
        schema = Schema(
            (
                FieldSpec("a", TextKind()),
                FieldSpec("l", ListKind(FieldSpec("item", IntegerKind()))),
            )
        )
        payload = {"a": "hello", "l": [1, 2, 3]}
        record = validate_payload(schema, payload)
        again = validate_payload(schema, json.loads(json.dumps(record)))
        assert again == record


# Strategy for random schemas (flat, plus one nested level) used in property tests.
_names = st.from_regex(r"[a-z_][a-z0-9_]{0,8}", fullmatch=True)
_leaf_kinds = st.one_of(
    st.just(TextKind()),
    st.just(IntegerKind()),
    st.builds(lambda lo, d: BoundedIntKind(lo, lo + d), st.integers(-5, 5), st.integers(0, 10)),
    st.builds(lambda vs: EnumKind(tuple(vs)), st.lists(_names, min_size=1, max_size=4, unique=True)),
)


@st.composite
def schemas(draw):
    n = draw(st.integers(0, 5))
    names = draw(st.lists(_names, min_size=n, max_size=n, unique=True))
    fields = tuple(FieldSpec(name, draw(_leaf_kinds)) for name in names)
    return Schema(fields)


@given(schemas())
def test_schema_serialization_round_trips(schema):
    assert schema_from_dict(schema_to_dict(schema)) == schema


@given(schemas(), schemas())
def test_constraint_injective_up_to_field_sets(a, b):
    if a != b:
        assert emit_constraint_schema(a) != emit_constraint_schema(b)


def test_declaration_contains_task_and_field_docs():
    text = serialize_declaration(rare_letters_spec())
    assert "Count the number of words" in text
    assert "Number of instances in the text" in text
    assert "given_text" in text


def test_declaration_deterministic_and_context_appended():
    a = serialize_declaration(rare_letters_spec())
    b = serialize_declaration(rare_letters_spec())
    assert a == b
    spec = rare_letters_spec()
    spec_with_ctx = SubroutineSpec(
        spec.name, spec.task_doc, spec.input_schema, spec.output_schema, "focus on precision"
    )
    assert "focus on precision" in serialize_declaration(spec_with_ctx)
    assert spec_hash(spec) != spec_hash(spec_with_ctx)
