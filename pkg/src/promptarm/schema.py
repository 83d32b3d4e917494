"""Typed field and schema definitions for subroutine inputs and outputs.

Schemas are declared once, serialized into a constraint document that is sent
to an LM backend to restrict generation, and used to check payloads coming
back. All values are immutable after construction and safe to share across
workers.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from typing import Any, Mapping, Union

_IDENTIFIER_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")

MAX_NESTING_DEPTH = 4


class SchemaError(ValueError):
    """Raised when a schema or spec violates a construction invariant."""


class PayloadViolation(ValueError):
    """A payload does not conform to its schema.

    Carries the first offending field (in declaration order) and the reason.
    """

    def __init__(self, field_path: str, reason: str):
        super().__init__(f"{field_path}: {reason}")
        self.field_path = field_path
        self.reason = reason


@dataclass(frozen=True)
class TextKind:
    pass


@dataclass(frozen=True)
class IntegerKind:
    pass


@dataclass(frozen=True)
class BoundedIntKind:
    lo: int
    hi: int

    def __post_init__(self) -> None:
        if self.lo > self.hi:
            raise SchemaError(f"bounded integer requires lo <= hi, got ({self.lo}, {self.hi})")


@dataclass(frozen=True)
class EnumKind:
    values: tuple[str, ...]

    def __post_init__(self) -> None:
        if len(self.values) == 0:
            raise SchemaError("enumeration requires at least one value")
        if len(set(self.values)) != len(self.values):
            raise SchemaError("enumeration values must be distinct")


@dataclass(frozen=True)
class ListKind:
    item: "FieldSpec"


@dataclass(frozen=True)
class RecordKind:
    fields: tuple["FieldSpec", ...]

    def __post_init__(self) -> None:
        names = [f.name for f in self.fields]
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate field names in record: {names}")


FieldKind = Union[TextKind, IntegerKind, BoundedIntKind, EnumKind, ListKind, RecordKind]


@dataclass(frozen=True)
class FieldSpec:
    """One named, documented, typed field of a schema."""

    name: str
    kind: FieldKind
    doc: str = ""

    def __post_init__(self) -> None:
        if not _IDENTIFIER_RE.match(self.name):
            raise SchemaError(f"field name must be an identifier, got {self.name!r}")


def _depth(kind: FieldKind) -> int:
    if isinstance(kind, ListKind):
        return 1 + _depth(kind.item.kind)
    if isinstance(kind, RecordKind):
        return 1 + max((_depth(f.kind) for f in kind.fields), default=0)
    return 1


@dataclass(frozen=True)
class Schema:
    """An ordered collection of fields with pairwise-distinct names."""

    fields: tuple[FieldSpec, ...] = ()

    def __post_init__(self) -> None:
        names = [f.name for f in self.fields]
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate field names in schema: {names}")
        depth = max((_depth(f.kind) for f in self.fields), default=0)
        if depth > MAX_NESTING_DEPTH:
            raise SchemaError(
                f"schema nesting depth {depth} exceeds the maximum of {MAX_NESTING_DEPTH}"
            )

    def field_names(self) -> tuple[str, ...]:
        return tuple(f.name for f in self.fields)


@dataclass(frozen=True)
class SubroutineSpec:
    """Declaration of an LM-powered subroutine.

    The task docstring and both schemas are the complete source material for
    prompt synthesis; ``context`` carries optional standing instructions
    (e.g. a project description) that condition every prompt for the
    subroutine.
    """

    name: str
    task_doc: str
    input_schema: Schema
    output_schema: Schema
    context: str | None = None

    def __post_init__(self) -> None:
        if not _IDENTIFIER_RE.match(self.name):
            raise SchemaError(f"subroutine name must be an identifier, got {self.name!r}")
        if not self.task_doc.strip():
            raise SchemaError("task_doc must be nonempty")


# ---------------------------------------------------------------------------
# Constraint document emission
# ---------------------------------------------------------------------------

def _kind_to_constraint(kind: FieldKind, doc: str) -> dict[str, Any]:
    out: dict[str, Any] = {}
    if isinstance(kind, TextKind):
        out["type"] = "string"
    elif isinstance(kind, IntegerKind):
        out["type"] = "integer"
    elif isinstance(kind, BoundedIntKind):
        out["type"] = "integer"
        out["minimum"] = kind.lo
        out["maximum"] = kind.hi
    elif isinstance(kind, EnumKind):
        out["type"] = "string"
        out["enum"] = list(kind.values)
    elif isinstance(kind, ListKind):
        out["type"] = "array"
        out["items"] = _kind_to_constraint(kind.item.kind, kind.item.doc)
    elif isinstance(kind, RecordKind):
        out["type"] = "object"
        out["properties"] = {
            f.name: _kind_to_constraint(f.kind, f.doc) for f in kind.fields
        }
        out["required"] = [f.name for f in kind.fields]
        out["additionalProperties"] = False
    else:  # pragma: no cover - exhaustive over FieldKind
        raise SchemaError(f"unknown kind: {kind!r}")
    if doc:
        out["description"] = doc
    return out


def emit_constraint_schema(schema: Schema) -> str:
    """Render a schema as the JSON-schema constraint document sent to backends.

    Deterministic: equal schemas produce byte-identical documents. Fields are
    listed in declaration order and all are required; unknown properties are
    forbidden. The exact format is documented in docs/constraint-format.md.
    """
    doc = {
        "type": "object",
        "properties": {f.name: _kind_to_constraint(f.kind, f.doc) for f in schema.fields},
        "required": [f.name for f in schema.fields],
        "additionalProperties": False,
    }
    return json.dumps(doc, indent=2)


def _kind_from_constraint(node: Mapping[str, Any], name: str) -> FieldKind:
    t = node.get("type")
    if t == "string":
        if "enum" in node:
            return EnumKind(tuple(node["enum"]))
        return TextKind()
    if t == "integer":
        if "minimum" in node or "maximum" in node:
            return BoundedIntKind(int(node["minimum"]), int(node["maximum"]))
        return IntegerKind()
    if t == "array":
        item = node["items"]
        return ListKind(FieldSpec("item", _kind_from_constraint(item, "item"), item.get("description", "")))
    if t == "object":
        fields = tuple(
            FieldSpec(n, _kind_from_constraint(sub, n), sub.get("description", ""))
            for n, sub in node.get("properties", {}).items()
        )
        return RecordKind(fields)
    raise SchemaError(f"cannot interpret constraint node for {name!r}: {node!r}")


def schema_from_constraint(document: str) -> Schema:
    """Parse a constraint document back into a Schema (inverse of emit)."""
    try:
        doc = json.loads(document)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"constraint document is not valid JSON: {exc}") from exc
    if doc.get("type") != "object":
        raise SchemaError("constraint document must declare an object")
    fields = tuple(
        FieldSpec(n, _kind_from_constraint(sub, n), sub.get("description", ""))
        for n, sub in doc.get("properties", {}).items()
    )
    return Schema(fields)


# ---------------------------------------------------------------------------
# Payload validation
# ---------------------------------------------------------------------------

def _check_value(kind: FieldKind, value: Any, path: str) -> Any:
    if isinstance(kind, TextKind):
        if not isinstance(value, str):
            raise PayloadViolation(path, f"expected text, got {type(value).__name__}")
        return value
    if isinstance(kind, IntegerKind):
        if isinstance(value, bool) or not isinstance(value, int):
            raise PayloadViolation(path, f"expected integer, got {type(value).__name__}")
        return value
    if isinstance(kind, BoundedIntKind):
        if isinstance(value, bool) or not isinstance(value, int):
            raise PayloadViolation(path, f"expected integer, got {type(value).__name__}")
        if not (kind.lo <= value <= kind.hi):
            raise PayloadViolation(
                path, f"value {value} out of bounds [{kind.lo}, {kind.hi}]"
            )
        return value
    if isinstance(kind, EnumKind):
        if not isinstance(value, str):
            raise PayloadViolation(path, f"expected enumeration string, got {type(value).__name__}")
        if value not in kind.values:
            raise PayloadViolation(path, f"value {value!r} not in enumeration {list(kind.values)}")
        return value
    if isinstance(kind, ListKind):
        if not isinstance(value, list):
            raise PayloadViolation(path, f"expected list, got {type(value).__name__}")
        return [
            _check_value(kind.item.kind, v, f"{path}[{i}]") for i, v in enumerate(value)
        ]
    if isinstance(kind, RecordKind):
        return _check_record(kind.fields, value, path)
    raise PayloadViolation(path, f"unknown kind {kind!r}")  # pragma: no cover


def _check_record(fields: tuple[FieldSpec, ...], value: Any, path: str) -> dict[str, Any]:
    if not isinstance(value, Mapping):
        raise PayloadViolation(path or "<root>", f"expected object, got {type(value).__name__}")
    prefix = f"{path}." if path else ""
    out: dict[str, Any] = {}
    for f in fields:
        if f.name not in value:
            raise PayloadViolation(f"{prefix}{f.name}", "missing field")
        out[f.name] = _check_value(f.kind, value[f.name], f"{prefix}{f.name}")
    declared = {f.name for f in fields}
    for name in value:
        if name not in declared:
            raise PayloadViolation(f"{prefix}{name}", "unknown field")
    return out


def validate_payload(schema: Schema, payload: Any) -> dict[str, Any]:
    """Check a parsed payload against a schema and return the typed record.

    Strict: every declared field must be present with a conforming kind, and
    no unknown fields are allowed. Raises :class:`PayloadViolation` naming the
    first offending field in declaration order.
    """
    return _check_record(schema.fields, payload, "")


# ---------------------------------------------------------------------------
# Persistence and hashing
# ---------------------------------------------------------------------------

def _kind_to_dict(kind: FieldKind) -> dict[str, Any]:
    if isinstance(kind, TextKind):
        return {"k": "text"}
    if isinstance(kind, IntegerKind):
        return {"k": "integer"}
    if isinstance(kind, BoundedIntKind):
        return {"k": "bounded_integer", "lo": kind.lo, "hi": kind.hi}
    if isinstance(kind, EnumKind):
        return {"k": "enumeration", "values": list(kind.values)}
    if isinstance(kind, ListKind):
        return {"k": "list", "item": _field_to_dict(kind.item)}
    if isinstance(kind, RecordKind):
        return {"k": "record", "fields": [_field_to_dict(f) for f in kind.fields]}
    raise SchemaError(f"unknown kind: {kind!r}")  # pragma: no cover


def _field_to_dict(f: FieldSpec) -> dict[str, Any]:
    return {"name": f.name, "doc": f.doc, **_kind_to_dict(f.kind)}


def _kind_from_dict(d: Mapping[str, Any]) -> FieldKind:
    k = d["k"]
    if k == "text":
        return TextKind()
    if k == "integer":
        return IntegerKind()
    if k == "bounded_integer":
        return BoundedIntKind(d["lo"], d["hi"])
    if k == "enumeration":
        return EnumKind(tuple(d["values"]))
    if k == "list":
        return ListKind(_field_from_dict(d["item"]))
    if k == "record":
        return RecordKind(tuple(_field_from_dict(f) for f in d["fields"]))
    raise SchemaError(f"unknown kind tag: {k!r}")


def _field_from_dict(d: Mapping[str, Any]) -> FieldSpec:
    return FieldSpec(d["name"], _kind_from_dict(d), d.get("doc", ""))


def schema_to_dict(schema: Schema) -> dict[str, Any]:
    return {"fields": [_field_to_dict(f) for f in schema.fields]}


def schema_from_dict(d: Mapping[str, Any]) -> Schema:
    return Schema(tuple(_field_from_dict(f) for f in d["fields"]))


def spec_to_dict(spec: SubroutineSpec) -> dict[str, Any]:
    return {
        "name": spec.name,
        "task_doc": spec.task_doc,
        "input_schema": schema_to_dict(spec.input_schema),
        "output_schema": schema_to_dict(spec.output_schema),
        "context": spec.context,
    }


def spec_from_dict(d: Mapping[str, Any]) -> SubroutineSpec:
    return SubroutineSpec(
        name=d["name"],
        task_doc=d["task_doc"],
        input_schema=schema_from_dict(d["input_schema"]),
        output_schema=schema_from_dict(d["output_schema"]),
        context=d.get("context"),
    )


def schema_hash(schema: Schema) -> str:
    blob = json.dumps(schema_to_dict(schema), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def spec_hash(spec: SubroutineSpec) -> str:
    blob = json.dumps(spec_to_dict(spec), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


# ---------------------------------------------------------------------------
# Declaration rendering (used verbatim inside the prompt-engineer meta prompt)
# ---------------------------------------------------------------------------

def _render_kind(kind: FieldKind) -> str:
    if isinstance(kind, TextKind):
        return "text"
    if isinstance(kind, IntegerKind):
        return "integer"
    if isinstance(kind, BoundedIntKind):
        return f"integer in [{kind.lo}, {kind.hi}]"
    if isinstance(kind, EnumKind):
        return "one of {" + ", ".join(kind.values) + "}"
    if isinstance(kind, ListKind):
        return f"list of {_render_kind(kind.item.kind)}"
    if isinstance(kind, RecordKind):
        inner = "; ".join(f"{f.name}: {_render_kind(f.kind)}" for f in kind.fields)
        return "record {" + inner + "}"
    raise SchemaError(f"unknown kind: {kind!r}")  # pragma: no cover


def _render_schema_block(title: str, schema: Schema) -> str:
    lines = [f"{title}:"]
    if not schema.fields:
        lines.append("  (no fields)")
    for f in schema.fields:
        doc = f" -- {f.doc}" if f.doc else ""
        lines.append(f"  {f.name}: {_render_kind(f.kind)}{doc}")
    return "\n".join(lines)


def serialize_declaration(spec: SubroutineSpec) -> str:
    """Deterministic human-readable rendering of a subroutine declaration.

    Equal specs produce byte-identical text. The format is documented in
    docs/serialization.md.
    """
    parts = [
        f"Subroutine: {spec.name}",
        f"Task: {spec.task_doc.strip()}",
        _render_schema_block("Input fields", spec.input_schema),
        _render_schema_block("Output fields", spec.output_schema),
    ]
    if spec.context:
        parts.append(f"Context:\n{spec.context.strip()}")
    return "\n\n".join(parts) + "\n"
