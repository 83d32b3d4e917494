"""Statically typed subroutine declarations over pydantic models.

Lets callers declare a subroutine the way they would declare a function:
typed input and output models plus a docstring. The models compile to the
runtime schemas used for constrained generation, and ``TypedSubroutine`` is
generic in both models so a type checker verifies call sites before anything
executes (the repo's CI runs that gate; see scripts/typecheck.sh).

Example::

    class Input(BaseModel):
        given_text: str = Field(description="The given text")

    class Output(BaseModel):
        scratch_work: str = Field(description="A place for scratch work")
        character_count: int = Field(description="Number of instances in the text")

    counter = declare("count_rare_letter_words",
                      "Count the number of words containing rare letters.",
                      Input, Output)
    result: Output = counter(engine, Input(given_text="..."))
"""

from __future__ import annotations

import typing
from dataclasses import dataclass
from typing import Generic, TypeVar

from pydantic import BaseModel
from pydantic.fields import FieldInfo

from .engine import SubroutineEngine, SubroutineHandle
from .schema import (
    BoundedIntKind,
    EnumKind,
    FieldKind,
    FieldSpec,
    IntegerKind,
    ListKind,
    RecordKind,
    Schema,
    SchemaError,
    SubroutineSpec,
    TextKind,
)

I = TypeVar("I", bound=BaseModel)
O = TypeVar("O", bound=BaseModel)


def _bounds(info: FieldInfo) -> tuple[int | None, int | None]:
    lo = hi = None
    for meta in info.metadata:
        lo = getattr(meta, "ge", lo)
        hi = getattr(meta, "le", hi)
    return lo, hi


def _kind_for(annotation: object, info: FieldInfo | None = None) -> FieldKind:
    origin = typing.get_origin(annotation)
    if annotation is str:
        return TextKind()
    if annotation is int:
        if info is not None:
            lo, hi = _bounds(info)
            if lo is not None and hi is not None:
                return BoundedIntKind(int(lo), int(hi))
        return IntegerKind()
    if origin is typing.Literal:
        values = typing.get_args(annotation)
        if not all(isinstance(v, str) for v in values):
            raise SchemaError("enumerations must be string literals")
        return EnumKind(tuple(values))
    if origin in (list, typing.List):
        (item,) = typing.get_args(annotation)
        return ListKind(FieldSpec("item", _kind_for(item)))
    if isinstance(annotation, type) and issubclass(annotation, BaseModel):
        return RecordKind(schema_from_model(annotation).fields)
    raise SchemaError(f"unsupported annotation for a subroutine field: {annotation!r}")


def schema_from_model(model: type[BaseModel]) -> Schema:
    fields = []
    for name, info in model.model_fields.items():
        fields.append(FieldSpec(name, _kind_for(info.annotation, info), info.description or ""))
    return Schema(tuple(fields))


@dataclass(frozen=True)
class TypedSubroutine(Generic[I, O]):
    """A registered subroutine with statically checkable input and output."""

    handle: SubroutineHandle
    input_model: type[I]
    output_model: type[O]

    def __call__(self, engine: SubroutineEngine, value: I, parents: tuple[str, ...] = ()) -> O:
        record = engine.invoke(self.handle, value.model_dump(), parents)
        if record.status != "succeeded" or record.output_payload is None:
            raise RuntimeError(f"invocation failed: {record.error}")
        return self.output_model.model_validate(record.output_payload)


def declare(
    engine: SubroutineEngine,
    name: str,
    task_doc: str,
    input_model: type[I],
    output_model: type[O],
    context: str | None = None,
) -> TypedSubroutine[I, O]:
    spec = SubroutineSpec(
        name=name,
        task_doc=task_doc,
        input_schema=schema_from_model(input_model),
        output_schema=schema_from_model(output_model),
        context=context,
    )
    return TypedSubroutine(engine.register(spec), input_model, output_model)
