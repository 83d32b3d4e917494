"""Auditable LM-powered subroutines with online prompt selection.

System prompts for each declared subroutine are chosen by a Boltzmann bandit
over explored prompts plus a persistent exploration arm; self-critique loops
score candidate outputs, sparse reviewer ratings align the critiques, and
every input, prompt, output, and feedback record lands in a relational audit
store with full dependency lineage. Ships with CommentNEPA, a four-stage
public-comment processing pipeline, and an evaluation harness.
"""

from .bandit import (
    EXPLORE,
    ArmStats,
    BanditState,
    BetaSchedule,
    beta_at,
    draw,
    expected_loss,
    explore_loss,
    record_loss,
    sample_distribution,
)
from .backends import (
    GenerationRequest,
    GenerationResult,
    HttpBackend,
    PoolEntry,
    ScriptedArmProfile,
    ScriptedBackend,
    count_rare_letter_words,
    fingerprint,
)
from .critique import (
    LoopConfig,
    LoopTrace,
    RatingDimension,
    critique_loss,
    derive_critique_spec,
    propagate_sme_feedback,
    rating_to_loss,
    self_critique_loop,
)
from .engine import SubroutineEngine, SubroutineHandle
from .pipeline import (
    BinDef,
    CommentPipeline,
    Letter,
    PipelineConfig,
    verify_quote,
)
from .schema import (
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
    serialize_declaration,
    validate_payload,
)
from .store import AuditStore
from .taskqueue import TaskQueue, Worker, WorkerPool

__version__ = "0.1.0"
