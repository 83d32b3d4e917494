"""Single durable source of truth backed by SQLite.

Append-only records of subroutines, arms, invocations, dependency edges,
feedback, tasks, and batches, with dependency-DAG traversal for on-demand
audit. Arm statistics (and the per-invocation loss rows that feed them) are
the sole mutable state; invocation and feedback rows are never updated or
deleted.

The full relational schema is documented field-by-field in docs/store-schema.md.

Accounting model: persisting an invocation counts one pull on its arm. A loss
becomes associated with the invocation later (from a critique, a ground-truth
scorer, or a reviewer) via ``apply_loss``; re-rating the same invocation
replaces its loss contribution rather than adding a second pull, so an arm's
mean loss is always the mean of one loss per pulled invocation and the sum of
pull counts equals the number of persisted invocations.
"""

from __future__ import annotations

import dataclasses
import json
import sqlite3
import threading
import time
from dataclasses import dataclass
from typing import Any, Mapping

from .bandit import ArmStats, BanditState
from .schema import SubroutineSpec, spec_from_dict, spec_to_dict

_SCHEMA_VERSION = 1

_DDL = """
CREATE TABLE IF NOT EXISTS meta (
    key TEXT PRIMARY KEY,
    value TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS counters (
    name TEXT PRIMARY KEY,
    value INTEGER NOT NULL
);
CREATE TABLE IF NOT EXISTS subroutines (
    subroutine_id TEXT PRIMARY KEY,
    name TEXT NOT NULL,
    spec_json TEXT NOT NULL,
    critique_of TEXT NULL REFERENCES subroutines(subroutine_id)
);
CREATE TABLE IF NOT EXISTS arms (
    subroutine_id TEXT NOT NULL REFERENCES subroutines(subroutine_id),
    arm_id TEXT NOT NULL,
    prompt_text TEXT NOT NULL,
    pull_count INTEGER NOT NULL DEFAULT 0,
    loss_sum REAL NOT NULL DEFAULT 0,
    created_seq INTEGER NOT NULL,
    PRIMARY KEY (subroutine_id, arm_id)
);
CREATE TABLE IF NOT EXISTS invocations (
    invocation_id TEXT PRIMARY KEY,
    subroutine_id TEXT NULL REFERENCES subroutines(subroutine_id),
    arm_id TEXT NULL,
    input_json TEXT NOT NULL,
    output_json TEXT NULL,
    user_payload TEXT NULL,
    raw_output TEXT NULL,
    request_seed INTEGER NULL,
    constraint_doc TEXT NULL,
    status TEXT NOT NULL CHECK (status IN ('succeeded', 'failed')),
    error TEXT NULL,
    batch_id TEXT NULL,
    stage TEXT NULL,
    item_key TEXT NULL,
    seq INTEGER NOT NULL,
    created_at REAL NOT NULL
);
CREATE TABLE IF NOT EXISTS edges (
    child TEXT NOT NULL REFERENCES invocations(invocation_id),
    parent TEXT NOT NULL REFERENCES invocations(invocation_id),
    PRIMARY KEY (child, parent)
);
CREATE TABLE IF NOT EXISTS invocation_losses (
    invocation_id TEXT PRIMARY KEY REFERENCES invocations(invocation_id),
    loss REAL NOT NULL
);
CREATE TABLE IF NOT EXISTS feedback (
    feedback_id TEXT PRIMARY KEY,
    submission_id TEXT NULL UNIQUE,
    invocation_id TEXT NOT NULL REFERENCES invocations(invocation_id),
    reviewer_id TEXT NOT NULL,
    source TEXT NOT NULL CHECK (source IN ('sme', 'critique')),
    ratings_json TEXT NOT NULL,
    loss REAL NOT NULL,
    comment TEXT NULL,
    late INTEGER NOT NULL DEFAULT 0,
    seq INTEGER NOT NULL,
    created_at REAL NOT NULL
);
CREATE TABLE IF NOT EXISTS tasks (
    task_id TEXT PRIMARY KEY,
    kind TEXT NOT NULL,
    payload TEXT NOT NULL,
    idempotency_key TEXT NOT NULL UNIQUE,
    attempts INTEGER NOT NULL DEFAULT 0,
    max_attempts INTEGER NOT NULL,
    state TEXT NOT NULL CHECK (state IN ('pending', 'leased', 'done', 'dead')),
    lease_expiry REAL NULL,
    worker_id TEXT NULL,
    reason TEXT NULL,
    seq INTEGER NOT NULL
);
CREATE TABLE IF NOT EXISTS batches (
    batch_id TEXT PRIMARY KEY,
    run_id TEXT NOT NULL,
    position INTEGER NOT NULL,
    letter_ids_json TEXT NOT NULL,
    state TEXT NOT NULL CHECK (state IN ('processing', 'reviewable')),
    seq INTEGER NOT NULL
);
CREATE TABLE IF NOT EXISTS arm_snapshots (
    batch_id TEXT NOT NULL,
    subroutine_id TEXT NOT NULL,
    arm_id TEXT NOT NULL,
    prompt_text TEXT NOT NULL,
    pull_count INTEGER NOT NULL,
    loss_sum REAL NOT NULL,
    PRIMARY KEY (batch_id, subroutine_id, arm_id)
);
CREATE TABLE IF NOT EXISTS stage_outputs (
    batch_id TEXT NOT NULL,
    stage TEXT NOT NULL,
    item_key TEXT NOT NULL,
    invocation_id TEXT NULL,
    payload_json TEXT NOT NULL,
    PRIMARY KEY (batch_id, stage, item_key)
);
CREATE TABLE IF NOT EXISTS letters (
    letter_id TEXT PRIMARY KEY,
    text TEXT NOT NULL,
    metadata_json TEXT NOT NULL,
    ingest_invocation_id TEXT NULL
);
CREATE TABLE IF NOT EXISTS events (
    event_id INTEGER PRIMARY KEY AUTOINCREMENT,
    kind TEXT NOT NULL,
    invocation_id TEXT NULL,
    batch_id TEXT NULL,
    detail TEXT NOT NULL,
    created_at REAL NOT NULL
);
CREATE INDEX IF NOT EXISTS idx_invocations_batch_stage ON invocations(batch_id, stage);
CREATE INDEX IF NOT EXISTS idx_edges_child ON edges(child);
CREATE INDEX IF NOT EXISTS idx_edges_parent ON edges(parent);
CREATE INDEX IF NOT EXISTS idx_feedback_invocation ON feedback(invocation_id);
CREATE INDEX IF NOT EXISTS idx_tasks_state ON tasks(state);
"""


class StoreError(Exception):
    pass


class DuplicateInvocationError(StoreError):
    pass


class DanglingParentError(StoreError):
    pass


class CycleError(StoreError):
    pass


class UnknownIdError(StoreError):
    pass


@dataclass(frozen=True)
class InvocationRecord:
    invocation_id: str
    subroutine_id: str | None
    arm_id: str | None
    input_payload: dict[str, Any]
    output_payload: dict[str, Any] | None
    status: str
    parent_ids: tuple[str, ...] = ()
    error: str | None = None
    user_payload: str | None = None
    raw_output: str | None = None
    request_seed: int | None = None
    constraint_doc: str | None = None
    batch_id: str | None = None
    stage: str | None = None
    item_key: str | None = None
    seq: int = 0
    created_at: float = 0.0


@dataclass(frozen=True)
class DependencyEdge:
    child: str
    parent: str


@dataclass(frozen=True)
class FeedbackRecord:
    feedback_id: str
    invocation_id: str
    reviewer_id: str
    source: str
    ratings: dict[str, int]
    loss: float
    comment: str | None
    late: bool
    submission_id: str | None = None
    created_at: float = 0.0


@dataclass(frozen=True)
class TraceNode:
    invocation: InvocationRecord
    prompt_text: str | None
    feedback: tuple[FeedbackRecord, ...]


@dataclass(frozen=True)
class AuditTrace:
    root: str
    nodes: tuple[TraceNode, ...]
    edges: tuple[DependencyEdge, ...]


class AuditStore:
    """Transactional store shared by the engine, queue, pipeline, and API.

    One connection per thread; writes run inside ``transaction()`` blocks
    (BEGIN IMMEDIATE), which nest by joining the outermost transaction so a
    whole task execution can commit atomically.
    """

    def __init__(self, path: str):
        self.path = path
        self._local = threading.local()
        conn = self._conn()
        conn.executescript(_DDL)  # runs its own implicit transaction
        with self.transaction():
            conn.execute(
                "INSERT OR IGNORE INTO meta (key, value) VALUES ('schema_version', ?)",
                (str(_SCHEMA_VERSION),),
            )
            conn.execute(
                "INSERT OR IGNORE INTO counters (name, value) VALUES ('seq', 0)"
            )

    def _conn(self) -> sqlite3.Connection:
        conn = getattr(self._local, "conn", None)
        if conn is None:
            conn = sqlite3.connect(self.path, isolation_level=None, timeout=30.0)
            conn.row_factory = sqlite3.Row
            conn.execute("PRAGMA journal_mode=WAL")
            conn.execute("PRAGMA synchronous=FULL")
            conn.execute("PRAGMA busy_timeout=30000")
            conn.execute("PRAGMA foreign_keys=ON")
            self._local.conn = conn
        return conn

    def close(self) -> None:
        conn = getattr(self._local, "conn", None)
        if conn is not None:
            conn.close()
            self._local.conn = None

    # -- transactions ---------------------------------------------------------

    class _Transaction:
        def __init__(self, store: "AuditStore"):
            self.store = store

        def __enter__(self) -> sqlite3.Connection:
            depth = getattr(self.store._local, "tx_depth", 0)
            if depth == 0:
                self.store._conn().execute("BEGIN IMMEDIATE")
            self.store._local.tx_depth = depth + 1
            return self.store._conn()

        def __exit__(self, exc_type: Any, exc: Any, tb: Any) -> None:
            depth = self.store._local.tx_depth - 1
            self.store._local.tx_depth = depth
            if depth == 0:
                if exc_type is None:
                    self.store._conn().execute("COMMIT")
                else:
                    self.store._conn().execute("ROLLBACK")

    def transaction(self) -> "AuditStore._Transaction":
        return AuditStore._Transaction(self)

    def next_seq(self) -> int:
        with self.transaction() as conn:
            row = conn.execute(
                "UPDATE counters SET value = value + 1 WHERE name = 'seq' RETURNING value"
            ).fetchone()
            return int(row["value"])

    # -- subroutines ----------------------------------------------------------

    def upsert_subroutine(
        self, subroutine_id: str, spec: SubroutineSpec, critique_of: str | None = None
    ) -> None:
        with self.transaction() as conn:
            conn.execute(
                "INSERT OR IGNORE INTO subroutines (subroutine_id, name, spec_json, critique_of)"
                " VALUES (?, ?, ?, ?)",
                (subroutine_id, spec.name, json.dumps(spec_to_dict(spec)), critique_of),
            )

    def get_subroutine(self, subroutine_id: str) -> tuple[SubroutineSpec, str | None]:
        row = self._conn().execute(
            "SELECT spec_json, critique_of FROM subroutines WHERE subroutine_id = ?",
            (subroutine_id,),
        ).fetchone()
        if row is None:
            raise UnknownIdError(f"unknown subroutine: {subroutine_id}")
        return spec_from_dict(json.loads(row["spec_json"])), row["critique_of"]

    def list_subroutines(self) -> list[tuple[str, str, str | None]]:
        rows = self._conn().execute(
            "SELECT subroutine_id, name, critique_of FROM subroutines ORDER BY subroutine_id"
        ).fetchall()
        return [(r["subroutine_id"], r["name"], r["critique_of"]) for r in rows]

    def critiques_of(self, subroutine_id: str) -> list[str]:
        rows = self._conn().execute(
            "SELECT subroutine_id FROM subroutines WHERE critique_of = ?", (subroutine_id,)
        ).fetchall()
        return [r["subroutine_id"] for r in rows]

    # -- arms -----------------------------------------------------------------

    def create_arm(self, subroutine_id: str, arm_id: str, prompt_text: str) -> None:
        with self.transaction() as conn:
            conn.execute(
                "INSERT OR IGNORE INTO arms (subroutine_id, arm_id, prompt_text, pull_count,"
                " loss_sum, created_seq) VALUES (?, ?, ?, 0, 0, ?)",
                (subroutine_id, arm_id, prompt_text, self.next_seq()),
            )

    def arm_prompt(self, subroutine_id: str, arm_id: str) -> str:
        row = self._conn().execute(
            "SELECT prompt_text FROM arms WHERE subroutine_id = ? AND arm_id = ?",
            (subroutine_id, arm_id),
        ).fetchone()
        if row is None:
            raise UnknownIdError(f"unknown arm: {arm_id}")
        return row["prompt_text"]

    def arm_rows(self, subroutine_id: str) -> list[sqlite3.Row]:
        return self._conn().execute(
            "SELECT * FROM arms WHERE subroutine_id = ? ORDER BY created_seq",
            (subroutine_id,),
        ).fetchall()

    def bandit_state(self, subroutine_id: str, beta: float) -> BanditState:
        """Live bandit state over arms that have been pulled at least once."""
        arms = tuple(
            ArmStats(r["arm_id"], r["pull_count"], r["loss_sum"])
            for r in self.arm_rows(subroutine_id)
            if r["pull_count"] >= 1
        )
        trial_index = sum(a.pull_count for a in arms)
        return BanditState(subroutine_id, arms, trial_index, beta)

    def total_pulls(self, subroutine_id: str) -> int:
        row = self._conn().execute(
            "SELECT COALESCE(SUM(pull_count), 0) AS n FROM arms WHERE subroutine_id = ?",
            (subroutine_id,),
        ).fetchone()
        return int(row["n"])

    # -- invocations ------------------------------------------------------------

    def persist_invocation(self, record: InvocationRecord) -> InvocationRecord:
        """Commit an invocation and its parent edges in one transaction.

        Counts one pull on the invocation's arm. Parents must already exist;
        self-edges and duplicate ids are rejected. Records are immutable once
        committed.
        """
        with self.transaction() as conn:
            exists = conn.execute(
                "SELECT 1 FROM invocations WHERE invocation_id = ?",
                (record.invocation_id,),
            ).fetchone()
            if exists:
                raise DuplicateInvocationError(record.invocation_id)
            for parent in record.parent_ids:
                if parent == record.invocation_id:
                    raise CycleError(f"self-edge on {parent}")
                row = conn.execute(
                    "SELECT 1 FROM invocations WHERE invocation_id = ?", (parent,)
                ).fetchone()
                if row is None:
                    raise DanglingParentError(parent)
            seq = self.next_seq()
            created_at = time.time()
            conn.execute(
                "INSERT INTO invocations (invocation_id, subroutine_id, arm_id, input_json,"
                " output_json, user_payload, raw_output, request_seed, constraint_doc, status,"
                " error, batch_id, stage, item_key, seq, created_at)"
                " VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?)",
                (
                    record.invocation_id,
                    record.subroutine_id,
                    record.arm_id,
                    json.dumps(record.input_payload),
                    json.dumps(record.output_payload) if record.output_payload is not None else None,
                    record.user_payload,
                    record.raw_output,
                    record.request_seed,
                    record.constraint_doc,
                    record.status,
                    record.error,
                    record.batch_id,
                    record.stage,
                    record.item_key,
                    seq,
                    created_at,
                ),
            )
            for parent in record.parent_ids:
                conn.execute(
                    "INSERT INTO edges (child, parent) VALUES (?, ?)",
                    (record.invocation_id, parent),
                )
            if record.subroutine_id is not None and record.arm_id is not None:
                updated = conn.execute(
                    "UPDATE arms SET pull_count = pull_count + 1"
                    " WHERE subroutine_id = ? AND arm_id = ?",
                    (record.subroutine_id, record.arm_id),
                ).rowcount
                if updated != 1:
                    raise UnknownIdError(
                        f"arm {record.arm_id} not registered for {record.subroutine_id}"
                    )
            return dataclasses.replace(record, seq=seq, created_at=created_at)

    def _row_to_invocation(self, row: sqlite3.Row) -> InvocationRecord:
        parents = tuple(
            r["parent"]
            for r in self._conn().execute(
                "SELECT parent FROM edges WHERE child = ? ORDER BY parent",
                (row["invocation_id"],),
            )
        )
        return InvocationRecord(
            invocation_id=row["invocation_id"],
            subroutine_id=row["subroutine_id"],
            arm_id=row["arm_id"],
            input_payload=json.loads(row["input_json"]),
            output_payload=json.loads(row["output_json"]) if row["output_json"] else None,
            status=row["status"],
            parent_ids=parents,
            error=row["error"],
            user_payload=row["user_payload"],
            raw_output=row["raw_output"],
            request_seed=row["request_seed"],
            constraint_doc=row["constraint_doc"],
            batch_id=row["batch_id"],
            stage=row["stage"],
            item_key=row["item_key"],
            seq=row["seq"],
            created_at=row["created_at"],
        )

    def get_invocation(self, invocation_id: str) -> InvocationRecord:
        row = self._conn().execute(
            "SELECT * FROM invocations WHERE invocation_id = ?", (invocation_id,)
        ).fetchone()
        if row is None:
            raise UnknownIdError(f"unknown invocation: {invocation_id}")
        return self._row_to_invocation(row)

    def invocation_exists(self, invocation_id: str) -> bool:
        row = self._conn().execute(
            "SELECT 1 FROM invocations WHERE invocation_id = ?", (invocation_id,)
        ).fetchone()
        return row is not None

    def list_invocations(
        self,
        subroutine_id: str | None = None,
        batch_id: str | None = None,
        stage: str | None = None,
    ) -> list[InvocationRecord]:
        clauses, args = [], []
        if subroutine_id is not None:
            clauses.append("subroutine_id = ?")
            args.append(subroutine_id)
        if batch_id is not None:
            clauses.append("batch_id = ?")
            args.append(batch_id)
        if stage is not None:
            clauses.append("stage = ?")
            args.append(stage)
        where = (" WHERE " + " AND ".join(clauses)) if clauses else ""
        rows = self._conn().execute(
            f"SELECT * FROM invocations{where} ORDER BY seq", args
        ).fetchall()
        return [self._row_to_invocation(r) for r in rows]

    def children_of(self, invocation_id: str, subroutine_id: str | None = None) -> list[InvocationRecord]:
        rows = self._conn().execute(
            "SELECT i.* FROM edges e JOIN invocations i ON i.invocation_id = e.child"
            " WHERE e.parent = ? ORDER BY i.seq",
            (invocation_id,),
        ).fetchall()
        out = [self._row_to_invocation(r) for r in rows]
        if subroutine_id is not None:
            out = [r for r in out if r.subroutine_id == subroutine_id]
        return out

    # -- loss accounting --------------------------------------------------------

    def applied_loss(self, invocation_id: str) -> float | None:
        row = self._conn().execute(
            "SELECT loss FROM invocation_losses WHERE invocation_id = ?", (invocation_id,)
        ).fetchone()
        return None if row is None else float(row["loss"])

    def apply_loss(self, invocation_id: str, loss: float) -> None:
        """Attach (or replace) the loss observation for one invocation.

        The invocation's arm absorbs the difference, keeping its loss_sum the
        sum of exactly one loss per pulled invocation.
        """
        if not (0.0 <= loss <= 1.0):
            raise ValueError(f"loss must lie in [0, 1], got {loss}")
        with self.transaction() as conn:
            inv = self.get_invocation(invocation_id)
            previous = self.applied_loss(invocation_id) or 0.0
            conn.execute(
                "INSERT INTO invocation_losses (invocation_id, loss) VALUES (?, ?)"
                " ON CONFLICT(invocation_id) DO UPDATE SET loss = excluded.loss",
                (invocation_id, loss),
            )
            if inv.subroutine_id is not None and inv.arm_id is not None:
                conn.execute(
                    "UPDATE arms SET loss_sum = loss_sum + ? WHERE subroutine_id = ? AND arm_id = ?",
                    (loss - previous, inv.subroutine_id, inv.arm_id),
                )

    # -- feedback ---------------------------------------------------------------

    def record_feedback(
        self,
        feedback_id: str,
        invocation_id: str,
        reviewer_id: str,
        source: str,
        ratings: Mapping[str, int],
        loss: float,
        comment: str | None = None,
        late: bool = False,
        submission_id: str | None = None,
    ) -> FeedbackRecord:
        with self.transaction() as conn:
            if not self.invocation_exists(invocation_id):
                raise UnknownIdError(f"unknown invocation: {invocation_id}")
            if submission_id is not None:
                row = conn.execute(
                    "SELECT * FROM feedback WHERE submission_id = ?", (submission_id,)
                ).fetchone()
                if row is not None:
                    return self._row_to_feedback(row)
            created_at = time.time()
            conn.execute(
                "INSERT INTO feedback (feedback_id, submission_id, invocation_id, reviewer_id,"
                " source, ratings_json, loss, comment, late, seq, created_at)"
                " VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?)",
                (
                    feedback_id,
                    submission_id,
                    invocation_id,
                    reviewer_id,
                    source,
                    json.dumps(dict(ratings)),
                    loss,
                    comment,
                    1 if late else 0,
                    self.next_seq(),
                    created_at,
                ),
            )
            return FeedbackRecord(
                feedback_id, invocation_id, reviewer_id, source, dict(ratings),
                loss, comment, late, submission_id, created_at,
            )

    def _row_to_feedback(self, row: sqlite3.Row) -> FeedbackRecord:
        return FeedbackRecord(
            feedback_id=row["feedback_id"],
            invocation_id=row["invocation_id"],
            reviewer_id=row["reviewer_id"],
            source=row["source"],
            ratings=json.loads(row["ratings_json"]),
            loss=row["loss"],
            comment=row["comment"],
            late=bool(row["late"]),
            submission_id=row["submission_id"],
            created_at=row["created_at"],
        )

    def feedback_for(self, invocation_id: str) -> list[FeedbackRecord]:
        rows = self._conn().execute(
            "SELECT * FROM feedback WHERE invocation_id = ? ORDER BY seq", (invocation_id,)
        ).fetchall()
        return [self._row_to_feedback(r) for r in rows]

    # -- traces -------------------------------------------------------------------

    def trace(self, invocation_id: str) -> AuditTrace:
        """Full ancestor closure of an invocation with prompts and feedback.

        Node order is topological (parents before children), ties broken by
        persistence order, so rendering a trace is deterministic.
        """
        if not self.invocation_exists(invocation_id):
            raise UnknownIdError(f"unknown invocation: {invocation_id}")
        conn = self._conn()
        nodes: dict[str, InvocationRecord] = {}
        edges: list[DependencyEdge] = []
        frontier = [invocation_id]
        while frontier:
            current = frontier.pop()
            if current in nodes:
                continue
            nodes[current] = self.get_invocation(current)
            for parent in nodes[current].parent_ids:
                edges.append(DependencyEdge(current, parent))
                if parent not in nodes:
                    frontier.append(parent)
        # Kahn over the ancestor subgraph, ready set ordered by seq.
        pending = {nid: set(n.parent_ids) & nodes.keys() for nid, n in nodes.items()}
        ordered: list[str] = []
        while pending:
            ready = sorted(
                (nid for nid, deps in pending.items() if not deps),
                key=lambda nid: nodes[nid].seq,
            )
            if not ready:
                raise CycleError(f"cycle detected in ancestors of {invocation_id}")
            for nid in ready:
                ordered.append(nid)
                del pending[nid]
            for deps in pending.values():
                deps.difference_update(ready)
        trace_nodes = []
        for nid in ordered:
            inv = nodes[nid]
            prompt = None
            if inv.subroutine_id is not None and inv.arm_id is not None:
                prompt = self.arm_prompt(inv.subroutine_id, inv.arm_id)
            trace_nodes.append(TraceNode(inv, prompt, tuple(self.feedback_for(nid))))
        dedup_edges = sorted(set(edges), key=lambda e: (nodes[e.child].seq, nodes[e.parent].seq))
        return AuditTrace(invocation_id, tuple(trace_nodes), tuple(dedup_edges))

    # -- batches and snapshots ------------------------------------------------------

    def create_batch(self, batch_id: str, run_id: str, position: int, letter_ids: list[str]) -> None:
        with self.transaction() as conn:
            conn.execute(
                "INSERT OR IGNORE INTO batches (batch_id, run_id, position, letter_ids_json,"
                " state, seq) VALUES (?, ?, ?, ?, 'processing', ?)",
                (batch_id, run_id, position, json.dumps(letter_ids), self.next_seq()),
            )

    def get_batch(self, batch_id: str) -> sqlite3.Row:
        row = self._conn().execute(
            "SELECT * FROM batches WHERE batch_id = ?", (batch_id,)
        ).fetchone()
        if row is None:
            raise UnknownIdError(f"unknown batch: {batch_id}")
        return row

    def list_batches(self, run_id: str | None = None) -> list[sqlite3.Row]:
        if run_id is None:
            return self._conn().execute("SELECT * FROM batches ORDER BY seq").fetchall()
        return self._conn().execute(
            "SELECT * FROM batches WHERE run_id = ? ORDER BY position", (run_id,)
        ).fetchall()

    def set_batch_state(self, batch_id: str, state: str) -> None:
        with self.transaction() as conn:
            conn.execute("UPDATE batches SET state = ? WHERE batch_id = ?", (state, batch_id))

    def snapshot_arms(self, batch_id: str, subroutine_ids: list[str]) -> None:
        """Freeze current arm statistics for sampling during one batch."""
        with self.transaction() as conn:
            for sid in subroutine_ids:
                for r in self.arm_rows(sid):
                    conn.execute(
                        "INSERT OR IGNORE INTO arm_snapshots (batch_id, subroutine_id, arm_id,"
                        " prompt_text, pull_count, loss_sum) VALUES (?, ?, ?, ?, ?, ?)",
                        (batch_id, sid, r["arm_id"], r["prompt_text"], r["pull_count"], r["loss_sum"]),
                    )

    def snapshot_state(self, batch_id: str, subroutine_id: str, beta: float) -> BanditState | None:
        rows = self._conn().execute(
            "SELECT * FROM arm_snapshots WHERE batch_id = ? AND subroutine_id = ?",
            (batch_id, subroutine_id),
        ).fetchall()
        arms = tuple(
            ArmStats(r["arm_id"], r["pull_count"], r["loss_sum"])
            for r in rows
            if r["pull_count"] >= 1
        )
        if not rows:
            return None
        return BanditState(subroutine_id, arms, sum(a.pull_count for a in arms), beta)

    def has_snapshot(self, batch_id: str) -> bool:
        row = self._conn().execute(
            "SELECT 1 FROM arm_snapshots WHERE batch_id = ? LIMIT 1", (batch_id,)
        ).fetchone()
        return row is not None

    def snapshot_rows(self, batch_id: str) -> list[sqlite3.Row]:
        return self._conn().execute(
            "SELECT * FROM arm_snapshots WHERE batch_id = ? ORDER BY subroutine_id, arm_id",
            (batch_id,),
        ).fetchall()

    # -- stage outputs ----------------------------------------------------------------

    def record_stage_output(
        self, batch_id: str, stage: str, item_key: str, invocation_id: str | None, payload: Any
    ) -> None:
        with self.transaction() as conn:
            conn.execute(
                "INSERT OR IGNORE INTO stage_outputs (batch_id, stage, item_key, invocation_id,"
                " payload_json) VALUES (?, ?, ?, ?, ?)",
                (batch_id, stage, item_key, invocation_id, json.dumps(payload)),
            )

    def get_stage_output(self, batch_id: str, stage: str, item_key: str) -> Any | None:
        row = self._conn().execute(
            "SELECT payload_json FROM stage_outputs WHERE batch_id = ? AND stage = ?"
            " AND item_key = ?",
            (batch_id, stage, item_key),
        ).fetchone()
        return None if row is None else json.loads(row["payload_json"])

    def stage_outputs(self, batch_id: str, stage: str) -> list[sqlite3.Row]:
        return self._conn().execute(
            "SELECT * FROM stage_outputs WHERE batch_id = ? AND stage = ? ORDER BY item_key",
            (batch_id, stage),
        ).fetchall()

    def list_review_items(self, batch_id: str, stage: str) -> list[dict[str, Any]]:
        """Review surface for one batch and stage, in stable order.

        One entry per stage output (its selected invocation with any feedback
        attached) plus one flagged entry per dead task of that stage.
        """
        self.get_batch(batch_id)
        items: list[dict[str, Any]] = []
        for row in self.stage_outputs(batch_id, stage):
            inv = self.get_invocation(row["invocation_id"]) if row["invocation_id"] else None
            items.append(
                {
                    "item_key": row["item_key"],
                    "status": "succeeded",
                    "invocation": inv,
                    "output": json.loads(row["payload_json"]),
                    "feedback": self.feedback_for(row["invocation_id"]) if row["invocation_id"] else [],
                }
            )
        dead = self._conn().execute(
            "SELECT * FROM tasks WHERE state = 'dead' ORDER BY seq"
        ).fetchall()
        for t in dead:
            payload = json.loads(t["payload"])
            if payload.get("batch_id") == batch_id and payload.get("stage") == stage:
                items.append(
                    {
                        "item_key": payload.get("item_key", t["task_id"]),
                        "status": "failed",
                        "invocation": None,
                        "output": None,
                        "feedback": [],
                        "reason": t["reason"],
                    }
                )
        return items

    # -- letters ----------------------------------------------------------------------

    def upsert_letter(self, letter_id: str, text: str, metadata: Mapping[str, Any]) -> None:
        with self.transaction() as conn:
            conn.execute(
                "INSERT OR IGNORE INTO letters (letter_id, text, metadata_json) VALUES (?, ?, ?)",
                (letter_id, text, json.dumps(dict(metadata))),
            )

    def set_letter_ingest(self, letter_id: str, invocation_id: str) -> None:
        with self.transaction() as conn:
            conn.execute(
                "UPDATE letters SET ingest_invocation_id = ? WHERE letter_id = ?"
                " AND ingest_invocation_id IS NULL",
                (invocation_id, letter_id),
            )

    def get_letter(self, letter_id: str) -> sqlite3.Row:
        row = self._conn().execute(
            "SELECT * FROM letters WHERE letter_id = ?", (letter_id,)
        ).fetchone()
        if row is None:
            raise UnknownIdError(f"unknown letter: {letter_id}")
        return row

    # -- events ------------------------------------------------------------------------

    def record_event(
        self, kind: str, detail: str, invocation_id: str | None = None, batch_id: str | None = None
    ) -> None:
        with self.transaction() as conn:
            conn.execute(
                "INSERT INTO events (kind, invocation_id, batch_id, detail, created_at)"
                " VALUES (?, ?, ?, ?, ?)",
                (kind, invocation_id, batch_id, detail, time.time()),
            )

    def list_events(self, kind: str | None = None, batch_id: str | None = None) -> list[sqlite3.Row]:
        clauses, args = [], []
        if kind is not None:
            clauses.append("kind = ?")
            args.append(kind)
        if batch_id is not None:
            clauses.append("batch_id = ?")
            args.append(batch_id)
        where = (" WHERE " + " AND ".join(clauses)) if clauses else ""
        return self._conn().execute(
            f"SELECT * FROM events{where} ORDER BY event_id", args
        ).fetchall()
