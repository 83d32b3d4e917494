"""Durable at-least-once task queue over the audit store's tasks table.

Tasks live in the same relational store as the audit data, so a task's
effects and its acknowledgement can commit in one transaction and a killed
worker never strands partial work: the lease expires and another worker picks
the task up. Effects are made idempotent at the pipeline layer via
idempotency keys and stage-output dedup.

A clock is injectable so lease-expiry behavior is deterministic under test.
"""

from __future__ import annotations

import json
import threading
import time
import traceback
import uuid
from dataclasses import dataclass
from typing import Any, Callable, Mapping

from .store import AuditStore

DEFAULT_MAX_ATTEMPTS = 3
DEFAULT_LEASE_DURATION = 300.0


class LeaseNotHeldError(Exception):
    pass


@dataclass(frozen=True)
class Task:
    task_id: str
    kind: str
    payload: dict[str, Any]
    idempotency_key: str
    attempts: int
    state: str
    lease_expiry: float | None = None
    worker_id: str | None = None
    reason: str | None = None


class TaskQueue:
    def __init__(
        self,
        store: AuditStore,
        *,
        max_attempts: int = DEFAULT_MAX_ATTEMPTS,
        lease_duration: float = DEFAULT_LEASE_DURATION,
        clock: Callable[[], float] = time.time,
    ):
        self.store = store
        self.max_attempts = max_attempts
        self.lease_duration = lease_duration
        self.clock = clock

    def enqueue(self, kind: str, payload: Mapping[str, Any], idempotency_key: str) -> str:
        """Durably add a task; a duplicate key returns the existing task id."""
        if not idempotency_key:
            raise ValueError("idempotency_key must be nonempty")
        with self.store.transaction() as conn:
            row = conn.execute(
                "SELECT task_id FROM tasks WHERE idempotency_key = ?", (idempotency_key,)
            ).fetchone()
            if row is not None:
                return row["task_id"]
            task_id = str(uuid.uuid4())
            conn.execute(
                "INSERT INTO tasks (task_id, kind, payload, idempotency_key, attempts,"
                " max_attempts, state, seq) VALUES (?, ?, ?, ?, 0, ?, 'pending', ?)",
                (task_id, kind, json.dumps(dict(payload)), idempotency_key,
                 self.max_attempts, self.store.next_seq()),
            )
            return task_id

    def _row_to_task(self, row: Any) -> Task:
        return Task(
            task_id=row["task_id"],
            kind=row["kind"],
            payload=json.loads(row["payload"]),
            idempotency_key=row["idempotency_key"],
            attempts=row["attempts"],
            state=row["state"],
            lease_expiry=row["lease_expiry"],
            worker_id=row["worker_id"],
            reason=row["reason"],
        )

    def lease(self, worker_id: str, lease_duration: float | None = None) -> Task | None:
        """Atomically claim one pending or lease-expired task.

        Each lease counts an attempt; no two workers can hold the same task
        at once.
        """
        duration = lease_duration if lease_duration is not None else self.lease_duration
        now = self.clock()
        with self.store.transaction() as conn:
            row = conn.execute(
                "SELECT * FROM tasks WHERE state = 'pending'"
                " OR (state = 'leased' AND lease_expiry < ?) ORDER BY seq LIMIT 1",
                (now,),
            ).fetchone()
            if row is None:
                return None
            conn.execute(
                "UPDATE tasks SET state = 'leased', worker_id = ?, lease_expiry = ?,"
                " attempts = attempts + 1 WHERE task_id = ?",
                (worker_id, now + duration, row["task_id"]),
            )
            fresh = conn.execute(
                "SELECT * FROM tasks WHERE task_id = ?", (row["task_id"],)
            ).fetchone()
            return self._row_to_task(fresh)

    def _check_holder(self, conn: Any, task_id: str, worker_id: str) -> Any:
        row = conn.execute("SELECT * FROM tasks WHERE task_id = ?", (task_id,)).fetchone()
        if row is None or row["state"] != "leased" or row["worker_id"] != worker_id:
            raise LeaseNotHeldError(f"{worker_id} does not hold the lease on {task_id}")
        return row

    def ack(self, task_id: str, worker_id: str) -> None:
        with self.store.transaction() as conn:
            self._check_holder(conn, task_id, worker_id)
            conn.execute(
                "UPDATE tasks SET state = 'done', lease_expiry = NULL WHERE task_id = ?",
                (task_id,),
            )

    def nack(self, task_id: str, worker_id: str, reason: str) -> None:
        """Release a task: back to pending, or dead once attempts are spent."""
        with self.store.transaction() as conn:
            row = self._check_holder(conn, task_id, worker_id)
            state = "pending" if row["attempts"] < row["max_attempts"] else "dead"
            conn.execute(
                "UPDATE tasks SET state = ?, lease_expiry = NULL, reason = ? WHERE task_id = ?",
                (state, reason, task_id),
            )

    def get(self, task_id: str) -> Task:
        row = self.store._conn().execute(
            "SELECT * FROM tasks WHERE task_id = ?", (task_id,)
        ).fetchone()
        if row is None:
            raise KeyError(task_id)
        return self._row_to_task(row)

    def counts(self) -> dict[str, int]:
        rows = self.store._conn().execute(
            "SELECT state, COUNT(*) AS n FROM tasks GROUP BY state"
        ).fetchall()
        return {r["state"]: r["n"] for r in rows}

    def outstanding(self) -> int:
        """Tasks not yet terminal (pending or leased)."""
        c = self.counts()
        return c.get("pending", 0) + c.get("leased", 0)


Handler = Callable[[Task], None]


class Worker:
    """Executes tasks by kind; handler effects and the ack commit together."""

    def __init__(self, queue: TaskQueue, handlers: Mapping[str, Handler], worker_id: str | None = None):
        self.queue = queue
        self.handlers = dict(handlers)
        self.worker_id = worker_id or f"worker-{uuid.uuid4().hex[:8]}"

    def run_one(self) -> bool:
        """Lease and execute a single task. Returns False when queue is idle."""
        task = self.queue.lease(self.worker_id)
        if task is None:
            return False
        handler = self.handlers.get(task.kind)
        if handler is None:
            self.queue.nack(task.task_id, self.worker_id, f"no handler for kind {task.kind!r}")
            return True
        try:
            with self.queue.store.transaction():
                handler(task)
                self.queue.ack(task.task_id, self.worker_id)
        except LeaseNotHeldError:
            pass  # lost the lease mid-run; another worker owns the task now
        except Exception as exc:
            # Audit events attached to the exception outlive the rollback.
            for kind, detail, invocation_id, batch_id in getattr(exc, "audit_events", ()):
                self.queue.store.record_event(kind, detail, invocation_id, batch_id)
            try:
                self.queue.nack(task.task_id, self.worker_id, traceback.format_exc(limit=5))
            except LeaseNotHeldError:
                pass
        return True

    def run_until_idle(self) -> int:
        done = 0
        while self.run_one():
            done += 1
        return done


class WorkerPool:
    """Fixed-size pool of threads draining the queue until a condition holds."""

    def __init__(self, queue: TaskQueue, handlers: Mapping[str, Handler], size: int = 4):
        self.queue = queue
        self.handlers = handlers
        self.size = size

    def drain(self, until: Callable[[], bool] | None = None, poll: float = 0.02) -> None:
        """Run workers until the queue is idle and ``until`` (if given) holds."""
        stop = threading.Event()

        def loop() -> None:
            worker = Worker(self.queue, self.handlers)
            while not stop.is_set():
                if not worker.run_one():
                    if self.queue.outstanding() == 0 and (until is None or until()):
                        return
                    time.sleep(poll)

        threads = [threading.Thread(target=loop, daemon=True) for _ in range(self.size)]
        for t in threads:
            t.start()
        try:
            for t in threads:
                t.join()
        finally:
            stop.set()
