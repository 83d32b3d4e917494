"""Run configuration: file format, defaults, and wiring helpers.

A run configuration JSON file describes one pipeline run end to end: corpus
and guidance locations, batching, the backend, loop bounds, and rating
dimensions. docs/run-config.md documents every field.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Any

from .backends import HttpBackend, ScriptedBackend
from .bandit import BetaSchedule
from .critique import LoopConfig, RatingDimension
from .engine import SubroutineEngine
from .pipeline import BinDef, CommentPipeline, Letter, PipelineConfig
from .scripted import scripted_pipeline_backend
from .store import AuditStore
from .taskqueue import TaskQueue

DEFAULT_DB_ENV = "PROMPTARM_DB"
DEFAULT_DB_PATH = "promptarm.db"


class ConfigError(ValueError):
    pass


@dataclass
class RunSettings:
    corpus_path: str
    guidance_path: str
    context_path: str | None = None
    run_id: str = "run-001"
    batch_size: int = 100
    concern_batch_size: int = 20
    quote_threshold: float = 0.85
    workers: int = 4
    max_iters: int = 3
    loss_threshold: float = 0.1
    backend: str = "scripted"
    backend_seed: int = 0
    scripted_config: str | None = None
    beta_start: float = 0.0
    beta_end: float = 1.0
    beta_ramp_trials: int = 100
    stage_dims: dict[str, list[dict[str, Any]]] = field(default_factory=dict)
    lease_duration: float = 60.0
    max_attempts: int = 3


def load_run_settings(path: str) -> RunSettings:
    if not os.path.exists(path):
        raise ConfigError(f"run configuration not found: {path}")
    with open(path) as f:
        raw = json.load(f)
    known = set(RunSettings.__dataclass_fields__)
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown run configuration keys: {sorted(unknown)}")
    missing = {"corpus_path", "guidance_path"} - set(raw)
    if missing:
        raise ConfigError(f"run configuration missing keys: {sorted(missing)}")
    return RunSettings(**raw)


def load_corpus(path: str) -> list[Letter]:
    """Newline-delimited JSON records: {id, text, metadata}."""
    if not os.path.exists(path):
        raise ConfigError(f"corpus file not found: {path}")
    letters = []
    with open(path) as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
                letters.append(Letter(row["id"], row["text"], row.get("metadata", {})))
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise ConfigError(f"{path}:{line_no}: bad corpus record: {exc}") from exc
    if not letters:
        raise ConfigError(f"corpus file is empty: {path}")
    return letters


def load_guidance(path: str) -> list[BinDef]:
    """Binning guidance document: {"bins": [{"name", "guidance"}]}."""
    if not os.path.exists(path):
        raise ConfigError(f"guidance file not found: {path}")
    with open(path) as f:
        raw = json.load(f)
    bins = [BinDef(b["name"], b.get("guidance", "")) for b in raw.get("bins", [])]
    if not bins:
        raise ConfigError(f"guidance file defines no bins: {path}")
    return bins


def load_truth(path: str) -> list[dict[str, Any]]:
    """Ground-truth records: {letter_id, start, end, bin_name} per line."""
    if not os.path.exists(path):
        raise ConfigError(f"ground-truth file not found: {path}")
    records = []
    with open(path) as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
                records.append(
                    {
                        "letter_id": row["letter_id"],
                        "start": int(row["start"]),
                        "end": int(row["end"]),
                        "bin_name": row["bin_name"],
                    }
                )
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise ConfigError(f"{path}:{line_no}: bad ground-truth record: {exc}") from exc
    return records


def build_backend(settings: RunSettings) -> Any:
    if settings.backend == "scripted":
        if settings.scripted_config:
            return ScriptedBackend.from_config(settings.scripted_config, seed=settings.backend_seed)
        return scripted_pipeline_backend(seed=settings.backend_seed)
    if settings.backend == "http":
        return HttpBackend()
    raise ConfigError(f"unknown backend kind: {settings.backend!r}")


def _stage_dims(settings: RunSettings) -> dict[str, list[RatingDimension]] | None:
    if not settings.stage_dims:
        return None
    return {
        stage: [RatingDimension(d["name"], d.get("lo", 1), d.get("hi", 10)) for d in dims]
        for stage, dims in settings.stage_dims.items()
    }


def build_pipeline(store: AuditStore, settings: RunSettings) -> CommentPipeline:
    bins = load_guidance(settings.guidance_path)
    context = ""
    if settings.context_path:
        if not os.path.exists(settings.context_path):
            raise ConfigError(f"context file not found: {settings.context_path}")
        with open(settings.context_path) as f:
            context = f.read().strip()
    backend = build_backend(settings)
    engine = SubroutineEngine(
        store,
        backend,
        beta_schedule=BetaSchedule(
            "linear", settings.beta_start, settings.beta_end, settings.beta_ramp_trials
        ),
        rng=settings.backend_seed,
    )
    config_kwargs: dict[str, Any] = dict(
        bins=bins,
        project_context=context,
        batch_size=settings.batch_size,
        concern_batch_size=settings.concern_batch_size,
        quote_threshold=settings.quote_threshold,
        loop=LoopConfig(settings.max_iters, settings.loss_threshold),
        workers=settings.workers,
    )
    dims = _stage_dims(settings)
    if dims is not None:
        config_kwargs["stage_dims"] = dims
    queue = TaskQueue(
        store, max_attempts=settings.max_attempts, lease_duration=settings.lease_duration
    )
    return CommentPipeline(store, engine, PipelineConfig(**config_kwargs), queue=queue)


def db_path_from_env(override: str | None = None) -> str:
    return override or os.environ.get(DEFAULT_DB_ENV, DEFAULT_DB_PATH)
