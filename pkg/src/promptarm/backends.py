"""Text-generation backends.

Two implementations of the same surface: an HTTP backend that talks to a
hosted model with schema-constrained decoding, and a scripted backend that
simulates prompt arms of known quality for desk-scale runs and tests. Both
validate every candidate payload against the request's constraint document
and retry a bounded number of times before erroring, so a returned result
always conforms.
"""

from __future__ import annotations

import hashlib
import json
import os
import random
import re
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

import httpx

from .schema import (
    PayloadViolation,
    SubroutineSpec,
    schema_from_constraint,
    serialize_declaration,
    validate_payload,
)

DEFAULT_RETRIES = 2
DEFAULT_TASK_TEMPERATURE = 0.2
DEFAULT_SYNTHESIS_TEMPERATURE = 1.0
DEFAULT_MAX_IN_FLIGHT = 8

_ASSET_DIR = os.path.join(os.path.dirname(__file__), "assets")


class BackendError(Exception):
    pass


class BackendUnreachable(BackendError):
    pass


class ConstraintViolationError(BackendError):
    """No conforming payload after the configured number of retries."""

    def __init__(self, attempts: int, last_violation: str):
        super().__init__(f"constraint violated after {attempts} attempts: {last_violation}")
        self.attempts = attempts
        self.last_violation = last_violation


class UnknownFingerprintError(BackendError):
    pass


class EmptyGenerationError(BackendError):
    pass


def fingerprint(prompt_text: str) -> str:
    """Arm identity: hash of the exact prompt text."""
    return hashlib.sha256(prompt_text.encode()).hexdigest()


@dataclass(frozen=True)
class GenerationRequest:
    system_prompt: str
    user_payload: str
    constraint: str
    temperature: float = DEFAULT_TASK_TEMPERATURE
    seed: int | None = None

    def __post_init__(self) -> None:
        if not self.system_prompt:
            raise ValueError("system_prompt must be nonempty")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


@dataclass(frozen=True)
class GenerationResult:
    raw_text: str
    backend_id: str
    latency: float


# ---------------------------------------------------------------------------
# User payload serialization
# ---------------------------------------------------------------------------

_SECTION_RE = re.compile(r"^### (\w+)$", re.MULTILINE)


def serialize_input(record: Mapping[str, Any], field_order: list[str], extra_context: str | None = None) -> str:
    """Render a typed input record as the user payload text.

    One section per field, in declaration order, each value JSON-encoded.
    Byte-exact format documented in docs/serialization.md.
    """
    parts = []
    for name in field_order:
        parts.append(f"### {name}\n{json.dumps(record[name], indent=2)}\n")
    if extra_context:
        parts.append(f"### _context\n{json.dumps(extra_context, indent=2)}\n")
    return "\n".join(parts)


def parse_user_payload(payload: str) -> dict[str, Any]:
    """Recover the field values from a serialized user payload."""
    out: dict[str, Any] = {}
    matches = list(_SECTION_RE.finditer(payload))
    for i, m in enumerate(matches):
        start = m.end()
        end = matches[i + 1].start() if i + 1 < len(matches) else len(payload)
        out[m.group(1)] = json.loads(payload[start:end])
    return out


# ---------------------------------------------------------------------------
# Scripted behaviors
# ---------------------------------------------------------------------------

@dataclass
class BehaviorContext:
    """Everything a scripted generator may condition on."""

    request: GenerationRequest
    fields: dict[str, Any]          # parsed user payload sections
    constraint: dict[str, Any]      # parsed constraint document
    rng: random.Random              # deterministic per (arm, payload, seed, attempt)
    attempt: int
    params: str = ""                # text after ':' in the behavior name


Behavior = Callable[[BehaviorContext], dict[str, Any]]

BEHAVIORS: dict[str, Behavior] = {}


def register_behavior(name: str) -> Callable[[Behavior], Behavior]:
    def deco(fn: Behavior) -> Behavior:
        BEHAVIORS[name] = fn
        return fn
    return deco


def resolve_behavior(spec: str) -> tuple[Behavior, str]:
    name, _, params = spec.partition(":")
    if name not in BEHAVIORS:
        raise KeyError(f"unknown behavior: {name!r}")
    return BEHAVIORS[name], params


@dataclass(frozen=True)
class ScriptedArmProfile:
    """Simulated quality of one prompt arm.

    With probability ``1 - error_rate`` the correct generator runs, otherwise
    the incorrect one. The draw is a deterministic function of the arm
    fingerprint, the user payload, the request seed, and the attempt number.
    """

    prompt_fingerprint: str
    error_rate: float
    correct_behavior: str
    incorrect_behavior: str

    def __post_init__(self) -> None:
        if not (0.0 <= self.error_rate <= 1.0):
            raise ValueError(f"error_rate must lie in [0, 1], got {self.error_rate}")


@dataclass(frozen=True)
class PoolEntry:
    """One canned prompt the scripted synthesizer can hand out."""

    preamble: str
    error_rate: float
    correct_behavior: str
    incorrect_behavior: str


def _stable_u01(*parts: Any) -> float:
    blob = "\x1f".join(str(p) for p in parts).encode()
    digest = hashlib.sha256(blob).digest()
    return int.from_bytes(digest[:8], "big") / 2**64


class ScriptedBackend:
    """Deterministic simulation of an LM backend.

    ``generate`` is a pure function of the profile table and the request; the
    synthesis pool is consumed in seeded order and never cycles (fresh
    variants get a distinguishing suffix once the pool is exhausted).
    """

    backend_id = "scripted"

    def __init__(
        self,
        *,
        pools: Mapping[str, list[PoolEntry]] | None = None,
        default_pool: list[PoolEntry] | None = None,
        strict: bool = True,
        fallback_error_rate: float = 0.5,
        fallback_behaviors: tuple[str, str] = ("echo_empty", "echo_empty"),
        seed: int = 0,
        retries: int = DEFAULT_RETRIES,
    ):
        self._profiles: dict[str, ScriptedArmProfile] = {}
        self._prompt_texts: dict[str, str] = {}
        self._pools = {k: list(v) for k, v in (pools or {}).items()}
        self._default_pool = list(default_pool or [])
        self._synth_counts: dict[str, int] = {}
        self.strict = strict
        self.fallback_error_rate = fallback_error_rate
        self.fallback_behaviors = fallback_behaviors
        self.seed = seed
        self.retries = retries
        self._lock = threading.Lock()

    # -- profile management -------------------------------------------------

    def register_profile(
        self,
        prompt_text: str,
        error_rate: float,
        correct_behavior: str,
        incorrect_behavior: str,
    ) -> ScriptedArmProfile:
        fp = fingerprint(prompt_text)
        profile = ScriptedArmProfile(fp, error_rate, correct_behavior, incorrect_behavior)
        with self._lock:
            self._profiles[fp] = profile
            self._prompt_texts[fp] = prompt_text
        return profile

    def profile_for(self, fp: str) -> ScriptedArmProfile:
        with self._lock:
            profile = self._profiles.get(fp)
        if profile is None:
            if self.strict:
                raise UnknownFingerprintError(f"no scripted profile for fingerprint {fp}")
            profile = ScriptedArmProfile(fp, self.fallback_error_rate, *self.fallback_behaviors)
        return profile

    @classmethod
    def from_config(cls, path: str, **kwargs: Any) -> "ScriptedBackend":
        """Load profiles and pools from a JSON config file.

        Format: {"profiles": [{"prompt_text", "error_rate", "correct_behavior",
        "incorrect_behavior"}], "pools": {"<subroutine>": [{"preamble",
        "error_rate", "correct_behavior", "incorrect_behavior"}]}}
        """
        with open(path) as f:
            cfg = json.load(f)
        pools = {
            name: [PoolEntry(**e) for e in entries]
            for name, entries in cfg.get("pools", {}).items()
        }
        backend = cls(pools=pools, **kwargs)
        for p in cfg.get("profiles", []):
            backend.register_profile(
                p["prompt_text"], p["error_rate"], p["correct_behavior"], p["incorrect_behavior"]
            )
        return backend

    # -- generation ----------------------------------------------------------

    def _produce(self, request: GenerationRequest, attempt: int) -> str:
        fp = fingerprint(request.system_prompt)
        profile = self.profile_for(fp)
        u = _stable_u01(fp, request.user_payload, request.seed, attempt)
        behavior_spec = (
            profile.incorrect_behavior if u < profile.error_rate else profile.correct_behavior
        )
        behavior, params = resolve_behavior(behavior_spec)
        rng_seed = _stable_u01(fp, request.user_payload, request.seed, attempt, "rng")
        ctx = BehaviorContext(
            request=request,
            fields=parse_user_payload(request.user_payload),
            constraint=json.loads(request.constraint),
            rng=random.Random(int(rng_seed * 2**63)),
            attempt=attempt,
            params=params,
        )
        return json.dumps(behavior(ctx), indent=2)

    def generate(self, request: GenerationRequest) -> GenerationResult:
        started = time.monotonic()
        schema = schema_from_constraint(request.constraint)
        last = ""
        for attempt in range(self.retries + 1):
            raw = self._produce(request, attempt)
            try:
                validate_payload(schema, json.loads(raw))
            except (PayloadViolation, json.JSONDecodeError) as exc:
                last = str(exc)
                continue
            return GenerationResult(raw, self.backend_id, time.monotonic() - started)
        raise ConstraintViolationError(self.retries + 1, last)

    # -- prompt synthesis ----------------------------------------------------

    def synthesize_prompt(self, spec: SubroutineSpec, context: str | None = None) -> str:
        pool = self._pools.get(spec.name, self._default_pool)
        if not pool:
            raise EmptyGenerationError(f"no scripted prompt pool for subroutine {spec.name!r}")
        with self._lock:
            index = self._synth_counts.get(spec.name, 0)
            self._synth_counts[spec.name] = index + 1
        entry = pool[index % len(pool)]
        text = f"{entry.preamble}\n\n{serialize_declaration(spec)}"
        if context:
            text += f"\nContext: {context}\n"
        if index >= len(pool):
            # The pool never cycles: later calls get a fresh, distinct variant.
            text += f"\n[variant {index // len(pool)}]\n"
        self.register_profile(text, entry.error_rate, entry.correct_behavior, entry.incorrect_behavior)
        return text


# ---------------------------------------------------------------------------
# HTTP backend
# ---------------------------------------------------------------------------

def _load_meta_prompt() -> str:
    with open(os.path.join(_ASSET_DIR, "prompt_engineer.md")) as f:
        return f.read()


class HttpBackend:
    """Backend speaking the wire format documented in docs/api.md.

    Endpoint, credential, and model identifier come from the environment
    (PROMPTARM_LM_ENDPOINT, PROMPTARM_LM_API_KEY, PROMPTARM_LM_MODEL) unless
    passed explicitly. In-flight requests are bounded to respect provider
    rate limits.
    """

    backend_id = "http"

    def __init__(
        self,
        endpoint: str | None = None,
        api_key: str | None = None,
        model: str | None = None,
        *,
        retries: int = DEFAULT_RETRIES,
        max_in_flight: int = DEFAULT_MAX_IN_FLIGHT,
        synthesis_temperature: float = DEFAULT_SYNTHESIS_TEMPERATURE,
        transport: httpx.BaseTransport | None = None,
        timeout: float = 60.0,
    ):
        self.endpoint = endpoint or os.environ.get("PROMPTARM_LM_ENDPOINT", "")
        self.api_key = api_key or os.environ.get("PROMPTARM_LM_API_KEY", "")
        self.model = model or os.environ.get("PROMPTARM_LM_MODEL", "")
        if not self.endpoint:
            raise ValueError("HTTP backend requires an endpoint (PROMPTARM_LM_ENDPOINT)")
        self.retries = retries
        self.synthesis_temperature = synthesis_temperature
        self._semaphore = threading.Semaphore(max_in_flight)
        self._client = httpx.Client(transport=transport, timeout=timeout)

    def _call(self, request: GenerationRequest) -> str:
        body = {
            "model": self.model,
            "system": request.system_prompt,
            "user": request.user_payload,
            "constraint": json.loads(request.constraint),
            "temperature": request.temperature,
            "seed": request.seed,
        }
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        with self._semaphore:
            try:
                resp = self._client.post(self.endpoint, json=body, headers=headers)
                resp.raise_for_status()
            except httpx.HTTPError as exc:
                raise BackendUnreachable(str(exc)) from exc
        return resp.json()["text"]

    def generate(self, request: GenerationRequest) -> GenerationResult:
        started = time.monotonic()
        schema = schema_from_constraint(request.constraint)
        last = ""
        for _attempt in range(self.retries + 1):
            raw = self._call(request)
            try:
                validate_payload(schema, json.loads(raw))
            except (PayloadViolation, json.JSONDecodeError) as exc:
                last = str(exc)
                continue
            return GenerationResult(raw, self.backend_id, time.monotonic() - started)
        raise ConstraintViolationError(self.retries + 1, last)

    def synthesize_prompt(self, spec: SubroutineSpec, context: str | None = None) -> str:
        meta = _load_meta_prompt()
        user = serialize_declaration(spec)
        if context:
            user += f"\nAdditional context:\n{context}\n"
        constraint = json.dumps(
            {
                "type": "object",
                "properties": {"system_prompt": {"type": "string"}},
                "required": ["system_prompt"],
                "additionalProperties": False,
            },
            indent=2,
        )
        request = GenerationRequest(
            meta, user, constraint, temperature=self.synthesis_temperature
        )
        result = self.generate(request)
        prompt = json.loads(result.raw_text)["system_prompt"]
        if not prompt.strip():
            raise EmptyGenerationError("prompt engineer returned an empty prompt")
        return prompt


# ---------------------------------------------------------------------------
# Built-in behaviors
# ---------------------------------------------------------------------------

RARE_LETTERS = frozenset("qwxz")


def count_rare_letter_words(text: str, letters: frozenset[str] = RARE_LETTERS) -> int:
    """Number of whitespace-delimited words containing any rare letter."""
    return sum(1 for word in text.split() if set(word.lower()) & letters)


@register_behavior("echo_empty")
def _echo_empty(ctx: BehaviorContext) -> dict[str, Any]:
    return _conforming_stub(ctx.constraint)


def _conforming_stub(constraint: Mapping[str, Any]) -> dict[str, Any]:
    """Minimal payload conforming to a constraint document."""
    def stub(node: Mapping[str, Any]) -> Any:
        t = node.get("type")
        if t == "string":
            enum = node.get("enum")
            return enum[0] if enum else ""
        if t == "integer":
            return int(node.get("minimum", 0))
        if t == "array":
            return []
        if t == "object":
            return {k: stub(v) for k, v in node.get("properties", {}).items()}
        return None
    return {k: stub(v) for k, v in constraint.get("properties", {}).items()}


@register_behavior("count_rare_letters")
def _count_rare_letters(ctx: BehaviorContext) -> dict[str, Any]:
    text = ctx.fields.get("given_text", "")
    count = count_rare_letter_words(text)
    return {"scratch_work": f"words checked: {len(text.split())}", "character_count": count}


@register_behavior("miscount_rare_letters")
def _miscount_rare_letters(ctx: BehaviorContext) -> dict[str, Any]:
    text = ctx.fields.get("given_text", "")
    count = count_rare_letter_words(text)
    wrong = count + 1 + ctx.rng.randrange(3)
    return {"scratch_work": "estimated", "character_count": wrong}


def _rating_fields(constraint: Mapping[str, Any]) -> dict[str, tuple[int, int]]:
    out = {}
    for name, node in constraint.get("properties", {}).items():
        if node.get("type") == "integer" and "minimum" in node:
            out[name] = (node["minimum"], node["maximum"])
    return out


def _emit_ratings(constraint: Mapping[str, Any], rating: int, note: str) -> dict[str, Any]:
    out: dict[str, Any] = {"explanation": note}
    for name, (lo, hi) in _rating_fields(constraint).items():
        out[name] = max(lo, min(hi, rating))
    return out


@register_behavior("constant_rating")
def _constant_rating(ctx: BehaviorContext) -> dict[str, Any]:
    """Critique stand-in giving every dimension the same rating (params)."""
    rating = int(ctx.params) if ctx.params else 10
    return _emit_ratings(ctx.constraint, rating, f"scripted constant rating {rating}")


@register_behavior("iteration_ratings")
def _iteration_ratings(ctx: BehaviorContext) -> dict[str, Any]:
    """Critique stand-in following a per-iteration rating schedule.

    Params are comma-separated ratings; the loop iteration is read from the
    context section the self-critique loop appends to critique inputs.
    """
    schedule = [int(x) for x in ctx.params.split(",")]
    m = re.search(r"Loop iteration: (\d+)", ctx.fields.get("_context", ""))
    i = int(m.group(1)) if m else 1
    rating = schedule[min(i, len(schedule)) - 1]
    return _emit_ratings(ctx.constraint, rating, f"scripted rating for iteration {i}")
