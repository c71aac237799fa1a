"""Uniform client for chat-completion style text-generation backends.

One wire protocol (OpenAI-compatible chat completions over HTTP) keeps the
orchestrator model-agnostic; local models are assumed to sit behind such an
endpoint. Replies are cached content-addressed on the rendered prompt, so
editing a prompt template naturally invalidates. Retries use exponential
backoff, rate limiting is a per-backend token bucket, and concurrency per
backend is bounded by a semaphore. A deterministic in-process mock backend
drives all pipeline and harness tests.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import string
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Union

import requests

from .errors import (
    BackendRejected,
    BackendTimeout,
    ConfigError,
    ConnectionFailed,
    GatewayError,
    RetriesExhausted,
    TemplateBindingError,
    UnknownBackend,
)

ROLES = (
    "prelabel_audio",
    "prelabel_video",
    "merge",
    "disambiguate",
    "translate",
    "group",
    "extract_labels",
)

# Roles whose output must be reproducible across runs of one experiment.
DETERMINISTIC_ROLES = ("group", "disambiguate")

RETRYABLE_STATUSES = (429, 500, 502, 503, 504)


@dataclass(frozen=True)
class DecodeParams:
    temperature: float = 0.0
    max_tokens: int = 512

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_tokens <= 0:
            raise ValueError("max_tokens must be positive")


@dataclass(frozen=True)
class BackendSpec:
    """A named text-generation endpoint and how to call it."""

    name: str
    endpoint_url: str = ""
    model_id: str = ""
    decode: DecodeParams = field(default_factory=DecodeParams)
    timeout: float = 30.0
    max_retries: int = 2
    requests_per_second: float | None = None
    max_in_flight: int | None = None


@dataclass(frozen=True)
class PromptTemplate:
    """A versioned prompt body with named placeholders."""

    id: str
    version: str
    body: str
    role: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown template role {self.role!r}")

    def placeholders(self) -> set[str]:
        names = set()
        for _, name, _, _ in string.Formatter().parse(self.body):
            if name:
                names.add(name)
        return names

    def render(self, bindings: Mapping[str, str]) -> str:
        missing = self.placeholders() - set(bindings)
        if missing:
            raise TemplateBindingError(
                f"template {self.id}@{self.version} missing bindings: {sorted(missing)}"
            )
        return self.body.format(**bindings)


@dataclass(frozen=True)
class CacheEntry:
    key: str
    reply: str
    created_at: float


def cache_key(backend_name: str, model_id: str, prompt: str, decode: DecodeParams) -> str:
    payload = json.dumps(
        [backend_name, model_id, prompt, decode.temperature, decode.max_tokens],
        ensure_ascii=False,
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def prompt_digest(prompt: str) -> str:
    """Digest of a rendered prompt alone; mock scripts may key on this."""
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


def api_key_env_var(backend_name: str) -> str:
    return re.sub(r"[^A-Z0-9]", "_", backend_name.upper()) + "_API_KEY"


@dataclass
class BackendStats:
    """Observable counters, mostly for tests and run logs."""

    requests: int = 0
    cache_hits: int = 0
    network_calls: int = 0
    retries: int = 0


class _TokenBucket:
    """Simple token bucket; blocks via the injected sleep when drained."""

    def __init__(self, rate: float, clock: Callable[[], float], sleep: Callable[[float], None]):
        self.rate = rate
        self.capacity = max(1.0, rate)
        self.tokens = self.capacity
        self.updated = clock()
        self.clock = clock
        self.sleep = sleep
        self.lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self.lock:
                now = self.clock()
                self.tokens = min(self.capacity, self.tokens + (now - self.updated) * self.rate)
                self.updated = now
                if self.tokens >= 1.0:
                    self.tokens -= 1.0
                    return
                wait = (1.0 - self.tokens) / self.rate
            self.sleep(wait)


Transport = Callable[[BackendSpec, str], str]


class HttpTransport:
    """POSTs an OpenAI-compatible chat-completions request."""

    def __init__(self, environ: Mapping[str, str] | None = None, session=None):
        self.environ = environ if environ is not None else os.environ
        self.session = session or requests.Session()

    def __call__(self, spec: BackendSpec, prompt: str) -> str:
        headers = {"Content-Type": "application/json"}
        api_key = self.environ.get(api_key_env_var(spec.name))
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        payload = {
            "model": spec.model_id,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": spec.decode.temperature,
            "max_tokens": spec.decode.max_tokens,
        }
        try:
            response = self.session.post(
                spec.endpoint_url, json=payload, headers=headers, timeout=spec.timeout
            )
        except requests.Timeout as exc:
            raise BackendTimeout(f"{spec.name}: timed out after {spec.timeout}s") from exc
        except requests.ConnectionError as exc:
            raise ConnectionFailed(f"{spec.name}: {exc}") from exc
        if not 200 <= response.status_code < 300:
            raise BackendRejected(
                f"{spec.name}: HTTP {response.status_code}",
                status=response.status_code,
                body=response.text,
            )
        try:
            data = response.json()
            return data["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendRejected(
                f"{spec.name}: malformed completion payload",
                status=response.status_code,
                body=response.text,
            ) from exc


ScriptValue = Union[str, Exception, type, Callable[[str], str], list]


class MockBackend:
    """In-process backend whose replies are a pure function of the prompt.

    Script keys may be full rendered prompts or their digests. Values may
    be a reply string, an exception (instance or class) to raise, a
    callable of the prompt, or a list of those consumed one per call. With
    no match and no default the call is rejected, which keeps fixtures
    strict about unexpected prompts.
    """

    def __init__(
        self,
        script: Mapping[str, ScriptValue] | None = None,
        default: Callable[[str], str] | str | None = None,
        name: str = "mock",
        latency: float = 0.0,
        decode: DecodeParams | None = None,
    ):
        self.spec = BackendSpec(
            name=name,
            endpoint_url=f"mock://{name}",
            model_id=f"{name}-model",
            decode=decode or DecodeParams(),
        )
        self.script = dict(script or {})
        self.default = default
        self.latency = latency
        self.calls = 0
        self.prompts: list[str] = []
        self.in_flight = 0
        self.max_in_flight = 0
        self._lock = threading.Lock()

    def __call__(self, spec: BackendSpec, prompt: str) -> str:
        with self._lock:
            self.calls += 1
            self.prompts.append(prompt)
            self.in_flight += 1
            self.max_in_flight = max(self.max_in_flight, self.in_flight)
        try:
            if self.latency:
                time.sleep(self.latency)
            return self._reply(prompt)
        finally:
            with self._lock:
                self.in_flight -= 1

    def _reply(self, prompt: str) -> str:
        value = self.script.get(prompt)
        if value is None:
            value = self.script.get(prompt_digest(prompt))
        if value is None:
            if self.default is None:
                raise BackendRejected(
                    f"{self.spec.name}: unscripted prompt", status=400, body=prompt
                )
            if callable(self.default):
                return self.default(prompt)
            return self.default
        return self._resolve(value, prompt)

    def _resolve(self, value: ScriptValue, prompt: str) -> str:
        if isinstance(value, list):
            with self._lock:
                step = value.pop(0) if len(value) > 1 else value[0]
            return self._resolve(step, prompt)
        if isinstance(value, Exception):
            raise value
        if isinstance(value, type) and issubclass(value, Exception):
            raise value(f"{self.spec.name}: scripted failure")
        if callable(value):
            return value(prompt)
        return value


def mock_backend(
    script: Mapping[str, ScriptValue] | None = None,
    default: Callable[[str], str] | str | None = None,
    name: str = "mock",
    latency: float = 0.0,
) -> MockBackend:
    """Build a deterministic in-process backend for tests and dry runs."""
    return MockBackend(script=script, default=default, name=name, latency=latency)


class Gateway:
    """Shared, thread-safe front door for every model call.

    cache may be "memory" (default), a directory path for an on-disk cache
    (JSON files named by key digest, plus a warm in-memory layer), or None
    to disable caching entirely so backend nondeterminism is observable.
    """

    def __init__(
        self,
        cache: str | Path | None = "memory",
        retry_base_delay: float = 0.5,
        sleep: Callable[[float], None] = time.sleep,
        clock: Callable[[], float] = time.monotonic,
        environ: Mapping[str, str] | None = None,
    ):
        self._backends: dict[str, tuple[BackendSpec, Transport]] = {}
        self._stats: dict[str, BackendStats] = {}
        self._buckets: dict[str, _TokenBucket] = {}
        self._semaphores: dict[str, threading.Semaphore] = {}
        self._lock = threading.Lock()
        self._sleep = sleep
        self._clock = clock
        self.retry_base_delay = retry_base_delay
        self._memory_cache: dict[str, CacheEntry] | None = None
        self._cache_dir: Path | None = None
        if cache == "memory":
            self._memory_cache = {}
        elif cache is not None:
            self._cache_dir = Path(cache)
            self._cache_dir.mkdir(parents=True, exist_ok=True)
            self._memory_cache = {}
        self._http = HttpTransport(environ=environ)

    # -- registry ----------------------------------------------------------

    def register(self, spec: BackendSpec, transport: Transport | None = None) -> None:
        with self._lock:
            self._backends[spec.name] = (spec, transport or self._http)
            self._stats.setdefault(spec.name, BackendStats())
            if spec.requests_per_second:
                self._buckets[spec.name] = _TokenBucket(
                    spec.requests_per_second, self._clock, self._sleep
                )
            if spec.max_in_flight:
                self._semaphores[spec.name] = threading.Semaphore(spec.max_in_flight)

    def register_mock(self, mock: MockBackend) -> BackendSpec:
        self.register(mock.spec, mock)
        return mock.spec

    def backend(self, name: str) -> BackendSpec:
        try:
            return self._backends[name][0]
        except KeyError:
            raise UnknownBackend(f"backend {name!r} is not registered") from None

    @property
    def backend_names(self) -> list[str]:
        return sorted(self._backends)

    def stats(self, name: str) -> BackendStats:
        return self._stats.setdefault(name, BackendStats())

    # -- calls -------------------------------------------------------------

    def complete(
        self,
        backend: str | BackendSpec,
        template: PromptTemplate,
        bindings: Mapping[str, str],
    ) -> str:
        name = backend if isinstance(backend, str) else backend.name
        if name not in self._backends:
            raise UnknownBackend(f"backend {name!r} is not registered")
        spec, transport = self._backends[name]
        if template.role in DETERMINISTIC_ROLES and spec.decode.temperature != 0:
            raise ConfigError(
                f"backend {name!r} has temperature {spec.decode.temperature}; "
                f"role {template.role!r} requires deterministic decoding",
                key=f"backends.{name}.temperature",
            )
        prompt = template.render(bindings)
        stats = self.stats(name)
        with self._lock:
            stats.requests += 1

        key = cache_key(spec.name, spec.model_id, prompt, spec.decode)
        cached = self._cache_get(key)
        if cached is not None:
            with self._lock:
                stats.cache_hits += 1
            return cached

        reply = self._call_with_retries(spec, transport, prompt, stats)
        self._cache_put(key, spec, prompt, reply)
        return reply

    def _call_with_retries(
        self, spec: BackendSpec, transport: Transport, prompt: str, stats: BackendStats
    ) -> str:
        semaphore = self._semaphores.get(spec.name)
        bucket = self._buckets.get(spec.name)
        attempts = spec.max_retries + 1
        last: Exception | None = None
        for attempt in range(attempts):
            if attempt:
                with self._lock:
                    stats.retries += 1
                self._sleep(self.retry_base_delay * (2 ** (attempt - 1)))
            if bucket:
                bucket.acquire()
            if semaphore:
                semaphore.acquire()
            try:
                with self._lock:
                    stats.network_calls += 1
                return transport(spec, prompt)
            except (BackendTimeout, ConnectionFailed) as exc:
                last = exc
            except BackendRejected as exc:
                if exc.status in RETRYABLE_STATUSES:
                    last = exc
                else:
                    raise
            finally:
                if semaphore:
                    semaphore.release()
        raise RetriesExhausted(
            f"{spec.name}: gave up after {attempts} attempts: {last}",
            attempts=attempts,
            last_error=last,
        ) from last

    # -- cache -------------------------------------------------------------

    def _cache_get(self, key: str) -> str | None:
        if self._memory_cache is None:
            return None
        with self._lock:
            entry = self._memory_cache.get(key)
        if entry is not None:
            return entry.reply
        if self._cache_dir is not None:
            path = self._cache_dir / f"{key}.json"
            if path.exists():
                obj = json.loads(path.read_text(encoding="utf-8"))
                entry = CacheEntry(key=key, reply=obj["reply"], created_at=obj["created_at"])
                with self._lock:
                    self._memory_cache[key] = entry
                return entry.reply
        return None

    def _cache_put(self, key: str, spec: BackendSpec, prompt: str, reply: str) -> None:
        if self._memory_cache is None:
            return
        entry = CacheEntry(key=key, reply=reply, created_at=time.time())
        with self._lock:
            self._memory_cache[key] = entry
        if self._cache_dir is not None:
            obj = {
                "key": entry.key,
                "backend": spec.name,
                "model_id": spec.model_id,
                "prompt": prompt,
                "decode_params": {
                    "temperature": spec.decode.temperature,
                    "max_tokens": spec.decode.max_tokens,
                },
                "reply": entry.reply,
                "created_at": entry.created_at,
            }
            path = self._cache_dir / f"{key}.json"
            tmp = path.with_suffix(".json.tmp")
            tmp.write_text(json.dumps(obj, ensure_ascii=False), encoding="utf-8")
            os.replace(tmp, path)


def backend_spec_from_config(name: str, cfg: Mapping) -> BackendSpec:
    """Build a BackendSpec from one [backends.<name>] config table."""
    known = {
        "endpoint_url",
        "model_id",
        "temperature",
        "max_tokens",
        "timeout",
        "max_retries",
        "requests_per_second",
        "max_in_flight",
    }
    for key in cfg:
        if key not in known:
            raise ConfigError(
                f"unknown backend option {key!r}", key=f"backends.{name}.{key}"
            )
    try:
        decode = DecodeParams(
            temperature=float(cfg.get("temperature", 0.0)),
            max_tokens=int(cfg.get("max_tokens", 512)),
        )
    except ValueError as exc:
        raise ConfigError(str(exc), key=f"backends.{name}") from exc
    return BackendSpec(
        name=name,
        endpoint_url=str(cfg.get("endpoint_url", "")),
        model_id=str(cfg.get("model_id", name)),
        decode=decode,
        timeout=float(cfg.get("timeout", 30.0)),
        max_retries=int(cfg.get("max_retries", 2)),
        requests_per_second=cfg.get("requests_per_second"),
        max_in_flight=cfg.get("max_in_flight"),
    )
