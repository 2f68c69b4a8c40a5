"""Transport and templating for every multimodal-model call.

Speaks the OpenAI-compatible chat-completions protocol with base64 image
attachments. Each call renders a vendored prompt template, retries transient
failures with exponential backoff, and logs the full exchange to an optional
transcript sink. Template bodies are hash-pinned against checksums shipped
next to them.
"""

from __future__ import annotations

import base64
import enum
import hashlib
import json
import logging
import re
import threading
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import httpx

from .latents import canonical_json

log = logging.getLogger(__name__)

MAX_IMAGE_BYTES = 16 * 1024 * 1024
DEFAULT_MAX_ATTEMPTS = 3
DEFAULT_BACKOFF_S = 0.5
_PLACEHOLDER = re.compile(r"\{([a-z][a-z0-9_]*)\}")


class VlmInputError(ValueError):
    """Bad call inputs detected before any network traffic."""


class VlmTransportError(RuntimeError):
    """All attempts failed at the transport level."""


class VlmStatusError(RuntimeError):
    """Endpoint answered with a non-2xx status."""

    def __init__(self, status_code: int, body_excerpt: str):
        self.status_code = status_code
        self.body_excerpt = body_excerpt
        super().__init__(f"HTTP {status_code}: {body_excerpt}")


class VlmFormatError(RuntimeError):
    """Response could not be parsed into the required structure after repair."""


class RoleName(str, enum.Enum):
    EXTRACTOR = "extractor"
    COMPRESSOR = "compressor"
    COMPARATOR = "comparator"
    STYLER = "styler"
    SCHEDULER = "scheduler"
    JUDGE = "judge"


ROLE_DEFAULT_TEMPERATURE = {
    RoleName.EXTRACTOR: 0.2,
    RoleName.COMPRESSOR: 0.2,
    RoleName.COMPARATOR: 0.2,
    RoleName.STYLER: 0.2,
    RoleName.SCHEDULER: 0.2,
    RoleName.JUDGE: 0.0,
}


@dataclass(frozen=True)
class VlmRole:
    """One model endpoint in a named pipeline role."""

    role: RoleName
    endpoint: str
    model_id: str
    temperature: float = -1.0
    max_attempts: int = DEFAULT_MAX_ATTEMPTS
    api_key: str = ""

    def __post_init__(self):
        if self.temperature < 0:
            object.__setattr__(self, "temperature", ROLE_DEFAULT_TEMPERATURE[self.role])
        if self.max_attempts < 1:
            raise ValueError(f"max_attempts must be >= 1, got {self.max_attempts}")


class TemplateName(str, enum.Enum):
    FACE = "face"
    ATTIRE = "attire"
    POSE = "pose"
    SCENE = "scene"
    COMBINE = "combine"
    STYLIZE = "stylize"
    DIFF = "diff"
    SCHEDULE = "schedule"
    JUDGE = "judge"


@dataclass(frozen=True)
class PromptTemplate:
    name: TemplateName
    body: str

    def placeholders(self) -> set[str]:
        return set(_PLACEHOLDER.findall(self.body))


def _templates_root():
    return resources.files("styledistill") / "templates"


def load_template(name: TemplateName | str) -> PromptTemplate:
    name = TemplateName(name)
    body = (_templates_root() / f"{name.value}.txt").read_text(encoding="utf-8")
    return PromptTemplate(name, body)


def template_checksums() -> dict[str, str]:
    """Pinned sha256 of every vendored template body."""
    raw = (_templates_root() / "checksums.json").read_text(encoding="utf-8")
    return json.loads(raw)


def verify_templates() -> dict[str, bool]:
    """Hash every shipped template against its pin; returns name -> matched."""
    pins = template_checksums()
    result = {}
    for name, expected in pins.items():
        body = (_templates_root() / f"{name}.txt").read_bytes()
        result[name] = hashlib.sha256(body).hexdigest() == expected
    return result


def render(template: PromptTemplate, substitutions: Mapping[str, str]) -> str:
    """Byte-stable placeholder substitution; missing keys are an input error."""
    missing = sorted(template.placeholders() - set(substitutions))
    if missing:
        raise VlmInputError(
            f"template {template.name.value!r} is missing substitutions for: {', '.join(missing)}"
        )
    return _PLACEHOLDER.sub(lambda m: str(substitutions[m.group(1)]), template.body)


@dataclass
class ChatExchange:
    """One request/response round trip, including which attempt succeeded."""

    request: dict
    response_text: str
    latency_ms: int
    attempt: int
    request_digest: str = ""


class RateLimiter:
    """Token bucket keyed per endpoint; safe under concurrent use."""

    def __init__(self, requests_per_minute: float,
                 clock: Callable[[], float] = time.monotonic,
                 sleeper: Callable[[float], None] = time.sleep):
        if requests_per_minute <= 0:
            raise ValueError("requests_per_minute must be positive")
        self.rate = requests_per_minute / 60.0
        self.capacity = max(1.0, requests_per_minute / 60.0)
        self._clock = clock
        self._sleep = sleeper
        self._lock = threading.Lock()
        self._buckets: dict[str, tuple[float, float]] = {}

    def acquire(self, endpoint: str) -> None:
        while True:
            with self._lock:
                now = self._clock()
                tokens, stamp = self._buckets.get(endpoint, (self.capacity, now))
                tokens = min(self.capacity, tokens + (now - stamp) * self.rate)
                if tokens >= 1.0:
                    self._buckets[endpoint] = (tokens - 1.0, now)
                    return
                self._buckets[endpoint] = (tokens, now)
                wait = (1.0 - tokens) / self.rate
            self._sleep(wait)


def _image_part(image: str | Path | bytes) -> dict:
    if isinstance(image, (str, Path)):
        path = Path(image)
        if not path.is_file():
            raise VlmInputError(f"image not readable: {path}")
        data = path.read_bytes()
    else:
        data = image
    if len(data) > MAX_IMAGE_BYTES:
        raise VlmInputError(f"image exceeds {MAX_IMAGE_BYTES} bytes ({len(data)})")
    b64 = base64.b64encode(data).decode("ascii")
    return {"type": "image_url", "image_url": {"url": f"data:image/png;base64,{b64}"}}


def request_digest(payload: dict) -> str:
    return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()


def _extract_content(body: dict) -> str:
    choices = body.get("choices") or []
    if not choices:
        return ""
    content = (choices[0].get("message") or {}).get("content")
    if isinstance(content, str):
        return content
    if isinstance(content, list):
        return "".join(p.get("text", "") for p in content if isinstance(p, dict))
    return ""


class VlmGateway:
    """Stateless chat-completions client with retry, rate limiting, and logging."""

    def __init__(
        self,
        client: Optional[httpx.Client] = None,
        transcript_sink: Optional[Callable[[dict], None]] = None,
        rate_limiter: Optional[RateLimiter] = None,
        backoff_s: float = DEFAULT_BACKOFF_S,
        sleeper: Callable[[float], None] = time.sleep,
        timeout_s: float = 120.0,
    ):
        self._client = client or httpx.Client(timeout=timeout_s)
        self._sink = transcript_sink
        self._limiter = rate_limiter
        self._backoff = backoff_s
        self._sleep = sleeper

    def complete(
        self,
        role: VlmRole,
        template: PromptTemplate,
        substitutions: Mapping[str, str] | None = None,
        images: Sequence[str | Path | bytes] = (),
    ) -> ChatExchange:
        """Render, attach images, POST, and return the first successful exchange.

        Transport failures and empty responses retry with exponential backoff
        up to role.max_attempts; a non-2xx status fails immediately.
        """
        text = render(template, substitutions or {})
        parts: list[dict] = [{"type": "text", "text": text}]
        parts.extend(_image_part(img) for img in images)
        payload = {
            "model": role.model_id,
            "temperature": role.temperature,
            "messages": [{"role": "user", "content": parts}],
        }
        return self._post(role, payload)

    def _post(self, role: VlmRole, payload: dict) -> ChatExchange:
        digest = request_digest(payload)
        url = role.endpoint.rstrip("/") + "/v1/chat/completions"
        headers = {}
        if role.api_key:
            headers["Authorization"] = f"Bearer {role.api_key}"
        last_error: Exception | None = None
        for attempt in range(1, role.max_attempts + 1):
            if self._limiter is not None:
                self._limiter.acquire(role.endpoint)
            started = time.monotonic()
            try:
                resp = self._client.post(url, json=payload, headers=headers)
            except httpx.HTTPError as exc:
                last_error = exc
                self._log(role, digest, payload, None, attempt, started, error=str(exc))
                self._wait(attempt, role)
                continue
            latency_ms = int((time.monotonic() - started) * 1000)
            if resp.status_code < 200 or resp.status_code >= 300:
                excerpt = resp.text[:500]
                self._log(role, digest, payload, None, attempt, started,
                          error=f"status {resp.status_code}")
                raise VlmStatusError(resp.status_code, excerpt)
            try:
                content = _extract_content(resp.json())
            except json.JSONDecodeError:
                content = ""
            if not content.strip():
                last_error = VlmTransportError("empty response body")
                self._log(role, digest, payload, "", attempt, started, error="empty response")
                self._wait(attempt, role)
                continue
            exchange = ChatExchange(
                request=payload,
                response_text=content,
                latency_ms=latency_ms,
                attempt=attempt,
                request_digest=digest,
            )
            self._log(role, digest, payload, content, attempt, started,
                      latency_ms=latency_ms)
            return exchange
        raise VlmTransportError(
            f"{role.role.value} call failed after {role.max_attempts} attempts: {last_error}"
        )

    def complete_parsed(
        self,
        role: VlmRole,
        template: PromptTemplate,
        substitutions: Mapping[str, str] | None,
        images: Sequence[str | Path | bytes],
        parser: Callable[[str], object],
        repair_hint: str = "",
    ):
        """complete() plus one parse-repair round trip.

        On a parser failure the request is re-asked once with the parse error
        (and optional hint) appended; a second failure raises VlmFormatError.
        """
        exchange = self.complete(role, template, substitutions, images)
        try:
            return parser(exchange.response_text), exchange
        except ValueError as first_err:
            text = render(template, substitutions or {})
            repair = (
                f"{text}\n\nYour previous reply could not be parsed"
                f" ({first_err}).\n{repair_hint}".rstrip()
            )
            parts: list[dict] = [{"type": "text", "text": repair}]
            parts.extend(_image_part(img) for img in images)
            payload = {
                "model": role.model_id,
                "temperature": role.temperature,
                "messages": [{"role": "user", "content": parts}],
            }
            exchange = self._post(role, payload)
            try:
                return parser(exchange.response_text), exchange
            except ValueError as second_err:
                raise VlmFormatError(
                    f"{role.role.value} response unparseable after repair: {second_err}"
                ) from second_err

    def _wait(self, attempt: int, role: VlmRole) -> None:
        if attempt < role.max_attempts and self._backoff > 0:
            self._sleep(self._backoff * (2 ** (attempt - 1)))

    def _log(self, role: VlmRole, digest: str, payload: dict, response: Optional[str],
             attempt: int, started: float, error: str = "", latency_ms: int | None = None):
        if self._sink is None:
            return
        if latency_ms is None:
            latency_ms = int((time.monotonic() - started) * 1000)
        entry = {
            "service": "vlm",
            "role": role.role.value,
            "digest": digest,
            "model": role.model_id,
            "attempt": attempt,
            "latency_ms": latency_ms,
            "response_text": response,
            "error": error or None,
        }
        self._sink(entry)
