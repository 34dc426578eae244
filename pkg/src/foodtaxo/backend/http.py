"""Chat-completions style HTTP backend."""

from __future__ import annotations

import base64
import logging
import os
import time
from dataclasses import dataclass

import httpx

from ..errors import BackendRefusal, ConfigError, TransportError
from .base import BackendRequest, BackendResponse

logger = logging.getLogger(__name__)

DEFAULT_CREDENTIAL_ENV = "FOODTAXO_API_KEY"


@dataclass(frozen=True)
class HttpConfig:
    endpoint: str
    model: str
    credential_env: str = DEFAULT_CREDENTIAL_ENV
    timeout: float = 60.0
    transport_retries: int = 0
    max_concurrency: int = 4


class HttpBackend:
    """Posts one image part and one text part per query.

    ``transport_retries`` only covers network failures and non-success
    status codes; it never re-asks the model because of bad content.
    """

    def __init__(self, config: HttpConfig, api_key: str, transport: httpx.BaseTransport | None = None):
        self.config = config
        self.max_concurrency = config.max_concurrency
        self._client = httpx.Client(
            timeout=config.timeout,
            transport=transport,
            headers={"Authorization": f"Bearer {api_key}"},
        )
        self.requests_sent = 0

    def close(self):
        self._client.close()

    def payload(self, request: BackendRequest) -> dict:
        b64 = base64.b64encode(request.image.data).decode("ascii")
        return {
            "model": self.config.model,
            "messages": [
                {
                    "role": "user",
                    "content": [
                        {
                            "type": "image_url",
                            "image_url": {"url": f"data:{request.image.media_type};base64,{b64}"},
                        },
                        {"type": "text", "text": request.prompt},
                    ],
                }
            ],
            "temperature": request.decode.temperature,
            "max_tokens": request.decode.max_output_chars,
        }

    def query(self, request: BackendRequest) -> BackendResponse:
        body = self.payload(request)
        last_error: Exception | None = None
        for attempt in range(1 + self.config.transport_retries):
            start = time.perf_counter()
            try:
                self.requests_sent += 1
                resp = self._client.post(self.config.endpoint, json=body)
            except httpx.HTTPError as exc:
                last_error = TransportError(f"{type(exc).__name__}: {exc}")
                logger.warning("transport failure (attempt %d): %s", attempt, exc)
                continue
            if resp.status_code // 100 != 2:
                last_error = TransportError(f"HTTP {resp.status_code}: {resp.text[:200]}")
                logger.warning("non-success status (attempt %d): %s", attempt, resp.status_code)
                continue
            latency = time.perf_counter() - start
            text = _extract_text(resp)
            return BackendResponse(
                text=text,
                latency=latency,
                attempt_meta={"status": resp.status_code, "transport_attempts": attempt + 1},
            )
        assert last_error is not None
        raise last_error


def _extract_text(resp: httpx.Response) -> str:
    try:
        doc = resp.json()
        choice = doc["choices"][0]
        message = choice["message"]
    except (ValueError, KeyError, IndexError, TypeError):
        raise TransportError("malformed chat-completions response") from None
    if message.get("refusal") or choice.get("finish_reason") == "content_filter":
        raise BackendRefusal(str(message.get("refusal") or "content filtered"))
    content = message.get("content")
    if isinstance(content, list):
        content = "".join(p.get("text", "") for p in content if isinstance(p, dict))
    if not isinstance(content, str):
        raise TransportError("response message has no text content")
    return content


def make_http_backend(config: HttpConfig | dict, transport: httpx.BaseTransport | None = None) -> HttpBackend:
    if isinstance(config, dict):
        config = HttpConfig(**config)
    try:
        url = httpx.URL(config.endpoint)
    except (httpx.InvalidURL, TypeError) as exc:
        raise ConfigError(f"bad endpoint URL {config.endpoint!r}: {exc}") from None
    if url.scheme not in ("http", "https") or not url.host:
        raise ConfigError(f"bad endpoint URL {config.endpoint!r}")
    if not config.model:
        raise ConfigError("model name is required")
    if not config.timeout or config.timeout <= 0:
        raise ConfigError("timeout must be > 0")
    if config.transport_retries < 0:
        raise ConfigError("transport_retries must be >= 0")
    if config.max_concurrency < 1:
        raise ConfigError("max_concurrency must be >= 1")
    api_key = os.environ.get(config.credential_env)
    if not api_key:
        raise ConfigError(f"credential environment variable {config.credential_env} is not set")
    return HttpBackend(config, api_key, transport=transport)
