"""Uniform request/response contract for vision-language model backends."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, runtime_checkable

from ..imageio import PreparedImage


@dataclass(frozen=True)
class DecodeParams:
    max_output_chars: int = 256
    temperature: float = 0.0

    def __post_init__(self):
        if self.max_output_chars < 1:
            raise ValueError("max_output_chars must be positive")
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")


@dataclass(frozen=True)
class BackendRequest:
    image: PreparedImage
    prompt: str
    decode: DecodeParams = field(default_factory=DecodeParams)

    def __post_init__(self):
        if not self.prompt:
            raise ValueError("prompt must be non-empty")
        if not self.image.data:
            raise ValueError("image must be non-empty")


@dataclass(frozen=True)
class BackendResponse:
    text: str
    latency: float
    attempt_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.latency < 0:
            raise ValueError("latency must be >= 0")


@runtime_checkable
class Backend(Protocol):
    """Anything with ``query`` and ``max_concurrency``.

    ``query`` performs at most one logical model call and raises
    TransportError or BackendRefusal on failure. Semantic retries belong
    to the engine.
    """

    max_concurrency: int

    def query(self, request: BackendRequest) -> BackendResponse: ...
