from .base import Backend, BackendRequest, BackendResponse, DecodeParams
from .http import HttpBackend, HttpConfig, make_http_backend
from .mock import MockBackend, MockCall, MockScript, NoiseConfig, load_mock_script, make_mock_backend

__all__ = [
    "Backend",
    "BackendRequest",
    "BackendResponse",
    "DecodeParams",
    "HttpBackend",
    "HttpConfig",
    "make_http_backend",
    "MockBackend",
    "MockCall",
    "MockScript",
    "NoiseConfig",
    "load_mock_script",
    "make_mock_backend",
]
