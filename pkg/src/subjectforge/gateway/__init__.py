"""Model roles behind one validated client, with HTTP and mock backends."""

from .client import ROLES, Detection, EmbeddingVector, ModelEndpoint, ModelGateway, cosine
from .http import HttpBackend, make_server, serve_in_thread
from .mock import MockBackend

__all__ = [
    "ROLES",
    "Detection",
    "EmbeddingVector",
    "HttpBackend",
    "MockBackend",
    "ModelEndpoint",
    "ModelGateway",
    "cosine",
    "make_server",
    "serve_in_thread",
]
