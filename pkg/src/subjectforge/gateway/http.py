"""Live HTTP backend, plus a small reference server for wiring tests."""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import requests

from ..errors import GatewayError, InvalidArgument, ModelCallFailed, ProtocolError
from .client import ModelEndpoint
from .wire import decode_request, encode_output, encode_request

logger = logging.getLogger(__name__)

_RETRY_STATUS = {429, 500, 502, 503, 504}


class HttpBackend:
    """POSTs one JSON document per call to ``endpoint.base_url``.

    Transport errors, timeouts and 429/5xx replies are retried up to
    ``max_retries`` times with exponential backoff; the same request id is
    reused so servers can deduplicate. Other 4xx replies fail immediately.
    """

    def __init__(self, endpoint: ModelEndpoint, *, session: requests.Session | None = None,
                 backoff: float = 0.5, sleep=time.sleep):
        if not endpoint.base_url:
            raise InvalidArgument(f"endpoint {endpoint.role} has no base_url")
        self.endpoint = endpoint
        self.session = session or requests.Session()
        self.backoff = backoff
        self.sleep = sleep
        self.backend_id = f"http:{endpoint.base_url}"

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        env = self.endpoint.auth_token_env
        if env:
            token = os.environ.get(env)
            if token:
                headers["Authorization"] = f"Bearer {token}"
        return headers

    def send(self, role: str, inputs: dict, *, request_id: str, scene_id: str | None) -> dict:
        body = encode_request(role, inputs, request_id, scene_id)
        last = "no attempt made"
        for attempt in range(self.endpoint.max_retries + 1):
            if attempt:
                self.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                resp = self.session.post(self.endpoint.base_url, json=body, headers=self._headers(),
                                         timeout=self.endpoint.timeout)
            except (requests.ConnectionError, requests.Timeout) as exc:
                last = f"{type(exc).__name__}: {exc}"
                logger.warning("%s request %s attempt %d failed: %s", role, request_id, attempt + 1, last)
                continue
            if resp.status_code in _RETRY_STATUS:
                last = f"HTTP {resp.status_code}"
                logger.warning("%s request %s attempt %d got %s", role, request_id, attempt + 1, last)
                continue
            if resp.status_code >= 400:
                raise ModelCallFailed(f"{role}: HTTP {resp.status_code}: {resp.text[:200]}",
                                      role=role, scene_id=scene_id)
            try:
                doc = resp.json()
            except ValueError as exc:
                raise ProtocolError(f"{role}: response is not JSON", role=role, scene_id=scene_id) from exc
            if not isinstance(doc, dict) or not isinstance(doc.get("output"), dict):
                raise ProtocolError(f"{role}: response lacks an output object", role=role, scene_id=scene_id)
            return doc["output"]
        raise ModelCallFailed(f"{role}: gave up after {self.endpoint.max_retries + 1} attempts ({last})",
                              role=role, scene_id=scene_id)


def make_server(backend, host: str = "127.0.0.1", port: int = 0) -> ThreadingHTTPServer:
    """HTTP server answering the wire protocol with an in-process backend.

    Transport failures map to 503, malformed requests to 400.
    """

    class Handler(BaseHTTPRequestHandler):
        def log_message(self, fmt, *args):
            logger.debug(fmt, *args)

        def _reply(self, status: int, doc: dict):
            data = json.dumps(doc).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def do_POST(self):
            length = int(self.headers.get("Content-Length", 0))
            try:
                doc = json.loads(self.rfile.read(length))
                role, inputs, request_id, scene_id = decode_request(doc)
                out = backend.send(role, inputs, request_id=request_id, scene_id=scene_id)
            except ModelCallFailed as exc:
                self._reply(503, {"error": str(exc)})
                return
            except (GatewayError, InvalidArgument, ValueError) as exc:
                self._reply(400, {"error": str(exc)})
                return
            self._reply(200, encode_output(out))

    return ThreadingHTTPServer((host, port), Handler)


def serve_in_thread(backend, host: str = "127.0.0.1", port: int = 0):
    server = make_server(backend, host, port)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return server, f"http://{server.server_address[0]}:{server.server_address[1]}/"
