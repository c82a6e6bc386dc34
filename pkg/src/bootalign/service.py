"""Minimal JSON-over-HTTP analysis endpoint.

``POST /v1/analyze`` takes ``{"app_id", "device_id", "syscalls": [names]}``
and answers ``{"label", "p_value", "I", "n_effective"}``. ``GET /v1/health``
reports store statistics. Errors are ``{"error": {"code", "message"}}``.
"""

from __future__ import annotations

import json
import logging
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .ensemble import ReferenceStore, UnknownAppError
from .harness import Config, Detector, StageError

log = logging.getLogger(__name__)


def _error(status: HTTPStatus, code: str, message: str) -> tuple[int, dict]:
    return int(status), {"error": {"code": code, "message": message}}


class AnalysisService:
    """Transport-free request handling, shared by the HTTP server and tests."""

    def __init__(self, store: ReferenceStore, config: Config = Config()):
        self.store = store
        self.config = config
        self.detector = Detector(store, config)

    def health(self) -> tuple[int, dict]:
        return 200, {"status": "ok", **self.store.stats()}

    def analyze(self, body: bytes | str | dict) -> tuple[int, dict]:
        if not isinstance(body, dict):
            try:
                body = json.loads(body or b"")
            except (ValueError, UnicodeDecodeError) as exc:
                return _error(HTTPStatus.BAD_REQUEST, "malformed_json", str(exc))
        if not isinstance(body, dict):
            return _error(HTTPStatus.BAD_REQUEST, "invalid_request", "body must be an object")
        app_id = body.get("app_id")
        device_id = body.get("device_id", "")
        syscalls = body.get("syscalls")
        if not isinstance(app_id, str) or not app_id:
            return _error(HTTPStatus.BAD_REQUEST, "invalid_request", "app_id must be a non-empty string")
        if not isinstance(device_id, str):
            return _error(HTTPStatus.BAD_REQUEST, "invalid_request", "device_id must be a string")
        if not isinstance(syscalls, list) or not all(isinstance(s, str) and s for s in syscalls):
            return _error(HTTPStatus.BAD_REQUEST, "invalid_request",
                          "syscalls must be a list of syscall names")
        if not syscalls:
            return _error(HTTPStatus.BAD_REQUEST, "empty_input", "syscalls list is empty")
        try:
            a = self.detector.analyze(syscalls, app_id, device_id)
        except UnknownAppError:
            return _error(HTTPStatus.NOT_FOUND, "unknown_app", f"no reference samples for {app_id!r}")
        except StageError as exc:
            return _error(HTTPStatus.UNPROCESSABLE_ENTITY, exc.stage, exc.message)
        v = a.verdict
        return 200, {"label": v.label, "p_value": v.p_value, "I": v.confidence_interval,
                     "n_effective": v.test_detail.n_effective}

    def handle(self, method: str, path: str, body: bytes = b"") -> tuple[int, dict]:
        if path == "/v1/health":
            if method != "GET":
                return _error(HTTPStatus.METHOD_NOT_ALLOWED, "method_not_allowed", "use GET")
            return self.health()
        if path == "/v1/analyze":
            if method != "POST":
                return _error(HTTPStatus.METHOD_NOT_ALLOWED, "method_not_allowed", "use POST")
            return self.analyze(body)
        return _error(HTTPStatus.NOT_FOUND, "not_found", f"no route {path}")


def make_server(service: AnalysisService, host: str = "127.0.0.1",
                port: int = 8080) -> ThreadingHTTPServer:
    class Handler(BaseHTTPRequestHandler):
        def _reply(self, status: int, payload: dict):
            data = json.dumps(payload).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def do_GET(self):
            self._reply(*service.handle("GET", self.path))

        def do_POST(self):
            length = int(self.headers.get("Content-Length") or 0)
            self._reply(*service.handle("POST", self.path, self.rfile.read(length)))

        def log_message(self, fmt, *args):
            log.info("%s %s", self.address_string(), fmt % args)

    return ThreadingHTTPServer((host, port), Handler)


def serve(config: Config, host: str = "127.0.0.1", port: int = 8080) -> None:
    if not config.store:
        raise ValueError("serve needs a reference store path")
    server = make_server(AnalysisService(ReferenceStore.load(config.store), config), host, port)
    log.info("listening on %s:%d", host, server.server_address[1])
    try:
        server.serve_forever()
    finally:
        server.server_close()
