"""HTTP action gateway.

``POST /v1/act`` takes an ActRequest JSON document and returns an
ActResponse; ``GET /v1/health`` reports liveness. Images arrive base64
encoded with a declared media type and are validated but never decoded:
backends only see per-view metadata.

Errors are JSON ``{"error": {"code": ..., "message": ...}}``. Schema
problems are 400s and never reach the backend; backend faults (including
non-finite output) are 500s naming the backend.
"""

from __future__ import annotations

import base64
import binascii
import errno
import hashlib
import json
import logging
import math
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any

from dexkit.errors import ExternalError
from dexkit.serve.backends import BackendError, PolicyBackend

log = logging.getLogger(__name__)

DEFAULT_CHUNK = 8
MAX_CHUNK = 64
MAX_BODY = 64 * 1024 * 1024
POLL_INTERVAL = 0.05  # seconds between shutdown checks


class PortInUse(ExternalError):
    code = "PortInUse"


class RequestError(Exception):
    def __init__(self, code: str, message: str) -> None:
        super().__init__(message)
        self.code = code


@dataclass(frozen=True)
class ImagePayload:
    media_type: str
    data: bytes

    def meta(self) -> dict[str, Any]:
        return {
            "media_type": self.media_type,
            "num_bytes": len(self.data),
            "sha256": hashlib.sha256(self.data).hexdigest(),
        }


@dataclass(frozen=True)
class ActRequest:
    prompt: str
    state: tuple[float, ...] = ()
    images: dict[str, ImagePayload] = field(default_factory=dict)
    chunk_size: int = DEFAULT_CHUNK
    request_id: str | None = None

    def to_json(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "prompt": self.prompt,
            "state": list(self.state),
            "chunk_size": self.chunk_size,
            "images": {
                k: {"media_type": v.media_type, "data": base64.b64encode(v.data).decode("ascii")}
                for k, v in self.images.items()
            },
        }
        if self.request_id is not None:
            out["request_id"] = self.request_id
        return out


def _is_number(v: Any) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def parse_act_request(obj: Any) -> ActRequest:
    if not isinstance(obj, dict):
        raise RequestError("MALFORMED_JSON", "request body must be a JSON object")
    if "prompt" not in obj:
        raise RequestError("MISSING_FIELD", "missing field 'prompt'")
    prompt = obj["prompt"]
    if not isinstance(prompt, str):
        raise RequestError("BAD_TYPE", "'prompt' must be a string")

    state = obj.get("state", [])
    if not isinstance(state, list) or not all(_is_number(v) for v in state):
        raise RequestError("BAD_TYPE", "'state' must be a list of numbers")
    if not all(math.isfinite(v) for v in state):
        raise RequestError("NON_FINITE", "'state' contains non-finite values")

    chunk = obj.get("chunk_size", DEFAULT_CHUNK)
    if not isinstance(chunk, int) or isinstance(chunk, bool):
        raise RequestError("BAD_TYPE", "'chunk_size' must be an integer")
    if not 1 <= chunk <= MAX_CHUNK:
        raise RequestError("CHUNK_SIZE_OUT_OF_RANGE", f"'chunk_size' must be in [1, {MAX_CHUNK}], got {chunk}")

    raw_images = obj.get("images", {})
    if not isinstance(raw_images, dict):
        raise RequestError("BAD_TYPE", "'images' must be an object")
    images = {}
    for view, payload in raw_images.items():
        if not isinstance(payload, dict) or not isinstance(payload.get("data"), str):
            raise RequestError("BAD_TYPE", f"image {view!r} must be an object with string 'data'")
        media_type = payload.get("media_type")
        if not isinstance(media_type, str) or "/" not in media_type:
            raise RequestError("BAD_MEDIA_TYPE", f"image {view!r} needs a media_type like 'image/png'")
        try:
            data = base64.b64decode(payload["data"], validate=True)
        except (binascii.Error, ValueError):
            raise RequestError("BAD_BASE64", f"image {view!r} is not valid base64") from None
        images[view] = ImagePayload(media_type, data)
    if not images and not state:
        raise RequestError("EMPTY_OBSERVATION", "request needs at least one image or a non-empty state")

    request_id = obj.get("request_id")
    if request_id is not None and not isinstance(request_id, str):
        raise RequestError("BAD_TYPE", "'request_id' must be a string")
    return ActRequest(prompt=prompt, state=tuple(state), images=images, chunk_size=chunk, request_id=request_id)


class ActionGateway:
    """Transport-independent request handling around one backend."""

    def __init__(self, backend: PolicyBackend) -> None:
        self.backend = backend
        self.started = time.monotonic()
        self._lock = threading.Lock()
        self.requests_served = 0

    def _count(self) -> None:
        with self._lock:
            self.requests_served += 1

    def handle_health(self) -> dict[str, Any]:
        return {
            "status": "ok",
            "backend": self.backend.name,
            "dof": self.backend.dof,
            "uptime_s": time.monotonic() - self.started,
            "requests_served": self.requests_served,
        }

    def _fault(self, code: str, message: str) -> tuple[int, dict[str, Any]]:
        return 500, {"error": {"code": code, "message": message, "backend": self.backend.name}}

    def handle_act(self, obj: Any) -> tuple[int, dict[str, Any]]:
        """Returns ``(http_status, body)``."""
        self._count()
        try:
            req = parse_act_request(obj)
        except RequestError as exc:
            return 400, {"error": {"code": exc.code, "message": str(exc)}}

        t0 = time.perf_counter()
        images_meta = {k: v.meta() for k, v in req.images.items()}
        try:
            actions = self.backend.act(req.prompt, list(req.state), images_meta, req.chunk_size)
        except BackendError as exc:
            return self._fault(exc.code, str(exc))
        except Exception as exc:  # backend bugs must not take the server down
            log.exception("backend %s failed", self.backend.name)
            return self._fault("BACKEND_FAULT", f"{type(exc).__name__}: {exc}")
        latency_ms = (time.perf_counter() - t0) * 1000.0

        dof = self.backend.dof
        try:
            rows = [[float(v) for v in row] for row in actions]
        except (TypeError, ValueError):
            return self._fault("BACKEND_FAULT", "backend returned non-numeric actions")
        if len(rows) != req.chunk_size or any(len(r) != dof for r in rows):
            return self._fault("BAD_SHAPE", f"backend returned a matrix that is not {req.chunk_size}x{dof}")
        if not all(math.isfinite(v) for r in rows for v in r):
            return self._fault("NON_FINITE_ACTION", "backend produced non-finite actions")

        body = {"actions": rows, "dof": dof, "backend": self.backend.name, "latency_ms": latency_ms}
        if req.request_id is not None:
            body["request_id"] = req.request_id
        return 200, body


class _Handler(BaseHTTPRequestHandler):
    # One request per connection, so draining connections drains requests.
    protocol_version = "HTTP/1.0"
    server: _GatewayHTTPServer

    def log_message(self, format: str, *args: Any) -> None:
        log.debug("%s - %s", self.address_string(), format % args)

    def _send(self, status: int, body: dict[str, Any]) -> None:
        data = json.dumps(body, allow_nan=False).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def _not_found(self) -> None:
        self._send(404, {"error": {"code": "NOT_FOUND", "message": f"no route {self.command} {self.path}"}})

    def do_GET(self) -> None:
        if self.path == "/v1/health":
            self._send(200, self.server.gateway.handle_health())
        elif self.path == "/v1/act":
            self._send(405, {"error": {"code": "METHOD_NOT_ALLOWED", "message": "use POST"}})
        else:
            self._not_found()

    def do_POST(self) -> None:
        if self.path != "/v1/act":
            self._not_found()
            return
        try:
            length = int(self.headers.get("Content-Length") or 0)
        except ValueError:
            length = -1
        if not 0 <= length <= MAX_BODY:
            self._send(413, {"error": {"code": "BAD_LENGTH", "message": f"Content-Length must be 0..{MAX_BODY}"}})
            return
        raw = self.rfile.read(length)
        try:
            obj = json.loads(raw)
        except ValueError:
            self._send(400, {"error": {"code": "MALFORMED_JSON", "message": "body is not valid JSON"}})
            return
        status, body = self.server.gateway.handle_act(obj)
        self._send(status, body)


class _GatewayHTTPServer(ThreadingHTTPServer):
    daemon_threads = True
    request_queue_size = 256  # listen backlog; the default of 5 resets bursts of clients

    def __init__(self, address: tuple[str, int], gateway: ActionGateway) -> None:
        super().__init__(address, _Handler)
        self.gateway = gateway
        self._inflight = 0
        self._idle = threading.Condition()

    # Counted from accept (on the serving thread) until the worker finishes.
    def process_request(self, request, client_address) -> None:
        with self._idle:
            self._inflight += 1
        super().process_request(request, client_address)

    def process_request_thread(self, request, client_address) -> None:
        try:
            super().process_request_thread(request, client_address)
        finally:
            with self._idle:
                self._inflight -= 1
                self._idle.notify_all()

    def wait_idle(self, timeout: float) -> bool:
        with self._idle:
            return self._idle.wait_for(lambda: self._inflight == 0, timeout)


class GatewayServer:
    """A running gateway; use :func:`serve` to create one."""

    def __init__(self, backend: PolicyBackend, host: str = "127.0.0.1", port: int = 8000) -> None:
        self.gateway = ActionGateway(backend)
        try:
            self._httpd = _GatewayHTTPServer((host, port), self.gateway)
        except OSError as exc:
            if exc.errno == errno.EADDRINUSE:
                raise PortInUse(f"port {port} on {host} is already in use") from exc
            raise ExternalError(f"cannot bind {host}:{port}: {exc}") from exc
        self._thread: threading.Thread | None = None

    @property
    def host(self) -> str:
        return self._httpd.server_address[0]

    @property
    def port(self) -> int:
        return self._httpd.server_address[1]

    @property
    def url(self) -> str:
        return f"http://{self.host}:{self.port}"

    def start(self) -> GatewayServer:
        self._thread = threading.Thread(
            target=self._httpd.serve_forever, args=(POLL_INTERVAL,), name="dexkit-gateway", daemon=True
        )
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        self._httpd.serve_forever(POLL_INTERVAL)

    def shutdown(self, drain_timeout: float = 30.0) -> None:
        """Stop accepting, let in-flight requests finish, then close the listener."""
        self._httpd.shutdown()
        if not self._httpd.wait_idle(drain_timeout):
            log.warning("gateway closed with requests still in flight")
        self._httpd.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def __enter__(self) -> GatewayServer:
        return self.start() if self._thread is None else self

    def __exit__(self, *exc: Any) -> None:
        self.shutdown()


def serve(backend: PolicyBackend, host: str = "127.0.0.1", port: int = 8000, *, start: bool = True) -> GatewayServer:
    server = GatewayServer(backend, host, port)
    return server.start() if start else server
