"""Plain-HTTP frontend: entry images and the health snapshot.

Owner-facing web clients cannot read the wire protocol's binary frames, so
images and health live on a separate, read-only HTTP port. Images are
served both as the stored grayscale original and as a browser-friendly PNG
alias rendered on the fly.
"""

from __future__ import annotations

import io
import json
import logging
import re
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Callable

from PIL import Image

from .devices import parse_pgm

log = logging.getLogger(__name__)

_IMAGE_PATH = re.compile(r"^/images/(\d+)\.(pgm|png)$")


class HttpFrontend:
    def __init__(self, store, health_fn: Callable[[], dict[str, Any]],
                 host: str = "127.0.0.1", port: int = 0):
        self.store = store
        self.health_fn = health_fn
        frontend = self

        class Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"

            def log_message(self, fmt, *args):
                log.debug("http: " + fmt, *args)

            def do_GET(self):  # noqa: N802  (stdlib handler naming)
                frontend._handle(self)

        self._server = ThreadingHTTPServer((host, port), Handler)
        self._server.daemon_threads = True
        self._thread: threading.Thread | None = None

    @property
    def port(self) -> int:
        return self._server.server_address[1]

    def start(self) -> None:
        self._thread = threading.Thread(
            target=lambda: self._server.serve_forever(poll_interval=0.05), daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=2)

    # -- request handling -------------------------------------------------------

    def _handle(self, request: BaseHTTPRequestHandler) -> None:
        path = request.path.split("?", 1)[0]
        if path == "/healthz":
            self._respond_json(request, 200, self.health_fn())
            return
        match = _IMAGE_PATH.match(path)
        if match is not None:
            self._respond_image(request, int(match.group(1)), match.group(2))
            return
        self._respond_json(request, 404, {"error": "not found"})

    def _respond_image(self, request, entry_id: int, fmt: str) -> None:
        try:
            with open(self.store.image_path(entry_id), "rb") as fh:
                pgm = fh.read()
        except FileNotFoundError:
            self._respond_json(request, 404, {"error": f"no image for entry {entry_id}"})
            return
        if fmt == "pgm":
            self._respond_bytes(request, "image/x-portable-graymap", pgm)
            return
        width, height, pixels = parse_pgm(pgm)
        buf = io.BytesIO()
        Image.frombytes("L", (width, height), pixels).save(buf, format="PNG")
        self._respond_bytes(request, "image/png", buf.getvalue())

    def _respond_bytes(self, request, content_type: str, body: bytes) -> None:
        request.send_response(200)
        request.send_header("Content-Type", content_type)
        request.send_header("Content-Length", str(len(body)))
        request.end_headers()
        request.wfile.write(body)

    def _respond_json(self, request, status: int, payload: dict[str, Any]) -> None:
        body = json.dumps(payload, sort_keys=True).encode()
        request.send_response(status)
        request.send_header("Content-Type", "application/json")
        request.send_header("Content-Length", str(len(body)))
        request.end_headers()
        request.wfile.write(body)
