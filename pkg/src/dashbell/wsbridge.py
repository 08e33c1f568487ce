"""WebSocket bridge: the owner console's way onto the owner protocol.

Browsers cannot open raw TCP, so this listener speaks RFC 6455 and relays
JSON message bodies to and from the server core, one core connection per
socket. The protocol rules are identical to the native owner port; the only
bridge-specific nicety is that a first frame holding a bare hex token is
expanded into a hello for clients too thin to build one.

The implementation is deliberately small: text/binary/ping/pong/close,
client-to-server masking enforced, fragmented messages reassembled, no
extensions. It matches the threading model of the rest of the live runtime
(one reader thread per connection, core calls under the shared lock).
"""

from __future__ import annotations

import base64
import hashlib
import itertools
import json
import logging
import socket
import struct
import threading
from typing import Any

from . import protocol

log = logging.getLogger(__name__)

GUID = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11"
MAX_MESSAGE_BYTES = protocol.MAX_FRAME_BYTES
_TOKEN_FIRST_FRAME = True

OP_CONT, OP_TEXT, OP_BINARY = 0x0, 0x1, 0x2
OP_CLOSE, OP_PING, OP_PONG = 0x8, 0x9, 0xA


class HandshakeError(Exception):
    pass


def accept_key(client_key: str) -> str:
    digest = hashlib.sha1((client_key + GUID).encode("ascii")).digest()
    return base64.b64encode(digest).decode("ascii")


def _read_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    while n > 0:
        data = sock.recv(min(n, 65536))
        if not data:
            raise ConnectionError("peer closed mid-frame")
        chunks.append(data)
        n -= len(data)
    return b"".join(chunks)


def read_handshake(sock: socket.socket) -> dict[str, str]:
    """Read the upgrade request; returns lower-cased headers."""
    buf = b""
    while b"\r\n\r\n" not in buf:
        if len(buf) > 16384:
            raise HandshakeError("oversize handshake")
        data = sock.recv(4096)
        if not data:
            raise HandshakeError("peer closed during handshake")
        buf += data
    head = buf.split(b"\r\n\r\n", 1)[0].decode("latin-1")
    lines = head.split("\r\n")
    if not lines[0].startswith("GET "):
        raise HandshakeError("not a GET upgrade")
    headers: dict[str, str] = {}
    for line in lines[1:]:
        if ":" in line:
            name, value = line.split(":", 1)
            headers[name.strip().lower()] = value.strip()
    if headers.get("upgrade", "").lower() != "websocket":
        raise HandshakeError("missing websocket upgrade")
    if "sec-websocket-key" not in headers:
        raise HandshakeError("missing sec-websocket-key")
    return headers


def write_accept(sock: socket.socket, headers: dict[str, str]) -> None:
    response = (
        "HTTP/1.1 101 Switching Protocols\r\n"
        "Upgrade: websocket\r\n"
        "Connection: Upgrade\r\n"
        f"Sec-WebSocket-Accept: {accept_key(headers['sec-websocket-key'])}\r\n"
        "\r\n"
    )
    sock.sendall(response.encode("ascii"))


def encode_frame(opcode: int, payload: bytes, fin: bool = True) -> bytes:
    head = bytes([(0x80 if fin else 0) | opcode])
    n = len(payload)
    if n < 126:
        head += bytes([n])
    elif n < 65536:
        head += bytes([126]) + struct.pack(">H", n)
    else:
        head += bytes([127]) + struct.pack(">Q", n)
    return head + payload


def read_frame(sock: socket.socket) -> tuple[int, bool, bytes]:
    """Returns (opcode, fin, unmasked payload); raises on protocol abuse."""
    b0, b1 = _read_exact(sock, 2)
    fin = bool(b0 & 0x80)
    if b0 & 0x70:
        raise HandshakeError("reserved bits set (no extensions negotiated)")
    opcode = b0 & 0x0F
    masked = bool(b1 & 0x80)
    n = b1 & 0x7F
    if n == 126:
        (n,) = struct.unpack(">H", _read_exact(sock, 2))
    elif n == 127:
        (n,) = struct.unpack(">Q", _read_exact(sock, 8))
    if n > MAX_MESSAGE_BYTES:
        raise HandshakeError("frame too large")
    if not masked:
        raise HandshakeError("client frames must be masked")
    mask = _read_exact(sock, 4)
    payload = bytearray(_read_exact(sock, n))
    for i in range(len(payload)):
        payload[i] ^= mask[i % 4]
    return opcode, fin, bytes(payload)


class WsBridge:
    """Accepts WebSocket owners and adapts them onto the server core."""

    def __init__(self, core, lock: threading.Lock, host: str = "127.0.0.1",
                 port: int = protocol.DEFAULT_BRIDGE_PORT, conn_ids=None):
        self.core = core
        self.lock = lock
        self.host = host
        self._requested_port = port
        self.ids = conn_ids if conn_ids is not None else itertools.count(10_000)
        self._lsock: socket.socket | None = None
        self._socks: dict[int, socket.socket] = {}

    @property
    def port(self) -> int:
        assert self._lsock is not None
        return self._lsock.getsockname()[1]

    def start(self) -> None:
        lsock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        lsock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        lsock.bind((self.host, self._requested_port))
        lsock.listen(16)
        self._lsock = lsock
        threading.Thread(target=self._accept_loop, daemon=True).start()

    def stop(self) -> None:
        if self._lsock is not None:
            try:
                self._lsock.close()
            except OSError:
                pass
        for sock in list(self._socks.values()):
            try:
                sock.close()
            except OSError:
                pass

    def _accept_loop(self) -> None:
        while True:
            try:
                sock, _ = self._lsock.accept()
            except OSError:
                return
            threading.Thread(target=self._serve, args=(sock,), daemon=True).start()

    # -- per-connection ----------------------------------------------------------

    def _serve(self, sock: socket.socket) -> None:
        conn_id = next(self.ids)
        try:
            headers = read_handshake(sock)
            write_accept(sock, headers)
        except (HandshakeError, OSError) as exc:
            log.info("websocket handshake failed: %s", exc)
            try:
                sock.close()
            except OSError:
                pass
            return

        send_lock = threading.Lock()

        def send_fn(message: dict[str, Any]) -> None:
            data = protocol.encode_payload(message)
            try:
                with send_lock:
                    sock.sendall(encode_frame(OP_TEXT, data))
            except OSError:
                pass

        def close_fn() -> None:
            try:
                with send_lock:
                    sock.sendall(encode_frame(OP_CLOSE, struct.pack(">H", 1000)))
            except OSError:
                pass
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass

        self._socks[conn_id] = sock
        with self.lock:
            self.core.on_connect(conn_id, "bridge", send_fn, close_fn)
        try:
            self._frame_loop(conn_id, sock, send_lock)
        finally:
            self._socks.pop(conn_id, None)
            try:
                sock.close()
            except OSError:
                pass
            with self.lock:
                self.core.on_disconnect(conn_id)

    def _frame_loop(self, conn_id: int, sock: socket.socket,
                    send_lock: threading.Lock) -> None:
        fragments: list[bytes] = []
        first = True
        while True:
            try:
                opcode, fin, payload = read_frame(sock)
            except (HandshakeError, ConnectionError, OSError) as exc:
                log.debug("websocket conn %d read ended: %s", conn_id, exc)
                return
            if opcode == OP_CLOSE:
                try:
                    with send_lock:
                        sock.sendall(encode_frame(OP_CLOSE, payload[:2]))
                except OSError:
                    pass
                return
            if opcode == OP_PING:
                with send_lock:
                    try:
                        sock.sendall(encode_frame(OP_PONG, payload))
                    except OSError:
                        return
                continue
            if opcode == OP_PONG:
                continue
            if opcode in (OP_TEXT, OP_BINARY):
                fragments = [payload]
            elif opcode == OP_CONT:
                if not fragments:
                    return
                fragments.append(payload)
            else:
                return
            if not fin:
                continue
            data = b"".join(fragments)
            fragments = []
            if len(data) > MAX_MESSAGE_BYTES:
                return
            self._deliver(conn_id, data, first)
            first = False

    def _deliver(self, conn_id: int, data: bytes, first: bool) -> None:
        text = data.decode("utf-8", errors="replace").strip()
        if first and _TOKEN_FIRST_FRAME and protocol.token_valid(text):
            message: dict[str, Any] = {
                "type": "hello", "seq": 1, "role": "bridge", "token": text,
            }
        else:
            try:
                message = protocol.parse_payload(text)
            except protocol.ProtocolError as exc:
                with self.lock:
                    self.core.on_protocol_error(conn_id, exc)
                return
        with self.lock:
            self.core.on_message(conn_id, message)
