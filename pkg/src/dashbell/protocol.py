"""Wire protocol shared by the edge, the server, owner clients, and the bridge.

Frames are length-prefixed: a 4-byte big-endian byte count followed by that
many bytes of UTF-8 JSON. Every payload is a JSON object with a string
``type`` tag and an unsigned 64-bit ``seq`` that increases per connection
and direction. The same payload text travels over TCP (framed) and over the
WebSocket bridge (one payload per text frame, no length prefix).

Message vocabulary:
  hello / hello_ack           channel establishment + auth
  entry_upload / entry_ack    edge -> server visitor request
  notify                      server -> owner push ("ringer")
  decision / decision_ack     owner verdict
  actuate                     server -> edge verdict relay
  heartbeat                   edge component liveness
  fault_report                server -> owner fault transition
  settings_update / settings_ack
  history_request / history_response
  error                       in-band error (code + text) before close
"""

from __future__ import annotations

import hmac
import json
import secrets
import struct
from typing import Any

MAX_FRAME_BYTES = 16 * 1024 * 1024  # hard cap per frame
_LEN = struct.Struct(">I")

MESSAGE_TYPES = frozenset({
    "hello", "hello_ack",
    "entry_upload", "entry_ack",
    "notify",
    "decision", "decision_ack",
    "actuate",
    "heartbeat",
    "fault_report",
    "settings_update", "settings_ack",
    "history_request", "history_response",
    "error",
})

ROLES = ("edge", "owner", "bridge")
VERDICTS = ("granted", "denied")
ALERT_CHANNELS = ("email", "text", "ringer")
HEARTBEAT_COMPONENTS = ("edge", "camera", "buzzer", "servo")

# Message types each authenticated role may send. hello is only legal as the
# first message of a connection; everything else here is post-auth. The
# server-emitted types never appear, so a client echoing them back is a
# role violation by construction.
ROLE_SENDABLE: dict[str, frozenset[str]] = {
    "edge": frozenset({"entry_upload", "heartbeat", "error"}),
    "owner": frozenset({"decision", "settings_update", "history_request", "error"}),
    "bridge": frozenset({"decision", "settings_update", "history_request", "error"}),
}

DEFAULT_EDGE_PORT = 7001
DEFAULT_OWNER_PORT = 7002
DEFAULT_BRIDGE_PORT = 7003
DEFAULT_HTTP_PORT = 7080

_U64_MAX = 2**64 - 1


class ProtocolError(Exception):
    """Typed protocol failure carrying a machine-readable error code."""

    code = "protocol-error"

    def __init__(self, text: str):
        super().__init__(text)
        self.text = text


class FrameTooLarge(ProtocolError):
    code = "frame-too-large"


class OversizePayload(ProtocolError):
    code = "oversize-payload"


class MalformedPayload(ProtocolError):
    code = "malformed-payload"

    def __init__(self, field: str, text: str):
        super().__init__(f"{field}: {text}")
        self.field = field


class UnknownMessage(ProtocolError):
    code = "unknown-message"


class AuthFailure(ProtocolError):
    code = "auth-failure"


class RoleViolation(ProtocolError):
    code = "role-violation"


class BadSequence(ProtocolError):
    code = "bad-sequence"


def encode_payload(message: dict[str, Any]) -> bytes:
    """Serialize a message to its canonical UTF-8 payload text."""
    return json.dumps(
        message, sort_keys=True, separators=(",", ":"), ensure_ascii=False
    ).encode("utf-8")


def frame_bytes(payload: bytes) -> bytes:
    """Wrap an already-serialized payload in a length prefix."""
    if len(payload) == 0:
        raise OversizePayload("zero-length frames are invalid")
    if len(payload) > MAX_FRAME_BYTES:
        raise OversizePayload(f"payload is {len(payload)} bytes, cap is {MAX_FRAME_BYTES}")
    return _LEN.pack(len(payload)) + payload


def encode_frame(message: dict[str, Any]) -> bytes:
    """Encode one message as a complete wire frame."""
    return frame_bytes(encode_payload(message))


def parse_payload(payload: bytes | str) -> dict[str, Any]:
    """Parse and validate one payload (without the length prefix).

    Shared by the framed decoder and the WebSocket bridge, which receives
    identical payload text one per WS frame.
    """
    if isinstance(payload, bytes):
        try:
            text = payload.decode("utf-8")
        except UnicodeDecodeError:
            raise MalformedPayload("payload", "not valid UTF-8") from None
    else:
        text = payload
    try:
        message = json.loads(text)
    except (json.JSONDecodeError, RecursionError):
        raise MalformedPayload("payload", "not valid JSON") from None
    if not isinstance(message, dict):
        raise MalformedPayload("payload", "not a JSON object")
    validate_message(message)
    return message


def decode_frame(buf: bytes | bytearray) -> tuple[dict[str, Any], int] | None:
    """Decode one frame from the head of ``buf``.

    Returns ``(message, bytes_consumed)`` for a complete frame, or ``None``
    when more bytes are needed (nothing consumed). Raises a ProtocolError
    subclass on malformed input; arbitrary bytes never crash beyond that.
    """
    if len(buf) < _LEN.size:
        return None
    (length,) = _LEN.unpack(bytes(buf[: _LEN.size]))
    if length > MAX_FRAME_BYTES:
        raise FrameTooLarge(f"declared length {length} exceeds cap {MAX_FRAME_BYTES}")
    if length == 0:
        raise MalformedPayload("length", "zero-length frames are invalid")
    end = _LEN.size + length
    if len(buf) < end:
        return None
    message = parse_payload(bytes(buf[_LEN.size : end]))
    return message, end


class FrameDecoder:
    """Stateful per-connection decoder; each connection owns exactly one.

    feed() buffers arbitrary byte chunks and yields every complete message,
    in order. Once a ProtocolError is raised the stream is poisoned and the
    connection should be closed.
    """

    def __init__(self) -> None:
        self._buf = bytearray()

    def pending(self) -> int:
        return len(self._buf)

    def feed(self, data: bytes) -> list[dict[str, Any]]:
        self._buf.extend(data)
        out: list[dict[str, Any]] = []
        while True:
            decoded = decode_frame(self._buf)
            if decoded is None:
                return out
            message, consumed = decoded
            del self._buf[:consumed]
            out.append(message)


def _require(message: dict[str, Any], field: str, kinds: type | tuple) -> Any:
    if field not in message:
        raise MalformedPayload(field, "missing required field")
    value = message[field]
    if not isinstance(value, kinds) or (kinds is int and isinstance(value, bool)):
        raise MalformedPayload(field, f"expected {kinds}, got {type(value).__name__}")
    return value


def _require_uint(message: dict[str, Any], field: str) -> int:
    value = _require(message, field, int)
    if isinstance(value, bool) or not (0 <= value <= _U64_MAX):
        raise MalformedPayload(field, "expected unsigned 64-bit integer")
    return value


def validate_settings(settings: Any) -> dict[str, Any]:
    """Validate an OwnerSettings object as carried on the wire."""
    if not isinstance(settings, dict):
        raise MalformedPayload("settings", "expected object")
    for flag in ("service_enabled", "do_not_disturb"):
        if not isinstance(settings.get(flag), bool):
            raise MalformedPayload(flag, "expected boolean")
    channels = settings.get("alert_channels")
    if not isinstance(channels, list):
        raise MalformedPayload("alert_channels", "expected list")
    for ch in channels:
        if ch not in ALERT_CHANNELS:
            raise MalformedPayload("alert_channels", f"unknown channel {ch!r}")
    if len(set(channels)) != len(channels):
        raise MalformedPayload("alert_channels", "duplicate channel")
    return settings


def validate_message(message: dict[str, Any]) -> None:
    """Structural validation of one decoded message.

    Checks the type tag, the sequence number, and the per-type required
    fields; extra fields are allowed.
    """
    mtype = message.get("type")
    if not isinstance(mtype, str):
        raise MalformedPayload("type", "missing or non-string type tag")
    if mtype not in MESSAGE_TYPES:
        raise UnknownMessage(f"unknown message type {mtype!r}")
    _require_uint(message, "seq")

    if mtype == "hello":
        role = _require(message, "role", str)
        if role not in ROLES:
            raise MalformedPayload("role", f"unknown role {role!r}")
        _require(message, "token", str)
    elif mtype == "hello_ack":
        _require(message, "role", str)
    elif mtype == "entry_upload":
        _require_uint(message, "press_id")
        _require_uint(message, "timestamp")
        _require(message, "camera_fault", bool)
        if not message["camera_fault"]:
            _require(message, "image_b64", str)
    elif mtype == "entry_ack":
        _require_uint(message, "press_id")
        _require_uint(message, "entry_id")
    elif mtype == "notify":
        _require(message, "entry", dict)
        _require(message, "replay", bool)
    elif mtype in ("decision", "actuate"):
        _require_uint(message, "entry_id")
        verdict = _require(message, "verdict", str)
        if verdict not in VERDICTS:
            raise MalformedPayload("verdict", f"must be one of {VERDICTS}")
    elif mtype == "decision_ack":
        _require_uint(message, "entry_id")
        if _require(message, "verdict", str) not in VERDICTS:
            raise MalformedPayload("verdict", f"must be one of {VERDICTS}")
        _require_uint(message, "decided_at")
    elif mtype == "heartbeat":
        component = _require(message, "component", str)
        if component not in HEARTBEAT_COMPONENTS:
            raise MalformedPayload("component", f"unknown component {component!r}")
        if _require(message, "status", str) not in ("ok", "failed"):
            raise MalformedPayload("status", "must be ok or failed")
    elif mtype == "fault_report":
        _require(message, "component", str)
        _require(message, "state", str)
        _require(message, "detail", str)
        _require_uint(message, "at")
    elif mtype in ("settings_update", "settings_ack"):
        validate_settings(_require(message, "settings", dict))
    elif mtype == "history_request":
        _require_uint(message, "from_ms")
        _require_uint(message, "to_ms")
        limit = _require_uint(message, "limit")
        if limit < 1:
            raise MalformedPayload("limit", "must be >= 1")
        if message["from_ms"] > message["to_ms"]:
            raise MalformedPayload("from_ms", "range start exceeds range end")
    elif mtype == "history_response":
        _require(message, "entries", list)
    elif mtype == "error":
        _require(message, "code", str)
        _require(message, "text", str)


def generate_token() -> str:
    """Fresh 32-byte shared secret as 64 lowercase hex characters."""
    return secrets.token_hex(32)


def token_valid(token: str) -> bool:
    return (
        isinstance(token, str)
        and len(token) == 64
        and all(c in "0123456789abcdef" for c in token)
    )


def authenticate(hello: dict[str, Any], expected_token: str) -> str:
    """Check a hello message against the deployment token.

    Returns the declared channel role on success. Token comparison is
    constant-time; any mismatch must terminate the connection.
    """
    if hello.get("type") != "hello":
        raise MalformedPayload("type", "first message must be hello")
    role = hello.get("role")
    if role not in ROLES:
        raise MalformedPayload("role", "missing or unknown role")
    token = hello.get("token")
    if not isinstance(token, str):
        raise MalformedPayload("token", "missing token")
    if not hmac.compare_digest(token.encode(), expected_token.encode()):
        raise AuthFailure("token mismatch")
    return role


def check_sendable(role: str, mtype: str) -> None:
    """Enforce one cell of the role x message-type permission matrix."""
    if mtype not in ROLE_SENDABLE[role]:
        raise RoleViolation(f"role {role} may not send {mtype}")


class SeqTracker:
    """Receive-side sequence bookkeeping for one connection direction.

    Gaps are legal (impaired links drop frames) and are counted; a repeat
    or regression is a protocol breach.
    """

    def __init__(self) -> None:
        self.last = 0
        self.gaps = 0

    def accept(self, seq: int) -> None:
        if seq <= self.last:
            raise BadSequence(f"seq {seq} after {self.last}")
        if seq != self.last + 1:
            self.gaps += seq - self.last - 1
        self.last = seq


def error_message(seq: int, code: str, text: str, **extra: Any) -> dict[str, Any]:
    return {"type": "error", "seq": seq, "code": code, "text": text, **extra}
