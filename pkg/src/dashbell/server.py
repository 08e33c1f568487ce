"""Coordination server core: auth, routing, persistence, notification.

The core is transport-agnostic. A transport calls on_connect/on_message/
on_protocol_error/on_disconnect/on_tick from a single logical thread and
provides per-connection send/close callables; the core never touches a
socket. That split is what lets the in-process harness and the real socket
runtime share every line of behavior.

Connection policy on breaches: authentication failures, role violations,
malformed or unknown messages, oversize frames, and sequence regressions
all terminate the connection after one error frame. Application-level
misses (no such entry, already decided, storage trouble) answer with an
error frame and keep the connection open.
"""

from __future__ import annotations

import base64
import logging
from dataclasses import dataclass, field
from typing import Any, Callable

from . import faults, protocol
from .store import OwnerSettings, Store, StorageError

log = logging.getLogger(__name__)

# Which authenticated roles each listening port admits.
PORT_ROLES = {
    "edge": frozenset({"edge"}),
    "owner": frozenset({"owner"}),
    "bridge": frozenset({"owner", "bridge"}),
}


@dataclass
class Conn:
    conn_id: int
    port_kind: str
    send_fn: Callable[[dict], None]
    close_fn: Callable[[], None]
    role: str | None = None
    seq_out: int = 0
    seq_in: protocol.SeqTracker = field(default_factory=protocol.SeqTracker)
    open: bool = True


class ServerCore:
    def __init__(self, store: Store, monitor: faults.FaultMonitor, clock, token: str):
        self.store = store
        self.monitor = monitor
        self.clock = clock
        self.token = token

        self._conns: dict[int, Conn] = {}
        self.edge_conn_id: int | None = None
        self.owner_conn_ids: list[int] = []  # insertion order, owner + bridge roles
        self._store_detail = ""
        self._store_ok = True

        self.counters = {
            "uploads": 0,
            "uploads_deduped": 0,
            "notify_pushed": 0,
            "notify_replayed": 0,
            "notify_missed": 0,
            "notify_suppressed_dnd": 0,
            "notify_suppressed_disabled": 0,
            "outbox_email": 0,
            "outbox_text": 0,
            "decisions_applied": 0,
            "decisions_granted": 0,
            "decisions_denied": 0,
            "decisions_rejected": 0,
            "faults_reported": 0,
            "errors_sent": 0,
            "conns_closed_by_server": 0,
        }

        now = self.clock.now_ms()
        monitor.on_failure = self._on_component_failure
        for component in faults.EDGE_PERIPHERALS:
            monitor.register(component, now)
        monitor.register("store", now, kind=faults.EVENT_KIND)
        monitor.register("edge_channel", now, kind=faults.EVENT_KIND)
        monitor.register("owner_channel", now, kind=faults.EVENT_KIND)
        monitor.observe_channel("store", faults.OK, "", now)
        monitor.observe_channel("edge_channel", faults.SUSPECTED, "edge not yet connected", now)
        monitor.observe_channel("owner_channel", faults.SUSPECTED, "no owner connected", now)

    # -- transport entry points -------------------------------------------------

    def on_connect(self, conn_id: int, port_kind: str,
                   send_fn: Callable[[dict], None], close_fn: Callable[[], None]) -> None:
        if port_kind not in PORT_ROLES:
            raise ValueError(f"unknown port kind {port_kind!r}")
        self._conns[conn_id] = Conn(conn_id, port_kind, send_fn, close_fn)

    def on_disconnect(self, conn_id: int) -> None:
        conn = self._conns.pop(conn_id, None)
        if conn is None:
            return
        conn.open = False
        now = self.clock.now_ms()
        if conn_id == self.edge_conn_id:
            self.edge_conn_id = None
            self.monitor.observe_channel("edge_channel", faults.FAILED, "connection lost", now)
        if conn_id in self.owner_conn_ids:
            self.owner_conn_ids.remove(conn_id)
            if not self.owner_conn_ids:
                self.monitor.observe_channel(
                    "owner_channel", faults.SUSPECTED, "no owner connected", now)

    def on_protocol_error(self, conn_id: int, exc: protocol.ProtocolError) -> None:
        """Transport-level decode failure on this connection's byte stream."""
        conn = self._conns.get(conn_id)
        if conn is not None:
            self._breach(conn, exc)

    def on_tick(self) -> None:
        self.monitor.tick(self.clock.now_ms())

    def on_message(self, conn_id: int, message: dict[str, Any]) -> None:
        conn = self._conns.get(conn_id)
        if conn is None or not conn.open:
            return
        try:
            protocol.validate_message(message)
        except protocol.ProtocolError as exc:
            self._breach(conn, exc)
            return

        if conn.role is None:
            self._handle_hello(conn, message)
            return

        try:
            conn.seq_in.accept(message["seq"])
            if message["type"] == "hello":
                raise protocol.RoleViolation("hello is only legal as the first message")
            protocol.check_sendable(conn.role, message["type"])
        except protocol.ProtocolError as exc:
            self._breach(conn, exc)
            return

        handler = {
            "entry_upload": self._handle_upload,
            "heartbeat": self._handle_heartbeat,
            "decision": self._handle_decision,
            "settings_update": self._handle_settings,
            "history_request": self._handle_history,
            "error": self._handle_client_error,
        }[message["type"]]
        handler(conn, message)

    # -- send plumbing ------------------------------------------------------------

    def _send(self, conn: Conn, body: dict[str, Any]) -> None:
        if not conn.open:
            return
        conn.seq_out += 1
        body["seq"] = conn.seq_out
        conn.send_fn(body)

    def _send_error(self, conn: Conn, code: str, text: str, **extra: Any) -> None:
        self.counters["errors_sent"] += 1
        if not conn.open:
            return
        conn.seq_out += 1
        conn.send_fn(protocol.error_message(conn.seq_out, code, text, **extra))

    def _close(self, conn: Conn) -> None:
        if not conn.open:
            return
        conn.open = False
        self.counters["conns_closed_by_server"] += 1
        conn.close_fn()

    def _breach(self, conn: Conn, exc: protocol.ProtocolError) -> None:
        log.warning("conn %d breach: %s: %s", conn.conn_id, exc.code, exc)
        self._send_error(conn, exc.code, str(exc))
        self._close(conn)

    def _broadcast_owners(self, body: dict[str, Any]) -> None:
        for conn_id in list(self.owner_conn_ids):
            conn = self._conns.get(conn_id)
            if conn is not None and conn.open:
                self._send(conn, dict(body))

    # -- hello / auth ---------------------------------------------------------------

    def _handle_hello(self, conn: Conn, message: dict[str, Any]) -> None:
        try:
            conn.seq_in.accept(message["seq"])
            role = protocol.authenticate(message, self.token)
            if role not in PORT_ROLES[conn.port_kind]:
                raise protocol.RoleViolation(
                    f"role {role} not admitted on the {conn.port_kind} port")
        except protocol.ProtocolError as exc:
            self._breach(conn, exc)
            return
        conn.role = role
        now = self.clock.now_ms()
        if role == "edge":
            self.edge_conn_id = conn.conn_id
            self._send(conn, {"type": "hello_ack", "role": "edge"})
            self.monitor.observe_channel("edge_channel", faults.OK, "", now)
            self._redeliver_actuations(conn)
        else:
            self.owner_conn_ids.append(conn.conn_id)
            self._send(conn, {
                "type": "hello_ack",
                "role": role,
                "settings": self.store.settings.to_wire(),
            })
            self.monitor.observe_channel("owner_channel", faults.OK, "", now)
            self._replay_undecided(conn)

    def _redeliver_actuations(self, conn: Conn) -> None:
        """Actuation delivery is not persisted, so every edge session starts
        with a full replay of decided verdicts; the edge deduplicates."""
        decided = [rec for rec in self.store.entries.values() if rec.decided()]
        decided.sort(key=lambda rec: (rec.decided_at, rec.entry_id))
        for rec in decided:
            verdict = "granted" if rec.access_granted == "yes" else "denied"
            self._send(conn, {"type": "actuate", "entry_id": rec.entry_id, "verdict": verdict})

    def _replay_undecided(self, conn: Conn) -> None:
        for entry_id in self.store.order:
            rec = self.store.entries[entry_id]
            if not rec.decided():
                self.counters["notify_replayed"] += 1
                self._send(conn, {"type": "notify", "entry": rec.to_wire(), "replay": True})

    # -- entry intake -----------------------------------------------------------------

    def _handle_upload(self, conn: Conn, message: dict[str, Any]) -> None:
        press_id = message["press_id"]
        existing = self.store.press_index.get(press_id)
        if existing is not None:
            self.counters["uploads_deduped"] += 1
            self._send(conn, {"type": "entry_ack", "press_id": press_id, "entry_id": existing})
            return

        image = None
        if "image_b64" in message:
            try:
                image = base64.b64decode(message["image_b64"], validate=True)
            except (ValueError, TypeError):
                self._breach(conn, protocol.MalformedPayload("image_b64", "invalid base64"))
                return
        now = self.clock.now_ms()
        try:
            rec = self.store.create_entry(
                press_id=press_id,
                received_at=now,
                pressed_at=message["timestamp"],
                camera_fault=message["camera_fault"],
                image=image,
            )
        except StorageError as exc:
            self._storage_trouble(conn, exc)
            return
        self._store_recovered()
        self.counters["uploads"] += 1
        self._send(conn, {"type": "entry_ack", "press_id": press_id, "entry_id": rec.entry_id})
        self.route_notification(rec)

    def route_notification(self, rec) -> set[str]:
        """Fan one new entry out to the owner; returns the channels used.

        Disabled service suppresses everything. Do-not-disturb suppresses
        the push (and the ringer that rides on it) but never the email or
        text outbox writes.
        """
        settings = self.store.settings
        if not settings.service_enabled:
            self.counters["notify_suppressed_disabled"] += 1
            return set()
        used: set[str] = set()
        if settings.do_not_disturb:
            self.counters["notify_suppressed_dnd"] += 1
        elif not self.owner_conn_ids:
            # Nobody to push to right now; the entry stays pending and is
            # replayed to the next owner that connects.
            self.counters["notify_missed"] += 1
        else:
            self._broadcast_owners({"type": "notify", "entry": rec.to_wire(), "replay": False})
            self.counters["notify_pushed"] += 1
            used.add("push")
            if "ringer" in settings.alert_channels:
                used.add("ringer")
        now = self.clock.now_ms()
        image_note = rec.image_url if rec.image_url is not None else "unavailable"
        text = f"visitor at the door (entry {rec.entry_id}, pressed at {rec.pressed_at} ms, image {image_note})"
        for channel in ("email", "text"):
            if channel in settings.alert_channels:
                try:
                    self.store.outbox_append(channel, rec.entry_id, now, text)
                except StorageError as exc:
                    self._storage_failed(str(exc))
                    continue
                self.counters[f"outbox_{channel}"] += 1
                used.add(channel)
        return used

    # -- decisions ------------------------------------------------------------------

    def _handle_decision(self, conn: Conn, message: dict[str, Any]) -> None:
        entry_id, verdict = message["entry_id"], message["verdict"]
        rec = self.store.entries.get(entry_id)
        if rec is None:
            self.counters["decisions_rejected"] += 1
            self._send_error(conn, "no-such-entry", f"entry {entry_id} does not exist",
                             entry_id=entry_id)
            return
        if rec.decided():
            self.counters["decisions_rejected"] += 1
            self._send_error(conn, "already-decided",
                             f"entry {entry_id} was already decided", entry_id=entry_id)
            return
        now = self.clock.now_ms()
        try:
            rec = self.store.decide_entry(
                entry_id, "yes" if verdict == "granted" else "no", now)
        except StorageError as exc:
            self._storage_trouble(conn, exc)
            return
        self._store_recovered()
        self.counters["decisions_applied"] += 1
        self.counters["decisions_granted" if verdict == "granted" else "decisions_denied"] += 1
        self._broadcast_owners({
            "type": "decision_ack",
            "entry_id": entry_id,
            "verdict": verdict,
            "decided_at": now,
        })
        edge = self._conns.get(self.edge_conn_id) if self.edge_conn_id is not None else None
        if edge is not None and edge.open:
            self._send(edge, {"type": "actuate", "entry_id": entry_id, "verdict": verdict})
        # No edge connected: nothing to do now. The next edge hello replays
        # every decided verdict, which covers this entry too.

    # -- the rest of the owner surface ---------------------------------------------

    def _handle_history(self, conn: Conn, message: dict[str, Any]) -> None:
        records = self.store.history(message["from_ms"], message["to_ms"], message["limit"])
        self._send(conn, {
            "type": "history_response",
            "entries": [rec.to_wire() for rec in records],
        })

    def _handle_settings(self, conn: Conn, message: dict[str, Any]) -> None:
        settings = OwnerSettings.from_wire(message["settings"])
        try:
            self.store.change_settings(settings, self.clock.now_ms())
        except StorageError as exc:
            self._storage_trouble(conn, exc)
            return
        self._store_recovered()
        self._broadcast_owners({"type": "settings_ack", "settings": settings.to_wire()})

    def _handle_heartbeat(self, conn: Conn, message: dict[str, Any]) -> None:
        self.monitor.observe_heartbeat(
            message["component"], message["status"], message.get("detail", ""),
            self.clock.now_ms())

    def _handle_client_error(self, conn: Conn, message: dict[str, Any]) -> None:
        log.warning("conn %d reported error %s: %s",
                    conn.conn_id, message.get("code"), message.get("text"))

    # -- storage + fault surfacing ----------------------------------------------------

    def _storage_trouble(self, conn: Conn, exc: StorageError) -> None:
        self._storage_failed(str(exc))
        self._send_error(conn, "storage-error", str(exc))

    def _storage_failed(self, detail: str) -> None:
        self._store_ok = False
        self.monitor.observe_channel("store", faults.FAILED, detail, self.clock.now_ms())

    def _store_recovered(self) -> None:
        if not self._store_ok:
            self._store_ok = True
            self.monitor.observe_channel("store", faults.OK, "", self.clock.now_ms())

    def _on_component_failure(self, component: str, detail: str, now: int) -> None:
        self.counters["faults_reported"] += 1
        self._broadcast_owners({
            "type": "fault_report",
            "component": component,
            "state": faults.FAILED,
            "detail": detail,
            "at": now,
        })

    # -- introspection ------------------------------------------------------------------

    def health(self) -> dict[str, Any]:
        return self.monitor.diagnose(self.clock.now_ms()).to_wire()
